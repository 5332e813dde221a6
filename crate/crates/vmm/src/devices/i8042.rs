//! Minimal i8042 keyboard controller.
//!
//! One job only: the Ctrl+Alt+Del path. The control plane injects the key
//! sequence toward the guest; the guest kernel's reboot path answers with
//! the CPU-reset command, which we turn into the monitor's reset event.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::sys::EventFd;
use crate::virtio::IrqTrigger;

/// Data port.
pub const I8042_DATA_PORT: u16 = 0x60;
/// Command/status port.
pub const I8042_COMMAND_PORT: u16 = 0x64;
/// Keyboard interrupt line.
pub const KEYBOARD_IRQ: u32 = 1;

/// Pulse-output command: the guest asks for a CPU reset.
const CMD_RESET_CPU: u8 = 0xfe;

/// Status bits: output buffer full / input buffer empty.
const STATUS_OUTPUT_FULL: u8 = 0x01;

/// Make codes for left-ctrl, left-alt, keypad-del.
pub const CTRL_ALT_DEL_SCANCODES: [u8; 3] = [0x1d, 0x38, 0x53];

pub struct KeyboardController {
    output_buffer: VecDeque<u8>,
    reset_event: EventFd,
    trigger: Option<Arc<dyn IrqTrigger>>,
    resets_emitted: u64,
}

impl KeyboardController {
    /// `reset_event` is signalled exactly once per guest reset request.
    pub fn new(reset_event: EventFd) -> KeyboardController {
        KeyboardController {
            output_buffer: VecDeque::new(),
            reset_event,
            trigger: None,
            resets_emitted: 0,
        }
    }

    pub fn set_irq_trigger(&mut self, trigger: Arc<dyn IrqTrigger>) {
        self.trigger = Some(trigger);
    }

    pub fn resets_emitted(&self) -> u64 {
        self.resets_emitted
    }

    pub fn port_in_range(port: u16) -> bool {
        port == I8042_DATA_PORT || port == I8042_COMMAND_PORT
    }

    /// Feeds the Ctrl+Alt+Del make codes to the guest and raises the
    /// keyboard interrupt so its driver notices.
    pub fn inject_ctrl_alt_del(&mut self) {
        self.output_buffer.extend(CTRL_ALT_DEL_SCANCODES);
        if let Some(t) = &self.trigger {
            let _ = t.pulse(KEYBOARD_IRQ);
        }
    }

    pub fn read(&mut self, port: u16) -> u8 {
        match port {
            I8042_DATA_PORT => self.output_buffer.pop_front().unwrap_or(0),
            I8042_COMMAND_PORT => {
                if self.output_buffer.is_empty() {
                    0
                } else {
                    STATUS_OUTPUT_FULL
                }
            }
            _ => 0,
        }
    }

    pub fn write(&mut self, port: u16, value: u8) {
        if port == I8042_COMMAND_PORT && value == CMD_RESET_CPU {
            self.resets_emitted += 1;
            let _ = self.reset_event.write(1);
        }
        // Every other command byte is accepted and ignored.
    }
}
