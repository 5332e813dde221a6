//! 8250/16550-family serial console over port I/O.
//!
//! Guest writes to the data register stream to the output sink (standard
//! output in production, a capture buffer in tests); host input is pushed
//! into a FIFO the guest drains through the data register. Interrupts use
//! the fixed legacy line 4.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use crate::virtio::IrqTrigger;

/// Base port of the first serial device (COM1).
pub const SERIAL_PORT_BASE: u16 = 0x3f8;
/// Number of ports the device decodes.
pub const SERIAL_PORT_COUNT: u16 = 8;
/// Legacy interrupt line for COM1.
pub const SERIAL_IRQ: u32 = 4;

// Register offsets from the base port.
const DATA: u16 = 0;
const INT_ENABLE: u16 = 1;
const INT_ID_FIFO: u16 = 2;
const LINE_CONTROL: u16 = 3;
const MODEM_CONTROL: u16 = 4;
const LINE_STATUS: u16 = 5;
const MODEM_STATUS: u16 = 6;
const SCRATCH: u16 = 7;

// Line-status bits: data ready, transmitter empty twice over.
const LSR_DATA_READY: u8 = 0x01;
const LSR_THR_EMPTY: u8 = 0x20;
const LSR_IDLE: u8 = 0x40;

// Interrupt-enable bits.
const IER_RECV: u8 = 0x01;
const IER_THR_EMPTY: u8 = 0x02;

// Interrupt-identification values.
const IIR_NONE: u8 = 0x01;
const IIR_THR_EMPTY: u8 = 0x02;
const IIR_RECV_DATA: u8 = 0x04;
const IIR_FIFO_BITS: u8 = 0xc0;

const LCR_DLAB: u8 = 0x80;

const INPUT_FIFO_CAP: usize = 256;

/// The emulated UART.
pub struct SerialConsole {
    sink: Box<dyn Write + Send>,
    input: VecDeque<u8>,
    interrupt_enable: u8,
    interrupt_id: u8,
    line_control: u8,
    modem_control: u8,
    scratch: u8,
    divisor: u16,
    trigger: Option<Arc<dyn IrqTrigger>>,
    bytes_out: u64,
    bytes_in: u64,
}

impl SerialConsole {
    pub fn new(sink: Box<dyn Write + Send>) -> SerialConsole {
        SerialConsole {
            sink,
            input: VecDeque::new(),
            interrupt_enable: 0,
            interrupt_id: IIR_NONE,
            line_control: 0x3, // 8n1
            modem_control: 0x8,
            scratch: 0,
            divisor: 12, // 9600 baud
            trigger: None,
            bytes_out: 0,
            bytes_in: 0,
        }
    }

    /// Attaches the interrupt controller; absent in pure unit tests.
    pub fn set_irq_trigger(&mut self, trigger: Arc<dyn IrqTrigger>) {
        self.trigger = Some(trigger);
    }

    pub fn bytes_out(&self) -> u64 {
        self.bytes_out
    }

    pub fn bytes_in(&self) -> u64 {
        self.bytes_in
    }

    fn dlab(&self) -> bool {
        self.line_control & LCR_DLAB != 0
    }

    fn pulse_irq(&self) {
        if let Some(t) = &self.trigger {
            let _ = t.pulse(SERIAL_IRQ);
        }
    }

    /// Queues host-side input for the guest; interrupts if enabled.
    pub fn push_input(&mut self, bytes: &[u8]) {
        for b in bytes {
            if self.input.len() == INPUT_FIFO_CAP {
                self.input.pop_front();
            }
            self.input.push_back(*b);
        }
        self.bytes_in += bytes.len() as u64;
        if !bytes.is_empty() && self.interrupt_enable & IER_RECV != 0 {
            self.interrupt_id = IIR_RECV_DATA;
            self.pulse_irq();
        }
    }

    pub fn port_in_range(port: u16) -> bool {
        (SERIAL_PORT_BASE..SERIAL_PORT_BASE + SERIAL_PORT_COUNT).contains(&port)
    }

    /// Guest read from `port`; returns the register value.
    pub fn read(&mut self, port: u16) -> u8 {
        match port.wrapping_sub(SERIAL_PORT_BASE) {
            DATA if self.dlab() => self.divisor as u8,
            DATA => {
                let byte = self.input.pop_front().unwrap_or(0);
                if self.input.is_empty() {
                    self.interrupt_id = IIR_NONE;
                }
                byte
            }
            INT_ENABLE if self.dlab() => (self.divisor >> 8) as u8,
            INT_ENABLE => self.interrupt_enable,
            INT_ID_FIFO => {
                let id = self.interrupt_id | IIR_FIFO_BITS;
                if self.interrupt_id == IIR_THR_EMPTY {
                    self.interrupt_id = IIR_NONE;
                }
                id
            }
            LINE_CONTROL => self.line_control,
            MODEM_CONTROL => self.modem_control,
            LINE_STATUS => {
                let mut status = LSR_THR_EMPTY | LSR_IDLE;
                if !self.input.is_empty() {
                    status |= LSR_DATA_READY;
                }
                status
            }
            MODEM_STATUS => 0xb0, // CTS | DSR | DCD
            SCRATCH => self.scratch,
            _ => 0,
        }
    }

    /// Guest write to `port`.
    pub fn write(&mut self, port: u16, value: u8) {
        match port.wrapping_sub(SERIAL_PORT_BASE) {
            DATA if self.dlab() => self.divisor = (self.divisor & 0xff00) | value as u16,
            DATA => {
                let _ = self.sink.write_all(&[value]);
                let _ = self.sink.flush();
                self.bytes_out += 1;
                if self.interrupt_enable & IER_THR_EMPTY != 0 {
                    self.interrupt_id = IIR_THR_EMPTY;
                    self.pulse_irq();
                }
            }
            INT_ENABLE if self.dlab() => {
                self.divisor = (self.divisor & 0x00ff) | ((value as u16) << 8)
            }
            INT_ENABLE => self.interrupt_enable = value & 0x0f,
            LINE_CONTROL => self.line_control = value,
            MODEM_CONTROL => self.modem_control = value,
            SCRATCH => self.scratch = value,
            _ => {}
        }
    }
}
