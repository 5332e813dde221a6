//! The five emulated devices: virtio net, block and vsock over MMIO, plus
//! the legacy serial console and i8042 keyboard stub over port I/O.

pub mod block;
pub mod i8042;
pub mod net;
pub mod serial;
pub mod vsock;

use std::sync::Mutex;

pub use block::BlockDevice;
pub use i8042::KeyboardController;
pub use net::NetDevice;
pub use serial::SerialConsole;
pub use vsock::VsockDevice;

/// The closed set of device models this monitor emulates. There is no
/// sixth kind; anything else is rejected at the registry boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    Net,
    Block,
    Vsock,
    Serial,
    Keyboard,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 5] = [
        DeviceKind::Net,
        DeviceKind::Block,
        DeviceKind::Vsock,
        DeviceKind::Serial,
        DeviceKind::Keyboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::Net => "net",
            DeviceKind::Block => "block",
            DeviceKind::Vsock => "vsock",
            DeviceKind::Serial => "serial",
            DeviceKind::Keyboard => "keyboard",
        }
    }

    pub fn from_name(name: &str) -> Option<DeviceKind> {
        DeviceKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

/// Port-I/O devices serviced directly on the exiting vCPU thread; state is
/// locked because the control plane pokes it from the VMM thread too.
pub struct PortIoBus {
    pub serial: Mutex<SerialConsole>,
    pub keyboard: Mutex<KeyboardController>,
}

impl PortIoBus {
    pub fn new(serial: SerialConsole, keyboard: KeyboardController) -> PortIoBus {
        PortIoBus {
            serial: Mutex::new(serial),
            keyboard: Mutex::new(keyboard),
        }
    }

    /// Services a port read; returns false when no device decodes `port`.
    pub fn io_in(&self, port: u16, data: &mut [u8]) -> bool {
        let Some(first) = data.first_mut() else {
            return false;
        };
        if SerialConsole::port_in_range(port) {
            *first = self.serial.lock().unwrap().read(port);
        } else if KeyboardController::port_in_range(port) {
            *first = self.keyboard.lock().unwrap().read(port);
        } else {
            data.fill(0);
            return false;
        }
        data[1..].fill(0);
        true
    }

    /// Services a port write; returns false when no device decodes `port`.
    pub fn io_out(&self, port: u16, data: &[u8]) -> bool {
        let Some(first) = data.first() else {
            return false;
        };
        if SerialConsole::port_in_range(port) {
            self.serial.lock().unwrap().write(port, *first);
        } else if KeyboardController::port_in_range(port) {
            self.keyboard.lock().unwrap().write(port, *first);
        } else {
            return false;
        }
        true
    }
}

#[cfg(test)]
pub(crate) mod test_util;
