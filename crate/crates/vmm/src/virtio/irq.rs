//! Interrupt line budget for emulated devices.
//!
//! Every device gets its own line from a fixed pool of ten, so at most ten
//! devices can be attached to one machine. Lines are edge-pulsed through
//! whatever interrupt controller backs the trigger.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::sync::Arc;

/// First line handed to emulated devices; legacy serial (4) and the
/// keyboard controller (1) sit below this range.
pub const FIRST_DEVICE_IRQ: u32 = 5;
/// Fixed budget of device interrupt lines.
pub const DEVICE_IRQ_BUDGET: u32 = 10;

/// Something that can pulse a guest interrupt line.
pub trait IrqTrigger: Send + Sync {
    fn pulse(&self, line: u32) -> io::Result<()>;
}

/// Trigger that drops pulses; used before the hypervisor exists and in tests.
pub struct NullIrqTrigger;

impl IrqTrigger for NullIrqTrigger {
    fn pulse(&self, _line: u32) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum IrqError {
    /// All ten lines are taken.
    IrqExhausted,
    /// The device already holds a line.
    AlreadyRegistered(u32),
    /// No line allocated for this device.
    DeviceUnregistered(u32),
    /// The interrupt controller rejected the pulse.
    TriggerFailed(String),
}

impl fmt::Display for IrqError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IrqError::IrqExhausted => {
                write!(f, "interrupt budget exhausted ({DEVICE_IRQ_BUDGET} lines)")
            }
            IrqError::AlreadyRegistered(id) => {
                write!(f, "device {id} already holds an interrupt line")
            }
            IrqError::DeviceUnregistered(id) => {
                write!(f, "device {id} has no interrupt line")
            }
            IrqError::TriggerFailed(e) => write!(f, "interrupt injection failed: {e}"),
        }
    }
}

impl std::error::Error for IrqError {}

/// Hands out one line per device from the fixed budget and pulses them.
pub struct IrqAllocator {
    trigger: Arc<dyn IrqTrigger>,
    allocated: BTreeMap<u32, u32>, // device id -> line
    next_line: u32,
}

impl IrqAllocator {
    pub fn new(trigger: Arc<dyn IrqTrigger>) -> IrqAllocator {
        IrqAllocator {
            trigger,
            allocated: BTreeMap::new(),
            next_line: FIRST_DEVICE_IRQ,
        }
    }

    /// Allocates a distinct line for `device_id`.
    pub fn allocate_irq(&mut self, device_id: u32) -> Result<u32, IrqError> {
        if let Some(line) = self.allocated.get(&device_id) {
            return Err(IrqError::AlreadyRegistered(*line));
        }
        if self.next_line >= FIRST_DEVICE_IRQ + DEVICE_IRQ_BUDGET {
            return Err(IrqError::IrqExhausted);
        }
        let line = self.next_line;
        self.next_line += 1;
        self.allocated.insert(device_id, line);
        Ok(line)
    }

    pub fn line_of(&self, device_id: u32) -> Option<u32> {
        self.allocated.get(&device_id).copied()
    }

    pub fn allocated_count(&self) -> usize {
        self.allocated.len()
    }

    /// Pulses the line owned by `device_id`.
    pub fn assert_irq(&self, device_id: u32) -> Result<(), IrqError> {
        let line = self
            .line_of(device_id)
            .ok_or(IrqError::DeviceUnregistered(device_id))?;
        self.trigger
            .pulse(line)
            .map_err(|e| IrqError::TriggerFailed(e.to_string()))
    }
}
