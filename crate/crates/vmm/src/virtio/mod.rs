//! Paravirtual device plumbing: split virtqueues over guest memory, the
//! MMIO transport window, and the ten-line interrupt budget.

pub mod irq;
pub mod mmio;
pub mod queue;

use std::fmt;
use std::io;

pub use irq::{IrqAllocator, IrqError, IrqTrigger, NullIrqTrigger, DEVICE_IRQ_BUDGET, FIRST_DEVICE_IRQ};
pub use mmio::{MmioBus, MmioTransport, QueueCtx, MMIO_AREA_BASE, MMIO_WINDOW_SIZE, VIRTIO_F_VERSION_1};
pub use queue::{ChainSegment, Descriptor, DescriptorChain, QueueError, Virtqueue};

/// Virtio device type ids carried in the transport's device-id register.
/// Only the three paravirtual devices of this monitor are representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum VirtioDeviceType {
    Net = 1,
    Block = 2,
    Vsock = 19,
}

impl VirtioDeviceType {
    pub fn from_id(id: u32) -> Option<VirtioDeviceType> {
        match id {
            1 => Some(VirtioDeviceType::Net),
            2 => Some(VirtioDeviceType::Block),
            19 => Some(VirtioDeviceType::Vsock),
            _ => None,
        }
    }
}

/// Errors a device can hit while servicing its queues.
#[derive(Debug)]
pub enum DeviceError {
    /// The guest handed us a broken ring; the device fails until reset.
    Queue(QueueError),
    /// The host backend (tap, file, socket) misbehaved; non-fatal.
    Backend(io::Error),
}

impl fmt::Display for DeviceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceError::Queue(e) => write!(f, "queue error: {e}"),
            DeviceError::Backend(e) => write!(f, "backend error: {e}"),
        }
    }
}

impl std::error::Error for DeviceError {}

impl From<QueueError> for DeviceError {
    fn from(e: QueueError) -> Self {
        DeviceError::Queue(e)
    }
}

impl From<io::Error> for DeviceError {
    fn from(e: io::Error) -> Self {
        DeviceError::Backend(e)
    }
}

/// Host-descriptor watch changes a device wants applied to the event loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendFdUpdate {
    /// Start watching `fd`, delivered back with `tag`. Readable edges come
    /// as `tag`; when `writable` is set, writable edges come as
    /// `tag | BACKEND_EVENT_WRITABLE`.
    Watch { fd: std::os::fd::RawFd, tag: u32, writable: bool },
    /// Stop watching the descriptor registered under `tag`.
    Unwatch { tag: u32 },
}

/// High bit marking a backend event as a writability edge.
pub const BACKEND_EVENT_WRITABLE: u32 = 1 << 31;

/// A virtio device model behind the MMIO transport.
pub trait VirtioDevice: Send {
    /// Concrete-type access for metrics and backend wiring.
    fn as_any(&self) -> &dyn std::any::Any;

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any;

    fn device_type(&self) -> VirtioDeviceType;

    /// Maximum size of each queue, one entry per queue.
    fn queue_max_sizes(&self) -> Vec<u16>;

    /// Feature bits offered to the driver; must include `VIRTIO_F_VERSION_1`.
    fn device_features(&self) -> u64;

    fn set_driver_features(&mut self, _features: u64) {}

    /// Reads from device-specific config space. Out-of-range bytes read 0.
    fn read_config(&self, offset: u64, data: &mut [u8]);

    fn write_config(&mut self, _offset: u64, _data: &[u8]) {}

    /// Driver wrote DRIVER_OK; queues the driver marked ready are live.
    fn activate(&mut self) {}

    fn reset(&mut self) {}

    /// Guest kicked `queue` via the notify register.
    fn on_queue_notify(&mut self, queue: usize, ctx: &mut QueueCtx) -> Result<(), DeviceError>;

    /// Host-side backend became ready (tag is device-defined).
    fn on_backend_event(&mut self, _tag: u32, _ctx: &mut QueueCtx) -> Result<(), DeviceError> {
        Ok(())
    }

    /// Drains pending watch/unwatch requests for host descriptors this
    /// device wants monitored. Polled by the orchestrator after every
    /// device operation.
    fn take_backend_updates(&mut self) -> Vec<BackendFdUpdate> {
        Vec::new()
    }
}
