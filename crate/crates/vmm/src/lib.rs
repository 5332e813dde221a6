//! A minimal micro-VM monitor.
//!
//! One process runs one guest: memory is assembled from host mappings and
//! registered with KVM, an uncompressed Linux kernel is loaded straight at
//! its 64-bit entry point, and exactly five devices are emulated — virtio
//! net/block/vsock over MMIO plus a legacy serial console and an i8042
//! stub. An HTTP control plane feeds typed actions to the VMM event loop;
//! a separate jailer binary confines the whole process.

pub mod api;
pub mod boot;
pub mod cli;
pub mod devices;
pub mod event_loop;
pub mod guest_memory;
pub mod kvm;
pub mod metrics;
pub mod sys;
pub mod virtio;
pub mod vmm;

pub use guest_memory::{GuestAddress, GuestMemoryMap};

#[cfg(test)]
pub(crate) mod test_mutex {
    use std::sync::{Mutex, MutexGuard, PoisonError};

    static VM_LOCK: Mutex<()> = Mutex::new(());

    /// Serializes tests that take the process-wide VM permit.
    pub fn vm_lock() -> MutexGuard<'static, ()> {
        VM_LOCK.lock().unwrap_or_else(PoisonError::into_inner)
    }
}
