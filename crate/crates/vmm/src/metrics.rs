//! Monotone counters and boot timestamps.
//!
//! Counters only ever go up; a flush writes one line-delimited JSON
//! snapshot and resets nothing. Boot time is measured as process start to
//! first serial output byte, with the guest-entry instant recorded on the
//! way.

use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::kvm::VmExit;

#[derive(Debug)]
pub struct Metrics {
    started: Instant,
    pub exits_io_in: AtomicU64,
    pub exits_io_out: AtomicU64,
    pub exits_mmio_read: AtomicU64,
    pub exits_mmio_write: AtomicU64,
    pub exits_hlt: AtomicU64,
    pub exits_shutdown: AtomicU64,
    pub exits_unsupported: AtomicU64,
    pub api_requests: AtomicU64,
    pub flushes: AtomicU64,
    /// Nanoseconds from process start, 0 = not yet.
    guest_entry_ns: AtomicU64,
    first_serial_byte_ns: AtomicU64,
}

impl Default for Metrics {
    fn default() -> Self {
        Metrics::new()
    }
}

impl Metrics {
    pub fn new() -> Metrics {
        Metrics {
            started: Instant::now(),
            exits_io_in: AtomicU64::new(0),
            exits_io_out: AtomicU64::new(0),
            exits_mmio_read: AtomicU64::new(0),
            exits_mmio_write: AtomicU64::new(0),
            exits_hlt: AtomicU64::new(0),
            exits_shutdown: AtomicU64::new(0),
            exits_unsupported: AtomicU64::new(0),
            api_requests: AtomicU64::new(0),
            flushes: AtomicU64::new(0),
            guest_entry_ns: AtomicU64::new(0),
            first_serial_byte_ns: AtomicU64::new(0),
        }
    }

    fn elapsed_ns(&self) -> u64 {
        self.started.elapsed().as_nanos() as u64
    }

    /// Each VM exit increments exactly one counter.
    pub fn count_exit(&self, exit: &VmExit) {
        let counter = match exit {
            VmExit::IoIn { .. } => &self.exits_io_in,
            VmExit::IoOut { .. } => &self.exits_io_out,
            VmExit::MmioRead { .. } => &self.exits_mmio_read,
            VmExit::MmioWrite { .. } => &self.exits_mmio_write,
            VmExit::Hlt => &self.exits_hlt,
            VmExit::Shutdown => &self.exits_shutdown,
            VmExit::Unsupported { .. } => &self.exits_unsupported,
        };
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn total_exits(&self) -> u64 {
        self.exits_io_in.load(Ordering::Relaxed)
            + self.exits_io_out.load(Ordering::Relaxed)
            + self.exits_mmio_read.load(Ordering::Relaxed)
            + self.exits_mmio_write.load(Ordering::Relaxed)
            + self.exits_hlt.load(Ordering::Relaxed)
            + self.exits_shutdown.load(Ordering::Relaxed)
            + self.exits_unsupported.load(Ordering::Relaxed)
    }

    pub fn record_guest_entry(&self) {
        let _ = self.guest_entry_ns.compare_exchange(
            0,
            self.elapsed_ns().max(1),
            Ordering::Relaxed,
            Ordering::Relaxed,
        );
    }

    pub fn record_first_serial_byte(&self) {
        let _ = self.first_serial_byte_ns.compare_exchange(
            0,
            self.elapsed_ns().max(1),
            Ordering::Relaxed,
            Ordering::Relaxed,
        );
    }

    /// Milliseconds from process start to the first serial output byte,
    /// the boot-time proxy. `None` until the guest says something.
    pub fn boot_time_ms(&self) -> Option<f64> {
        let ns = self.first_serial_byte_ns.load(Ordering::Relaxed);
        (ns != 0).then(|| ns as f64 / 1e6)
    }

    pub fn guest_entry_ms(&self) -> Option<f64> {
        let ns = self.guest_entry_ns.load(Ordering::Relaxed);
        (ns != 0).then(|| ns as f64 / 1e6)
    }

    pub fn snapshot(&self, devices: serde_json::Value) -> MetricsSnapshot {
        MetricsSnapshot {
            uptime_ms: self.started.elapsed().as_millis() as u64,
            vmexits: ExitCounts {
                io_in: self.exits_io_in.load(Ordering::Relaxed),
                io_out: self.exits_io_out.load(Ordering::Relaxed),
                mmio_read: self.exits_mmio_read.load(Ordering::Relaxed),
                mmio_write: self.exits_mmio_write.load(Ordering::Relaxed),
                hlt: self.exits_hlt.load(Ordering::Relaxed),
                shutdown: self.exits_shutdown.load(Ordering::Relaxed),
                unsupported: self.exits_unsupported.load(Ordering::Relaxed),
            },
            api_requests: self.api_requests.load(Ordering::Relaxed),
            flushes: self.flushes.load(Ordering::Relaxed),
            guest_entry_ms: self.guest_entry_ms(),
            first_serial_output_ms: self.boot_time_ms(),
            devices,
        }
    }

    /// Appends one JSON line; never resets anything.
    pub fn flush(&self, devices: serde_json::Value, out: &mut dyn Write) -> io::Result<()> {
        self.flushes.fetch_add(1, Ordering::Relaxed);
        let snapshot = self.snapshot(devices);
        serde_json::to_writer(&mut *out, &snapshot)?;
        out.write_all(b"\n")?;
        out.flush()
    }
}

#[derive(Debug, Serialize)]
pub struct ExitCounts {
    pub io_in: u64,
    pub io_out: u64,
    pub mmio_read: u64,
    pub mmio_write: u64,
    pub hlt: u64,
    pub shutdown: u64,
    pub unsupported: u64,
}

#[derive(Debug, Serialize)]
pub struct MetricsSnapshot {
    pub uptime_ms: u64,
    pub vmexits: ExitCounts,
    pub api_requests: u64,
    pub flushes: u64,
    pub guest_entry_ms: Option<f64>,
    pub first_serial_output_ms: Option<f64>,
    pub devices: serde_json::Value,
}

/// Serial sink wrapper that timestamps the first byte the guest emits.
pub struct MeteredSink<W: Write + Send> {
    inner: W,
    metrics: Arc<Metrics>,
}

impl<W: Write + Send> MeteredSink<W> {
    pub fn new(inner: W, metrics: Arc<Metrics>) -> MeteredSink<W> {
        MeteredSink { inner, metrics }
    }
}

impl<W: Write + Send> Write for MeteredSink<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if !buf.is_empty() {
            self.metrics.record_first_serial_byte();
        }
        self.inner.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
