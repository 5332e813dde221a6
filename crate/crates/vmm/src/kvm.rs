//! Facade over the host hardware-virtualization interface.
//!
//! The surface mirrors the three KVM ioctl classes: system calls on
//! [`Hypervisor`], per-VM calls on [`VmHandle`], per-vCPU calls on
//! [`VcpuHandle`]. One monitor process drives exactly one VM. vCPU run
//! calls are confined to the thread that first ran the vCPU, enforced in
//! software before any ioctl is issued.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread::ThreadId;

use kvm_bindings::{
    kvm_fpu, kvm_msr_entry, kvm_pit_config, kvm_segment, kvm_userspace_memory_region, CpuId,
    Msrs, KVM_API_VERSION, KVM_MAX_CPUID_ENTRIES,
};
use kvm_ioctls::{Cap, Kvm, VcpuExit, VcpuFd, VmFd};

use crate::boot;
use crate::guest_memory::{GuestAddress, GuestMemoryMap};
use crate::virtio::IrqTrigger;

/// Only one VM handle may exist per monitor process.
static VM_EXISTS: AtomicBool = AtomicBool::new(false);

#[derive(Debug)]
pub enum KvmError {
    /// No usable virtualization device node; KVM-gated paths should skip.
    HypervisorUnavailable(String),
    /// Host interface speaks a different stable API version.
    ApiVersionMismatch { expected: i32, got: i32 },
    /// An ioctl failed; `op` names the failing stage.
    HostRejected { op: &'static str, errno: i32 },
    /// Guest memory was already registered with this VM.
    AlreadyRegistered,
    /// A VM handle already exists in this process.
    VmAlreadyExists,
    /// A vCPU with this index was already created.
    DuplicateIndex(u8),
    /// vCPU run attempted from a thread other than its owner.
    WrongThread,
    /// The run was interrupted by a signal (used to kick vCPUs out).
    Interrupted,
}

impl fmt::Display for KvmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KvmError::HypervisorUnavailable(why) => {
                write!(f, "hypervisor unavailable: {why}")
            }
            KvmError::ApiVersionMismatch { expected, got } => {
                write!(f, "hypervisor API version {got}, need {expected}")
            }
            KvmError::HostRejected { op, errno } => {
                write!(f, "{op} rejected by host (errno {errno})")
            }
            KvmError::AlreadyRegistered => write!(f, "guest memory already registered"),
            KvmError::VmAlreadyExists => write!(f, "this process already runs a VM"),
            KvmError::DuplicateIndex(i) => write!(f, "vCPU {i} already exists"),
            KvmError::WrongThread => write!(f, "vCPU driven from a foreign thread"),
            KvmError::Interrupted => write!(f, "vCPU run interrupted"),
        }
    }
}

impl std::error::Error for KvmError {}

type Result<T> = std::result::Result<T, KvmError>;

fn host_err(op: &'static str) -> impl FnOnce(kvm_ioctls::Error) -> KvmError {
    move |e| KvmError::HostRejected { op, errno: e.errno() }
}

/// System-level handle: global queries and VM creation.
#[derive(Debug)]
pub struct Hypervisor {
    kvm: Kvm,
    api_version: i32,
}

impl Hypervisor {
    /// Opens the virtualization device node and verifies the stable API
    /// version. Failure here means KVM-gated paths should be skipped.
    pub fn open() -> Result<Hypervisor> {
        let kvm = Kvm::new().map_err(|e| {
            KvmError::HypervisorUnavailable(format!("opening /dev/kvm failed: {e}"))
        })?;
        let api_version = kvm.get_api_version();
        if api_version != KVM_API_VERSION as i32 {
            return Err(KvmError::ApiVersionMismatch {
                expected: KVM_API_VERSION as i32,
                got: api_version,
            });
        }
        if !kvm.check_extension(Cap::UserMemory) {
            return Err(KvmError::HypervisorUnavailable(
                "host lacks user memory slots".into(),
            ));
        }
        Ok(Hypervisor { kvm, api_version })
    }

    pub fn api_version(&self) -> i32 {
        self.api_version
    }

    /// Creates the process's one VM, with the in-kernel interrupt
    /// controller and PIT ready so device interrupts work from boot.
    pub fn create_vm(&self) -> Result<VmHandle> {
        if VM_EXISTS.swap(true, Ordering::SeqCst) {
            return Err(KvmError::VmAlreadyExists);
        }
        let vm = match self.kvm.create_vm() {
            Ok(vm) => vm,
            Err(e) => {
                VM_EXISTS.store(false, Ordering::SeqCst);
                return Err(host_err("create VM")(e));
            }
        };
        if let Err(e) = vm.create_irq_chip() {
            VM_EXISTS.store(false, Ordering::SeqCst);
            return Err(host_err("create interrupt controller")(e));
        }
        if let Err(e) = vm.create_pit2(kvm_pit_config::default()) {
            VM_EXISTS.store(false, Ordering::SeqCst);
            return Err(host_err("create interval timer")(e));
        }
        Ok(VmHandle {
            vm,
            memory_registered: false,
            irqchip_ready: true,
            slots: Vec::new(),
            vcpu_indices: HashSet::new(),
        })
    }

    fn supported_cpuid(&self) -> Result<CpuId> {
        self.kvm
            .get_supported_cpuid(KVM_MAX_CPUID_ENTRIES)
            .map_err(host_err("query supported CPUID"))
    }
}

/// A registered guest memory slot, as installed on the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemorySlot {
    pub slot: u32,
    pub guest_base: u64,
    pub size: u64,
}

/// Enumerates the slots a memory map will occupy, in registration order.
pub fn plan_memory_slots(map: &GuestMemoryMap) -> Vec<MemorySlot> {
    map.regions()
        .iter()
        .enumerate()
        .map(|(i, r)| MemorySlot {
            slot: i as u32,
            guest_base: r.guest_base().0,
            size: r.size(),
        })
        .collect()
}

/// Handle scoped to the single VM of this process.
pub struct VmHandle {
    vm: VmFd,
    memory_registered: bool,
    irqchip_ready: bool,
    slots: Vec<MemorySlot>,
    vcpu_indices: HashSet<u8>,
}

impl VmHandle {
    pub fn irqchip_ready(&self) -> bool {
        self.irqchip_ready
    }

    pub fn memory_registered(&self) -> bool {
        self.memory_registered
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    /// Installs every region of `map` as a user-memory slot.
    pub fn register_memory(&mut self, map: &GuestMemoryMap) -> Result<()> {
        if self.memory_registered {
            return Err(KvmError::AlreadyRegistered);
        }
        for plan in plan_memory_slots(map) {
            let region = kvm_userspace_memory_region {
                slot: plan.slot,
                guest_phys_addr: plan.guest_base,
                memory_size: plan.size,
                userspace_addr: map.regions()[plan.slot as usize].host_addr(),
                flags: 0,
            };
            // SAFETY: the backing mappings live as long as the map, which
            // the orchestrator keeps alive for the VM's whole lifetime.
            unsafe {
                self.vm
                    .set_user_memory_region(region)
                    .map_err(host_err("register memory slot"))?;
            }
            self.slots.push(plan);
        }
        self.memory_registered = true;
        Ok(())
    }

    /// Creates vCPU `index` with the host's supported CPUID applied.
    pub fn create_vcpu(&mut self, hypervisor: &Hypervisor, index: u8) -> Result<VcpuHandle> {
        if !self.vcpu_indices.insert(index) {
            return Err(KvmError::DuplicateIndex(index));
        }
        let vcpu = self
            .vm
            .create_vcpu(index as u64)
            .map_err(host_err("create vCPU"))?;
        let cpuid = hypervisor.supported_cpuid()?;
        vcpu.set_cpuid2(&cpuid).map_err(host_err("set CPUID"))?;
        Ok(VcpuHandle {
            index,
            vcpu,
            owner: None,
        })
    }
}

impl Drop for VmHandle {
    fn drop(&mut self) {
        VM_EXISTS.store(false, Ordering::SeqCst);
    }
}

impl IrqTrigger for VmHandle {
    /// Edge-pulses a line on the in-kernel interrupt controller.
    fn pulse(&self, line: u32) -> std::io::Result<()> {
        self.vm
            .set_irq_line(line, true)
            .and_then(|_| self.vm.set_irq_line(line, false))
            .map_err(|e| std::io::Error::from_raw_os_error(e.errno()))
    }
}

/// A typed VM exit, the unit of work the vCPU loop routes to devices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VmExit {
    IoIn { port: u16, payload: Vec<u8> },
    IoOut { port: u16, payload: Vec<u8> },
    MmioRead { addr: u64, payload: Vec<u8> },
    MmioWrite { addr: u64, payload: Vec<u8> },
    Hlt,
    Shutdown,
    /// Exit reasons outside the handled set; carries the raw reason.
    Unsupported { reason: String },
}

impl VmExit {
    pub fn kind_name(&self) -> &'static str {
        match self {
            VmExit::IoIn { .. } => "io_in",
            VmExit::IoOut { .. } => "io_out",
            VmExit::MmioRead { .. } => "mmio_read",
            VmExit::MmioWrite { .. } => "mmio_write",
            VmExit::Hlt => "hlt",
            VmExit::Shutdown => "shutdown",
            VmExit::Unsupported { .. } => "unsupported",
        }
    }
}

/// Services port-I/O and MMIO accesses while the vCPU waits.
///
/// Read buffers must be filled before the call returns; the bytes flow
/// into the guest when the vCPU re-enters.
pub trait IoSink {
    fn io_in(&mut self, port: u16, data: &mut [u8]);
    fn io_out(&mut self, port: u16, data: &[u8]);
    fn mmio_read(&mut self, addr: u64, data: &mut [u8]);
    fn mmio_write(&mut self, addr: u64, data: &[u8]);
}

/// Handle to one virtual CPU, confined to its owner thread once running.
pub struct VcpuHandle {
    index: u8,
    vcpu: VcpuFd,
    owner: Option<ThreadId>,
}

impl VcpuHandle {
    pub fn index(&self) -> u8 {
        self.index
    }

    /// Puts the vCPU directly into 64-bit long mode at `entry`, pointing it
    /// at boot structures previously written into guest memory: the
    /// boot-parameter page (reaches the kernel in RSI), identity page
    /// tables, and the flat GDT/IDT.
    pub fn configure_for_long_mode(
        &self,
        entry: GuestAddress,
        boot_params: GuestAddress,
        page_table_root: GuestAddress,
        gdt: GuestAddress,
        idt: GuestAddress,
    ) -> Result<()> {
        const CR0_PE: u64 = 0x1;
        const CR0_ET: u64 = 0x10;
        const CR0_PG: u64 = 0x8000_0000;
        const CR4_PAE: u64 = 0x20;
        const EFER_LME: u64 = 0x100;
        const EFER_LMA: u64 = 0x400;

        let mut sregs = self.vcpu.get_sregs().map_err(host_err("get sregs"))?;

        let code = kvm_segment {
            base: 0,
            limit: 0xf_ffff,
            selector: boot::CODE_SELECTOR,
            type_: 0xb,
            present: 1,
            dpl: 0,
            db: 0,
            s: 1,
            l: 1,
            g: 1,
            avl: 0,
            ..Default::default()
        };
        let data = kvm_segment {
            base: 0,
            limit: 0xf_ffff,
            selector: boot::DATA_SELECTOR,
            type_: 0x3,
            present: 1,
            dpl: 0,
            db: 1,
            s: 1,
            l: 0,
            g: 1,
            avl: 0,
            ..Default::default()
        };
        let tss = kvm_segment {
            base: 0,
            limit: 0xf_ffff,
            selector: boot::TSS_SELECTOR,
            type_: 0xb,
            present: 1,
            dpl: 0,
            db: 0,
            s: 0,
            l: 0,
            g: 1,
            avl: 0,
            ..Default::default()
        };
        sregs.cs = code;
        sregs.ds = data;
        sregs.es = data;
        sregs.fs = data;
        sregs.gs = data;
        sregs.ss = data;
        sregs.tr = tss;
        sregs.gdt.base = gdt.0;
        sregs.gdt.limit = 4 * 8 - 1;
        sregs.idt.base = idt.0;
        sregs.idt.limit = 8 - 1;
        sregs.cr0 |= CR0_PE | CR0_ET | CR0_PG;
        sregs.cr3 = page_table_root.0;
        sregs.cr4 |= CR4_PAE;
        sregs.efer |= EFER_LME | EFER_LMA;
        self.vcpu.set_sregs(&sregs).map_err(host_err("set sregs"))?;

        let mut regs = self.vcpu.get_regs().map_err(host_err("get regs"))?;
        regs.rip = entry.0;
        regs.rsi = boot_params.0;
        regs.rsp = boot::BOOT_STACK_POINTER;
        regs.rbp = boot::BOOT_STACK_POINTER;
        regs.rflags = 2;
        self.vcpu.set_regs(&regs).map_err(host_err("set regs"))?;

        let fpu = kvm_fpu {
            fcw: 0x37f,
            mxcsr: 0x1f80,
            ..Default::default()
        };
        self.vcpu.set_fpu(&fpu).map_err(host_err("set FPU"))?;

        self.setup_boot_msrs()?;
        self.setup_lapic_lines()?;
        Ok(())
    }

    fn setup_boot_msrs(&self) -> Result<()> {
        const MSR_IA32_SYSENTER_CS: u32 = 0x174;
        const MSR_IA32_SYSENTER_ESP: u32 = 0x175;
        const MSR_IA32_SYSENTER_EIP: u32 = 0x176;
        const MSR_STAR: u32 = 0xc000_0081;
        const MSR_LSTAR: u32 = 0xc000_0082;
        const MSR_CSTAR: u32 = 0xc000_0083;
        const MSR_SYSCALL_MASK: u32 = 0xc000_0084;
        const MSR_KERNEL_GS_BASE: u32 = 0xc000_0102;
        const MSR_IA32_TSC: u32 = 0x10;
        const MSR_IA32_MISC_ENABLE: u32 = 0x1a0;
        const MISC_ENABLE_FAST_STRING: u64 = 0x1;

        let zero = |index: u32| kvm_msr_entry { index, data: 0, ..Default::default() };
        let entries = [
            zero(MSR_IA32_SYSENTER_CS),
            zero(MSR_IA32_SYSENTER_ESP),
            zero(MSR_IA32_SYSENTER_EIP),
            zero(MSR_STAR),
            zero(MSR_LSTAR),
            zero(MSR_CSTAR),
            zero(MSR_SYSCALL_MASK),
            zero(MSR_KERNEL_GS_BASE),
            zero(MSR_IA32_TSC),
            kvm_msr_entry {
                index: MSR_IA32_MISC_ENABLE,
                data: MISC_ENABLE_FAST_STRING,
                ..Default::default()
            },
        ];
        let msrs = Msrs::from_entries(&entries)
            .map_err(|_| KvmError::HostRejected { op: "build MSR list", errno: libc::EINVAL })?;
        self.vcpu.set_msrs(&msrs).map_err(host_err("set MSRs"))?;
        Ok(())
    }

    /// Routes the legacy PIC through the local APIC: LINT0 as external
    /// interrupt, LINT1 as NMI. Without this the guest never sees device
    /// interrupts in PIC mode.
    fn setup_lapic_lines(&self) -> Result<()> {
        const LVT_LINT0: usize = 0x350;
        const LVT_LINT1: usize = 0x360;
        const MODE_EXTINT: u32 = 0x700;
        const MODE_NMI: u32 = 0x400;
        const MODE_MASK: u32 = 0x700;

        let mut lapic = self.vcpu.get_lapic().map_err(host_err("get local APIC"))?;
        for (offset, mode) in [(LVT_LINT0, MODE_EXTINT), (LVT_LINT1, MODE_NMI)] {
            let mut bytes = [0u8; 4];
            for (i, b) in bytes.iter_mut().enumerate() {
                *b = lapic.regs[offset + i] as u8;
            }
            let value = (u32::from_le_bytes(bytes) & !MODE_MASK) | mode;
            for (i, b) in value.to_le_bytes().iter().enumerate() {
                lapic.regs[offset + i] = *b as libc::c_char;
            }
        }
        self.vcpu.set_lapic(&lapic).map_err(host_err("set local APIC"))?;
        Ok(())
    }

    /// Current CR3, for register read-back checks.
    pub fn page_table_root(&self) -> Result<u64> {
        Ok(self.vcpu.get_sregs().map_err(host_err("get sregs"))?.cr3)
    }

    /// Current instruction pointer.
    pub fn instruction_pointer(&self) -> Result<u64> {
        Ok(self.vcpu.get_regs().map_err(host_err("get regs"))?.rip)
    }

    /// Runs guest code until the next VM exit. Port and MMIO accesses are
    /// serviced through `sink` before the call returns; the caller handles
    /// the returned exit and re-enters by calling again.
    ///
    /// The first call binds the vCPU to the calling thread; later calls
    /// from any other thread fail before touching the host interface.
    pub fn run(&mut self, sink: &mut dyn IoSink) -> Result<VmExit> {
        let current = std::thread::current().id();
        match self.owner {
            None => self.owner = Some(current),
            Some(owner) if owner != current => return Err(KvmError::WrongThread),
            _ => {}
        }

        match self.vcpu.run() {
            Ok(VcpuExit::IoIn(port, data)) => {
                sink.io_in(port, data);
                Ok(VmExit::IoIn { port, payload: data.to_vec() })
            }
            Ok(VcpuExit::IoOut(port, data)) => {
                sink.io_out(port, data);
                Ok(VmExit::IoOut { port, payload: data.to_vec() })
            }
            Ok(VcpuExit::MmioRead(addr, data)) => {
                sink.mmio_read(addr, data);
                Ok(VmExit::MmioRead { addr, payload: data.to_vec() })
            }
            Ok(VcpuExit::MmioWrite(addr, data)) => {
                sink.mmio_write(addr, data);
                Ok(VmExit::MmioWrite { addr, payload: data.to_vec() })
            }
            Ok(VcpuExit::Hlt) => Ok(VmExit::Hlt),
            Ok(VcpuExit::Shutdown) => Ok(VmExit::Shutdown),
            Ok(other) => Ok(VmExit::Unsupported { reason: format!("{other:?}") }),
            Err(e) if e.errno() == libc::EINTR => Err(KvmError::Interrupted),
            Err(e) if e.errno() == libc::EAGAIN => Ok(VmExit::Unsupported {
                reason: "transient EAGAIN".into(),
            }),
            Err(e) => Err(KvmError::HostRejected { op: "run vCPU", errno: e.errno() }),
        }
    }
}
