//! The VMM thread: consumes control actions, builds the machine, spawns
//! one thread per vCPU, routes VM exits, and tears everything down.
//!
//! Pre-boot, actions accumulate a machine description. `InstanceStart`
//! walks the boot pipeline — memory map, VM, kernel load, devices, vCPU
//! long-mode setup — atomically: any failing stage aborts the whole boot
//! and the instance stays Configured. While running, vCPU threads forward
//! MMIO exits here through a mailbox and service port I/O locally; guest
//! shutdown (or Ctrl+Alt+Del) lands on the exit eventfd and unwinds the
//! machine with all threads joined.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::os::fd::AsRawFd;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, Sender, SyncSender};
use std::sync::{Arc, Mutex, Once};
use std::time::{Duration, Instant};

use crate::api::server::{ActionResult, ApiRequest};
use crate::api::{
    transition, ActionError, BootSourceConfig, InstanceState, MachineConfig, VmmAction,
    DEFAULT_KERNEL_CMDLINE,
};
use crate::boot;
use crate::devices::net::{NetBackend, NetDevice};
use crate::devices::{BlockDevice, KeyboardController, PortIoBus, SerialConsole, VsockDevice};
use crate::event_loop::{
    DeviceId, EventLoop, Flow, HandlerKind, Interest, LoopCtl, LoopHandler, Readiness, Token,
};
use crate::guest_memory::{GuestAddress, GuestMemoryMap};
use crate::kvm::{Hypervisor, IoSink, KvmError, VcpuHandle, VmExit, VmHandle};
use crate::metrics::{MeteredSink, Metrics};
use crate::sys::{EventFd, TimerFd};
use crate::virtio::{
    BackendFdUpdate, IrqAllocator, MmioBus, MmioTransport, BACKEND_EVENT_WRITABLE,
    MMIO_AREA_BASE, MMIO_WINDOW_SIZE,
};

/// Reserved slot id for the MMIO-exit mailbox registration.
const MMIO_MAILBOX_SLOT: u32 = u32::MAX;
/// Guest RAM must stay clear of the MMIO window area.
pub const MAX_MEM_MIB: u32 = 3072;
const METRICS_FLUSH_PERIOD: Duration = Duration::from_secs(60);
const VCPU_JOIN_TIMEOUT: Duration = Duration::from_secs(5);

static SIGUSR1_HANDLER: Once = Once::new();

/// Installs a no-op SIGUSR1 handler (no SA_RESTART) so a signal kicks a
/// vCPU out of a blocking run with EINTR.
fn install_vcpu_kick_handler() {
    SIGUSR1_HANDLER.call_once(|| {
        extern "C" fn noop(_: libc::c_int) {}
        // SAFETY: installing a minimal handler; noop is async-signal-safe.
        unsafe {
            let mut action: libc::sigaction = std::mem::zeroed();
            action.sa_sigaction = noop as *const () as usize;
            libc::sigaction(libc::SIGUSR1, &action, std::ptr::null_mut());
        }
    });
}

/// Everything configured before boot; structural equality is the contract
/// for config-file versus REST equivalence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MachineDescription {
    pub machine: Option<MachineConfig>,
    pub boot_source: Option<BootSourceConfig>,
    pub drives: Vec<crate::api::DriveConfig>,
    pub net_ifaces: Vec<crate::api::NetConfig>,
    pub vsock: Option<crate::api::VsockConfig>,
}

impl MachineDescription {
    fn machine_config(&self) -> MachineConfig {
        self.machine
            .unwrap_or(MachineConfig { vcpu_count: 1, mem_size_mib: 128 })
    }
}

/// An MMIO access forwarded from a vCPU thread, answered synchronously.
struct MmioRequest {
    addr: u64,
    write: bool,
    data: Vec<u8>,
    reply: SyncSender<Vec<u8>>,
}

/// Exit-path bookkeeping for one vCPU thread.
struct VcpuThread {
    index: u8,
    join: Option<std::thread::JoinHandle<()>>,
    pthread: libc::pthread_t,
}

struct RunningMachine {
    _hypervisor: Hypervisor,
    /// Keeps the VM (and its interrupt controller) alive; interrupt
    /// triggers hold clones of this Arc.
    _vm: Arc<VmHandle>,
    mem: Arc<GuestMemoryMap>,
    mmio: MmioBus,
    irq: IrqAllocator,
    vcpus: Vec<VcpuThread>,
    stop: Arc<AtomicBool>,
    mmio_rx: Receiver<MmioRequest>,
    /// Loop tokens for device backend fds, keyed by (slot, tag).
    backend_tokens: HashMap<(u32, u32), Token>,
}

/// Options fixed at process start.
pub struct VmmOptions {
    pub instance_id: String,
    pub metrics_path: Option<PathBuf>,
    pub seccomp_level: u8,
    /// Serial output destination; standard output when `None`.
    pub serial_sink: Option<Box<dyn Write + Send>>,
}

impl Default for VmmOptions {
    fn default() -> Self {
        VmmOptions {
            instance_id: "microvm".into(),
            metrics_path: None,
            seccomp_level: 0,
            serial_sink: None,
        }
    }
}

/// The VMM thread state machine; implements the loop handler for the five
/// dispatch kinds.
pub struct Vmm {
    instance_id: String,
    state: Arc<Mutex<InstanceState>>,
    description: MachineDescription,
    metrics: Arc<Metrics>,
    metrics_out: Option<File>,
    seccomp_level: u8,
    port_bus: Arc<PortIoBus>,
    action_rx: Receiver<ApiRequest>,
    action_wakeup: EventFd,
    exit_evt: EventFd,
    metrics_timer: TimerFd,
    mmio_wakeup: EventFd,
    mmio_tx: Sender<MmioRequest>,
    machine: Option<RunningMachine>,
    stdin_token: Option<Token>,
    /// Set when shutdown timed out joining vCPU threads.
    pub join_timeout: bool,
}

impl Vmm {
    /// Builds the VMM and registers its standing table entries: the action
    /// wakeup, the exit event, the metrics timer, the MMIO mailbox, and
    /// (best effort) standard input for the serial console.
    pub fn new(
        options: VmmOptions,
        action_rx: Receiver<ApiRequest>,
        action_wakeup: EventFd,
        state: Arc<Mutex<InstanceState>>,
        el: &mut EventLoop,
    ) -> std::io::Result<Vmm> {
        let metrics = Arc::new(Metrics::new());
        let metrics_out = match &options.metrics_path {
            Some(path) => Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?,
            ),
            None => None,
        };

        let exit_evt = EventFd::new()?;
        let sink: Box<dyn Write + Send> = options
            .serial_sink
            .unwrap_or_else(|| Box::new(std::io::stdout()));
        let serial = SerialConsole::new(Box::new(MeteredSink::new(sink, metrics.clone())));
        let keyboard = KeyboardController::new(exit_evt.try_clone()?);
        let port_bus = Arc::new(PortIoBus::new(serial, keyboard));

        let metrics_timer = TimerFd::new()?;
        metrics_timer.arm_periodic(METRICS_FLUSH_PERIOD)?;
        let mmio_wakeup = EventFd::new()?;
        let (mmio_tx, _mmio_rx_unused) = std::sync::mpsc::channel();
        drop(_mmio_rx_unused);

        el.register(action_wakeup.as_raw_fd(), HandlerKind::VmmActionRequest, Interest::READABLE)
            .map_err(loop_io_err)?;
        el.register(exit_evt.as_raw_fd(), HandlerKind::Exit, Interest::READABLE)
            .map_err(loop_io_err)?;
        el.register(metrics_timer.as_raw_fd(), HandlerKind::WriteMetrics, Interest::READABLE)
            .map_err(loop_io_err)?;
        el.register(
            mmio_wakeup.as_raw_fd(),
            HandlerKind::DeviceHandler(DeviceId { slot: MMIO_MAILBOX_SLOT, tag: 0 }),
            Interest::READABLE,
        )
        .map_err(loop_io_err)?;
        // Standard input feeds the serial console when pollable.
        let stdin_token = crate::sys::set_nonblocking(libc::STDIN_FILENO)
            .ok()
            .and_then(|_| {
                el.register(libc::STDIN_FILENO, HandlerKind::Stdin, Interest::READABLE)
                    .ok()
            });

        Ok(Vmm {
            instance_id: options.instance_id,
            state,
            description: MachineDescription::default(),
            metrics,
            metrics_out,
            seccomp_level: options.seccomp_level,
            port_bus,
            action_rx,
            action_wakeup,
            exit_evt,
            metrics_timer,
            mmio_wakeup,
            mmio_tx,
            machine: None,
            stdin_token,
            join_timeout: false,
        })
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn state(&self) -> InstanceState {
        *self.state.lock().unwrap()
    }

    fn set_state(&self, next: InstanceState) {
        *self.state.lock().unwrap() = next;
    }

    pub fn description(&self) -> &MachineDescription {
        &self.description
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub fn port_bus(&self) -> &Arc<PortIoBus> {
        &self.port_bus
    }

    /// Threads the machine should be running: VMM + API + one per vCPU.
    pub fn expected_thread_count(&self) -> usize {
        2 + self.machine.as_ref().map(|m| m.vcpus.len()).unwrap_or(0)
    }

    /// Applies one action against the lifecycle state machine.
    fn execute(&mut self, ctl: &mut LoopCtl, action: VmmAction) -> Result<(), ActionError> {
        self.metrics.api_requests.fetch_add(1, Ordering::Relaxed);
        let state = self.state();
        let next = transition(state, &action, self.description.boot_source.is_some())?;
        match action {
            VmmAction::ConfigureMachine(config) => {
                if config.mem_size_mib > MAX_MEM_MIB {
                    return Err(ActionError::PreconditionFailed(format!(
                        "mem_size_mib exceeds {MAX_MEM_MIB}"
                    )));
                }
                self.description.machine = Some(config);
            }
            VmmAction::SetBootSource(config) => self.description.boot_source = Some(config),
            VmmAction::AttachDrive(config) => {
                if config.is_root_device
                    && self
                        .description
                        .drives
                        .iter()
                        .any(|d| d.is_root_device && d.drive_id != config.drive_id)
                {
                    return Err(ActionError::PreconditionFailed(
                        "a root device is already attached".into(),
                    ));
                }
                match self
                    .description
                    .drives
                    .iter_mut()
                    .find(|d| d.drive_id == config.drive_id)
                {
                    Some(existing) => *existing = config,
                    None => self.description.drives.push(config),
                }
            }
            VmmAction::AttachNet(config) => {
                match self
                    .description
                    .net_ifaces
                    .iter_mut()
                    .find(|n| n.iface_id == config.iface_id)
                {
                    Some(existing) => *existing = config,
                    None => self.description.net_ifaces.push(config),
                }
            }
            VmmAction::SetVsock(config) => {
                if config.guest_cid < crate::devices::vsock::MIN_GUEST_CID {
                    return Err(ActionError::PreconditionFailed(
                        "guest_cid 0-2 are reserved".into(),
                    ));
                }
                self.description.vsock = Some(config);
            }
            VmmAction::InstanceStart => self.boot(ctl)?,
            VmmAction::SendCtrlAltDel => {
                self.port_bus.keyboard.lock().unwrap().inject_ctrl_alt_del();
            }
            VmmAction::FlushMetrics => self.flush_metrics(),
        }
        self.set_state(next);
        Ok(())
    }

    /// The boot pipeline. Fails atomically: every fallible stage runs
    /// before the first vCPU thread is spawned, and the partially built
    /// machine (memory, VM handle, IRQ lines) is dropped on error.
    fn boot(&mut self, ctl: &mut LoopCtl) -> Result<(), ActionError> {
        let stage = |stage: &'static str| move |e: String| ActionError::StageFailed {
            stage,
            message: e,
        };

        let machine_config = self.description.machine_config();
        let guest_ram = (machine_config.mem_size_mib as u64) << 20;
        let boot_source = self
            .description
            .boot_source
            .clone()
            .ok_or_else(|| ActionError::PreconditionFailed("no boot source configured".into()))?;

        // Every device needs its own interrupt line; refuse configurations
        // that cannot fit the budget before touching the host.
        let device_count = self.description.drives.len()
            + self.description.net_ifaces.len()
            + self.description.vsock.is_some() as usize;
        if device_count > crate::virtio::DEVICE_IRQ_BUDGET as usize {
            return Err(stage("attach_devices")(
                crate::virtio::IrqError::IrqExhausted.to_string(),
            ));
        }

        let mem = Arc::new(
            GuestMemoryMap::with_ram_size(guest_ram).map_err(|e| stage("create_map")(e.to_string()))?,
        );

        let hypervisor = Hypervisor::open().map_err(|e| stage("open_hypervisor")(e.to_string()))?;
        let mut vm = hypervisor
            .create_vm()
            .map_err(|e| stage("create_vm")(e.to_string()))?;
        vm.register_memory(&mem)
            .map_err(|e| stage("register_memory")(e.to_string()))?;

        // Create the vCPUs while the VM handle is still uniquely owned;
        // they are configured for long mode only after the kernel loads.
        let mut vcpu_handles = Vec::new();
        for index in 0..machine_config.vcpu_count {
            vcpu_handles.push(
                vm.create_vcpu(&hypervisor, index)
                    .map_err(|e| stage("configure_vcpu")(e.to_string()))?,
            );
        }
        let vm = Arc::new(vm);

        // Kernel and initramfs images.
        let image = std::fs::read(&boot_source.kernel_path)
            .map_err(|e| stage("load_guest")(format!("{}: {e}", boot_source.kernel_path)))?;
        let info = boot::parse_bzimage(&image).map_err(|e| stage("load_guest")(e.to_string()))?;
        let initramfs = match &boot_source.initramfs_path {
            Some(path) => Some(
                std::fs::read(path).map_err(|e| stage("load_guest")(format!("{path}: {e}")))?,
            ),
            None => None,
        };

        // Devices: allocate interrupt lines and MMIO windows, collect the
        // discovery fragments that must reach the kernel command line.
        let mut irq = IrqAllocator::new(vm.clone() as Arc<dyn crate::virtio::IrqTrigger>);
        let mut mmio = MmioBus::new();
        let mut cmdline = boot_source
            .cmdline
            .clone()
            .unwrap_or_else(|| DEFAULT_KERNEL_CMDLINE.to_string());
        let mut slot: u32 = 0;
        let mut block_letters: Vec<(bool, bool)> = Vec::new(); // (root, read_only)

        for drive in &self.description.drives {
            let device = BlockDevice::open(std::path::Path::new(&drive.path_on_host), drive.is_read_only)
                .map_err(|e| stage("attach_drive")(format!("{}: {e}", drive.path_on_host)))?;
            let line = irq
                .allocate_irq(slot)
                .map_err(|e| stage("attach_drive")(e.to_string()))?;
            let base = GuestAddress(MMIO_AREA_BASE + slot as u64 * MMIO_WINDOW_SIZE);
            let transport = MmioTransport::new(base, slot, line, Box::new(device));
            cmdline.push(' ');
            cmdline.push_str(&transport.cmdline_fragment());
            mmio.add(transport)
                .map_err(|e| stage("attach_drive")(e.to_string()))?;
            block_letters.push((drive.is_root_device, drive.is_read_only));
            slot += 1;
        }
        for iface in &self.description.net_ifaces {
            let backend = NetBackend::open_tap(&iface.tap_name)
                .map_err(|e| stage("attach_net")(format!("{}: {e}", iface.tap_name)))?;
            let mac = match &iface.mac {
                Some(text) => Some(parse_mac(text).map_err(|e| stage("attach_net")(e))?),
                None => None,
            };
            let device = NetDevice::new(backend, mac);
            let line = irq
                .allocate_irq(slot)
                .map_err(|e| stage("attach_net")(e.to_string()))?;
            let base = GuestAddress(MMIO_AREA_BASE + slot as u64 * MMIO_WINDOW_SIZE);
            let transport = MmioTransport::new(base, slot, line, Box::new(device));
            cmdline.push(' ');
            cmdline.push_str(&transport.cmdline_fragment());
            mmio.add(transport)
                .map_err(|e| stage("attach_net")(e.to_string()))?;
            slot += 1;
        }
        if let Some(vsock) = &self.description.vsock {
            let device = VsockDevice::new(vsock.guest_cid, std::path::Path::new(&vsock.uds_path))
                .map_err(|e| stage("attach_vsock")(e.to_string()))?;
            let line = irq
                .allocate_irq(slot)
                .map_err(|e| stage("attach_vsock")(e.to_string()))?;
            let base = GuestAddress(MMIO_AREA_BASE + slot as u64 * MMIO_WINDOW_SIZE);
            let transport = MmioTransport::new(base, slot, line, Box::new(device));
            cmdline.push(' ');
            cmdline.push_str(&transport.cmdline_fragment());
            mmio.add(transport)
                .map_err(|e| stage("attach_vsock")(e.to_string()))?;
        }

        // Root filesystem hint: block devices appear in slot order as
        // vda, vdb, ...
        if let Some(root_idx) = block_letters.iter().position(|(root, _)| *root) {
            let letter = (b'a' + root_idx as u8) as char;
            let ro = block_letters[root_idx].1;
            cmdline.push_str(&format!(" root=/dev/vd{letter}{}", if ro { " ro" } else { " rw" }));
        }

        // Guest memory: kernel, command line, initramfs, zero page, page
        // tables, GDT.
        let layout = boot::plan_layout(
            &info,
            cmdline.len(),
            initramfs.as_ref().map(|i| i.len() as u64).unwrap_or(0),
            guest_ram,
        )
        .map_err(|e| stage("load_guest")(e.to_string()))?;
        let entry = boot::load_guest(&mem, &image, &info, &layout, &cmdline, initramfs.as_deref())
            .map_err(|e| stage("load_guest")(e.to_string()))?;

        // Boot structures are in place: point every vCPU at the 64-bit
        // entry.
        for vcpu in &vcpu_handles {
            vcpu.configure_for_long_mode(
                entry,
                layout.zero_page,
                layout.page_table_root,
                layout.gdt_addr,
                GuestAddress(boot::IDT_ADDR),
            )
            .map_err(|e| stage("configure_vcpu")(e.to_string()))?;
        }

        // Wire interrupts for the port devices and build the mailbox.
        let trigger: Arc<dyn crate::virtio::IrqTrigger> = vm.clone();
        self.port_bus.serial.lock().unwrap().set_irq_trigger(trigger.clone());
        self.port_bus.keyboard.lock().unwrap().set_irq_trigger(trigger);
        let (mmio_tx, mmio_rx) = std::sync::mpsc::channel();
        self.mmio_tx = mmio_tx;

        let mut machine = RunningMachine {
            _hypervisor: hypervisor,
            _vm: vm,
            mem,
            mmio,
            irq,
            vcpus: Vec::new(),
            stop: Arc::new(AtomicBool::new(false)),
            mmio_rx,
            backend_tokens: HashMap::new(),
        };

        // Register device backend descriptors with the dispatch table.
        collect_backend_updates(&mut machine, ctl);

        // The sandbox tightens now, before any guest instruction runs.
        seccomp::install_level(
            seccomp::Level::from_u8(self.seccomp_level).expect("validated at parse"),
        )
        .map_err(|e| stage("install_seccomp")(e.to_string()))?;

        // Point of no return: spawn the vCPU threads.
        install_vcpu_kick_handler();
        for vcpu in vcpu_handles {
            let index = vcpu.index();
            let router = VcpuRouter {
                port_bus: self.port_bus.clone(),
                mmio_tx: self.mmio_tx.clone(),
                mmio_wakeup: self.mmio_wakeup.try_clone().map_err(|e| stage("spawn_vcpus")(e.to_string()))?,
            };
            let stop = machine.stop.clone();
            let exit_evt = self.exit_evt.try_clone().map_err(|e| stage("spawn_vcpus")(e.to_string()))?;
            let metrics = self.metrics.clone();
            let (pthread_tx, pthread_rx) = std::sync::mpsc::sync_channel(1);
            let join = std::thread::Builder::new()
                .name(format!("vcpu{index}"))
                .spawn(move || {
                    // SAFETY: pthread_self is always safe.
                    let _ = pthread_tx.send(unsafe { libc::pthread_self() });
                    vcpu_main(vcpu, router, stop, exit_evt, metrics);
                })
                .map_err(|e| stage("spawn_vcpus")(e.to_string()))?;
            let pthread = pthread_rx
                .recv()
                .map_err(|e| stage("spawn_vcpus")(e.to_string()))?;
            machine.vcpus.push(VcpuThread { index, join: Some(join), pthread });
        }

        self.metrics.record_guest_entry();
        self.machine = Some(machine);
        Ok(())
    }

    /// Orderly teardown: stop flags, kick signals, mailbox drain, join,
    /// device flush, final metrics, state Shutdown. Idempotent.
    pub fn shutdown(&mut self) {
        let Some(mut machine) = self.machine.take() else {
            if self.state() == InstanceState::Running {
                self.set_state(InstanceState::Shutdown);
            }
            self.flush_metrics();
            return;
        };
        machine.stop.store(true, Ordering::SeqCst);

        // Answer any in-flight MMIO requests so blocked vCPUs can observe
        // the stop flag, and keep kicking: a signal that lands between the
        // flag check and the next run would otherwise be consumed without
        // interrupting anything.
        let deadline = Instant::now() + VCPU_JOIN_TIMEOUT;
        loop {
            for vcpu in &machine.vcpus {
                if vcpu.join.as_ref().map(|j| !j.is_finished()).unwrap_or(false) {
                    // SAFETY: pthread ids stay valid until joined below.
                    unsafe {
                        libc::pthread_kill(vcpu.pthread, libc::SIGUSR1);
                    }
                }
            }
            while let Ok(request) = machine.mmio_rx.try_recv() {
                let reply = vec![0u8; request.data.len()];
                let _ = request.reply.send(reply);
            }
            let all_done = machine
                .vcpus
                .iter()
                .all(|v| v.join.as_ref().map(|j| j.is_finished()).unwrap_or(true));
            if all_done {
                break;
            }
            if Instant::now() > deadline {
                self.join_timeout = true;
                break;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        for vcpu in &mut machine.vcpus {
            if let Some(join) = vcpu.join.take() {
                if self.join_timeout && !join.is_finished() {
                    eprintln!("vcpu{} failed to stop within {:?}", vcpu.index, VCPU_JOIN_TIMEOUT);
                    continue;
                }
                let _ = join.join();
            }
        }

        // Flush block devices so the backing files are durable.
        for transport in machine.mmio.transports_mut() {
            if let Some(block) = transport.device().as_any().downcast_ref::<BlockDevice>() {
                let _ = block.sync();
            }
        }

        self.set_state(InstanceState::Shutdown);
        self.machine = Some(machine);
        self.flush_metrics();
        self.machine = None;
    }

    fn device_metrics(&self) -> serde_json::Value {
        let mut devices = serde_json::Map::new();
        if let Some(machine) = &self.machine {
            for transport in machine.mmio.transports() {
                let any = transport.device().as_any();
                let key = format!("slot{}", transport.device_instance());
                if let Some(block) = any.downcast_ref::<BlockDevice>() {
                    let c = block.counters();
                    devices.insert(
                        key,
                        serde_json::json!({
                            "kind": "block",
                            "reads": c.reads,
                            "writes": c.writes,
                            "flushes": c.flushes,
                            "request_errors": c.request_errors,
                        }),
                    );
                } else if let Some(net) = any.downcast_ref::<NetDevice>() {
                    let c = net.counters();
                    devices.insert(
                        key,
                        serde_json::json!({
                            "kind": "net",
                            "tx_frames": c.tx_frames,
                            "tx_deferred": c.tx_deferred,
                            "tx_errors": c.tx_errors,
                            "rx_frames": c.rx_frames,
                            "rx_dropped": c.rx_dropped,
                        }),
                    );
                } else if let Some(vsock) = any.downcast_ref::<VsockDevice>() {
                    let c = vsock.counters();
                    devices.insert(
                        key,
                        serde_json::json!({
                            "kind": "vsock",
                            "tx_packets": c.tx_packets,
                            "rx_packets": c.rx_packets,
                            "connections_opened": c.connections_opened,
                            "connections_refused": c.connections_refused,
                            "protocol_errors": c.protocol_errors,
                        }),
                    );
                }
            }
        }
        let serial = self.port_bus.serial.lock().unwrap();
        devices.insert(
            "serial".into(),
            serde_json::json!({
                "kind": "serial",
                "bytes_out": serial.bytes_out(),
                "bytes_in": serial.bytes_in(),
            }),
        );
        drop(serial);
        let keyboard = self.port_bus.keyboard.lock().unwrap();
        devices.insert(
            "keyboard".into(),
            serde_json::json!({
                "kind": "keyboard",
                "resets": keyboard.resets_emitted(),
            }),
        );
        serde_json::Value::Object(devices)
    }

    fn flush_metrics(&mut self) {
        let devices = self.device_metrics();
        match &mut self.metrics_out {
            Some(file) => {
                let _ = self.metrics.flush(devices, file);
            }
            None => {
                let mut sink = std::io::sink();
                let _ = self.metrics.flush(devices, &mut sink);
            }
        }
    }

    /// Drains the action channel completely (edge-triggered contract).
    fn handle_actions(&mut self, ctl: &mut LoopCtl) {
        let _ = self.action_wakeup.read();
        while let Ok(request) = self.action_rx.try_recv() {
            let outcome = self.execute(ctl, request.action);
            let _ = request
                .responder
                .send(ActionResult { id: request.id, outcome });
        }
    }

    /// Services forwarded MMIO exits until the mailbox is empty.
    fn handle_mmio_mailbox(&mut self) {
        let _ = self.mmio_wakeup.read();
        let Some(machine) = &mut self.machine else {
            return;
        };
        while let Ok(request) = machine.mmio_rx.try_recv() {
            let mut data = request.data;
            if request.write {
                machine.mmio.write(request.addr, &data, &machine.mem, &machine.irq);
            } else {
                machine.mmio.read(request.addr, &mut data);
            }
            let _ = request.reply.send(data);
        }
    }

    fn handle_device_event(&mut self, ctl: &mut LoopCtl, id: DeviceId, ready: Readiness) {
        if id.slot == MMIO_MAILBOX_SLOT {
            self.handle_mmio_mailbox();
            if let Some(machine) = &mut self.machine {
                collect_backend_updates(machine, ctl);
            }
            return;
        }
        let Some(machine) = &mut self.machine else {
            return;
        };
        let Some(transport) = machine
            .mmio
            .transports_mut()
            .iter_mut()
            .find(|t| t.device_instance() == id.slot)
        else {
            return;
        };
        if ready.readable || ready.hangup {
            transport.backend_event(id.tag, &machine.mem, &machine.irq);
        }
        if ready.writable {
            transport.backend_event(id.tag | BACKEND_EVENT_WRITABLE, &machine.mem, &machine.irq);
        }
        collect_backend_updates(machine, ctl);
    }

    fn handle_stdin(&mut self, ctl: &mut LoopCtl) {
        let mut buf = [0u8; 512];
        loop {
            // SAFETY: reading into a bounded local buffer.
            let n = unsafe {
                libc::read(libc::STDIN_FILENO, buf.as_mut_ptr() as *mut libc::c_void, buf.len())
            };
            if n > 0 {
                self.port_bus
                    .serial
                    .lock()
                    .unwrap()
                    .push_input(&buf[..n as usize]);
                continue;
            }
            if n == 0 {
                // EOF: stop watching standard input.
                if let Some(token) = self.stdin_token.take() {
                    ctl.deregister(token);
                }
            }
            break;
        }
    }
}

impl LoopHandler for Vmm {
    fn handle(&mut self, ctl: &mut LoopCtl, _token: Token, kind: HandlerKind, ready: Readiness)
        -> Flow
    {
        match kind {
            HandlerKind::VmmActionRequest => {
                self.handle_actions(ctl);
                Flow::Continue
            }
            HandlerKind::DeviceHandler(id) => {
                self.handle_device_event(ctl, id, ready);
                Flow::Continue
            }
            HandlerKind::Stdin => {
                self.handle_stdin(ctl);
                Flow::Continue
            }
            HandlerKind::WriteMetrics => {
                let _ = self.metrics_timer.read();
                self.flush_metrics();
                Flow::Continue
            }
            HandlerKind::Exit => {
                let _ = self.exit_evt.read();
                self.shutdown();
                Flow::Exit
            }
        }
    }
}

fn loop_io_err(e: crate::event_loop::LoopError) -> std::io::Error {
    std::io::Error::other(e.to_string())
}

/// Push device watch/unwatch requests into the dispatch table.
fn collect_backend_updates(machine: &mut RunningMachine, ctl: &mut LoopCtl) {
    let mut requests = Vec::new();
    for transport in machine.mmio.transports_mut() {
        let slot = transport.device_instance();
        for update in transport.device_mut().take_backend_updates() {
            requests.push((slot, update));
        }
    }
    for (slot, update) in requests {
        match update {
            BackendFdUpdate::Watch { fd, tag, writable } => {
                let interest = Interest { readable: true, writable };
                let token = ctl.register(fd, HandlerKind::DeviceHandler(DeviceId { slot, tag }), interest);
                machine.backend_tokens.insert((slot, tag), token);
            }
            BackendFdUpdate::Unwatch { tag } => {
                if let Some(token) = machine.backend_tokens.remove(&(slot, tag)) {
                    ctl.deregister(token);
                }
            }
        }
    }
}

/// Routes one vCPU's exits: port I/O locally, MMIO through the mailbox.
struct VcpuRouter {
    port_bus: Arc<PortIoBus>,
    mmio_tx: Sender<MmioRequest>,
    mmio_wakeup: EventFd,
}

impl VcpuRouter {
    /// Ships one MMIO access to the VMM thread and blocks for the answer.
    fn forward_mmio(&mut self, addr: u64, write: bool, payload: Vec<u8>) -> Option<Vec<u8>> {
        let (reply_tx, reply_rx) = std::sync::mpsc::sync_channel(1);
        let request = MmioRequest { addr, write, data: payload, reply: reply_tx };
        self.mmio_tx.send(request).ok()?;
        let _ = self.mmio_wakeup.write(1);
        reply_rx.recv().ok()
    }
}

impl IoSink for VcpuRouter {
    fn io_in(&mut self, port: u16, data: &mut [u8]) {
        if !self.port_bus.io_in(port, data) {
            data.fill(0);
        }
    }

    fn io_out(&mut self, port: u16, data: &[u8]) {
        self.port_bus.io_out(port, data);
    }

    fn mmio_read(&mut self, addr: u64, data: &mut [u8]) {
        match self.forward_mmio(addr, false, vec![0u8; data.len()]) {
            Some(reply) => {
                let n = reply.len().min(data.len());
                data[..n].copy_from_slice(&reply[..n]);
                data[n..].fill(0);
            }
            None => data.fill(0),
        }
    }

    fn mmio_write(&mut self, addr: u64, data: &[u8]) {
        let _ = self.forward_mmio(addr, true, data.to_vec());
    }
}

/// Body of one vCPU thread: run, route, repeat; the loop ends on a stop
/// flag, a halt/shutdown exit, or an unsupported exit reason.
fn vcpu_main(
    mut vcpu: VcpuHandle,
    mut router: VcpuRouter,
    stop: Arc<AtomicBool>,
    exit_evt: EventFd,
    metrics: Arc<Metrics>,
) {
    loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match vcpu.run(&mut router) {
            Ok(exit) => {
                metrics.count_exit(&exit);
                match exit {
                    VmExit::Hlt | VmExit::Shutdown => {
                        let _ = exit_evt.write(1);
                        break;
                    }
                    VmExit::Unsupported { reason } => {
                        eprintln!("vcpu{}: unsupported exit: {reason}", vcpu.index());
                        let _ = exit_evt.write(1);
                        break;
                    }
                    _ => {}
                }
            }
            Err(KvmError::Interrupted) => continue,
            Err(e) => {
                eprintln!("vcpu{}: {e}", vcpu.index());
                let _ = exit_evt.write(1);
                break;
            }
        }
    }
}

fn parse_mac(text: &str) -> Result<[u8; 6], String> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 6 {
        return Err(format!("invalid MAC address {text:?}"));
    }
    let mut mac = [0u8; 6];
    for (i, part) in parts.iter().enumerate() {
        mac[i] = u8::from_str_radix(part, 16).map_err(|_| format!("invalid MAC address {text:?}"))?;
    }
    Ok(mac)
}
