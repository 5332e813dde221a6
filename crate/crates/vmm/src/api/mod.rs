//! Control plane: typed actions, the instance lifecycle state machine,
//! REST routing, and the HTTP server thread.
//!
//! The API thread parses requests into [`VmmAction`]s and hands them to
//! the VMM thread over a channel, waking it through an eventfd; the HTTP
//! response is held back until the VMM posts the action's result.

pub mod server;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use server::{ApiRequest, ApiServer};

/// Default kernel command line when the boot source does not set one:
/// serial console on, timing-expensive probing off.
pub const DEFAULT_KERNEL_CMDLINE: &str =
    "console=ttyS0 reboot=k panic=1 pci=off nomodules 8250.nr_uarts=1 \
     i8042.noaux i8042.nomux i8042.nopnp i8042.dumbkbd";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriveConfig {
    pub drive_id: String,
    pub path_on_host: String,
    pub is_read_only: bool,
    pub is_root_device: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub iface_id: String,
    pub tap_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mac: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VsockConfig {
    pub guest_cid: u32,
    pub uds_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub vcpu_count: u8,
    pub mem_size_mib: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootSourceConfig {
    pub kernel_path: String,
    #[serde(default)]
    pub cmdline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initramfs_path: Option<String>,
}

/// Control-plane command, as parsed off the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VmmAction {
    ConfigureMachine(MachineConfig),
    SetBootSource(BootSourceConfig),
    AttachDrive(DriveConfig),
    AttachNet(NetConfig),
    SetVsock(VsockConfig),
    InstanceStart,
    SendCtrlAltDel,
    FlushMetrics,
}

impl VmmAction {
    /// Configuration actions are only valid before the instance runs.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            VmmAction::ConfigureMachine(_)
                | VmmAction::SetBootSource(_)
                | VmmAction::AttachDrive(_)
                | VmmAction::AttachNet(_)
                | VmmAction::SetVsock(_)
        )
    }
}

/// Boot lifecycle of the one instance this process runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceState {
    Uninitialized,
    Configured,
    Running,
    Shutdown,
}

impl InstanceState {
    pub fn name(self) -> &'static str {
        match self {
            InstanceState::Uninitialized => "Uninitialized",
            InstanceState::Configured => "Configured",
            InstanceState::Running => "Running",
            InstanceState::Shutdown => "Shutdown",
        }
    }
}

/// Why an action was refused; decides the HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionError {
    /// Action not allowed in the current state (409).
    InvalidTransition { state: InstanceState },
    /// Action allowed but its preconditions are unmet (400).
    PreconditionFailed(String),
    /// A boot or device stage failed; names the failing stage (400).
    StageFailed { stage: &'static str, message: String },
}

impl fmt::Display for ActionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionError::InvalidTransition { state } => {
                write!(f, "not allowed while {}", state.name())
            }
            ActionError::PreconditionFailed(msg) => write!(f, "{msg}"),
            ActionError::StageFailed { stage, message } => {
                write!(f, "{stage} failed: {message}")
            }
        }
    }
}

impl std::error::Error for ActionError {}

/// The instance lifecycle: configuration happens strictly before the
/// instance runs, `InstanceStart` needs a boot source, and the walk
/// through Uninitialized → Configured → Running → Shutdown is one-way.
pub fn transition(
    state: InstanceState,
    action: &VmmAction,
    has_boot_source: bool,
) -> Result<InstanceState, ActionError> {
    use InstanceState::*;
    match action {
        action if action.is_configuration() => match state {
            Uninitialized | Configured => Ok(Configured),
            Running | Shutdown => Err(ActionError::InvalidTransition { state }),
        },
        VmmAction::InstanceStart => match state {
            Uninitialized | Configured if !has_boot_source => Err(
                ActionError::PreconditionFailed("no boot source configured".into()),
            ),
            Configured => Ok(Running),
            Uninitialized => Err(ActionError::PreconditionFailed(
                "instance not configured".into(),
            )),
            Running | Shutdown => Err(ActionError::InvalidTransition { state }),
        },
        VmmAction::SendCtrlAltDel => match state {
            Running => Ok(Running),
            _ => Err(ActionError::InvalidTransition { state }),
        },
        VmmAction::FlushMetrics => Ok(state),
        _ => unreachable!("configuration actions handled above"),
    }
}

/// Routing failure, mapped onto 404/400 by the server.
#[derive(Debug, PartialEq, Eq)]
pub enum RouteError {
    NotFound,
    MethodNotAllowed,
    SchemaViolation(String),
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, RouteError> {
    serde_json::from_slice(body).map_err(|e| RouteError::SchemaViolation(e.to_string()))
}

/// Maps (method, path, body) onto a typed action.
pub fn route(method: &str, path: &str, body: &[u8]) -> Result<VmmAction, RouteError> {
    let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
    match (method, segments.as_slice()) {
        ("PUT", ["machine-config"]) => {
            let config: MachineConfig = parse_body(body)?;
            if config.vcpu_count < 1 {
                return Err(RouteError::SchemaViolation("vcpu_count must be >= 1".into()));
            }
            if config.mem_size_mib < 16 {
                return Err(RouteError::SchemaViolation("mem_size_mib must be >= 16".into()));
            }
            Ok(VmmAction::ConfigureMachine(config))
        }
        ("PUT", ["boot-source"]) => Ok(VmmAction::SetBootSource(parse_body(body)?)),
        ("PUT", ["drives", id]) => {
            let config: DriveConfig = parse_body(body)?;
            if config.drive_id != *id {
                return Err(RouteError::SchemaViolation(
                    "drive_id does not match route".into(),
                ));
            }
            Ok(VmmAction::AttachDrive(config))
        }
        ("PUT", ["network-interfaces", id]) => {
            let config: NetConfig = parse_body(body)?;
            if config.iface_id != *id {
                return Err(RouteError::SchemaViolation(
                    "iface_id does not match route".into(),
                ));
            }
            Ok(VmmAction::AttachNet(config))
        }
        ("PUT", ["vsock"]) => Ok(VmmAction::SetVsock(parse_body(body)?)),
        ("PUT", ["actions"]) => {
            #[derive(Deserialize)]
            struct ActionBody {
                action_type: String,
            }
            let body: ActionBody = parse_body(body)?;
            match body.action_type.as_str() {
                "InstanceStart" => Ok(VmmAction::InstanceStart),
                "SendCtrlAltDel" => Ok(VmmAction::SendCtrlAltDel),
                "FlushMetrics" => Ok(VmmAction::FlushMetrics),
                other => Err(RouteError::SchemaViolation(format!(
                    "unknown action_type {other:?}"
                ))),
            }
        }
        ("PUT", _) => Err(RouteError::NotFound),
        (_, ["machine-config" | "boot-source" | "vsock" | "actions"])
        | (_, ["drives" | "network-interfaces", _]) => Err(RouteError::MethodNotAllowed),
        _ => Err(RouteError::NotFound),
    }
}
