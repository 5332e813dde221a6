//! Monitor entry-point flags and config-file ingestion.
//!
//! A config file is the API without the socket: the same JSON schemas,
//! replayed in a fixed order, ending in an instance start. `--no-api`
//! therefore requires one.

use std::path::PathBuf;

use clap::Parser;

use crate::api::{BootSourceConfig, DriveConfig, MachineConfig, NetConfig, VmmAction, VsockConfig};

#[derive(Debug, Parser, PartialEq, Eq)]
#[command(name = "microvm", about = "Minimal micro-VM monitor", disable_version_flag = true)]
pub struct LaunchOptions {
    /// Path of the HTTP control socket.
    #[arg(long = "api-sock")]
    pub api_socket_path: Option<PathBuf>,

    /// JSON machine description replayed at startup (same schemas as the
    /// HTTP routes).
    #[arg(long = "config-file")]
    pub config_file: Option<PathBuf>,

    /// Run without the API thread; requires --config-file.
    #[arg(long = "no-api", default_value_t = false)]
    pub no_api: bool,

    /// File for line-delimited JSON metrics snapshots.
    #[arg(long = "metrics-path")]
    pub metrics_path: Option<PathBuf>,

    /// Seccomp filtering level: 0 off, 1 syscall whitelist, 2 whitelist
    /// with argument checks.
    #[arg(long = "seccomp-level", default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=2))]
    pub seccomp_level: u8,

    /// Instance id reported by the API.
    #[arg(long = "id", default_value = "microvm")]
    pub instance_id: String,
}

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses and validates the command line.
pub fn parse_args<I, T>(argv: I) -> Result<LaunchOptions, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let options = LaunchOptions::try_parse_from(argv).map_err(|e| UsageError(e.to_string()))?;
    if options.no_api && options.config_file.is_none() {
        return Err(UsageError("--no-api requires --config-file".into()));
    }
    if !options.no_api && options.api_socket_path.is_none() {
        return Err(UsageError("--api-sock is required unless --no-api is set".into()));
    }
    Ok(options)
}

/// On-disk machine description; field names mirror the HTTP routes.
#[derive(Debug, serde::Deserialize)]
pub struct ConfigFile {
    #[serde(rename = "machine-config")]
    pub machine_config: Option<MachineConfig>,
    #[serde(rename = "boot-source")]
    pub boot_source: BootSourceConfig,
    #[serde(default)]
    pub drives: Vec<DriveConfig>,
    #[serde(rename = "network-interfaces", default)]
    pub network_interfaces: Vec<NetConfig>,
    pub vsock: Option<VsockConfig>,
}

/// Expands a config file into the action sequence the API would have
/// produced: machine config, boot source, drives, network interfaces,
/// vsock, then the start command.
pub fn actions_from_config(text: &str) -> Result<Vec<VmmAction>, String> {
    let config: ConfigFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut actions = Vec::new();
    if let Some(machine) = config.machine_config {
        actions.push(VmmAction::ConfigureMachine(machine));
    }
    actions.push(VmmAction::SetBootSource(config.boot_source));
    for drive in config.drives {
        actions.push(VmmAction::AttachDrive(drive));
    }
    for iface in config.network_interfaces {
        actions.push(VmmAction::AttachNet(iface));
    }
    if let Some(vsock) = config.vsock {
        actions.push(VmmAction::SetVsock(vsock));
    }
    actions.push(VmmAction::InstanceStart);
    Ok(actions)
}
