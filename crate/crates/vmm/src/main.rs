//! Monitor binary: wires the CLI, the API thread, and the VMM event loop.

use std::process::ExitCode;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use vmm::api::server::{ActionResult, ApiRequest, ApiServer};
use vmm::api::InstanceState;
use vmm::cli;
use vmm::event_loop::EventLoop;
use vmm::sys::EventFd;
use vmm::vmm::{Vmm, VmmOptions};

fn main() -> ExitCode {
    let options = match cli::parse_args(std::env::args()) {
        Ok(options) => options,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };

    match run(options) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("microvm: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run(options: cli::LaunchOptions) -> Result<(), String> {
    let state = Arc::new(Mutex::new(InstanceState::Uninitialized));
    let (action_tx, action_rx) = mpsc::channel::<ApiRequest>();
    let action_wakeup = EventFd::new().map_err(|e| e.to_string())?;

    let mut event_loop = EventLoop::new().map_err(|e| e.to_string())?;
    let mut vmm = Vmm::new(
        VmmOptions {
            instance_id: options.instance_id.clone(),
            metrics_path: options.metrics_path.clone(),
            seccomp_level: options.seccomp_level,
            serial_sink: None,
        },
        action_rx,
        action_wakeup.try_clone().map_err(|e| e.to_string())?,
        state.clone(),
        &mut event_loop,
    )
    .map_err(|e| e.to_string())?;

    // The API thread, unless this is a config-file-only run.
    let api_shutdown = EventFd::new().map_err(|e| e.to_string())?;
    let api_thread = if options.no_api {
        None
    } else {
        let socket_path = options.api_socket_path.clone().expect("validated by cli");
        let mut server = ApiServer::bind(
            &socket_path,
            options.instance_id.clone(),
            action_tx.clone(),
            action_wakeup.try_clone().map_err(|e| e.to_string())?,
            api_shutdown.try_clone().map_err(|e| e.to_string())?,
            state.clone(),
        )
        .map_err(|e| format!("binding {}: {e}", socket_path.display()))?;
        Some(
            std::thread::Builder::new()
                .name("api-server".into())
                .spawn(move || server.run())
                .map_err(|e| e.to_string())?,
        )
    };

    // Replay the config file through the same channel the API uses, then
    // verify every action landed before entering the steady-state loop.
    if let Some(path) = &options.config_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        let actions = cli::actions_from_config(&text)
            .map_err(|e| format!("parsing {}: {e}", path.display()))?;
        let mut replies = Vec::new();
        for (i, action) in actions.into_iter().enumerate() {
            let (reply_tx, reply_rx) = mpsc::sync_channel::<ActionResult>(1);
            action_tx
                .send(ApiRequest { id: i as u64, action, responder: reply_tx })
                .map_err(|e| e.to_string())?;
            replies.push(reply_rx);
        }
        action_wakeup.write(1).map_err(|e| e.to_string())?;
        event_loop
            .run_once(0, &mut vmm)
            .map_err(|e| e.to_string())?;
        for reply in replies {
            let result = reply
                .try_recv()
                .map_err(|_| "config action left unanswered".to_string())?;
            if let Err(error) = result.outcome {
                return Err(format!("config boot failed: {error}"));
            }
        }
    }

    let loop_result = event_loop.run(&mut vmm).map_err(|e| e.to_string());

    // Unwind the API thread before judging the run.
    let _ = api_shutdown.write(1);
    if let Some(thread) = api_thread {
        let _ = thread.join();
    }
    loop_result?;
    if vmm.join_timeout {
        return Err("vCPU threads failed to stop in time".into());
    }
    Ok(())
}
