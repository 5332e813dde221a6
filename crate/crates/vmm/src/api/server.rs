//! HTTP/1.1 control server on a local stream socket.
//!
//! One thread, its own epoll set: the listening socket, a shutdown
//! eventfd, and a map of token → connection. Requests are parsed
//! incrementally per connection; each parsed request becomes a
//! [`VmmAction`] sent to the VMM thread with a reply slot, and the HTTP
//! response is written only after the VMM posts the result, so every
//! request gets exactly one response, in order.

use std::collections::HashMap;
use std::io::{self, ErrorKind, Read, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::sync::mpsc::{sync_channel, Sender};
use std::sync::{Arc, Mutex};

use crate::api::{route, ActionError, InstanceState, RouteError, VmmAction};
use crate::sys::EventFd;

const TOKEN_LISTENER: u64 = 0;
const TOKEN_SHUTDOWN: u64 = 1;
const FIRST_CONN_TOKEN: u64 = 2;
const MAX_HEADER_BYTES: usize = 8 * 1024;
const MAX_BODY_BYTES: usize = 64 * 1024;

/// An action in flight to the VMM thread, with its reply slot and a
/// correlation id that must come back unchanged.
pub struct ApiRequest {
    pub id: u64,
    pub action: VmmAction,
    pub responder: std::sync::mpsc::SyncSender<ActionResult>,
}

#[derive(Debug)]
pub struct ActionResult {
    pub id: u64,
    pub outcome: Result<(), ActionError>,
}

struct Connection {
    stream: UnixStream,
    buffer: Vec<u8>,
}

/// A parsed request, plus how many buffer bytes it consumed.
struct ParsedRequest {
    method: String,
    path: String,
    body: Vec<u8>,
    consumed: usize,
}

/// Incremental HTTP/1.1 request parser. `Ok(None)` means "need more
/// bytes"; `Err` means the connection is hopeless and must close.
fn try_parse(buffer: &[u8]) -> Result<Option<ParsedRequest>, &'static str> {
    let Some(header_end) = buffer.windows(4).position(|w| w == b"\r\n\r\n") else {
        if buffer.len() > MAX_HEADER_BYTES {
            return Err("header block too large");
        }
        return Ok(None);
    };
    let header = std::str::from_utf8(&buffer[..header_end]).map_err(|_| "non-UTF8 header")?;
    let mut lines = header.split("\r\n");
    let request_line = lines.next().ok_or("empty request")?;
    let mut parts = request_line.split(' ');
    let method = parts.next().ok_or("missing method")?.to_string();
    let path = parts.next().ok_or("missing path")?.to_string();
    let version = parts.next().ok_or("missing version")?;
    if !version.starts_with("HTTP/1.") {
        return Err("unsupported HTTP version");
    }

    let mut content_length = 0usize;
    for line in lines {
        let Some((name, value)) = line.split_once(':') else {
            continue;
        };
        if name.eq_ignore_ascii_case("content-length") {
            content_length = value.trim().parse().map_err(|_| "bad content-length")?;
            if content_length > MAX_BODY_BYTES {
                return Err("body too large");
            }
        }
    }

    let body_start = header_end + 4;
    if buffer.len() < body_start + content_length {
        return Ok(None);
    }
    Ok(Some(ParsedRequest {
        method,
        path,
        body: buffer[body_start..body_start + content_length].to_vec(),
        consumed: body_start + content_length,
    }))
}

struct Response {
    status: u16,
    body: Option<String>,
}

impl Response {
    fn no_content() -> Response {
        Response { status: 204, body: None }
    }

    fn json(status: u16, body: String) -> Response {
        Response { status, body: Some(body) }
    }

    fn error(status: u16, message: &str) -> Response {
        Response::json(
            status,
            serde_json::json!({ "error": message }).to_string(),
        )
    }

    fn serialize(&self) -> Vec<u8> {
        let reason = match self.status {
            200 => "OK",
            204 => "No Content",
            400 => "Bad Request",
            404 => "Not Found",
            409 => "Conflict",
            _ => "Internal Server Error",
        };
        let body = self.body.as_deref().unwrap_or("");
        let mut out = format!(
            "HTTP/1.1 {} {}\r\nServer: microvm\r\nConnection: keep-alive\r\nContent-Length: {}\r\n",
            self.status,
            reason,
            body.len()
        );
        if self.body.is_some() {
            out.push_str("Content-Type: application/json\r\n");
        }
        out.push_str("\r\n");
        out.push_str(body);
        out.into_bytes()
    }
}

/// The API server thread state.
pub struct ApiServer {
    listener: UnixListener,
    epoll: OwnedFd,
    connections: HashMap<u64, Connection>,
    next_token: u64,
    to_vmm: Sender<ApiRequest>,
    wakeup: EventFd,
    shutdown: EventFd,
    state: Arc<Mutex<InstanceState>>,
    instance_id: String,
    next_request_id: u64,
    /// Dispatched readiness events; stays flat while the server idles.
    pub events_handled: u64,
    /// Requests that received a response.
    pub requests_served: u64,
}

impl ApiServer {
    /// Binds the control socket. `wakeup` pokes the VMM loop after a send;
    /// `shutdown` asks the server thread to exit.
    pub fn bind(
        socket_path: &Path,
        instance_id: String,
        to_vmm: Sender<ApiRequest>,
        wakeup: EventFd,
        shutdown: EventFd,
        state: Arc<Mutex<InstanceState>>,
    ) -> io::Result<ApiServer> {
        let _ = std::fs::remove_file(socket_path);
        let listener = UnixListener::bind(socket_path)?;
        listener.set_nonblocking(true)?;

        // SAFETY: epoll_create1 returns a fresh descriptor or -1.
        let epoll_fd = unsafe { libc::epoll_create1(libc::EPOLL_CLOEXEC) };
        if epoll_fd < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: fresh descriptor, unowned.
        let epoll = unsafe { OwnedFd::from_raw_fd(epoll_fd) };

        let server = ApiServer {
            listener,
            epoll,
            connections: HashMap::new(),
            next_token: FIRST_CONN_TOKEN,
            to_vmm,
            wakeup,
            shutdown,
            state,
            instance_id,
            next_request_id: 0,
            events_handled: 0,
            requests_served: 0,
        };
        server.watch(server.listener.as_raw_fd(), TOKEN_LISTENER)?;
        server.watch(server.shutdown.as_raw_fd(), TOKEN_SHUTDOWN)?;
        Ok(server)
    }

    fn watch(&self, fd: i32, token: u64) -> io::Result<()> {
        let mut event = libc::epoll_event {
            events: (libc::EPOLLIN | libc::EPOLLET) as u32,
            u64: token,
        };
        // SAFETY: event initialized, fd owned by self.
        let rc = unsafe {
            libc::epoll_ctl(self.epoll.as_raw_fd(), libc::EPOLL_CTL_ADD, fd, &mut event)
        };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    /// Serves until the shutdown eventfd fires or the VMM channel closes.
    /// Blocks on epoll between events.
    pub fn run(&mut self) {
        let mut events = [libc::epoll_event { events: 0, u64: 0 }; 32];
        loop {
            // SAFETY: events sized as declared; blocks until readiness.
            let n = unsafe {
                libc::epoll_wait(self.epoll.as_raw_fd(), events.as_mut_ptr(), 32, -1)
            };
            if n < 0 {
                if io::Error::last_os_error().kind() == ErrorKind::Interrupted {
                    continue;
                }
                return;
            }
            for event in events.iter().take(n as usize) {
                self.events_handled += 1;
                match event.u64 {
                    TOKEN_LISTENER => self.accept_all(),
                    TOKEN_SHUTDOWN => {
                        let _ = self.shutdown.read();
                        return;
                    }
                    token => {
                        if !self.service_connection(token) {
                            self.connections.remove(&token);
                        }
                    }
                }
            }
        }
    }

    fn accept_all(&mut self) {
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    if stream.set_nonblocking(true).is_err() {
                        continue;
                    }
                    let token = self.next_token;
                    self.next_token += 1;
                    if self.watch(stream.as_raw_fd(), token).is_ok() {
                        self.connections
                            .insert(token, Connection { stream, buffer: Vec::new() });
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(_) => break,
            }
        }
    }

    /// Drains a connection edge; false means the connection is done.
    fn service_connection(&mut self, token: u64) -> bool {
        loop {
            let Some(conn) = self.connections.get_mut(&token) else {
                return false;
            };
            let mut chunk = [0u8; 4096];
            match conn.stream.read(&mut chunk) {
                Ok(0) => return false,
                Ok(n) => conn.buffer.extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(_) => return false,
            }
        }

        // Serve every complete request buffered so far.
        loop {
            let Some(conn) = self.connections.get_mut(&token) else {
                return false;
            };
            match try_parse(&conn.buffer) {
                Ok(Some(request)) => {
                    conn.buffer.drain(..request.consumed);
                    let response = self.handle(&request);
                    self.requests_served += 1;
                    let Some(conn) = self.connections.get_mut(&token) else {
                        return false;
                    };
                    if write_fully(&mut conn.stream, &response.serialize()).is_err() {
                        return false;
                    }
                }
                Ok(None) => return true,
                Err(why) => {
                    let Some(conn) = self.connections.get_mut(&token) else {
                        return false;
                    };
                    let _ = write_fully(&mut conn.stream, &Response::error(400, why).serialize());
                    return false;
                }
            }
        }
    }

    fn current_state(&self) -> InstanceState {
        *self.state.lock().unwrap()
    }

    fn handle(&mut self, request: &ParsedRequest) -> Response {
        if request.method == "GET" && (request.path == "/" || request.path.is_empty()) {
            let body = serde_json::json!({
                "id": self.instance_id,
                "state": self.current_state().name(),
            });
            return Response::json(200, body.to_string());
        }

        let action = match route(&request.method, &request.path, &request.body) {
            Ok(action) => action,
            Err(RouteError::NotFound) | Err(RouteError::MethodNotAllowed) => {
                return Response::error(404, "no such resource");
            }
            Err(RouteError::SchemaViolation(msg)) => return Response::error(400, &msg),
        };

        // Fast pre-check so a started instance refuses configuration
        // without a VMM round trip; the VMM re-validates regardless.
        let state = self.current_state();
        if action.is_configuration()
            && matches!(state, InstanceState::Running | InstanceState::Shutdown)
        {
            return conflict_response(state);
        }

        let id = self.next_request_id;
        self.next_request_id += 1;
        let (reply_tx, reply_rx) = sync_channel(1);
        let request = ApiRequest { id, action, responder: reply_tx };
        if self.to_vmm.send(request).is_err() {
            return Response::error(500, "VMM unavailable");
        }
        let _ = self.wakeup.write(1);
        let Ok(result) = reply_rx.recv() else {
            return Response::error(500, "VMM dropped the request");
        };
        // Correlation: the reply slot is per-request, ids must agree.
        assert_eq!(result.id, id, "response correlation violated");
        match result.outcome {
            Ok(()) => Response::no_content(),
            Err(ActionError::InvalidTransition { state }) => conflict_response(state),
            Err(error) => Response::error(400, &error.to_string()),
        }
    }
}

fn conflict_response(state: InstanceState) -> Response {
    Response::json(
        409,
        serde_json::json!({
            "error": format!("not allowed while {}", state.name()),
            "state": state.name(),
        })
        .to_string(),
    )
}

fn write_fully(stream: &mut UnixStream, bytes: &[u8]) -> io::Result<()> {
    let mut written = 0;
    while written < bytes.len() {
        match stream.write(&bytes[written..]) {
            Ok(n) => written += n,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                // Wait for the socket to drain; responses are small.
                let mut fds = libc::pollfd {
                    fd: stream.as_raw_fd(),
                    events: libc::POLLOUT,
                    revents: 0,
                };
                // SAFETY: single pollfd, bounded wait.
                unsafe { libc::poll(&mut fds, 1, 1000) };
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
