//! Socket-mode coordinator.
//!
//! Connections are accepted and served concurrently while clients register
//! and submit tasks. Once every expected task is in, the connections are
//! handed to the round loop, which talks to each client on its own thread.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    Collected, Coordinator, Dispatch, Mode, OrchestratorError, RoundContext, RoundReport, RoundTransport,
    SchedulerConfig,
};
use crate::community::Community;
use crate::netproto::socket::{Connection, FrameError};
use crate::netproto::{Envelope, ErrorCode, Message, MetricsAck, ProtocolError};

pub const DEFAULT_ROUND_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_REGISTRATION_TIMEOUT_MS: u64 = 120_000;

fn default_round_timeout() -> u64 {
    DEFAULT_ROUND_TIMEOUT_MS
}

fn default_registration_timeout() -> u64 {
    DEFAULT_REGISTRATION_TIMEOUT_MS
}

/// Coordinator process configuration (`serve --config`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub scheduler: SchedulerConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub communities: Vec<Community>,
    /// Training starts once all of these tasks have been submitted.
    pub expected_tasks: Vec<String>,
    #[serde(default = "default_round_timeout")]
    pub round_timeout_ms: u64,
    #[serde(default = "default_registration_timeout")]
    pub registration_timeout_ms: u64,
}

fn default_mode() -> Mode {
    Mode::Cohort
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("invalid serve config: {0}")]
    Config(String),
    #[error("timed out waiting for tasks: {0:?}")]
    RegistrationTimeout(Vec<String>),
}

#[derive(Debug)]
pub struct ServeOutcome {
    pub coordinator: Coordinator,
    pub reports: Vec<RoundReport>,
    pub iterations_run: u64,
    pub interrupted: bool,
}

const POLL: Duration = Duration::from_millis(20);

/// Serves one session: registration, then `scheduler.rounds` iterations.
/// `on_iteration` sees the coordinator after each iteration (artifact flush).
/// Setting `stop` ends the run after the current iteration.
pub fn serve(
    listener: TcpListener,
    config: ServeConfig,
    stop: Arc<AtomicBool>,
    on_iteration: &mut dyn FnMut(&Coordinator, &[RoundReport]),
) -> Result<ServeOutcome, ServeError> {
    if config.expected_tasks.is_empty() {
        return Err(ServeError::Config("expected_tasks is empty".into()));
    }
    let coordinator =
        Arc::new(Mutex::new(Coordinator::new(config.scheduler, config.mode, config.communities.clone())?));
    let started = Arc::new(AtomicBool::new(false));
    let expected: BTreeSet<String> = config.expected_tasks.iter().cloned().collect();
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + Duration::from_millis(config.registration_timeout_ms);
    let mut handshakes = Vec::new();
    loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let missing: Vec<String> = {
            let c = coordinator.lock().expect("coordinator lock");
            expected.iter().filter(|t| c.plan(t).is_none()).cloned().collect()
        };
        if missing.is_empty() {
            break;
        }
        if Instant::now() > deadline {
            started.store(true, Ordering::SeqCst);
            return Err(ServeError::RegistrationTimeout(missing));
        }
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                let coord = Arc::clone(&coordinator);
                let started = Arc::clone(&started);
                handshakes.push(thread::spawn(move || handshake(stream, coord, started)));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => return Err(e.into()),
        }
    }
    started.store(true, Ordering::SeqCst);
    let mut connections: BTreeMap<String, Connection> = BTreeMap::new();
    for h in handshakes {
        if let Ok(Some((client_id, conn))) = h.join() {
            connections.insert(client_id, conn);
        }
    }
    drop(listener);
    let mut coordinator = Arc::try_unwrap(coordinator)
        .map_err(|_| ServeError::Config("handshake threads still hold the coordinator".into()))?
        .into_inner()
        .expect("coordinator lock");
    info!("{} clients connected, {} tasks; starting rounds", connections.len(), coordinator.task_count());

    let mut transport = SocketTransport { connections, timeout: Duration::from_millis(config.round_timeout_ms) };
    let mut reports = Vec::new();
    let mut iterations_run = 0;
    let mut interrupted = stop.load(Ordering::SeqCst);
    for iteration in 1..=u64::from(config.scheduler.rounds) {
        if interrupted || stop.load(Ordering::SeqCst) {
            interrupted = true;
            break;
        }
        let batch = coordinator.run_iteration(iteration, &mut transport)?;
        iterations_run = iteration;
        on_iteration(&coordinator, &batch);
        reports.extend(batch);
    }
    info!("session finished after {iterations_run} iterations");
    Ok(ServeOutcome { coordinator, reports, iterations_run, interrupted })
}

/// Serves control requests on one connection until training starts. Returns
/// the connection keyed by client id if the peer registered.
fn handshake(
    stream: TcpStream,
    coordinator: Arc<Mutex<Coordinator>>,
    started: Arc<AtomicBool>,
) -> Option<(String, Connection)> {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    stream.set_nonblocking(false).ok()?;
    stream.set_nodelay(true).ok()?;
    let mut conn = Connection::from_stream(stream);
    let mut client_id = None;
    let mut probe = [0u8; 1];
    loop {
        conn.stream().set_read_timeout(Some(POLL)).ok()?;
        match conn.stream().peek(&mut probe) {
            Ok(0) => return None,
            Ok(_) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if started.load(Ordering::SeqCst) {
                    return client_id.map(|id| (id, conn));
                }
                continue;
            }
            Err(_) => return None,
        }
        conn.stream().set_read_timeout(Some(Duration::from_secs(10))).ok()?;
        let env = match conn.recv() {
            Ok(env) => env,
            Err(FrameError::Protocol(e)) => {
                warn!("{peer}: refusing connection: {e}");
                let code = match e {
                    ProtocolError::UnsupportedVersion(_) => ErrorCode::UnsupportedVersion,
                    _ => ErrorCode::Malformed,
                };
                let _ = conn.send(&Envelope::error(0, code, e.to_string()));
                return None;
            }
            Err(_) => return None,
        };
        let reply = coordinator.lock().expect("coordinator lock").handle_request(&env);
        if let (Message::Register(r), Message::RegisterAck(_)) = (&env.message, &reply.message) {
            client_id = Some(r.metadata.participant_id.clone());
        }
        if conn.send(&reply).is_err() {
            return None;
        }
    }
}

/// Per-client request/response over established connections.
pub struct SocketTransport {
    connections: BTreeMap<String, Connection>,
    timeout: Duration,
}

struct ClientResult {
    collected: Collected,
    alive: bool,
}

fn serve_client(conn: &mut Connection, dispatches: &[Dispatch], timeout: Duration) -> ClientResult {
    let start = (conn.bytes_sent, conn.bytes_received);
    let mut collected = Collected::default();
    let mut seen: BTreeSet<(String, u64)> = BTreeSet::new();
    let mut alive = true;
    let deadline = Instant::now() + timeout;
    'requests: for d in dispatches {
        if let Err(e) = conn.send(&d.envelope) {
            warn!("{}: send failed: {e}", d.client_id);
            alive = false;
            break;
        }
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() || conn.stream().set_read_timeout(Some(left)).is_err() {
                alive = false;
                break 'requests;
            }
            let env = match conn.recv() {
                Ok(env) => env,
                Err(e) => {
                    warn!("{}: connection lost during round: {e}", d.client_id);
                    alive = false;
                    break 'requests;
                }
            };
            match &env.message {
                Message::ModelUpdateMsg(m) => {
                    let duplicate = !seen.insert((m.task_id.clone(), m.round));
                    let ack = env.reply(Message::MetricsAck(MetricsAck {
                        task_id: m.task_id.clone(),
                        round: m.round,
                        duplicate,
                    }));
                    if conn.send(&ack).is_err() {
                        alive = false;
                        break 'requests;
                    }
                    if !duplicate {
                        match m.to_update() {
                            Ok(u) => collected.updates.push(u),
                            Err(e) => {
                                collected.errors.insert(m.task_id.clone(), e.to_string());
                            }
                        }
                    }
                    if env.correlation_id == d.envelope.correlation_id {
                        break;
                    }
                }
                Message::Error(e) if env.correlation_id == d.envelope.correlation_id => {
                    collected.errors.insert(d.task_id.clone(), e.message.clone());
                    break;
                }
                other => debug!("{}: ignoring {:?} during round", d.client_id, other.msg_type()),
            }
        }
    }
    collected.bytes_transferred = (conn.bytes_sent - start.0) + (conn.bytes_received - start.1);
    ClientResult { collected, alive }
}

impl RoundTransport for SocketTransport {
    fn exchange(&mut self, ctx: RoundContext<'_>, dispatches: Vec<Dispatch>) -> Collected {
        let mut by_client: BTreeMap<String, Vec<Dispatch>> = BTreeMap::new();
        for d in dispatches {
            by_client.entry(d.client_id.clone()).or_default().push(d);
        }
        let timeout = self.timeout;
        let results: Vec<(String, ClientResult)> = thread::scope(|scope| {
            let handles: Vec<_> = self
                .connections
                .iter_mut()
                .filter_map(|(id, conn)| by_client.get(id).map(|ds| (id.clone(), conn, ds)))
                .map(|(id, conn, ds)| (id, scope.spawn(move || serve_client(conn, ds, timeout))))
                .collect();
            handles.into_iter().map(|(id, h)| (id, h.join().expect("client thread"))).collect()
        });
        let mut out = Collected::default();
        for (id, r) in results {
            if !r.alive {
                warn!("{id}: dropped from {} round {}", ctx.cohort_id, ctx.round);
                self.connections.remove(&id);
            }
            out.updates.extend(r.collected.updates);
            out.errors.extend(r.collected.errors);
            out.bytes_transferred += r.collected.bytes_transferred;
        }
        out.updates.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        out
    }
}
