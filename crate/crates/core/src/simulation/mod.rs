//! Deterministic single-process runs of a scenario.
//!
//! Every client is a [`ClientNode`]; all traffic, including registration,
//! is encoded to frames and moved by a [`SimNetwork`], so the protocol code
//! path is the same one socket mode uses.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use log::{debug, info, warn};
use thiserror::Error;

use crate::client::{split_indices, ClientDataFile, ClientError, ClientNode, ReportTracker, RetryDecision};
use crate::community::ParticipantMetadata;
use crate::flcore::weights_digest;
use crate::netproto::sim::{LinkFault, SimEvent, SimNetwork, DEFAULT_LATENCY};
use crate::netproto::{decode, encode, Envelope, ListCommunities, Message, MetricsAck, ProtocolError};
use crate::orchestrator::server::{ServeConfig, DEFAULT_REGISTRATION_TIMEOUT_MS, DEFAULT_ROUND_TIMEOUT_MS};
use crate::orchestrator::{
    Collected, Coordinator, Dispatch, Mode, OrchestratorError, RoundContext, RoundOutcome, RoundReport, RoundTransport,
};
use crate::scenarios::{generate, FaultKind, FaultSpec, GeneratedClient, ScenarioError, ScenarioSpec};
use crate::tinylearn::evaluate;

/// Network name of the coordinator.
pub const COORDINATOR: &str = "coordinator";
/// Ticks a client waits for an ack before resending its update.
pub const ACK_TIMEOUT: u64 = 4;
/// Ticks after dispatch at which the coordinator stops collecting.
pub const ROUND_DEADLINE: u64 = 40;
/// Extra latency of a `delay` fault; always past the deadline.
pub const DELAY_TICKS: u64 = 1000;
/// A run is aborted once some cohort aborts this many rounds in a row.
pub const ABORT_STREAK: usize = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("setup failed: {0}")]
    Setup(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Sets the scenario seed and the scheduler seed.
pub fn reseed(spec: &mut ScenarioSpec, seed: u64) {
    spec.seed = seed;
    spec.scheduler.seed = seed;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Aborted,
}

/// [`RoundTransport`] over a [`SimNetwork`] with scripted faults.
pub struct SimTransport {
    net: SimNetwork,
    nodes: BTreeMap<String, ClientNode>,
    faults: Vec<FaultSpec>,
    after_dispatch: Vec<LinkFault>,
}

impl SimTransport {
    pub fn new(nodes: BTreeMap<String, ClientNode>, faults: Vec<FaultSpec>) -> Self {
        Self { net: SimNetwork::new(DEFAULT_LATENCY), nodes, faults, after_dispatch: Vec::new() }
    }

    pub fn network(&self) -> &SimNetwork {
        &self.net
    }

    pub fn node(&self, client_id: &str) -> Option<&ClientNode> {
        self.nodes.get(client_id)
    }

    pub fn node_mut(&mut self, client_id: &str) -> Option<&mut ClientNode> {
        self.nodes.get_mut(client_id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ClientNode> {
        self.nodes.values()
    }

    /// Installs `fault` for the next exchange only, after its train
    /// requests are queued (so it hits acks and later traffic).
    pub fn inject_after_dispatch(&mut self, fault: LinkFault) {
        self.after_dispatch.push(fault);
    }

    fn send(&mut self, from: &str, to: &str, env: &Envelope) -> Result<()> {
        let bytes = encode(env)?;
        self.net.send(from, to, bytes);
        Ok(())
    }

    /// Synchronous control request from a client to the coordinator.
    pub fn rpc(&mut self, coordinator: &mut Coordinator, client_id: &str, env: &Envelope) -> Result<Envelope> {
        self.send(client_id, COORDINATOR, env)?;
        let request = self.deliver_one(COORDINATOR)?;
        let reply = coordinator.handle_request(&request);
        self.send(COORDINATOR, client_id, &reply)?;
        self.deliver_one(client_id)
    }

    fn deliver_one(&mut self, to: &str) -> Result<Envelope> {
        match self.net.next_event() {
            Some((_, SimEvent::Frame { to: dest, bytes, .. })) if dest == to => Ok(decode(&bytes)?),
            other => Err(SimError::Setup(format!("expected a frame for {to}, got {other:?}"))),
        }
    }

    fn install_faults(&mut self, iteration: u64) {
        self.net.clear_faults();
        for f in self.faults.iter().filter(|f| f.round == iteration) {
            let fault = match f.kind {
                FaultKind::Drop => LinkFault::drop_all(f.client_id.clone(), COORDINATOR),
                FaultKind::Delay => LinkFault::delay(f.client_id.clone(), COORDINATOR, DELAY_TICKS),
            };
            debug!("iteration {iteration}: fault {:?} on {}", f.kind, f.client_id);
            self.net.install_fault(fault);
        }
    }
}

impl RoundTransport for SimTransport {
    fn exchange(&mut self, ctx: RoundContext<'_>, dispatches: Vec<Dispatch>) -> Collected {
        self.install_faults(ctx.iteration);
        let bytes_before = self.net.stats().bytes_sent;
        let deadline = self.net.now() + ROUND_DEADLINE;
        let mut collected = Collected::default();
        let mut seen: BTreeSet<(String, u64)> = BTreeSet::new();
        // Outstanding client updates: (client, correlation id) -> tracker, frame.
        let mut pending: BTreeMap<(String, u64), (ReportTracker, Envelope)> = BTreeMap::new();
        for d in &dispatches {
            if let Err(e) = self.send(COORDINATOR, &d.client_id, &d.envelope) {
                collected.errors.insert(d.task_id.clone(), e.to_string());
            }
        }
        for fault in std::mem::take(&mut self.after_dispatch) {
            self.net.install_fault(fault);
        }
        while self.net.peek_time().is_some_and(|t| t <= deadline) {
            let Some((_, event)) = self.net.next_event() else { break };
            match event {
                SimEvent::Frame { from, to, bytes } => {
                    let env = match decode(&bytes) {
                        Ok(env) => env,
                        Err(e) => {
                            warn!("{to}: undecodable frame from {from}: {e}");
                            continue;
                        }
                    };
                    if to == COORDINATOR {
                        self.coordinator_receives(&from, env, &dispatches, &mut seen, &mut collected);
                    } else {
                        self.client_receives(&to, env, &mut pending);
                    }
                }
                SimEvent::Timer { owner, token } => {
                    let key = (owner.clone(), token);
                    let Some((tracker, env)) = pending.get_mut(&key) else { continue };
                    match tracker.on_timeout() {
                        RetryDecision::Resend => {
                            let env = env.clone();
                            debug!("{owner}: resending update {token}");
                            if self.send(&owner, COORDINATOR, &env).is_ok() {
                                self.net.set_timer(&owner, ACK_TIMEOUT, token);
                            }
                        }
                        RetryDecision::GiveUp => {
                            warn!("{owner}: update {token} abandoned");
                            pending.remove(&key);
                        }
                        RetryDecision::Done => {
                            pending.remove(&key);
                        }
                    }
                }
            }
        }
        let lost = self.net.flush();
        self.net.advance_to(deadline);
        if lost > 0 {
            debug!("{} round {}: {lost} events past the deadline discarded", ctx.cohort_id, ctx.round);
        }
        self.net.clear_faults();
        collected.bytes_transferred = self.net.stats().bytes_sent - bytes_before;
        collected
    }
}

impl SimTransport {
    fn coordinator_receives(
        &mut self,
        from: &str,
        env: Envelope,
        dispatches: &[Dispatch],
        seen: &mut BTreeSet<(String, u64)>,
        collected: &mut Collected,
    ) {
        match &env.message {
            Message::ModelUpdateMsg(m) => {
                let duplicate = !seen.insert((m.task_id.clone(), m.round));
                let ack = env.reply(Message::MetricsAck(MetricsAck {
                    task_id: m.task_id.clone(),
                    round: m.round,
                    duplicate,
                }));
                if let Err(e) = self.send(COORDINATOR, from, &ack) {
                    warn!("ack to {from} failed: {e}");
                }
                if !duplicate {
                    match m.to_update() {
                        Ok(u) => collected.updates.push(u),
                        Err(e) => {
                            collected.errors.insert(m.task_id.clone(), e.to_string());
                        }
                    }
                }
            }
            Message::Error(e) => {
                if let Some(d) = dispatches.iter().find(|d| d.envelope.correlation_id == env.correlation_id) {
                    collected.errors.insert(d.task_id.clone(), e.message.clone());
                }
            }
            other => debug!("coordinator: ignoring {:?} from {from} during round", other.msg_type()),
        }
    }

    fn client_receives(
        &mut self,
        client: &str,
        env: Envelope,
        pending: &mut BTreeMap<(String, u64), (ReportTracker, Envelope)>,
    ) {
        if let Message::MetricsAck(_) = env.message {
            if let Some((tracker, _)) = pending.get_mut(&(client.to_string(), env.correlation_id)) {
                tracker.on_ack();
            }
            return;
        }
        let Some(node) = self.nodes.get_mut(client) else {
            warn!("frame for unknown client {client}");
            return;
        };
        let Some(reply) = node.handle(&env) else { return };
        if self.send(client, COORDINATOR, &reply).is_err() {
            return;
        }
        if matches!(reply.message, Message::ModelUpdateMsg(_)) {
            let token = reply.correlation_id;
            self.net.set_timer(client, ACK_TIMEOUT, token);
            pending.insert((client.to_string(), token), (ReportTracker::sent(), reply));
        }
    }
}

/// Ground-truth accuracy after one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracySnapshot {
    pub iteration: u64,
    /// Per task: its cohort's global model on the clean holdout split.
    pub tasks: BTreeMap<String, f64>,
    /// Per client: mean over its tasks.
    pub clients: BTreeMap<String, f64>,
    pub mean_client: f64,
}

/// A scenario run in progress.
pub struct Simulation {
    spec: ScenarioSpec,
    mode: Mode,
    coordinator: Coordinator,
    transport: SimTransport,
    clients: Vec<GeneratedClient>,
    iteration: u64,
    reports: Vec<RoundReport>,
    accuracy: Vec<AccuracySnapshot>,
    status: Option<RunStatus>,
}

impl Simulation {
    /// Generates the scenario's clients, then registers them and submits
    /// their tasks over the simulated network.
    pub fn new(spec: ScenarioSpec, mode: Mode) -> Result<Self> {
        let clients = generate(&spec)?;
        let mut nodes = BTreeMap::new();
        for c in &clients {
            let mut node = ClientNode::new(c.metadata.clone(), c.data.clone(), c.split_seed)?
                .with_resources(c.resources)?
                .with_neighbors(c.neighbors.clone());
            for t in &c.tasks {
                node.add_task(t.clone())?;
            }
            nodes.insert(c.client_id.clone(), node);
        }
        let coordinator = Coordinator::new(spec.scheduler, mode, spec.communities.clone())?;
        let transport = SimTransport::new(nodes, spec.faults.clone());
        let mut sim = Self {
            spec,
            mode,
            coordinator,
            transport,
            clients,
            iteration: 0,
            reports: Vec::new(),
            accuracy: Vec::new(),
            status: None,
        };
        let ids: Vec<String> = sim.clients.iter().map(|c| c.client_id.clone()).collect();
        for id in &ids {
            sim.register(id)?;
            let list = sim.request(id, Message::ListCommunities(ListCommunities {}))?;
            if !matches!(list.message, Message::CommunityList(_)) {
                return Err(SimError::Setup(format!("{id}: community list refused")));
            }
            let task_ids: Vec<String> = sim.transport.nodes[id].tasks().map(|t| t.task_id.clone()).collect();
            for task_id in task_ids {
                let msg = sim.transport.nodes[id].submit_message(&task_id)?;
                let reply = sim.request(id, msg)?;
                match reply.message {
                    Message::TaskAck(ack) => info!("{id}: {} in {}", ack.task_id, ack.population_id),
                    Message::Error(e) => {
                        return Err(SimError::Setup(format!("{id}: task {task_id} refused: {}", e.message)))
                    }
                    other => return Err(SimError::Setup(format!("{id}: unexpected {:?}", other.msg_type()))),
                }
            }
        }
        Ok(sim)
    }

    fn request(&mut self, client_id: &str, message: Message) -> Result<Envelope> {
        let env = Envelope::new(self.transport.net.stats().frames_sent, message);
        self.transport.rpc(&mut self.coordinator, client_id, &env)
    }

    fn register(&mut self, client_id: &str) -> Result<()> {
        let msg = self.transport.nodes[client_id].register_message();
        let reply = self.request(client_id, msg)?;
        match &reply.message {
            Message::RegisterAck(ack) => {
                Ok(self.transport.node_mut(client_id).expect("node exists").on_register_ack(ack)?)
            }
            Message::Error(e) => Err(SimError::Setup(format!("{client_id}: registration refused: {}", e.message))),
            other => Err(SimError::Setup(format!("{client_id}: unexpected {:?}", other.msg_type()))),
        }
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    pub fn transport(&self) -> &SimTransport {
        &self.transport
    }

    pub fn clients(&self) -> &[GeneratedClient] {
        &self.clients
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn accuracy(&self) -> &[AccuracySnapshot] {
        &self.accuracy
    }

    pub fn status(&self) -> Option<RunStatus> {
        self.status
    }

    fn apply_drift(&mut self, iteration: u64) -> Result<()> {
        let events: Vec<_> = self.spec.drift_events.iter().filter(|d| d.round == iteration).cloned().collect();
        for d in events {
            let c = self.clients.iter_mut().find(|c| c.client_id == d.client_id).expect("validated client id");
            c.move_to_cluster(&self.spec, d.new_cluster)?;
            info!("iteration {iteration}: {} drifts to cluster {}", d.client_id, d.new_cluster);
            let data = c.data.clone();
            self.transport.node_mut(&d.client_id).expect("node exists").replace_data(data)?;
            self.register(&d.client_id)?;
        }
        Ok(())
    }

    /// Accuracy of every task's current cohort model on clean holdout data.
    pub fn measure(&self) -> Result<AccuracySnapshot> {
        let mut tasks = BTreeMap::new();
        let mut clients = BTreeMap::new();
        for c in &self.clients {
            let mut accs = Vec::new();
            for t in &c.tasks {
                let (Some(cohort), Some(plan)) =
                    (self.coordinator.cohort_of(&t.task_id), self.coordinator.plan(&t.task_id))
                else {
                    continue;
                };
                let (_, holdout) = split_indices(c.clean.len(), c.split_seed, plan.eval_holdout_fraction);
                let holdout = c.clean.subset(&holdout).map_err(ClientError::from)?;
                let acc = evaluate(&cohort.global_weights, &holdout).map_err(ClientError::from)?.accuracy;
                tasks.insert(t.task_id.clone(), acc);
                accs.push(acc);
            }
            if !accs.is_empty() {
                clients.insert(c.client_id.clone(), accs.iter().sum::<f64>() / accs.len() as f64);
            }
        }
        let mean_client =
            if clients.is_empty() { f64::NAN } else { clients.values().sum::<f64>() / clients.len() as f64 };
        Ok(AccuracySnapshot { iteration: self.iteration, tasks, clients, mean_client })
    }

    fn abort_streak_reached(&self) -> bool {
        let mut by_cohort: BTreeMap<&str, Vec<RoundOutcome>> = BTreeMap::new();
        for r in &self.reports {
            by_cohort.entry(&r.cohort_id).or_default().push(r.outcome);
        }
        by_cohort
            .values()
            .any(|o| o.len() >= ABORT_STREAK && o[o.len() - ABORT_STREAK..].iter().all(|x| *x == RoundOutcome::Aborted))
    }

    /// Runs one scheduler iteration. Returns that iteration's reports.
    pub fn step(&mut self) -> Result<&[RoundReport]> {
        self.iteration += 1;
        let iteration = self.iteration;
        self.apply_drift(iteration)?;
        let batch = self.coordinator.run_iteration(iteration, &mut self.transport)?;
        let start = self.reports.len();
        self.reports.extend(batch);
        let snapshot = self.measure()?;
        debug!("iteration {iteration}: mean client accuracy {:.4}", snapshot.mean_client);
        self.accuracy.push(snapshot);
        Ok(&self.reports[start..])
    }

    /// Runs until `scheduler.rounds` iterations are done or a cohort hits
    /// the abort streak. `on_iteration` sees the run after every iteration.
    pub fn run_with(&mut self, on_iteration: &mut dyn FnMut(&Simulation)) -> Result<RunStatus> {
        while self.iteration < u64::from(self.spec.scheduler.rounds) {
            self.step()?;
            on_iteration(self);
            if self.abort_streak_reached() {
                warn!("a cohort aborted {ABORT_STREAK} rounds in a row; stopping");
                self.status = Some(RunStatus::Aborted);
                return Ok(RunStatus::Aborted);
            }
        }
        self.status = Some(RunStatus::Completed);
        Ok(RunStatus::Completed)
    }

    pub fn run(&mut self) -> Result<RunStatus> {
        self.run_with(&mut |_| {})
    }

    /// Hex digest of every cohort's current global weights.
    pub fn weight_hashes(&self) -> BTreeMap<String, String> {
        self.coordinator
            .cohorts()
            .into_iter()
            .map(|c| (c.cohort_id.clone(), format!("{:016x}", weights_digest(&c.global_weights))))
            .collect()
    }
}

/// Per task: fraction of its received updates the guard flagged, over the
/// given iterations. Tasks without updates in the range are omitted.
pub fn task_flag_rates(reports: &[RoundReport], iterations: RangeInclusive<u64>) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in reports.iter().filter(|r| iterations.contains(&r.iteration)) {
        for (task, verdict) in &r.guard_verdicts {
            let e = counts.entry(task.clone()).or_default();
            e.0 += usize::from(verdict.is_flag());
            e.1 += 1;
        }
    }
    counts.into_iter().map(|(t, (f, n))| (t, f as f64 / n as f64)).collect()
}

/// Files for running a scenario over sockets: one coordinator config and a
/// metadata plus data file per client.
#[derive(Debug, Clone, PartialEq)]
pub struct SocketBundle {
    pub server: ServeConfig,
    pub clients: Vec<(ParticipantMetadata, ClientDataFile)>,
}

/// Builds the socket-mode equivalent of a scenario. Drift events and
/// scripted faults only exist in simulation and are left out.
pub fn socket_bundle(spec: &ScenarioSpec, mode: Mode) -> Result<SocketBundle> {
    let clients = generate(spec)?;
    if !spec.drift_events.is_empty() || !spec.faults.is_empty() {
        warn!("{}: drift events and faults are simulation-only and are not exported", spec.name);
    }
    let server = ServeConfig {
        scheduler: spec.scheduler,
        mode,
        communities: spec.communities.clone(),
        expected_tasks: spec.tasks.iter().map(|t| t.task_id.clone()).collect(),
        round_timeout_ms: DEFAULT_ROUND_TIMEOUT_MS,
        registration_timeout_ms: DEFAULT_REGISTRATION_TIMEOUT_MS,
    };
    let clients = clients
        .into_iter()
        .map(|c| {
            let file = ClientDataFile {
                dataset: c.data,
                split_seed: c.split_seed,
                tasks: c.tasks,
                resources: c.resources,
                neighbors: c.neighbors,
            };
            (c.metadata, file)
        })
        .collect();
    Ok(SocketBundle { server, clients })
}
