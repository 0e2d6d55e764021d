//! Client side: local data, plan execution, delegation, and metric reporting.

use std::collections::BTreeMap;
use std::time::Duration;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::community::{DataSignature, ParticipantMetadata};
use crate::flcore::{FlTask, ModelUpdate};
use crate::netproto::socket::{Connection, FrameError};
use crate::netproto::{
    Envelope, ErrorCode, ListCommunities, Message, ModelUpdateMsg, ProtocolError, Register, RegisterAck, SubmitTask,
    TrainRequest,
};
use crate::tinylearn::{evaluate, train_local, Dataset, LearnError, WeightVector};

/// Delivery attempts for one update before the client gives up for the round.
pub const MAX_REPORT_ATTEMPTS: u32 = 3;
/// Below this battery level training is handed to a trusted neighbor.
pub const LOW_BATTERY: f64 = 0.2;
/// Local models kept per task; only the latest earlier round is ever read.
const KEPT_LOCAL_MODELS: usize = 2;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client is not registered")]
    Unregistered,
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("neighbor {0} is not in the neighbor list")]
    UnknownNeighbor(String),
    #[error("neighbor {0} is not trusted")]
    UntrustedNeighbor(String),
    #[error("invalid client setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl From<LearnError> for ClientError {
    fn from(e: LearnError) -> Self {
        ClientError::Task(e.to_string())
    }
}

impl From<std::io::Error> for ClientError {
    fn from(e: std::io::Error) -> Self {
        ClientError::Frame(FrameError::Io(e))
    }
}

type Result<T> = std::result::Result<T, ClientError>;

/// Scenario-configured stand-ins for hardware probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceProfile {
    pub cpu_score: f64,
    /// Charge level in [0, 1].
    pub battery: f64,
}

impl Default for ResourceProfile {
    fn default() -> Self {
        Self { cpu_score: 1.0, battery: 1.0 }
    }
}

impl ResourceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.battery) {
            return Err(ClientError::Setup(format!("battery {} outside [0, 1]", self.battery)));
        }
        if !(self.cpu_score.is_finite() && self.cpu_score >= 0.0) {
            return Err(ClientError::Setup(format!("cpu_score {} must be finite and non-negative", self.cpu_score)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Neighbor {
    pub client_id: String,
    #[serde(default)]
    pub trusted: bool,
}

/// Everything a client process needs besides its metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientDataFile {
    pub dataset: Dataset,
    pub split_seed: u64,
    pub tasks: Vec<FlTask>,
    #[serde(default)]
    pub resources: ResourceProfile,
    #[serde(default)]
    pub neighbors: Vec<Neighbor>,
}

/// Train/holdout index split: a seeded shuffle, the first `round(n * fraction)`
/// indices (at least one, at most `n - 1`) form the holdout. Both halves are
/// returned in ascending order.
pub fn split_indices(n: usize, seed: u64, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut holdout = idx[..k.min(n)].to_vec();
    let mut train = idx[k.min(n)..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    (train, holdout)
}

/// Delivery state of one outbound update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportTracker {
    pub attempts: u32,
    pub acked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetryDecision {
    Resend,
    GiveUp,
    Done,
}

impl ReportTracker {
    /// State after the first send.
    pub fn sent() -> Self {
        Self { attempts: 1, acked: false }
    }

    pub fn on_ack(&mut self) {
        self.acked = true;
    }

    /// Called when the ack timer fires.
    pub fn on_timeout(&mut self) -> RetryDecision {
        if self.acked {
            RetryDecision::Done
        } else if self.attempts < MAX_REPORT_ATTEMPTS {
            self.attempts += 1;
            RetryDecision::Resend
        } else {
            RetryDecision::GiveUp
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientNode {
    client_id: String,
    metadata: ParticipantMetadata,
    data: Dataset,
    split_seed: u64,
    resources: ResourceProfile,
    neighbors: Vec<Neighbor>,
    tasks: BTreeMap<String, FlTask>,
    session_token: Option<String>,
    local_models: BTreeMap<String, BTreeMap<u64, WeightVector>>,
}

impl ClientNode {
    pub fn new(metadata: ParticipantMetadata, data: Dataset, split_seed: u64) -> Result<Self> {
        let metadata = metadata.normalized();
        metadata.validate().map_err(|e| ClientError::Setup(e.to_string()))?;
        if data.len() < 2 {
            return Err(ClientError::Setup("need at least two samples to split train/holdout".into()));
        }
        Ok(Self {
            client_id: metadata.participant_id.clone(),
            metadata,
            data,
            split_seed,
            resources: ResourceProfile::default(),
            neighbors: Vec::new(),
            tasks: BTreeMap::new(),
            session_token: None,
            local_models: BTreeMap::new(),
        })
    }

    pub fn from_files(metadata: ParticipantMetadata, file: ClientDataFile) -> Result<Self> {
        let mut node = Self::new(metadata, file.dataset, file.split_seed)?
            .with_resources(file.resources)?
            .with_neighbors(file.neighbors);
        for task in file.tasks {
            node.add_task(task)?;
        }
        Ok(node)
    }

    pub fn with_resources(mut self, resources: ResourceProfile) -> Result<Self> {
        resources.validate()?;
        self.resources = resources;
        Ok(self)
    }

    pub fn with_neighbors(mut self, mut neighbors: Vec<Neighbor>) -> Self {
        neighbors.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        self.neighbors = neighbors;
        self
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn metadata(&self) -> &ParticipantMetadata {
        &self.metadata
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed
    }

    pub fn resources(&self) -> ResourceProfile {
        self.resources
    }

    pub fn neighbors(&self) -> &[Neighbor] {
        &self.neighbors
    }

    pub fn is_registered(&self) -> bool {
        self.session_token.is_some()
    }

    pub fn session_token(&self) -> Option<&str> {
        self.session_token.as_deref()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &FlTask> {
        self.tasks.values()
    }

    pub fn add_task(&mut self, task: FlTask) -> Result<()> {
        if task.client_id != self.client_id {
            return Err(ClientError::Setup(format!(
                "task {} belongs to {}, not {}",
                task.task_id, task.client_id, self.client_id
            )));
        }
        task.validate().map_err(|e| ClientError::Setup(e.to_string()))?;
        self.tasks.insert(task.task_id.clone(), task);
        Ok(())
    }

    pub fn register_message(&self) -> Message {
        Message::Register(Register { metadata: self.metadata.clone() })
    }

    pub fn on_register_ack(&mut self, ack: &RegisterAck) -> Result<()> {
        if ack.client_id != self.client_id {
            return Err(ClientError::Setup(format!("ack for {} received by {}", ack.client_id, self.client_id)));
        }
        self.session_token = Some(ack.session_token.clone());
        Ok(())
    }

    pub fn submit_message(&self, task_id: &str) -> Result<Message> {
        let token = self.session_token.clone().ok_or(ClientError::Unregistered)?;
        let task = self.tasks.get(task_id).ok_or_else(|| ClientError::UnknownTask(task_id.to_string()))?;
        Ok(Message::SubmitTask(SubmitTask { session_token: token, task: task.clone() }))
    }

    /// Swaps in new local data (drift). Metadata and task signatures follow;
    /// the caller re-registers so the coordinator sees the change.
    pub fn replace_data(&mut self, data: Dataset) -> Result<()> {
        if data.len() < 2 {
            return Err(ClientError::Setup("need at least two samples".into()));
        }
        let quality = self.metadata.data_signature.quality_score;
        let sig = DataSignature::from_dataset(&data, quality).map_err(|e| ClientError::Setup(e.to_string()))?;
        for task in self.tasks.values_mut() {
            task.data_signature = sig.clone();
        }
        self.metadata.data_signature = sig;
        self.data = data;
        Ok(())
    }

    /// Deterministic train/holdout split for a holdout fraction.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        let (train, holdout) = split_indices(self.data.len(), self.split_seed, fraction);
        Ok((self.data.subset(&train)?, self.data.subset(&holdout)?))
    }

    fn previous_local(&self, task_id: &str, round: u64) -> Option<&WeightVector> {
        self.local_models.get(task_id)?.range(..round).next_back().map(|(_, w)| w)
    }

    fn compute(&mut self, req: &TrainRequest, executor_id: &str) -> Result<ModelUpdate> {
        if !self.is_registered() {
            return Err(ClientError::Unregistered);
        }
        let task = self.tasks.get(&req.task_id).ok_or_else(|| ClientError::UnknownTask(req.task_id.clone()))?;
        let global = req.weights.decode()?;
        let arch = global.arch();
        if arch.arch_id != task.config.model_arch.arch_id
            || arch.n_features != self.data.n_features()
            || arch.n_classes != self.data.n_classes()
        {
            return Err(ClientError::Task(format!(
                "weights {} do not fit local data ({} features, {} classes)",
                global.arch_id(),
                self.data.n_features(),
                self.data.n_classes()
            )));
        }
        req.plan.validate().map_err(|e| ClientError::Task(e.to_string()))?;
        let (train, holdout) = self.split(req.plan.eval_holdout_fraction)?;
        let post_metrics = evaluate(&global, &holdout)?;
        let pre_metrics = match self.previous_local(&req.task_id, req.round) {
            Some(local) => evaluate(local, &holdout)?,
            None => post_metrics,
        };
        let hp = req.plan.hyper_params(&req.task_id, req.round);
        let (local, stats) = train_local(&global, &train, &hp)?;
        debug!(
            "{}: task {} round {} trained on {} samples, loss {:.4}",
            self.client_id, req.task_id, req.round, stats.n_samples, stats.final_loss
        );
        let models = self.local_models.entry(req.task_id.clone()).or_default();
        models.insert(req.round, local.clone());
        while models.len() > KEPT_LOCAL_MODELS {
            models.pop_first();
        }
        Ok(ModelUpdate {
            task_id: req.task_id.clone(),
            cohort_id: req.cohort_id.clone(),
            round: req.round,
            weights: local,
            n_samples: train.len(),
            pre_metrics,
            post_metrics,
            executor_id: executor_id.to_string(),
        })
    }

    /// Runs the request locally.
    pub fn execute_train_request(&mut self, req: &TrainRequest) -> Result<ModelUpdate> {
        let me = self.client_id.clone();
        self.compute(req, &me)
    }

    /// Runs the request on a trusted neighbor with this client's data shard.
    /// The result equals local execution except for `executor_id`.
    pub fn delegate(&mut self, req: &TrainRequest, neighbor: &str) -> Result<ModelUpdate> {
        let n = self
            .neighbors
            .iter()
            .find(|n| n.client_id == neighbor)
            .ok_or_else(|| ClientError::UnknownNeighbor(neighbor.to_string()))?;
        if !n.trusted {
            return Err(ClientError::UntrustedNeighbor(neighbor.to_string()));
        }
        let executor = n.client_id.clone();
        self.compute(req, &executor)
    }

    /// The trusted neighbor that takes over on low battery, if any.
    pub fn delegate_target(&self) -> Option<&str> {
        if self.resources.battery >= LOW_BATTERY {
            return None;
        }
        self.neighbors.iter().find(|n| n.trusted).map(|n| n.client_id.as_str())
    }

    /// Local execution, or delegation when the battery is low.
    pub fn handle_train(&mut self, req: &TrainRequest) -> Result<ModelUpdate> {
        match self.delegate_target().map(str::to_string) {
            Some(neighbor) => {
                info!(
                    "{}: battery {:.2}, delegating {} to {neighbor}",
                    self.client_id, self.resources.battery, req.task_id
                );
                self.delegate(req, &neighbor)
            }
            None => self.execute_train_request(req),
        }
    }

    /// Reply to a coordinator-initiated message, if it calls for one.
    pub fn handle(&mut self, env: &Envelope) -> Option<Envelope> {
        match &env.message {
            Message::TrainRequest(req) => Some(match self.handle_train(req) {
                Ok(update) => env.reply(Message::ModelUpdateMsg(ModelUpdateMsg::from_update(&update))),
                Err(e) => {
                    warn!("{}: train request for {} failed: {e}", self.client_id, req.task_id);
                    Envelope::error(env.correlation_id, ErrorCode::TaskError, e.to_string())
                }
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SocketClientOptions {
    /// Read timeout for handshake replies and update acks.
    pub reply_timeout: Duration,
    /// Give up waiting for the next train request after this long.
    pub idle_timeout: Option<Duration>,
}

impl Default for SocketClientOptions {
    fn default() -> Self {
        Self { reply_timeout: Duration::from_secs(30), idle_timeout: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SocketClientStats {
    pub tasks_accepted: Vec<String>,
    pub updates_sent: u64,
    pub updates_acked: u64,
    pub updates_abandoned: u64,
    pub communities_seen: usize,
}

/// Registers, submits every task, then serves train requests until the
/// coordinator closes the connection.
pub fn run_socket_client(addr: &str, node: &mut ClientNode, opts: &SocketClientOptions) -> Result<SocketClientStats> {
    let mut conn = Connection::connect(addr, Some(opts.reply_timeout))?;
    let mut stats = SocketClientStats::default();
    let reply = conn.request(node.register_message())?;
    let Message::RegisterAck(ack) = &reply.message else {
        return Err(ClientError::Setup(format!("unexpected reply {:?}", reply.msg_type())));
    };
    node.on_register_ack(ack)?;
    info!("{}: registered", node.client_id());
    if let Message::CommunityList(list) = conn.request(Message::ListCommunities(ListCommunities {}))?.message {
        stats.communities_seen = list.communities.len();
    }
    let task_ids: Vec<String> = node.tasks().map(|t| t.task_id.clone()).collect();
    for task_id in task_ids {
        let reply = conn.request(node.submit_message(&task_id)?)?;
        if let Message::TaskAck(ack) = reply.message {
            info!("{}: task {} assigned to {}", node.client_id(), ack.task_id, ack.population_id);
            stats.tasks_accepted.push(ack.task_id);
        }
    }
    loop {
        conn.stream().set_read_timeout(opts.idle_timeout)?;
        let env = match conn.recv() {
            Ok(env) => env,
            Err(FrameError::Closed) => break,
            Err(e) => return Err(e.into()),
        };
        let Some(reply) = node.handle(&env) else {
            debug!("{}: ignoring {:?}", node.client_id(), env.msg_type());
            continue;
        };
        let is_update = matches!(reply.message, Message::ModelUpdateMsg(_));
        conn.stream().set_read_timeout(Some(opts.reply_timeout))?;
        conn.send(&reply)?;
        if !is_update {
            continue;
        }
        stats.updates_sent += 1;
        let mut tracker = ReportTracker::sent();
        while !tracker.acked {
            match conn.recv() {
                Ok(Envelope { correlation_id, message: Message::MetricsAck(_), .. })
                    if correlation_id == reply.correlation_id =>
                {
                    tracker.on_ack();
                }
                Ok(other) => debug!("{}: waiting for ack, got {:?}", node.client_id(), other.msg_type()),
                Err(e) if e.is_timeout() => match tracker.on_timeout() {
                    RetryDecision::Resend => conn.send(&reply)?,
                    RetryDecision::GiveUp => break,
                    RetryDecision::Done => {}
                },
                Err(FrameError::Closed) => return Ok(stats),
                Err(e) => return Err(e.into()),
            }
        }
        if tracker.acked {
            stats.updates_acked += 1;
        } else {
            stats.updates_abandoned += 1;
            warn!(
                "{}: update {} abandoned after {MAX_REPORT_ATTEMPTS} attempts",
                node.client_id(),
                reply.correlation_id
            );
        }
    }
    info!("{}: coordinator closed the session", node.client_id());
    Ok(stats)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::community::{CollaborationCriteria, DeviceDescriptor};
    use crate::flcore::{ConfigSignature, FlPlan, PlanOverrides};
    use crate::netproto::WireWeights;
    use crate::tinylearn::{init_weights, ModelArch};
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeSet;

    pub(crate) fn blob_data(n: usize, shift: f64, swap: bool, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { 2.0 } else { -2.0 };
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            rows.push(vec![c + a + shift, b + shift]);
            labels.push(if swap { 1 - y } else { y });
        }
        Dataset::new(rows, labels, 2).unwrap()
    }

    pub(crate) fn node(id: &str, data: Dataset) -> ClientNode {
        let sig = DataSignature::from_dataset(&data, 1.0).unwrap();
        let meta = ParticipantMetadata {
            participant_id: id.into(),
            device: DeviceDescriptor {
                manufacturer: "acme".into(),
                model: "w".into(),
                device_type: "smartwatch".into(),
                firmware: "1".into(),
            },
            interests: BTreeSet::new(),
            expertise: BTreeSet::new(),
            data_signature: sig.clone(),
            criteria: CollaborationCriteria::default(),
        };
        let mut n = ClientNode::new(meta, data, 11).unwrap();
        n.add_task(FlTask {
            task_id: format!("{id}-t"),
            client_id: id.into(),
            community_id: "C".into(),
            config: ConfigSignature {
                device_type: "smartwatch".into(),
                fl_algorithm: "fedavg".into(),
                model_arch: ModelArch::logistic(2, 2),
                objective: "o".into(),
            },
            plan: PlanOverrides::default(),
            data_signature: sig,
            targeted_device: "smartwatch".into(),
        })
        .unwrap();
        n.on_register_ack(&RegisterAck { client_id: id.into(), session_token: "tok".into() }).unwrap();
        n
    }

    pub(crate) fn plan() -> FlPlan {
        FlPlan {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.2,
            shuffle_seed: 5,
            eval_holdout_fraction: 0.25,
            rounds_target: 5,
        }
    }

    pub(crate) fn request(task: &str, w: &WeightVector, round: u64) -> TrainRequest {
        TrainRequest {
            task_id: task.into(),
            cohort_id: "c".into(),
            round,
            weights: WireWeights::encode(w),
            plan: plan(),
        }
    }

    #[test]
    fn split_is_disjoint_stable_and_sized() {
        for (n, f) in [(10, 0.25), (2, 0.5), (2, 0.01), (101, 0.99), (1000, 0.2)] {
            let (train, hold) = split_indices(n, 3, f);
            assert_eq!(train.len() + hold.len(), n);
            assert!(!hold.is_empty() && !train.is_empty(), "{n} {f}");
            let all: BTreeSet<usize> = train.iter().chain(&hold).copied().collect();
            assert_eq!(all.len(), n);
            assert_eq!(split_indices(n, 3, f), (train, hold));
        }
        assert_ne!(split_indices(100, 1, 0.3), split_indices(100, 2, 0.3));
    }

    #[test]
    fn first_round_pre_equals_post() {
        let mut c = node("a", blob_data(80, 0.0, false, 1));
        let w = init_weights(&ModelArch::logistic(2, 2), 0).unwrap();
        let u = c.execute_train_request(&request("a-t", &w, 1)).unwrap();
        assert_eq!(u.pre_metrics, u.post_metrics);
        assert_eq!(u.n_samples, 60);
        assert_eq!(u.executor_id, "a");
    }

    #[test]
    fn pre_metrics_come_from_own_previous_local_model() {
        let mut c = node("a", blob_data(80, 0.0, false, 1));
        let w0 = init_weights(&ModelArch::logistic(2, 2), 0).unwrap();
        let u1 = c.execute_train_request(&request("a-t", &w0, 1)).unwrap();
        let (_, holdout) = c.split(0.25).unwrap();
        let u2 = c.execute_train_request(&request("a-t", &w0, 2)).unwrap();
        assert_eq!(u2.pre_metrics, evaluate(&u1.weights, &holdout).unwrap());
        assert_eq!(u2.post_metrics, evaluate(&w0, &holdout).unwrap());
    }

    #[test]
    fn replayed_request_is_bit_identical() {
        let mut c = node("a", blob_data(80, 0.0, false, 1));
        let w = init_weights(&ModelArch::logistic(2, 2), 0).unwrap();
        c.execute_train_request(&request("a-t", &w, 1)).unwrap();
        let first = c.execute_train_request(&request("a-t", &w, 2)).unwrap();
        let again = c.execute_train_request(&request("a-t", &w, 2)).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn delegation_changes_only_executor() {
        let base = node("a", blob_data(80, 0.0, false, 1)).with_neighbors(vec![
            Neighbor { client_id: "b".into(), trusted: true },
            Neighbor { client_id: "z".into(), trusted: false },
        ]);
        let w = init_weights(&ModelArch::logistic(2, 2), 0).unwrap();
        let req = request("a-t", &w, 1);
        let local = base.clone().execute_train_request(&req).unwrap();
        let delegated = base.clone().delegate(&req, "b").unwrap();
        assert_eq!(local.weights.values(), delegated.weights.values());
        assert_eq!(ModelUpdate { executor_id: "a".into(), ..delegated }, local);
        assert!(matches!(base.clone().delegate(&req, "z"), Err(ClientError::UntrustedNeighbor(_))));
        assert!(matches!(base.clone().delegate(&req, "q"), Err(ClientError::UnknownNeighbor(_))));
    }

    #[test]
    fn low_battery_delegates_automatically() {
        let w = init_weights(&ModelArch::logistic(2, 2), 0).unwrap();
        let mut c = node("a", blob_data(80, 0.0, false, 1))
            .with_neighbors(vec![Neighbor { client_id: "b".into(), trusted: true }])
            .with_resources(ResourceProfile { cpu_score: 1.0, battery: 0.1 })
            .unwrap();
        assert_eq!(c.handle_train(&request("a-t", &w, 1)).unwrap().executor_id, "b");
        let mut full = c.clone().with_resources(ResourceProfile::default()).unwrap();
        assert_eq!(full.handle_train(&request("a-t", &w, 1)).unwrap().executor_id, "a");
    }

    #[test]
    fn shape_mismatch_is_a_task_error() {
        let mut c = node("a", blob_data(40, 0.0, false, 1));
        let w = init_weights(&ModelArch::logistic(3, 2), 0).unwrap();
        assert!(matches!(c.execute_train_request(&request("a-t", &w, 1)), Err(ClientError::Task(_))));
        let env = Envelope::new(9, Message::TrainRequest(request("a-t", &w, 1)));
        let reply = c.handle(&env).unwrap();
        assert!(matches!(reply.message, Message::Error(ref e) if e.code == ErrorCode::TaskError));
        assert_eq!(reply.correlation_id, 9);
    }

    #[test]
    fn unregistered_and_unknown_task() {
        let mut c = node("a", blob_data(40, 0.0, false, 1));
        let w = init_weights(&ModelArch::logistic(2, 2), 0).unwrap();
        assert!(matches!(c.execute_train_request(&request("nope", &w, 1)), Err(ClientError::UnknownTask(_))));
        c.session_token = None;
        assert!(matches!(c.execute_train_request(&request("a-t", &w, 1)), Err(ClientError::Unregistered)));
    }

    #[test]
    fn matching_cluster_model_lowers_loss() {
        // A client from cluster B gets a model trained on cluster B (post) and
        // its own previous model was pulled toward cluster A's labels (pre).
        let mut b = node("b", blob_data(200, 5.0, true, 2));
        let mut a = node("a", blob_data(200, 0.0, false, 3));
        let w0 = init_weights(&ModelArch::logistic(2, 2), 0).unwrap();
        let wa = a.execute_train_request(&request("a-t", &w0, 1)).unwrap().weights;
        b.execute_train_request(&request("b-t", &wa, 1)).unwrap();
        let mut wb = wa.clone();
        for r in 1..=5 {
            wb = b.clone().execute_train_request(&request("b-t", &wb, r)).unwrap().weights;
        }
        let u = b.execute_train_request(&request("b-t", &wb, 2)).unwrap();
        assert!(u.post_metrics.loss < u.pre_metrics.loss, "{:?}", u);
    }

    #[test]
    fn report_tracker_retries_three_times() {
        let mut t = ReportTracker::sent();
        assert_eq!(t.on_timeout(), RetryDecision::Resend);
        assert_eq!(t.on_timeout(), RetryDecision::Resend);
        assert_eq!(t.on_timeout(), RetryDecision::GiveUp);
        assert_eq!(t.attempts, MAX_REPORT_ATTEMPTS);
        let mut ok = ReportTracker::sent();
        ok.on_ack();
        assert_eq!(ok.on_timeout(), RetryDecision::Done);
    }

    #[test]
    fn drift_updates_signatures() {
        let mut c = node("a", blob_data(40, 0.0, false, 1));
        let before = c.metadata().data_signature.clone();
        c.replace_data(blob_data(40, 5.0, false, 1)).unwrap();
        assert_ne!(c.metadata().data_signature, before);
        assert_eq!(c.tasks().next().unwrap().data_signature, c.metadata().data_signature);
    }
}
