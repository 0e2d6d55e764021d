//! Coordinator: registration, task scheduling, cohort bookkeeping, round
//! execution, the transfer guard and metric ingestion.

pub mod server;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::community::{
    admit, form_cohorts_with, recluster, Admission, CohortPolicy, Community, CommunityError, CommunityRegistry,
    MigrationReport, ParticipantMetadata, RejectReason,
};
use crate::flcore::{
    aggregate_with, digest64, weights_digest, FlCohort, FlError, FlPlan, FlTask, ModelUpdate, PopulationRegistry,
    Weighting,
};
use crate::netproto::{
    CommunityList, Envelope, ErrorCode, ErrorMsg, Message, RegisterAck, TaskAck, TrainRequest, WireWeights,
};

/// Rounds averaged by the recluster rule.
pub const RECLUSTER_WINDOW: usize = 3;
/// Mean flag rate above which a cohort is marked for reclustering.
pub const RECLUSTER_FLAG_RATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("invalid scheduler config: {0}")]
    Config(String),
    #[error("client {0:?} is not registered")]
    Unregistered(String),
    #[error("session token does not match a registered client")]
    InvalidToken,
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("rejected by community {community}: {reason}")]
    Rejected { community: String, reason: RejectReason },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("unknown cohort {0:?}")]
    UnknownCohort(String),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Community(#[from] CommunityError),
}

impl OrchestratorError {
    pub fn code(&self) -> ErrorCode {
        match self {
            OrchestratorError::Unregistered(_) | OrchestratorError::InvalidToken => ErrorCode::Unregistered,
            OrchestratorError::InvalidMetadata(_) => ErrorCode::InvalidMetadata,
            OrchestratorError::Rejected { .. } => ErrorCode::Rejected,
            OrchestratorError::Fl(FlError::DuplicateTask(_)) => ErrorCode::Conflict,
            _ => ErrorCode::InvalidTask,
        }
    }
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

/// Clients asked per round: a fixed count or every cohort member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientsPerRound {
    Count(usize),
    All,
}

impl ClientsPerRound {
    pub fn resolve(self, cohort_size: usize) -> usize {
        match self {
            ClientsPerRound::Count(k) => k.min(cohort_size),
            ClientsPerRound::All => cohort_size,
        }
    }
}

impl Serialize for ClientsPerRound {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClientsPerRound::Count(k) => s.serialize_u64(*k as u64),
            ClientsPerRound::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for ClientsPerRound {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(ClientsPerRound::Count(k)),
            Raw::Word(w) if w == "all" => Ok(ClientsPerRound::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("expected a count or \"all\", got {w:?}"))),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub clients_per_round: ClientsPerRound,
    pub rounds: u32,
    /// Similarity threshold for cohort formation, in (0, 1).
    pub cohort_threshold: f64,
    /// Fraction of selected clients whose updates must arrive, in (0, 1].
    pub min_updates_quorum: f64,
    pub guard_epsilon: f64,
    #[serde(default = "default_true")]
    pub guard_enabled: bool,
    #[serde(default)]
    pub weighting: Weighting,
    pub seed: u64,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(OrchestratorError::Config(m));
        if self.clients_per_round == ClientsPerRound::Count(0) {
            return fail("clients_per_round must be positive".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be positive".into());
        }
        if !(self.cohort_threshold > 0.0 && self.cohort_threshold < 1.0) {
            return fail(format!("cohort_threshold {} outside (0, 1)", self.cohort_threshold));
        }
        if !(self.min_updates_quorum > 0.0 && self.min_updates_quorum <= 1.0) {
            return fail(format!("min_updates_quorum {} outside (0, 1]", self.min_updates_quorum));
        }
        if !(self.guard_epsilon >= 0.0 && self.guard_epsilon.is_finite()) {
            return fail(format!("guard_epsilon {} must be finite and >= 0", self.guard_epsilon));
        }
        Ok(())
    }

    /// Updates needed for a round with `selected` participants to commit.
    pub fn quorum(&self, selected: usize) -> usize {
        let q = (self.min_updates_quorum * selected as f64 - 1e-9).ceil() as usize;
        q.clamp(1, selected.max(1))
    }
}

/// Cohort mode clusters populations by data similarity; global mode keeps
/// one cohort per population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Cohort,
    Global,
}

impl Mode {
    pub fn policy(self, cfg: &SchedulerConfig) -> CohortPolicy {
        match self {
            Mode::Cohort => CohortPolicy::Similarity { threshold: cfg.cohort_threshold },
            Mode::Global => CohortPolicy::Global,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Mode::Cohort => Mode::Global,
            Mode::Global => Mode::Cohort,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cohort => "cohort",
            Mode::Global => "global",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cohort" => Ok(Mode::Cohort),
            "global" => Ok(Mode::Global),
            other => Err(format!("unknown mode {other:?} (expected cohort or global)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    NonFinite,
    LossIncrease,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Flag(FlagReason),
}

impl Verdict {
    pub fn is_flag(self) -> bool {
        matches!(self, Verdict::Flag(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundOutcome {
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub cohort_id: String,
    pub population_id: String,
    /// 1-based round number of the cohort this report is about.
    pub round: u64,
    /// Scheduler iteration the round ran in.
    pub iteration: u64,
    pub outcome: RoundOutcome,
    pub selected_task_ids: Vec<String>,
    pub received_updates: usize,
    pub dropouts: Vec<String>,
    /// Sample-weighted mean of the received updates' pre-round losses.
    #[serde(with = "crate::lenient_f64")]
    pub aggregate_pre_loss: f64,
    /// Sample-weighted mean of the received updates' post-round losses.
    #[serde(with = "crate::lenient_f64")]
    pub aggregate_post_loss: f64,
    pub guard_verdicts: BTreeMap<String, Verdict>,
    pub executors: BTreeMap<String, String>,
    /// Mean holdout accuracy of the clients' own previous local models.
    #[serde(with = "crate::lenient_f64")]
    pub mean_local_acc: f64,
    /// Sample-weighted holdout accuracy of the incoming global model.
    #[serde(with = "crate::lenient_f64")]
    pub global_holdout_acc: f64,
    pub flag_rate: f64,
    pub bytes_transferred: u64,
    /// Hex digest of the cohort's global weights after this round.
    pub new_global_weights_hash: String,
}

/// Per-cohort time series kept by `ingest_metrics`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortHistory {
    pub reports: Vec<RoundReport>,
    pub last_committed: u64,
    /// Index into `reports` where the recluster window starts.
    pub window_start: usize,
    pub marked: bool,
    pub stale_reports: u64,
}

impl CohortHistory {
    /// Flag rates of the committed rounds in the current window, oldest first.
    pub fn flag_rates(&self) -> Vec<f64> {
        self.reports[self.window_start..]
            .iter()
            .filter(|r| r.outcome == RoundOutcome::Committed)
            .map(|r| r.flag_rate)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ingest {
    Recorded { marked: bool },
    Stale,
}

/// Per-update accept/flag filter.
pub trait TransferGuard {
    fn check(&self, update: &ModelUpdate, history: &CohortHistory, epsilon: f64) -> Verdict;
}

/// Flags an update whose client saw the incoming global model do worse on
/// its holdout than its own previous model by more than epsilon, or whose
/// weights are not finite.
pub fn guard_update(update: &ModelUpdate, _history: &CohortHistory, epsilon: f64) -> Verdict {
    if !update.weights.is_finite() {
        return Verdict::Flag(FlagReason::NonFinite);
    }
    if update.post_metrics.loss - update.pre_metrics.loss > epsilon {
        return Verdict::Flag(FlagReason::LossIncrease);
    }
    Verdict::Accept
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossDeltaGuard;

impl TransferGuard for LossDeltaGuard {
    fn check(&self, update: &ModelUpdate, history: &CohortHistory, epsilon: f64) -> Verdict {
        guard_update(update, history, epsilon)
    }
}

/// Picks the round's participants.
pub trait ClientSelector {
    /// Returns `k` of `members` (given in ascending order), sorted ascending.
    fn select(&self, members: &[String], k: usize, seed: u64, cohort_id: &str, round: u64) -> Vec<String>;
}

/// Seeded uniform shuffle, keyed by seed, cohort and round.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSelector;

impl ClientSelector for UniformSelector {
    fn select(&self, members: &[String], k: usize, seed: u64, cohort_id: &str, round: u64) -> Vec<String> {
        let mut key = seed.to_le_bytes().to_vec();
        key.extend_from_slice(&round.to_le_bytes());
        key.extend_from_slice(cohort_id.as_bytes());
        let mut picked = members.to_vec();
        picked.shuffle(&mut ChaCha8Rng::seed_from_u64(digest64(&key)));
        picked.truncate(k);
        picked.sort();
        picked
    }
}

/// One train request bound for a client.
#[derive(Debug, Clone)]
pub struct Dispatch {
    pub task_id: String,
    pub client_id: String,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundContext<'a> {
    pub cohort_id: &'a str,
    pub round: u64,
    pub iteration: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Collected {
    pub updates: Vec<ModelUpdate>,
    /// Task ids whose client answered with an error, and the message.
    pub errors: BTreeMap<String, String>,
    pub bytes_transferred: u64,
}

/// Moves train requests out and model updates back for one cohort round.
pub trait RoundTransport {
    fn exchange(&mut self, ctx: RoundContext<'_>, dispatches: Vec<Dispatch>) -> Collected;
}

#[derive(Debug, Clone)]
struct ClientRecord {
    metadata: ParticipantMetadata,
    session_token: String,
}

pub struct Coordinator {
    config: SchedulerConfig,
    mode: Mode,
    communities: CommunityRegistry,
    clients: BTreeMap<String, ClientRecord>,
    registrations: u64,
    registry: PopulationRegistry,
    plans: BTreeMap<String, FlPlan>,
    dirty: BTreeSet<String>,
    histories: BTreeMap<String, CohortHistory>,
    migrations: Vec<MigrationReport>,
    next_correlation: u64,
    guard: Box<dyn TransferGuard + Send>,
    selector: Box<dyn ClientSelector + Send>,
}

impl fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coordinator")
            .field("mode", &self.mode)
            .field("clients", &self.clients.len())
            .field("tasks", &self.plans.len())
            .finish_non_exhaustive()
    }
}

impl Coordinator {
    pub fn new(config: SchedulerConfig, mode: Mode, communities: Vec<Community>) -> Result<Self> {
        config.validate()?;
        let mut registry = CommunityRegistry::new();
        for c in communities {
            registry.create(c)?;
        }
        Ok(Self {
            config,
            mode,
            communities: registry,
            clients: BTreeMap::new(),
            registrations: 0,
            registry: PopulationRegistry::new(),
            plans: BTreeMap::new(),
            dirty: BTreeSet::new(),
            histories: BTreeMap::new(),
            migrations: Vec::new(),
            next_correlation: 1,
            guard: Box::new(LossDeltaGuard),
            selector: Box::new(UniformSelector),
        })
    }

    pub fn with_guard(mut self, guard: Box<dyn TransferGuard + Send>) -> Self {
        self.guard = guard;
        self
    }

    pub fn with_selector(mut self, selector: Box<dyn ClientSelector + Send>) -> Self {
        self.selector = selector;
        self
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn communities(&self) -> &CommunityRegistry {
        &self.communities
    }

    pub fn registry(&self) -> &PopulationRegistry {
        &self.registry
    }

    pub fn metadata(&self, client_id: &str) -> Option<&ParticipantMetadata> {
        self.clients.get(client_id).map(|c| &c.metadata)
    }

    pub fn plan(&self, task_id: &str) -> Option<&FlPlan> {
        self.plans.get(task_id)
    }

    pub fn history(&self, cohort_id: &str) -> Option<&CohortHistory> {
        self.histories.get(cohort_id)
    }

    pub fn migrations(&self) -> &[MigrationReport] {
        &self.migrations
    }

    pub fn task_count(&self) -> usize {
        self.plans.len()
    }

    /// All cohorts, populations in display-rank order, cohorts by id.
    pub fn cohorts(&self) -> Vec<&FlCohort> {
        let mut pops: Vec<_> = self.registry.populations().collect();
        pops.sort_by_key(|p| self.registry.population_rank(&p.population_id));
        pops.iter().flat_map(|p| p.cohorts.iter()).collect()
    }

    pub fn cohort(&self, cohort_id: &str) -> Option<&FlCohort> {
        self.registry.populations().find_map(|p| p.cohort(cohort_id))
    }

    /// Cohort currently holding `task_id`.
    pub fn cohort_of(&self, task_id: &str) -> Option<&FlCohort> {
        let pop = self.registry.population_of(task_id)?;
        self.registry.population(pop)?.cohort_of(task_id)
    }

    /// Registers or re-registers a participant. Re-registration keeps the
    /// session token, replaces the metadata and refreshes the data signature
    /// of the participant's tasks.
    pub fn register(&mut self, metadata: ParticipantMetadata) -> Result<RegisterAck> {
        let metadata = metadata.normalized();
        metadata.validate().map_err(|e| OrchestratorError::InvalidMetadata(e.to_string()))?;
        let client_id = metadata.participant_id.clone();
        let token = match self.clients.get(&client_id) {
            Some(rec) => rec.session_token.clone(),
            None => {
                self.registrations += 1;
                let mut key = client_id.as_bytes().to_vec();
                key.extend_from_slice(&self.config.seed.to_le_bytes());
                key.extend_from_slice(&self.registrations.to_le_bytes());
                format!("sess-{:016x}", digest64(&key))
            }
        };
        let changed =
            self.clients.get(&client_id).is_some_and(|rec| rec.metadata.data_signature != metadata.data_signature);
        if changed {
            let owned: Vec<String> =
                self.registry.tasks().filter(|t| t.client_id == client_id).map(|t| t.task_id.clone()).collect();
            for task_id in owned {
                self.registry.update_signature(&task_id, metadata.data_signature.clone())?;
                if let Some(pop) = self.registry.population_of(&task_id) {
                    self.dirty.insert(pop.to_string());
                }
            }
            info!("{client_id}: data signature changed, cohorts will be re-formed");
        }
        self.clients.insert(client_id.clone(), ClientRecord { metadata, session_token: token.clone() });
        Ok(RegisterAck { client_id, session_token: token })
    }

    fn client_by_token(&self, token: &str) -> Result<&str> {
        self.clients
            .iter()
            .find(|(_, r)| r.session_token == token)
            .map(|(id, _)| id.as_str())
            .ok_or(OrchestratorError::InvalidToken)
    }

    /// Merges the community's default plan with the task's overrides.
    pub fn build_plan(task: &FlTask, community: &Community) -> Result<FlPlan> {
        let plan = task.plan.apply(&community.default_plan);
        plan.validate().map_err(|e| OrchestratorError::Plan(e.to_string()))?;
        let min = community.criteria.min_samples;
        if min > 0 && plan.batch_size > min {
            return Err(OrchestratorError::Plan(format!(
                "batch_size {} exceeds the community's min_samples {min}",
                plan.batch_size
            )));
        }
        Ok(plan)
    }

    /// Accepts a task from a registered client and places it in a population.
    pub fn submit_task(&mut self, session_token: &str, task: FlTask) -> Result<String> {
        let client_id = self.client_by_token(session_token)?.to_string();
        if task.client_id != client_id {
            return Err(OrchestratorError::InvalidTask(format!(
                "task {} names client {}, session belongs to {client_id}",
                task.task_id, task.client_id
            )));
        }
        task.validate()?;
        let community = self.communities.get(&task.community_id)?.clone();
        if let Admission::Reject(reason) = admit(&self.clients[&client_id].metadata, &community) {
            return Err(OrchestratorError::Rejected { community: community.community_id, reason });
        }
        if task.config.model_arch != community.base_model
            || task.config.fl_algorithm != community.fl_algorithm
            || task.config.objective != community.objective
        {
            return Err(OrchestratorError::InvalidTask(format!(
                "task {} config does not match community {} (model, algorithm, objective)",
                task.task_id, community.community_id
            )));
        }
        let plan = Self::build_plan(&task, &community)?;
        let task_id = task.task_id.clone();
        let population = self.registry.assign_population(task)?;
        self.plans.insert(task_id.clone(), plan);
        self.dirty.insert(population.clone());
        debug!("task {task_id} -> {population}");
        Ok(population)
    }

    /// Answers a control-plane request (registration, discovery, submission).
    pub fn handle_request(&mut self, env: &Envelope) -> Envelope {
        let reply = match &env.message {
            Message::Register(r) => self.register(r.metadata.clone()).map(Message::RegisterAck),
            Message::ListCommunities(_) => {
                Ok(Message::CommunityList(CommunityList { communities: self.communities.iter().cloned().collect() }))
            }
            Message::SubmitTask(s) => {
                let task_id = s.task.task_id.clone();
                self.submit_task(&s.session_token, s.task.clone())
                    .map(|population_id| Message::TaskAck(TaskAck { task_id, population_id }))
            }
            other => {
                return Envelope::error(
                    env.correlation_id,
                    ErrorCode::UnexpectedMessage,
                    format!("{:?} is not a request the coordinator serves here", other.msg_type()),
                )
            }
        };
        match reply {
            Ok(message) => env.reply(message),
            Err(e) => {
                warn!("request {:?} refused: {e}", env.msg_type());
                let reject_reason = match &e {
                    OrchestratorError::Rejected { reason, .. } => Some(reason.clone()),
                    _ => None,
                };
                env.reply(Message::Error(ErrorMsg { code: e.code(), message: e.to_string(), reject_reason }))
            }
        }
    }

    fn population_seed(&self, population_id: &str) -> u64 {
        self.registry
            .population(population_id)
            .and_then(|p| p.member_task_ids.iter().next())
            .and_then(|t| self.registry.task(t))
            .and_then(|t| self.communities.get(&t.community_id).ok())
            .map_or(0, |c| c.seed)
    }

    /// Forms or re-forms cohorts of populations that changed or hold a cohort
    /// marked for reclustering.
    pub fn prepare_cohorts(&mut self) -> Result<Vec<MigrationReport>> {
        let marked: BTreeSet<String> = self
            .histories
            .iter()
            .filter(|(_, h)| h.marked)
            .filter_map(|(id, _)| self.cohort(id).map(|c| c.population_id.clone()))
            .collect();
        let todo: BTreeSet<String> = self.dirty.union(&marked).cloned().collect();
        let policy = self.mode.policy(&self.config);
        let mut reports = Vec::new();
        for pop_id in todo {
            let sigs = self.registry.signatures(&pop_id);
            let seed = self.population_seed(&pop_id);
            let population = self.registry.population(&pop_id).expect("dirty ids name populations").clone();
            let (cohorts, report) = if population.cohorts.is_empty() {
                let cohorts = form_cohorts_with(&population, &sigs, policy, seed)?;
                let report = MigrationReport {
                    new_cohorts: cohorts.iter().map(|c| c.cohort_id.clone()).collect(),
                    ..MigrationReport::default()
                };
                (cohorts, report)
            } else {
                recluster(&population, &sigs, policy, seed)?
            };
            for c in &population.cohorts {
                if let Some(h) = self.histories.get_mut(&c.cohort_id) {
                    h.marked = false;
                    h.window_start = h.reports.len();
                }
            }
            info!(
                "{pop_id}: {} cohorts, {} migrations, {} new, {} retired",
                cohorts.len(),
                report.migrations.len(),
                report.new_cohorts.len(),
                report.retired_cohorts.len()
            );
            self.registry.population_mut(&pop_id).expect("population exists").cohorts = cohorts;
            reports.push(report.clone());
            self.migrations.push(report);
        }
        self.dirty.clear();
        Ok(reports)
    }

    /// Runs one round for a cohort: select, dispatch, collect, guard,
    /// aggregate. Below quorum the round aborts and the cohort is unchanged.
    pub fn run_round(
        &mut self,
        cohort_id: &str,
        iteration: u64,
        transport: &mut dyn RoundTransport,
    ) -> Result<RoundReport> {
        let cohort = self.cohort(cohort_id).ok_or_else(|| OrchestratorError::UnknownCohort(cohort_id.into()))?.clone();
        let members: Vec<String> = cohort.member_task_ids.iter().cloned().collect();
        if members.is_empty() {
            return Err(OrchestratorError::UnknownCohort(format!("{cohort_id} has no members")));
        }
        let round = cohort.round + 1;
        let k = self.config.clients_per_round.resolve(members.len());
        let selected = self.selector.select(&members, k, self.config.seed, cohort_id, round);
        let weights = WireWeights::encode(&cohort.global_weights);
        let mut dispatches = Vec::with_capacity(selected.len());
        for task_id in &selected {
            let task = self.registry.task(task_id).ok_or_else(|| FlError::UnknownTask(task_id.clone()))?;
            let plan = self.plans[task_id];
            let id = self.next_correlation;
            self.next_correlation += 1;
            dispatches.push(Dispatch {
                task_id: task_id.clone(),
                client_id: task.client_id.clone(),
                envelope: Envelope::new(
                    id,
                    Message::TrainRequest(TrainRequest {
                        task_id: task_id.clone(),
                        cohort_id: cohort_id.to_string(),
                        round,
                        weights: weights.clone(),
                        plan,
                    }),
                ),
            });
        }
        let ctx = RoundContext { cohort_id, round, iteration };
        let collected = transport.exchange(ctx, dispatches);
        for (task, err) in &collected.errors {
            warn!("{cohort_id} round {round}: task {task} failed: {err}");
        }

        let mut received: BTreeMap<String, ModelUpdate> = BTreeMap::new();
        for u in collected.updates {
            if u.cohort_id != cohort_id || u.round != round || !selected.contains(&u.task_id) {
                warn!(
                    "discarding update {}@{} round {} outside {cohort_id} round {round}",
                    u.task_id, u.cohort_id, u.round
                );
                continue;
            }
            received.entry(u.task_id.clone()).or_insert(u);
        }
        let dropouts: Vec<String> = selected.iter().filter(|t| !received.contains_key(*t)).cloned().collect();
        let updates: Vec<&ModelUpdate> = received.values().collect();
        let weighted = |f: &dyn Fn(&ModelUpdate) -> f64| {
            let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
            updates.iter().map(|u| f(u) * u.n_samples as f64).sum::<f64>() / total
        };
        let aggregate_pre_loss = weighted(&|u| u.pre_metrics.loss);
        let aggregate_post_loss = weighted(&|u| u.post_metrics.loss);
        let global_holdout_acc = weighted(&|u| u.post_metrics.accuracy);
        let mean_local_acc = if updates.is_empty() {
            f64::NAN
        } else {
            updates.iter().map(|u| u.pre_metrics.accuracy).sum::<f64>() / updates.len() as f64
        };
        let executors = received.iter().map(|(t, u)| (t.clone(), u.executor_id.clone())).collect();
        let mut report = RoundReport {
            cohort_id: cohort_id.to_string(),
            population_id: cohort.population_id.clone(),
            round,
            iteration,
            outcome: RoundOutcome::Aborted,
            selected_task_ids: selected.clone(),
            received_updates: received.len(),
            dropouts,
            aggregate_pre_loss,
            aggregate_post_loss,
            guard_verdicts: BTreeMap::new(),
            executors,
            mean_local_acc,
            global_holdout_acc,
            flag_rate: 0.0,
            bytes_transferred: collected.bytes_transferred,
            new_global_weights_hash: format!("{:016x}", weights_digest(&cohort.global_weights)),
        };

        let needed = self.config.quorum(selected.len());
        if received.len() < needed {
            warn!(
                "{cohort_id} round {round}: {} of {} updates, quorum {needed}; aborted",
                received.len(),
                selected.len()
            );
            return Ok(report);
        }

        let empty = CohortHistory::default();
        let history = self.histories.get(cohort_id).unwrap_or(&empty);
        let verdicts: BTreeMap<String, Verdict> = received
            .iter()
            .map(|(t, u)| {
                let v = if self.config.guard_enabled {
                    self.guard.check(u, history, self.config.guard_epsilon)
                } else {
                    Verdict::Accept
                };
                (t.clone(), v)
            })
            .collect();
        let accepted: Vec<ModelUpdate> =
            received.values().filter(|u| !verdicts[&u.task_id].is_flag()).cloned().collect();
        let flagged = verdicts.values().filter(|v| v.is_flag()).count();
        let new_weights = if accepted.is_empty() {
            warn!("{cohort_id} round {round}: every update flagged; global model kept");
            cohort.global_weights.clone()
        } else {
            aggregate_with(&accepted, self.config.weighting)?
        };
        report.flag_rate = flagged as f64 / received.len() as f64;
        report.guard_verdicts = verdicts;
        report.outcome = RoundOutcome::Committed;
        report.new_global_weights_hash = format!("{:016x}", weights_digest(&new_weights));

        let pop = self.registry.population_mut(&cohort.population_id).expect("cohort's population exists");
        let stored = pop.cohort_mut(cohort_id).expect("cohort exists");
        stored.global_weights = new_weights;
        stored.round = round;
        debug!(
            "{cohort_id} round {round}: {} updates, {} flagged, hash {}",
            report.received_updates, flagged, report.new_global_weights_hash
        );
        Ok(report)
    }

    /// Appends a report to its cohort's history and applies the recluster
    /// rule. Reports for rounds already ingested, or for cohorts that no
    /// longer exist, are ignored.
    pub fn ingest_metrics(&mut self, report: &RoundReport) -> Ingest {
        let Some(cohort) = self.cohort(&report.cohort_id) else {
            warn!("ignoring report for retired cohort {}", report.cohort_id);
            return Ingest::Stale;
        };
        let current = cohort.round;
        let history = self.histories.entry(report.cohort_id.clone()).or_default();
        let fresh = match report.outcome {
            RoundOutcome::Committed => report.round == current && report.round > history.last_committed,
            RoundOutcome::Aborted => report.round == current + 1,
        };
        if !fresh {
            history.stale_reports += 1;
            warn!("ignoring stale report for {} round {}", report.cohort_id, report.round);
            return Ingest::Stale;
        }
        if report.outcome == RoundOutcome::Committed {
            history.last_committed = report.round;
        }
        history.reports.push(report.clone());
        let rates = history.flag_rates();
        if rates.len() >= RECLUSTER_WINDOW {
            let recent = &rates[rates.len() - RECLUSTER_WINDOW..];
            let mean = recent.iter().sum::<f64>() / RECLUSTER_WINDOW as f64;
            if mean > RECLUSTER_FLAG_RATE && !history.marked {
                info!(
                    "{}: mean flag rate {mean:.2} over {RECLUSTER_WINDOW} rounds, marked for recluster",
                    report.cohort_id
                );
                history.marked = true;
            }
        }
        Ingest::Recorded { marked: history.marked }
    }

    /// Runs one scheduler iteration: re-forms cohorts where needed, then one
    /// round per cohort in display order, ingesting each report.
    pub fn run_iteration(&mut self, iteration: u64, transport: &mut dyn RoundTransport) -> Result<Vec<RoundReport>> {
        self.prepare_cohorts()?;
        let ids: Vec<String> = self.cohorts().iter().map(|c| c.cohort_id.clone()).collect();
        let mut reports = Vec::with_capacity(ids.len());
        for id in ids {
            let report = self.run_round(&id, iteration, transport)?;
            self.ingest_metrics(&report);
            reports.push(report);
        }
        Ok(reports)
    }
}
