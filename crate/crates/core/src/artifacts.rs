//! Run artifacts: `rounds.csv`, `rounds.jsonl`, `cohorts.json` and
//! `run_summary.json`, plus the text tree printed by `inspect`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flcore::weights_digest;
use crate::orchestrator::{Coordinator, Mode, RoundOutcome, RoundReport};
use crate::simulation::Simulation;

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const ROUNDS_JSONL: &str = "rounds.jsonl";
pub const COHORTS_JSON: &str = "cohorts.json";
pub const RUN_SUMMARY_JSON: &str = "run_summary.json";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ArtifactError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, message: impl ToString) -> ArtifactError {
    ArtifactError::Format { path: path.display().to_string(), message: message.to_string() }
}

/// One line of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub iteration: u64,
    pub cohort_id: String,
    pub population_id: String,
    pub round: u64,
    pub outcome: RoundOutcome,
    pub n_selected: usize,
    pub n_updates: usize,
    pub n_dropouts: usize,
    pub n_flagged: usize,
    pub aggregate_pre_loss: f64,
    pub aggregate_post_loss: f64,
    pub mean_local_acc: f64,
    pub global_holdout_acc: f64,
    pub flag_rate: f64,
    pub bytes_transferred: u64,
    pub weights_hash: String,
}

impl From<&RoundReport> for RoundRow {
    fn from(r: &RoundReport) -> Self {
        Self {
            iteration: r.iteration,
            cohort_id: r.cohort_id.clone(),
            population_id: r.population_id.clone(),
            round: r.round,
            outcome: r.outcome,
            n_selected: r.selected_task_ids.len(),
            n_updates: r.received_updates,
            n_dropouts: r.dropouts.len(),
            n_flagged: r.guard_verdicts.values().filter(|v| v.is_flag()).count(),
            aggregate_pre_loss: r.aggregate_pre_loss,
            aggregate_post_loss: r.aggregate_post_loss,
            mean_local_acc: r.mean_local_acc,
            global_holdout_acc: r.global_holdout_acc,
            flag_rate: r.flag_rate,
            bytes_transferred: r.bytes_transferred,
            weights_hash: r.new_global_weights_hash.clone(),
        }
    }
}

pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(RoundRow::from(r)).expect("in-memory csv write");
    }
    if reports.is_empty() {
        // Header only, so the file always names its columns.
        let header = "iteration,cohort_id,population_id,round,outcome,n_selected,n_updates,n_dropouts,n_flagged,\
                      aggregate_pre_loss,aggregate_post_loss,mean_local_acc,global_holdout_acc,flag_rate,\
                      bytes_transferred,weights_hash\n";
        return header.to_string();
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_rounds_csv(&text).map_err(|e| format_err(path, e))
}

/// Parses the text of a `rounds.csv` file.
pub fn parse_rounds_csv(text: &str) -> std::result::Result<Vec<RoundRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

pub fn rounds_jsonl(reports: &[RoundReport]) -> String {
    reports.iter().map(|r| serde_json::to_string(r).expect("report serializes") + "\n").collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNode {
    pub task_id: String,
    pub client_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortNode {
    pub cohort_id: String,
    /// Display name, `FL cohort k` within its population.
    pub label: String,
    pub round: u64,
    pub weights_hash: String,
    pub tasks: Vec<TaskNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationNode {
    pub population_id: String,
    /// Display name, `FL population n` by display rank.
    pub label: String,
    pub device_type: String,
    pub model_arch: String,
    pub objective: String,
    pub cohorts: Vec<CohortNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityNode {
    pub community_id: String,
    pub purpose: String,
    pub objective: String,
    pub populations: Vec<PopulationNode>,
}

/// `cohorts.json`: community, then population, then cohort, then task.
/// A population or cohort shared by several communities appears under
/// each, listing only that community's tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTree {
    pub mode: Mode,
    pub communities: Vec<CommunityNode>,
}

impl CohortTree {
    pub fn from_coordinator(c: &Coordinator) -> Self {
        let registry = c.registry();
        let mut pops: Vec<_> = registry.populations().collect();
        pops.sort_by_key(|p| registry.population_rank(&p.population_id));
        let communities = c
            .communities()
            .iter()
            .map(|community| {
                let in_community =
                    |task_id: &String| registry.task(task_id).is_some_and(|t| t.community_id == community.community_id);
                let populations = pops
                    .iter()
                    .filter(|p| p.member_task_ids.iter().any(in_community))
                    .map(|p| PopulationNode {
                        population_id: p.population_id.clone(),
                        label: format!("FL population {}", registry.population_rank(&p.population_id).unwrap_or(0)),
                        device_type: p.config.device_type.clone(),
                        model_arch: p.config.model_arch.arch_id.clone(),
                        objective: p.config.objective.clone(),
                        cohorts: p
                            .cohorts
                            .iter()
                            .enumerate()
                            .filter(|(_, cohort)| cohort.member_task_ids.iter().any(in_community))
                            .map(|(k, cohort)| CohortNode {
                                cohort_id: cohort.cohort_id.clone(),
                                label: format!("FL cohort {}", k + 1),
                                round: cohort.round,
                                weights_hash: format!("{:016x}", weights_digest(&cohort.global_weights)),
                                tasks: cohort
                                    .member_task_ids
                                    .iter()
                                    .filter(|t| in_community(t))
                                    .map(|t| TaskNode {
                                        task_id: t.clone(),
                                        client_id: registry.task(t).map(|x| x.client_id.clone()).unwrap_or_default(),
                                    })
                                    .collect(),
                            })
                            .collect(),
                    })
                    .collect();
                CommunityNode {
                    community_id: community.community_id.clone(),
                    purpose: community.purpose.clone(),
                    objective: community.objective.clone(),
                    populations,
                }
            })
            .collect();
        Self { mode: c.mode(), communities }
    }

    /// Every (population label, cohort count) pair, without duplicates.
    pub fn cohort_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.communities.iter().flat_map(|c| &c.populations) {
            let n = out.entry(p.label.clone()).or_insert(0);
            *n = (*n).max(p.cohorts.len());
        }
        out
    }
}

/// Cohort-mode vs global-mode result on the same scenario and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub cohort_mean_client_accuracy: f64,
    pub global_mean_client_accuracy: f64,
    /// Cohort minus global.
    pub difference: f64,
}

impl ModeComparison {
    pub fn new(cohort: f64, global: f64) -> Self {
        Self { cohort_mean_client_accuracy: cohort, global_mean_client_accuracy: global, difference: cohort - global }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Aborted,
    Interrupted,
}

/// `run_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub mode: Mode,
    pub outcome: RunOutcome,
    pub rounds_executed: u64,
    /// Per cohort: final holdout accuracy in [0, 1].
    pub cohort_accuracy: BTreeMap<String, f64>,
    /// Mean over clients of their final holdout accuracy.
    pub mean_client_accuracy: Option<f64>,
    /// Mean client accuracy after each iteration.
    pub accuracy_by_iteration: Vec<f64>,
    pub comparison: Option<ModeComparison>,
    pub final_weight_hashes: BTreeMap<String, String>,
    pub committed_rounds: usize,
    pub aborted_rounds: usize,
    pub dropouts: usize,
    pub flagged_updates: usize,
    pub bytes_transferred: u64,
    pub wall_time_ms: u64,
}

impl RunSummary {
    /// Summary of a simulation. Accuracy is scored on clean holdout data.
    pub fn from_simulation(sim: &Simulation, outcome: RunOutcome, wall_time_ms: u64) -> Self {
        let last = sim.accuracy().last();
        let cohort_accuracy = sim
            .coordinator()
            .cohorts()
            .into_iter()
            .filter_map(|c| {
                let accs: Vec<f64> =
                    c.member_task_ids.iter().filter_map(|t| last.and_then(|a| a.tasks.get(t)).copied()).collect();
                (!accs.is_empty()).then(|| (c.cohort_id.clone(), accs.iter().sum::<f64>() / accs.len() as f64))
            })
            .collect();
        let mut s = Self::from_reports(
            &sim.spec().name,
            sim.spec().seed,
            sim.coordinator(),
            sim.reports(),
            sim.iteration(),
            outcome,
            wall_time_ms,
        );
        s.cohort_accuracy = cohort_accuracy;
        s.mean_client_accuracy = last.map(|a| a.mean_client);
        s.accuracy_by_iteration = sim.accuracy().iter().map(|a| a.mean_client).collect();
        s
    }

    /// Summary from reports alone (socket mode). Cohort accuracy is the
    /// global holdout accuracy of each cohort's last committed round.
    pub fn from_reports(
        scenario: &str,
        seed: u64,
        coordinator: &Coordinator,
        reports: &[RoundReport],
        rounds_executed: u64,
        outcome: RunOutcome,
        wall_time_ms: u64,
    ) -> Self {
        let mut cohort_accuracy = BTreeMap::new();
        for r in reports.iter().filter(|r| r.outcome == RoundOutcome::Committed && r.global_holdout_acc.is_finite()) {
            cohort_accuracy.insert(r.cohort_id.clone(), r.global_holdout_acc);
        }
        let final_weight_hashes = coordinator
            .cohorts()
            .into_iter()
            .map(|c| (c.cohort_id.clone(), format!("{:016x}", weights_digest(&c.global_weights))))
            .collect();
        Self {
            scenario: scenario.to_string(),
            seed,
            mode: coordinator.mode(),
            outcome,
            rounds_executed,
            cohort_accuracy,
            mean_client_accuracy: None,
            accuracy_by_iteration: Vec::new(),
            comparison: None,
            final_weight_hashes,
            committed_rounds: reports.iter().filter(|r| r.outcome == RoundOutcome::Committed).count(),
            aborted_rounds: reports.iter().filter(|r| r.outcome == RoundOutcome::Aborted).count(),
            dropouts: reports.iter().map(|r| r.dropouts.len()).sum(),
            flagged_updates: reports.iter().map(|r| r.guard_verdicts.values().filter(|v| v.is_flag()).count()).sum(),
            bytes_transferred: reports.iter().map(|r| r.bytes_transferred).sum(),
            wall_time_ms,
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    // Write-then-rename so a reader never sees a half-written file.
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

/// Writes all four artifacts into `dir`, creating it if needed.
pub fn write_all(dir: &Path, reports: &[RoundReport], tree: &CohortTree, summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(dir, ROUNDS_CSV, &rounds_csv(reports))?;
    write(dir, ROUNDS_JSONL, &rounds_jsonl(reports))?;
    write(dir, COHORTS_JSON, &pretty(tree))?;
    write(dir, RUN_SUMMARY_JSON, &pretty(summary))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

pub fn read_cohort_tree(dir: &Path) -> Result<CohortTree> {
    read_json(&dir.join(COHORTS_JSON))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    read_json(&dir.join(RUN_SUMMARY_JSON))
}

/// Text tree of communities, populations, cohorts and tasks, with each
/// cohort's flag-rate summary from `rows`.
pub fn render_tree(tree: &CohortTree, rows: &[RoundRow]) -> String {
    let mut flags: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.outcome == RoundOutcome::Committed) {
        let e = flags.entry(&r.cohort_id).or_default();
        e.0 += r.n_flagged;
        e.1 += r.n_updates;
        e.2 = e.2.max(r.flag_rate);
    }
    let mut out = String::new();
    let _ = writeln!(out, "mode: {}", tree.mode);
    for c in &tree.communities {
        let _ = writeln!(out, "community {} ({})", c.community_id, c.objective);
        for p in &c.populations {
            let _ = writeln!(
                out,
                "  {} [{}] {} / {} / {}",
                p.label, p.population_id, p.device_type, p.model_arch, p.objective
            );
            for k in &p.cohorts {
                let summary = match flags.get(k.cohort_id.as_str()) {
                    Some(&(flagged, updates, max)) if updates > 0 => {
                        format!("flagged {flagged}/{updates} updates, max round flag rate {max:.2}")
                    }
                    _ => "no committed rounds".to_string(),
                };
                let _ = writeln!(
                    out,
                    "    {} [{}] round {} weights {}: {summary}",
                    k.label, k.cohort_id, k.round, k.weights_hash
                );
                for t in &k.tasks {
                    let _ = writeln!(out, "      {} ({})", t.task_id, t.client_id);
                }
            }
        }
    }
    out
}
