//! Named scenarios shipped with the library.

use std::collections::BTreeSet;

use super::{
    client_id, ClientProfile, ClusterSpec, DriftEvent, FaultKind, FaultSpec, PoisonSpec, Result, SampleRange,
    ScenarioError, ScenarioSpec, TaskSpec,
};
use crate::client::{Neighbor, ResourceProfile};
use crate::community::{CollaborationCriteria, Community};
use crate::flcore::{FlPlan, PlanOverrides, Weighting};
use crate::orchestrator::{ClientsPerRound, SchedulerConfig};
use crate::tinylearn::ModelArch;

const NAMES: [&str; 5] = ["uniform", "heartrate", "drift", "poison", "dropout"];

pub fn builtin_names() -> &'static [&'static str] {
    &NAMES
}

pub fn builtin(name: &str) -> Result<ScenarioSpec> {
    match name {
        "uniform" => Ok(uniform()),
        "heartrate" => Ok(heartrate()),
        "drift" => Ok(drift()),
        "poison" => Ok(poison()),
        "dropout" => Ok(dropout()),
        other => Err(ScenarioError::UnknownBuiltin(other.to_string())),
    }
}

/// Every builtin, in a fixed order.
pub fn builtin_scenarios() -> Vec<ScenarioSpec> {
    NAMES.iter().map(|n| builtin(n).expect("builtin exists")).collect()
}

fn plan(rounds: u32) -> FlPlan {
    FlPlan {
        epochs: 2,
        batch_size: 16,
        learning_rate: 0.1,
        shuffle_seed: 0,
        eval_holdout_fraction: 0.25,
        rounds_target: rounds,
    }
}

fn community(id: &str, objective: &str, arch: ModelArch, rounds: u32, seed: u64) -> Community {
    Community {
        community_id: id.into(),
        creator_id: format!("{}-owner", id.to_lowercase()),
        purpose: format!("{objective} models for wrist-worn devices"),
        objective: objective.into(),
        fl_algorithm: "fedavg".into(),
        criteria: CollaborationCriteria::default(),
        base_model: arch,
        default_plan: plan(rounds),
        seed,
    }
}

fn scheduler(rounds: u32, seed: u64) -> SchedulerConfig {
    SchedulerConfig {
        clients_per_round: ClientsPerRound::All,
        rounds,
        cohort_threshold: 0.9,
        min_updates_quorum: 0.5,
        guard_epsilon: 0.5,
        guard_enabled: true,
        weighting: Weighting::default(),
        seed,
    }
}

fn task(task_id: &str, client: usize, community: &str) -> TaskSpec {
    TaskSpec {
        task_id: task_id.into(),
        client_id: client_id(client),
        community_id: community.into(),
        device_type: None,
        plan: PlanOverrides::default(),
    }
}

/// One task per client, named `{prefix}-{client id}`.
fn one_task_each(n: usize, community: &str, prefix: &str) -> Vec<TaskSpec> {
    (0..n).map(|i| task(&format!("{prefix}-{}", client_id(i)), i, community)).collect()
}

fn tags(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Homogeneous population: every client draws from the same distribution.
fn uniform() -> ScenarioSpec {
    let (n, f, k, rounds, seed) = (6, 4, 3, 10, 7);
    ScenarioSpec {
        name: "uniform".into(),
        seed,
        n_clients: n,
        n_features: f,
        n_classes: k,
        clusters: vec![ClusterSpec { weight: 1.0, feature_shift: vec![], label_map: vec![] }],
        samples_per_client: SampleRange { min: 300, max: 400 },
        class_separation: 2.0,
        blob_std: 1.0,
        drift_events: vec![],
        poison: vec![],
        faults: vec![],
        scheduler: scheduler(rounds, seed),
        communities: vec![community("C1", "activity", ModelArch::logistic(f, k), rounds, seed)],
        tasks: one_task_each(n, "C1", "activity"),
        clients: vec![],
    }
}

/// Two communities with different objectives. Community 2's population holds
/// two environments: the second is shifted by 5 units on every feature and
/// has its labels swapped, so no single linear model fits both.
fn heartrate() -> ScenarioSpec {
    let (n, f, k, rounds, seed) = (8, 2, 2, 20, 42);
    let mut tasks = vec![task("M1.1", 0, "C1"), task("M1.2", 1, "C1")];
    for (i, name) in ["M2.1-a", "M2.1-b", "M2.1-c", "M2.2-a", "M2.2-b", "M2.2-c"].iter().enumerate() {
        tasks.push(task(name, i + 2, "C2"));
    }
    let clients = (0..n)
        .map(|i| ClientProfile {
            client_id: client_id(i),
            device: None,
            interests: if i < 2 { tags(&["sleep", "fitness"]) } else { tags(&["cardio", "fitness"]) },
            expertise: tags(&["wearables"]),
            quality_score: 1.0,
            resources: ResourceProfile::default(),
            neighbors: vec![],
        })
        .collect();
    let mut c2 = community("C2", "heart-rate-zone", ModelArch::logistic(f, k), rounds, seed);
    c2.criteria.required_tags = tags(&["cardio"]);
    ScenarioSpec {
        name: "heartrate".into(),
        seed,
        n_clients: n,
        n_features: f,
        n_classes: k,
        clusters: vec![
            ClusterSpec { weight: 0.625, feature_shift: vec![], label_map: vec![] },
            ClusterSpec { weight: 0.375, feature_shift: vec![5.0; f], label_map: vec![1, 0] },
        ],
        samples_per_client: SampleRange { min: 240, max: 360 },
        class_separation: 3.0,
        blob_std: 1.0,
        drift_events: vec![],
        poison: vec![],
        faults: vec![],
        scheduler: scheduler(rounds, seed),
        communities: vec![community("C1", "sleep-stage", ModelArch::logistic(f, k), rounds, seed), c2],
        tasks,
        clients,
    }
}

/// Two planted clusters; one client moves to the other cluster mid-run.
fn drift() -> ScenarioSpec {
    let (n, f, k, rounds, seed) = (6, 2, 2, 16, 11);
    ScenarioSpec {
        name: "drift".into(),
        seed,
        n_clients: n,
        n_features: f,
        n_classes: k,
        clusters: vec![
            ClusterSpec { weight: 0.5, feature_shift: vec![], label_map: vec![] },
            ClusterSpec { weight: 0.5, feature_shift: vec![5.0; f], label_map: vec![1, 0] },
        ],
        samples_per_client: SampleRange { min: 240, max: 360 },
        class_separation: 3.0,
        blob_std: 1.0,
        drift_events: vec![DriftEvent { round: 8, client_id: client_id(2), new_cluster: 1 }],
        poison: vec![],
        faults: vec![],
        scheduler: scheduler(rounds, seed),
        communities: vec![community("C1", "activity", ModelArch::logistic(f, k), rounds, seed)],
        tasks: one_task_each(n, "C1", "activity"),
        clients: vec![],
    }
}

/// Four clients in one cohort; the last flips every label.
fn poison() -> ScenarioSpec {
    let (n, f, k, rounds, seed) = (4, 4, 3, 12, 5);
    ScenarioSpec {
        name: "poison".into(),
        seed,
        n_clients: n,
        n_features: f,
        n_classes: k,
        clusters: vec![ClusterSpec { weight: 1.0, feature_shift: vec![], label_map: vec![] }],
        samples_per_client: SampleRange { min: 300, max: 400 },
        class_separation: 3.0,
        blob_std: 1.0,
        drift_events: vec![],
        poison: vec![PoisonSpec { client_id: client_id(3), label_flip_rate: 1.0 }],
        faults: vec![],
        scheduler: scheduler(rounds, seed),
        communities: vec![community("C1", "activity", ModelArch::logistic(f, k), rounds, seed)],
        tasks: one_task_each(n, "C1", "activity"),
        clients: vec![],
    }
}

/// Scripted drops and delays, plus a low-battery client that delegates.
fn dropout() -> ScenarioSpec {
    let (n, f, k, rounds, seed) = (4, 2, 2, 8, 3);
    let mut sched = scheduler(rounds, seed);
    sched.min_updates_quorum = 0.75;
    let fault = |round, client, kind| FaultSpec { round, client_id: client_id(client), kind };
    ScenarioSpec {
        name: "dropout".into(),
        seed,
        n_clients: n,
        n_features: f,
        n_classes: k,
        clusters: vec![ClusterSpec { weight: 1.0, feature_shift: vec![], label_map: vec![] }],
        samples_per_client: SampleRange { min: 200, max: 300 },
        class_separation: 3.0,
        blob_std: 1.0,
        drift_events: vec![],
        poison: vec![],
        faults: vec![
            fault(2, 2, FaultKind::Drop),
            fault(4, 1, FaultKind::Delay),
            fault(6, 0, FaultKind::Drop),
            fault(6, 1, FaultKind::Drop),
        ],
        scheduler: sched,
        communities: vec![community("C1", "activity", ModelArch::logistic(f, k), rounds, seed)],
        tasks: one_task_each(n, "C1", "activity"),
        clients: vec![ClientProfile {
            client_id: client_id(3),
            device: None,
            interests: BTreeSet::new(),
            expertise: BTreeSet::new(),
            quality_score: 1.0,
            resources: ResourceProfile { cpu_score: 0.5, battery: 0.1 },
            neighbors: vec![Neighbor { client_id: client_id(0), trusted: true }],
        }],
    }
}
