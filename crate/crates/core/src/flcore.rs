//! Federated-learning domain model: tasks, plans, populations, cohorts and
//! model updates, plus the population registry and weighted averaging.

use std::collections::{BTreeMap, BTreeSet};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::community::DataSignature;
use crate::tinylearn::{EvalMetrics, HyperParams, LearnError, ModelArch, WeightVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlError {
    #[error("task {0:?} is already registered with a different definition")]
    DuplicateTask(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("cannot aggregate an empty update list")]
    EmptyAggregation,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("updates do not belong to one cohort round: {0}")]
    MixedRound(String),
    #[error("update from task {0:?} has non-finite weights")]
    NonFinite(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

pub type Result<T> = std::result::Result<T, FlError>;

/// 64-bit digest: first eight bytes of SHA-256, big-endian.
pub(crate) fn digest64(bytes: &[u8]) -> u64 {
    let hash = Sha256::digest(bytes);
    u64::from_be_bytes(hash[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Digest of a weight vector (arch id plus little-endian values).
pub fn weights_digest(w: &WeightVector) -> u64 {
    let mut bytes = Vec::with_capacity(w.arch_id().len() + 1 + 8 * w.len());
    bytes.extend_from_slice(w.arch_id().as_bytes());
    bytes.push(0);
    for v in w.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    digest64(&bytes)
}

/// The configuration that decides population membership. Two tasks share a
/// population iff their signatures are field-wise equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ConfigSignature {
    pub device_type: String,
    pub fl_algorithm: String,
    pub model_arch: ModelArch,
    pub objective: String,
}

impl ConfigSignature {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in
            [("device_type", &self.device_type), ("fl_algorithm", &self.fl_algorithm), ("objective", &self.objective)]
        {
            if value.trim().is_empty() {
                return Err(FlError::InvalidTask(format!("config field {name} is empty")));
            }
        }
        self.model_arch.validate()?;
        Ok(())
    }

    pub fn digest(&self) -> u64 {
        let canonical = serde_json::to_vec(&serde_json::to_value(self).expect("plain struct")).expect("plain value");
        digest64(&canonical)
    }
}

/// Executable instructions for one task's federated training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FlPlan {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
    pub eval_holdout_fraction: f64,
    pub rounds_target: u32,
}

impl FlPlan {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(FlError::InvalidPlan(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive and finite");
        }
        if !(self.eval_holdout_fraction > 0.0 && self.eval_holdout_fraction < 1.0) {
            return fail("eval_holdout_fraction must lie in (0, 1)");
        }
        if self.rounds_target < 1 {
            return fail("rounds_target must be at least 1");
        }
        Ok(())
    }

    /// Hyperparameters for one round of local training. The shuffle seed is
    /// mixed with the task and round so rounds do not replay one order.
    pub fn hyper_params(&self, task_id: &str, round: u64) -> HyperParams {
        let mut bytes = self.shuffle_seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(&round.to_le_bytes());
        bytes.extend_from_slice(task_id.as_bytes());
        HyperParams {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            shuffle_seed: digest64(&bytes),
        }
    }
}

/// Per-task plan overrides on top of a community's default plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PlanOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_holdout_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds_target: Option<u32>,
}

impl PlanOverrides {
    pub fn apply(&self, base: &FlPlan) -> FlPlan {
        FlPlan {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            shuffle_seed: self.shuffle_seed.unwrap_or(base.shuffle_seed),
            eval_holdout_fraction: self.eval_holdout_fraction.unwrap_or(base.eval_holdout_fraction),
            rounds_target: self.rounds_target.unwrap_or(base.rounds_target),
        }
    }
}

/// A client's learning job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FlTask {
    pub task_id: String,
    pub client_id: String,
    pub community_id: String,
    pub config: ConfigSignature,
    #[serde(default)]
    pub plan: PlanOverrides,
    pub data_signature: DataSignature,
    pub targeted_device: String,
}

impl FlTask {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("task_id", &self.task_id),
            ("client_id", &self.client_id),
            ("community_id", &self.community_id),
            ("targeted_device", &self.targeted_device),
        ] {
            if value.trim().is_empty() {
                return Err(FlError::InvalidTask(format!("{name} is empty")));
            }
        }
        self.config.validate()?;
        self.data_signature.validate().map_err(|e| FlError::InvalidTask(format!("data_signature: {e}")))?;
        if self.data_signature.n_features() != self.config.model_arch.n_features
            || self.data_signature.n_classes() != self.config.model_arch.n_classes
        {
            return Err(FlError::InvalidTask(format!(
                "data signature shape does not fit {}",
                self.config.model_arch.arch_id
            )));
        }
        Ok(())
    }
}

/// Subset of a population with similar data; owns one global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlCohort {
    pub cohort_id: String,
    pub population_id: String,
    pub member_task_ids: BTreeSet<String>,
    pub centroid: DataSignature,
    pub global_weights: WeightVector,
    /// Completed rounds.
    pub round: u64,
}

/// All tasks with one configuration signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlPopulation {
    pub population_id: String,
    pub config: ConfigSignature,
    pub member_task_ids: BTreeSet<String>,
    pub cohorts: Vec<FlCohort>,
}

impl FlPopulation {
    pub fn cohort(&self, cohort_id: &str) -> Option<&FlCohort> {
        self.cohorts.iter().find(|c| c.cohort_id == cohort_id)
    }

    pub fn cohort_mut(&mut self, cohort_id: &str) -> Option<&mut FlCohort> {
        self.cohorts.iter_mut().find(|c| c.cohort_id == cohort_id)
    }

    pub fn cohort_of(&self, task_id: &str) -> Option<&FlCohort> {
        self.cohorts.iter().find(|c| c.member_task_ids.contains(task_id))
    }
}

/// Identifier of the population for `config`. Derived from the signature
/// digest so it does not depend on submission order.
pub fn population_id_for(config: &ConfigSignature) -> String {
    format!("pop-{:016x}", config.digest())
}

/// One client's contribution to a cohort round.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub task_id: String,
    pub cohort_id: String,
    pub round: u64,
    pub weights: WeightVector,
    pub n_samples: usize,
    /// Client's own previous local model on its holdout.
    pub pre_metrics: EvalMetrics,
    /// Incoming global model on the client's holdout.
    pub post_metrics: EvalMetrics,
    /// Device that actually ran the training (differs under delegation).
    pub executor_id: String,
}

/// Registry of tasks and the populations they belong to.
#[derive(Debug, Clone, Default)]
pub struct PopulationRegistry {
    populations: BTreeMap<String, FlPopulation>,
    tasks: BTreeMap<String, FlTask>,
    task_population: BTreeMap<String, String>,
}

impl PopulationRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Places `task` in the population whose configuration equals its own,
    /// creating the population if needed. Re-submitting an identical task is
    /// a no-op; a different task under a known id is a conflict.
    pub fn assign_population(&mut self, task: FlTask) -> Result<String> {
        task.validate()?;
        if let Some(existing) = self.tasks.get(&task.task_id) {
            return if *existing == task {
                Ok(self.task_population[&task.task_id].clone())
            } else {
                Err(FlError::DuplicateTask(task.task_id))
            };
        }
        let population_id = population_id_for(&task.config);
        let population = self.populations.entry(population_id.clone()).or_insert_with(|| FlPopulation {
            population_id: population_id.clone(),
            config: task.config.clone(),
            member_task_ids: BTreeSet::new(),
            cohorts: Vec::new(),
        });
        if population.config != task.config {
            return Err(FlError::InvalidTask(format!("config digest collision on {population_id}")));
        }
        population.member_task_ids.insert(task.task_id.clone());
        self.task_population.insert(task.task_id.clone(), population_id.clone());
        self.tasks.insert(task.task_id.clone(), task);
        Ok(population_id)
    }

    pub fn task(&self, task_id: &str) -> Option<&FlTask> {
        self.tasks.get(task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &FlTask> {
        self.tasks.values()
    }

    pub fn population_of(&self, task_id: &str) -> Option<&str> {
        self.task_population.get(task_id).map(String::as_str)
    }

    pub fn population(&self, population_id: &str) -> Option<&FlPopulation> {
        self.populations.get(population_id)
    }

    pub fn population_mut(&mut self, population_id: &str) -> Option<&mut FlPopulation> {
        self.populations.get_mut(population_id)
    }

    pub fn populations(&self) -> impl Iterator<Item = &FlPopulation> {
        self.populations.values()
    }

    /// Replaces the data signature of a registered task.
    pub fn update_signature(&mut self, task_id: &str, signature: DataSignature) -> Result<()> {
        let task = self.tasks.get_mut(task_id).ok_or_else(|| FlError::UnknownTask(task_id.to_string()))?;
        task.data_signature = signature;
        Ok(())
    }

    /// Signatures of a population's members keyed by task id.
    pub fn signatures(&self, population_id: &str) -> BTreeMap<String, DataSignature> {
        self.populations
            .get(population_id)
            .map(|p| p.member_task_ids.iter().map(|t| (t.clone(), self.tasks[t].data_signature.clone())).collect())
            .unwrap_or_default()
    }

    /// Display rank of a population (1-based), ordered by smallest member
    /// task id. Stable under any submission order.
    pub fn population_rank(&self, population_id: &str) -> Option<usize> {
        let mut keyed: Vec<(&String, &String)> = self
            .populations
            .values()
            .filter_map(|p| p.member_task_ids.iter().next().map(|first| (first, &p.population_id)))
            .collect();
        keyed.sort();
        keyed.iter().position(|(_, id)| *id == population_id).map(|i| i + 1)
    }
}

/// How member contributions are weighted when averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// FedAvg: proportional to local sample count.
    #[default]
    SampleCount,
    /// Plain mean, for ablations.
    Uniform,
}

/// Sample-count weighted average of a cohort round's updates.
pub fn aggregate(updates: &[ModelUpdate]) -> Result<WeightVector> {
    aggregate_with(updates, Weighting::SampleCount)
}

/// Coordinate-wise weighted mean, summed in ascending `task_id` order.
///
/// The mean is accumulated as offsets from the first update (in canonical
/// order), which makes a set of identical vectors average back to that
/// vector exactly.
pub fn aggregate_with(updates: &[ModelUpdate], weighting: Weighting) -> Result<WeightVector> {
    let first = updates.first().ok_or(FlError::EmptyAggregation)?;
    let mut ordered: Vec<&ModelUpdate> = updates.iter().collect();
    ordered.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    for pair in ordered.windows(2) {
        if pair[0].task_id == pair[1].task_id {
            return Err(FlError::MixedRound(format!("task {} appears twice", pair[0].task_id)));
        }
    }
    for u in &ordered {
        if u.cohort_id != first.cohort_id || u.round != first.round {
            return Err(FlError::MixedRound(format!(
                "{}@{} vs {}@{}",
                u.cohort_id, u.round, first.cohort_id, first.round
            )));
        }
        if u.weights.arch_id() != first.weights.arch_id() || u.weights.len() != first.weights.len() {
            return Err(FlError::Shape(format!(
                "task {} sent {} ({} values), expected {} ({} values)",
                u.task_id,
                u.weights.arch_id(),
                u.weights.len(),
                first.weights.arch_id(),
                first.weights.len()
            )));
        }
        if !u.weights.is_finite() {
            return Err(FlError::NonFinite(u.task_id.clone()));
        }
        if u.n_samples == 0 {
            return Err(FlError::Shape(format!("task {} reports zero samples", u.task_id)));
        }
    }
    if ordered.len() == 1 {
        return Ok(single_member_aggregate(ordered[0]));
    }
    let raw: Vec<f64> = ordered
        .iter()
        .map(|u| match weighting {
            Weighting::SampleCount => u.n_samples as f64,
            Weighting::Uniform => 1.0,
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let coeffs: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let reference = ordered[0].weights.values();
    let mut values = Vec::with_capacity(reference.len());
    for (i, &base) in reference.iter().enumerate() {
        let mut offset = 0.0;
        for (u, c) in ordered.iter().zip(&coeffs) {
            offset += c * (u.weights.values()[i] - base);
        }
        values.push(base + offset);
    }
    Ok(WeightVector::new(first.weights.arch_id(), values)?)
}

/// Aggregate of a single update: its weights, bit for bit.
pub fn single_member_aggregate(update: &ModelUpdate) -> WeightVector {
    update.weights.clone()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::community::DataSignature;
    use proptest::prelude::*;

    pub(crate) fn metrics(loss: f64) -> EvalMetrics {
        EvalMetrics { loss, accuracy: 0.5, n_samples: 10 }
    }

    pub(crate) fn update(task: &str, values: Vec<f64>, n: usize) -> ModelUpdate {
        let arch_id = ModelArch::logistic(values.len() / 2 - 1, 2).arch_id;
        ModelUpdate {
            task_id: task.to_string(),
            cohort_id: "c".into(),
            round: 1,
            weights: WeightVector::new(arch_id, values).unwrap(),
            n_samples: n,
            pre_metrics: metrics(1.0),
            post_metrics: metrics(1.0),
            executor_id: task.to_string(),
        }
    }

    fn logreg1(v: f64) -> Vec<f64> {
        // logreg-1x2 has 4 parameters; tests use constant fill.
        vec![v; 4]
    }

    pub(crate) fn task(id: &str, device: &str, objective: &str) -> FlTask {
        FlTask {
            task_id: id.into(),
            client_id: format!("client-{id}"),
            community_id: "C2".into(),
            config: ConfigSignature {
                device_type: device.into(),
                fl_algorithm: "fedavg".into(),
                model_arch: ModelArch::logistic(2, 2),
                objective: objective.into(),
            },
            plan: PlanOverrides::default(),
            data_signature: DataSignature::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![0.5, 0.5], 100, 1.0).unwrap(),
            targeted_device: device.into(),
        }
    }

    #[test]
    fn symmetric_average() {
        let a = update("a", logreg1(0.0), 10);
        let b = update("b", logreg1(2.0), 10);
        assert_eq!(aggregate(&[a, b]).unwrap().values(), &logreg1(1.0)[..]);
    }

    #[test]
    fn weighted_average() {
        let a = update("a", logreg1(1.0), 1);
        let b = update("b", logreg1(4.0), 3);
        assert_eq!(aggregate(&[a, b]).unwrap().values(), &logreg1(3.25)[..]);
    }

    #[test]
    fn uniform_weighting_ignores_counts() {
        let a = update("a", logreg1(1.0), 1);
        let b = update("b", logreg1(4.0), 3);
        assert_eq!(aggregate_with(&[a, b], Weighting::Uniform).unwrap().values(), &logreg1(2.5)[..]);
    }

    #[test]
    fn single_update_is_identity() {
        let u = update("a", vec![0.3, -0.7, 0.1, 0.9], 5);
        assert_eq!(single_member_aggregate(&u), u.weights);
        assert_eq!(aggregate(std::slice::from_ref(&u)).unwrap(), u.weights);
    }

    #[test]
    fn aggregation_errors() {
        assert_eq!(aggregate(&[]), Err(FlError::EmptyAggregation));
        let a = update("a", logreg1(1.0), 1);
        let b = update("b", vec![1.0; 6], 1);
        assert!(matches!(aggregate(&[a.clone(), b]), Err(FlError::Shape(_))));
        let mut c = update("c", logreg1(1.0), 1);
        c.round = 2;
        assert!(matches!(aggregate(&[a.clone(), c]), Err(FlError::MixedRound(_))));
        let mut d = update("d", logreg1(1.0), 1);
        d.cohort_id = "other".into();
        assert!(matches!(aggregate(&[a.clone(), d]), Err(FlError::MixedRound(_))));
        let e = update("e", vec![f64::NAN, 0.0, 0.0, 0.0], 1);
        assert!(matches!(aggregate(&[a.clone(), e]), Err(FlError::NonFinite(_))));
        assert!(matches!(aggregate(&[a.clone(), a]), Err(FlError::MixedRound(_))));
    }

    #[test]
    fn same_config_same_population() {
        let mut reg = PopulationRegistry::new();
        let p1 = reg.assign_population(task("M2.1", "smartwatch", "hr-anomaly")).unwrap();
        let p2 = reg.assign_population(task("M2.2", "smartwatch", "hr-anomaly")).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(reg.population(&p1).unwrap().member_task_ids.len(), 2);
    }

    #[test]
    fn objective_difference_splits_populations() {
        let mut reg = PopulationRegistry::new();
        let p1 = reg.assign_population(task("a", "smartwatch", "hr-anomaly")).unwrap();
        let p2 = reg.assign_population(task("b", "smartwatch", "sleep-stage")).unwrap();
        assert_ne!(p1, p2);
    }

    #[test]
    fn resubmission_is_idempotent_and_conflicts_are_rejected() {
        let mut reg = PopulationRegistry::new();
        let t = task("a", "smartwatch", "hr");
        let p = reg.assign_population(t.clone()).unwrap();
        assert_eq!(reg.assign_population(t).unwrap(), p);
        let other = task("a", "tracker", "hr");
        assert_eq!(reg.assign_population(other), Err(FlError::DuplicateTask("a".into())));
        assert_eq!(reg.population(&p).unwrap().member_task_ids.len(), 1);
    }

    #[test]
    fn invalid_tasks_rejected() {
        let mut reg = PopulationRegistry::new();
        assert!(matches!(reg.assign_population(task("a", "", "hr")), Err(FlError::InvalidTask(_))));
        let mut t = task("b", "watch", "hr");
        t.config.model_arch = ModelArch::logistic(3, 2);
        assert!(matches!(reg.assign_population(t), Err(FlError::InvalidTask(_))));
    }

    #[test]
    fn plan_overrides_and_validation() {
        let base = FlPlan {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.1,
            shuffle_seed: 1,
            eval_holdout_fraction: 0.2,
            rounds_target: 10,
        };
        assert_eq!(PlanOverrides::default().apply(&base), base);
        let lr = PlanOverrides { learning_rate: Some(0.5), ..Default::default() }.apply(&base);
        assert_eq!(FlPlan { learning_rate: 0.5, ..base }, lr);
        assert!(FlPlan { epochs: 0, ..base }.validate().is_err());
        assert!(FlPlan { eval_holdout_fraction: 1.0, ..base }.validate().is_err());
        assert!(base.validate().is_ok());
        assert_ne!(base.hyper_params("t", 1).shuffle_seed, base.hyper_params("t", 2).shuffle_seed);
    }

    /// Naive weighted mean: Σ nᵢ·xᵢ / Σ nᵢ in input order.
    fn naive_weighted_mean(updates: &[ModelUpdate]) -> Vec<f64> {
        let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
        (0..updates[0].weights.len())
            .map(|i| updates.iter().map(|u| u.n_samples as f64 * u.weights.values()[i]).sum::<f64>() / total)
            .collect()
    }

    fn updates_strategy(max: usize) -> impl Strategy<Value = Vec<ModelUpdate>> {
        prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 6), 1usize..500), 1..max).prop_map(|rows| {
            rows.into_iter().enumerate().map(|(i, (values, n))| update(&format!("t{i:02}"), values, n)).collect()
        })
    }

    proptest! {
        #[test]
        fn matches_naive_oracle(updates in updates_strategy(8)) {
            let got = aggregate(&updates).unwrap();
            for (g, e) in got.values().iter().zip(naive_weighted_mean(&updates)) {
                prop_assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
            }
        }

        #[test]
        fn permutation_invariant_bit_exact(updates in updates_strategy(8), rot in 0usize..8) {
            let mut shuffled = updates.clone();
            shuffled.reverse();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            prop_assert_eq!(aggregate(&updates).unwrap(), aggregate(&shuffled).unwrap());
        }

        #[test]
        fn scaling_counts_is_exact(updates in updates_strategy(8), k in 2usize..50) {
            let scaled: Vec<ModelUpdate> = updates
                .iter()
                .cloned()
                .map(|mut u| { u.n_samples *= k; u })
                .collect();
            prop_assert_eq!(aggregate(&updates).unwrap(), aggregate(&scaled).unwrap());
        }

        #[test]
        fn equal_vectors_average_exactly(values in prop::collection::vec(-1e3f64..1e3, 6),
                                         counts in prop::collection::vec(1usize..1000, 1..8)) {
            let updates: Vec<ModelUpdate> = counts
                .iter()
                .enumerate()
                .map(|(i, &n)| update(&format!("t{i}"), values.clone(), n))
                .collect();
            let got = aggregate(&updates).unwrap();
            prop_assert_eq!(got.values(), &values[..]);
        }

        #[test]
        fn single_member_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6),
                                   n in 1usize..10_000) {
            let u = update("only", values.clone(), n);
            let got = aggregate(std::slice::from_ref(&u)).unwrap();
            prop_assert!(got.values().iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
