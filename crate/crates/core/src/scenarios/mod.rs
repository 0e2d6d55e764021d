//! Synthetic federated scenarios: Gaussian class blobs per client, cluster
//! transforms (feature shift, label map), drift, label-flip poisoning and
//! scripted network faults.

mod builtin;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builtin::{builtin, builtin_names, builtin_scenarios};

use crate::client::{Neighbor, ResourceProfile};
use crate::community::{CollaborationCriteria, Community, DataSignature, DeviceDescriptor, ParticipantMetadata};
use crate::flcore::{digest64, ConfigSignature, FlTask, PlanOverrides};
use crate::orchestrator::SchedulerConfig;
use crate::tinylearn::Dataset;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown builtin scenario {0:?}")]
    UnknownBuiltin(String),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ScenarioError::Invalid(msg.into()))
}

/// One environment: how a client's base data is transformed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    /// Share of clients in this cluster.
    pub weight: f64,
    /// Added to every sample; empty means no shift.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_shift: Vec<f64>,
    /// `label_map[y]` replaces label `y`; empty means identity.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_map: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRange {
    pub min: usize,
    pub max: usize,
}

/// From `round` on, the client's data comes from `new_cluster`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEvent {
    pub round: u64,
    pub client_id: String,
    pub new_cluster: usize,
}

/// Label-flip poisoning: each sample's label becomes `(y + 1) mod K` with
/// probability `label_flip_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonSpec {
    pub client_id: String,
    pub label_flip_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Every frame from the client to the coordinator is lost that round.
    Drop,
    /// The client's frames arrive after the round deadline.
    Delay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub round: u64,
    pub client_id: String,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub client_id: String,
    pub community_id: String,
    /// Defaults to the client's device type.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_type: Option<String>,
    #[serde(default)]
    pub plan: PlanOverrides,
}

/// Optional per-client settings; clients without an entry get defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub client_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<DeviceDescriptor>,
    #[serde(default)]
    pub interests: BTreeSet<String>,
    #[serde(default)]
    pub expertise: BTreeSet<String>,
    #[serde(default = "default_quality")]
    pub quality_score: f64,
    #[serde(default)]
    pub resources: ResourceProfile,
    #[serde(default)]
    pub neighbors: Vec<Neighbor>,
}

fn default_quality() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    3.0
}

fn default_blob_std() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub n_clients: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub clusters: Vec<ClusterSpec>,
    pub samples_per_client: SampleRange,
    /// Distance of class centers from the origin.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Per-feature standard deviation of every class blob.
    #[serde(default = "default_blob_std")]
    pub blob_std: f64,
    #[serde(default)]
    pub drift_events: Vec<DriftEvent>,
    #[serde(default)]
    pub poison: Vec<PoisonSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    pub scheduler: SchedulerConfig,
    pub communities: Vec<Community>,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub clients: Vec<ClientProfile>,
}

/// Client ids are `client-01` .. `client-NN` (1-based, two digits minimum).
pub fn client_id(index: usize) -> String {
    format!("client-{:02}", index + 1)
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn client_ids(&self) -> Vec<String> {
        (0..self.n_clients).map(client_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return invalid("name is empty");
        }
        if self.n_clients == 0 {
            return invalid("n_clients must be positive");
        }
        if self.n_features == 0 {
            return invalid("n_features must be positive");
        }
        if self.n_classes < 2 {
            return invalid("n_classes must be at least 2");
        }
        if self.samples_per_client.min < 4 || self.samples_per_client.min > self.samples_per_client.max {
            return invalid("samples_per_client needs 4 <= min <= max");
        }
        if !(self.blob_std > 0.0 && self.blob_std.is_finite()) {
            return invalid("blob_std must be positive");
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return invalid("class_separation must be finite and non-negative");
        }
        if self.clusters.is_empty() {
            return invalid("at least one cluster is required");
        }
        let mut total = 0.0;
        for (i, c) in self.clusters.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return invalid(format!("cluster {i}: weight must be positive"));
            }
            total += c.weight;
            if !c.feature_shift.is_empty() && c.feature_shift.len() != self.n_features {
                return invalid(format!("cluster {i}: feature_shift needs {} values", self.n_features));
            }
            if c.feature_shift.iter().any(|v| !v.is_finite()) {
                return invalid(format!("cluster {i}: feature_shift must be finite"));
            }
            if !c.label_map.is_empty()
                && (c.label_map.len() != self.n_classes || c.label_map.iter().any(|&y| y >= self.n_classes))
            {
                return invalid(format!(
                    "cluster {i}: label_map must map each of {} classes into range",
                    self.n_classes
                ));
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("cluster weights sum to {total}, expected 1"));
        }
        let ids: BTreeSet<String> = self.client_ids().into_iter().collect();
        let known = |id: &str, what: &str| -> Result<()> {
            if ids.contains(id) {
                Ok(())
            } else {
                invalid(format!("{what} references unknown client {id:?}"))
            }
        };
        for d in &self.drift_events {
            known(&d.client_id, "drift event")?;
            if d.round == 0 || d.new_cluster >= self.clusters.len() {
                return invalid(format!("drift event for {}: round must be >= 1 and cluster in range", d.client_id));
            }
        }
        let mut poisoned = BTreeSet::new();
        for p in &self.poison {
            known(&p.client_id, "poison entry")?;
            if !(0.0..=1.0).contains(&p.label_flip_rate) {
                return invalid(format!("poison rate for {} outside [0, 1]", p.client_id));
            }
            if !poisoned.insert(&p.client_id) {
                return invalid(format!("client {} poisoned twice", p.client_id));
            }
        }
        for f in &self.faults {
            known(&f.client_id, "fault")?;
            if f.round == 0 {
                return invalid("fault rounds start at 1");
            }
        }
        self.scheduler.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let mut communities = BTreeMap::new();
        for c in &self.communities {
            c.validate().map_err(|e| ScenarioError::Invalid(format!("community {}: {e}", c.community_id)))?;
            if c.base_model.n_features != self.n_features || c.base_model.n_classes != self.n_classes {
                return invalid(format!("community {}: base model does not fit the data shape", c.community_id));
            }
            if communities.insert(c.community_id.clone(), c).is_some() {
                return invalid(format!("community {} defined twice", c.community_id));
            }
        }
        if self.tasks.is_empty() {
            return invalid("at least one task is required");
        }
        let mut task_ids = BTreeSet::new();
        for t in &self.tasks {
            known(&t.client_id, "task")?;
            if t.task_id.trim().is_empty() || !task_ids.insert(&t.task_id) {
                return invalid(format!("task id {:?} is empty or repeated", t.task_id));
            }
            let Some(c) = communities.get(&t.community_id) else {
                return invalid(format!("task {} references unknown community {:?}", t.task_id, t.community_id));
            };
            let plan = t.plan.apply(&c.default_plan);
            plan.validate().map_err(|e| ScenarioError::Invalid(format!("task {}: {e}", t.task_id)))?;
        }
        let mut profiled = BTreeSet::new();
        for p in &self.clients {
            known(&p.client_id, "client profile")?;
            if !profiled.insert(&p.client_id) {
                return invalid(format!("client {} profiled twice", p.client_id));
            }
            if !(0.0..=1.0).contains(&p.quality_score) {
                return invalid(format!("client {}: quality_score outside [0, 1]", p.client_id));
            }
            p.resources.validate().map_err(|e| ScenarioError::Invalid(format!("client {}: {e}", p.client_id)))?;
            for n in &p.neighbors {
                known(&n.client_id, "neighbor")?;
            }
        }
        Ok(())
    }

    /// Cluster index of each client: contiguous blocks sized by weight,
    /// remainders to the largest fractional parts (ties to the lower index).
    pub fn cluster_assignment(&self) -> Vec<usize> {
        let n = self.n_clients;
        let exact: Vec<f64> = self.clusters.iter().map(|c| c.weight * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut left = n - counts.iter().sum::<usize>().min(n);
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).take(n).collect()
    }

    fn class_centers(&self) -> Vec<Vec<f64>> {
        let k = self.n_classes;
        (0..k)
            .map(|c| {
                let mut center = vec![0.0; self.n_features];
                if self.n_features == 1 {
                    center[0] = self.class_separation * (c as f64 - (k as f64 - 1.0) / 2.0);
                } else {
                    let angle = TAU * c as f64 / k as f64;
                    center[0] = self.class_separation * angle.cos();
                    center[1] = self.class_separation * angle.sin();
                }
                center
            })
            .collect()
    }
}

/// One simulated participant.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedClient {
    pub client_id: String,
    pub cluster: usize,
    /// Untransformed blob samples and their class.
    pub base_features: Vec<Vec<f64>>,
    pub base_labels: Vec<usize>,
    /// Rows whose label is flipped by poisoning.
    pub flipped: Vec<bool>,
    /// Data the client trains on (transformed, possibly poisoned).
    pub data: Dataset,
    /// Same rows with unpoisoned labels, for scoring.
    pub clean: Dataset,
    pub metadata: ParticipantMetadata,
    pub tasks: Vec<FlTask>,
    pub split_seed: u64,
    pub resources: ResourceProfile,
    pub neighbors: Vec<Neighbor>,
}

impl GeneratedClient {
    /// Re-derives the client's data for another cluster (drift).
    pub fn move_to_cluster(&mut self, spec: &ScenarioSpec, cluster: usize) -> Result<()> {
        let (data, clean) = transform(spec, cluster, &self.base_features, &self.base_labels, &self.flipped)?;
        let sig = DataSignature::from_dataset(&data, self.metadata.data_signature.quality_score)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        for t in &mut self.tasks {
            t.data_signature = sig.clone();
        }
        self.metadata.data_signature = sig;
        self.cluster = cluster;
        self.data = data;
        self.clean = clean;
        Ok(())
    }
}

fn transform(
    spec: &ScenarioSpec,
    cluster: usize,
    features: &[Vec<f64>],
    labels: &[usize],
    flipped: &[bool],
) -> Result<(Dataset, Dataset)> {
    let c = &spec.clusters[cluster];
    let rows: Vec<Vec<f64>> = features
        .iter()
        .map(|row| {
            if c.feature_shift.is_empty() {
                row.clone()
            } else {
                row.iter().zip(&c.feature_shift).map(|(x, s)| x + s).collect()
            }
        })
        .collect();
    let clean: Vec<usize> = labels.iter().map(|&y| if c.label_map.is_empty() { y } else { c.label_map[y] }).collect();
    let observed: Vec<usize> =
        clean.iter().zip(flipped).map(|(&y, &f)| if f { (y + 1) % spec.n_classes } else { y }).collect();
    let err = |e: crate::tinylearn::LearnError| ScenarioError::Invalid(e.to_string());
    let data = Dataset::new(rows.clone(), observed, spec.n_classes).map_err(err)?;
    let clean = Dataset::new(rows, clean, spec.n_classes).map_err(err)?;
    Ok((data, clean))
}

fn default_device() -> DeviceDescriptor {
    DeviceDescriptor {
        manufacturer: "acme".into(),
        model: "pulse-2".into(),
        device_type: "smartwatch".into(),
        firmware: "1.0".into(),
    }
}

/// Client key for per-client random streams.
fn client_seed(spec_seed: u64, client_id: &str, stream: &str) -> u64 {
    let mut key = spec_seed.to_le_bytes().to_vec();
    key.extend_from_slice(client_id.as_bytes());
    key.push(0);
    key.extend_from_slice(stream.as_bytes());
    digest64(&key)
}

/// Generates every client's data, metadata and tasks. Deterministic in the
/// `spec`; each client draws from its own seeded stream, so output does not
/// depend on generation order.
pub fn generate(spec: &ScenarioSpec) -> Result<Vec<GeneratedClient>> {
    spec.validate()?;
    let centers = spec.class_centers();
    let clusters = spec.cluster_assignment();
    let profiles: BTreeMap<&str, &ClientProfile> = spec.clients.iter().map(|p| (p.client_id.as_str(), p)).collect();
    let poison: BTreeMap<&str, f64> = spec.poison.iter().map(|p| (p.client_id.as_str(), p.label_flip_rate)).collect();
    let communities: BTreeMap<&str, &Community> =
        spec.communities.iter().map(|c| (c.community_id.as_str(), c)).collect();
    let mut out = Vec::with_capacity(spec.n_clients);
    for (i, &cluster) in clusters.iter().enumerate() {
        let id = client_id(i);
        let mut rng = ChaCha8Rng::seed_from_u64(client_seed(spec.seed, &id, "data"));
        let n = rng.random_range(spec.samples_per_client.min..=spec.samples_per_client.max);
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for j in 0..n {
            let y = j % spec.n_classes;
            let row: Vec<f64> = centers[y]
                .iter()
                .map(|c| {
                    let z: f64 = rng.sample(StandardNormal);
                    c + spec.blob_std * z
                })
                .collect();
            features.push(row);
            labels.push(y);
        }
        let rate = poison.get(id.as_str()).copied().unwrap_or(0.0);
        let mut flip_rng = ChaCha8Rng::seed_from_u64(client_seed(spec.seed, &id, "poison"));
        let flipped: Vec<bool> = (0..n).map(|_| rate > 0.0 && flip_rng.random_bool(rate)).collect();
        let (data, clean) = transform(spec, cluster, &features, &labels, &flipped)?;

        let profile = profiles.get(id.as_str());
        let device = profile.and_then(|p| p.device.clone()).unwrap_or_else(default_device);
        let quality = profile.map_or(1.0, |p| p.quality_score);
        let sig = DataSignature::from_dataset(&data, quality).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let metadata = ParticipantMetadata {
            participant_id: id.clone(),
            device: device.clone(),
            interests: profile.map(|p| p.interests.clone()).unwrap_or_default(),
            expertise: profile.map(|p| p.expertise.clone()).unwrap_or_default(),
            data_signature: sig.clone(),
            criteria: CollaborationCriteria::default(),
        };
        let tasks = spec
            .tasks
            .iter()
            .filter(|t| t.client_id == id)
            .map(|t| {
                let c = communities[t.community_id.as_str()];
                let device_type = t.device_type.clone().unwrap_or_else(|| device.device_type.clone());
                FlTask {
                    task_id: t.task_id.clone(),
                    client_id: id.clone(),
                    community_id: c.community_id.clone(),
                    config: ConfigSignature {
                        device_type: device_type.clone(),
                        fl_algorithm: c.fl_algorithm.clone(),
                        model_arch: c.base_model.clone(),
                        objective: c.objective.clone(),
                    },
                    plan: t.plan,
                    data_signature: sig.clone(),
                    targeted_device: device_type,
                }
            })
            .collect();
        out.push(GeneratedClient {
            client_id: id.clone(),
            cluster,
            base_features: features,
            base_labels: labels,
            flipped,
            data,
            clean,
            metadata,
            tasks,
            split_seed: client_seed(spec.seed, &id, "split"),
            resources: profile.map(|p| p.resources).unwrap_or_default(),
            neighbors: profile.map(|p| p.neighbors.clone()).unwrap_or_default(),
        });
    }
    Ok(out)
}
