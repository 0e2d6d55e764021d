//! Participant metadata, community admission, data signatures and cohort
//! formation by data-distribution similarity.

use std::collections::{BTreeMap, BTreeSet};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flcore::{FlCohort, FlPlan, FlPopulation};
use crate::tinylearn::{init_weights, Dataset, LearnError, ModelArch};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommunityError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid data signature: {0}")]
    InvalidSignature(String),
    #[error("community {0:?} already exists")]
    DuplicateCommunity(String),
    #[error("unknown community {0:?}")]
    UnknownCommunity(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

pub type Result<T> = std::result::Result<T, CommunityError>;

/// Compact statistical summary of a local dataset: per-feature moments and
/// the label distribution. Never carries samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DataSignature {
    pub per_feature_mean: Vec<f64>,
    pub per_feature_std: Vec<f64>,
    pub label_histogram: Vec<f64>,
    pub n_samples: usize,
    pub quality_score: f64,
}

impl DataSignature {
    pub fn new(
        per_feature_mean: Vec<f64>,
        per_feature_std: Vec<f64>,
        label_histogram: Vec<f64>,
        n_samples: usize,
        quality_score: f64,
    ) -> Result<Self> {
        let sig = Self { per_feature_mean, per_feature_std, label_histogram, n_samples, quality_score };
        sig.validate()?;
        Ok(sig)
    }

    /// Population moments of `data` (standard deviation divides by n).
    pub fn from_dataset(data: &Dataset, quality_score: f64) -> Result<Self> {
        let n = data.len() as f64;
        let f = data.n_features();
        let mut mean = vec![0.0; f];
        for row in data.features() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for row in data.features() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        let mut hist = vec![0.0; data.n_classes()];
        for &y in data.labels() {
            hist[y] += 1.0;
        }
        hist.iter_mut().for_each(|h| *h /= n);
        Self::new(mean, std, hist, data.len(), quality_score)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CommunityError::InvalidSignature(m));
        if self.per_feature_mean.len() != self.per_feature_std.len() {
            return bad(format!(
                "{} means but {} standard deviations",
                self.per_feature_mean.len(),
                self.per_feature_std.len()
            ));
        }
        if self.per_feature_mean.iter().any(|v| !v.is_finite()) {
            return bad("non-finite feature mean".into());
        }
        if self.per_feature_std.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("feature std must be finite and non-negative".into());
        }
        if self.label_histogram.is_empty() || self.label_histogram.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("label histogram entries must lie in [0, 1]".into());
        }
        let mass: f64 = self.label_histogram.iter().sum();
        if (mass - 1.0).abs() > 1e-9 {
            return bad(format!("label histogram sums to {mass}"));
        }
        if !(0.0..=1.0).contains(&self.quality_score) {
            return bad(format!("quality_score {} outside [0, 1]", self.quality_score));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.per_feature_mean.len()
    }

    pub fn n_classes(&self) -> usize {
        self.label_histogram.len()
    }

    /// Sample-count weighted mean of signatures (field by field).
    pub fn weighted_mean<'a>(sigs: impl IntoIterator<Item = &'a DataSignature>) -> Result<Self> {
        let sigs: Vec<&DataSignature> = sigs.into_iter().collect();
        let first = sigs.first().ok_or_else(|| CommunityError::InvalidSignature("no signatures to average".into()))?;
        for s in &sigs {
            check_compatible(first, s)?;
        }
        let total: usize = sigs.iter().map(|s| s.n_samples).sum();
        let weights: Vec<f64> = if total == 0 {
            vec![1.0 / sigs.len() as f64; sigs.len()]
        } else {
            sigs.iter().map(|s| s.n_samples as f64 / total as f64).collect()
        };
        let blend = |field: fn(&DataSignature) -> &Vec<f64>| -> Vec<f64> {
            (0..field(first).len()).map(|i| sigs.iter().zip(&weights).map(|(s, w)| w * field(s)[i]).sum()).collect()
        };
        let mut hist = blend(|s| &s.label_histogram);
        let mass: f64 = hist.iter().sum();
        hist.iter_mut().for_each(|h| *h /= mass);
        Ok(Self {
            per_feature_mean: blend(|s| &s.per_feature_mean),
            per_feature_std: blend(|s| &s.per_feature_std),
            label_histogram: hist,
            n_samples: total,
            quality_score: sigs.iter().zip(&weights).map(|(s, w)| w * s.quality_score).sum::<f64>().clamp(0.0, 1.0),
        })
    }
}

fn check_compatible(a: &DataSignature, b: &DataSignature) -> Result<()> {
    if a.n_features() != b.n_features() || a.n_classes() != b.n_classes() {
        return Err(CommunityError::Shape(format!(
            "signatures of {}x{} and {}x{} (features x classes)",
            a.n_features(),
            a.n_classes(),
            b.n_features(),
            b.n_classes()
        )));
    }
    Ok(())
}

fn squash(x: f64) -> f64 {
    x / (1.0 + x)
}

/// Similarity in [0, 1] between two data signatures.
///
/// `1 - (0.5 * d_feat + 0.5 * d_lab)` where `d_feat` averages the squashed
/// (`x / (1 + x)`) absolute gaps of every feature mean and std, and `d_lab`
/// is the total-variation distance between label histograms.
pub fn similarity(a: &DataSignature, b: &DataSignature) -> Result<f64> {
    check_compatible(a, b)?;
    let gaps = a
        .per_feature_mean
        .iter()
        .zip(&b.per_feature_mean)
        .chain(a.per_feature_std.iter().zip(&b.per_feature_std))
        .map(|(x, y)| squash((x - y).abs()));
    let terms = 2 * a.n_features();
    let d_feat = if terms == 0 { 0.0 } else { gaps.sum::<f64>() / terms as f64 };
    let d_lab = 0.5 * a.label_histogram.iter().zip(&b.label_histogram).map(|(p, q)| (p - q).abs()).sum::<f64>();
    Ok((1.0 - (0.5 * d_feat + 0.5 * d_lab)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DeviceDescriptor {
    pub manufacturer: String,
    pub model: String,
    pub device_type: String,
    pub firmware: String,
}

/// Admission requirements a community (or participant) places on others.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CollaborationCriteria {
    #[serde(default)]
    pub required_tags: BTreeSet<String>,
    #[serde(default)]
    pub forbidden_tags: BTreeSet<String>,
    #[serde(default)]
    pub min_data_quality: f64,
    #[serde(default)]
    pub min_samples: usize,
}

fn normalize_tags(tags: &BTreeSet<String>) -> BTreeSet<String> {
    tags.iter().map(|t| t.trim().to_lowercase()).filter(|t| !t.is_empty()).collect()
}

impl CollaborationCriteria {
    pub fn normalized(&self) -> Self {
        Self {
            required_tags: normalize_tags(&self.required_tags),
            forbidden_tags: normalize_tags(&self.forbidden_tags),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.normalized();
        if let Some(tag) = norm.required_tags.intersection(&norm.forbidden_tags).next() {
            return Err(CommunityError::InvalidMetadata(format!("tag {tag:?} is both required and forbidden")));
        }
        if !(0.0..=1.0).contains(&self.min_data_quality) {
            return Err(CommunityError::InvalidMetadata(format!(
                "min_data_quality {} outside [0, 1]",
                self.min_data_quality
            )));
        }
        Ok(())
    }
}

/// Self-description a participant shares when registering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ParticipantMetadata {
    pub participant_id: String,
    pub device: DeviceDescriptor,
    #[serde(default)]
    pub interests: BTreeSet<String>,
    #[serde(default)]
    pub expertise: BTreeSet<String>,
    pub data_signature: DataSignature,
    #[serde(default)]
    pub criteria: CollaborationCriteria,
}

impl ParticipantMetadata {
    /// Copy with tag sets trimmed and lowercased.
    pub fn normalized(&self) -> Self {
        Self {
            interests: normalize_tags(&self.interests),
            expertise: normalize_tags(&self.expertise),
            criteria: self.criteria.normalized(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.participant_id.trim().is_empty() {
            return Err(CommunityError::InvalidMetadata("participant_id is empty".into()));
        }
        self.criteria.validate()?;
        self.data_signature.validate()?;
        Ok(())
    }

    fn tags(&self) -> BTreeSet<String> {
        self.interests.union(&self.expertise).cloned().collect()
    }
}

/// A stakeholder-created grouping: purpose, objective, admission criteria,
/// base model and default plan for tasks submitted to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Community {
    pub community_id: String,
    pub creator_id: String,
    pub purpose: String,
    pub objective: String,
    #[serde(default = "default_algorithm")]
    pub fl_algorithm: String,
    #[serde(default)]
    pub criteria: CollaborationCriteria,
    pub base_model: ModelArch,
    pub default_plan: FlPlan,
    /// Seed for the first global model of each cohort.
    #[serde(default)]
    pub seed: u64,
}

fn default_algorithm() -> String {
    "fedavg".to_string()
}

impl Community {
    pub fn validate(&self) -> Result<()> {
        if self.community_id.trim().is_empty() {
            return Err(CommunityError::Config("community_id is empty".into()));
        }
        self.base_model.validate()?;
        self.criteria.validate()?;
        self.default_plan.validate().map_err(|e| CommunityError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Rule that rejected a participant; the first failing one is reported.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "rule", content = "detail", rename_all = "snake_case")]
pub enum RejectReason {
    RequiredTags(String),
    ForbiddenTags(String),
    MinDataQuality,
    MinSamples,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::RequiredTags(t) => write!(f, "required_tags (missing {t:?})"),
            RejectReason::ForbiddenTags(t) => write!(f, "forbidden_tags (has {t:?})"),
            RejectReason::MinDataQuality => f.write_str("min_data_quality"),
            RejectReason::MinSamples => f.write_str("min_samples"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Admit,
    Reject(RejectReason),
}

/// Checks a participant against a community's criteria, in order: required
/// tags, forbidden tags, data quality, sample count.
pub fn admit(meta: &ParticipantMetadata, community: &Community) -> Admission {
    let meta = meta.normalized();
    let criteria = community.criteria.normalized();
    let tags = meta.tags();
    if let Some(missing) = criteria.required_tags.iter().find(|t| !tags.contains(*t)) {
        return Admission::Reject(RejectReason::RequiredTags(missing.clone()));
    }
    if let Some(hit) = criteria.forbidden_tags.iter().find(|t| tags.contains(*t)) {
        return Admission::Reject(RejectReason::ForbiddenTags(hit.clone()));
    }
    if meta.data_signature.quality_score < criteria.min_data_quality {
        return Admission::Reject(RejectReason::MinDataQuality);
    }
    if meta.data_signature.n_samples < criteria.min_samples {
        return Admission::Reject(RejectReason::MinSamples);
    }
    Admission::Admit
}

#[derive(Debug, Clone, Default)]
pub struct CommunityRegistry {
    communities: BTreeMap<String, Community>,
}

impl CommunityRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, community: Community) -> Result<()> {
        community.validate()?;
        if self.communities.contains_key(&community.community_id) {
            return Err(CommunityError::DuplicateCommunity(community.community_id));
        }
        self.communities.insert(community.community_id.clone(), community);
        Ok(())
    }

    pub fn get(&self, community_id: &str) -> Result<&Community> {
        self.communities.get(community_id).ok_or_else(|| CommunityError::UnknownCommunity(community_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Community> {
        self.communities.values()
    }
}

/// How a population is split into cohorts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CohortPolicy {
    /// Greedy agglomeration at a similarity threshold in (0, 1).
    Similarity { threshold: f64 },
    /// One cohort per population (plain FedAvg baseline).
    Global,
}

pub fn cohort_id(population_id: &str, index: usize) -> String {
    format!("{population_id}/cohort-{index:03}")
}

fn cohort_index(cohort_id: &str) -> Option<usize> {
    cohort_id.rsplit_once("/cohort-").and_then(|(_, n)| n.parse().ok())
}

/// Splits a population into cohorts at similarity threshold `threshold`.
///
/// Tasks are visited in ascending id. Each joins the existing cohort whose
/// centroid is most similar, provided that similarity is at least the
/// threshold (ties go to the smallest cohort id); otherwise it opens a new
/// cohort. Centroids are sample-weighted means of member signatures. Every
/// cohort starts from `init_weights(arch, seed)`.
pub fn form_cohorts(
    population: &FlPopulation,
    signatures: &BTreeMap<String, DataSignature>,
    threshold: f64,
    seed: u64,
) -> Result<Vec<FlCohort>> {
    form_cohorts_with(population, signatures, CohortPolicy::Similarity { threshold }, seed)
}

pub fn form_cohorts_with(
    population: &FlPopulation,
    signatures: &BTreeMap<String, DataSignature>,
    policy: CohortPolicy,
    seed: u64,
) -> Result<Vec<FlCohort>> {
    let threshold = match policy {
        CohortPolicy::Similarity { threshold } => {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(CommunityError::Config(format!("cohort threshold {threshold} outside (0, 1)")));
            }
            threshold
        }
        CohortPolicy::Global => 0.0,
    };
    let members: BTreeSet<&String> = population.member_task_ids.iter().collect();
    let given: BTreeSet<&String> = signatures.keys().collect();
    if members != given {
        return Err(CommunityError::Config(format!(
            "signatures do not cover exactly the members of {}",
            population.population_id
        )));
    }
    let arch = &population.config.model_arch;
    for sig in signatures.values() {
        if sig.n_features() != arch.n_features || sig.n_classes() != arch.n_classes {
            return Err(CommunityError::Shape(format!("signature does not fit {}", arch.arch_id)));
        }
    }

    struct Draft<'a> {
        members: Vec<(&'a String, &'a DataSignature)>,
        centroid: DataSignature,
    }
    let mut drafts: Vec<Draft> = Vec::new();
    for (task_id, sig) in signatures {
        let mut best: Option<(usize, f64)> = None;
        for (i, draft) in drafts.iter().enumerate() {
            let s = similarity(&draft.centroid, sig)?;
            if s >= threshold && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        match best {
            Some((i, _)) => {
                let draft = &mut drafts[i];
                draft.members.push((task_id, sig));
                draft.centroid = DataSignature::weighted_mean(draft.members.iter().map(|(_, s)| *s))?;
            }
            None => drafts.push(Draft { members: vec![(task_id, sig)], centroid: sig.clone() }),
        }
    }
    let weights = init_weights(arch, seed)?;
    Ok(drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| FlCohort {
            cohort_id: cohort_id(&population.population_id, i + 1),
            population_id: population.population_id.clone(),
            member_task_ids: d.members.iter().map(|(t, _)| (*t).clone()).collect(),
            centroid: d.centroid,
            global_weights: weights.clone(),
            round: 0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Migration {
    pub task_id: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub migrations: Vec<Migration>,
    pub new_cohorts: Vec<String>,
    pub retired_cohorts: Vec<String>,
}

/// Re-runs cohort formation on updated signatures and carries cohort
/// identity over from the previous split.
///
/// Each new cohort, in order, inherits the id, global model and round of the
/// not-yet-claimed previous cohort it shares the most members with (ties to
/// the smallest id). Cohorts with no overlap get fresh ids and a model from
/// `init_weights`. A task migrates when its cohort id changes.
pub fn recluster(
    population: &FlPopulation,
    signatures: &BTreeMap<String, DataSignature>,
    policy: CohortPolicy,
    seed: u64,
) -> Result<(Vec<FlCohort>, MigrationReport)> {
    let fresh = form_cohorts_with(population, signatures, policy, seed)?;
    let previous = &population.cohorts;
    let mut claimed = BTreeSet::new();
    let mut next_index = previous.iter().filter_map(|c| cohort_index(&c.cohort_id)).max().unwrap_or(0) + 1;
    let mut report = MigrationReport::default();
    let mut result = Vec::with_capacity(fresh.len());
    for mut cohort in fresh {
        let mut best: Option<(&FlCohort, usize)> = None;
        let mut candidates: Vec<&FlCohort> = previous.iter().filter(|p| !claimed.contains(&p.cohort_id)).collect();
        candidates.sort_by(|a, b| a.cohort_id.cmp(&b.cohort_id));
        for prev in candidates {
            let overlap = prev.member_task_ids.intersection(&cohort.member_task_ids).count();
            if overlap > 0 && best.is_none_or(|(_, o)| overlap > o) {
                best = Some((prev, overlap));
            }
        }
        match best {
            Some((prev, _)) => {
                claimed.insert(prev.cohort_id.clone());
                cohort.cohort_id = prev.cohort_id.clone();
                cohort.global_weights = prev.global_weights.clone();
                cohort.round = prev.round;
            }
            None => {
                cohort.cohort_id = cohort_id(&population.population_id, next_index);
                next_index += 1;
                report.new_cohorts.push(cohort.cohort_id.clone());
            }
        }
        result.push(cohort);
    }
    result.sort_by(|a, b| a.cohort_id.cmp(&b.cohort_id));
    report.retired_cohorts =
        previous.iter().filter(|p| !claimed.contains(&p.cohort_id)).map(|p| p.cohort_id.clone()).collect();
    for prev in previous {
        for task_id in &prev.member_task_ids {
            let Some(now) = result.iter().find(|c| c.member_task_ids.contains(task_id)) else {
                continue;
            };
            if now.cohort_id != prev.cohort_id {
                report.migrations.push(Migration {
                    task_id: task_id.clone(),
                    from: prev.cohort_id.clone(),
                    to: now.cohort_id.clone(),
                });
            }
        }
    }
    report.migrations.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok((result, report))
}
