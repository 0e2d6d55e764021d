//! Coordinator/client wire protocol.
//!
//! A frame is a 4-byte big-endian length followed by a UTF-8 JSON document
//! `{"correlation_id", "msg_type", "payload", "version"}` with keys in
//! lexicographic order at every level. Model weights travel as base64 of
//! little-endian `f64`s. Decoding is strict: anything unexpected yields a
//! [`ProtocolError`], never a panic.

pub mod schema;
pub mod sim;
pub mod socket;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::community::{Community, ParticipantMetadata, RejectReason};
use crate::flcore::{FlPlan, FlTask, ModelUpdate};
use crate::tinylearn::{EvalMetrics, ModelArch, WeightVector};

pub const PROTOCOL_VERSION: u64 = 1;
/// Largest accepted JSON body.
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u64),
    #[error("unknown message type {0:?}")]
    UnknownMsgType(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
pub enum MsgType {
    Register,
    RegisterAck,
    ListCommunities,
    CommunityList,
    SubmitTask,
    TaskAck,
    TrainRequest,
    ModelUpdateMsg,
    MetricsAck,
    Error,
}

impl MsgType {
    pub const ALL: [MsgType; 10] = [
        MsgType::Register,
        MsgType::RegisterAck,
        MsgType::ListCommunities,
        MsgType::CommunityList,
        MsgType::SubmitTask,
        MsgType::TaskAck,
        MsgType::TrainRequest,
        MsgType::ModelUpdateMsg,
        MsgType::MetricsAck,
        MsgType::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Register => "Register",
            MsgType::RegisterAck => "RegisterAck",
            MsgType::ListCommunities => "ListCommunities",
            MsgType::CommunityList => "CommunityList",
            MsgType::SubmitTask => "SubmitTask",
            MsgType::TaskAck => "TaskAck",
            MsgType::TrainRequest => "TrainRequest",
            MsgType::ModelUpdateMsg => "ModelUpdateMsg",
            MsgType::MetricsAck => "MetricsAck",
            MsgType::Error => "Error",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == name)
    }

    /// The non-error reply a request of this type expects. `TrainRequest` is
    /// answered by the update itself, which the coordinator then acknowledges.
    pub fn response_type(self) -> Option<MsgType> {
        match self {
            MsgType::Register => Some(MsgType::RegisterAck),
            MsgType::ListCommunities => Some(MsgType::CommunityList),
            MsgType::SubmitTask => Some(MsgType::TaskAck),
            MsgType::TrainRequest => Some(MsgType::ModelUpdateMsg),
            MsgType::ModelUpdateMsg => Some(MsgType::MetricsAck),
            _ => None,
        }
    }
}

/// Model weights on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WireWeights {
    pub arch_id: String,
    /// Base64 (standard alphabet, padded) of little-endian IEEE-754 doubles.
    pub values: String,
}

impl WireWeights {
    pub fn encode(w: &WeightVector) -> Self {
        let mut bytes = Vec::with_capacity(w.len() * 8);
        for v in w.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self { arch_id: w.arch_id().to_string(), values: BASE64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<WeightVector, ProtocolError> {
        let arch = ModelArch::from_id(&self.arch_id).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        let bytes =
            BASE64.decode(&self.values).map_err(|e| ProtocolError::Malformed(format!("weights base64: {e}")))?;
        if bytes.len() != arch.parameter_count() * 8 {
            return Err(ProtocolError::Malformed(format!(
                "{} needs {} weight bytes, got {}",
                self.arch_id,
                arch.parameter_count() * 8,
                bytes.len()
            )));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        WeightVector::new(self.arch_id.clone(), values).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Register {
    pub metadata: ParticipantMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RegisterAck {
    pub client_id: String,
    pub session_token: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ListCommunities {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CommunityList {
    pub communities: Vec<Community>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SubmitTask {
    pub session_token: String,
    pub task: FlTask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TaskAck {
    pub task_id: String,
    pub population_id: String,
}

/// Coordinator asks a client to run one round of local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub task_id: String,
    pub cohort_id: String,
    pub round: u64,
    pub weights: WireWeights,
    pub plan: FlPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelUpdateMsg {
    pub task_id: String,
    pub cohort_id: String,
    pub round: u64,
    pub weights: WireWeights,
    pub n_samples: usize,
    pub pre_metrics: EvalMetrics,
    pub post_metrics: EvalMetrics,
    pub executor_id: String,
}

impl ModelUpdateMsg {
    pub fn from_update(u: &ModelUpdate) -> Self {
        Self {
            task_id: u.task_id.clone(),
            cohort_id: u.cohort_id.clone(),
            round: u.round,
            weights: WireWeights::encode(&u.weights),
            n_samples: u.n_samples,
            pre_metrics: u.pre_metrics,
            post_metrics: u.post_metrics,
            executor_id: u.executor_id.clone(),
        }
    }

    pub fn to_update(&self) -> Result<ModelUpdate, ProtocolError> {
        Ok(ModelUpdate {
            task_id: self.task_id.clone(),
            cohort_id: self.cohort_id.clone(),
            round: self.round,
            weights: self.weights.decode()?,
            n_samples: self.n_samples,
            pre_metrics: self.pre_metrics,
            post_metrics: self.post_metrics,
            executor_id: self.executor_id.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MetricsAck {
    pub task_id: String,
    pub round: u64,
    /// True when the coordinator already held this (task, round) update.
    pub duplicate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnsupportedVersion,
    UnexpectedMessage,
    Unregistered,
    InvalidMetadata,
    Rejected,
    Conflict,
    InvalidTask,
    TaskError,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ErrorMsg {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register(Register),
    RegisterAck(RegisterAck),
    ListCommunities(ListCommunities),
    CommunityList(CommunityList),
    SubmitTask(SubmitTask),
    TaskAck(TaskAck),
    TrainRequest(TrainRequest),
    ModelUpdateMsg(ModelUpdateMsg),
    MetricsAck(MetricsAck),
    Error(ErrorMsg),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Register(_) => MsgType::Register,
            Message::RegisterAck(_) => MsgType::RegisterAck,
            Message::ListCommunities(_) => MsgType::ListCommunities,
            Message::CommunityList(_) => MsgType::CommunityList,
            Message::SubmitTask(_) => MsgType::SubmitTask,
            Message::TaskAck(_) => MsgType::TaskAck,
            Message::TrainRequest(_) => MsgType::TrainRequest,
            Message::ModelUpdateMsg(_) => MsgType::ModelUpdateMsg,
            Message::MetricsAck(_) => MsgType::MetricsAck,
            Message::Error(_) => MsgType::Error,
        }
    }

    fn payload_value(&self) -> Result<Value, ProtocolError> {
        let v = match self {
            Message::Register(p) => serde_json::to_value(p),
            Message::RegisterAck(p) => serde_json::to_value(p),
            Message::ListCommunities(p) => serde_json::to_value(p),
            Message::CommunityList(p) => serde_json::to_value(p),
            Message::SubmitTask(p) => serde_json::to_value(p),
            Message::TaskAck(p) => serde_json::to_value(p),
            Message::TrainRequest(p) => serde_json::to_value(p),
            Message::ModelUpdateMsg(p) => serde_json::to_value(p),
            Message::MetricsAck(p) => serde_json::to_value(p),
            Message::Error(p) => serde_json::to_value(p),
        };
        v.map_err(|e| ProtocolError::Malformed(e.to_string()))
    }

    fn from_payload(msg_type: MsgType, payload: Value) -> Result<Self, ProtocolError> {
        fn parse<T: DeserializeOwned>(v: Value) -> Result<T, ProtocolError> {
            serde_json::from_value(v).map_err(|e| ProtocolError::Malformed(e.to_string()))
        }
        Ok(match msg_type {
            MsgType::Register => Message::Register(parse(payload)?),
            MsgType::RegisterAck => Message::RegisterAck(parse(payload)?),
            MsgType::ListCommunities => Message::ListCommunities(parse(payload)?),
            MsgType::CommunityList => Message::CommunityList(parse(payload)?),
            MsgType::SubmitTask => Message::SubmitTask(parse(payload)?),
            MsgType::TaskAck => Message::TaskAck(parse(payload)?),
            MsgType::TrainRequest => {
                let req: TrainRequest = parse(payload)?;
                req.weights.decode()?;
                Message::TrainRequest(req)
            }
            MsgType::ModelUpdateMsg => {
                let upd: ModelUpdateMsg = parse(payload)?;
                upd.weights.decode()?;
                Message::ModelUpdateMsg(upd)
            }
            MsgType::MetricsAck => Message::MetricsAck(parse(payload)?),
            MsgType::Error => Message::Error(parse(payload)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub version: u64,
    pub correlation_id: u64,
    pub message: Message,
}

impl Envelope {
    pub fn new(correlation_id: u64, message: Message) -> Self {
        Self { version: PROTOCOL_VERSION, correlation_id, message }
    }

    pub fn msg_type(&self) -> MsgType {
        self.message.msg_type()
    }

    /// A reply carrying this envelope's correlation id.
    pub fn reply(&self, message: Message) -> Self {
        Self::new(self.correlation_id, message)
    }

    pub fn error(correlation_id: u64, code: ErrorCode, message: impl Into<String>) -> Self {
        Self::new(correlation_id, Message::Error(ErrorMsg { code, message: message.into(), reject_reason: None }))
    }
}

/// JSON body of an envelope, keys sorted.
pub fn encode_body(env: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    let mut doc = serde_json::Map::new();
    doc.insert("correlation_id".into(), Value::from(env.correlation_id));
    doc.insert("msg_type".into(), Value::from(env.msg_type().as_str()));
    doc.insert("payload".into(), env.message.payload_value()?);
    doc.insert("version".into(), Value::from(env.version));
    let body = serde_json::to_vec(&Value::Object(doc)).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if body.len() > MAX_PAYLOAD {
        return Err(ProtocolError::TooLarge(body.len()));
    }
    Ok(body)
}

/// Length-prefixed frame for `env`.
pub fn encode(env: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    let body = encode_body(env)?;
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Decodes exactly one frame.
pub fn decode(bytes: &[u8]) -> Result<Envelope, ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Truncated { needed: 4, available: bytes.len() });
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::TooLarge(len));
    }
    let body = &bytes[4..];
    if body.len() < len {
        return Err(ProtocolError::Truncated { needed: 4 + len, available: bytes.len() });
    }
    if body.len() > len {
        return Err(ProtocolError::Malformed(format!("{} trailing bytes after frame", body.len() - len)));
    }
    decode_body(body)
}

/// Decodes a JSON body (no length prefix).
pub fn decode_body(body: &[u8]) -> Result<Envelope, ProtocolError> {
    if body.len() > MAX_PAYLOAD {
        return Err(ProtocolError::TooLarge(body.len()));
    }
    let doc: Value = serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let Value::Object(mut doc) = doc else {
        return Err(ProtocolError::Malformed("envelope is not a JSON object".into()));
    };
    // Version first, so a future envelope layout is reported as such.
    let version = match doc.remove("version") {
        Some(Value::Number(n)) => {
            n.as_u64().ok_or_else(|| ProtocolError::Malformed(format!("version {n} is not an unsigned integer")))?
        }
        Some(_) => return Err(ProtocolError::Malformed("version is not a number".into())),
        None => return Err(ProtocolError::Malformed("missing version".into())),
    };
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let msg_type = match doc.remove("msg_type") {
        Some(Value::String(s)) => MsgType::parse(&s).ok_or(ProtocolError::UnknownMsgType(s))?,
        Some(_) => return Err(ProtocolError::Malformed("msg_type is not a string".into())),
        None => return Err(ProtocolError::Malformed("missing msg_type".into())),
    };
    let correlation_id = match doc.remove("correlation_id") {
        Some(Value::Number(n)) => {
            n.as_u64().ok_or_else(|| ProtocolError::Malformed(format!("correlation_id {n} is not a u64")))?
        }
        _ => return Err(ProtocolError::Malformed("missing or non-numeric correlation_id".into())),
    };
    let payload = doc.remove("payload").ok_or_else(|| ProtocolError::Malformed("missing payload".into()))?;
    if let Some(extra) = doc.keys().next() {
        return Err(ProtocolError::Malformed(format!("unexpected envelope field {extra:?}")));
    }
    Ok(Envelope { version, correlation_id, message: Message::from_payload(msg_type, payload)? })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::community::tests::{community, sig};
    use crate::community::{CollaborationCriteria, DeviceDescriptor};
    use crate::flcore::tests::task;
    use proptest::prelude::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn frame_with_body(body: &str) -> Vec<u8> {
        let mut f = (body.len() as u32).to_be_bytes().to_vec();
        f.extend_from_slice(body.as_bytes());
        f
    }

    pub(crate) fn sample_metadata() -> ParticipantMetadata {
        ParticipantMetadata {
            participant_id: "client-01".into(),
            device: DeviceDescriptor {
                manufacturer: "acme".into(),
                model: "pulse-2".into(),
                device_type: "smartwatch".into(),
                firmware: "4.1".into(),
            },
            interests: ["fitness".to_string()].into(),
            expertise: BTreeSet::new(),
            data_signature: sig(&[0.5, -1.0], &[1.0, 2.0], &[0.25, 0.75], 120),
            criteria: CollaborationCriteria::default(),
        }
    }

    pub(crate) fn sample_envelopes() -> Vec<Envelope> {
        let w = crate::tinylearn::init_weights(&ModelArch::logistic(2, 2), 3).unwrap();
        let plan = community(CollaborationCriteria::default()).default_plan;
        let metrics = EvalMetrics { loss: 0.25, accuracy: 0.875, n_samples: 8 };
        vec![
            Envelope::new(1, Message::Register(Register { metadata: sample_metadata() })),
            Envelope::new(
                1,
                Message::RegisterAck(RegisterAck { client_id: "client-01".into(), session_token: "s".into() }),
            ),
            Envelope::new(2, Message::ListCommunities(ListCommunities {})),
            Envelope::new(
                2,
                Message::CommunityList(CommunityList {
                    communities: vec![community(CollaborationCriteria::default())],
                }),
            ),
            Envelope::new(
                3,
                Message::SubmitTask(SubmitTask { session_token: "s".into(), task: task("M2.1", "watch", "hr") }),
            ),
            Envelope::new(3, Message::TaskAck(TaskAck { task_id: "M2.1".into(), population_id: "pop-1".into() })),
            Envelope::new(
                4,
                Message::TrainRequest(TrainRequest {
                    task_id: "M2.1".into(),
                    cohort_id: "c".into(),
                    round: 1,
                    weights: WireWeights::encode(&w),
                    plan,
                }),
            ),
            Envelope::new(
                4,
                Message::ModelUpdateMsg(ModelUpdateMsg {
                    task_id: "M2.1".into(),
                    cohort_id: "c".into(),
                    round: 1,
                    weights: WireWeights::encode(&w),
                    n_samples: 90,
                    pre_metrics: metrics,
                    post_metrics: EvalMetrics { loss: f64::NAN, ..metrics },
                    executor_id: "client-02".into(),
                }),
            ),
            Envelope::new(5, Message::MetricsAck(MetricsAck { task_id: "M2.1".into(), round: 1, duplicate: false })),
            Envelope::new(
                u64::MAX,
                Message::Error(ErrorMsg {
                    code: ErrorCode::Rejected,
                    message: "no".into(),
                    reject_reason: Some(RejectReason::MinSamples),
                }),
            ),
        ]
    }

    /// NaN != NaN, so compare envelopes through their encoding.
    fn same(a: &Envelope, b: &Envelope) -> bool {
        encode(a).unwrap() == encode(b).unwrap()
    }

    #[test]
    fn every_message_type_round_trips() {
        let envs = sample_envelopes();
        let types: BTreeSet<MsgType> = envs.iter().map(Envelope::msg_type).collect();
        assert_eq!(types.len(), MsgType::ALL.len());
        for env in envs {
            let bytes = encode(&env).unwrap();
            let back = decode(&bytes).unwrap();
            assert!(same(&env, &back), "{:?}", env.msg_type());
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn register_round_trip_is_field_equal() {
        let env = sample_envelopes().remove(0);
        assert_eq!(decode(&encode(&env).unwrap()).unwrap(), env);
    }

    #[test]
    fn zero_weight_is_eight_zero_bytes() {
        // logreg-1x1 has two parameters: one weight and one bias.
        let w = WeightVector::new("logreg-1x1", vec![0.0, 0.0]).unwrap();
        let wire = WireWeights::encode(&w);
        assert_eq!(wire.values, "AAAAAAAAAAAAAAAAAAAAAA==");
        assert_eq!(BASE64.decode(&wire.values).unwrap(), vec![0u8; 16]);
        let one = WeightVector::new("logreg-1x1", vec![1.0, 0.0]).unwrap();
        assert_eq!(&BASE64.decode(WireWeights::encode(&one).values).unwrap()[..8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn keys_are_sorted() {
        let bytes = encode(&sample_envelopes()[4]).unwrap();
        let text = std::str::from_utf8(&bytes[4..]).unwrap();
        assert!(
            text.starts_with(r#"{"correlation_id":3,"msg_type":"SubmitTask","payload":{"session_token""#),
            "{text}"
        );
        assert!(text.ends_with(r#","version":1}"#));
    }

    #[test]
    fn truncated_frames() {
        let bytes = encode(&sample_envelopes()[2]).unwrap();
        for cut in [0, 1, 3, 4, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(ProtocolError::Truncated { .. })), "cut {cut}");
        }
    }

    #[test]
    fn version_two_is_unsupported() {
        let f = frame_with_body(r#"{"correlation_id":1,"msg_type":"ListCommunities","payload":{},"version":2}"#);
        assert_eq!(decode(&f), Err(ProtocolError::UnsupportedVersion(2)));
    }

    #[test]
    fn strictness() {
        let cases = [
            (r#"{"correlation_id":1,"msg_type":"Gossip","payload":{},"version":1}"#, "unknown"),
            (r#"{"correlation_id":1,"msg_type":"ListCommunities","payload":{"x":1},"version":1}"#, "field"),
            (r#"{"correlation_id":1,"msg_type":"ListCommunities","payload":{},"version":1,"extra":0}"#, "envelope"),
            (r#"{"correlation_id":-1,"msg_type":"ListCommunities","payload":{},"version":1}"#, "corr"),
            (r#"{"msg_type":"ListCommunities","payload":{},"version":1}"#, "corr"),
            (r#"[1,2,3]"#, "array"),
            ("\u{0}", "junk"),
        ];
        for (body, label) in cases {
            let err = decode(&frame_with_body(body)).unwrap_err();
            assert!(matches!(err, ProtocolError::Malformed(_) | ProtocolError::UnknownMsgType(_)), "{label}: {err:?}");
        }
        let mut trailing = encode(&sample_envelopes()[2]).unwrap();
        trailing.push(b' ');
        assert!(matches!(decode(&trailing), Err(ProtocolError::Malformed(_))));
    }

    #[test]
    fn weights_are_checked_against_arch() {
        let body = r#"{"correlation_id":1,"msg_type":"TrainRequest","payload":{"cohort_id":"c","plan":{"batch_size":1,"epochs":1,"eval_holdout_fraction":0.5,"learning_rate":0.1,"rounds_target":1,"shuffle_seed":0},"round":1,"task_id":"t","weights":{"arch_id":"logreg-1x1","values":"AAAAAAAAAAA="}},"version":1}"#;
        assert!(matches!(decode(&frame_with_body(body)), Err(ProtocolError::Malformed(_))));
    }

    #[test]
    fn oversized_frames_rejected_without_allocation() {
        let mut f = ((MAX_PAYLOAD + 1) as u32).to_be_bytes().to_vec();
        f.extend_from_slice(b"{}");
        assert_eq!(decode(&f), Err(ProtocolError::TooLarge(MAX_PAYLOAD + 1)));
    }

    #[test]
    fn oversized_payload_rejected_on_encode() {
        let communities = vec![community(CollaborationCriteria::default()); 1];
        let mut c = communities[0].clone();
        c.purpose = "x".repeat(MAX_PAYLOAD);
        let env = Envelope::new(1, Message::CommunityList(CommunityList { communities: vec![c] }));
        assert!(matches!(encode(&env), Err(ProtocolError::TooLarge(_))));
    }

    #[test]
    fn request_response_pairs() {
        for t in MsgType::ALL {
            if let Some(r) = t.response_type() {
                assert_ne!(r, MsgType::Error);
                assert_ne!(r, t);
            }
        }
        let requests: Vec<MsgType> = MsgType::ALL.into_iter().filter(|t| t.response_type().is_some()).collect();
        assert_eq!(requests.len(), 5);
    }

    #[test]
    fn random_bytes_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let valid: Vec<Vec<u8>> = sample_envelopes().iter().map(|e| encode(e).unwrap()).collect();
        for i in 0..10_000 {
            let bytes = if i % 2 == 0 {
                let mut b = vec![0u8; rng.random_range(0..64)];
                rng.fill_bytes(&mut b);
                b
            } else {
                let mut b = valid[i % valid.len()].clone();
                for _ in 0..rng.random_range(1..4) {
                    let at = rng.random_range(0..b.len());
                    b[at] = rng.random();
                }
                b
            };
            let _ = decode(&bytes);
        }
    }

    fn text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 ._\\-\u{e9}\u{4e2d}\"\\\\]{0,12}"
    }

    fn real() -> impl Strategy<Value = f64> {
        prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), -1e3f64..1e3, Just(-0.0), Just(0.0)]
    }

    fn metrics() -> impl Strategy<Value = EvalMetrics> {
        (prop_oneof![real(), Just(f64::NAN), Just(f64::INFINITY)], 0.0f64..=1.0, 0usize..10_000)
            .prop_map(|(loss, accuracy, n_samples)| EvalMetrics { loss, accuracy, n_samples })
    }

    fn weights() -> impl Strategy<Value = WireWeights> {
        (1usize..4, 0usize..3, 1usize..4)
            .prop_flat_map(|(f, h, c)| {
                let arch = if h == 0 { ModelArch::logistic(f, c) } else { ModelArch::mlp(f, h, c) };
                let n = arch.parameter_count();
                (Just(arch), prop::collection::vec(prop_oneof![real(), Just(f64::NAN)], n))
            })
            .prop_map(|(arch, values)| WireWeights::encode(&WeightVector::new(arch.arch_id, values).unwrap()))
    }

    fn signature() -> impl Strategy<Value = crate::community::DataSignature> {
        (prop::collection::vec(real(), 2), prop::collection::vec(0.0f64..1e6, 2), 0usize..1000, 0.0f64..=1.0).prop_map(
            |(mean, std, n, q)| crate::community::DataSignature {
                per_feature_mean: mean,
                per_feature_std: std,
                label_histogram: vec![0.25, 0.75],
                n_samples: n,
                quality_score: q,
            },
        )
    }

    fn tags() -> impl Strategy<Value = BTreeSet<String>> {
        prop::collection::btree_set(text(), 0..3)
    }

    fn plan() -> impl Strategy<Value = FlPlan> {
        (1u32..100, 1usize..512, real(), any::<u64>(), real(), 1u32..100).prop_map(|(e, b, lr, s, f, r)| FlPlan {
            epochs: e,
            batch_size: b,
            learning_rate: lr,
            shuffle_seed: s,
            eval_holdout_fraction: f,
            rounds_target: r,
        })
    }

    fn message() -> impl Strategy<Value = Message> {
        let meta = (text(), tags(), tags(), signature(), tags(), real(), any::<usize>()).prop_map(
            |(id, interests, expertise, sig, req, q, n)| ParticipantMetadata {
                participant_id: id.clone(),
                device: DeviceDescriptor {
                    manufacturer: id.clone(),
                    model: id.clone(),
                    device_type: id,
                    firmware: "1".into(),
                },
                interests,
                expertise,
                data_signature: sig,
                criteria: CollaborationCriteria {
                    required_tags: req,
                    forbidden_tags: BTreeSet::new(),
                    min_data_quality: q,
                    min_samples: n,
                },
            },
        );
        let fl_task = (text(), signature(), plan(), any::<bool>()).prop_map(|(id, sig, p, overrides)| {
            let mut t = task("t", "watch", "hr");
            t.task_id = id;
            t.data_signature = sig;
            if overrides {
                t.plan.learning_rate = Some(p.learning_rate);
                t.plan.epochs = Some(p.epochs);
            }
            t
        });
        let update = (text(), text(), any::<u64>(), weights(), any::<usize>(), metrics(), metrics(), text()).prop_map(
            |(task_id, cohort_id, round, weights, n_samples, pre_metrics, post_metrics, executor_id)| {
                Message::ModelUpdateMsg(ModelUpdateMsg {
                    task_id,
                    cohort_id,
                    round,
                    weights,
                    n_samples,
                    pre_metrics,
                    post_metrics,
                    executor_id,
                })
            },
        );
        prop_oneof![
            meta.prop_map(|metadata| Message::Register(Register { metadata })),
            (text(), text())
                .prop_map(|(client_id, session_token)| Message::RegisterAck(RegisterAck { client_id, session_token })),
            Just(Message::ListCommunities(ListCommunities {})),
            (text(), plan(), any::<u64>()).prop_map(|(purpose, default_plan, seed)| {
                let mut c = community(CollaborationCriteria::default());
                c.purpose = purpose;
                c.default_plan = default_plan;
                c.seed = seed;
                Message::CommunityList(CommunityList { communities: vec![c] })
            }),
            (text(), fl_task).prop_map(|(session_token, task)| Message::SubmitTask(SubmitTask { session_token, task })),
            (text(), text()).prop_map(|(task_id, population_id)| Message::TaskAck(TaskAck { task_id, population_id })),
            (text(), text(), any::<u64>(), weights(), plan()).prop_map(|(task_id, cohort_id, round, weights, plan)| {
                Message::TrainRequest(TrainRequest { task_id, cohort_id, round, weights, plan })
            }),
            update,
            (text(), any::<u64>(), any::<bool>())
                .prop_map(|(task_id, round, duplicate)| Message::MetricsAck(MetricsAck { task_id, round, duplicate })),
            (
                text(),
                prop_oneof![
                    Just(None),
                    Just(Some(RejectReason::MinSamples)),
                    text().prop_map(|t| Some(RejectReason::RequiredTags(t)))
                ]
            )
                .prop_map(|(message, reject_reason)| Message::Error(ErrorMsg {
                    code: ErrorCode::Conflict,
                    message,
                    reject_reason
                })),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_then_encode_is_byte_exact(id in any::<u64>(), msg in message()) {
            let env = Envelope::new(id, msg);
            let bytes = encode(&env).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.msg_type(), env.msg_type());
            prop_assert_eq!(back.correlation_id, id);
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
