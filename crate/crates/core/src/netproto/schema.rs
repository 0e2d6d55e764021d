//! JSON Schema of the wire protocol and the privacy scan over it.
//!
//! The scan walks every payload schema and rejects anything shaped like raw
//! training data: fields named like features or labels, numeric matrices,
//! integer arrays, and numeric arrays outside the summary-statistic allowlist.

use std::collections::BTreeSet;

use schemars::gen::SchemaSettings;
use schemars::JsonSchema;
use serde_json::{json, Map, Value};

use super::{
    CommunityList, ErrorMsg, ListCommunities, MetricsAck, ModelUpdateMsg, MsgType, Register, RegisterAck, SubmitTask,
    TaskAck, TrainRequest, PROTOCOL_VERSION,
};

/// Property names that would name raw data.
pub const FORBIDDEN_FIELDS: &[&str] =
    &["data", "dataset", "feature_matrix", "features", "label", "labels", "raw_data", "rows", "samples", "x", "y"];

/// The only properties allowed to be arrays of numbers: aggregate statistics
/// of fixed length (number of features or classes), never per sample.
pub const NUMERIC_ARRAY_ALLOWLIST: &[&str] = &["label_histogram", "per_feature_mean", "per_feature_std"];

/// Complete protocol schema: envelope layout, one payload schema per message
/// type, and shared definitions.
pub fn protocol_schema() -> Value {
    let mut gen = SchemaSettings::draft07().into_generator();
    let mut payloads = Map::new();
    let mut add = |t: MsgType, schema: schemars::schema::Schema| {
        payloads.insert(t.as_str().to_string(), serde_json::to_value(schema).expect("schema serializes"));
    };
    add(MsgType::Register, gen.subschema_for::<Register>());
    add(MsgType::RegisterAck, gen.subschema_for::<RegisterAck>());
    add(MsgType::ListCommunities, gen.subschema_for::<ListCommunities>());
    add(MsgType::CommunityList, gen.subschema_for::<CommunityList>());
    add(MsgType::SubmitTask, gen.subschema_for::<SubmitTask>());
    add(MsgType::TaskAck, gen.subschema_for::<TaskAck>());
    add(MsgType::TrainRequest, gen.subschema_for::<TrainRequest>());
    add(MsgType::ModelUpdateMsg, gen.subschema_for::<ModelUpdateMsg>());
    add(MsgType::MetricsAck, gen.subschema_for::<MetricsAck>());
    add(MsgType::Error, gen.subschema_for::<ErrorMsg>());
    let definitions = serde_json::to_value(gen.definitions()).expect("definitions serialize");
    let msg_types: Vec<&str> = MsgType::ALL.iter().map(|t| t.as_str()).collect();
    let pairs: Map<String, Value> = MsgType::ALL
        .iter()
        .filter_map(|t| t.response_type().map(|r| (t.as_str().to_string(), Value::from(r.as_str()))))
        .collect();
    json!({
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "communityfl wire protocol",
        "framing": "4-byte big-endian body length, then a UTF-8 JSON body of at most 16777216 bytes; object keys sorted lexicographically",
        "envelope": {
            "type": "object",
            "additionalProperties": false,
            "required": ["correlation_id", "msg_type", "payload", "version"],
            "properties": {
                "correlation_id": {"type": "integer", "minimum": 0, "maximum": u64::MAX},
                "msg_type": {"type": "string", "enum": msg_types},
                "payload": {"description": "schema selected by msg_type, see payloads"},
                "version": {"const": PROTOCOL_VERSION},
            }
        },
        "responses": pairs,
        "payloads": payloads,
        "definitions": definitions,
    })
}

/// Pretty-printed schema with a trailing newline, as shipped in the repo.
pub fn protocol_schema_text() -> String {
    let mut s = serde_json::to_string_pretty(&protocol_schema()).expect("schema serializes");
    s.push('\n');
    s
}

/// Privacy violations in a full protocol schema document; empty means clean.
pub fn privacy_violations(doc: &Value) -> Vec<String> {
    let mut out = Vec::new();
    let Some(payloads) = doc.get("payloads").and_then(Value::as_object) else {
        return vec!["schema has no payloads section".into()];
    };
    for (name, schema) in payloads {
        let mut scan = Scan { doc, out: &mut out, visiting: BTreeSet::new() };
        scan.walk(schema, name, None);
    }
    out.sort();
    out.dedup();
    out
}

/// Privacy violations of a single type's schema.
pub fn privacy_violations_of<T: JsonSchema>() -> Vec<String> {
    let mut gen = SchemaSettings::draft07().into_generator();
    let root = serde_json::to_value(gen.subschema_for::<T>()).expect("schema serializes");
    let doc = json!({
        "payloads": {T::schema_name(): root},
        "definitions": serde_json::to_value(gen.definitions()).expect("definitions serialize"),
    });
    privacy_violations(&doc)
}

struct Scan<'a> {
    doc: &'a Value,
    out: &'a mut Vec<String>,
    visiting: BTreeSet<String>,
}

impl<'a> Scan<'a> {
    fn resolve(&self, node: &'a Value) -> Option<(&'a Value, String)> {
        let r = node.get("$ref")?.as_str()?;
        let name = r.strip_prefix("#/definitions/")?;
        Some((self.doc.get("definitions")?.get(name)?, name.to_string()))
    }

    /// Resolved node plus every alternative under anyOf/oneOf/allOf.
    fn variants(&self, node: &'a Value) -> Vec<&'a Value> {
        let node = self.resolve(node).map_or(node, |(n, _)| n);
        let mut all = vec![node];
        for key in ["anyOf", "oneOf", "allOf"] {
            if let Some(alts) = node.get(key).and_then(Value::as_array) {
                for alt in alts {
                    all.extend(self.variants(alt));
                }
            }
        }
        all
    }

    fn types(&self, node: &'a Value) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for v in self.variants(node) {
            match v.get("type") {
                Some(Value::String(s)) => {
                    out.insert(s.clone());
                }
                Some(Value::Array(a)) => out.extend(a.iter().filter_map(Value::as_str).map(str::to_string)),
                _ => {}
            }
        }
        out
    }

    fn items(&self, node: &'a Value) -> Vec<&'a Value> {
        self.variants(node)
            .into_iter()
            .filter_map(|v| v.get("items"))
            .flat_map(|i| match i {
                Value::Array(a) => a.iter().collect::<Vec<_>>(),
                other => vec![other],
            })
            .collect()
    }

    fn walk(&mut self, node: &'a Value, path: &str, prop: Option<&str>) {
        if let Some((target, name)) = self.resolve(node) {
            if !self.visiting.insert(name.clone()) {
                return;
            }
            self.walk(target, path, prop);
            self.visiting.remove(&name);
            return;
        }
        if self.types(node).contains("array") {
            self.check_array(node, path, prop);
        }
        for key in ["anyOf", "oneOf", "allOf"] {
            if let Some(alts) = node.get(key).and_then(Value::as_array) {
                for alt in alts {
                    self.walk(alt, path, prop);
                }
            }
        }
        if let Some(props) = node.get("properties").and_then(Value::as_object) {
            for (k, v) in props {
                let child = format!("{path}.{k}");
                if FORBIDDEN_FIELDS.contains(&k.as_str()) {
                    self.out.push(format!("{child}: field name denotes raw data"));
                }
                self.walk(v, &child, Some(k));
            }
        }
        if let Some(extra @ Value::Object(_)) = node.get("additionalProperties") {
            self.walk(extra, &format!("{path}.*"), prop);
        }
        if let Some(items) = node.get("items") {
            match items {
                Value::Array(a) => a.iter().for_each(|i| self.walk(i, &format!("{path}[]"), prop)),
                other => self.walk(other, &format!("{path}[]"), prop),
            }
        }
    }

    fn check_array(&mut self, node: &'a Value, path: &str, prop: Option<&str>) {
        for item in self.items(node) {
            let t = self.types(item);
            if t.contains("array") && self.items(item).iter().any(|inner| is_numeric(&self.types(inner))) {
                self.out.push(format!("{path}: numeric matrix"));
            }
            if t.contains("integer") {
                self.out.push(format!("{path}: integer array (label-vector shape)"));
            } else if t.contains("number") && !prop.is_some_and(|p| NUMERIC_ARRAY_ALLOWLIST.contains(&p)) {
                self.out.push(format!("{path}: numeric array outside the statistics allowlist"));
            }
        }
    }
}

fn is_numeric(t: &BTreeSet<String>) -> bool {
    t.contains("number") || t.contains("integer")
}
