//! Canonical JSON for the proximity broadcast and the broker report.
//!
//! Encoding is compact with keys in a fixed order, so payload sizes are a pure
//! function of the field values. Decoding accepts any key order and whitespace
//! and names the first offending field on rejection.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{NodeId, NodeStatus, Position, RunParameters, Timestamp};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BroadcastMessage {
    pub uuid: NodeId,
    pub position: Position,
    pub infected: bool,
    pub timestamp: Timestamp,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContactRecord {
    pub uuid: NodeId,
    pub timestamp: Timestamp,
}

/// A broadcast plus every contact accumulated since the last successful publish.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReportMessage {
    pub uuid: NodeId,
    pub position: Position,
    pub infected: bool,
    pub timestamp: Timestamp,
    pub alive: bool,
    pub contacts: Vec<ContactRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("field `{field}`: {reason}")]
    Field { field: String, reason: String },
}

impl DecodeError {
    fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DecodeError::Field { field: field.into(), reason: reason.into() }
    }

    /// Name of the offending field, when the payload parsed as JSON at all.
    pub fn field_name(&self) -> Option<&str> {
        match self {
            DecodeError::Field { field, .. } => Some(field),
            DecodeError::Syntax(_) => None,
        }
    }
}

impl BroadcastMessage {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("broadcast serialization is infallible")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let object = parse_object(bytes)?;
        decode_header(&object, "")
    }

    /// Rejects positions outside the field.
    pub fn check_bounds(&self, params: &RunParameters) -> Result<(), DecodeError> {
        check_position(self.position, params)
    }

    pub fn with_contacts(self, contacts: Vec<ContactRecord>) -> ReportMessage {
        ReportMessage {
            uuid: self.uuid,
            position: self.position,
            infected: self.infected,
            timestamp: self.timestamp,
            alive: self.alive,
            contacts,
        }
    }
}

impl ReportMessage {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("report serialization is infallible")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let object = parse_object(bytes)?;
        let header = decode_header(&object, "")?;
        let items = match object.get("contacts") {
            None => return Err(DecodeError::field("contacts", "missing")),
            Some(Value::Array(items)) => items,
            Some(_) => return Err(DecodeError::field("contacts", "expected an array")),
        };
        let contacts = items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let prefix = format!("contacts[{i}].");
                let entry = item
                    .as_object()
                    .ok_or_else(|| DecodeError::field(format!("contacts[{i}]"), "expected an object"))?;
                Ok(ContactRecord {
                    uuid: node_id(entry, &prefix)?,
                    timestamp: timestamp(entry, &prefix)?,
                })
            })
            .collect::<Result<Vec<_>, DecodeError>>()?;
        Ok(header.with_contacts(contacts))
    }

    pub fn check_bounds(&self, params: &RunParameters) -> Result<(), DecodeError> {
        check_position(self.position, params)
    }

    pub fn header(&self) -> BroadcastMessage {
        BroadcastMessage {
            uuid: self.uuid,
            position: self.position,
            infected: self.infected,
            timestamp: self.timestamp,
            alive: self.alive,
        }
    }
}

impl NodeStatus for BroadcastMessage {
    fn infected(&self) -> bool {
        self.infected
    }
    fn alive(&self) -> bool {
        self.alive
    }
}

impl NodeStatus for ReportMessage {
    fn infected(&self) -> bool {
        self.infected
    }
    fn alive(&self) -> bool {
        self.alive
    }
}

fn check_position(p: Position, params: &RunParameters) -> Result<(), DecodeError> {
    if params.contains(p) {
        Ok(())
    } else {
        Err(DecodeError::field(
            "position",
            format!("{p} outside {}x{} field", params.field_width, params.field_height),
        ))
    }
}

fn parse_object(bytes: &[u8]) -> Result<Map<String, Value>, DecodeError> {
    match serde_json::from_slice::<Value>(bytes) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(DecodeError::Syntax("expected a JSON object".into())),
        Err(e) => Err(DecodeError::Syntax(e.to_string())),
    }
}

fn decode_header(object: &Map<String, Value>, prefix: &str) -> Result<BroadcastMessage, DecodeError> {
    Ok(BroadcastMessage {
        uuid: node_id(object, prefix)?,
        position: position(object, prefix)?,
        infected: boolean(object, prefix, "infected")?,
        timestamp: timestamp(object, prefix)?,
        alive: boolean(object, prefix, "alive")?,
    })
}

fn require<'a>(object: &'a Map<String, Value>, prefix: &str, key: &str) -> Result<&'a Value, DecodeError> {
    object
        .get(key)
        .ok_or_else(|| DecodeError::field(format!("{prefix}{key}"), "missing"))
}

fn string<'a>(object: &'a Map<String, Value>, prefix: &str, key: &str) -> Result<&'a str, DecodeError> {
    require(object, prefix, key)?
        .as_str()
        .ok_or_else(|| DecodeError::field(format!("{prefix}{key}"), "expected a string"))
}

fn node_id(object: &Map<String, Value>, prefix: &str) -> Result<NodeId, DecodeError> {
    string(object, prefix, "uuid")?
        .parse()
        .map_err(|e| DecodeError::field(format!("{prefix}uuid"), format!("{e}")))
}

fn timestamp(object: &Map<String, Value>, prefix: &str) -> Result<Timestamp, DecodeError> {
    Timestamp::parse(string(object, prefix, "timestamp")?)
        .map_err(|e| DecodeError::field(format!("{prefix}timestamp"), e.to_string()))
}

fn boolean(object: &Map<String, Value>, prefix: &str, key: &str) -> Result<bool, DecodeError> {
    require(object, prefix, key)?
        .as_bool()
        .ok_or_else(|| DecodeError::field(format!("{prefix}{key}"), "expected a boolean"))
}

fn position(object: &Map<String, Value>, prefix: &str) -> Result<Position, DecodeError> {
    let field = format!("{prefix}position");
    let items = require(object, prefix, "position")?
        .as_array()
        .ok_or_else(|| DecodeError::field(&field, "expected a two-element array"))?;
    let coords: Vec<u32> = items
        .iter()
        .map(|v| v.as_u64().and_then(|n| u32::try_from(n).ok()))
        .collect::<Option<_>>()
        .ok_or_else(|| DecodeError::field(&field, "coordinates must be non-negative integers"))?;
    match coords[..] {
        [x, y] => Ok(Position::new(x, y)),
        _ => Err(DecodeError::field(&field, "expected a two-element array")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(fill: u8) -> NodeId {
        NodeId::from_random_bytes([fill; 16])
    }

    fn ts() -> Timestamp {
        Timestamp::parse("2020-12-02 16:19:07.123456").unwrap()
    }

    fn sample() -> BroadcastMessage {
        BroadcastMessage {
            uuid: id(0xff),
            position: Position::new(1, 5),
            infected: false,
            timestamp: ts(),
            alive: true,
        }
    }

    #[test]
    fn broadcast_is_canonical() {
        let text = String::from_utf8(sample().encode()).unwrap();
        let expected = format!(
            r#"{{"uuid":"{}","position":[1,5],"infected":false,"timestamp":"2020-12-02 16:19:07.123456","alive":true}}"#,
            id(0xff)
        );
        assert_eq!(text, expected);
        // 36-char uuid, single-digit coordinates, full-precision timestamp.
        assert_eq!(text.len(), 135);
        assert!((128..=168).contains(&text.len()));
    }

    #[test]
    fn decode_is_liberal() {
        let text = format!(
            "{{ \"alive\" : true,\n \"timestamp\": \"2020-12-02 16:19:07.123456\", \"infected\":false, \"position\": [ 1, 5 ], \"uuid\": \"{}\", \"extra\": 1 }}",
            id(0xff)
        );
        assert_eq!(BroadcastMessage::decode(text.as_bytes()).unwrap(), sample());
    }

    #[test]
    fn decode_names_missing_field() {
        let err = BroadcastMessage::decode(b"{}").unwrap_err();
        assert_eq!(err.field_name(), Some("uuid"));
        assert!(err.to_string().contains("uuid"));
    }

    #[test]
    fn decode_names_bad_fields() {
        let base = serde_json::to_value(sample()).unwrap();
        let cases = [
            ("position", serde_json::json!([-1, 5])),
            ("position", serde_json::json!([1])),
            ("infected", serde_json::json!("no")),
            ("timestamp", serde_json::json!("2020-12-02")),
            ("uuid", serde_json::json!("not-a-uuid")),
        ];
        for (field, bad) in cases {
            let mut v = base.clone();
            v[field] = bad;
            let err = BroadcastMessage::decode(v.to_string().as_bytes()).unwrap_err();
            assert_eq!(err.field_name(), Some(field), "{err}");
        }
        assert!(matches!(BroadcastMessage::decode(b"{not json"), Err(DecodeError::Syntax(_))));
    }

    #[test]
    fn bounds_check_names_position() {
        let params = RunParameters { field_width: 1, ..RunParameters::default() };
        let err = sample().check_bounds(&params).unwrap_err();
        assert_eq!(err.field_name(), Some("position"));
    }

    #[test]
    fn empty_report_appends_contacts_key() {
        let broadcast = String::from_utf8(sample().encode()).unwrap();
        let report = String::from_utf8(sample().with_contacts(vec![]).encode()).unwrap();
        assert_eq!(report, format!("{},\"contacts\":[]}}", &broadcast[..broadcast.len() - 1]));
    }

    #[test]
    fn report_contact_keys_are_ordered() {
        let report = sample().with_contacts(vec![ContactRecord { uuid: id(1), timestamp: ts() }]);
        let text = String::from_utf8(report.encode()).unwrap();
        assert!(text.ends_with(&format!(
            r#""contacts":[{{"uuid":"{}","timestamp":"2020-12-02 16:19:07.123456"}}]}}"#,
            id(1)
        )));
        assert_eq!(ReportMessage::decode(text.as_bytes()).unwrap(), report);
    }

    #[test]
    fn report_decode_names_nested_field() {
        let mut v = serde_json::to_value(sample().with_contacts(vec![ContactRecord { uuid: id(1), timestamp: ts() }])).unwrap();
        v["contacts"][0].as_object_mut().unwrap().remove("timestamp");
        let err = ReportMessage::decode(v.to_string().as_bytes()).unwrap_err();
        assert_eq!(err.field_name(), Some("contacts[0].timestamp"));
        let err = ReportMessage::decode(&sample().encode()).unwrap_err();
        assert_eq!(err.field_name(), Some("contacts"));
    }

    #[test]
    fn nineteen_contact_report_length_is_frozen() {
        // Each contact object is 88 bytes plus a separating comma; the shell is 149 bytes.
        let contacts = (0..19).map(|i| ContactRecord { uuid: id(i), timestamp: ts() }).collect();
        let report = sample().with_contacts(contacts);
        assert_eq!(report.encode().len(), 149 + 19 * 88 + 18);
        assert_eq!(report.encode().len(), 1839);
    }

    prop_compose! {
        fn any_ts()(micros in 0i64..4_102_444_800_000_000) -> Timestamp {
            Timestamp::from_unix_micros(micros)
        }
    }

    prop_compose! {
        fn any_broadcast()(bytes in any::<[u8; 16]>(), x in any::<u32>(), y in any::<u32>(),
                           infected in any::<bool>(), alive in any::<bool>(), timestamp in any_ts()) -> BroadcastMessage {
            BroadcastMessage { uuid: NodeId::from_random_bytes(bytes), position: Position::new(x, y), infected, timestamp, alive }
        }
    }

    proptest! {
        #[test]
        fn broadcast_round_trip(m in any_broadcast()) {
            prop_assert_eq!(BroadcastMessage::decode(&m.encode()).unwrap(), m);
        }

        #[test]
        fn report_round_trip(m in any_broadcast(),
                             contacts in proptest::collection::vec((any::<[u8; 16]>(), any_ts()), 0..25)) {
            let report = m.with_contacts(contacts.into_iter()
                .map(|(b, t)| ContactRecord { uuid: NodeId::from_random_bytes(b), timestamp: t })
                .collect());
            prop_assert_eq!(ReportMessage::decode(&report.encode()).unwrap(), report);
        }
    }
}
