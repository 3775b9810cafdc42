//! Wire protocol: JSON messages in length-prefixed frames.
//!
//! A frame is a 4-byte big-endian payload length followed by that many
//! bytes of UTF-8 JSON. Over WebSocket each text message carries exactly one
//! JSON payload and no length prefix.

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};
use vcbot_core::deliberation::{Position, TickRecord};
use vcbot_core::observer::CongruenceRow;

use crate::error::{Result, ServiceError};

pub const SCHEMA_VERSION: u32 = 1;

/// Upper bound on a single frame's payload.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub session: String,
    pub tick: u64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Body {
    Hello(Hello),
    Input(Input),
    State(State),
    Event(Event),
    Error(ErrorBody),
    Bye(Bye),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    Running,
    Finished,
}

/// Sent by the server on connect, and by the client to start the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub watermark: Vec<Polyline>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub ticks: usize,
    pub tick_ms: u64,
    pub gamma: f64,
    pub rate_cap: f64,
    pub window_size: usize,
    pub epochs: usize,
    pub rate: f64,
    pub budget_ms: f64,
    pub labels: Vec<String>,
    pub start_primitive: String,
    pub config_hash: String,
    pub model_hash: String,
}

/// One reference trajectory of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub label: String,
    pub points: Vec<Position>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Input {
    /// Client sequence number, echoed in acknowledgements.
    #[serde(default)]
    pub seq: u64,
    pub x: f64,
    pub y: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub phase: Phase,
    pub record: TickRecord,
    pub labels: IntentLabels,
    pub congruence: Option<CongruenceRow>,
    /// Sequence number of the input consumed by this tick.
    pub ack: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentLabels {
    pub human: Option<String>,
    pub robot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub name: String,
    #[serde(default)]
    pub detail: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seqs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bye {
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<SessionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub ticks: usize,
    pub log: Option<String>,
    pub events: Vec<EventSummary>,
}

/// One intervention event: a run of human activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub event: usize,
    pub start_t: usize,
    pub end_t: usize,
    pub active_ticks: usize,
    pub mean_p: Option<f64>,
}

impl WireMessage {
    pub fn new(session: &str, tick: u64, body: Body) -> Self {
        Self {
            session: session.to_string(),
            tick,
            body,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            Body::Hello(_) => "hello",
            Body::Input(_) => "input",
            Body::State(_) => "state",
            Body::Event(_) => "event",
            Body::Error(_) => "error",
            Body::Bye(_) => "bye",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn write_frame<W: Write>(out: &mut W, msg: &WireMessage) -> Result<()> {
    let payload = msg.to_json()?;
    if payload.len() > MAX_FRAME {
        return Err(ServiceError::FrameTooLarge(payload.len()));
    }
    out.write_all(&(payload.len() as u32).to_be_bytes())?;
    out.write_all(payload.as_bytes())?;
    out.flush()?;
    Ok(())
}

/// Reads one frame's payload; `None` on a clean end of stream.
pub fn read_frame_text<R: Read>(input: &mut R) -> Result<Option<String>> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(ServiceError::FrameTooLarge(n));
    }
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| ServiceError::Protocol("frame is not UTF-8".into()))
}

pub fn read_frame<R: Read>(input: &mut R) -> Result<Option<WireMessage>> {
    match read_frame_text(input)? {
        Some(text) => WireMessage::from_json(&text).map(Some),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> WireMessage {
        WireMessage::new(
            "s1",
            42,
            Body::State(State {
                phase: Phase::Running,
                record: TickRecord {
                    t: 42,
                    robot: [0.1, -0.30000000000000004],
                    human: Some([0.25, 0.5]),
                    human_active: true,
                    mixed: [0.2350000000000001, 0.42],
                    nelbo: 3.3333333333333335,
                    epochs: 30,
                    wall_ms: 4.5,
                },
                labels: IntentLabels {
                    human: Some("Head".into()),
                    robot: None,
                },
                congruence: Some(CongruenceRow {
                    t: 42,
                    event: 1,
                    c: 1,
                    p: 0.7,
                }),
                ack: Some(9),
            }),
        )
    }

    #[test]
    fn kind_tag_is_flat() {
        let json = state().to_json().unwrap();
        assert!(json.contains(r#""kind":"state""#), "{json}");
        assert!(json.contains(r#""session":"s1""#));
        assert!(json.contains(r#""tick":42"#));
    }

    #[test]
    fn frames_roundtrip_exactly() {
        let msgs = vec![
            state(),
            WireMessage::new(
                "s1",
                3,
                Body::Input(Input {
                    seq: 4,
                    x: -0.1,
                    y: 0.9,
                    active: false,
                }),
            ),
            WireMessage::new(
                "s1",
                0,
                Body::Hello(Hello {
                    schema: SCHEMA_VERSION,
                    phase: Some(Phase::Idle),
                    config: None,
                    watermark: vec![Polyline {
                        label: "Eye".into(),
                        points: vec![[0.0, 0.5], [0.1, 0.4]],
                    }],
                    client: None,
                }),
            ),
            WireMessage::new(
                "s1",
                2000,
                Body::Bye(Bye {
                    reason: "finished".into(),
                    summary: None,
                }),
            ),
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_frame(&mut buf, m).unwrap();
        }
        let mut cursor = std::io::Cursor::new(buf);
        for m in &msgs {
            assert_eq!(read_frame(&mut cursor).unwrap().as_ref(), Some(m));
        }
        assert!(read_frame(&mut cursor).unwrap().is_none());
    }

    #[test]
    fn client_input_parses_without_seq() {
        let m = WireMessage::from_json(r#"{"kind":"input","session":"s","tick":0,"x":0.5,"y":-0.5,"active":true}"#)
            .unwrap();
        assert_eq!(
            m.body,
            Body::Input(Input {
                seq: 0,
                x: 0.5,
                y: -0.5,
                active: true
            })
        );
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(WireMessage::from_json(r#"{"kind":"shout","session":"s","tick":0}"#).is_err());
    }

    #[test]
    fn oversized_length_rejected() {
        let mut bytes = ((MAX_FRAME + 1) as u32).to_be_bytes().to_vec();
        bytes.extend([b'{'; 8]);
        let err = read_frame(&mut std::io::Cursor::new(bytes)).unwrap_err();
        assert!(matches!(err, ServiceError::FrameTooLarge(_)));
    }
}
