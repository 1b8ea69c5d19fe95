use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Message, MessageKind, PartyId};

/// Wall-clock seconds per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub compute: f64,
    pub encrypt: f64,
    pub decrypt: f64,
    pub transfer: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.compute + self.encrypt + self.decrypt + self.transfer
    }

    pub fn he(&self) -> f64 {
        self.encrypt + self.decrypt
    }

    pub fn add(&mut self, other: &PhaseTimings) {
        self.compute += other.compute;
        self.encrypt += other.encrypt;
        self.decrypt += other.decrypt;
        self.transfer += other.transfer;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionBytes {
    pub sender: PartyId,
    pub receiver: PartyId,
    pub bytes: u64,
}

/// Header line of the JSON-lines export.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageHeader {
    pub seq: u64,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub kind: MessageKind,
    pub bytes: usize,
    pub timestamp_us: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_hex: Option<String>,
}

/// Byte and timing totals consumed by reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub n_messages: usize,
    pub total_bytes: u64,
    pub bytes_by_kind: BTreeMap<MessageKind, u64>,
    pub bytes_by_direction: Vec<DirectionBytes>,
    pub phases: PhaseTimings,
    pub wall_seconds: f64,
}

/// Ordered log of every delivered frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub messages: Vec<Message>,
    /// Phase timings summed over parties.
    pub phases: PhaseTimings,
    pub per_party: BTreeMap<PartyId, PhaseTimings>,
    pub wall_seconds: f64,
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

impl Transcript {
    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.messages.iter().map(|m| m.payload.len() as u64).sum()
    }

    pub fn bytes_by_kind(&self) -> BTreeMap<MessageKind, u64> {
        let mut out = BTreeMap::new();
        for m in &self.messages {
            *out.entry(m.kind).or_insert(0) += m.payload.len() as u64;
        }
        out
    }

    pub fn bytes_by_direction(&self) -> Vec<DirectionBytes> {
        let mut map: BTreeMap<(PartyId, PartyId), u64> = BTreeMap::new();
        for m in &self.messages {
            *map.entry((m.sender, m.receiver)).or_insert(0) += m.payload.len() as u64;
        }
        map.into_iter().map(|((sender, receiver), bytes)| DirectionBytes { sender, receiver, bytes }).collect()
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.messages.iter().filter(|m| m.kind == kind).count()
    }

    pub fn summary(&self) -> TranscriptSummary {
        TranscriptSummary {
            n_messages: self.messages.len(),
            total_bytes: self.total_bytes(),
            bytes_by_kind: self.bytes_by_kind(),
            bytes_by_direction: self.bytes_by_direction(),
            phases: self.phases,
            wall_seconds: self.wall_seconds,
        }
    }

    /// One JSON object per frame; payloads are hex-encoded unless elided.
    pub fn to_jsonl(&self, include_payloads: bool) -> String {
        let mut out = String::new();
        for m in &self.messages {
            let header = MessageHeader {
                seq: m.seq,
                sender: m.sender,
                receiver: m.receiver,
                kind: m.kind,
                bytes: m.payload.len(),
                timestamp_us: m.timestamp_us,
                payload_hex: include_payloads.then(|| hex(&m.payload)),
            };
            out.push_str(&serde_json::to_string(&header).expect("header serializes"));
            out.push('\n');
        }
        out
    }

    /// Frames ordered by (sender, sequence number) without timestamps; equal
    /// across execution modes for a deterministic protocol.
    pub fn canonical(&self) -> Vec<(PartyId, u64, PartyId, MessageKind, &[u8])> {
        let mut v: Vec<_> =
            self.messages.iter().map(|m| (m.sender, m.seq, m.receiver, m.kind, m.payload.as_slice())).collect();
        v.sort_by_key(|&(s, q, ..)| (s, q));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(seq: u64, s: u32, r: u32, kind: MessageKind, n: usize) -> Message {
        Message { seq, sender: PartyId(s), receiver: PartyId(r), kind, payload: vec![seq as u8; n], timestamp_us: 0 }
    }

    #[test]
    fn totals_reconcile() {
        let t = Transcript {
            messages: vec![
                msg(0, 0, 1, MessageKind::GradientsPlain, 10),
                msg(0, 1, 0, MessageKind::HistogramPlain, 7),
                msg(1, 0, 1, MessageKind::NodeFrontier, 3),
            ],
            ..Default::default()
        };
        assert_eq!(t.total_bytes(), 20);
        assert_eq!(t.bytes_by_kind().values().sum::<u64>(), 20);
        assert_eq!(t.bytes_by_direction().iter().map(|d| d.bytes).sum::<u64>(), 20);
        assert_eq!(t.bytes_by_direction()[0], DirectionBytes { sender: PartyId(0), receiver: PartyId(1), bytes: 13 });
        let lines = t.to_jsonl(false);
        assert_eq!(lines.lines().count(), 3);
        let first: MessageHeader = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first.bytes, 10);
        assert!(first.payload_hex.is_none());
        assert!(t.to_jsonl(true).contains("\"payload_hex\":\"00000000000000000000\""));
    }
}
