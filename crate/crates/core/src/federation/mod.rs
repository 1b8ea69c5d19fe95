//! In-process party runtime and message bus.
//!
//! Parties are event-driven state machines implementing [`Party`]. The
//! runtime delivers serialized frames between them, either on one thread in
//! a fixed FIFO order or on one worker thread per party, and records every
//! frame in a [`Transcript`] with exact byte counts and phase timings.

mod locality;
mod runtime;
mod transcript;
pub mod wire;

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use locality::{assert_locality, LocalityPolicy, LocalityReport, RuleResult};
pub use runtime::{run_protocol, ExecMode, RunOptions, Schedule};
pub use transcript::{DirectionBytes, MessageHeader, PhaseTimings, Transcript, TranscriptSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartyId(pub u32);

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// Frame kinds carried by the bus. The kind is the unit the locality audit
/// reasons about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    /// Paillier public key from the key holder.
    PublicKey,
    /// Per-sample gradients and hessians in plaintext.
    GradientsPlain,
    /// Per-sample gradients and hessians as ciphertexts.
    GradientsCipher,
    /// Frontier node membership for the next tree level.
    NodeFrontier,
    HistogramPlain,
    HistogramCipher,
    /// Split to evaluate on the receiver's own feature.
    SplitInstruction,
    /// Left/right bits computed by a feature owner.
    PartitionBits,
    /// Mini-batch row schedule for an epoch.
    BatchSchedule,
    CutForward,
    CutBackward,
    /// Raw feature values. No shipped protocol sends these across parties.
    RawFeatures,
    /// Label values. No shipped protocol sends these across parties.
    Labels,
    /// End of protocol.
    Done,
}

impl MessageKind {
    pub fn is_ciphertext(self) -> bool {
        matches!(self, MessageKind::GradientsCipher | MessageKind::HistogramCipher)
    }

    /// Gradient or histogram statistics in plaintext.
    pub fn is_plaintext_statistic(self) -> bool {
        matches!(self, MessageKind::GradientsPlain | MessageKind::HistogramPlain)
    }

    /// Kinds whose content depends on the labels.
    pub fn is_label_derived(self) -> bool {
        matches!(
            self,
            MessageKind::GradientsPlain
                | MessageKind::GradientsCipher
                | MessageKind::NodeFrontier
                | MessageKind::SplitInstruction
                | MessageKind::CutBackward
                | MessageKind::Labels
        )
    }
}

/// A delivered frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    /// Per-sender sequence number, starting at 0.
    pub seq: u64,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
    /// Microseconds since the start of the run.
    pub timestamp_us: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipient {
    Party(PartyId),
    /// Every registered party except the sender.
    Broadcast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartyState {
    /// Not started or nothing outstanding.
    Idle,
    /// Expecting further messages.
    Waiting,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Encrypt,
    Decrypt,
    /// Payload encoding and decoding.
    Transfer,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("unknown party {0}")]
    UnknownParty(PartyId),
    #[error("party {0} registered twice")]
    DuplicateParty(PartyId),
    #[error("party {party} rejected a {kind:?} frame: {reason}")]
    Violation { party: PartyId, kind: MessageKind, reason: String },
    #[error("deadlock: no runnable party; states: {dump}")]
    Deadlock { dump: String },
    #[error("message budget of {limit} exceeded")]
    BudgetExceeded { limit: usize },
    #[error("malformed frame: {0}")]
    Decode(String),
    #[error("party {party} failed: {source}")]
    Party {
        party: PartyId,
        #[source]
        source: Box<crate::error::Error>,
    },
}

#[derive(Debug)]
pub(crate) struct Outgoing {
    pub to: Recipient,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

/// Handle through which a party emits frames and reports phase timings.
pub struct Context {
    id: PartyId,
    outbox: Vec<Outgoing>,
    phases: PhaseTimings,
}

impl Context {
    pub(crate) fn new(id: PartyId) -> Self {
        Self { id, outbox: Vec::new(), phases: PhaseTimings::default() }
    }

    pub fn id(&self) -> PartyId {
        self.id
    }

    pub fn send(&mut self, to: PartyId, kind: MessageKind, payload: Vec<u8>) {
        self.outbox.push(Outgoing { to: Recipient::Party(to), kind, payload });
    }

    pub fn broadcast(&mut self, kind: MessageKind, payload: Vec<u8>) {
        self.outbox.push(Outgoing { to: Recipient::Broadcast, kind, payload });
    }

    /// Runs `f`, charging its wall time to `phase`.
    pub fn time<T>(&mut self, phase: Phase, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        let elapsed = start.elapsed();
        let slot = match phase {
            Phase::Encrypt => &mut self.phases.encrypt,
            Phase::Decrypt => &mut self.phases.decrypt,
            Phase::Transfer => &mut self.phases.transfer,
        };
        *slot += elapsed.as_secs_f64();
        out
    }

    pub(crate) fn take(&mut self) -> (Vec<Outgoing>, PhaseTimings) {
        (std::mem::take(&mut self.outbox), std::mem::take(&mut self.phases))
    }
}

/// A protocol participant.
pub trait Party: Send {
    fn id(&self) -> PartyId;

    /// Called once if the party appears in the run's [`Schedule`].
    fn start(&mut self, ctx: &mut Context) -> Result<(), ProtocolError>;

    fn handle(&mut self, msg: &Message, ctx: &mut Context) -> Result<(), ProtocolError>;

    fn state(&self) -> PartyState;

    /// One-line state summary for deadlock reports.
    fn describe(&self) -> String {
        format!("{:?}", self.state())
    }
}

pub(crate) fn elapsed_us(since: Instant) -> u64 {
    Duration::as_micros(&since.elapsed()) as u64
}

/// Error helper for parties receiving a frame they cannot use.
pub fn violation(party: PartyId, kind: MessageKind, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::Violation { party, kind, reason: reason.into() }
}
