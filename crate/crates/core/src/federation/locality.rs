use serde::{Deserialize, Serialize};

use super::{MessageKind, PartyId, Transcript};

/// Who may hold labels, and whether statistics must travel encrypted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityPolicy {
    pub label_holders: Vec<PartyId>,
    pub require_ciphertext: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: String,
    pub passed: bool,
    /// Up to ten offending frames.
    pub violations: Vec<String>,
    /// Informational flags that do not fail the rule.
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub results: Vec<RuleResult>,
}

impl LocalityReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn rule(&self, name: &str) -> Option<&RuleResult> {
        self.results.iter().find(|r| r.rule == name)
    }
}

/// Kinds a feature-holding participant without labels may emit.
const PASSIVE_KINDS: [MessageKind; 4] =
    [MessageKind::HistogramPlain, MessageKind::HistogramCipher, MessageKind::PartitionBits, MessageKind::CutForward];

/// Audits every cross-party frame of a transcript. Loopback frames
/// (sender = receiver) never leave their party and are ignored.
pub fn assert_locality(t: &Transcript, policy: &LocalityPolicy) -> LocalityReport {
    let cross: Vec<_> = t.messages.iter().filter(|m| m.sender != m.receiver).collect();
    let is_holder = |p: PartyId| policy.label_holders.contains(&p);
    let describe = |m: &super::Message| format!("{}#{} {:?} {}->{}", m.sender, m.seq, m.kind, m.sender, m.receiver);

    let mut results = Vec::new();
    let mut rule = |name: &str, bad: Vec<String>, notes: Vec<String>| {
        results.push(RuleResult {
            rule: name.to_string(),
            passed: bad.is_empty(),
            violations: bad.into_iter().take(10).collect(),
            notes,
        });
    };

    rule(
        "raw-features-stay-local",
        cross.iter().filter(|m| m.kind == MessageKind::RawFeatures).map(|m| describe(m)).collect(),
        vec![],
    );
    rule(
        "labels-stay-local",
        cross.iter().filter(|m| m.kind == MessageKind::Labels).map(|m| describe(m)).collect(),
        vec![],
    );
    rule(
        "label-derived-only-from-holders",
        cross.iter().filter(|m| m.kind.is_label_derived() && !is_holder(m.sender)).map(|m| describe(m)).collect(),
        vec![],
    );
    rule(
        "passive-parties-send-permitted-kinds",
        cross
            .iter()
            .filter(|m| !is_holder(m.sender) && !PASSIVE_KINDS.contains(&m.kind))
            .map(|m| describe(m))
            .collect(),
        vec![],
    );
    let plaintext: Vec<String> =
        cross.iter().filter(|m| m.kind.is_plaintext_statistic()).map(|m| describe(m)).collect();
    if policy.require_ciphertext {
        rule("statistics-encrypted", plaintext, vec![]);
    } else {
        let n = plaintext.len();
        let notes =
            if n > 0 { vec![format!("{n} plaintext gradient/histogram frames (expected without HE)")] } else { vec![] };
        rule("statistics-encrypted", vec![], notes);
    }
    LocalityReport { results }
}
