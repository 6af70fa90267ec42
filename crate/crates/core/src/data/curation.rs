//! Filters over multi-assistant conversation records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One synthetic conversation between `N` assistants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub question: String,
    pub ground_truth: String,
    pub assistant_names: Vec<String>,
    /// `messages[a]` are assistant `a`'s messages in order.
    pub messages: Vec<Vec<String>>,
    pub final_answers: Vec<String>,
    pub correct: Vec<bool>,
}

impl ConversationRecord {
    pub fn lanes(&self) -> usize {
        self.assistant_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lanes();
        if n == 0 {
            return invalid("record has no assistants");
        }
        if self.messages.len() != n || self.final_answers.len() != n || self.correct.len() != n {
            return invalid(format!("record fields disagree on the assistant count {n}"));
        }
        if self.messages.iter().any(Vec::is_empty) {
            return invalid("every assistant needs at least one message");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    #[serde(default = "default_min")]
    pub min_messages: usize,
    #[serde(default = "default_max")]
    pub max_messages: usize,
    /// Conversations are kept when the interaction score exceeds `factor * N`.
    #[serde(default = "default_factor")]
    pub interaction_threshold_factor: usize,
    /// Phrases that signal interaction, counted like names.
    #[serde(default = "default_phrases")]
    pub key_phrases: Vec<String>,
}

fn default_min() -> usize {
    10
}

fn default_max() -> usize {
    30
}

fn default_factor() -> usize {
    2
}

fn default_phrases() -> Vec<String> {
    vec!["you are wrong".into(), "I disagree".into()]
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            min_messages: default_min(),
            max_messages: default_max(),
            interaction_threshold_factor: default_factor(),
            key_phrases: default_phrases(),
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_messages > self.max_messages {
            return invalid("min_messages exceeds max_messages");
        }
        Ok(())
    }
}

/// First filter a record fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rejection {
    Parse,
    Malformed,
    Correctness,
    Length,
    Interaction,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::Parse => "parse",
            Rejection::Malformed => "malformed",
            Rejection::Correctness => "correctness",
            Rejection::Length => "length",
            Rejection::Interaction => "interaction",
        }
    }
}

/// Occurrences of other assistants' names and of key phrases in each
/// assistant's own messages, summed over assistants.
pub fn interaction_score(record: &ConversationRecord, config: &CurationConfig) -> usize {
    let mut total = 0;
    for (a, msgs) in record.messages.iter().enumerate() {
        for msg in msgs {
            for (b, name) in record.assistant_names.iter().enumerate() {
                if b != a && !name.is_empty() {
                    total += msg.matches(name.as_str()).count();
                }
            }
            for phrase in config.key_phrases.iter().filter(|p| !p.is_empty()) {
                total += msg.matches(phrase.as_str()).count();
            }
        }
    }
    total
}

fn passes_correctness(r: &ConversationRecord, _: &CurationConfig) -> bool {
    r.correct.iter().all(|&c| c)
}

fn passes_length(r: &ConversationRecord, c: &CurationConfig) -> bool {
    r.messages
        .iter()
        .all(|m| (c.min_messages..=c.max_messages).contains(&m.len()))
}

fn passes_interaction(r: &ConversationRecord, c: &CurationConfig) -> bool {
    interaction_score(r, c) > c.interaction_threshold_factor * r.lanes()
}

type Filter = fn(&ConversationRecord, &CurationConfig) -> bool;

/// The filters in application order.
pub const FILTERS: [(Rejection, Filter); 3] = [
    (Rejection::Correctness, passes_correctness),
    (Rejection::Length, passes_length),
    (Rejection::Interaction, passes_interaction),
];

/// Reason `record` is rejected, or `None` when it is kept.
pub fn check(record: &ConversationRecord, config: &CurationConfig) -> Option<Rejection> {
    if record.validate().is_err() {
        return Some(Rejection::Malformed);
    }
    FILTERS
        .iter()
        .find(|(_, f)| !f(record, config))
        .map(|(r, _)| *r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub kept: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
}

/// Parses JSON lines, one record per non-empty line; failures are kept per line.
pub fn read_records(text: &str) -> Vec<std::result::Result<ConversationRecord, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

/// Applies the filters to every record. Returns the kept records (input
/// order), the per-record outcome, and the summary report.
pub fn curate(
    records: &[std::result::Result<ConversationRecord, String>],
    config: &CurationConfig,
) -> Result<(
    Vec<ConversationRecord>,
    Vec<Option<Rejection>>,
    CurationReport,
)> {
    config.validate()?;
    let outcomes: Vec<Option<Rejection>> = records
        .iter()
        .map(|r| match r {
            Ok(rec) => check(rec, config),
            Err(_) => Some(Rejection::Parse),
        })
        .collect();
    let kept: Vec<ConversationRecord> = records
        .iter()
        .zip(&outcomes)
        .filter(|(_, o)| o.is_none())
        .filter_map(|(r, _)| r.as_ref().ok().cloned())
        .collect();
    let mut rejected_by_reason = BTreeMap::new();
    for r in outcomes.iter().flatten() {
        *rejected_by_reason
            .entry(r.as_str().to_string())
            .or_insert(0) += 1;
    }
    let report = CurationReport {
        kept: kept.len(),
        rejected_by_reason,
    };
    Ok((kept, outcomes, report))
}
