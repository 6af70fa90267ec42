//! Synthetic data: the split-fact collaboration task, noisy preference groups
//! for KTO, and the conversation curation filters.

pub mod curation;
pub mod kto;

pub use curation::{
    curate, interaction_score, read_records, ConversationRecord, CurationConfig, CurationReport,
    Rejection,
};
pub use kto::{gen_kto_dataset, KtoDataConfig, PreferenceGroup};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Token ids of the toy vocabulary: plain integers `0..100` plus markers.
pub mod vocab {
    pub const NUM_PLAIN: u32 = 100;
    pub const PAD: u32 = 100;
    pub const BOS: u32 = 101;
    pub const EOS: u32 = 102;
    /// Answer marker; the token after it is the answer.
    pub const ANS: u32 = 103;
    pub const FACT: u32 = 104;
    pub const QUERY: u32 = 105;
    pub const SEP: u32 = 106;
    pub const SIZE: usize = 128;
}

/// Description of the toy vocabulary, stored next to token-level datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub size: usize,
    pub plain_tokens: u32,
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub answer_marker: u32,
    pub fact: u32,
    pub query: u32,
    pub sep: u32,
}

impl Default for VocabManifest {
    fn default() -> Self {
        Self {
            size: vocab::SIZE,
            plain_tokens: vocab::NUM_PLAIN,
            pad: vocab::PAD,
            bos: vocab::BOS,
            eos: vocab::EOS,
            answer_marker: vocab::ANS,
            fact: vocab::FACT,
            query: vocab::QUERY,
            sep: vocab::SEP,
        }
    }
}

/// Parameters of the split-fact task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabConfig {
    /// Facts take values in `0..value_range`; the answer is their sum modulo it.
    #[serde(default = "default_value_range")]
    pub value_range: u32,
    /// Keys are drawn without replacement from `0..key_range`.
    #[serde(default = "default_key_range")]
    pub key_range: u32,
}

fn default_value_range() -> u32 {
    10
}

fn default_key_range() -> u32 {
    vocab::NUM_PLAIN
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            value_range: default_value_range(),
            key_range: default_key_range(),
        }
    }
}

impl CollabConfig {
    pub fn validate(&self, lanes: usize) -> Result<()> {
        if self.value_range < 2 || self.value_range > vocab::NUM_PLAIN {
            return invalid(format!("value_range must lie in [2, {}]", vocab::NUM_PLAIN));
        }
        if (self.key_range as usize) < lanes || self.key_range > vocab::NUM_PLAIN {
            return invalid(
                "key_range must cover one distinct key per lane and stay in the plain vocabulary",
            );
        }
        Ok(())
    }
}

/// Key/value facts, one shard per lane, and a query over all keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyCollabTask {
    /// `facts[lane] = (key, value)`; lane `l` only ever sees its own fact.
    pub facts: Vec<(u32, u32)>,
    pub value_range: u32,
}

impl ToyCollabTask {
    pub fn answer(&self) -> u32 {
        self.answer_with(&self.facts.iter().map(|f| f.1).collect::<Vec<_>>())
    }

    /// The answer if the facts held `values` instead.
    pub fn answer_with(&self, values: &[u32]) -> u32 {
        values.iter().sum::<u32>() % self.value_range
    }

    pub fn query_keys(&self) -> Vec<u32> {
        self.facts.iter().map(|f| f.0).collect()
    }

    /// `[BOS, FACT, key, value, QUERY, keys.., SEP]` for `lane`.
    pub fn lane_prompt(&self, lane: usize) -> Vec<u32> {
        let (k, v) = self.facts[lane];
        let mut p = vec![vocab::BOS, vocab::FACT, k, v, vocab::QUERY];
        p.extend(self.query_keys());
        p.push(vocab::SEP);
        p
    }

    /// `[ANS, answer, EOS]`.
    pub fn target(&self) -> Vec<u32> {
        vec![vocab::ANS, self.answer(), vocab::EOS]
    }

    /// Answers reachable when only `lane`'s fact is known.
    pub fn answers_consistent_with_lane(&self, lane: usize) -> Vec<u32> {
        let others = self.facts.len() - 1;
        let mut out = Vec::new();
        let combos = (self.value_range as usize).pow(others as u32);
        for code in 0..combos {
            let mut c = code;
            let values: Vec<u32> = (0..self.facts.len())
                .map(|l| {
                    if l == lane {
                        self.facts[l].1
                    } else {
                        let v = (c % self.value_range as usize) as u32;
                        c /= self.value_range as usize;
                        v
                    }
                })
                .collect();
            let a = self.answer_with(&values);
            if !out.contains(&a) {
                out.push(a);
            }
        }
        out.sort_unstable();
        out
    }
}

/// One episode: per-lane prompts and targets plus the shared answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollabEpisode {
    pub id: u64,
    pub task: ToyCollabTask,
    pub prompts: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub answer: u32,
}

impl CollabEpisode {
    /// Prompt followed by target, per lane.
    pub fn sequences(&self) -> Vec<Vec<u32>> {
        self.prompts
            .iter()
            .zip(&self.targets)
            .map(|(p, t)| p.iter().chain(t).copied().collect())
            .collect()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts[0].len()
    }
}

/// Deterministic episode for `seed` with `lanes` lanes.
pub fn gen_collab_episode(seed: u64, lanes: usize, config: &CollabConfig) -> Result<CollabEpisode> {
    if lanes < 2 {
        return invalid("the collaboration task needs at least 2 lanes");
    }
    config.validate(lanes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<u32> = (0..config.key_range).collect();
    keys.shuffle(&mut rng);
    let facts = (0..lanes)
        .map(|l| (keys[l], rng.gen_range(0..config.value_range)))
        .collect();
    let task = ToyCollabTask {
        facts,
        value_range: config.value_range,
    };
    Ok(CollabEpisode {
        id: seed,
        prompts: (0..lanes).map(|l| task.lane_prompt(l)).collect(),
        targets: vec![task.target(); lanes],
        answer: task.answer(),
        task,
    })
}

/// `count` episodes with seeds derived from `seed`.
pub fn gen_collab_dataset(
    seed: u64,
    count: usize,
    lanes: usize,
    config: &CollabConfig,
) -> Result<Vec<CollabEpisode>> {
    (0..count as u64)
        .map(|i| {
            let mut e =
                gen_collab_episode(seed.wrapping_mul(1_000_003).wrapping_add(i), lanes, config)?;
            e.id = i;
            Ok(e)
        })
        .collect()
}
