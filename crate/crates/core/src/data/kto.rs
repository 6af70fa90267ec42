//! Preference groups from a scripted noisy solver.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gen_collab_episode, vocab, CollabConfig};
use crate::error::{invalid, Result};

/// One KTO training unit: `N` completions of the same prompt, each labelled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceGroup {
    pub query_id: u64,
    pub prompt: Vec<u32>,
    pub completions: Vec<Vec<u32>>,
    pub desirable: Vec<bool>,
}

impl PreferenceGroup {
    pub fn validate(&self) -> Result<()> {
        let n = self.completions.len();
        if !(2..=4).contains(&n) {
            return invalid(format!(
                "preference group of {n} completions; expected 2 to 4"
            ));
        }
        if self.desirable.len() != n {
            return invalid("one label per completion is required");
        }
        if !self.desirable.iter().any(|&d| d) {
            return invalid(format!(
                "query {} group has no desirable completion",
                self.query_id
            ));
        }
        if self.prompt.is_empty() || self.completions.iter().any(Vec::is_empty) {
            return invalid("prompt and completions must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KtoDataConfig {
    pub queries: usize,
    #[serde(default = "default_completions")]
    pub completions_per_query: usize,
    /// Each query's solver accuracy is drawn uniformly from this range.
    #[serde(default = "default_accuracy_range")]
    pub accuracy_range: (f64, f64),
    #[serde(default = "default_group_sizes")]
    pub group_sizes: Vec<usize>,
    /// Facts per query; the prompt shows all of them.
    #[serde(default = "default_facts")]
    pub facts: usize,
    #[serde(default)]
    pub task: CollabConfig,
}

fn default_completions() -> usize {
    8
}

fn default_accuracy_range() -> (f64, f64) {
    (0.0, 0.8)
}

fn default_group_sizes() -> Vec<usize> {
    vec![2, 3, 4]
}

fn default_facts() -> usize {
    2
}

impl KtoDataConfig {
    pub fn new(queries: usize) -> Self {
        Self {
            queries,
            completions_per_query: default_completions(),
            accuracy_range: default_accuracy_range(),
            group_sizes: default_group_sizes(),
            facts: default_facts(),
            task: CollabConfig::default(),
        }
    }
}

/// Full-information prompt: every fact, then the query.
fn query_prompt(facts: &[(u32, u32)]) -> Vec<u32> {
    let mut p = vec![vocab::BOS];
    for &(k, v) in facts {
        p.extend([vocab::FACT, k, v]);
    }
    p.push(vocab::QUERY);
    p.extend(facts.iter().map(|f| f.0));
    p.push(vocab::SEP);
    p
}

/// Keeps a query when it has at least one and at most half correct completions.
pub fn keep_query(correct: usize, total: usize) -> bool {
    correct >= 1 && 2 * correct <= total
}

/// Splits labelled completions into groups whose sizes come from `sizes`,
/// each holding at least one correct completion. Every completion is used
/// at most once; leftovers that cannot form a valid group are dropped.
pub fn group_completions(labels: &[bool], sizes: &[usize], rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut correct: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut wrong: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    correct.shuffle(rng);
    wrong.shuffle(rng);
    let min = sizes.iter().copied().min().unwrap_or(2);
    let mut groups = Vec::new();
    while let Some(anchor) = correct.pop() {
        let remaining = correct.len() + wrong.len() + 1;
        let choices: Vec<usize> = sizes.iter().copied().filter(|&s| s <= remaining).collect();
        let Some(&size) = choices.choose(rng) else {
            break;
        };
        if size < min {
            break;
        }
        let mut group = vec![anchor];
        let mut pool: Vec<usize> = wrong.drain(..).chain(correct.drain(..)).collect();
        pool.shuffle(rng);
        group.extend(pool.drain(..size - 1));
        for i in pool {
            if labels[i] {
                correct.push(i);
            } else {
                wrong.push(i);
            }
        }
        group.sort_unstable();
        groups.push(group);
    }
    groups
}

/// Preference groups built from a noisy solver over collaboration tasks.
pub fn gen_kto_dataset(seed: u64, config: &KtoDataConfig) -> Result<Vec<PreferenceGroup>> {
    if config.group_sizes.is_empty() || config.group_sizes.iter().any(|s| !(2..=4).contains(s)) {
        return invalid("group sizes must be drawn from {2, 3, 4}");
    }
    let (lo, hi) = config.accuracy_range;
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return invalid("accuracy range must satisfy 0 <= lo <= hi <= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for q in 0..config.queries as u64 {
        let episode = gen_collab_episode(rng.gen(), config.facts.max(2), &config.task)?;
        let prompt = query_prompt(&episode.task.facts);
        let accuracy = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let range = config.task.value_range;
        let (completions, labels): (Vec<Vec<u32>>, Vec<bool>) = (0..config.completions_per_query)
            .map(|_| {
                let ok = rng.gen_bool(accuracy);
                let answer = if ok {
                    episode.answer
                } else {
                    (episode.answer + rng.gen_range(1..range)) % range
                };
                (vec![vocab::ANS, answer, vocab::EOS], ok)
            })
            .unzip();
        let correct = labels.iter().filter(|&&l| l).count();
        if !keep_query(correct, labels.len()) {
            continue;
        }
        for group in group_completions(&labels, &config.group_sizes, &mut rng) {
            out.push(PreferenceGroup {
                query_id: q,
                prompt: prompt.clone(),
                completions: group.iter().map(|&i| completions[i].clone()).collect(),
                desirable: group.iter().map(|&i| labels[i]).collect(),
            });
        }
    }
    Ok(out)
}
