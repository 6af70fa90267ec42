//! Answer extraction, majority voting and the maj@k summary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Payload following the last occurrence of `marker`. A marker with no
/// payload (end of stream, another marker, or the end-of-sequence token)
/// yields `None`.
pub fn extract_answer(tokens: &[u32], marker: u32, eos: Option<u32>) -> Option<u32> {
    let pos = tokens.iter().rposition(|&t| t == marker)?;
    let payload = *tokens.get(pos + 1)?;
    (Some(payload) != eos).then_some(payload)
}

/// Most frequent present answer; ties go to the answer seen first.
pub fn majority_vote<T: Eq + std::hash::Hash + Clone>(answers: &[Option<T>]) -> Option<T> {
    let mut counts: HashMap<&T, (usize, usize)> = HashMap::new();
    for (i, a) in answers.iter().enumerate() {
        if let Some(a) = a {
            counts.entry(a).or_insert((0, i)).0 += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))
        .map(|(a, _)| a.clone())
}

/// Why a lane stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Eos,
    Budget,
}

/// One line of the generation results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneRecord {
    pub query_id: u64,
    pub group_id: u64,
    pub lane_id: u64,
    pub tokens: Vec<u32>,
    pub answer: Option<u32>,
    pub finish_reason: FinishReason,
    /// Ground truth, when the query carried one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajSummary {
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub num_queries: usize,
    pub samples_per_query: usize,
}

/// maj@k: per query, the samples (ordered by group, then lane) are split into
/// consecutive blocks of `k`; each block scores 1 when its majority answer
/// equals the ground truth. The value averages blocks within a query, then
/// queries.
pub fn maj_at_k(records: &[LaneRecord], k: usize) -> Result<MajSummary> {
    if k == 0 {
        return invalid("k must be positive");
    }
    let mut order: Vec<u64> = Vec::new();
    let mut by_query: HashMap<u64, Vec<&LaneRecord>> = HashMap::new();
    for r in records {
        by_query
            .entry(r.query_id)
            .or_insert_with(|| {
                order.push(r.query_id);
                Vec::new()
            })
            .push(r);
    }
    if order.is_empty() {
        return invalid("no results to evaluate");
    }
    let mut samples = None;
    let mut total = 0.0;
    for q in &order {
        let rs = by_query.get_mut(q).expect("query recorded");
        rs.sort_by_key(|r| (r.group_id, r.lane_id));
        let m = rs.len();
        if *samples.get_or_insert(m) != m {
            return invalid(format!("query {q} has {m} samples, others differ"));
        }
        if m % k != 0 {
            return invalid(format!(
                "query {q} has {m} samples, not a multiple of k={k}"
            ));
        }
        let expected = rs[0].expected;
        let Some(expected) = expected else {
            return invalid(format!("query {q} has no expected answer"));
        };
        if rs.iter().any(|r| r.expected != Some(expected)) {
            return invalid(format!("query {q} has inconsistent expected answers"));
        }
        let blocks = m / k;
        let hits = rs
            .chunks(k)
            .filter(|chunk| {
                let answers: Vec<Option<u32>> = chunk.iter().map(|r| r.answer).collect();
                majority_vote(&answers) == Some(expected)
            })
            .count();
        total += hits as f64 / blocks as f64;
    }
    Ok(MajSummary {
        metric: format!("maj@{k}"),
        k,
        value: total / order.len() as f64,
        num_queries: order.len(),
        samples_per_query: samples.unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// String-level oracle: render tokens as text and take what follows the
    /// last "m" delimiter.
    fn string_oracle(tokens: &[u32], marker: u32, eos: u32) -> Option<u32> {
        let text: Vec<String> = tokens
            .iter()
            .map(|&t| {
                if t == marker {
                    "m".to_string()
                } else {
                    t.to_string()
                }
            })
            .collect();
        let joined = format!(" {} ", text.join(" "));
        let tail = joined.rsplit(" m ").next()?;
        if tail.len() == joined.len() {
            return None;
        }
        let first = tail.split_whitespace().next()?;
        let v: u32 = first.parse().ok()?;
        (v != eos).then_some(v)
    }

    #[test]
    fn extraction_examples() {
        let m = 103;
        assert_eq!(
            extract_answer(&[5, m, 1, 9, m, 2, 102], m, Some(102)),
            Some(2)
        );
        assert_eq!(extract_answer(&[5, 6, 7], m, None), None);
        assert_eq!(extract_answer(&[5, m], m, None), None);
        assert_eq!(extract_answer(&[m, 4, m, 102], m, Some(102)), None);
        assert_eq!(extract_answer(&[m, m], m, None), None);
    }

    #[test]
    fn extraction_matches_string_oracle_on_all_placements() {
        let (m, eos) = (9, 8);
        // Every stream of length <= 5 over {1, 2, m, eos}.
        let alphabet = [1, 2, m, eos];
        for len in 0..=5u32 {
            for code in 0..4usize.pow(len) {
                let mut c = code;
                let tokens: Vec<u32> = (0..len)
                    .map(|_| {
                        let t = alphabet[c % 4];
                        c /= 4;
                        t
                    })
                    .collect();
                assert_eq!(
                    extract_answer(&tokens, m, Some(eos)),
                    string_oracle(&tokens, m, eos),
                    "{tokens:?}"
                );
            }
        }
    }

    #[test]
    fn voting_examples() {
        assert_eq!(
            majority_vote(&[Some('a'), Some('a'), Some('b'), None]),
            Some('a')
        );
        assert_eq!(majority_vote::<char>(&[None, None, None, None]), None);
        assert_eq!(
            majority_vote(&[Some('a'), Some('b'), Some('b'), Some('a')]),
            Some('a')
        );
        assert_eq!(
            majority_vote(&[None, Some('b'), Some('a'), Some('a')]),
            Some('a')
        );
    }

    /// Direct transcription of the rule for exhaustive comparison.
    fn vote_oracle(answers: &[Option<u8>]) -> Option<u8> {
        let present: Vec<(usize, u8)> = answers
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|a| (i, a)))
            .collect();
        let count = |x: u8| present.iter().filter(|p| p.1 == x).count();
        let best = present.iter().map(|p| count(p.1)).max()?;
        present.iter().find(|p| count(p.1) == best).map(|p| p.1)
    }

    #[test]
    fn voting_matches_rule_exhaustively() {
        for code in 0..4usize.pow(5) {
            let mut c = code;
            let answers: Vec<Option<u8>> = (0..5)
                .map(|_| {
                    let v = c % 4;
                    c /= 4;
                    (v < 3).then_some(v as u8)
                })
                .collect();
            assert_eq!(
                majority_vote(&answers),
                vote_oracle(&answers),
                "{answers:?}"
            );
        }
    }

    proptest! {
        #[test]
        fn unanimity_wins(answer in 0u32..50, mask in prop::collection::vec(any::<bool>(), 1..10)) {
            let answers: Vec<Option<u32>> = mask.iter().map(|&b| b.then_some(answer)).collect();
            let want = mask.iter().any(|&b| b).then_some(answer);
            prop_assert_eq!(majority_vote(&answers), want);
        }
    }

    fn record(q: u64, g: u64, l: u64, answer: Option<u32>, expected: u32) -> LaneRecord {
        LaneRecord {
            query_id: q,
            group_id: g,
            lane_id: l,
            tokens: vec![],
            answer,
            finish_reason: FinishReason::Eos,
            expected: Some(expected),
        }
    }

    #[test]
    fn maj_at_k_averages_blocks_then_queries() {
        let mut rs = Vec::new();
        // Query 0: blocks (7,7,1,-) hit, (1,1,7,7) miss on tie-break to 1.
        for (i, a) in [
            Some(7),
            Some(7),
            Some(1),
            None,
            Some(1),
            Some(1),
            Some(7),
            Some(7),
        ]
        .into_iter()
        .enumerate()
        {
            rs.push(record(0, i as u64 / 2, i as u64 % 2, a, 7));
        }
        // Query 1: both blocks empty or wrong.
        for (i, a) in [None, None, None, None, Some(3), Some(4), Some(4), None]
            .into_iter()
            .enumerate()
        {
            rs.push(record(1, i as u64 / 2, i as u64 % 2, a, 3));
        }
        let s = maj_at_k(&rs, 4).unwrap();
        assert_eq!(s.value, 0.25);
        assert_eq!(
            (s.num_queries, s.samples_per_query, s.metric.as_str()),
            (2, 8, "maj@4")
        );
        assert!(maj_at_k(&rs, 3).is_err());
    }
}
