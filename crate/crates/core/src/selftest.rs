//! A fast built-in invariant suite, runnable from the command line to check
//! that a build computes what it should.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{cross_lane_attention, dense_oracle_attention, LaneLayout, MaskRule};
use crate::data::curation::{check, ConversationRecord, CurationConfig, Rejection};
use crate::engine::{decode_step, prefill, GenerationRequest, Prompt, SamplingConfig};
use crate::error::Result;
use crate::model::{
    backward_cross_entropy, forward, init_from_base, reference, LaneInit, LaneStrategy,
    ModelConfig, ModelParameters,
};
use crate::rope::{ntk_ramp, ramp_from_ratio, DEFAULT_RAMP_ALPHA, DEFAULT_RAMP_BETA};
use crate::tensor::Matrix;
use crate::training::{asymmetric_sigmoid, kto_loss, KtoConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, result: Result<(bool, String)>) -> CheckOutcome {
    match result {
        Ok((passed, detail)) => CheckOutcome {
            name,
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn tiny_model(strategy: LaneStrategy, bias_norm: f64) -> Result<ModelParameters> {
    let cfg = ModelConfig::base(24, 2, 2, 8, 32, 64)?;
    let base = ModelParameters::random(cfg, 17)?;
    init_from_base(&base, &LaneInit::new(strategy, bias_norm, 4))
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

fn rope_reduction() -> Result<(bool, String)> {
    let p = tiny_model(LaneStrategy::Ntk, 1000.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = random_tokens(&mut rng, 20, p.config.vocab_size);
    let layout = LaneLayout::from_lane_lengths(&[tokens.len()], 0)?;
    let lane = forward(&p, &tokens, &layout, MaskRule::default())?.logits;
    let plain = reference::forward_sequence(&p, &tokens)?;
    let diff = lane.max_abs_diff(&plain);
    Ok((diff < 1e-5, format!("max |diff| {diff:.2e}")))
}

fn within_lane_invariance() -> Result<(bool, String)> {
    let p = tiny_model(LaneStrategy::GroupThink, 1000.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lanes: Vec<Vec<u32>> = [7, 4, 9]
        .iter()
        .map(|&n| random_tokens(&mut rng, n, 24))
        .collect();
    let (flat, layout) = crate::attention::interleave(&lanes)?;
    let logits = forward(&p, &flat, &layout, MaskRule::within_lane())?.logits;
    let mut worst: f64 = 0.0;
    for (l, seq) in lanes.iter().enumerate() {
        let single = reference::forward_sequence(&p, seq)?;
        for (i, &idx) in layout.lane_indices(l).iter().enumerate() {
            for (a, b) in logits.row(idx).iter().zip(single.row(i)) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    Ok((worst < 1e-4, format!("max relative diff {worst:.2e}")))
}

fn oracle_equivalence() -> Result<(bool, String)> {
    let p = tiny_model(LaneStrategy::Ntk, 5.0)?;
    let lp = &p.config.lane_params;
    let w = lp.head_dim() + lp.bias_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..10 {
        let lengths: Vec<usize> = (0..1 + case % 4).map(|_| rng.gen_range(1..8)).collect();
        let layout = LaneLayout::from_lane_lengths(&lengths, 0)?;
        let n = layout.len();
        let mut m = |cols| {
            Matrix::from_vec(
                n,
                cols,
                (0..n * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        };
        let (q, k, v) = (m(w), m(w), m(6));
        for rule in [
            MaskRule::default(),
            MaskRule::within_lane(),
            MaskRule::interleaved(),
        ] {
            let fast = cross_lane_attention(&q, &k, &v, &layout, lp, rule, true)?;
            let slow = dense_oracle_attention(&q, &k, &v, &layout, lp, rule, true)?;
            worst = worst.max(fast.max_abs_diff(&slow));
        }
    }
    Ok((
        worst < 1e-5,
        format!("max |diff| {worst:.2e} over 30 cases"),
    ))
}

fn prefill_decode_consistency() -> Result<(bool, String)> {
    let p = tiny_model(LaneStrategy::Ntk, 1.0)?;
    let lanes = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let prompt = random_tokens(&mut rng, 5, 24);
    let request = GenerationRequest::new(
        Prompt::Shared(prompt.clone()),
        SamplingConfig::greedy(lanes, 8),
    );
    let (mut cache, mut logits) = prefill(&p, &request)?;
    let mut streams: Vec<Vec<u32>> = vec![prompt.clone(); lanes];
    let (flat, layout) = crate::attention::interleave(&streams)?;
    let full = forward(&p, &flat, &layout, MaskRule::default())?.logits;
    let mut worst: f64 = 0.0;
    for l in 0..lanes {
        let idx = *layout.lane_indices(l).last().expect("lane is non-empty");
        for (a, b) in logits.row(l).iter().zip(full.row(idx)) {
            worst = worst.max((a - b).abs());
        }
    }
    for _ in 0..8 {
        let feed: Vec<(usize, u32)> = (0..lanes).map(|l| (l, rng.gen_range(0..24))).collect();
        for &(l, t) in &feed {
            streams[l].push(t);
        }
        logits = decode_step(&p, &mut cache, &feed)?;
        let (flat, layout) = crate::attention::interleave(&streams)?;
        let full = forward(&p, &flat, &layout, MaskRule::default())?.logits;
        for l in 0..lanes {
            let idx = *layout.lane_indices(l).last().expect("lane is non-empty");
            for (a, b) in logits.row(l).iter().zip(full.row(idx)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((worst < 1e-8, format!("max |diff| {worst:.2e} over 8 steps")))
}

fn gradient_check() -> Result<(bool, String)> {
    let p = tiny_model(LaneStrategy::Ntk, 1.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = LaneLayout::from_lane_lengths(&[4, 3], 0)?;
    let tokens = random_tokens(&mut rng, layout.len(), 24);
    let targets = random_tokens(&mut rng, layout.len(), 24);
    let mask = vec![true; layout.len()];
    let loss = |q: &ModelParameters| -> Result<f64> {
        let t = forward(q, &tokens, &layout, MaskRule::default())?;
        Ok(backward_cross_entropy(q, &t, &targets, &mask)?.0)
    };
    let trace = forward(&p, &tokens, &layout, MaskRule::default())?;
    let grads = backward_cross_entropy(&p, &trace, &targets, &mask)?
        .1
        .to_arrays();
    let base = p.to_arrays();
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    // One random entry of every parameter array.
    for (a, values) in base.iter().enumerate() {
        let i = rng.gen_range(0..values.len());
        let shifted = |delta: f64| -> Result<f64> {
            let mut q = p.clone();
            let mut idx = 0;
            q.visit_mut(|_, _, arr| {
                if idx == a {
                    arr[i] += delta;
                }
                idx += 1;
            });
            loss(&q)
        };
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let analytic = grads[a][i];
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
    }
    Ok((worst < 1e-3, format!("worst relative error {worst:.2e}")))
}

fn ntk_ramp_values() -> Result<(bool, String)> {
    let (a, b) = (DEFAULT_RAMP_ALPHA, DEFAULT_RAMP_BETA);
    let ok = ramp_from_ratio(2.0, a, b)? == 0.0
        && ramp_from_ratio(40.0, a, b)? == 1.0
        && (ramp_from_ratio(18.0, a, b)? - 0.5).abs() < 1e-12
        && ntk_ramp(1.0, 4096, a, b)? == 1.0;
    Ok((ok, "r=2 -> 0, r=18 -> 0.5, r=40 -> 1".into()))
}

fn kto_values() -> Result<(bool, String)> {
    let cfg = KtoConfig::default();
    let (l, _) = kto_loss(&[100.0], &[false], &cfg)?;
    let ok = asymmetric_sigmoid(0.0) == 0.5
        && asymmetric_sigmoid(-2.0) == 2.5
        && (l + 6.65).abs() < 1e-12;
    Ok((
        ok,
        format!("loss for an undesirable sample at delta 100: {l}"),
    ))
}

fn curation_boundaries() -> Result<(bool, String)> {
    let cfg = CurationConfig::default();
    let record = |per_lane: usize, mentions: usize| {
        let names = vec!["Alice".to_string(), "Bob".to_string()];
        let mut messages = vec![vec!["working on it".to_string(); per_lane]; 2];
        for m in 0..mentions {
            messages[m % 2][m / 2 % per_lane] = format!("{} has a point", names[1 - m % 2]);
        }
        ConversationRecord {
            question: "q".into(),
            ground_truth: "1".into(),
            assistant_names: names,
            messages,
            final_answers: vec!["1".into(), "1".into()],
            correct: vec![true, true],
        }
    };
    let cases = [
        (record(10, 5), None),
        (record(30, 5), None),
        (record(10, 4), Some(Rejection::Interaction)),
        (record(9, 6), Some(Rejection::Length)),
        (record(31, 6), Some(Rejection::Length)),
    ];
    let ok = cases.iter().all(|(r, want)| check(r, &cfg) == *want);
    Ok((
        ok,
        "9/10/30/31 messages per assistant, scores 4 and 5 against 2N = 4".into(),
    ))
}

/// Runs every check; the order of the returned outcomes is fixed.
pub fn run() -> Vec<CheckOutcome> {
    vec![
        outcome("rope_reduction", rope_reduction()),
        outcome("within_lane_invariance", within_lane_invariance()),
        outcome("oracle_equivalence", oracle_equivalence()),
        outcome("prefill_decode_consistency", prefill_decode_consistency()),
        outcome("gradient_check", gradient_check()),
        outcome("ntk_ramp", ntk_ramp_values()),
        outcome("kto_values", kto_values()),
        outcome("curation_boundaries", curation_boundaries()),
    ]
}
