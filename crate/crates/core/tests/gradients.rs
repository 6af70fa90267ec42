//! Finite-difference check of the analytic gradients, per parameter family.

use lanerope::attention::{LaneLayout, MaskRule};
use lanerope::model::{
    backward_cross_entropy, forward, init_from_base, LaneInit, LaneStrategy, ModelConfig,
    ModelParameters, ParamFamily,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const SAMPLES: usize = 64;
const TOLERANCE: f64 = 1e-3;

fn flat_index(p: &ModelParameters, family: ParamFamily) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    p.visit(|name, fam, _, a| {
        if fam == family {
            out.extend((0..a.len()).map(|i| (name.to_string(), i)));
        }
    });
    out
}

fn get(p: &ModelParameters, name: &str, i: usize) -> f64 {
    let mut v = 0.0;
    p.visit(|n, _, _, a| {
        if n == name {
            v = a[i];
        }
    });
    v
}

fn set(p: &mut ModelParameters, name: &str, i: usize, value: f64) {
    p.visit_mut(|n, _, a| {
        if n == name {
            a[i] = value;
        }
    });
}

struct Problem {
    tokens: Vec<u32>,
    targets: Vec<u32>,
    mask: Vec<bool>,
    layout: LaneLayout,
    rule: MaskRule,
}

impl Problem {
    fn loss(&self, p: &ModelParameters) -> f64 {
        let trace = forward(p, &self.tokens, &self.layout, self.rule).unwrap();
        backward_cross_entropy(p, &trace, &self.targets, &self.mask)
            .unwrap()
            .0
    }
}

fn check(p: &ModelParameters, problem: &Problem, seed: u64) {
    let trace = forward(p, &problem.tokens, &problem.layout, problem.rule).unwrap();
    let (_, grads) = backward_cross_entropy(p, &trace, &problem.targets, &problem.mask).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for family in [
        ParamFamily::Weight,
        ParamFamily::Norm,
        ParamFamily::QkBias,
        ParamFamily::LaneFrequency,
    ] {
        let coords = flat_index(p, family);
        assert!(!coords.is_empty(), "{family:?} has no parameters");
        let mut worst: f64 = 0.0;
        for _ in 0..SAMPLES {
            let (name, i) = &coords[rng.gen_range(0..coords.len())];
            let x0 = get(p, name, *i);
            let mut q = p.clone();
            set(&mut q, name, *i, x0 + STEP);
            let up = problem.loss(&q);
            set(&mut q, name, *i, x0 - STEP);
            let down = problem.loss(&q);
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = get(&grads, name, *i);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel < TOLERANCE,
                "{family:?} {name}[{i}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"
            );
        }
        eprintln!("{family:?}: worst relative error {worst:e}");
    }
}

fn problem(p: &ModelParameters, lengths: &[usize], rule: MaskRule, seed: u64) -> Problem {
    let v = p.config.vocab_size as u32;
    let layout = LaneLayout::from_lane_lengths(lengths, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..layout.len()).map(|_| rng.gen_range(0..v)).collect();
    let targets = (0..layout.len()).map(|_| rng.gen_range(0..v)).collect();
    let mask = (0..layout.len()).map(|i| i % 4 != 0).collect();
    Problem {
        tokens,
        targets,
        mask,
        layout,
        rule,
    }
}

#[test]
fn gradients_match_finite_differences_across_lanes() {
    let cfg = ModelConfig::base(20, 2, 2, 6, 16, 32).unwrap();
    let base = ModelParameters::random(cfg, 41).unwrap();
    let mut p = init_from_base(&base, &LaneInit::new(LaneStrategy::Ntk, 1.5, 3)).unwrap();
    // Give the augmentation rows some weight so every path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = p.augmented_rows();
    for l in &mut p.layers {
        for &r in &rows {
            l.wq.row_mut(r)
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-0.2..0.2));
            l.wk.row_mut(r)
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-0.2..0.2));
        }
    }
    check(&p, &problem(&p, &[4, 3, 5], MaskRule::default(), 7), 11);
    check(&p, &problem(&p, &[3, 3, 3], MaskRule::interleaved(), 8), 12);
}

#[test]
fn gradients_match_with_tied_embeddings() {
    let mut cfg = ModelConfig::base(18, 1, 2, 4, 12, 32).unwrap();
    cfg.tied_embeddings = true;
    let base = ModelParameters::random(cfg, 3).unwrap();
    let p = init_from_base(&base, &LaneInit::new(LaneStrategy::GroupThink, 1.0, 2)).unwrap();
    check(&p, &problem(&p, &[5, 5], MaskRule::default(), 9), 13);
}
