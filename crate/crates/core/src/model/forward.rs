use crate::attention::{attend, visible_keys, Coord, LaneLayout, MaskRule};
use crate::error::{invalid, Error, Result};
use crate::rope;
use crate::tensor::{matmul_t, Matrix};

use super::{LayerParams, ModelConfig, ModelParameters};

/// Rotated keys and values per head, in flat order of the group.
#[derive(Debug, Clone)]
pub(crate) struct LayerKv {
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl LayerKv {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            k: (0..cfg.n_heads)
                .map(|_| Matrix::zeros(0, cfg.qk_head_dim()))
                .collect(),
            v: (0..cfg.n_heads)
                .map(|_| Matrix::zeros(0, cfg.head_dim))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub x_in: Matrix,
    pub inv_rms1: Vec<f64>,
    pub h1: Matrix,
    /// Rotated queries and keys, `[T, n_heads * (d + F)]`.
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// `probs[head][row]` aligned with the row's visible keys.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub attn: Matrix,
    pub x_mid: Matrix,
    pub inv_rms2: Vec<f64>,
    pub h2: Matrix,
    pub up: Matrix,
    pub act: Matrix,
}

/// Everything a backward pass needs from one full forward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<u32>,
    pub layout: LaneLayout,
    pub rule: MaskRule,
    pub(crate) visible: Vec<Vec<usize>>,
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) final_in: Matrix,
    pub(crate) inv_rms_final: Vec<f64>,
    pub(crate) final_h: Matrix,
    /// `[T, vocab_size]`, rows in flat order.
    pub logits: Matrix,
}

pub(crate) fn rms_norm(x: &Matrix, gain: &[f64], eps: f64) -> (Matrix, Vec<f64>) {
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let s = 1.0 / (ms + eps).sqrt();
        for ((o, v), g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = v * s * g;
        }
        inv.push(s);
    }
    (out, inv)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for r in 0..m.rows {
        for (x, bb) in m.row_mut(r).iter_mut().zip(b) {
            *x += bb;
        }
    }
}

/// Rotates the per-head query/key rows in place for the given coordinates.
pub(crate) fn rotate_qk(cfg: &ModelConfig, omega: &[f64], m: &mut Matrix, coords: &[Coord]) {
    let lp = &cfg.lane_params;
    let (d, w) = (cfg.head_dim, cfg.qk_head_dim());
    for (r, c) in coords.iter().enumerate() {
        let angles = rope::merged_angles(&lp.rope.theta, omega, c.step, c.lane);
        let bias = rope::bias_angles(&lp.bias_freqs, c.lane);
        let row = m.row_mut(r);
        for h in 0..cfg.n_heads {
            let head = &mut row[h * w..(h + 1) * w];
            rope::rotate_planes(&mut head[..d], &angles);
            rope::rotate_planes(&mut head[d..], &bias);
        }
    }
}

/// Runs one transformer block on new rows.
///
/// Row `r` belongs to the group whose cache is `kvs[group[r]]`. Every row's
/// key and value are appended to its group's cache first; the row then
/// attends over `visible[r]`, indices into that cache.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_layer(
    cfg: &ModelConfig,
    p: &LayerParams,
    x: &Matrix,
    coords: &[Coord],
    visible: &[Vec<usize>],
    kvs: &mut [&mut LayerKv],
    group: &[usize],
    keep_trace: bool,
) -> (Matrix, Option<LayerTrace>) {
    let (d, w, heads) = (cfg.head_dim, cfg.qk_head_dim(), cfg.n_heads);
    let (h1, inv_rms1) = rms_norm(x, &p.attn_norm, cfg.norm_eps);
    let mut q = matmul_t(&h1, &p.wq);
    add_bias(&mut q, &p.bq);
    let mut k = matmul_t(&h1, &p.wk);
    add_bias(&mut k, &p.bk);
    let v = matmul_t(&h1, &p.wv);
    rotate_qk(cfg, &p.omega, &mut q, coords);
    rotate_qk(cfg, &p.omega, &mut k, coords);

    for r in 0..x.rows {
        let kv = &mut kvs[group[r]];
        for h in 0..heads {
            kv.k[h].push_row(&k.row(r)[h * w..(h + 1) * w]);
            kv.v[h].push_row(&v.row(r)[h * d..(h + 1) * d]);
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = Matrix::zeros(x.rows, heads * d);
    let mut probs = vec![Vec::with_capacity(if keep_trace { x.rows } else { 0 }); heads];
    for r in 0..x.rows {
        let kv = &kvs[group[r]];
        for h in 0..heads {
            let qh = &q.row(r)[h * w..(h + 1) * w];
            let out = &mut attn.row_mut(r)[h * d..(h + 1) * d];
            let pr = attend(qh, &kv.k[h], &kv.v[h], &visible[r], scale, out);
            if keep_trace {
                probs[h].push(pr);
            }
        }
    }

    let a = matmul_t(&attn, &p.wo);
    let mut x_mid = x.clone();
    for (m, av) in x_mid.data.iter_mut().zip(&a.data) {
        *m += av;
    }
    let (h2, inv_rms2) = rms_norm(&x_mid, &p.mlp_norm, cfg.norm_eps);
    let up = matmul_t(&h2, &p.w_up);
    let mut act = up.clone();
    for u in act.data.iter_mut() {
        *u *= sigmoid(*u);
    }
    let down = matmul_t(&act, &p.w_down);
    let mut out = x_mid.clone();
    for (o, dv) in out.data.iter_mut().zip(&down.data) {
        *o += dv;
    }

    let trace = keep_trace.then(|| LayerTrace {
        x_in: x.clone(),
        inv_rms1,
        h1,
        q,
        k,
        v,
        probs,
        attn,
        x_mid,
        inv_rms2,
        h2,
        up,
        act,
    });
    (out, trace)
}

pub(crate) fn embed_rows(params: &ModelParameters, tokens: &[u32]) -> Result<Matrix> {
    let cfg = &params.config;
    let mut x = Matrix::zeros(tokens.len(), cfg.model_dim);
    for (r, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        if t >= cfg.vocab_size {
            return invalid(format!(
                "token id {t} outside vocabulary of {}",
                cfg.vocab_size
            ));
        }
        x.row_mut(r).copy_from_slice(params.embed.row(t));
    }
    Ok(x)
}

pub(crate) fn logits_from_hidden(
    params: &ModelParameters,
    x: &Matrix,
) -> (Matrix, Vec<f64>, Matrix) {
    let (h, inv) = rms_norm(x, &params.final_norm, params.config.norm_eps);
    let logits = matmul_t(&h, params.unembedding());
    (h, inv, logits)
}

pub(crate) fn check_layout(
    cfg: &ModelConfig,
    tokens_len: usize,
    layout: &LaneLayout,
) -> Result<()> {
    if tokens_len != layout.len() {
        return invalid(format!(
            "{tokens_len} tokens given for a layout of {} positions",
            layout.len()
        ));
    }
    layout.validate()?;
    if let Some(c) = layout.coords.iter().find(|c| c.step >= cfg.max_steps) {
        return Err(Error::Budget(format!(
            "step {} exceeds the model's max_steps {}",
            c.step, cfg.max_steps
        )));
    }
    Ok(())
}

/// Full forward over a flat token list; keeps the activations for backward.
pub fn forward(
    params: &ModelParameters,
    tokens: &[u32],
    layout: &LaneLayout,
    rule: MaskRule,
) -> Result<ForwardTrace> {
    let cfg = &params.config;
    check_layout(cfg, tokens.len(), layout)?;
    let visible: Vec<Vec<usize>> = (0..layout.len())
        .map(|t| visible_keys(layout, t, rule))
        .collect();
    let mut x = embed_rows(params, tokens)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for p in &params.layers {
        let mut kv = LayerKv::new(cfg);
        let group = vec![0; tokens.len()];
        let (out, trace) = run_layer(
            cfg,
            p,
            &x,
            &layout.coords,
            &visible,
            &mut [&mut kv],
            &group,
            true,
        );
        layers.push(trace.expect("trace requested"));
        x = out;
    }
    let (final_h, inv_rms_final, logits) = logits_from_hidden(params, &x);
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        layout: layout.clone(),
        rule,
        visible,
        layers,
        final_in: x,
        inv_rms_final,
        final_h,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_from_base, LaneInit, LaneStrategy, ModelParameters};
    use crate::rope::fourier_bias_value;

    fn small_base() -> ModelParameters {
        let cfg = ModelConfig::base(40, 2, 2, 8, 32, 64).unwrap();
        ModelParameters::random(cfg, 17).unwrap()
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = small_base();
        let layout = LaneLayout::rectangular(2, 3).unwrap();
        assert!(matches!(
            forward(&p, &[1, 2, 3], &layout, MaskRule::default()),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            forward(&p, &[1, 2, 3, 4, 5, 99], &layout, MaskRule::default()),
            Err(Error::InvalidParameter(_))
        ));
        let long = LaneLayout::rectangular(1, 65).unwrap();
        assert!(matches!(
            forward(&p, &vec![1; 65], &long, MaskRule::default()),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let p = init_from_base(
            &small_base(),
            &LaneInit::new(LaneStrategy::GroupThink, 3.0, 2),
        )
        .unwrap();
        let layout = LaneLayout::rectangular(2, 6).unwrap();
        let tokens: Vec<u32> = (0..12).map(|i| (i * 7 % 40) as u32).collect();
        let a = forward(&p, &tokens, &layout, MaskRule::default()).unwrap();
        let b = forward(&p, &tokens, &layout, MaskRule::default()).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
        assert_eq!(a.logits.cols, 40);
    }

    #[test]
    fn single_token_logits_follow_value_path() {
        // With one visible key the attention output is that token's value.
        let cfg = ModelConfig::base(16, 1, 1, 8, 12, 8).unwrap();
        let p = ModelParameters::random(cfg, 4).unwrap();
        let layout = LaneLayout::rectangular(1, 1).unwrap();
        let got = forward(&p, &[5], &layout, MaskRule::default()).unwrap();

        let c = &p.config;
        let l = &p.layers[0];
        let x = Matrix::from_rows(&[p.embed.row(5).to_vec()]);
        let (h1, _) = rms_norm(&x, &l.attn_norm, c.norm_eps);
        let v = matmul_t(&h1, &l.wv);
        let a = matmul_t(&v, &l.wo);
        let mut x2 = x.clone();
        x2.data.iter_mut().zip(&a.data).for_each(|(s, t)| *s += t);
        let (h2, _) = rms_norm(&x2, &l.mlp_norm, c.norm_eps);
        let mut up = matmul_t(&h2, &l.w_up);
        up.data.iter_mut().for_each(|u| *u *= sigmoid(*u));
        let down = matmul_t(&up, &l.w_down);
        x2.data
            .iter_mut()
            .zip(&down.data)
            .for_each(|(s, t)| *s += t);
        let (_, _, logits) = logits_from_hidden(&p, &x2);
        assert!(got.logits.max_abs_diff(&logits) < 1e-12);
    }

    #[test]
    fn zero_augmentation_adds_bias_to_scores() {
        let base = small_base();
        let p = init_from_base(&base, &LaneInit::new(LaneStrategy::GroupThink, 2.0, 2)).unwrap();
        let layout = LaneLayout::rectangular(2, 4).unwrap();
        let tokens: Vec<u32> = (0..8).map(|i| (3 * i + 1) as u32).collect();
        let trace = forward(&p, &tokens, &layout, MaskRule::default()).unwrap();
        let cfg = &p.config;
        let lp = &cfg.lane_params;
        let (d, w) = (cfg.head_dim, cfg.qk_head_dim());
        let lt = &trace.layers[0];
        for a in 0..layout.len() {
            for b in 0..layout.len() {
                let (ca, cb) = (layout.coords[a], layout.coords[b]);
                let bias: f64 = lt.q.row(a)[d..w]
                    .iter()
                    .zip(&lt.k.row(b)[d..w])
                    .map(|(x, y)| x * y)
                    .sum();
                let want = fourier_bias_value(
                    &lp.bias_coeffs,
                    &lp.bias_freqs,
                    ca.lane as i64 - cb.lane as i64,
                )
                .unwrap();
                assert!((bias - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_lane_matches_plain_rope_reference() {
        let base = small_base();
        let tokens: Vec<u32> = (0..9).map(|i| (i * 11 % 40) as u32).collect();
        let layout = LaneLayout::rectangular(1, 9).unwrap();
        let want = crate::model::reference::forward_sequence(&base, &tokens).unwrap();
        let got = forward(&base, &tokens, &layout, MaskRule::default()).unwrap();
        assert!(got.logits.max_abs_diff(&want) < 1e-10);

        let lane = init_from_base(&base, &LaneInit::new(LaneStrategy::Ntk, 1000.0, 4)).unwrap();
        let got = forward(&lane, &tokens, &layout, MaskRule::default()).unwrap();
        assert!(got.logits.max_abs_diff(&want) < 1e-8);
    }

    #[test]
    fn augmentation_matches_analytic_bias_reference() {
        let p = init_from_base(
            &small_base(),
            &LaneInit::new(LaneStrategy::GroupThink, 2.5, 3),
        )
        .unwrap();
        let layout = LaneLayout::from_lane_lengths(&[4, 3, 5], 0).unwrap();
        let tokens: Vec<u32> = (0..layout.len()).map(|i| (i * 13 % 40) as u32).collect();
        for rule in [
            MaskRule::default(),
            MaskRule::interleaved(),
            MaskRule::within_lane(),
        ] {
            let got = forward(&p, &tokens, &layout, rule).unwrap();
            let want = crate::model::reference::forward_lanes_with_analytic_bias(
                &p, &tokens, &layout, rule,
            )
            .unwrap();
            assert!(got.logits.max_abs_diff(&want) < 1e-9);
        }
    }
}
