//! Straightforward reference implementations used as test oracles and as the
//! single-lane baseline in benchmarks.
//!
//! Only the non-augmented rows of the query/key projections are read, so a
//! LaneRoPE model and the base model it was initialised from run identically
//! here. Nothing in this module shares code with the layout-aware path.

use crate::attention::{visible, Coord, LaneLayout, MaskRule};
use crate::error::{invalid, Result};
use crate::rope::{fourier_bias_value, lane_rotate, rotate};
use crate::tensor::Matrix;

use super::{LayerParams, ModelParameters};

fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn linear(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows).map(|o| vec_dot(w.row(o), x)).collect()
}

fn rms(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, gg)| v * s * gg).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

struct HeadProj {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Base (non-augmented) query/key/value per head for one input row.
fn project(params: &ModelParameters, layer: &LayerParams, h: &[f64]) -> HeadProj {
    let c = &params.config;
    let (d, w) = (c.head_dim, c.qk_head_dim());
    let mut out = HeadProj {
        q: Vec::new(),
        k: Vec::new(),
        v: Vec::new(),
    };
    for head in 0..c.n_heads {
        let q = (0..d)
            .map(|r| vec_dot(layer.wq.row(head * w + r), h) + layer.bq[head * w + r])
            .collect();
        let k = (0..d)
            .map(|r| vec_dot(layer.wk.row(head * w + r), h) + layer.bk[head * w + r])
            .collect();
        let v = (0..d)
            .map(|r| vec_dot(layer.wv.row(head * d + r), h))
            .collect();
        out.q.push(q);
        out.k.push(k);
        out.v.push(v);
    }
    out
}

fn block_tail(params: &ModelParameters, layer: &LayerParams, x: &[f64], attn: &[f64]) -> Vec<f64> {
    let eps = params.config.norm_eps;
    let a = linear(&layer.wo, attn);
    let mid: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
    let h2 = rms(&mid, &layer.mlp_norm, eps);
    let act: Vec<f64> = linear(&layer.w_up, &h2).into_iter().map(silu).collect();
    let down = linear(&layer.w_down, &act);
    mid.iter().zip(&down).map(|(p, q)| p + q).collect()
}

fn final_logits(params: &ModelParameters, x: &[f64]) -> Vec<f64> {
    let h = rms(x, &params.final_norm, params.config.norm_eps);
    linear(params.unembedding(), &h)
}

fn attend(scores: Vec<f64>, values: &[&Vec<f64>]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in e.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w / z * x;
        }
    }
    out
}

fn check_tokens(params: &ModelParameters, tokens: &[u32]) -> Result<()> {
    match tokens
        .iter()
        .find(|&&t| t as usize >= params.config.vocab_size)
    {
        Some(t) => invalid(format!("token {t} outside vocabulary")),
        None => Ok(()),
    }
}

/// Plain causal RoPE forward of a single sequence; returns `[T, vocab]` logits.
pub fn forward_sequence(params: &ModelParameters, tokens: &[u32]) -> Result<Matrix> {
    check_tokens(params, tokens)?;
    let mut decoder = ReferenceDecoder::new(params);
    let rows = tokens
        .iter()
        .map(|&t| decoder.step(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows))
}

/// Token-by-token decoder with its own key/value cache.
pub struct ReferenceDecoder<'a> {
    params: &'a ModelParameters,
    /// `keys[layer][head][position]`, already rotated.
    keys: Vec<Vec<Vec<Vec<f64>>>>,
    values: Vec<Vec<Vec<Vec<f64>>>>,
}

impl<'a> ReferenceDecoder<'a> {
    pub fn new(params: &'a ModelParameters) -> Self {
        let c = &params.config;
        Self {
            params,
            keys: vec![vec![Vec::new(); c.n_heads]; c.n_layers],
            values: vec![vec![Vec::new(); c.n_heads]; c.n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.keys
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<f64>> {
        let p = self.params;
        let c = &p.config;
        if token as usize >= c.vocab_size {
            return invalid(format!("token {token} outside vocabulary"));
        }
        let pos = self.len();
        let theta = &c.lane_params.rope.theta;
        let scale = 1.0 / (c.head_dim as f64).sqrt();
        let mut x = p.embed.row(token as usize).to_vec();
        for (l, layer) in p.layers.iter().enumerate() {
            let h = rms(&x, &layer.attn_norm, c.norm_eps);
            let proj = project(p, layer, &h);
            let mut attn = Vec::with_capacity(c.model_dim);
            for head in 0..c.n_heads {
                let q = rotate(&proj.q[head], pos, theta)?;
                self.keys[l][head].push(rotate(&proj.k[head], pos, theta)?);
                self.values[l][head].push(proj.v[head].clone());
                let scores = self.keys[l][head]
                    .iter()
                    .map(|k| vec_dot(&q, k) * scale)
                    .collect();
                let vals: Vec<&Vec<f64>> = self.values[l][head].iter().collect();
                attn.extend(attend(scores, &vals));
            }
            x = block_tail(p, layer, &x, &attn);
        }
        Ok(final_logits(p, &x))
    }
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation of `prompt` for `steps` tokens (stops early at `eos`).
pub fn greedy_decode(
    params: &ModelParameters,
    prompt: &[u32],
    steps: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return invalid("prompt must not be empty");
    }
    let mut dec = ReferenceDecoder::new(params);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t)?;
    }
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = argmax(&logits);
        out.push(next);
        if Some(next) == eos {
            break;
        }
        logits = dec.step(next)?;
    }
    Ok(out)
}

/// Dense lane-aware forward that reads only the base projection rows and adds
/// the Fourier bias `beta(m - n)` to each score analytically.
pub fn forward_lanes_with_analytic_bias(
    params: &ModelParameters,
    tokens: &[u32],
    layout: &LaneLayout,
    rule: MaskRule,
) -> Result<Matrix> {
    check_tokens(params, tokens)?;
    if tokens.len() != layout.len() {
        return invalid("token count differs from layout");
    }
    let c = &params.config;
    let lp = &c.lane_params;
    let scale = 1.0 / (c.head_dim as f64).sqrt();
    let coords: &[Coord] = &layout.coords;
    let n = tokens.len();
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| params.embed.row(t as usize).to_vec())
        .collect();
    for layer in &params.layers {
        let mut qs = Vec::with_capacity(n);
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for (x, co) in xs.iter().zip(coords) {
            let h = rms(x, &layer.attn_norm, c.norm_eps);
            let pr = project(params, layer, &h);
            let rot = |v: &Vec<f64>| lane_rotate(v, co.step, co.lane, &lp.rope.theta, &layer.omega);
            qs.push(pr.q.iter().map(rot).collect::<Result<Vec<_>>>()?);
            ks.push(pr.k.iter().map(rot).collect::<Result<Vec<_>>>()?);
            vs.push(pr.v);
        }
        let mut next = Vec::with_capacity(n);
        for a in 0..n {
            let mut attn = Vec::with_capacity(c.model_dim);
            for head in 0..c.n_heads {
                let mut scores = Vec::new();
                let mut vals = Vec::new();
                for b in 0..n {
                    if visible(coords[a], coords[b], rule) {
                        let offset = coords[a].lane as i64 - coords[b].lane as i64;
                        let bias = fourier_bias_value(&lp.bias_coeffs, &lp.bias_freqs, offset)?;
                        scores.push((vec_dot(&qs[a][head], &ks[b][head]) + bias) * scale);
                        vals.push(&vs[b][head]);
                    }
                }
                attn.extend(attend(scores, &vals));
            }
            next.push(block_tail(params, layer, &xs[a], &attn));
        }
        xs = next;
    }
    Ok(Matrix::from_rows(
        &xs.iter()
            .map(|x| final_logits(params, x))
            .collect::<Vec<_>>(),
    ))
}
