//! Decoder-only transformer whose query/key projections carry the lane-aware
//! rotation and `F` extra bias dimensions per head.

mod backward;
pub mod checkpoint;
mod forward;
pub mod reference;

pub use backward::{backward, backward_cross_entropy, cross_entropy_grad};
pub(crate) use forward::{embed_rows, logits_from_hidden, run_layer, LayerKv};
pub use forward::{forward, ForwardTrace};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rope::{self, LaneRopeParams, RopeParams};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub bias_dim: usize,
    pub lane_params: LaneRopeParams,
    /// Longest lane (in steps) the model accepts; mirrors the pretraining context.
    pub max_steps: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// A plain RoPE model without augmentation.
    pub fn base(
        vocab_size: usize,
        n_layers: usize,
        n_heads: usize,
        head_dim: usize,
        mlp_hidden: usize,
        max_steps: usize,
    ) -> Result<Self> {
        let rope = RopeParams::new(head_dim, rope::DEFAULT_BASE)?;
        let cfg = Self {
            vocab_size,
            model_dim: n_heads * head_dim,
            n_layers,
            n_heads,
            head_dim,
            mlp_hidden,
            bias_dim: 0,
            lane_params: LaneRopeParams::plain(rope, max_steps),
            max_steps,
            tied_embeddings: false,
            norm_eps: default_norm_eps(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn qk_head_dim(&self) -> usize {
        self.head_dim + self.bias_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.n_layers == 0 || self.n_heads == 0 || self.mlp_hidden == 0 {
            return invalid("model sizes must be positive");
        }
        if self.model_dim != self.n_heads * self.head_dim {
            return invalid(format!(
                "model_dim {} != n_heads {} * head_dim {}",
                self.model_dim, self.n_heads, self.head_dim
            ));
        }
        if self.bias_dim % 2 != 0 {
            return invalid(format!("bias_dim must be even, got {}", self.bias_dim));
        }
        if self.lane_params.head_dim() != self.head_dim
            || self.lane_params.bias_dim != self.bias_dim
        {
            return invalid("lane parameters disagree with head_dim or bias_dim");
        }
        if self.max_steps == 0 {
            return invalid("max_steps must be positive");
        }
        if !(self.norm_eps > 0.0) {
            return invalid("norm_eps must be positive");
        }
        self.lane_params.validate()
    }
}

/// Optimizer grouping of parameter arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamFamily {
    Weight,
    Norm,
    /// Query/key biases; their trailing `F` entries per head are the bias coefficients.
    QkBias,
    LaneFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_norm: Vec<f64>,
    /// `[n_heads * (d + F), model_dim]`; rows `h*(d+F) + d ..` are the augmentation block.
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    /// `[n_heads * d, model_dim]`.
    pub wv: Matrix,
    /// `[model_dim, n_heads * d]`.
    pub wo: Matrix,
    pub mlp_norm: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
    /// Lane frequencies of this layer, one per rotary plane.
    pub omega: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f64>,
    /// Absent when embeddings are tied.
    pub unembed: Option<Matrix>,
}

fn uniform_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let a = std * 3f64.sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
    )
}

impl ModelParameters {
    /// Randomly initialised weights; lane frequencies come from the config.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let d_model = c.model_dim;
        let qk = c.n_heads * c.qk_head_dim();
        let hd = c.n_heads * c.head_dim;
        let std_in = 1.0 / (d_model as f64).sqrt();
        let embed = uniform_matrix(c.vocab_size, d_model, 1.0, &mut rng);
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            let mut wq = uniform_matrix(qk, d_model, std_in, &mut rng);
            let mut wk = uniform_matrix(qk, d_model, std_in, &mut rng);
            let mut bq: Vec<f64> = (0..qk).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let mut bk: Vec<f64> = (0..qk).map(|_| rng.gen_range(-0.1..0.1)).collect();
            for h in 0..c.n_heads {
                let start = h * c.qk_head_dim() + c.head_dim;
                for r in start..start + c.bias_dim {
                    wq.row_mut(r).fill(0.0);
                    wk.row_mut(r).fill(0.0);
                }
                bq[start..start + c.bias_dim].copy_from_slice(&c.lane_params.bias_coeffs);
                bk[start..start + c.bias_dim].copy_from_slice(&c.lane_params.bias_coeffs);
            }
            layers.push(LayerParams {
                attn_norm: vec![1.0; d_model],
                wq,
                bq,
                wk,
                bk,
                wv: uniform_matrix(hd, d_model, std_in, &mut rng),
                wo: uniform_matrix(d_model, hd, 1.0 / (hd as f64).sqrt(), &mut rng),
                mlp_norm: vec![1.0; d_model],
                w_up: uniform_matrix(c.mlp_hidden, d_model, std_in, &mut rng),
                w_down: uniform_matrix(
                    d_model,
                    c.mlp_hidden,
                    1.0 / (c.mlp_hidden as f64).sqrt(),
                    &mut rng,
                ),
                omega: c.lane_params.omega.clone(),
            });
        }
        let unembed =
            (!c.tied_embeddings).then(|| uniform_matrix(c.vocab_size, d_model, std_in, &mut rng));
        Ok(Self {
            embed,
            layers,
            final_norm: vec![1.0; d_model],
            unembed,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, _, a| a.fill(0.0));
        z
    }

    pub fn unembedding(&self) -> &Matrix {
        self.unembed.as_ref().unwrap_or(&self.embed)
    }

    /// Visits every trainable array in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, ParamFamily, &[usize], &[f64])) {
        use ParamFamily::*;
        f(
            "embed",
            Weight,
            &[self.embed.rows, self.embed.cols],
            &self.embed.data,
        );
        for (l, p) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            f(&n("attn_norm"), Norm, &[p.attn_norm.len()], &p.attn_norm);
            f(&n("wq"), Weight, &[p.wq.rows, p.wq.cols], &p.wq.data);
            f(&n("bq"), QkBias, &[p.bq.len()], &p.bq);
            f(&n("wk"), Weight, &[p.wk.rows, p.wk.cols], &p.wk.data);
            f(&n("bk"), QkBias, &[p.bk.len()], &p.bk);
            f(&n("wv"), Weight, &[p.wv.rows, p.wv.cols], &p.wv.data);
            f(&n("wo"), Weight, &[p.wo.rows, p.wo.cols], &p.wo.data);
            f(&n("mlp_norm"), Norm, &[p.mlp_norm.len()], &p.mlp_norm);
            f(
                &n("w_up"),
                Weight,
                &[p.w_up.rows, p.w_up.cols],
                &p.w_up.data,
            );
            f(
                &n("w_down"),
                Weight,
                &[p.w_down.rows, p.w_down.cols],
                &p.w_down.data,
            );
            f(&n("omega"), LaneFrequency, &[p.omega.len()], &p.omega);
        }
        f(
            "final_norm",
            Norm,
            &[self.final_norm.len()],
            &self.final_norm,
        );
        if let Some(u) = &self.unembed {
            f("unembed", Weight, &[u.rows, u.cols], &u.data);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, ParamFamily, &mut [f64])) {
        use ParamFamily::*;
        f("embed", Weight, &mut self.embed.data);
        for (l, p) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            f(&n("attn_norm"), Norm, &mut p.attn_norm);
            f(&n("wq"), Weight, &mut p.wq.data);
            f(&n("bq"), QkBias, &mut p.bq);
            f(&n("wk"), Weight, &mut p.wk.data);
            f(&n("bk"), QkBias, &mut p.bk);
            f(&n("wv"), Weight, &mut p.wv.data);
            f(&n("wo"), Weight, &mut p.wo.data);
            f(&n("mlp_norm"), Norm, &mut p.mlp_norm);
            f(&n("w_up"), Weight, &mut p.w_up.data);
            f(&n("w_down"), Weight, &mut p.w_down.data);
            f(&n("omega"), LaneFrequency, &mut p.omega);
        }
        f("final_norm", Norm, &mut self.final_norm);
        if let Some(u) = &mut self.unembed {
            f("unembed", Weight, &mut u.data);
        }
    }

    /// Copies of every array, in [`visit`](Self::visit) order.
    pub fn to_arrays(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit(|_, _, _, a| out.push(a.to_vec()));
        out
    }

    /// `self += alpha * other`; both must share a config.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParameters) {
        let arrays = other.to_arrays();
        let mut it = arrays.iter();
        self.visit_mut(|_, _, a| {
            let b = it.next().expect("parameter layouts differ");
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        });
    }

    /// Euclidean norm over all arrays, optionally restricted to one family.
    pub fn norm(&self, family: Option<ParamFamily>) -> f64 {
        let mut sq = 0.0;
        self.visit(|_, fam, _, a| {
            if family.map_or(true, |f| f == fam) {
                sq += a.iter().map(|x| x * x).sum::<f64>();
            }
        });
        sq.sqrt()
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, _, a| n += a.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, _, a| ok &= a.iter().all(|x| x.is_finite()));
        ok
    }

    /// Rows of `wq`/`wk` (and entries of `bq`/`bk`) that form the augmentation block.
    pub fn augmented_rows(&self) -> Vec<usize> {
        let c = &self.config;
        (0..c.n_heads)
            .flat_map(|h| {
                let start = h * c.qk_head_dim() + c.head_dim;
                start..start + c.bias_dim
            })
            .collect()
    }
}

/// How the lane frequencies are initialised from the token frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneStrategy {
    GroupThink,
    Ntk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneInit {
    pub strategy: LaneStrategy,
    #[serde(default = "default_gap")]
    pub sequence_gap: u64,
    pub bias_norm: f64,
    /// Largest lane count the bias must separate; sets `F` and the bias frequencies.
    #[serde(default = "default_max_lanes")]
    pub max_lanes: usize,
}

fn default_gap() -> u64 {
    rope::DEFAULT_SEQUENCE_GAP
}

fn default_max_lanes() -> usize {
    2
}

impl LaneInit {
    pub fn new(strategy: LaneStrategy, bias_norm: f64, max_lanes: usize) -> Self {
        Self {
            strategy,
            sequence_gap: rope::DEFAULT_SEQUENCE_GAP,
            bias_norm,
            max_lanes,
        }
    }

    /// Lane parameters derived from plain RoPE parameters.
    pub fn lane_params(&self, base: &LaneRopeParams) -> Result<LaneRopeParams> {
        let theta = &base.rope.theta;
        let omega = match self.strategy {
            LaneStrategy::GroupThink => rope::groupthink_lane_frequencies(theta, self.sequence_gap),
            LaneStrategy::Ntk => rope::ntk_lane_frequencies(
                theta,
                self.sequence_gap,
                base.pretrain_context,
                base.ramp_alpha,
                base.ramp_beta,
            )?,
        };
        let (bias_dim, bias_freqs) = rope::default_bias_frequencies(self.max_lanes);
        let bias_coeffs = rope::make_bias_init(bias_dim, self.bias_norm, &bias_freqs)?;
        let out = LaneRopeParams {
            rope: base.rope.clone(),
            omega,
            bias_dim,
            bias_coeffs,
            bias_freqs,
            sequence_gap: self.sequence_gap,
            ramp_alpha: base.ramp_alpha,
            ramp_beta: base.ramp_beta,
            pretrain_context: base.pretrain_context,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Adds the augmentation block to a plain model: zero weight rows, bias
/// entries equal to the bias coefficients, and lane frequencies per strategy.
/// Every pre-existing weight is copied unchanged.
pub fn init_from_base(base: &ModelParameters, init: &LaneInit) -> Result<ModelParameters> {
    let bc = &base.config;
    if bc.bias_dim != 0 {
        return invalid("base parameters already carry an augmentation block");
    }
    let lane_params = init.lane_params(&bc.lane_params)?;
    let f = lane_params.bias_dim;
    let d = bc.head_dim;
    let mut config = bc.clone();
    config.bias_dim = f;
    config.lane_params = lane_params;
    config.validate()?;

    let augment = |w: &Matrix, b: &[f64]| -> (Matrix, Vec<f64>) {
        let mut rows = Vec::with_capacity(bc.n_heads * (d + f));
        let mut bias = Vec::with_capacity(bc.n_heads * (d + f));
        for h in 0..bc.n_heads {
            for r in h * d..(h + 1) * d {
                rows.push(w.row(r).to_vec());
                bias.push(b[r]);
            }
            for _ in 0..f {
                rows.push(vec![0.0; w.cols]);
            }
            bias.extend_from_slice(&config.lane_params.bias_coeffs);
        }
        (Matrix::from_rows(&rows), bias)
    };

    let layers = base
        .layers
        .iter()
        .map(|p| {
            let (wq, bq) = augment(&p.wq, &p.bq);
            let (wk, bk) = augment(&p.wk, &p.bk);
            LayerParams {
                wq,
                bq,
                wk,
                bk,
                omega: config.lane_params.omega.clone(),
                ..p.clone()
            }
        })
        .collect();
    Ok(ModelParameters {
        config,
        embed: base.embed.clone(),
        layers,
        final_norm: base.final_norm.clone(),
        unembed: base.unembed.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelParameters {
        let cfg = ModelConfig::base(32, 2, 2, 8, 24, 64).unwrap();
        ModelParameters::random(cfg, 3).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::base(32, 2, 2, 8, 24, 64).unwrap();
        cfg.model_dim = 15;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::base(32, 2, 2, 8, 24, 64).unwrap();
        cfg.bias_dim = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_from_base_keeps_weights_and_sets_bias() {
        let b = base();
        let p = init_from_base(&b, &LaneInit::new(LaneStrategy::GroupThink, 1000.0, 2)).unwrap();
        let c = &p.config;
        assert_eq!(c.bias_dim, 2);
        let expected = rope::make_bias_init(2, 1000.0, &[0.5]).unwrap();
        assert!((expected.iter().map(|x| x * x).sum::<f64>().sqrt() - 1000.0).abs() < 1e-9);
        for (lp, lb) in p.layers.iter().zip(&b.layers) {
            for h in 0..c.n_heads {
                for r in 0..c.head_dim {
                    assert_eq!(lp.wq.row(h * 10 + r), lb.wq.row(h * 8 + r));
                    assert_eq!(lp.bk[h * 10 + r], lb.bk[h * 8 + r]);
                }
                for j in 0..2 {
                    let r = h * 10 + 8 + j;
                    assert!(lp.wq.row(r).iter().all(|&x| x == 0.0));
                    assert!(lp.wk.row(r).iter().all(|&x| x == 0.0));
                    assert_eq!(lp.bq[r], expected[j]);
                    assert_eq!(lp.bk[r], expected[j]);
                }
            }
            assert_eq!(lp.wv, lb.wv);
            assert_eq!(lp.w_up, lb.w_up);
            let gt = rope::groupthink_lane_frequencies(&c.lane_params.rope.theta, 8192);
            assert_eq!(lp.omega, gt);
        }
        assert_eq!(p.embed, b.embed);
        assert!(init_from_base(&p, &LaneInit::new(LaneStrategy::Ntk, 1.0, 2)).is_err());
    }

    #[test]
    fn ntk_equals_groupthink_when_every_plane_is_fast() {
        let mut b = base();
        // A pretraining context long enough that every plane has r > 32.
        b.config.lane_params.pretrain_context = 10_000_000;
        let init = LaneInit::new(LaneStrategy::Ntk, 0.0, 2);
        let lp = init.lane_params(&b.config.lane_params).unwrap();
        let gt = rope::groupthink_lane_frequencies(&lp.rope.theta, 8192);
        assert_eq!(lp.omega, gt);
    }

    #[test]
    fn visit_orders_are_consistent() {
        let mut p = base();
        let mut names = Vec::new();
        p.visit(|n, _, _, _| names.push(n.to_string()));
        let mut names_mut = Vec::new();
        p.visit_mut(|n, _, _| names_mut.push(n.to_string()));
        assert_eq!(names, names_mut);
        assert!(p.all_finite());
        assert!(p.num_parameters() > 0);
    }
}
