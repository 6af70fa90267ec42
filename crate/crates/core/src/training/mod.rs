//! Supervised and KTO fine-tuning over groups of lanes.

mod kto;
mod optim;

pub use kto::{
    asymmetric_sigmoid, asymmetric_sigmoid_grad, asymmetric_sigmoid_with, kto_loss, KtoConfig,
    NegativeBranch,
};
pub use optim::{schedule, AdamW, OptimConfig};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{LaneLayout, MaskRule};
use crate::data::{vocab, CollabEpisode, PreferenceGroup};
use crate::engine::parallel_map;
use crate::error::{invalid, Error, Result};
use crate::model::{backward, cross_entropy_grad, forward, ModelParameters, ParamFamily};
use crate::tensor::{softmax_in_place, Matrix};

/// One SFT group: `N` lanes whose first `prompt_len` tokens are context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftGroup {
    pub lanes: Vec<Vec<u32>>,
    pub prompt_len: usize,
}

impl From<&CollabEpisode> for SftGroup {
    fn from(e: &CollabEpisode) -> Self {
        Self {
            lanes: e.sequences(),
            prompt_len: e.prompt_len(),
        }
    }
}

/// Flattened tokens, next-token targets and loss mask of a group of lanes.
struct Flat {
    layout: LaneLayout,
    tokens: Vec<u32>,
    targets: Vec<u32>,
    /// Lane of each position whose target is scored, else `None`.
    scored: Vec<Option<usize>>,
}

/// Positions `t >= prompt_len - 1` predict lane tokens `t + 1`.
fn flatten(lanes: &[Vec<u32>], prompt_len: usize) -> Result<Flat> {
    if lanes.is_empty() || prompt_len == 0 {
        return invalid("a group needs lanes and a non-empty prompt");
    }
    let lengths: Vec<usize> = lanes.iter().map(Vec::len).collect();
    let layout = LaneLayout::from_lane_lengths(&lengths, prompt_len)?;
    let mut tokens = Vec::with_capacity(layout.len());
    let mut targets = Vec::with_capacity(layout.len());
    let mut scored = Vec::with_capacity(layout.len());
    for c in &layout.coords {
        let lane = &lanes[c.lane];
        tokens.push(lane[c.step]);
        match lane.get(c.step + 1) {
            Some(&t) if c.step + 1 >= prompt_len => {
                targets.push(t);
                scored.push(Some(c.lane));
            }
            _ => {
                targets.push(vocab::PAD);
                scored.push(None);
            }
        }
    }
    Ok(Flat {
        layout,
        tokens,
        targets,
        scored,
    })
}

/// Sum of masked cross-entropy terms and their gradient (unnormalised).
fn sft_group_terms(
    params: &ModelParameters,
    group: &SftGroup,
    rule: MaskRule,
) -> Result<(f64, usize, ModelParameters)> {
    let f = flatten(&group.lanes, group.prompt_len)?;
    let mask: Vec<bool> = f.scored.iter().map(Option::is_some).collect();
    let count = mask.iter().filter(|&&m| m).count();
    let trace = forward(params, &f.tokens, &f.layout, rule)?;
    let (mean, mut dlogits) = cross_entropy_grad(&trace.logits, &f.targets, &mask)?;
    dlogits.data.iter_mut().for_each(|x| *x *= count as f64);
    Ok((
        mean * count as f64,
        count,
        backward(params, &trace, &dlogits)?,
    ))
}

/// Mean cross-entropy over every scored position of every group.
pub fn sft_loss(params: &ModelParameters, groups: &[SftGroup], rule: MaskRule) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for g in groups {
        let f = flatten(&g.lanes, g.prompt_len)?;
        let mask: Vec<bool> = f.scored.iter().map(Option::is_some).collect();
        let trace = forward(params, &f.tokens, &f.layout, rule)?;
        let n = mask.iter().filter(|&&m| m).count();
        if n > 0 {
            total += cross_entropy_grad(&trace.logits, &f.targets, &mask)?.0 * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return invalid("no scored positions in the batch");
    }
    Ok(total / count as f64)
}

fn preference_lanes(g: &PreferenceGroup) -> Vec<Vec<u32>> {
    g.completions
        .iter()
        .map(|c| g.prompt.iter().chain(c).copied().collect())
        .collect()
}

/// Summed (or length-normalised) completion log-probabilities per lane, plus
/// what is needed to backpropagate through them.
fn completion_logprobs(
    params: &ModelParameters,
    group: &PreferenceGroup,
    rule: MaskRule,
    normalize: bool,
) -> Result<(Vec<f64>, Flat, crate::model::ForwardTrace)> {
    let lanes = preference_lanes(group);
    let f = flatten(&lanes, group.prompt.len())?;
    let trace = forward(params, &f.tokens, &f.layout, rule)?;
    let mut lp = vec![0.0; lanes.len()];
    for (r, s) in f.scored.iter().enumerate() {
        if let Some(lane) = *s {
            let mut row = trace.logits.row(r).to_vec();
            let lse = softmax_in_place(&mut row);
            lp[lane] += trace.logits.row(r)[f.targets[r] as usize] - lse;
        }
    }
    if normalize {
        for (l, c) in lp.iter_mut().zip(&group.completions) {
            *l /= c.len() as f64;
        }
    }
    Ok((lp, f, trace))
}

/// Reference log-probabilities of each completion, computed lane by lane.
pub fn reference_logprobs(
    reference: &ModelParameters,
    group: &PreferenceGroup,
    normalize: bool,
) -> Result<Vec<f64>> {
    Ok(completion_logprobs(reference, group, MaskRule::within_lane(), normalize)?.0)
}

/// KTO loss of one batch given frozen reference log-probabilities; the policy
/// runs with cross-lane attention inside each group.
pub fn kto_batch_loss(
    params: &ModelParameters,
    groups: &[PreferenceGroup],
    ref_logprobs: &[Vec<f64>],
    config: &KtoConfig,
    rule: MaskRule,
) -> Result<(f64, Vec<f64>)> {
    let mut deltas = Vec::new();
    let mut labels = Vec::new();
    for (g, r) in groups.iter().zip(ref_logprobs) {
        g.validate()?;
        let (lp, _, _) = completion_logprobs(params, g, rule, config.length_normalize)?;
        deltas.extend(lp.iter().zip(r).map(|(a, b)| a - b));
        labels.extend_from_slice(&g.desirable);
    }
    let (loss, _) = kto_loss(&deltas, &labels, config)?;
    Ok((loss, deltas))
}

/// Gradient of the KTO loss for one group given `dL/dDelta` per completion.
fn kto_group_grad(
    params: &ModelParameters,
    group: &PreferenceGroup,
    dldelta: &[f64],
    rule: MaskRule,
    normalize: bool,
) -> Result<ModelParameters> {
    let (_, f, trace) = completion_logprobs(params, group, rule, normalize)?;
    let mut dlogits = Matrix::zeros(trace.logits.rows, trace.logits.cols);
    for (r, s) in f.scored.iter().enumerate() {
        if let Some(lane) = *s {
            let mut c = dldelta[lane];
            if normalize {
                c /= group.completions[lane].len() as f64;
            }
            let row = dlogits.row_mut(r);
            row.copy_from_slice(trace.logits.row(r));
            softmax_in_place(row);
            row.iter_mut().for_each(|p| *p *= -c);
            row[f.targets[r] as usize] += c;
        }
    }
    backward(params, &trace, &dlogits)
}

/// Training data for one run.
#[derive(Debug, Clone)]
pub enum TrainData {
    Sft(Vec<SftGroup>),
    Kto(Vec<PreferenceGroup>),
}

impl TrainData {
    fn len(&self) -> usize {
        match self {
            TrainData::Sft(g) => g.len(),
            TrainData::Kto(g) => g.len(),
        }
    }

    fn mode(&self) -> &'static str {
        match self {
            TrainData::Sft(_) => "sft",
            TrainData::Kto(_) => "kto",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub mode: String,
}

/// Everything besides data and parameters that shapes a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    #[serde(default)]
    pub kto: KtoConfig,
    #[serde(default)]
    pub mask: MaskRule,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_threads() -> usize {
    1
}

impl TrainConfig {
    pub fn new(optim: OptimConfig) -> Self {
        Self {
            optim,
            kto: KtoConfig::default(),
            mask: MaskRule::default(),
            threads: 1,
        }
    }
}

/// Loss and summed gradient of one batch.
fn batch_gradient(
    params: &ModelParameters,
    data: &TrainData,
    batch: &[usize],
    ref_lp: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(f64, ModelParameters)> {
    let mut grads = params.zeros_like();
    match data {
        TrainData::Sft(groups) => {
            let parts = parallel_map(batch, cfg.threads, |&i| {
                sft_group_terms(params, &groups[i], cfg.mask)
            });
            let mut total = 0.0;
            let mut count = 0;
            let mut ok = Vec::with_capacity(parts.len());
            for p in parts {
                let (l, n, g) = p?;
                total += l;
                count += n;
                ok.push(g);
            }
            if count == 0 {
                return invalid("batch has no scored positions");
            }
            for g in &ok {
                grads.add_scaled(1.0 / count as f64, g);
            }
            Ok((total / count as f64, grads))
        }
        TrainData::Kto(groups) => {
            let chosen: Vec<PreferenceGroup> = batch.iter().map(|&i| groups[i].clone()).collect();
            let refs: Vec<Vec<f64>> = batch.iter().map(|&i| ref_lp[i].clone()).collect();
            let (loss, deltas) = kto_batch_loss(params, &chosen, &refs, &cfg.kto, cfg.mask)?;
            let labels: Vec<bool> = chosen
                .iter()
                .flat_map(|g| g.desirable.iter().copied())
                .collect();
            let (_, dldelta) = kto_loss(&deltas, &labels, &cfg.kto)?;
            let mut offsets = Vec::with_capacity(chosen.len());
            let mut at = 0;
            for g in &chosen {
                offsets.push(at);
                at += g.completions.len();
            }
            let idx: Vec<usize> = (0..chosen.len()).collect();
            let parts = parallel_map(&idx, cfg.threads, |&k| {
                let g = &chosen[k];
                let d = &dldelta[offsets[k]..offsets[k] + g.completions.len()];
                kto_group_grad(params, g, d, cfg.mask, cfg.kto.length_normalize)
            });
            for p in parts {
                grads.add_scaled(1.0, &p?);
            }
            Ok((loss, grads))
        }
    }
}

/// Gradient of the KTO loss for a batch; exposed for inspection.
pub fn kto_gradient(
    params: &ModelParameters,
    reference: &ModelParameters,
    groups: &[PreferenceGroup],
    cfg: &TrainConfig,
) -> Result<(f64, ModelParameters)> {
    let ref_lp = groups
        .iter()
        .map(|g| reference_logprobs(reference, g, cfg.kto.length_normalize))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<usize> = (0..groups.len()).collect();
    batch_gradient(
        params,
        &TrainData::Kto(groups.to_vec()),
        &batch,
        &ref_lp,
        cfg,
    )
}

/// Runs the configured number of epochs. `reference` is only read (KTO).
/// Each step's metrics are passed to `log`, with the updated parameters, as
/// they are produced.
pub fn train(
    params: &mut ModelParameters,
    reference: Option<&ModelParameters>,
    data: &TrainData,
    cfg: &TrainConfig,
    mut log: impl FnMut(&StepMetrics, &ModelParameters) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    let oc = &cfg.optim;
    oc.validate()?;
    cfg.kto.validate()?;
    if data.len() == 0 {
        return invalid("training data is empty");
    }
    let ref_lp: Vec<Vec<f64>> = match data {
        TrainData::Kto(groups) => {
            let reference = reference
                .ok_or_else(|| Error::InvalidParameter("KTO needs a reference model".into()))?;
            let idx: Vec<usize> = (0..groups.len()).collect();
            parallel_map(&idx, cfg.threads, |&i| {
                groups[i].validate()?;
                reference_logprobs(reference, &groups[i], cfg.kto.length_normalize)
            })
            .into_iter()
            .collect::<Result<_>>()?
        }
        TrainData::Sft(_) => Vec::new(),
    };
    let steps_per_epoch = data.len().div_ceil(oc.batch_size);
    let total = steps_per_epoch * oc.epochs;
    let mut opt = AdamW::new(oc.clone(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(oc.seed);
    let mut metrics = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..oc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(oc.batch_size) {
            let (loss, mut grads) = batch_gradient(params, data, batch, &ref_lp, cfg)?;
            let grad_norm = grads.norm(None);
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "step {step} ({}): loss {loss}, gradient norm {grad_norm}",
                    data.mode()
                )));
            }
            if let Some(max) = oc.max_grad_norm {
                if grad_norm > max {
                    grads.visit_mut(|_, _, a| a.iter_mut().for_each(|x| *x *= max / grad_norm));
                }
            }
            let scale = schedule(step, total, oc.warmup_ratio);
            opt.step(params, &grads, scale);
            if !params.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters became non-finite at step {step}"
                )));
            }
            let m = StepMetrics {
                step,
                loss,
                lr: oc.lr * scale,
                grad_norm,
                mode: data.mode().to_string(),
            };
            log(&m, params)?;
            metrics.push(m);
            step += 1;
        }
    }
    Ok(metrics)
}

/// Writes one JSON object per line.
pub fn write_metrics(out: &mut impl Write, metrics: &StepMetrics) -> Result<()> {
    serde_json::to_writer(&mut *out, metrics)?;
    writeln!(out)?;
    Ok(())
}

/// Norm of the lane-frequency gradient of one KTO batch.
pub fn lane_frequency_grad_norm(grads: &ModelParameters) -> f64 {
    grads.norm(Some(ParamFamily::LaneFrequency))
}
