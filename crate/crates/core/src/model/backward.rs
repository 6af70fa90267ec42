//! Reverse-mode gradients for [`forward`](super::forward).

use crate::error::{invalid, Result};
use crate::rope;
use crate::tensor::{accumulate_outer, axpy, dot, matmul, softmax_in_place, Matrix};

use super::forward::{sigmoid, ForwardTrace, LayerTrace};
use super::{LayerParams, ModelConfig, ModelParameters};

/// Gradient of `rms_norm` given the upstream gradient `dy`.
fn rms_norm_backward(
    x: &Matrix,
    inv: &[f64],
    gain: &[f64],
    dy: &Matrix,
    dgain: &mut [f64],
    dx: &mut Matrix,
) {
    let n = x.cols as f64;
    for r in 0..x.rows {
        let (xr, dyr, s) = (x.row(r), dy.row(r), inv[r]);
        let mut proj = 0.0;
        for j in 0..x.cols {
            dgain[j] += dyr[j] * xr[j] * s;
            proj += gain[j] * dyr[j] * xr[j];
        }
        let c = s * s * s * proj / n;
        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d += s * gain[j] * dyr[j] - c * xr[j];
        }
    }
}

/// Undoes the rotation on `grad` (gradient w.r.t. rotated rows) and adds the
/// lane-frequency gradient `lane * (g0 y1 - g1 y0)` per rotary plane.
fn rotate_backward(
    cfg: &ModelConfig,
    omega: &[f64],
    rotated: &Matrix,
    grad: &mut Matrix,
    trace: &ForwardTrace,
    domega: &mut [f64],
) {
    let lp = &cfg.lane_params;
    let (d, w) = (cfg.head_dim, cfg.qk_head_dim());
    for (r, c) in trace.layout.coords.iter().enumerate() {
        let angles = rope::merged_angles(&lp.rope.theta, omega, c.step, c.lane);
        let bias = rope::bias_angles(&lp.bias_freqs, c.lane);
        let m = c.lane as f64;
        let y = rotated.row(r);
        let g = grad.row_mut(r);
        for h in 0..cfg.n_heads {
            let off = h * w;
            if m != 0.0 {
                for (l, dw) in domega.iter_mut().enumerate() {
                    let (y0, y1) = (y[off + 2 * l], y[off + 2 * l + 1]);
                    let (g0, g1) = (g[off + 2 * l], g[off + 2 * l + 1]);
                    *dw += m * (g0 * y1 - g1 * y0);
                }
            }
            rope::rotate_planes_inverse(&mut g[off..off + d], &angles);
            rope::rotate_planes_inverse(&mut g[off + d..off + w], &bias);
        }
    }
}

fn layer_backward(
    cfg: &ModelConfig,
    p: &LayerParams,
    t: &LayerTrace,
    trace: &ForwardTrace,
    dout: &Matrix,
    g: &mut LayerParams,
) -> Matrix {
    let (d, w, heads) = (cfg.head_dim, cfg.qk_head_dim(), cfg.n_heads);
    let rows = dout.rows;

    // MLP branch.
    accumulate_outer(&mut g.w_down, dout, &t.act);
    let mut dup = matmul(dout, &p.w_down);
    for (du, &u) in dup.data.iter_mut().zip(&t.up.data) {
        let s = sigmoid(u);
        *du *= s + u * s * (1.0 - s);
    }
    accumulate_outer(&mut g.w_up, &dup, &t.h2);
    let dh2 = matmul(&dup, &p.w_up);
    let mut dx_mid = dout.clone();
    rms_norm_backward(
        &t.x_mid,
        &t.inv_rms2,
        &p.mlp_norm,
        &dh2,
        &mut g.mlp_norm,
        &mut dx_mid,
    );

    // Attention branch.
    accumulate_outer(&mut g.wo, &dx_mid, &t.attn);
    let dattn = matmul(&dx_mid, &p.wo);
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Matrix::zeros(rows, heads * w);
    let mut dk = Matrix::zeros(rows, heads * w);
    let mut dv = Matrix::zeros(rows, heads * d);
    for h in 0..heads {
        let (qs, vs) = (h * w..(h + 1) * w, h * d..(h + 1) * d);
        for r in 0..rows {
            let keys = &trace.visible[r];
            let probs = &t.probs[h][r];
            let dor = &dattn.row(r)[vs.clone()];
            let dp: Vec<f64> = keys
                .iter()
                .map(|&s| dot(dor, &t.v.row(s)[vs.clone()]))
                .collect();
            let mean: f64 = probs.iter().zip(&dp).map(|(p, x)| p * x).sum();
            for ((&s, &pr), &dpi) in keys.iter().zip(probs).zip(&dp) {
                axpy(pr, dor, &mut dv.row_mut(s)[vs.clone()]);
                let ds = pr * (dpi - mean) * scale;
                if ds != 0.0 {
                    let ks = t.k.row(s)[qs.clone()].to_vec();
                    axpy(ds, &ks, &mut dq.row_mut(r)[qs.clone()]);
                    let qr = t.q.row(r)[qs.clone()].to_vec();
                    axpy(ds, &qr, &mut dk.row_mut(s)[qs.clone()]);
                }
            }
        }
    }
    rotate_backward(cfg, &p.omega, &t.q, &mut dq, trace, &mut g.omega);
    rotate_backward(cfg, &p.omega, &t.k, &mut dk, trace, &mut g.omega);

    for r in 0..rows {
        axpy(1.0, dq.row(r), &mut g.bq);
        axpy(1.0, dk.row(r), &mut g.bk);
    }
    accumulate_outer(&mut g.wq, &dq, &t.h1);
    accumulate_outer(&mut g.wk, &dk, &t.h1);
    accumulate_outer(&mut g.wv, &dv, &t.h1);
    let mut dh1 = matmul(&dq, &p.wq);
    let dh1k = matmul(&dk, &p.wk);
    let dh1v = matmul(&dv, &p.wv);
    for ((a, b), c) in dh1.data.iter_mut().zip(&dh1k.data).zip(&dh1v.data) {
        *a += b + c;
    }
    let mut dx = dx_mid;
    rms_norm_backward(
        &t.x_in,
        &t.inv_rms1,
        &p.attn_norm,
        &dh1,
        &mut g.attn_norm,
        &mut dx,
    );
    dx
}

/// Gradients of a scalar loss given its gradient w.r.t. the logits.
pub fn backward(
    params: &ModelParameters,
    trace: &ForwardTrace,
    dlogits: &Matrix,
) -> Result<ModelParameters> {
    let cfg = &params.config;
    if (dlogits.rows, dlogits.cols) != (trace.logits.rows, trace.logits.cols) {
        return invalid("logit gradient shape differs from the trace");
    }
    let mut grads = params.zeros_like();

    let unembed = params.unembedding();
    let mut dunembed = Matrix::zeros(unembed.rows, unembed.cols);
    accumulate_outer(&mut dunembed, dlogits, &trace.final_h);
    let dh = matmul(dlogits, unembed);
    let mut dx = Matrix::zeros(dh.rows, dh.cols);
    rms_norm_backward(
        &trace.final_in,
        &trace.inv_rms_final,
        &params.final_norm,
        &dh,
        &mut grads.final_norm,
        &mut dx,
    );

    for l in (0..cfg.n_layers).rev() {
        dx = layer_backward(
            cfg,
            &params.layers[l],
            &trace.layers[l],
            trace,
            &dx,
            &mut grads.layers[l],
        );
    }

    for (r, &tok) in trace.tokens.iter().enumerate() {
        axpy(1.0, dx.row(r), grads.embed.row_mut(tok as usize));
    }
    match &mut grads.unembed {
        Some(u) => u.data.copy_from_slice(&dunembed.data),
        None => axpy(1.0, &dunembed.data, &mut grads.embed.data),
    }
    Ok(grads)
}

/// Masked mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_grad(
    logits: &Matrix,
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows || mask.len() != logits.rows {
        return invalid("targets and mask must have one entry per position");
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return invalid("loss mask selects no positions");
    }
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for r in 0..logits.rows {
        if !mask[r] {
            continue;
        }
        let target = targets[r] as usize;
        if target >= logits.cols {
            return invalid(format!("target {target} outside vocabulary"));
        }
        let g = grad.row_mut(r);
        g.copy_from_slice(logits.row(r));
        let lse = softmax_in_place(g);
        loss += lse - logits.row(r)[target];
        g[target] -= 1.0;
        for x in g.iter_mut() {
            *x /= count as f64;
        }
    }
    Ok((loss / count as f64, grad))
}

/// Masked mean cross-entropy and gradients for every parameter.
pub fn backward_cross_entropy(
    params: &ModelParameters,
    trace: &ForwardTrace,
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, ModelParameters)> {
    let (loss, dlogits) = cross_entropy_grad(&trace.logits, targets, mask)?;
    Ok((loss, backward(params, trace, &dlogits)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{LaneLayout, MaskRule};
    use crate::model::forward;

    #[test]
    fn cross_entropy_examples() {
        let logits = Matrix::from_rows(&[vec![0.0; 8], vec![0.0; 8]]);
        let (loss, g) = cross_entropy_grad(&logits, &[3, 1], &[true, false]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        assert!(g.row(1).iter().all(|&x| x == 0.0));
        assert!((g.row(0)[3] - (1.0 / 8.0 - 1.0)).abs() < 1e-12);
        assert!(cross_entropy_grad(&logits, &[3, 1], &[false, false]).is_err());
    }

    #[test]
    fn confident_prediction_has_vanishing_gradient() {
        let mut prev = f64::INFINITY;
        for margin in [2.0, 8.0, 32.0] {
            let mut row = vec![0.0; 5];
            row[2] = margin;
            let (_, g) = cross_entropy_grad(&Matrix::from_rows(&[row]), &[2], &[true]).unwrap();
            let n = g.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n < prev);
            prev = n;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn masked_lane_targets_do_not_contribute() {
        let cfg = ModelConfig::base(24, 1, 2, 4, 16, 32).unwrap();
        let p = ModelParameters::random(cfg, 9).unwrap();
        let layout = LaneLayout::rectangular(2, 5).unwrap();
        let tokens: Vec<u32> = (0..10).map(|i| (i * 5 % 24) as u32).collect();
        let trace = forward(&p, &tokens, &layout, MaskRule::default()).unwrap();
        let mask: Vec<bool> = layout.coords.iter().map(|c| c.lane == 0).collect();
        let targets: Vec<u32> = (0..10).map(|i| (i * 3 % 24) as u32).collect();
        let mut scrambled = targets.clone();
        for (t, c) in scrambled.iter_mut().zip(&layout.coords) {
            if c.lane == 1 {
                *t = (*t + 7) % 24;
            }
        }
        let (la, ga) = backward_cross_entropy(&p, &trace, &targets, &mask).unwrap();
        let (lb, gb) = backward_cross_entropy(&p, &trace, &scrambled, &mask).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }
}
