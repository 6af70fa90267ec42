//! Rotary position encoding with a second, lane-indexed rotation.
//!
//! Every function here is pure. Vectors are laid out as consecutive planes
//! `(v[2l], v[2l + 1])`, and a rotation by angle `a` maps a plane `(x, y)` to
//! `(x cos a + y sin a, -x sin a + y cos a)`. All equivalence checks in the
//! crate rely on this single sign convention.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Result};

pub const DEFAULT_BASE: f64 = 10_000.0;
pub const DEFAULT_RAMP_ALPHA: f64 = 4.0;
pub const DEFAULT_RAMP_BETA: f64 = 32.0;
pub const DEFAULT_SEQUENCE_GAP: u64 = 8192;

/// Token frequencies of a standard rotary encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
    pub theta: Vec<f64>,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        let theta = make_rope_frequencies(head_dim, base)?;
        Ok(Self {
            head_dim,
            base,
            theta,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return invalid(format!(
                "head_dim must be even and positive, got {}",
                self.head_dim
            ));
        }
        if self.theta.len() != self.head_dim / 2 {
            return invalid(format!(
                "theta has {} entries, expected {}",
                self.theta.len(),
                self.head_dim / 2
            ));
        }
        if self.theta.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return invalid("theta entries must be finite and positive");
        }
        Ok(())
    }
}

/// Everything needed to place a token on the (step, lane) grid: token
/// frequencies, lane frequencies, and the Fourier attention-bias block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneRopeParams {
    pub rope: RopeParams,
    /// Lane frequencies, one per rotary plane.
    pub omega: Vec<f64>,
    /// Number of augmented bias dimensions `F`.
    pub bias_dim: usize,
    /// Bias coefficients, `F` entries laid out as planes `(cos, sin)`.
    pub bias_coeffs: Vec<f64>,
    /// Bias frequencies in cycles per lane, `F / 2` entries.
    pub bias_freqs: Vec<f64>,
    pub sequence_gap: u64,
    pub ramp_alpha: f64,
    pub ramp_beta: f64,
    pub pretrain_context: usize,
}

impl LaneRopeParams {
    /// Plain RoPE: no lane rotation and no bias block.
    pub fn plain(rope: RopeParams, pretrain_context: usize) -> Self {
        let planes = rope.theta.len();
        Self {
            rope,
            omega: vec![0.0; planes],
            bias_dim: 0,
            bias_coeffs: Vec::new(),
            bias_freqs: Vec::new(),
            sequence_gap: DEFAULT_SEQUENCE_GAP,
            ramp_alpha: DEFAULT_RAMP_ALPHA,
            ramp_beta: DEFAULT_RAMP_BETA,
            pretrain_context,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.rope.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.rope.validate()?;
        if self.omega.len() != self.rope.head_dim / 2 {
            return invalid(format!(
                "omega has {} entries, expected {}",
                self.omega.len(),
                self.rope.head_dim / 2
            ));
        }
        if self.bias_dim % 2 != 0 {
            return invalid(format!("bias_dim must be even, got {}", self.bias_dim));
        }
        if self.bias_coeffs.len() != self.bias_dim {
            return invalid(format!(
                "bias_coeffs has {} entries, expected {}",
                self.bias_coeffs.len(),
                self.bias_dim
            ));
        }
        if self.bias_freqs.len() != self.bias_dim / 2 {
            return invalid(format!(
                "bias_freqs has {} entries, expected {}",
                self.bias_freqs.len(),
                self.bias_dim / 2
            ));
        }
        if self.bias_freqs.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return invalid("bias_freqs must lie in (0, 1]");
        }
        if self.sequence_gap == 0 {
            return invalid("sequence_gap must be positive");
        }
        check_ramp(self.ramp_alpha, self.ramp_beta)?;
        if self.pretrain_context == 0 {
            return invalid("pretrain_context must be positive");
        }
        Ok(())
    }

    /// Rotation angles for the rotary planes of a token at `(step, lane)`.
    pub fn rope_angles(&self, step: usize, lane: usize) -> Vec<f64> {
        merged_angles(&self.rope.theta, &self.omega, step, lane)
    }

    /// Rotation angles for the bias planes; they depend on the lane only.
    pub fn bias_angles(&self, lane: usize) -> Vec<f64> {
        bias_angles(&self.bias_freqs, lane)
    }
}

/// `theta_l = base^(-2l/d)` for `l = 0..d/2`.
pub fn make_rope_frequencies(d: usize, base: f64) -> Result<Vec<f64>> {
    if d < 2 || d % 2 != 0 {
        return invalid(format!("rotary dimension must be even and >= 2, got {d}"));
    }
    if !(base > 1.0) || !base.is_finite() {
        return invalid(format!("rotary base must be > 1, got {base}"));
    }
    Ok((0..d / 2)
        .map(|l| base.powf(-2.0 * l as f64 / d as f64))
        .collect())
}

/// Rotates each plane of `v` in place by the matching angle.
pub fn rotate_planes(v: &mut [f64], angles: &[f64]) {
    debug_assert_eq!(v.len(), 2 * angles.len());
    for (plane, &a) in v.chunks_exact_mut(2).zip(angles) {
        let (s, c) = a.sin_cos();
        let (x, y) = (plane[0], plane[1]);
        plane[0] = c * x + s * y;
        plane[1] = -s * x + c * y;
    }
}

/// Applies the transpose rotation, i.e. rotation by `-angle`.
pub fn rotate_planes_inverse(v: &mut [f64], angles: &[f64]) {
    debug_assert_eq!(v.len(), 2 * angles.len());
    for (plane, &a) in v.chunks_exact_mut(2).zip(angles) {
        let (s, c) = a.sin_cos();
        let (x, y) = (plane[0], plane[1]);
        plane[0] = c * x - s * y;
        plane[1] = s * x + c * y;
    }
}

fn check_dims(v: &[f64], theta: &[f64]) -> Result<()> {
    if v.len() != 2 * theta.len() {
        return invalid(format!(
            "vector has {} components but {} rotary planes were given",
            v.len(),
            theta.len()
        ));
    }
    Ok(())
}

pub(crate) fn merged_angles(theta: &[f64], omega: &[f64], step: usize, lane: usize) -> Vec<f64> {
    let (i, m) = (step as f64, lane as f64);
    theta
        .iter()
        .zip(omega)
        .map(|(&t, &w)| t * i + w * m)
        .collect()
}

pub(crate) fn bias_angles(bias_freqs: &[f64], lane: usize) -> Vec<f64> {
    let m = lane as f64;
    bias_freqs.iter().map(|&w| 2.0 * PI * w * m).collect()
}

/// Standard RoPE rotation of `v` at token position `position`.
pub fn rotate(v: &[f64], position: usize, theta: &[f64]) -> Result<Vec<f64>> {
    check_dims(v, theta)?;
    let angles: Vec<f64> = theta.iter().map(|&t| t * position as f64).collect();
    let mut out = v.to_vec();
    rotate_planes(&mut out, &angles);
    Ok(out)
}

/// Rotation by the merged angle `theta_l * step + omega_l * lane` per plane.
pub fn lane_rotate(
    v: &[f64],
    step: usize,
    lane: usize,
    theta: &[f64],
    omega: &[f64],
) -> Result<Vec<f64>> {
    check_dims(v, theta)?;
    if omega.len() != theta.len() {
        return invalid(format!(
            "omega has {} entries but theta has {}",
            omega.len(),
            theta.len()
        ));
    }
    let mut out = v.to_vec();
    rotate_planes(&mut out, &merged_angles(theta, omega, step, lane));
    Ok(out)
}

/// Lane frequencies that reproduce virtual positions `K * lane + step`.
pub fn groupthink_lane_frequencies(theta: &[f64], sequence_gap: u64) -> Vec<f64> {
    let k = sequence_gap as f64;
    theta.iter().map(|&t| k * t).collect()
}

fn check_ramp(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && beta > 0.0) {
        return invalid(format!(
            "ramp bounds must be positive, got ({alpha}, {beta})"
        ));
    }
    if alpha >= beta {
        return invalid(format!(
            "ramp_alpha ({alpha}) must be below ramp_beta ({beta})"
        ));
    }
    Ok(())
}

/// Linear ramp on the ratio `r = L / wavelength`.
pub fn ramp_from_ratio(r: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_ramp(alpha, beta)?;
    Ok(if r < alpha {
        0.0
    } else if r > beta {
        1.0
    } else {
        (r - alpha) / (beta - alpha)
    })
}

/// Context-to-wavelength ratio of one rotary plane.
pub fn wavelength_ratio(theta_l: f64, pretrain_context: usize) -> f64 {
    let wavelength = 2.0 * PI / theta_l;
    pretrain_context as f64 / wavelength
}

/// Ramp weight for a plane of frequency `theta_l` given pretraining context `L`.
pub fn ntk_ramp(theta_l: f64, pretrain_context: usize, alpha: f64, beta: f64) -> Result<f64> {
    if !(theta_l > 0.0) {
        return invalid(format!("frequency must be positive, got {theta_l}"));
    }
    if pretrain_context == 0 {
        return invalid("pretrain context must be positive");
    }
    ramp_from_ratio(wavelength_ratio(theta_l, pretrain_context), alpha, beta)
}

/// GroupThink frequencies damped per plane by the NTK ramp: fast planes keep
/// the full `K * theta`, slow planes lose their lane dependence.
pub fn ntk_lane_frequencies(
    theta: &[f64],
    sequence_gap: u64,
    pretrain_context: usize,
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    let k = sequence_gap as f64;
    theta
        .iter()
        .map(|&t| Ok(ntk_ramp(t, pretrain_context, alpha, beta)? * k * t))
        .collect()
}

/// `beta(x) = b^T R(x) b`, the bias the augmented dimensions add to a score
/// between lanes whose indices differ by `x`.
pub fn fourier_bias_value(bias_coeffs: &[f64], bias_freqs: &[f64], x: i64) -> Result<f64> {
    if bias_coeffs.len() != 2 * bias_freqs.len() {
        return invalid(format!(
            "{} bias coefficients do not match {} bias frequencies",
            bias_coeffs.len(),
            bias_freqs.len()
        ));
    }
    let angles: Vec<f64> = bias_freqs
        .iter()
        .map(|&w| 2.0 * PI * w * x as f64)
        .collect();
    let mut rotated = bias_coeffs.to_vec();
    rotate_planes(&mut rotated, &angles);
    Ok(bias_coeffs.iter().zip(&rotated).map(|(a, b)| a * b).sum())
}

/// Bias coefficients of norm `target_norm`, spread equally over the planes and
/// placed on the cosine slot of each plane.
pub fn make_bias_init(bias_dim: usize, target_norm: f64, bias_freqs: &[f64]) -> Result<Vec<f64>> {
    if bias_dim % 2 != 0 {
        return invalid(format!("bias_dim must be even, got {bias_dim}"));
    }
    if !(target_norm >= 0.0) || !target_norm.is_finite() {
        return invalid(format!(
            "target norm must be finite and >= 0, got {target_norm}"
        ));
    }
    if bias_freqs.len() != bias_dim / 2 {
        return invalid(format!(
            "{} bias frequencies given for bias_dim {bias_dim}",
            bias_freqs.len()
        ));
    }
    if bias_dim == 0 {
        if target_norm > 0.0 {
            return invalid("a nonzero bias norm needs bias_dim > 0");
        }
        return Ok(Vec::new());
    }
    let planes = bias_dim / 2;
    let per_plane = target_norm / (planes as f64).sqrt();
    let mut coeffs = vec![0.0; bias_dim];
    for plane in coeffs.chunks_exact_mut(2) {
        plane[0] = per_plane;
    }
    Ok(coeffs)
}

/// Discrete Fourier frequencies of a lane grid of size `max_lanes`:
/// `F = 2 * ceil((max_lanes - 1) / 2)` and `w_t = t / max_lanes`.
pub fn default_bias_frequencies(max_lanes: usize) -> (usize, Vec<f64>) {
    let planes = max_lanes.saturating_sub(1).div_ceil(2).max(1);
    let n = max_lanes.max(2) as f64;
    let freqs = (1..=planes).map(|t| t as f64 / n).collect();
    (2 * planes, freqs)
}

/// Gap between the same-lane bias and the largest cross-lane bias for lane
/// offsets up to `max_lanes - 1`.
pub fn bias_margin(bias_coeffs: &[f64], bias_freqs: &[f64], max_lanes: usize) -> Result<f64> {
    let peak = fourier_bias_value(bias_coeffs, bias_freqs, 0)?;
    let mut worst = f64::NEG_INFINITY;
    for x in 1..max_lanes as i64 {
        worst = worst.max(fourier_bias_value(bias_coeffs, bias_freqs, x)?);
    }
    Ok(if worst.is_finite() {
        peak - worst
    } else {
        f64::INFINITY
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn frequencies_match_powers_of_base() {
        let t = make_rope_frequencies(4, 10_000.0).unwrap();
        assert!(close(t[0], 1.0, 1e-15) && close(t[1], 0.01, 1e-15));
        assert_eq!(make_rope_frequencies(2, 10_000.0).unwrap(), vec![1.0]);
        let t = make_rope_frequencies(8, 10_000.0).unwrap();
        for (got, want) in t.iter().zip([1.0, 0.1, 0.01, 0.001]) {
            assert!(close(*got, want, 1e-15), "{got} vs {want}");
        }
        assert!(t.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn frequencies_reject_bad_input() {
        assert!(make_rope_frequencies(3, 10_000.0).is_err());
        assert!(make_rope_frequencies(0, 10_000.0).is_err());
        assert!(make_rope_frequencies(4, 1.0).is_err());
    }

    #[test]
    fn rotate_follows_block_convention() {
        let v = [0.3, -1.2, 2.0, 0.5];
        let theta = make_rope_frequencies(4, 10_000.0).unwrap();
        assert_eq!(rotate(&v, 0, &theta).unwrap(), v.to_vec());

        let quarter = [PI / 2.0];
        let out = rotate(&[1.0, 0.0], 1, &quarter).unwrap();
        assert!(close(out[0], 0.0, 1e-15) && close(out[1], -1.0, 1e-15));

        assert!(rotate(&v, 1, &[1.0]).is_err());
    }

    #[test]
    fn inverse_undoes_rotation() {
        let mut v = vec![0.7, -0.1, 1.5, 2.5];
        let angles = [1.3, -40.0];
        let orig = v.clone();
        rotate_planes(&mut v, &angles);
        rotate_planes_inverse(&mut v, &angles);
        for (a, b) in v.iter().zip(&orig) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn lane_rotate_special_cases() {
        let theta = make_rope_frequencies(8, 10_000.0).unwrap();
        let omega = vec![0.25, 1.5, 3.0, 0.0];
        let v = [1.0, 2.0, -0.5, 0.1, 0.4, -0.9, 3.0, 0.2];
        assert_eq!(
            lane_rotate(&v, 7, 0, &theta, &omega).unwrap(),
            rotate(&v, 7, &theta).unwrap()
        );
        assert_eq!(lane_rotate(&v, 0, 0, &theta, &omega).unwrap(), v.to_vec());

        // Omega = K * theta places (step 3, lane 2) at virtual position 2K + 3.
        let gt = groupthink_lane_frequencies(&theta, 5);
        let a = lane_rotate(&v, 3, 2, &theta, &gt).unwrap();
        let b = rotate(&v, 13, &theta).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x, *y, 1e-12));
        }
        assert!(lane_rotate(&v, 1, 1, &theta, &omega[..2]).is_err());
    }

    #[test]
    fn groupthink_scales_theta() {
        let theta = vec![1.0, 0.01];
        assert_eq!(groupthink_lane_frequencies(&theta, 1), theta);
        let gt = groupthink_lane_frequencies(&theta, 8192);
        assert!(close(gt[0], 8192.0, 1e-12) && close(gt[1], 81.92, 1e-10));
        assert_eq!(groupthink_lane_frequencies(&theta, 0), vec![0.0, 0.0]);
    }

    #[test]
    fn ramp_values() {
        assert_eq!(ramp_from_ratio(2.0, 4.0, 32.0).unwrap(), 0.0);
        assert_eq!(ramp_from_ratio(40.0, 4.0, 32.0).unwrap(), 1.0);
        assert_eq!(ramp_from_ratio(18.0, 4.0, 32.0).unwrap(), 0.5);
        assert!(ramp_from_ratio(18.0, 32.0, 4.0).is_err());
        assert!(ramp_from_ratio(18.0, 4.0, 4.0).is_err());
    }

    #[test]
    fn ntk_ramp_through_wavelength() {
        // theta chosen so that L / (2 pi / theta) = 18 exactly.
        let l = 1000usize;
        let theta = 18.0 * 2.0 * PI / l as f64;
        let g = ntk_ramp(theta, l, 4.0, 32.0).unwrap();
        assert!(close(g, 0.5, 1e-12));
        assert!(ntk_ramp(0.0, l, 4.0, 32.0).is_err());
        assert!(ntk_ramp(theta, 0, 4.0, 32.0).is_err());
    }

    #[test]
    fn ntk_frequencies_by_region() {
        let l = 1000usize;
        let fast = 40.0 * 2.0 * PI / l as f64;
        let mid = 18.0 * 2.0 * PI / l as f64;
        let slow = 2.0 * 2.0 * PI / l as f64;
        let w = ntk_lane_frequencies(&[fast, mid, slow], 8192, l, 4.0, 32.0).unwrap();
        assert!(close(w[0], 8192.0 * fast, 1e-9));
        // Direct scalar evaluation of the ramp midpoint.
        let direct = ((l as f64 / (2.0 * PI / mid)) - 4.0) / (32.0 - 4.0) * 8192.0 * mid;
        assert!(close(w[1], direct, 1e-9));
        assert!(close(w[1], 0.5 * 8192.0 * mid, 1e-9));
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn fourier_bias_examples() {
        let coeffs = [1.5, -0.5, 2.0, 0.25];
        let freqs = [0.25, 0.5];
        let sq: f64 = coeffs.iter().map(|c| c * c).sum();
        assert!(close(
            fourier_bias_value(&coeffs, &freqs, 0).unwrap(),
            sq,
            1e-12
        ));
        let c = 3.0;
        assert!(close(
            fourier_bias_value(&[c, 0.0], &[0.5], 1).unwrap(),
            -c * c,
            1e-12
        ));
        assert!(fourier_bias_value(&coeffs, &[0.5], 1).is_err());
    }

    #[test]
    fn bias_init_examples() {
        assert_eq!(make_bias_init(2, 0.0, &[0.5]).unwrap(), vec![0.0, 0.0]);
        assert!(make_bias_init(0, 1.0, &[]).is_err());
        assert!(make_bias_init(3, 1.0, &[0.5]).is_err());

        let b = make_bias_init(2, 1000.0, &[0.5]).unwrap();
        for (x, want) in [(-1, -1e6), (0, 1e6), (1, -1e6)] {
            assert!(close(
                fourier_bias_value(&b, &[0.5], x).unwrap(),
                want,
                1e-6
            ));
        }

        // Four-lane grid: enumerate every nonzero offset.
        let t = 7.0;
        let freqs = [0.25, 0.5];
        let b = make_bias_init(4, t, &freqs).unwrap();
        assert!(close(norm(&b), t, 1e-12));
        let peak = fourier_bias_value(&b, &freqs, 0).unwrap();
        assert!(close(peak, t * t, 1e-9));
        let expected = [-t * t / 2.0, 0.0, -t * t / 2.0];
        for (x, want) in (1..4).zip(expected) {
            let v = fourier_bias_value(&b, &freqs, x).unwrap();
            assert!(close(v, want, 1e-9), "x={x}: {v}");
            assert!(peak > v);
        }
    }

    #[test]
    fn default_frequencies_match_lane_grid() {
        assert_eq!(default_bias_frequencies(2), (2, vec![0.5]));
        assert_eq!(default_bias_frequencies(4), (4, vec![0.25, 0.5]));
        let (f, w) = default_bias_frequencies(3);
        assert_eq!(f, 2);
        assert!(close(w[0], 1.0 / 3.0, 1e-15));
        for n in 2..8 {
            let (f, w) = default_bias_frequencies(n);
            let b = make_bias_init(f, 1.0, &w).unwrap();
            assert!(bias_margin(&b, &w, n).unwrap() > 1e-6, "n={n}");
        }
    }

    #[test]
    fn rotation_properties_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = make_rope_frequencies(16, 10_000.0).unwrap();
        for _ in 0..1000 {
            let omega: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..50.0)).collect();
            let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (i, m) = (rng.gen_range(0..5000), rng.gen_range(0..8));
            let r = lane_rotate(&v, i, m, &theta, &omega).unwrap();
            assert!(close(norm(&r), norm(&v), 1e-6));

            let k: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let j = rng.gen_range(0..5000);
            let lane = dot(&r, &lane_rotate(&k, j, m, &theta, &omega).unwrap());
            let plain = dot(
                &rotate(&v, i, &theta).unwrap(),
                &rotate(&k, j, &theta).unwrap(),
            );
            assert!((lane - plain).abs() <= 1e-4 * plain.abs().max(1.0));
        }
    }

    #[test]
    fn bias_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let coeffs: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let freqs: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
            let x = rng.gen_range(-20..20);
            let a = fourier_bias_value(&coeffs, &freqs, x).unwrap();
            let b = fourier_bias_value(&coeffs, &freqs, -x).unwrap();
            assert!(close(a, b, 1e-9));
        }
    }
}
