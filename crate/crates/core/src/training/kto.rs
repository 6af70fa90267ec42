//! KTO value function with the one-sided saturating sigmoid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of the asymmetric sigmoid for negative inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeBranch {
    /// `-x + 1/2`, as the method defines it.
    #[default]
    Reflected,
    /// `x + 1/2`: continuous with slope 1 at zero, monotone everywhere.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KtoConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lambda_d")]
    pub lambda_d: f64,
    #[serde(default = "default_lambda_u")]
    pub lambda_u: f64,
    /// Divide each completion's log-probability by its length.
    #[serde(default)]
    pub length_normalize: bool,
    #[serde(default)]
    pub negative_branch: NegativeBranch,
}

fn default_beta() -> f64 {
    0.1
}
fn default_lambda_d() -> f64 {
    1.0
}
fn default_lambda_u() -> f64 {
    0.7
}

impl Default for KtoConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            lambda_d: default_lambda_d(),
            lambda_u: default_lambda_u(),
            length_normalize: false,
            negative_branch: NegativeBranch::default(),
        }
    }
}

impl KtoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return invalid("KTO beta must be positive");
        }
        if self.lambda_d < 0.0 || self.lambda_u < 0.0 {
            return invalid("KTO lambdas must be non-negative");
        }
        Ok(())
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic for `x >= 0`, `-x + 1/2` below zero.
pub fn asymmetric_sigmoid(x: f64) -> f64 {
    asymmetric_sigmoid_with(x, NegativeBranch::Reflected)
}

pub fn asymmetric_sigmoid_with(x: f64, branch: NegativeBranch) -> f64 {
    if x >= 0.0 {
        logistic(x)
    } else {
        match branch {
            NegativeBranch::Reflected => -x + 0.5,
            NegativeBranch::Continuous => x + 0.5,
        }
    }
}

/// Derivative of [`asymmetric_sigmoid_with`].
pub fn asymmetric_sigmoid_grad(x: f64, branch: NegativeBranch) -> f64 {
    if x >= 0.0 {
        let s = logistic(x);
        s * (1.0 - s)
    } else {
        match branch {
            NegativeBranch::Reflected => -1.0,
            NegativeBranch::Continuous => 1.0,
        }
    }
}

/// `mean(lambda_label - v)` over samples and its derivative with respect to
/// each `delta` (policy minus reference log-probability).
pub fn kto_loss(deltas: &[f64], desirable: &[bool], config: &KtoConfig) -> Result<(f64, Vec<f64>)> {
    config.validate()?;
    if deltas.len() != desirable.len() || deltas.is_empty() {
        return invalid("one label per delta is required, and at least one sample");
    }
    if let Some(d) = deltas.iter().find(|d| !d.is_finite()) {
        return Err(crate::Error::NonFinite(format!("log-probability gap {d}")));
    }
    let n = deltas.len() as f64;
    let b = config.beta;
    let branch = config.negative_branch;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(deltas.len());
    for (&d, &good) in deltas.iter().zip(desirable) {
        let (lambda, sign) = if good {
            (config.lambda_d, 1.0)
        } else {
            (config.lambda_u, -1.0)
        };
        let x = sign * b * d;
        loss += lambda - lambda * asymmetric_sigmoid_with(x, branch);
        grad.push(-lambda * asymmetric_sigmoid_grad(x, branch) * sign * b / n);
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(asymmetric_sigmoid(0.0), 0.5);
        assert_eq!(asymmetric_sigmoid(-2.0), 2.5);
        // High-precision value of 1 / (1 + e^-2).
        assert!((asymmetric_sigmoid(2.0) - 0.880_797_077_977_882_4).abs() < 1e-12);
        assert!((asymmetric_sigmoid(-1e-6) - asymmetric_sigmoid(1e-6)).abs() < 1e-5);
        assert_eq!(
            asymmetric_sigmoid_with(-2.0, NegativeBranch::Continuous),
            -1.5
        );
    }

    #[test]
    fn loss_examples() {
        let cfg = KtoConfig::default();
        let (l, _) = kto_loss(&[0.0, 0.0, 0.0], &[true, false, false], &cfg).unwrap();
        assert!((l - (1.0 + 0.7 + 0.7) / 3.0 / 2.0).abs() < 1e-12);
        let (l, _) = kto_loss(&[1e4], &[true], &cfg).unwrap();
        assert!(l.abs() < 1e-12);
        let (l, _) = kto_loss(&[10.0 / 0.1], &[false], &cfg).unwrap();
        assert!((l - (-6.65)).abs() < 1e-12);
        assert!(kto_loss(&[f64::NAN], &[true], &cfg).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for branch in [NegativeBranch::Reflected, NegativeBranch::Continuous] {
            let cfg = KtoConfig {
                negative_branch: branch,
                ..KtoConfig::default()
            };
            let deltas = [-7.0, -0.3, 0.4, 12.0, 3.0];
            let labels = [true, false, true, false, false];
            let (_, g) = kto_loss(&deltas, &labels, &cfg).unwrap();
            for i in 0..deltas.len() {
                let h = 1e-6;
                let mut up = deltas;
                up[i] += h;
                let mut dn = deltas;
                dn[i] -= h;
                let fd = (kto_loss(&up, &labels, &cfg).unwrap().0
                    - kto_loss(&dn, &labels, &cfg).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7, "{branch:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn saturating_side_has_the_expected_gradient_sign() {
        // On the logistic side (desirable with positive gap, undesirable with
        // negative gap) the loss falls as the desirable gap grows and rises as
        // the undesirable gap grows.
        let cfg = KtoConfig::default();
        for i in 0..200 {
            let d = i as f64 * 0.37;
            let (_, g) = kto_loss(&[d, -d], &[true, false], &cfg).unwrap();
            assert!(g[0] <= 0.0 && g[1] >= 0.0);
        }
    }

    #[test]
    fn continuous_branch_is_monotone_everywhere() {
        let cfg = KtoConfig {
            negative_branch: NegativeBranch::Continuous,
            ..KtoConfig::default()
        };
        for i in -200..200 {
            let d = i as f64 * 0.37;
            let (_, g) = kto_loss(&[d, d], &[true, false], &cfg).unwrap();
            assert!(g[0] <= 0.0 && g[1] >= 0.0);
        }
    }
}
