//! Temperature plus nucleus sampling and counter-based seed derivation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index of the largest logit; the lowest id wins exact ties.
pub fn argmax(logits: &[f64]) -> Result<u32> {
    check_logits(logits)?;
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite("logits contain NaN or +inf".into()));
    }
    if logits.iter().all(|&x| x == f64::NEG_INFINITY) {
        return Err(Error::ContractViolation("every logit is -inf".into()));
    }
    Ok(())
}

/// Token ids of the nucleus, most probable first, with their renormalised
/// probabilities: the smallest probability-sorted prefix whose mass reaches
/// `top_p` (ties sorted by lower id).
pub fn nucleus(logits: &[f64], temperature: f64, top_p: f64) -> Result<Vec<(u32, f64)>> {
    check_logits(logits)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "top_p must lie in (0, 1], got {top_p}"
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<u32> = (0..logits.len() as u32)
        .filter(|&i| weights[i as usize] > 0.0)
        .collect();
    order.sort_by(|&a, &b| {
        weights[b as usize]
            .total_cmp(&weights[a as usize])
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for id in order {
        let p = weights[id as usize] / total;
        kept.push((id, p));
        mass += p;
        // Relative slack keeps top_p = 1 from dropping tail tokens to rounding.
        if mass >= top_p * (1.0 - 1e-12) {
            break;
        }
    }
    for entry in kept.iter_mut() {
        entry.1 /= mass;
    }
    Ok(kept)
}

/// Samples one token: argmax when `temperature == 0`, otherwise temperature
/// scaling followed by nucleus truncation.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<u32> {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let kept = nucleus(logits, temperature, top_p)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in &kept {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(kept.last().expect("nucleus is never empty").0)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identifies one sampling event; every field feeds the derived seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleKey {
    pub seed: u64,
    pub query: u64,
    pub group: u64,
    pub lane: u64,
    pub step: u64,
}

impl SampleKey {
    pub fn derive(&self) -> u64 {
        [self.query, self.group, self.lane, self.step]
            .iter()
            .fold(splitmix(self.seed), |h, &x| splitmix(h ^ splitmix(x)))
    }

    /// A fresh generator for this event, independent of every other event.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_temperature_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_token(&[0.0, 3.0, 1.0], 0.0, 0.95, &mut rng).unwrap(),
            1
        );
        assert_eq!(
            sample_token(&[2.0, 5.0, 5.0], 0.0, 0.95, &mut rng).unwrap(),
            1
        );
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[sample_token(&[0.5; 4], 1.0, 1.0, &mut rng).unwrap() as usize] += 1;
        }
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!(
                (c as f64 - draws as f64 * 0.25).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn nucleus_of_a_dominant_token_is_that_token() {
        let logits = [0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()];
        let kept = nucleus(&logits, 1.0, 0.5).unwrap();
        assert_eq!(kept, vec![(0, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            assert_eq!(sample_token(&logits, 1.0, 0.5, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn nucleus_ties_prefer_lower_ids() {
        let kept = nucleus(&[1.0, 2.0, 2.0, 0.0], 1.0, 0.3).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].0, 1);
    }

    #[test]
    fn degenerate_logits_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ninf = [f64::NEG_INFINITY; 3];
        assert!(matches!(
            sample_token(&ninf, 0.6, 0.9, &mut rng),
            Err(Error::ContractViolation(_))
        ));
        assert!(matches!(
            sample_token(&ninf, 0.0, 0.9, &mut rng),
            Err(Error::ContractViolation(_))
        ));
        assert!(matches!(
            sample_token(&[0.0, f64::NAN], 0.6, 0.9, &mut rng),
            Err(Error::NonFinite(_))
        ));
        assert!(sample_token(&[0.0, 1.0], 0.6, 0.0, &mut rng).is_err());
        assert!(sample_token(&[0.0, 1.0], -1.0, 0.5, &mut rng).is_err());
        // Masked entries are fine as long as one logit is finite.
        assert_eq!(
            sample_token(&[f64::NEG_INFINITY, 0.0], 0.6, 0.9, &mut rng).unwrap(),
            1
        );
    }

    #[test]
    fn derived_seeds_separate_every_field() {
        let base = SampleKey {
            seed: 1,
            query: 2,
            group: 3,
            lane: 4,
            step: 5,
        };
        let variants = [
            SampleKey { seed: 9, ..base },
            SampleKey { query: 9, ..base },
            SampleKey { group: 9, ..base },
            SampleKey { lane: 9, ..base },
            SampleKey { step: 9, ..base },
            SampleKey {
                lane: 5,
                step: 4,
                ..base
            },
        ];
        for v in variants {
            assert_ne!(v.derive(), base.derive());
        }
        assert_eq!(base.derive(), SampleKey { ..base }.derive());
    }

    proptest! {
        #[test]
        fn sampled_token_lies_in_nucleus(
            logits in prop::collection::vec(-8.0f64..8.0, 1..20),
            temperature in 0.05f64..3.0,
            top_p in 0.01f64..=1.0,
            seed in any::<u64>(),
        ) {
            let kept = nucleus(&logits, temperature, top_p).unwrap();
            let total: f64 = kept.iter().map(|k| k.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let id = sample_token(&logits, temperature, top_p, &mut rng).unwrap();
            prop_assert!(kept.iter().any(|k| k.0 == id));
        }
    }
}
