//! Edge probabilities, Gumbel-Softmax masks and temperature annealing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Uniform draws are clamped to `[GUMBEL_EPS, 1 - GUMBEL_EPS]` before the
/// double logarithm.
pub const GUMBEL_EPS: f64 = 1e-12;

/// `softmax(theta)`, max-shifted.
pub fn edge_probabilities(theta: &[f64]) -> Vec<f64> {
    let mut p = theta.to_vec();
    softmax_in_place(&mut p);
    p
}

/// `n` independent Gumbel(0, 1) draws, `-ln(-ln u)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Index drawn from a categorical distribution given by `probs`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// `softmax((theta + noise) / tau)` recorded on the tape. `theta` is `[K]`;
/// `noise` holds `K` values for one shared mask or `n * K` values for a
/// mask per example, in which case the result is `[n, K]`. The noise is a
/// constant, so gradients reach `theta` only.
pub fn gumbel_softmax<T: Real>(tape: &mut Tape<T>, theta: Var, noise: &[f64], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let k = match tape.shape(theta) {
        [k] => *k,
        s => return Err(Error::shape(format!("theta must be rank 1, got {s:?}"))),
    };
    if noise.is_empty() || !noise.len().is_multiple_of(k) {
        return Err(Error::shape(format!("{} noise values for {k} candidates", noise.len())));
    }
    let rows = noise.len() / k;
    let (logits, shape) = if rows == 1 {
        (theta, vec![k])
    } else {
        (tape.broadcast_rows(theta, rows)?, vec![rows, k])
    };
    let g = tape.constant(Tensor::new(shape, noise.iter().map(|&v| T::lit(v)).collect())?);
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, T::lit(1.0 / tau));
    tape.softmax(scaled)
}

/// Draws fresh Gumbel noise and returns one soft mask `[K]`.
pub fn sample_soft_masks<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    theta: Var,
    tau: f64,
    rng: &mut R,
) -> Result<Var> {
    let k = tape.value(theta).len();
    let noise = gumbel_noise(rng, k);
    gumbel_softmax(tape, theta, &noise, tau)
}

/// Draws an independent soft mask for each of `n` examples, `[n, K]`.
pub fn sample_soft_masks_per_example<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    theta: Var,
    tau: f64,
    n: usize,
    rng: &mut R,
) -> Result<Var> {
    let k = tape.value(theta).len();
    let noise = gumbel_noise(rng, n * k);
    gumbel_softmax(tape, theta, &noise, tau)
}

/// `tau = t0 * exp(-eta * epoch)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub t0: f64,
    pub eta: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { t0: 5.0, eta: 0.025 }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) || !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature schedule needs t0 > 0 and eta >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn temperature_at(&self, epoch: u32) -> f64 {
        self.t0 * (-self.eta * epoch as f64).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities() {
        let p = edge_probabilities(&[0.0; 7]);
        assert!(p.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
        let a = edge_probabilities(&[0.3, -1.2, 2.0]);
        let b = edge_probabilities(&[100.3, 98.8, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let p = edge_probabilities(&[1.0, 0.0]);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p[1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn schedule() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.temperature_at(0), 5.0);
        let flat = TemperatureSchedule { t0: 2.0, eta: 0.0 };
        assert_eq!(flat.temperature_at(1000), 2.0);
        // 5 exp(-2.25), evaluated independently to 16 digits
        assert!((s.temperature_at(90) - 0.5269961228093216).abs() < 1e-9);
    }

    #[test]
    fn masks_are_normalized_and_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut tape = Tape::<f64>::new();
            let theta = tape.param(Tensor::from_vec(vec![0.5, -0.3, 1.1, 0.0]));
            let m = sample_soft_masks(&mut tape, theta, 1.0, &mut rng).unwrap();
            let v = tape.value(m).data();
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn low_temperature_is_nearly_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let theta = [0.2, -0.1, 0.4];
            let noise = gumbel_noise(&mut rng, 3);
            let mut tape = Tape::<f64>::new();
            let t = tape.param(Tensor::from_vec(theta.to_vec()));
            let m = gumbel_softmax(&mut tape, t, &noise, 1e-4).unwrap();
            let arg = (0..3)
                .max_by(|&a, &b| (theta[a] + noise[a]).partial_cmp(&(theta[b] + noise[b])).unwrap())
                .unwrap();
            for (i, &v) in tape.value(m).data().iter().enumerate() {
                let target = if i == arg { 1.0 } else { 0.0 };
                assert!((v - target).abs() < 1e-3, "{v} vs {target}");
            }
        }
    }

    #[test]
    fn rejects_bad_temperature() {
        let mut tape = Tape::<f64>::new();
        let t = tape.param(Tensor::from_vec(vec![0.0, 0.0]));
        assert!(gumbel_softmax(&mut tape, t, &[0.1, 0.2], 0.0).is_err());
        assert!(TemperatureSchedule { t0: 0.0, eta: 1.0 }.validate().is_err());
    }

    #[test]
    fn categorical_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = edge_probabilities(&[0.0, 1e6, 0.0]);
        assert!((0..1000).all(|_| sample_categorical(&p, &mut rng) == 1));
    }
}
