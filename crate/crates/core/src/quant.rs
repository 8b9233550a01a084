//! k-bit weight and activation quantizers with straight-through gradients.
//!
//! Weights follow the DoReFa recipe: squash with `tanh`, normalize into
//! `[0, 1]`, snap to the uniform grid `{i / (2^k - 1)}` and stretch back to
//! the signed range `[-1, 1]`. Activations follow PACT: clip to `[0, alpha]`
//! with a learnable `alpha`, then snap `y / alpha` to the same grid.
//!
//! Bit-width 32 means "not quantized" everywhere in this crate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Bit-width that disables quantization.
pub const FULL_PRECISION: u32 = 32;

/// Lower bound applied to the activation clipping parameter before use.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// Initial clipping bound for every quantized activation site.
pub const ALPHA_INIT: f64 = 8.0;

pub fn check_bits(bits: u32) -> Result<()> {
    if (1..=8).contains(&bits) || bits == FULL_PRECISION {
        Ok(())
    } else {
        Err(Error::invalid(format!("bit-width must be 1..=8 or 32, got {bits}")))
    }
}

/// Nearest point of `{i / (2^k - 1)}` to `x`; exact midpoints go up.
/// Inputs outside `[0, 1]` are clamped first. `k = 32` returns `x` as is.
///
/// ```
/// use dnas::quant::quantize_grid;
/// assert_eq!(quantize_grid(0.5f64, 2), 2.0 / 3.0);
/// assert_eq!(quantize_grid(-0.2f64, 4), 0.0);
/// ```
pub fn quantize_grid<T: Real>(x: T, k: u32) -> T {
    if k >= FULL_PRECISION {
        return x;
    }
    let levels = T::lit(((1u64 << k) - 1) as f64);
    let x = x.max(T::zero()).min(T::one());
    let i = (x * levels + T::lit(0.5)).floor();
    i / levels
}

/// Tape version of [`quantize_grid`]: rounding forward, identity backward on
/// `[0, 1]` and zero gradient where the input was clamped.
pub fn quantize_grid_op<T: Real>(tape: &mut Tape<T>, x: Var, k: u32) -> Result<Var> {
    check_bits(k)?;
    tape.custom(
        &[x],
        |xs| Ok(xs[0].map(|v| quantize_grid(v, k))),
        |b: &Backward<'_, T>| {
            let x = b.inputs[0];
            vec![b
                .grad
                .zip_map(x, |g, v| if v >= T::zero() && v <= T::one() { g } else { T::zero() })]
        },
    )
}

fn max_abs_tanh<T: Real>(w: &Tensor<T>) -> T {
    w.data().iter().map(|v| v.tanh().abs()).fold(T::zero(), T::max)
}

/// Forward value of [`dorefa_quantize`] without recording anything.
pub fn dorefa_values<T: Real>(w: &Tensor<T>, k: u32) -> Tensor<T> {
    if k >= FULL_PRECISION {
        return w.clone();
    }
    let m = max_abs_tanh(w);
    if m == T::zero() {
        return Tensor::zeros(w.shape());
    }
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    w.map(|v| two * quantize_grid(v.tanh() / (two * m) + half, k) - T::one())
}

/// Signed k-bit weight quantization, `2 Q_k(tanh(w) / (2 max|tanh(w)|) + 0.5) - 1`.
///
/// The trailing `- 1` keeps the output symmetric in `[-1, 1]`; the unsigned
/// form without it would confine weights to `[0, 1]`.
///
/// The gradient is straight-through across `Q_k`; `tanh` and the scaling are
/// differentiated, and the maximum is treated as a constant.
pub fn dorefa_quantize<T: Real>(tape: &mut Tape<T>, w: Var, k: u32) -> Result<Var> {
    check_bits(k)?;
    if k == FULL_PRECISION {
        return Ok(w);
    }
    let m = max_abs_tanh(tape.value(w));
    tape.custom(
        &[w],
        |ws| Ok(dorefa_values(ws[0], k)),
        move |b: &Backward<'_, T>| {
            if m == T::zero() {
                return vec![Tensor::zeros(b.grad.shape())];
            }
            vec![b.grad.zip_map(b.inputs[0], |g, v| {
                let t = v.tanh();
                g * (T::one() - t * t) / m
            })]
        },
    )
}

/// PACT clipping followed by k-bit quantization: `y = clip(x, 0, alpha)`,
/// `y_k = Q_k(y / alpha) * alpha`.
///
/// Gradients: `dy_k/dx = 1` on `(0, alpha)` and 0 elsewhere; `dy_k/dalpha = 1`
/// where `x >= alpha` and 0 elsewhere, summed into the scalar `alpha`.
/// Non-positive `alpha` is raised to [`ALPHA_FLOOR`].
pub fn pact_activation<T: Real>(tape: &mut Tape<T>, x: Var, alpha: Var, k: u32) -> Result<Var> {
    check_bits(k)?;
    if tape.value(alpha).len() != 1 {
        return Err(Error::shape(format!(
            "pact: alpha must hold one value, got shape {:?}",
            tape.shape(alpha)
        )));
    }
    let a = tape.value(alpha).item().max(T::lit(ALPHA_FLOOR));
    tape.custom(
        &[x, alpha],
        |xs| {
            Ok(xs[0].map(|v| {
                let y = v.max(T::zero()).min(a);
                if k == FULL_PRECISION {
                    y
                } else {
                    quantize_grid(y / a, k) * a
                }
            }))
        },
        move |b: &Backward<'_, T>| {
            let x = b.inputs[0];
            let dx = b
                .grad
                .zip_map(x, |g, v| if v > T::zero() && v < a { g } else { T::zero() });
            let da: T = b
                .grad
                .data()
                .iter()
                .zip(x.data())
                .filter(|(_, &v)| v >= a)
                .map(|(&g, _)| g)
                .sum();
            vec![
                dx,
                Tensor::new(b.inputs[1].shape().to_vec(), vec![da]).expect("one element"),
            ]
        },
    )
}

/// Weight quantizer of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightQuantizer {
    pub bits: u32,
}

impl WeightQuantizer {
    pub fn new(bits: u32) -> Result<Self> {
        check_bits(bits)?;
        Ok(WeightQuantizer { bits })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, w: Var) -> Result<Var> {
        dorefa_quantize(tape, w, self.bits)
    }
}

/// Activation quantizer of one activation site. The clipping bound itself
/// lives in the parameter store; this only records the bit-width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationQuantizer {
    pub bits: u32,
}

impl ActivationQuantizer {
    pub fn new(bits: u32) -> Result<Self> {
        check_bits(bits)?;
        Ok(ActivationQuantizer { bits })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var, alpha: Var) -> Result<Var> {
        pact_activation(tape, x, alpha, self.bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_and_nearest() {
        for k in [1, 2, 3, 4, 8] {
            assert_eq!(quantize_grid(0.0f64, k), 0.0);
            assert_eq!(quantize_grid(1.0f64, k), 1.0);
        }
        assert_eq!(quantize_grid(0.4f64, 1), 0.0);
        // grid {0, 1/3, 2/3, 1}: distances 0.4, 0.0667, 0.2667, 0.6
        assert_eq!(quantize_grid(0.4f64, 2), 1.0 / 3.0);
    }

    #[test]
    fn midpoints_round_up_and_outside_clamps() {
        assert_eq!(quantize_grid(0.5f64, 1), 1.0);
        assert_eq!(quantize_grid(1.0f64 / 6.0, 2), 1.0 / 3.0);
        assert_eq!(quantize_grid(-0.3f64, 3), 0.0);
        assert_eq!(quantize_grid(1.7f64, 3), 1.0);
        assert_eq!(quantize_grid(1.7f64, 32), 1.7);
    }

    #[test]
    fn rejects_unsupported_bits() {
        assert!(check_bits(0).is_err());
        assert!(check_bits(16).is_err());
        assert!(check_bits(8).is_ok());
    }

    #[test]
    fn dorefa_extremes_map_to_unit() {
        let w = Tensor::from_vec(vec![0.8f64, -0.8, 0.1]);
        for k in [1, 2, 4, 8] {
            let q = dorefa_values(&w, k);
            assert_eq!(q.data()[0], 1.0);
            assert_eq!(q.data()[1], -1.0);
        }
    }

    #[test]
    fn dorefa_full_precision_is_identity() {
        let w = Tensor::from_vec(vec![0.123f32, -4.5, 1e-7]);
        assert_eq!(dorefa_values(&w, 32), w);
        let mut tape = Tape::new();
        let v = tape.param(w.clone());
        let q = dorefa_quantize(&mut tape, v, 32).unwrap();
        assert_eq!(tape.value(q), &w);
    }

    #[test]
    fn dorefa_all_zero_is_zero() {
        let w = Tensor::<f64>::zeros(&[4]);
        assert_eq!(dorefa_values(&w, 2), w);
    }

    #[test]
    fn dorefa_two_bit_matches_scalar_reference() {
        // Independent scalar evaluation of the formula.
        let w = [0.5f64, -0.5, 0.1];
        let m = w.iter().map(|v: &f64| v.tanh().abs()).fold(0.0, f64::max);
        let grid = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        let expect: Vec<f64> = w
            .iter()
            .map(|v| {
                let t = v.tanh() / (2.0 * m) + 0.5;
                let best = grid
                    .iter()
                    .copied()
                    .min_by(|a, b| (a - t).abs().partial_cmp(&(b - t).abs()).unwrap())
                    .unwrap();
                2.0 * best - 1.0
            })
            .collect();
        // 0.1 -> t = 0.5 + tanh(0.1)/(2 tanh(0.5)) ~ 0.6079 -> 2/3 -> 1/3
        assert!((expect[2] - 1.0 / 3.0).abs() < 1e-15);
        let got = dorefa_values(&Tensor::from_vec(w.to_vec()), 2);
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-15, "{g} vs {e}");
        }
    }

    #[test]
    fn pact_regions() {
        let alpha = 1.5f64;
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-2.0, 2.0 * alpha, alpha / 2.0, 0.4 * alpha]));
        let a = tape.param(Tensor::scalar(alpha));
        let full = pact_activation(&mut tape, x, a, 32).unwrap();
        assert_eq!(tape.value(full).data()[..3], [0.0, alpha, alpha / 2.0]);
        let two = pact_activation(&mut tape, x, a, 2).unwrap();
        assert!((tape.value(two).data()[3] - alpha / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pact_gradients_follow_clipping_regions() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-1.0f64, 0.3, 0.9, 2.0, 3.0]));
        let a = tape.param(Tensor::scalar(1.0));
        let y = pact_activation(&mut tape, x, a, 3).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.get(a).unwrap().item(), 2.0);
    }

    #[test]
    fn pact_floors_alpha() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.5f64]));
        let a = tape.param(Tensor::scalar(-1.0));
        let y = pact_activation(&mut tape, x, a, 32).unwrap();
        assert_eq!(tape.value(y).item(), ALPHA_FLOOR);
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.2f64, 0.55, 0.9]));
        let q = quantize_grid_op(&mut tape, x, 2).unwrap();
        let seed = Tensor::from_vec(vec![0.3, -1.2, 7.0]);
        let g = tape.backward_with(q, seed.clone()).unwrap();
        assert_eq!(g.get(x).unwrap(), &seed);
    }
}
