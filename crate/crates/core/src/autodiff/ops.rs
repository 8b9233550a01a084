//! Elementwise maps, reductions and softmax.

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{same_shape, Real, Tensor};

fn unary<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    f: impl Fn(T) -> T,
    // derivative given (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var {
    let value = tape.value(x).map(f);
    tape.push(
        value,
        &[x],
        Box::new(move |b: &Backward<'_, T>| {
            let x = b.inputs[0].data();
            let y = b.output.data();
            let g = Tensor::from_fn(b.grad.shape(), |i| b.grad.data()[i] * df(x[i], y[i]));
            vec![Some(g)]
        }),
    )
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|b: &Backward<'_, T>| vec![Some(b.grad.clone()), Some(b.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|b: &Backward<'_, T>| vec![Some(b.grad.clone()), Some(b.grad.map(|g| -g))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|b: &Backward<'_, T>| {
                let (x, y) = (b.inputs[0], b.inputs[1]);
                vec![
                    b.needs[0].then(|| b.grad.zip_map(y, |g, y| g * y)),
                    b.needs[1].then(|| b.grad.zip_map(x, |g, x| g * x)),
                ]
            }),
        ))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        unary(self, x, move |v| v * c, move |_, _| c)
    }

    /// Adds a constant.
    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        unary(self, x, move |v| v + c, |_, _| T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        unary(
            self,
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        unary(self, x, T::tanh, |_, y| T::one() - y * y)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        unary(self, x, T::abs, |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn log(&mut self, x: Var) -> Var {
        unary(self, x, T::ln, |x, _| T::one() / x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        unary(self, x, T::exp, |_, y| y)
    }

    /// `x^p` for a constant exponent.
    pub fn powf(&mut self, x: Var, p: T) -> Var {
        unary(self, x, move |v| v.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            value,
            &[x],
            Box::new(|b: &Backward<'_, T>| vec![Some(Tensor::full(b.inputs[0].shape(), b.grad.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(
            value,
            &[x],
            Box::new(move |b: &Backward<'_, T>| vec![Some(Tensor::full(b.inputs[0].shape(), b.grad.item() / n))]),
        )
    }

    /// Maximum over all elements. The gradient goes to the first maximal
    /// element.
    pub fn max(&mut self, x: Var) -> Var {
        let (arg, m) = argmax(self.value(x).data());
        self.push(
            Tensor::scalar(m),
            &[x],
            Box::new(move |b: &Backward<'_, T>| {
                let mut g = Tensor::zeros(b.inputs[0].shape());
                g.data_mut()[arg] = b.grad.item();
                vec![Some(g)]
            }),
        )
    }

    /// Sum of `a * b` over all elements.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(|b: &Backward<'_, T>| {
                let g = b
                    .grad
                    .clone()
                    .reshape(b.inputs[0].shape())
                    .expect("reshape preserves length");
                vec![Some(g)]
            }),
        ))
    }

    /// Repeats a rank-1 tensor `[K]` as the rows of `[n,K]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 || n == 0 {
            return Err(Error::shape(format!(
                "broadcast_rows expects a rank-1 tensor, got {xs:?}"
            )));
        }
        let k = xs[0];
        let row = self.value(x).data().to_vec();
        let data: Vec<T> = (0..n).flat_map(|_| row.iter().copied()).collect();
        let value = Tensor::new(vec![n, k], data)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |b: &Backward<'_, T>| {
                let mut g = vec![T::zero(); k];
                for r in b.grad.data().chunks(k) {
                    for (a, &v) in g.iter_mut().zip(r) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::from_vec(g))]
            }),
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&k) = shape.last() else {
            return Err(Error::shape("softmax of a rank-0 tensor"));
        };
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        Ok(self.push(
            out,
            &[x],
            Box::new(move |b: &Backward<'_, T>| {
                let mut g = b.grad.clone();
                for (gr, yr) in g.data_mut().chunks_mut(k).zip(b.output.data().chunks(k)) {
                    let s: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for (gv, &y) in gr.iter_mut().zip(yr) {
                        *gv = y * (*gv - s);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

pub(crate) fn argmax<T: Real>(v: &[T]) -> (usize, T) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Max-shifted softmax of a slice, in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
