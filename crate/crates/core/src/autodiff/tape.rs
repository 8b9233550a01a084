//! Wengert-list reverse mode differentiation.
//!
//! Every operation appends a node holding its forward value, the indices of
//! its inputs and a backward rule. Inputs always precede the node that
//! consumes them, so a single reverse sweep over the node list visits every
//! operation exactly once in a valid order.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct Backward<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// Gradient of the loss with respect to `output`.
    pub grad: &'a Tensor<T>,
    /// Which inputs actually need a gradient. Rules may skip work for the
    /// others and return `None` in their slot.
    pub needs: &'a [bool],
}

pub(crate) type BuiltinRule<T> = Box<dyn Fn(&Backward<'_, T>) -> Vec<Option<Tensor<T>>>>;

/// Backward rule supplied through [`Tape::custom`]. Must return exactly one
/// gradient per input, each shaped like that input.
pub type CustomBackward<T> = Box<dyn Fn(&Backward<'_, T>) -> Vec<Tensor<T>>>;

enum Rule<T> {
    Leaf,
    Builtin(BuiltinRule<T>),
    Custom(CustomBackward<T>),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    rule: Rule<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            rule: Rule::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient (data, fixed noise, frozen
    /// weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[Var], rule: BuiltinRule<T>) -> Var {
        self.push_rule(value, inputs, Rule::Builtin(rule))
    }

    fn push_rule(&mut self, value: Tensor<T>, inputs: &[Var], rule: Rule<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            rule,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation whose forward value comes from `forward` and whose
    /// gradient is produced verbatim by `backward`, bypassing whatever the
    /// analytic derivative of `forward` would be. This is the hook the
    /// straight-through quantizers are built on.
    pub fn custom<F, B>(&mut self, inputs: &[Var], forward: F, backward: B) -> Result<Var>
    where
        F: FnOnce(&[&Tensor<T>]) -> Result<Tensor<T>>,
        B: Fn(&Backward<'_, T>) -> Vec<Tensor<T>> + 'static,
    {
        let value = {
            let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
            forward(&values)?
        };
        Ok(self.push_rule(value, inputs, Rule::Custom(Box::new(backward))))
    }

    /// Gradient of a one-element `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a one-element loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(loss, Tensor::ones(value.shape()))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let ctx = Backward {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            };
            let input_grads: Vec<Option<Tensor<T>>> = match &node.rule {
                Rule::Leaf => unreachable!("leaves have no inputs"),
                Rule::Builtin(rule) => rule(&ctx),
                Rule::Custom(rule) => {
                    let out = rule(&ctx);
                    if out.len() != node.inputs.len() {
                        return Err(Error::Arity {
                            expected: node.inputs.len(),
                            got: out.len(),
                        });
                    }
                    for (g, x) in out.iter().zip(&inputs) {
                        if g.shape() != x.shape() {
                            return Err(Error::shape(format!(
                                "custom gradient shape {:?} does not match input {:?}",
                                g.shape(),
                                x.shape()
                            )));
                        }
                    }
                    out.into_iter().map(Some).collect()
                }
            };
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&i, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), self.nodes[i].value.shape());
                match &mut grads[i] {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the gradient of the output around for callers that ask
            // for intermediate gradients.
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a reverse sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` does not influence the loss or does not require a
    /// gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
