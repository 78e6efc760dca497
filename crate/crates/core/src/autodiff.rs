//! Scalar reverse-mode differentiation.
//!
//! The gradient-matching attack needs derivatives of a model *gradient* with
//! respect to the model *inputs*. The model's backward pass is written once,
//! generically over [`Scalar`], and then evaluated either on plain `f64` or
//! on tape-recorded [`Var`]s, whose reverse sweep yields the second-order
//! quantities.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use crate::model::ModelConfig;

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living in the same context as `self`.
    fn constant_like(&self, c: f64) -> Self;
    fn scale(self, c: f64) -> Self;
    fn add_const(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn constant_like(&self, c: f64) -> Self {
        c
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn add_const(self, c: f64) -> Self {
        self + c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

const NO_PARENT: usize = usize::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [usize; 2],
    partials: [f64; 2],
}

/// Wengert list of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: [usize; 2], partials: [f64; 2]) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, partials });
        nodes.len() - 1
    }

    /// An independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            index: self.push([NO_PARENT; 2], [0.0; 2]),
            value,
        }
    }

    /// Adjoints of every recorded node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![0.0; nodes.len()];
        adjoint[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                if node.parents[k] != NO_PARENT {
                    adjoint[node.parents[k]] += a * node.partials[k];
                }
            }
        }
        adjoint
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.index
    }

    fn unary(self, value: f64, partial: f64) -> Self {
        Var {
            tape: self.tape,
            index: self.tape.push([self.index, NO_PARENT], [partial, 0.0]),
            value,
        }
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        Var {
            tape: self.tape,
            index: self.tape.push([self.index, other.index], [da, db]),
            value,
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(&self) -> f64 {
        self.value
    }
    fn constant_like(&self, c: f64) -> Self {
        Var {
            tape: self.tape,
            index: self.tape.push([NO_PARENT; 2], [0.0; 2]),
            value: c,
        }
    }
    fn scale(self, c: f64) -> Self {
        self.unary(self.value * c, c)
    }
    fn add_const(self, c: f64) -> Self {
        self.unary(self.value + c, 1.0)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }
}

fn sum<T: Scalar>(mut terms: impl Iterator<Item = T>) -> Option<T> {
    let first = terms.next()?;
    Some(terms.fold(first, |acc, t| acc + t))
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    // Shifting by a constant leaves both the value and the derivative intact.
    let max = logits.iter().map(Scalar::value).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<T> = logits.iter().map(|z| z.add_const(-max).exp()).collect();
    let total = sum(exps.iter().copied()).expect("non-empty logits");
    let inv = total.ln().neg().exp();
    exps.into_iter().map(|e| e * inv).collect()
}

/// Gradient of the mean soft-label cross-entropy with respect to the model
/// parameters, as a function of the inputs.
///
/// `features` is row-major `n x input_dim`; `label_logits` is `n x classes`
/// and is mapped through a softmax to obtain the soft targets.
pub fn soft_label_gradient<T: Scalar>(
    params: &[f64],
    config: &ModelConfig,
    features: &[T],
    label_logits: &[T],
) -> Vec<T> {
    let layers = config.layers();
    let k = config.num_classes;
    let n = label_logits.len() / k;
    debug_assert_eq!(features.len(), n * config.input_dim);

    let mut grad: Vec<Option<T>> = vec![None; params.len()];
    let accumulate = |slot: &mut Option<T>, v: T| {
        *slot = Some(match *slot {
            Some(acc) => acc + v,
            None => v,
        })
    };

    for s in 0..n {
        let x = &features[s * config.input_dim..(s + 1) * config.input_dim];
        let mut acts: Vec<Vec<T>> = vec![x.to_vec()];
        for (li, layer) in layers.iter().enumerate() {
            let input = &acts[li];
            let last = li + 1 == layers.len();
            let out: Vec<T> = (0..layer.fan_out)
                .map(|o| {
                    let z = sum((0..layer.fan_in).map(|i| input[i].scale(params[layer.weight(o, i)])))
                        .expect("fan_in > 0")
                        .add_const(params[layer.bias_offset + o]);
                    if last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }

        let probs = softmax(acts.last().expect("at least one layer"));
        let targets = softmax(&label_logits[s * k..(s + 1) * k]);
        let mut delta: Vec<T> = probs.iter().zip(&targets).map(|(&p, &y)| p - y).collect();

        for (li, layer) in layers.iter().enumerate().rev() {
            let input = &acts[li];
            for o in 0..layer.fan_out {
                accumulate(&mut grad[layer.bias_offset + o], delta[o]);
                for i in 0..layer.fan_in {
                    accumulate(&mut grad[layer.weight(o, i)], delta[o] * input[i]);
                }
            }
            if li == 0 {
                break;
            }
            delta = (0..layer.fan_in)
                .map(|i| {
                    let back = sum((0..layer.fan_out).map(|o| delta[o].scale(params[layer.weight(o, i)])))
                        .expect("fan_out > 0");
                    let a = input[i];
                    back * (a * a).neg().add_const(1.0)
                })
                .collect();
        }
    }

    let zero = features[0].constant_like(0.0);
    let inv_n = 1.0 / n as f64;
    grad.into_iter()
        .map(|g| g.unwrap_or(zero).scale(inv_n))
        .collect()
}
