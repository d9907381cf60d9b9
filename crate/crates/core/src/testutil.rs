use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::learn::grad_check;
use crate::tensors::Tensor;

pub fn random_tensor(shape: &[usize], scale: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Worst relative error of a directional gradient check touching every entry.
pub fn directional_check(inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Var, eps: f32, seed: u64) -> f64 {
    grad_check(inputs, |t, v| Ok(f(t, v)), eps, 1.0, seed).unwrap().max_rel_error()
}
