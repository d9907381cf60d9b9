//! Reverse-mode differentiation over the handful of ops the flow model uses.
//!
//! A [`Tape`] records every op whose inputs require gradients together with a
//! closure that maps the output gradient to input gradients. With gradients
//! disabled nothing is recorded and intermediates are freed as soon as the last
//! [`Var`] referencing them drops. Ops specific to correlation volumes,
//! upsampling and the loss live next to their kernels in other modules.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tensors::{self, sigmoid_scalar, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// A value on a tape. Cloning is cheap (shared payload).
#[derive(Clone)]
pub struct Var {
    value: Arc<Tensor>,
    id: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn arc(&self) -> Arc<Tensor> {
        self.value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, id={:?})", self.value, self.id)
    }
}

pub struct Tape {
    grad_enabled: bool,
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.id.and_then(|i| self.grads[i].as_ref())
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        var.id.and_then(|i| self.grads[i].take())
    }
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape { grad_enabled, nodes: RefCell::new(Vec::new()) }
    }

    /// Tape that records nothing.
    pub fn inference() -> Self {
        Self::new(false)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Differentiable leaf (a parameter). Untracked when gradients are off.
    pub fn leaf(&self, value: Arc<Tensor>) -> Var {
        if !self.grad_enabled {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), backward: None });
        Var { value, id: Some(nodes.len() - 1) }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var { value: Arc::new(value), id: None }
    }

    pub fn constant_arc(&self, value: Arc<Tensor>) -> Var {
        Var { value, id: None }
    }

    /// Records `value = f(parents)`; `backward` maps d(out) to d(parent) for each parent.
    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[&Var],
        backward: impl Fn(&Tensor) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Var {
        let value = Arc::new(value);
        if !self.grad_enabled || parents.iter().all(|p| p.id.is_none()) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var { value, id: Some(nodes.len() - 1) }
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        if loss.value.numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", loss.shape()));
        }
        grads[root] = Some(Tensor::full(loss.shape(), 1.0));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward(&g)?;
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (pid, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            // Interior gradients are not kept; leaves have no backward fn and keep theirs.
        }
        Ok(Gradients { grads })
    }

    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = tensors::conv2d_bias(x.value(), w.value(), b.map(|b| b.value()), stride, pad)?;
        let (xv, wv) = (x.arc(), w.arc());
        let has_bias = b.is_some();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.record(out, &parents, move |g| {
            let (dx, dw) = tensors::conv2d_backward(&xv, &wv, g, stride, pad)?;
            let mut v = vec![Some(dx), Some(dw)];
            if has_bias {
                v.push(Some(tensors::channel_sums(g)?));
            }
            Ok(v)
        }))
    }

    pub fn relu(&self, x: &Var) -> Var {
        let out = tensors::relu(x.value());
        let xv = x.arc();
        self.record(out, &[x], move |g| {
            Ok(vec![Some(g.zip_map(&xv, |g, x| if x > 0.0 { g } else { 0.0 })?)])
        })
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        let out = Arc::new(x.value().map(sigmoid_scalar));
        let y = out.clone();
        self.record((*out).clone(), &[x], move |g| {
            Ok(vec![Some(g.zip_map(&y, |g, y| g * y * (1.0 - y))?)])
        })
    }

    pub fn tanh(&self, x: &Var) -> Var {
        let out = Arc::new(tensors::tanh(x.value()));
        let y = out.clone();
        self.record((*out).clone(), &[x], move |g| {
            Ok(vec![Some(g.zip_map(&y, |g, y| g * (1.0 - y * y))?)])
        })
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value().zip_map(b.value(), |p, q| p + q)?;
        Ok(self.record(out, &[a, b], |g| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value().zip_map(b.value(), |p, q| p - q)?;
        Ok(self.record(out, &[a, b], |g| Ok(vec![Some(g.clone()), Some(g.scale(-1.0))])))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value().zip_map(b.value(), |p, q| p * q)?;
        let (av, bv) = (a.arc(), b.arc());
        Ok(self.record(out, &[a, b], move |g| {
            Ok(vec![Some(g.zip_map(&bv, |g, q| g * q)?), Some(g.zip_map(&av, |g, p| g * p)?)])
        }))
    }

    pub fn scale(&self, x: &Var, s: f32) -> Var {
        self.record(x.value().scale(s), &[x], move |g| Ok(vec![Some(g.scale(s))]))
    }

    /// `1 - x`
    pub fn one_minus(&self, x: &Var) -> Var {
        self.record(x.value().map(|v| 1.0 - v), &[x], |g| Ok(vec![Some(g.scale(-1.0))]))
    }

    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat_channels(&values)?;
        let bounds: Vec<usize> = values.iter().map(|t| t.shape()[0]).collect();
        Ok(self.record(out, parts, move |g| {
            let mut start = 0;
            bounds
                .iter()
                .map(|&c| {
                    let s = g.slice_channels(start, start + c).map(Some);
                    start += c;
                    s
                })
                .collect()
        }))
    }

    pub fn slice(&self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let out = x.value().slice_channels(start, end)?;
        let shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g| {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let mut full = vec![0.0f32; c * h * w];
            full[start * h * w..end * h * w].copy_from_slice(g.data());
            Ok(vec![Some(Tensor::new(shape.clone(), full)?)])
        }))
    }

    pub fn avg_pool(&self, x: &Var) -> Result<Var> {
        let out = tensors::avg_pool2d(x.value(), 2)?;
        let (_, h, w) = x.value().dims3()?;
        Ok(self.record(out, &[x], move |g| Ok(vec![Some(tensors::avg_pool2d_backward(g, h, w)?)])))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&self, x: &Var) -> Var {
        let shape = x.shape().to_vec();
        let s = x.value().sum() as f32;
        self.record(Tensor::scalar(s), &[x], move |g| Ok(vec![Some(Tensor::full(&shape, g.item()))]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(r ⊙ f(x)))/dx for one input.
    fn check(f: impl Fn(&Tape, &Var) -> Var, x: Tensor, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new(true);
        let xv = tape.leaf(Arc::new(x.clone()));
        let y = f(&tape, &xv);
        let r = tape.constant(rand_t(y.shape(), &mut rng));
        let loss = tape.sum(&tape.mul(&y, &r).unwrap());
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.get(&xv).unwrap().clone();
        let eval = |x: Tensor| {
            let t = Tape::inference();
            let y = f(&t, &t.constant(x));
            y.value().data().iter().zip(r.value().data()).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()
        };
        let eps = 1e-2f32;
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let num = (eval(p) - eval(m)) / (2.0 * eps as f64);
            let a = analytic.data()[i] as f64;
            assert!((num - a).abs() <= tol * (1.0 + a.abs()), "entry {i}: {num} vs {a}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&[2, 3, 3], &mut rng);
        check(|t, x| t.tanh(x), x.clone(), 1e-3);
        check(|t, x| t.sigmoid(x), x.clone(), 1e-3);
        check(|t, x| t.one_minus(&t.scale(x, 3.0)), x.clone(), 1e-3);
        check(|t, x| t.mul(x, x).unwrap(), x.clone(), 1e-3);
        check(|t, x| t.concat(&[x, &t.slice(x, 1, 2).unwrap()]).unwrap(), x.clone(), 1e-3);
        check(|t, x| t.avg_pool(x).unwrap(), x, 1e-3);
    }

    #[test]
    fn conv_gradients_flow_to_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Arc::new(rand_t(&[2, 2, 3, 3], &mut rng));
        let x = rand_t(&[2, 5, 4], &mut rng);
        check(move |t, x| t.conv2d(x, &t.constant_arc(w.clone()), None, 2, 1).unwrap(), x.clone(), 1e-3);
        let xa = Arc::new(x);
        check(move |t, w| t.conv2d(&t.constant_arc(xa.clone()), w, None, 1, 1).unwrap(), rand_t(&[3, 2, 3, 3], &mut rng), 1e-3);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let tape = Tape::new(true);
        let x = tape.leaf(Arc::new(Tensor::full(&[3], 2.0)));
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum(&y);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.leaf(Arc::new(Tensor::full(&[3], 2.0)));
        let _ = tape.relu(&tape.scale(&x, -1.0));
        assert_eq!(tape.num_nodes(), 0);
    }
}
