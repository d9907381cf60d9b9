//! Single-head global attention used to aggregate motion features.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensors::{gemm, softmax_strided, Tensor};

/// `log₃(hw) / sqrt(dim)`, the resolution-aware attention temperature.
///
/// Exact powers of three are resolved by integer division so that
/// `attention_scale(3^m, d) == m / sqrt(d)` holds bit-for-bit.
pub fn attention_scale(hw: usize, dim: usize) -> f64 {
    let log3 = {
        let (mut n, mut m) = (hw, 0u32);
        while n > 1 && n % 3 == 0 {
            n /= 3;
            m += 1;
        }
        if n == 1 {
            m as f64
        } else {
            (hw as f64).ln() / 3f64.ln()
        }
    };
    log3 / (dim as f64).sqrt()
}

fn dims(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = q.dims3()?;
    if k.shape() != q.shape() {
        return Err(shape_err!("keys {:?} do not match queries {:?}", k.shape(), q.shape()));
    }
    let (cv, vh, vw) = v.dims3()?;
    if (vh, vw) != (h, w) {
        return Err(shape_err!("values {:?} misaligned with queries {:?}", v.shape(), q.shape()));
    }
    Ok((c, cv, h * w))
}

/// Row-softmaxed attention matrix `A[i][j]` over all `n` positions.
fn attention_matrix(q: &Tensor, k: &Tensor, scale: f32) -> Result<(Vec<f32>, usize)> {
    let (c, _, n) = dims(q, k, q)?;
    let mut a = vec![0.0f32; n * n];
    // logits (n × n) = qᵀ (n × c) · k (c × n)
    gemm(n, c, n, q.data(), (1, n as isize), k.data(), (n as isize, 1), 0.0, &mut a);
    for row in a.chunks_mut(n.max(1)) {
        row.iter_mut().for_each(|v| *v *= scale);
        softmax_strided(row, 0, n, 1);
    }
    Ok((a, n))
}

/// `out[:, i] = Σ_j softmax_j(scale · <q_i, k_j>) · v[:, j]`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, scale: f32) -> Result<Tensor> {
    let (_, cv, n) = dims(q, k, v)?;
    let (a, _) = attention_matrix(q, k, scale)?;
    let mut out = vec![0.0f32; cv * n];
    gemm(cv, n, n, v.data(), (n as isize, 1), &a, (1, n as isize), 0.0, &mut out);
    Tensor::new(v.shape().to_vec(), out)
}

/// Gradients of [`attend`] with respect to queries, keys and values.
pub fn attend_backward(q: &Tensor, k: &Tensor, v: &Tensor, scale: f32, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, cv, n) = dims(q, k, v)?;
    let (a, _) = attention_matrix(q, k, scale)?;
    let g = grad_out.data();
    // dA (n × n) = gᵀ (n × cv) · v (cv × n)
    let mut da = vec![0.0f32; n * n];
    gemm(n, cv, n, g, (1, n as isize), v.data(), (n as isize, 1), 0.0, &mut da);
    // dv (cv × n) = g (cv × n) · A (n × n)
    let mut dv = vec![0.0f32; cv * n];
    gemm(cv, n, n, g, (n as isize, 1), &a, (n as isize, 1), 0.0, &mut dv);
    // softmax backward, folded with the logit scale
    let mut dl = vec![0.0f32; n * n];
    for i in 0..n {
        let (arow, darow) = (&a[i * n..(i + 1) * n], &da[i * n..(i + 1) * n]);
        let dot: f32 = arow.iter().zip(darow).map(|(p, q)| p * q).sum();
        for j in 0..n {
            dl[i * n + j] = scale * arow[j] * (darow[j] - dot);
        }
    }
    // dq (c × n) = k · dLᵀ ; dk (c × n) = q · dL
    let mut dq = vec![0.0f32; c * n];
    gemm(c, n, n, k.data(), (n as isize, 1), &dl, (1, n as isize), 0.0, &mut dq);
    let mut dk = vec![0.0f32; c * n];
    gemm(c, n, n, q.data(), (n as isize, 1), &dl, (n as isize, 1), 0.0, &mut dk);
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(v.shape().to_vec(), dv)?,
    ))
}

impl Tape {
    pub fn attend(&self, q: &Var, k: &Var, v: &Var, scale: f32) -> Result<Var> {
        let out = attend(q.value(), k.value(), v.value(), scale)?;
        let (qv, kv, vv) = (q.arc(), k.arc(), v.arc());
        Ok(self.record(out, &[q, k, v], move |g| {
            let (dq, dk, dv) = attend_backward(&qv, &kv, &vv, scale, g)?;
            Ok(vec![Some(dq), Some(dk), Some(dv)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{directional_check, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_law() {
        assert!((attention_scale(81, 512) - 4.0 / 512f64.sqrt()).abs() < 1e-12);
        assert_eq!(attention_scale(3, 64), 1.0 / 8.0);
        for m in 0..12u32 {
            assert_eq!(attention_scale(3usize.pow(m), 100), m as f64 / 10.0);
        }
        let s = attention_scale(24, 64);
        assert!((s - 24f64.ln() / 3f64.ln() / 8.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_tensor(&[4, 2, 3], 1.0, &mut rng);
        let k = Tensor::full(&[4, 2, 3], 0.5);
        let v = random_tensor(&[3, 2, 3], 1.0, &mut rng);
        let out = attend(&q, &k, &v, 0.7).unwrap();
        for c in 0..3 {
            let mean = v.plane(c).iter().sum::<f32>() / 6.0;
            for &o in out.plane(c) {
                assert!((o - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            random_tensor(&[3, 2, 3], 1.0, &mut rng),
            random_tensor(&[3, 2, 3], 1.0, &mut rng),
            random_tensor(&[2, 2, 3], 1.0, &mut rng),
        ];
        let err = directional_check(&inputs, |t, v| t.attend(&v[0], &v[1], &v[2], 0.8).unwrap(), 2e-3, 3);
        assert!(err < 1e-3, "rel err {err}");
    }
}
