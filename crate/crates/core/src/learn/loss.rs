//! Mixture-of-Laplace likelihood and the weighted sequence loss.

use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::{BidirFlow, FlowVars};
use crate::tensors::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    /// Number of supervised flow frames per sample.
    pub frames: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 0.85, frames: 2 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Param(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.frames == 0 {
            return Err(Error::Param("frames must be positive".into()));
        }
        Ok(())
    }

    /// `γ^{N−k}` for `k = 0..=N`.
    pub fn weights(&self, n: usize) -> Vec<f64> {
        (0..=n).map(|k| self.gamma.powi((n - k) as i32)).collect()
    }
}

/// Log-densities of the two mixture components at distance `|Δ|`.
#[inline]
fn components<T: Float>(delta: T, alpha: T, beta: T) -> (T, T, T) {
    let half = T::from(0.5).unwrap();
    let d = delta.abs();
    let a1 = (alpha * half).ln() - d;
    let a2 = ((T::one() - alpha) * half).ln() - beta - d * (-beta).exp();
    let m = a1.max(a2);
    let lse = m + ((a1 - m).exp() + (a2 - m).exp()).ln();
    (a1, a2, lse)
}

/// Negative log-likelihood of `mu_gt` under the mixture centred at `mu`:
/// a unit Laplace with weight `alpha` and one of scale `e^beta` with weight `1 − alpha`.
pub fn mix_laplace<T: Float>(mu_gt: T, alpha: T, beta: T, mu: T) -> T {
    let (_, _, lse) = components(mu_gt - mu, alpha, beta);
    -lse
}

/// `(value, ∂/∂mu, ∂/∂alpha, ∂/∂beta)` of [`mix_laplace`].
pub fn mix_laplace_grad<T: Float>(mu_gt: T, alpha: T, beta: T, mu: T) -> (T, T, T, T) {
    let delta = mu_gt - mu;
    let (a1, a2, lse) = components(delta, alpha, beta);
    let (w1, w2) = ((a1 - lse).exp(), (a2 - lse).exp());
    let d = delta.abs();
    let eb = (-beta).exp();
    let sign = if delta > T::zero() {
        T::one()
    } else if delta < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    let d_mu = -sign * (w1 + w2 * eb);
    // w1/alpha and w2/(1−alpha) without dividing by a vanishing weight
    let ln_half = T::from(0.5).unwrap().ln();
    let r1 = (ln_half - d - lse).exp();
    let r2 = (ln_half - beta - d * eb - lse).exp();
    let d_alpha = r2 - r1;
    let d_beta = w2 * (T::one() - d * eb);
    (-lse, d_mu, d_alpha, d_beta)
}

fn check_frame(flow: &Tensor, alpha: &Tensor, beta: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = flow.dims3()?;
    if c != 2 || gt.shape() != flow.shape() {
        return Err(shape_err!("flow {:?} and ground truth {:?} must both be 2×H×W", flow.shape(), gt.shape()));
    }
    for p in [alpha, beta] {
        if p.shape() != [1, h, w] {
            return Err(shape_err!("mixture map {:?} does not match flow {}x{}", p.shape(), h, w));
        }
    }
    Ok((h, w))
}

/// Mean of [`mix_laplace`] over both coordinates of every pixel (`1/(2HW)`).
pub fn mol_frame_loss(flow: &Tensor, alpha: &Tensor, beta: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = check_frame(flow, alpha, beta, gt)?;
    let n = h * w;
    if n == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0f64;
    for c in 0..2 {
        for i in 0..n {
            let (a, b) = (alpha.data()[i] as f64, beta.data()[i] as f64);
            acc += mix_laplace(gt.data()[c * n + i] as f64, a, b, flow.data()[c * n + i] as f64);
        }
    }
    Ok(acc / (2 * n) as f64)
}

/// Gradients of [`mol_frame_loss`] with respect to flow, alpha and beta.
fn mol_frame_backward(flow: &Tensor, alpha: &Tensor, beta: &Tensor, gt: &Tensor, scale: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w) = check_frame(flow, alpha, beta, gt)?;
    let n = h * w;
    let s = scale / (2 * n.max(1)) as f64;
    let mut df = vec![0.0f32; 2 * n];
    let mut da = vec![0.0f64; n];
    let mut db = vec![0.0f64; n];
    for c in 0..2 {
        for i in 0..n {
            let (a, b) = (alpha.data()[i] as f64, beta.data()[i] as f64);
            let (_, gm, ga, gb) = mix_laplace_grad(gt.data()[c * n + i] as f64, a, b, flow.data()[c * n + i] as f64);
            df[c * n + i] = (s * gm) as f32;
            da[i] += s * ga;
            db[i] += s * gb;
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    Ok((
        Tensor::new(vec![2, h, w], df)?,
        Tensor::new(vec![1, h, w], to32(da))?,
        Tensor::new(vec![1, h, w], to32(db))?,
    ))
}

impl Tape {
    /// Differentiable [`mol_frame_loss`]; `gt` is a constant.
    pub fn mol_loss(&self, flow: &Var, alpha: &Var, beta: &Var, gt: &Tensor) -> Result<Var> {
        let v = mol_frame_loss(flow.value(), alpha.value(), beta.value(), gt)?;
        let (fv, av, bv, gt) = (flow.arc(), alpha.arc(), beta.arc(), gt.clone());
        Ok(self.record(Tensor::scalar(v as f32), &[flow, alpha, beta], move |g| {
            let (df, da, db) = mol_frame_backward(&fv, &av, &bv, &gt, g.item() as f64)?;
            Ok(vec![Some(df), Some(da), Some(db)])
        }))
    }

    /// Sequence loss over per-iteration predictions against `(gt_prev, gt_next)`.
    pub fn sequence_loss(&self, preds: &[FlowVars], gt: (&Tensor, &Tensor), cfg: &LossConfig) -> Result<Var> {
        cfg.validate()?;
        if preds.is_empty() {
            return Err(Error::Param("sequence loss needs at least one prediction".into()));
        }
        let weights = cfg.weights(preds.len() - 1);
        let mut total: Option<Var> = None;
        for (p, &wk) in preds.iter().zip(&weights) {
            for (i, g) in [gt.0, gt.1].into_iter().enumerate() {
                let f = self.slice(&p.flow, 2 * i, 2 * i + 2)?;
                let l = self.scale(&self.mol_loss(&f, &p.alpha, &p.beta, g)?, (wk / cfg.frames as f64) as f32);
                total = Some(match total {
                    None => l,
                    Some(t) => self.add(&t, &l)?,
                });
            }
        }
        Ok(total.expect("non-empty"))
    }
}

/// `(1/T) Σ_t Σ_k γ^{N−k} ℓ[k][t]` for per-iteration, per-frame losses.
pub fn sequence_loss(losses: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if losses.is_empty() {
        return Err(Error::Param("sequence loss needs at least one prediction".into()));
    }
    let weights = cfg.weights(losses.len() - 1);
    let mut total = 0.0;
    for (row, w) in losses.iter().zip(weights) {
        if row.len() != cfg.frames {
            return Err(Error::Length(format!("expected {} frame losses, got {}", cfg.frames, row.len())));
        }
        total += w * row.iter().sum::<f64>();
    }
    Ok(total / cfg.frames as f64)
}

/// [`sequence_loss`] of bidirectional predictions against `(gt_prev, gt_next)`.
pub fn sequence_loss_flows(preds: &[BidirFlow], gt: (&Tensor, &Tensor), cfg: &LossConfig) -> Result<f64> {
    let losses = preds
        .iter()
        .map(|p| {
            Ok(vec![
                mol_frame_loss(&p.f_prev, &p.mol_alpha, &p.mol_beta, gt.0)?,
                mol_frame_loss(&p.f_next, &p.mol_alpha, &p.mol_beta, gt.1)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    sequence_loss(&losses, cfg)
}
