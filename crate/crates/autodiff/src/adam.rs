use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2.5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-5 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err("adam_step", format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - T::lit(cfg.beta1.powi(t));
    let bc2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for i in 0..params.len() {
        let (p, g) = (&params[i], &grads[i]);
        if p.shape() != g.shape() {
            return shape_err("adam_step", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()));
        }
        let n = p.len();
        let (mut pd, mut md, mut vd) = (p.to_vec(), state.m[i].to_vec(), state.v[i].to_vec());
        for j in 0..n {
            let gj = g.data()[j];
            md[j] = b1 * md[j] + (T::one() - b1) * gj;
            vd[j] = b2 * vd[j] + (T::one() - b2) * gj * gj;
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            pd[j] = pd[j] - lr * mhat / (vhat.sqrt() + eps);
        }
        let shape = p.shape().to_vec();
        params[i] = Tensor::new(shape.clone(), pd)?;
        state.m[i] = Tensor::new(shape.clone(), md)?;
        state.v[i] = Tensor::new(shape, vd)?;
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.data() {
            sq += x.as_f64() * x.as_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.map(|x| x * f);
        }
    }
    norm
}
