use serde::{Deserialize, Serialize};

use super::{Bindings, ParamStore, Real, Result, Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn zeros_like(params: &[&Tensor<T>]) -> Result<Self> {
        let m = params
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            v: m.clone(),
            m,
            t: 0,
        })
    }
}

/// Decoupled weight-decay Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: AdamWState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Result<Self> {
        let params: Vec<_> = store.ids().map(|id| store.get(id)).collect();
        Ok(Self {
            config,
            state: AdamWState::zeros_like(&params)?,
        })
    }

    /// Applies one update to every non-frozen parameter, reading gradients
    /// from `tape`. Parameters off the loss path see a zero gradient.
    pub fn step_store(&mut self, store: &mut ParamStore<T>, tape: &Tape<T>, vars: &Bindings) -> Result<()> {
        if self.state.m.len() != store.len() {
            return Err(TensorError::Invalid(format!(
                "optimizer tracks {} tensors, store has {}",
                self.state.m.len(),
                store.len()
            )));
        }
        self.state.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let grad = tape.grad_or_zeros(vars[id]);
            let i = id.index();
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            update(&self.config, self.state.t, store.get_mut(id), &grad, m, v)?;
        }
        Ok(())
    }

    /// One update over explicit parameter/gradient lists.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(TensorError::Invalid(format!(
                "adamw: {} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                self.state.m.len()
            )));
        }
        self.state.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            update(&self.config, self.state.t, p, g, m, v)?;
        }
        Ok(())
    }
}

fn update<T: Real>(
    cfg: &AdamWConfig,
    t: u64,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
) -> Result<()> {
    for other in [grad.shape(), m.shape(), v.shape()] {
        if other != param.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                lhs: param.shape().to_vec(),
                rhs: other.to_vec(),
            });
        }
    }
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
    let (lr, eps, wd) = (f(cfg.lr), f(cfg.eps), f(cfg.weight_decay));
    let bc1 = f(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = f(1.0 - cfg.beta2.powi(t as i32));
    let g = grad.data();
    let (md, vd) = (m.data_mut(), v.data_mut());
    for (j, p) in param.data_mut().iter_mut().enumerate() {
        md[j] = b1 * md[j] + (T::one() - b1) * g[j];
        vd[j] = b2 * vd[j] + (T::one() - b2) * g[j] * g[j];
        let mhat = md[j] / bc1;
        let vhat = vd[j] / bc2;
        *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
    }
    param.ensure_finite("adamw")
}
