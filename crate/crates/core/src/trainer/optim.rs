use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: beta1(), beta2: beta2(), eps: eps(), weight_decay: 0.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Element> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        AdamW {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// Applies one update from explicit gradients (`None` = zero gradient).
    pub fn step_with(&mut self, params: &[Tensor<T>], grads: &[Option<Vec<T>>], lr: f64) -> Result<StepOutcome> {
        if grads.len() != params.len() {
            return Err(shape_err!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        self.apply(params, lr, |i, f| f(grads[i].as_deref()))
    }

    /// Uses the gradients accumulated on `params`.
    pub fn step(&mut self, params: &[Tensor<T>], lr: f64) -> Result<StepOutcome> {
        self.apply(params, lr, |i, f| params[i].with_grad(f))
    }

    fn apply<G>(&mut self, params: &[Tensor<T>], lr: f64, grad: G) -> Result<StepOutcome>
    where
        G: Fn(usize, &mut dyn FnMut(Option<&[T]>)),
    {
        if params.len() != self.m.len() {
            return Err(shape_err!("optimizer tracks {} tensors, given {}", self.m.len(), params.len()));
        }
        let mut finite = true;
        for (i, p) in params.iter().enumerate() {
            let mut size_ok = p.numel() == self.m[i].len();
            grad(i, &mut |g| {
                if let Some(g) = g {
                    size_ok &= g.len() == p.numel();
                    finite &= g.iter().all(|v| v.is_finite());
                }
            });
            if !size_ok {
                return Err(shape_err!("parameter {i} does not match optimizer state"));
            }
        }
        if !finite {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let t = T::from_f64;
        let decay = t(1.0 - lr * c.weight_decay);
        let (b1, b2, eps) = (t(c.beta1), t(c.beta2), t(c.eps));
        let (one_b1, one_b2) = (t(1.0 - c.beta1), t(1.0 - c.beta2));
        let step_size = t(lr / bc1);
        let inv_sqrt_bc2 = t(1.0 / bc2.sqrt());
        for (i, p) in params.iter().enumerate() {
            let mut data = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            grad(i, &mut |g| {
                let zeros;
                let g = match g {
                    Some(g) => g,
                    None => {
                        zeros = vec![T::zero(); data.len()];
                        &zeros[..]
                    }
                };
                for (((p, &g), m), v) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let denom = v.sqrt() * inv_sqrt_bc2 + eps;
                    *p = *p * decay - step_size * *m / denom;
                }
            });
        }
        Ok(StepOutcome::Applied)
    }
}
