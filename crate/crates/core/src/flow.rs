//! Conditional flow matching: the training interpolant, the regression
//! loss and a guided Euler sampler.
//!
//! Time runs from `t = 0` (pure noise) to `t = 1` (data).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{TextEmbedding, VelocityModel};
use crate::tensor::{no_grad, Element, Tensor};

/// One training minibatch on the interpolation path.
#[derive(Debug, Clone)]
pub struct FlowBatch<T: Element> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: Vec<f64>,
    pub sigma: f64,
    /// Standard-normal perturbation; `None` when `sigma == 0`.
    pub eps: Option<Tensor<T>>,
    pub xt: Tensor<T>,
    pub target_u: Tensor<T>,
}

impl<T: Element> FlowBatch<T> {
    /// Builds the batch from explicit draws:
    /// `xt = t·x1 + (1−t)·x0 + σ·ε`, `target_u = x1 − x0`.
    pub fn from_parts(
        x1: &Tensor<T>,
        x0: &Tensor<T>,
        t: &[f64],
        sigma: f64,
        eps: Option<&Tensor<T>>,
    ) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return Err(shape_err!("x0 {:?} vs x1 {:?}", x0.shape(), x1.shape()));
        }
        let b = *x1.shape().first().ok_or_else(|| shape_err!("flow batch needs a batch axis"))?;
        if t.len() != b {
            return Err(shape_err!("{} timesteps for a batch of {b}", t.len()));
        }
        if let Some(&bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("timestep {bad} outside [0, 1]")));
        }
        if !(sigma >= 0.0) {
            return Err(Error::Domain(format!("sigma must be >= 0, got {sigma}")));
        }
        let per = x1.numel() / b.max(1);
        let (a0, a1) = (x0.data(), x1.data());
        let mut xt = Vec::with_capacity(a1.len());
        for (i, (&v0, &v1)) in a0.iter().zip(a1.iter()).enumerate() {
            let ti = T::from_f64(t[i / per]);
            xt.push(ti * v1 + (T::one() - ti) * v0);
        }
        let eps = match eps {
            Some(e) if sigma > 0.0 => {
                if e.shape() != x1.shape() {
                    return Err(shape_err!("eps {:?} vs x1 {:?}", e.shape(), x1.shape()));
                }
                let s = T::from_f64(sigma);
                for (v, &n) in xt.iter_mut().zip(e.data().iter()) {
                    *v = *v + s * n;
                }
                Some(e.clone())
            }
            _ => None,
        };
        let target_u: Vec<T> = a1.iter().zip(a0.iter()).map(|(&v1, &v0)| v1 - v0).collect();
        Ok(FlowBatch {
            x0: x0.detach(),
            x1: x1.detach(),
            t: t.to_vec(),
            sigma,
            eps,
            xt: Tensor::from_vec(x1.shape(), xt)?,
            target_u: Tensor::from_vec(x1.shape(), target_u)?,
        })
    }
}

/// Draws `t ~ U[0,1]` per sample, `x0 ~ N(0, I)` and, for `sigma > 0`, `ε ~ N(0, I)`.
pub fn make_flow_batch<T: Element, R: Rng + ?Sized>(
    x1: &Tensor<T>,
    rng: &mut R,
    sigma: f64,
) -> Result<FlowBatch<T>> {
    let b = *x1.shape().first().ok_or_else(|| shape_err!("flow batch needs a batch axis"))?;
    let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let x0 = Tensor::randn(x1.shape(), 1.0, rng);
    let eps = (sigma > 0.0).then(|| Tensor::randn(x1.shape(), 1.0, rng));
    FlowBatch::from_parts(x1, &x0, &t, sigma, eps.as_ref())
}

/// Mean squared error between the predicted velocity at `xt` and `target_u`.
pub fn icfm_loss<T: Element, M: VelocityModel<T> + ?Sized>(
    model: &M,
    batch: &FlowBatch<T>,
    texts: &[&TextEmbedding<T>],
) -> Result<Tensor<T>> {
    let v = model.velocity(&batch.xt, &batch.t, texts)?;
    if v.shape() != batch.target_u.shape() {
        return Err(Error::Contract(format!(
            "model returned {:?} for a target of {:?}",
            v.shape(),
            batch.target_u.shape()
        )));
    }
    Ok(v.sub(&batch.target_u)?.square().mean_all())
}

/// `v_uncond + s·(v_cond − v_uncond)`.
pub fn cfg_velocity<T: Element>(v_uncond: &Tensor<T>, v_cond: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    if v_uncond.shape() != v_cond.shape() {
        return Err(shape_err!(
            "guidance branches differ: {:?} vs {:?}",
            v_uncond.shape(),
            v_cond.shape()
        ));
    }
    let s = T::from_f64(s);
    let out = v_uncond
        .data()
        .iter()
        .zip(v_cond.data().iter())
        .map(|(&u, &c)| u + s * (c - u))
        .collect();
    Tensor::from_vec(v_cond.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!(
                "cfg_scale must be a finite value >= 0, got {}",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

/// Seeded standard-normal starting point.
pub fn initial_noise<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Guided velocity for a batch. Both branches share one model call unless
/// `s` makes one of them irrelevant.
pub fn guided_velocity<T: Element, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    t: f64,
    conds: &[&TextEmbedding<T>],
    unconds: &[&TextEmbedding<T>],
    s: f64,
) -> Result<Tensor<T>> {
    let b = conds.len();
    let ts = vec![t; b];
    if s == 1.0 {
        return model.velocity(x, &ts, conds);
    }
    if s == 0.0 {
        return model.velocity(x, &ts, unconds);
    }
    let xx = Tensor::concat(&[x.clone(), x.clone()], 0)?;
    let texts: Vec<&TextEmbedding<T>> = conds.iter().chain(unconds).copied().collect();
    let v = model.velocity(&xx, &vec![t; 2 * b], &texts)?;
    cfg_velocity(&v.narrow(0, b, b)?, &v.narrow(0, 0, b)?, s)
}

/// Euler integration of the guided field from `x0` at `t = 0` to `t = 1`.
///
/// `x0: [B, C, H, W]`; `unconds[i]` is the empty prompt or a negative
/// prompt for sample `i`.
pub fn integrate<T: Element, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x0: &Tensor<T>,
    conds: &[&TextEmbedding<T>],
    unconds: &[&TextEmbedding<T>],
    steps: usize,
    cfg_scale: f64,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::Config("sampler steps must be >= 1".into()));
    }
    let b = x0.shape().first().copied().unwrap_or(0);
    if conds.len() != b || unconds.len() != b {
        return Err(Error::Contract(format!(
            "{b} latents with {} prompts and {} unconditional prompts",
            conds.len(),
            unconds.len()
        )));
    }
    let _guard = no_grad();
    let dt = 1.0 / steps as f64;
    let mut x = x0.detach();
    for i in 0..steps {
        let t = i as f64 * dt;
        let v = guided_velocity(model, &x, t, conds, unconds, cfg_scale)?;
        let step = T::from_f64(dt);
        let next: Vec<T> = x
            .data()
            .iter()
            .zip(v.data().iter())
            .map(|(&xi, &vi)| xi + step * vi)
            .collect();
        x = Tensor::from_vec(x.shape(), next)?;
    }
    Ok(x)
}

/// One guided sample of `shape = [C, H, W]` from seeded noise.
pub fn sample<T: Element, M: VelocityModel<T> + ?Sized>(
    model: &M,
    text: &TextEmbedding<T>,
    uncond: &TextEmbedding<T>,
    shape: &[usize],
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut full = vec![1];
    full.extend_from_slice(shape);
    let x0 = initial_noise::<T>(&full, cfg.seed);
    integrate(model, &x0, &[text], &[uncond], cfg.steps, cfg.cfg_scale)?.reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dit, ModelConfig};
    use crate::tensor::gradcheck::check_gradients;

    fn scalar_batch(x0: f64, x1: f64, t: f64) -> FlowBatch<f64> {
        let a = Tensor::from_vec(&[1, 1], vec![x1]).unwrap();
        let b = Tensor::from_vec(&[1, 1], vec![x0]).unwrap();
        FlowBatch::from_parts(&a, &b, &[t], 0.0, None).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let fb = scalar_batch(0.0, 2.0, 0.25);
        assert_eq!(fb.xt.to_vec(), vec![0.5]);
        assert_eq!(fb.target_u.to_vec(), vec![2.0]);
    }

    #[test]
    fn endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x1 = Tensor::<f32>::randn(&[2, 4, 3, 3], 1.0, &mut rng);
        let x0 = Tensor::<f32>::randn(&[2, 4, 3, 3], 1.0, &mut rng);
        let at0 = FlowBatch::from_parts(&x1, &x0, &[0.0, 0.0], 0.0, None).unwrap();
        assert_eq!(at0.xt.to_vec(), x0.to_vec());
        let at1 = FlowBatch::from_parts(&x1, &x0, &[1.0, 1.0], 0.0, None).unwrap();
        assert_eq!(at1.xt.to_vec(), x1.to_vec());
    }

    #[test]
    fn noise_term_is_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = Tensor::<f64>::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let fb = make_flow_batch(&x1, &mut rng, 0.05).unwrap();
        let eps = fb.eps.as_ref().unwrap().to_vec();
        let (v0, v1, vt) = (fb.x0.to_vec(), fb.x1.to_vec(), fb.xt.to_vec());
        for i in 0..vt.len() {
            let t = fb.t[i / 8];
            assert!((vt[i] - (t * v1[i] + (1.0 - t) * v0[i] + 0.05 * eps[i])).abs() < 1e-15);
        }
        assert!(fb.t.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(make_flow_batch(&x1, &mut rng, 0.0).unwrap().eps.is_none());
    }

    #[test]
    fn cfg_examples() {
        let u = Tensor::<f64>::from_vec(&[2], vec![0.0, 0.3]).unwrap();
        let c = Tensor::<f64>::from_vec(&[2], vec![1.0, -0.7]).unwrap();
        assert_eq!(cfg_velocity(&u, &c, 1.0).unwrap().to_vec(), c.to_vec());
        assert_eq!(cfg_velocity(&u, &c, 0.0).unwrap().to_vec(), u.to_vec());
        assert_eq!(cfg_velocity(&u, &c, 5.0).unwrap().to_vec()[0], 5.0);
    }

    struct Constant(Tensor<f64>);

    impl VelocityModel<f64> for Constant {
        fn velocity(&self, x: &Tensor<f64>, _: &[f64], _: &[&TextEmbedding<f64>]) -> Result<Tensor<f64>> {
            let b = x.shape()[0];
            Tensor::concat(&vec![self.0.clone(); b], 0)
        }
    }

    fn dummy_text() -> TextEmbedding<f64> {
        TextEmbedding { tokens: Tensor::zeros(&[1, 2]), token_ids: vec![None] }
    }

    #[test]
    fn euler_is_exact_on_constant_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let x1 = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let u = x1.sub(&x0).unwrap();
        let model = Constant(u.clone());
        let text = dummy_text();
        for steps in [1, 2, 7, 50] {
            for s in [0.0, 1.0, 2.5] {
                let out = integrate(&model, &x0, &[&text], &[&text], steps, s).unwrap().to_vec();
                for (o, e) in out.iter().zip(x1.to_vec()) {
                    assert!((o - e).abs() < 1e-12, "steps {steps}: {o} vs {e}");
                }
            }
        }
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let model = Dit::<f64>::new(&ModelConfig::tiny(), 0).unwrap();
        model.randomize(1, 0.3);
        let cond = model.encode_prompt("red").unwrap();
        let empty = model.encode_prompt("").unwrap();
        let cfg = SamplerConfig { steps: 1, cfg_scale: 3.0, seed: 9 };
        let out = sample(&model, &cond, &empty, &[4, 4, 4], &cfg).unwrap();
        let x0 = initial_noise::<f64>(&[1, 4, 4, 4], 9);
        let vc = model.forward(&x0, &[0.0], &[&cond]).unwrap().to_vec();
        let vu = model.forward(&x0, &[0.0], &[&empty]).unwrap().to_vec();
        for (i, (o, x)) in out.to_vec().iter().zip(x0.to_vec()).enumerate() {
            let hand = x + (vu[i] + 3.0 * (vc[i] - vu[i]));
            assert!((o - hand).abs() < 1e-12);
        }
        let again = sample(&model, &cond, &empty, &[4, 4, 4], &cfg).unwrap();
        assert_eq!(out.to_vec(), again.to_vec());
    }

    #[test]
    fn zero_model_loss_is_mean_square_target() {
        let model = Dit::<f64>::new(&ModelConfig::tiny(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let fb = make_flow_batch(&x1, &mut rng, 0.0).unwrap();
        let t = model.encode_prompt("a").unwrap();
        let loss = icfm_loss(&model, &fb, &[&t, &t]).unwrap().item().unwrap();
        let u = fb.target_u.to_vec();
        let direct = u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64;
        assert!((loss - direct).abs() < 1e-14);
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let fb = make_flow_batch(&x1, &mut rng, 0.0).unwrap();
        let text = dummy_text();
        let loss = icfm_loss(&Constant(fb.target_u.clone()), &fb, &[&text]).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let model = Dit::<f64>::new(&ModelConfig::tiny(), 5).unwrap();
        model.randomize(6, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x1 = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let fb = make_flow_batch(&x1, &mut rng, 0.05).unwrap();
        let (a, b) = (model.encode_prompt("p").unwrap(), model.encode_prompt("q r").unwrap());
        let params: Vec<_> = model
            .trainable_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("blocks.1") || n.starts_with("final"))
            .map(|(_, t)| t)
            .collect();
        let report = check_gradients(&params, 1e-5, || icfm_loss(&model, &fb, &[&a, &b]).unwrap());
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn sampler_config_validation() {
        assert!(SamplerConfig { steps: 0, cfg_scale: 1.0, seed: 0 }.validate().is_err());
        assert!(SamplerConfig { steps: 1, cfg_scale: -0.5, seed: 0 }.validate().is_err());
        assert!(SamplerConfig { steps: 1, cfg_scale: 5.0, seed: 0 }.validate().is_ok());
    }
}
