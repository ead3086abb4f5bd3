use rand::Rng;

use super::{join, BlockSpec, Linear, Module};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// `down(silu(gate·x) ⊙ up·x)`, bias-free.
#[derive(Debug, Clone)]
pub struct SwiGlu<T: Element> {
    pub gate: Linear<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T: Element> SwiGlu<T> {
    pub fn new<R: Rng + ?Sized>(spec: &BlockSpec, rng: &mut R) -> Self {
        let (d, h) = (spec.model_dim, spec.mlp_hidden_dim);
        SwiGlu {
            gate: Linear::new(d, h, false, rng),
            up: Linear::new(d, h, false, rng),
            down: Linear::new(h, d, false, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.gate.forward(x)?.silu();
        let u = self.up.forward(x)?;
        self.down.forward(&g.mul(&u)?)
    }
}

impl<T: Element> Module<T> for SwiGlu<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.gate.collect_params(&join(prefix, "gate"), out);
        self.up.collect_params(&join(prefix, "up"), out);
        self.down.collect_params(&join(prefix, "down"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gate_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = SwiGlu::<f64>::new(&BlockSpec::new(8, 2, 12), &mut rng);
        mlp.gate = Linear::zeros(8, 12, false);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        assert!(mlp.forward(&x).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, h) = (4, 6);
        let mlp = SwiGlu::<f64>::new(&BlockSpec::new(d, 1, h), &mut rng);
        let x = Tensor::randn(&[2, d], 1.0, &mut rng);
        let y = mlp.forward(&x).unwrap().to_vec();
        let (xv, wg, wu, wd) = (x.to_vec(), mlp.gate.weight.to_vec(), mlp.up.weight.to_vec(), mlp.down.weight.to_vec());
        for t in 0..2 {
            let mut hidden = vec![0.0; h];
            for (j, hj) in hidden.iter_mut().enumerate() {
                let mut g = 0.0;
                let mut u = 0.0;
                for i in 0..d {
                    g += xv[t * d + i] * wg[i * h + j];
                    u += xv[t * d + i] * wu[i * h + j];
                }
                *hj = g / (1.0 + (-g).exp()) * u;
            }
            for o in 0..d {
                let expected: f64 = (0..h).map(|j| hidden[j] * wd[j * d + o]).sum();
                assert!((y[t * d + o] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = SwiGlu::<f64>::new(&BlockSpec::new(4, 1, 5), &mut rng);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let params = vec![mlp.gate.weight.clone(), mlp.up.weight.clone(), mlp.down.weight.clone()];
        let report = check_gradients(&params, 1e-5, || mlp.forward(&x).unwrap().mul(&w).unwrap().sum_all());
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
