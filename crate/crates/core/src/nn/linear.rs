use rand::Rng;

use super::{join, Module};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// `y = x·W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Linear {
            weight: Tensor::randn(&[input, output], std, rng).param(),
            bias: bias.then(|| Tensor::zeros(&[output]).param()),
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]).param(),
            bias: bias.then(|| Tensor::zeros(&[output]).param()),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}
