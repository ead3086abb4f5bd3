use super::kernels::{self, gemm, permute_copy, sigmoid, Indexer};
use super::{broadcast_shapes, Element, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, Binary::Mul)
    }

    fn binary(&self, rhs: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes(self.shape(), rhs.shape())?;
        let n: usize = out_shape.iter().product();
        let ia = Indexer::new(&out_shape, self.shape());
        let ib = Indexer::new(&out_shape, rhs.shape());
        let out = {
            let a = self.data();
            let b = rhs.data();
            let f = |x: T, y: T| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            match (&ia, &ib) {
                (Indexer::Same, Indexer::Same) => {
                    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
                }
                (Indexer::Same, Indexer::Tile(p)) => a
                    .chunks(*p)
                    .flat_map(|row| row.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)))
                    .collect(),
                _ => (0..n).map(|i| f(a[ia.at(i)], b[ib.at(i)])).collect(),
            }
        };
        let (lhs, rhs_t) = (self.clone(), rhs.clone());
        let (na, nb) = (self.numel(), rhs.numel());
        Ok(Tensor::from_op(
            out_shape,
            out,
            match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            },
            vec![self.clone(), rhs.clone()],
            Box::new(move |_, g, needs| {
                let mut ga = needs[0].then(|| vec![T::zero(); na]);
                let mut gb = needs[1].then(|| vec![T::zero(); nb]);
                match kind {
                    Binary::Add | Binary::Sub => {
                        let sign = if kind == Binary::Sub { -T::one() } else { T::one() };
                        for (i, &gi) in g.iter().enumerate() {
                            if let Some(ga) = ga.as_mut() {
                                let j = ia.at(i);
                                ga[j] = ga[j] + gi;
                            }
                            if let Some(gb) = gb.as_mut() {
                                let j = ib.at(i);
                                gb[j] = gb[j] + sign * gi;
                            }
                        }
                    }
                    Binary::Mul => {
                        let a = lhs.data();
                        let b = rhs_t.data();
                        for (i, &gi) in g.iter().enumerate() {
                            let (ja, jb) = (ia.at(i), ib.at(i));
                            if let Some(ga) = ga.as_mut() {
                                ga[ja] = ga[ja] + gi * b[jb];
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[jb] = gb[jb] + gi * a[ja];
                            }
                        }
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    fn unary(
        &self,
        kind: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            kind,
            vec![self.clone()],
            Box::new(move |y, g, _| {
                let x = input.data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                        .collect(),
                )]
            }),
        )
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum::<T>();
        let n = self.numel();
        Tensor::from_op(
            vec![],
            vec![s],
            "sum",
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::one() / T::from_f64(n as f64);
        let s = self.data().iter().copied().sum::<T>() * inv;
        Tensor::from_op(
            vec![],
            vec![s],
            "mean",
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]` with
    /// broadcasting over the leading dimensions.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!(
                "matmul needs rank >= 2 operands, got {:?} and {:?}",
                sa,
                sb
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err!(
                "matmul inner extents differ: {:?} · {:?}",
                sa,
                sb
            ));
        }
        let a_batch = &sa[..sa.len() - 2];
        let b_batch = &sb[..sb.len() - 2];

        // Shared right operand: fold the batch into rows, one product.
        if b_batch.is_empty() {
            let rows = a_batch.iter().product::<usize>() * m;
            let mut out = vec![T::zero(); rows * n];
            gemm(rows, k, n, &self.data(), false, &rhs.data(), false, &mut out, false);
            let mut shape = a_batch.to_vec();
            shape.extend([m, n]);
            let (a, b) = (self.clone(), rhs.clone());
            return Ok(Tensor::from_op(
                shape,
                out,
                "matmul",
                vec![self.clone(), rhs.clone()],
                Box::new(move |_, g, needs| {
                    let ga = needs[0].then(|| {
                        let mut ga = vec![T::zero(); rows * k];
                        gemm(rows, n, k, g, false, &b.data(), true, &mut ga, false);
                        ga
                    });
                    let gb = needs[1].then(|| {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(k, rows, n, &a.data(), true, g, false, &mut gb, false);
                        gb
                    });
                    vec![ga, gb]
                }),
            ));
        }

        let batch = broadcast_shapes(a_batch, b_batch).map_err(|_| {
            shape_err!("matmul batch extents do not broadcast: {:?} · {:?}", sa, sb)
        })?;
        let nb: usize = batch.iter().product();
        let ia = Indexer::new(&batch, a_batch);
        let ib = Indexer::new(&batch, b_batch);
        let mut out = vec![T::zero(); nb * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..nb {
                let (oa, ob) = (ia.at(bi) * m * k, ib.at(bi) * k * n);
                gemm(
                    m,
                    k,
                    n,
                    &a[oa..oa + m * k],
                    false,
                    &b[ob..ob + k * n],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let (a, b) = (self.clone(), rhs.clone());
        let (na, nbl) = (self.numel(), rhs.numel());
        Ok(Tensor::from_op(
            shape,
            out,
            "matmul",
            vec![self.clone(), rhs.clone()],
            Box::new(move |_, g, needs| {
                let mut ga = needs[0].then(|| vec![T::zero(); na]);
                let mut gb = needs[1].then(|| vec![T::zero(); nbl]);
                let ad = a.data();
                let bd = b.data();
                for bi in 0..nb {
                    let (oa, ob) = (ia.at(bi) * m * k, ib.at(bi) * k * n);
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        gemm(m, n, k, gs, false, &bd[ob..ob + k * n], true, &mut ga[oa..oa + m * k], true);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm(k, m, n, &ad[oa..oa + m * k], true, gs, false, &mut gb[ob..ob + k * n], true);
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    fn last_dim(&self, op: &str) -> Result<usize> {
        match self.shape().last() {
            Some(&d) if d >= 1 => Ok(d),
            _ => Err(shape_err!("{op} needs a non-empty last dimension, got {:?}", self.shape())),
        }
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let d = self.last_dim("softmax")?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "softmax",
            vec![self.clone()],
            Box::new(move |y, g, _| {
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), xr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((x, &yi), &gi) in xr.iter_mut().zip(yr).zip(gr) {
                        *x = yi * (gi - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `x / sqrt(mean(x²) + eps)` over the last dimension, no learned gain.
    pub fn rms_normalize(&self, eps: f64) -> Result<Tensor<T>> {
        let d = self.last_dim("rms_normalize")?;
        let eps = T::from_f64(eps);
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut out = self.to_vec();
        let mut inv_rms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let r = (ms + eps).sqrt();
            let inv = if r > T::zero() { T::one() / r } else { T::zero() };
            inv_rms.push(inv);
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "rms_normalize",
            vec![self.clone()],
            Box::new(move |y, g, _| {
                let mut gx = vec![T::zero(); y.len()];
                for (((yr, gr), xr), &inv) in
                    y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).zip(&inv_rms)
                {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for ((x, &yi), &gi) in xr.iter_mut().zip(yr).zip(gr) {
                        *x = (gi - yi * dot) * inv;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|_, g, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn permute(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if dims.len() != nd || dims.iter().any(|&d| d >= nd || std::mem::replace(&mut seen[d], true)) {
            return Err(shape_err!(
                "invalid permutation {:?} for shape {:?}",
                dims,
                self.shape()
            ));
        }
        let shape: Vec<usize> = dims.iter().map(|&d| self.shape()[d]).collect();
        let out = permute_copy(&self.data(), self.shape(), dims);
        let mut inverse = vec![0; nd];
        for (i, &d) in dims.iter().enumerate() {
            inverse[d] = i;
        }
        let out_shape = shape.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            "permute",
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(permute_copy(g, &out_shape, &inverse))]),
        ))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", self.shape()));
        }
        let mut dims: Vec<usize> = (0..nd).collect();
        dims.swap(nd - 2, nd - 1);
        self.permute(&dims)
    }

    /// Softmax attention of `self` (queries) against `k`, `v`, all shaped
    /// `[len, heads, hd]`, returning `[len, heads·hd]`. Records no graph, so
    /// it refuses inputs that would need a gradient.
    pub fn attention_inference(&self, k: &Tensor<T>, v: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        let [len, heads, hd] = shape[..] else {
            return Err(shape_err!("attention expects [len, heads, hd], got {shape:?}"));
        };
        if k.shape() != shape || v.shape() != shape {
            return Err(shape_err!("q {shape:?}, k {:?}, v {:?}", k.shape(), v.shape()));
        }
        if super::grad_enabled() && [self, k, v].iter().any(|t| t.requires_grad()) {
            return Err(Error::Contract("attention_inference on tensors that require grad".into()));
        }
        let out = kernels::blocked_attention(&self.data(), &k.data(), &v.data(), len, heads, hd, T::from_f64(scale));
        Tensor::from_vec(&[len, heads * hd], out)
    }

    /// Contiguous slice `start..start+len` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(shape_err!(
                "narrow(dim={dim}, {start}..{}) out of range for {:?}",
                start + len,
                shape
            ));
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let full = shape[dim] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = o * full + start * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[dim] = len;
        let n_in = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            "narrow",
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); n_in];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenation along `dim`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], dim: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = first.shape();
        if dim >= base.len() {
            return Err(shape_err!("concat dim {dim} out of range for {:?}", base));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != dim && a != b)
            {
                return Err(shape_err!("cannot concat {:?} with {:?} along {dim}", base, s));
            }
        }
        let outer: usize = base[..dim].iter().product();
        let inner: usize = base[dim + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[dim] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        {
            let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (g, &w) in guards.iter().zip(&widths) {
                    out.extend_from_slice(&g[o * w..(o + 1) * w]);
                }
            }
        }
        let mut shape = base.to_vec();
        shape[dim] = total / inner.max(1);
        if inner == 0 {
            shape[dim] = parts.iter().map(|p| p.shape()[dim]).sum();
        }
        Ok(Tensor::from_op(
            shape,
            out,
            "concat",
            parts.to_vec(),
            Box::new(move |_, g, needs| {
                let mut grads: Vec<Option<Vec<T>>> = needs
                    .iter()
                    .zip(&widths)
                    .map(|(&n, &w)| n.then(|| Vec::with_capacity(outer * w)))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (gr, &w) in grads.iter_mut().zip(&widths) {
                        if let Some(gr) = gr.as_mut() {
                            gr.extend_from_slice(&g[off..off + w]);
                        }
                        off += w;
                    }
                }
                grads
            }),
        ))
    }

    /// Selects sub-tensors along dimension 0: `out[r] = self[indices[r]]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(shape_err!("gather_rows on a scalar"));
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("row index {bad} out of range for {:?}", shape));
        }
        let mut out = Vec::with_capacity(indices.len() * width);
        {
            let d = self.data();
            for &i in indices {
                out.extend_from_slice(&d[i * width..(i + 1) * width]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        let n_in = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            "gather_rows",
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); n_in];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g[r * width..(r + 1) * width];
                    for (d, &s) in gx[i * width..(i + 1) * width].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Element gather over the flattened buffer: `out[i] = self[indices[i]]`.
    pub fn gather_flat(&self, indices: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(shape_err!(
                "gather_flat: {} indices for output shape {:?}",
                indices.len(),
                shape
            ));
        }
        let n_in = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_in) {
            return Err(shape_err!("flat index {bad} out of range for {:?}", self.shape()));
        }
        let out = {
            let d = self.data();
            indices.iter().map(|&i| d[i]).collect()
        };
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            "gather_flat",
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); n_in];
                for (&i, &gi) in idx.iter().zip(g) {
                    gx[i] = gx[i] + gi;
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    fn rand64(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn matmul_identity() {
        let i = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_scalar_derivative() {
        let a = t64(&[1, 1], &[2.0]).param();
        let b = t64(&[1, 1], &[3.0]).param();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![6.0]);
        c.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 5]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a = rand64(&[4, 5], 1).param();
        let b = rand64(&[5, 3], 2).param();
        let w = rand64(&[4, 3], 3);
        let report = check_gradients(&[a.clone(), b.clone()], 1e-5, || {
            a.matmul(&b).unwrap().mul(&w).unwrap().sum_all()
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn batched_matmul_broadcast_gradients() {
        let a = rand64(&[2, 3, 4, 5], 4).param();
        let b = rand64(&[3, 5, 2], 5).param();
        let w = rand64(&[2, 3, 4, 2], 6);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4, 2]);
        let report = check_gradients(&[a.clone(), b.clone()], 1e-5, || {
            a.matmul(&b).unwrap().mul(&w).unwrap().sum_all()
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn elementwise_examples() {
        let z = t64(&[1], &[0.0]);
        assert_eq!(z.silu().to_vec(), vec![0.0]);
        let a = t64(&[2], &[2.0, 3.0]);
        let b = t64(&[2], &[4.0, 5.0]);
        assert_eq!(a.mul(&b).unwrap().to_vec(), vec![8.0, 15.0]);
        assert!(a.add(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn silu_gradient_at_one() {
        let x = t64(&[1], &[1.0]).param();
        x.silu().sum_all().backward().unwrap();
        let analytic = x.grad().unwrap()[0];
        let h = 1e-5;
        let f = |v: f64| v / (1.0 + (-v).exp());
        let numeric = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        assert!(rel_err(analytic, numeric) < 1e-6);
    }

    #[test]
    fn broadcast_binary_gradients() {
        let a = rand64(&[3, 4], 7).param();
        let bias = rand64(&[4], 8).param();
        let col = rand64(&[3, 1], 9).param();
        let w = rand64(&[3, 4], 10);
        let report = check_gradients(&[a.clone(), bias.clone(), col.clone()], 1e-5, || {
            a.add(&bias)
                .unwrap()
                .mul(&col)
                .unwrap()
                .sub(&bias)
                .unwrap()
                .silu()
                .mul(&w)
                .unwrap()
                .sum_all()
        });
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let s = t64(&[3], &[0.0, 0.0, 0.0]).softmax_lastdim().unwrap().to_vec();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t64(&[2], &[1000.0, 0.0]).softmax_lastdim().unwrap().to_vec();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_jvp_matches_finite_differences() {
        let x = rand64(&[3, 7], 11).param();
        let w = rand64(&[3, 7], 12);
        let report = check_gradients(std::slice::from_ref(&x), 1e-5, || {
            x.softmax_lastdim().unwrap().mul(&w).unwrap().sum_all()
        });
        assert!(report.max_rel_err < 1e-5, "{report:?}");
        let y = x.softmax_lastdim().unwrap().to_vec();
        for row in y.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_normalize_examples() {
        let y = t64(&[4], &[3.0; 4]).rms_normalize(0.0).unwrap().to_vec();
        assert_eq!(y, vec![1.0; 4]);
        let y = t64(&[4], &[0.0; 4]).rms_normalize(1e-6).unwrap().to_vec();
        assert_eq!(y, vec![0.0; 4]);
        let x = rand64(&[5, 16], 13);
        let y = x.rms_normalize(1e-8).unwrap().to_vec();
        for row in y.chunks(16) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn rms_normalize_gradient() {
        let x = rand64(&[2, 6], 14).param();
        let w = rand64(&[2, 6], 15);
        let report = check_gradients(std::slice::from_ref(&x), 1e-5, || {
            x.rms_normalize(1e-6).unwrap().mul(&w).unwrap().sum_all()
        });
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn shape_ops_gradients() {
        let x = rand64(&[2, 3, 4], 16).param();
        let w = rand64(&[3, 2, 2], 17);
        let report = check_gradients(std::slice::from_ref(&x), 1e-5, || {
            let p = x.permute(&[1, 2, 0]).unwrap(); // [3,4,2]
            let n = p.narrow(1, 1, 2).unwrap(); // [3,2,2]
            let c = Tensor::concat(&[n.clone(), n.scale(2.0)], 0).unwrap(); // [6,2,2]
            let g = c.gather_rows(&[5, 0, 0]).unwrap(); // [3,2,2]
            let r = g.reshape(&[3, 4]).unwrap().gather_flat(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 11, 0], &[14]).unwrap();
            r.narrow(0, 0, 12).unwrap().reshape(&[3, 2, 2]).unwrap().mul(&w).unwrap().sum_all()
                .add(&r.narrow(0, 12, 2).unwrap().sum_all()).unwrap()
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn concat_middle_dim_layout() {
        let a = t64(&[2, 1], &[1.0, 2.0]);
        let b = t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn float32_forward_agrees_with_float64() {
        let a64 = rand64(&[3, 4], 18);
        let b64 = rand64(&[4, 2], 19);
        let a32 = Tensor::<f32>::from_f64(&[3, 4], &a64.to_vec()).unwrap();
        let b32 = Tensor::<f32>::from_f64(&[4, 2], &b64.to_vec()).unwrap();
        let c64 = a64.matmul(&b64).unwrap().to_vec();
        let c32 = a32.matmul(&b32).unwrap().to_f64_vec();
        for (x, y) in c64.iter().zip(&c32) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
