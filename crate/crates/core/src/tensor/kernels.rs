//! Raw buffer kernels shared by forward and backward rules.

use super::Element;

/// `c (+)= op(a)·op(b)` for row-major buffers. `a` is logically `m×k`
/// (stored `k×m` when `a_t`), `b` logically `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Maps flat indices of a broadcast output back into one input.
#[derive(Debug, Clone)]
pub(crate) enum Indexer {
    Same,
    /// Input is a (left-padded) suffix of the output: `i % period`.
    Tile(usize),
    General(Vec<usize>),
}

impl Indexer {
    pub(crate) fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        if out_shape == in_shape {
            return Indexer::Same;
        }
        let in_numel: usize = in_shape.iter().product();
        let pad = out_shape.len() - in_shape.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(in_shape.iter().copied()).collect();
        // suffix check: once a dim matches, all later dims must match
        let first_real = padded.iter().position(|&d| d != 1).unwrap_or(padded.len());
        if padded[first_real..] == out_shape[first_real..] {
            return Indexer::Tile(in_numel.max(1));
        }
        let out_numel: usize = out_shape.iter().product();
        let mut in_strides = vec![0usize; padded.len()];
        let mut s = 1;
        for d in (0..padded.len()).rev() {
            in_strides[d] = if padded[d] == 1 { 0 } else { s };
            s *= padded[d];
        }
        let mut map = Vec::with_capacity(out_numel);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..out_numel {
            map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Indexer::General(map)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Indexer::Same => i,
            Indexer::Tile(p) => i % p,
            Indexer::General(map) => map[i],
        }
    }
}

/// Row-major strides.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Copies `src` (of `shape`) into a buffer laid out as `shape` permuted by `dims`.
pub(crate) fn permute_copy<T: Copy>(src: &[T], shape: &[usize], dims: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let src_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let nd = out_shape.len();
    if nd == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        // advance the odometer over all but the innermost dim
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Scaled dot-product attention over `q, k, v` laid out `[len, heads, hd]`,
/// processed in row blocks so the full score matrix never exists.
pub(crate) fn blocked_attention<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    len: usize,
    heads: usize,
    hd: usize,
    scale: T,
) -> Vec<T> {
    const ROWS: usize = 64;
    let d = heads * hd;
    assert!(q.len() == len * d && k.len() == len * d && v.len() == len * d);
    let mut out = vec![T::zero(); len * d];
    if len == 0 || d == 0 {
        return out;
    }
    let mut scores = vec![T::zero(); ROWS.min(len) * len];
    for h in 0..heads {
        for r0 in (0..len).step_by(ROWS) {
            let rows = ROWS.min(len - r0);
            let s = &mut scores[..rows * len];
            // SAFETY: every access stays inside the length-checked buffers:
            // row r0+rows-1 of head h ends at (r0+rows-1)·d + h·hd + hd ≤ len·d.
            unsafe {
                T::gemm(
                    rows,
                    hd,
                    len,
                    scale,
                    q.as_ptr().add(r0 * d + h * hd),
                    d as isize,
                    1,
                    k.as_ptr().add(h * hd),
                    1,
                    d as isize,
                    T::zero(),
                    s.as_mut_ptr(),
                    len as isize,
                    1,
                );
            }
            for row in s.chunks_mut(len) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum = sum + *x;
                }
                let inv = T::one() / sum;
                for x in row.iter_mut() {
                    *x = *x * inv;
                }
            }
            // SAFETY: as above; the output block mirrors the query block.
            unsafe {
                T::gemm(
                    rows,
                    len,
                    hd,
                    T::one(),
                    s.as_ptr(),
                    len as isize,
                    1,
                    v.as_ptr().add(h * hd),
                    d as isize,
                    1,
                    T::zero(),
                    out.as_mut_ptr().add(r0 * d + h * hd),
                    d as isize,
                    1,
                );
            }
        }
    }
    out
}
