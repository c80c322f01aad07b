//! Raw buffer kernels shared by [`Tensor`](super::Tensor) and the autodiff graph.

use super::float::Float;
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(outer, len, inner)` extents around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::dim(format!("permutation {perm:?} for rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::dim(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<F: Copy>(
    data: &[F],
    shape: &[usize],
    perm: &[usize],
) -> Result<(Vec<F>, Vec<usize>)> {
    let rank = shape.len();
    check_perm(perm, rank)?;
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if rank == 0 {
        return Ok((data.to_vec(), out_shape));
    }
    let in_strides = strides(shape);
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner_len = out_shape[rank - 1];
    let inner_stride = src[rank - 1];
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..data.len() / inner_len {
        if inner_stride == 1 {
            out.extend_from_slice(&data[off..off + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| data[off + j * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            off += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok((out, out_shape))
}

pub(crate) fn narrow<F: Copy>(
    data: &[F],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Vec<F>> {
    let (outer, n, inner) = split_axis(shape, axis)?;
    if len == 0 || start + len > n {
        return Err(Error::dim(format!(
            "narrow [{start}, {}) out of range on axis {axis} of {shape:?}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    Ok(out)
}

/// Adds a narrowed gradient back into the full-size buffer.
pub(crate) fn narrow_scatter_add<F: Float>(
    full: &mut [F],
    shape: &[usize],
    axis: usize,
    start: usize,
    part: &[F],
) {
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = part.len() / (outer * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        let src = &part[o * len * inner..(o + 1) * len * inner];
        for (d, &s) in full[base..base + len * inner].iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Storage order of a GEMM operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as written, row-major.
    Normal,
    /// Stored as the row-major transpose of the logical matrix.
    Transposed,
}

/// `c (m×n) = a (m×k) · b (k×n) [+ c]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    la: Layout,
    b: &[F],
    lb: Layout,
    c: &mut [F],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the length assertion above covers every strided index of the
    // three operands for both layouts.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
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

/// Numpy-style broadcast of two batch shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat index into a (possibly lower-rank, size-1-broadcast) batch shape for
/// every flat index of the full broadcast shape.
pub(crate) fn broadcast_index_map(full: &[usize], part: &[usize]) -> Vec<usize> {
    let total: usize = full.iter().product();
    let rank = full.len();
    let pad = rank - part.len();
    let part_strides = strides(part);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut off = 0;
        for d in pad..rank {
            let extent = part[d - pad];
            if extent != 1 {
                off += idx[d] * part_strides[d - pad];
            }
        }
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < full[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Logistic function evaluated without overflow.
pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Standard normal CDF via erf.
pub(crate) fn normal_cdf<F: Float>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn normal_pdf<F: Float>(x: F) -> F {
    let c = F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * F::from_f64(0.5)).exp()
}
