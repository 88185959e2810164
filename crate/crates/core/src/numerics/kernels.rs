//! Raw forward kernels shared by the eager API and the tape. Each kernel
//! validates shapes and returns finite outputs or an error; none of them
//! record anything.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::contract(format!(
            "matmul dimension mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::contract(format!(
            "transpose expects a matrix, got shape {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Numerically stable softmax over the given axis set: within every group of
/// positions that share coordinates on the remaining axes, the maximum is
/// subtracted before exponentiation (unconditionally), then the group is
/// normalized to sum to 1.
pub(crate) fn softmax_axes(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    if axes.is_empty() {
        return Err(Error::contract("softmax requires a nonempty axis set"));
    }
    let rank = x.rank();
    let mut seen = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(Error::contract(format!(
                "softmax axis {ax} out of range for shape {:?}",
                x.shape()
            )));
        }
        if seen[ax] {
            return Err(Error::contract(format!("softmax axis {ax} repeated")));
        }
        seen[ax] = true;
    }

    // Map each flat index to a group id made from the coordinates on the
    // non-softmax axes.
    let shape = x.shape();
    let mut group_count = 1;
    let mut group_stride = vec![0usize; rank];
    for ax in (0..rank).rev() {
        if !seen[ax] {
            group_stride[ax] = group_count;
            group_count *= shape[ax];
        }
    }
    let mut strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    let group_of = |flat: usize| -> usize {
        let mut g = 0;
        for ax in 0..rank {
            if !seen[ax] {
                g += (flat / strides[ax] % shape[ax]) * group_stride[ax];
            }
        }
        g
    };

    let n = x.numel();
    let mut maxes = vec![f64::NEG_INFINITY; group_count];
    for flat in 0..n {
        let g = group_of(flat);
        maxes[g] = maxes[g].max(x.data()[flat]);
    }
    let mut out = vec![0.0; n];
    let mut sums = vec![0.0; group_count];
    for flat in 0..n {
        let g = group_of(flat);
        let e = (x.data()[flat] - maxes[g]).exp();
        out[flat] = e;
        sums[g] += e;
    }
    for flat in 0..n {
        out[flat] /= sums[group_of(flat)];
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn tanh_map(x: &Tensor) -> Result<Tensor> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.tanh()).collect())
}

pub(crate) fn conv2d_shapes(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
        return Err(Error::contract(format!(
            "conv2d expects x[C,H,W], w[Co,Ci,kh,kw], b[Co]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wci != ci || b.shape()[0] != co {
        return Err(Error::contract(format!(
            "conv2d channel mismatch: x has {ci} channels, w expects {wci}, bias {}",
            b.shape()[0]
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::contract(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {h}x{wd} (+{pad})"
        )));
    }
    Ok((ci, h, wd, co, kh, kw, pad))
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<Tensor> {
    let (ci_n, h, wd, co_n, kh, kw, pad) = conv2d_shapes(x, w, b, pad)?;
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    let mut out = vec![0.0; co_n * oh * ow];
    for co in 0..co_n {
        let bias = b.data()[co];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = bias;
                for ci in 0..ci_n {
                    for u in 0..kh {
                        let xi = oi + u;
                        if xi < pad || xi - pad >= h {
                            continue;
                        }
                        for v in 0..kw {
                            let xj = oj + v;
                            if xj < pad || xj - pad >= wd {
                                continue;
                            }
                            acc += x.data()[(ci * h + (xi - pad)) * wd + (xj - pad)]
                                * w.data()[((co * ci_n + ci) * kh + u) * kw + v];
                        }
                    }
                }
                out[(co * oh + oi) * ow + oj] = acc;
            }
        }
    }
    Tensor::new(vec![co_n, oh, ow], out)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// cell, the flat input index of the maximum; ties go to the first index in
/// row-major window order, which keeps results deterministic.
pub(crate) fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 3 {
        return Err(Error::contract(format!(
            "maxpool2 expects x[C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "maxpool2 requires even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c_n * oh * ow];
    let mut argmax = vec![0usize; c_n * oh * ow];
    for c in 0..c_n {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for du in 0..2 {
                    for dv in 0..2 {
                        let idx = (c * h + 2 * oi + du) * w + 2 * oj + dv;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * oh + oi) * ow + oj;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![c_n, oh, ow], out)?, argmax))
}
