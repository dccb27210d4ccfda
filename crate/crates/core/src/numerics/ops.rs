//! Eager tensor operations. The tape records these same computations.

use super::kernels::{self, ConvGeom, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), Layout::Plain, b.data(), Layout::Plain, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, the fully-connected layer product with `[out, in]` weights.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul_nt", a, 2)?;
    expect_rank("matmul_nt", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul_nt",
            format!("{:?} · {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), Layout::Plain, b.data(), Layout::Transposed, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", kernel, 4)?;
    let s = input.shape();
    let k = kernel.shape();
    if s[1] != k[1] {
        return Err(Error::dim(
            "conv2d",
            format!("input {:?} vs kernels {:?}: channel mismatch", s, k),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let (ph, pw) = (s[2] + 2 * pad, s[3] + 2 * pad);
    if k[2] > ph || k[3] > pw {
        return Err(Error::Config(format!(
            "kernel {}×{} larger than padded input {ph}×{pw}",
            k[2], k[3]
        )));
    }
    if (ph - k[2]) % stride != 0 || (pw - k[3]) % stride != 0 {
        return Err(Error::Config(format!(
            "non-integral conv output extent: padded {ph}×{pw}, kernel {}×{}, stride {stride}",
            k[2], k[3]
        )));
    }
    Ok(ConvGeom {
        batch: s[0],
        channels: s[1],
        height: s[2],
        width: s[3],
        filters: k[0],
        kh: k[2],
        kw: k[3],
        stride,
        pad,
        out_h: (ph - k[2]) / stride + 1,
        out_w: (pw - k[3]) / stride + 1,
    })
}

/// Cross-correlation of `N×C×H×W` input with `F×C×kh×kw` kernels and zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernel, stride, pad)?;
    let out = kernels::conv_forward(input.data(), kernel.data(), &g);
    Tensor::new(vec![g.batch, g.filters, g.out_h, g.out_w], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub(crate) fn maxpool_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    expect_rank("maxpool2d", x, 4)?;
    let s = x.shape();
    if s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::Config(format!(
            "maxpool2d needs even spatial extents, got {}×{}",
            s[2], s[3]
        )));
    }
    Ok((s[0] * s[1], s[2], s[3]))
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2d(x: &Tensor) -> Result<Tensor> {
    let (nc, h, w) = maxpool_dims(x)?;
    let (out, _) = kernels::maxpool2x2(x.data(), nc, h, w);
    let s = x.shape();
    Tensor::new(vec![s[0], s[1], h / 2, w / 2], out)
}

/// Collapses all but the leading axis.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(1);
    x.clone().reshape(&[n, x.stride0()])
}

/// Adds `bias[F]` along axis 1 of an `N×F×…` tensor.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let inner = bias_inner(x, bias)?;
    let f = bias.len();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let b = bias.data()[i % f];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

pub(crate) fn bias_inner(x: &Tensor, bias: &Tensor) -> Result<usize> {
    if x.rank() < 2 || bias.rank() != 1 || x.shape()[1] != bias.len() {
        return Err(Error::dim(
            "add_bias",
            format!("{:?} + bias {:?}", x.shape(), bias.shape()),
        ));
    }
    Ok(x.shape()[2..].iter().product())
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// Row-wise softmax of `logits / tau`.
pub fn softmax_t(logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    expect_rank("softmax_t", logits, 2)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax_t logits".into()));
    }
    let cols = logits.shape()[1];
    Tensor::new(logits.shape().to_vec(), kernels::softmax_rows(logits.data(), cols, tau))
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    expect_rank("log_softmax", logits, 2)?;
    let cols = logits.shape()[1];
    Tensor::new(logits.shape().to_vec(), kernels::log_softmax_rows(logits.data(), cols))
}

/// Validates that `target` holds one probability row per logit row.
pub fn check_target(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() || target.rank() != 2 {
        return Err(Error::dim(
            "soft_cross_entropy",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    for (r, row) in target.rows().enumerate() {
        if let Some(v) = row.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Target(format!("row {r} has entry {v}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Target(format!("row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// Mean over rows of `−Σ target · log_softmax(logits)`.
pub fn soft_cross_entropy(logits: &Tensor, target: &Tensor) -> Result<f64> {
    check_target(logits, target)?;
    let ls = log_softmax(logits)?;
    let n = logits.shape()[0].max(1) as f64;
    let total: f64 = ls
        .data()
        .iter()
        .zip(target.data())
        .map(|(l, t)| if *t == 0.0 { 0.0 } else { -t * l })
        .sum();
    Ok(total / n)
}

/// Per-row cross-entropy against integer labels.
pub fn cross_entropy_per_example(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let ls = log_softmax(logits)?;
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = ls.row(r);
            row.get(y)
                .map(|v| -v)
                .ok_or(Error::Index { index: y, len: row.len() })
        })
        .collect()
}

/// Mean over rows of `KL(softmax(q) ‖ softmax(p))`.
///
/// `q_logits` is the reference (clean) output and `p_logits` the perturbed one.
pub fn kl_divergence(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() || p_logits.rank() != 2 {
        return Err(Error::dim(
            "kl_divergence",
            format!("{:?} vs {:?}", p_logits.shape(), q_logits.shape()),
        ));
    }
    let lp = log_softmax(p_logits)?;
    let lq = log_softmax(q_logits)?;
    let n = p_logits.shape()[0].max(1) as f64;
    let total: f64 = lp
        .data()
        .iter()
        .zip(lq.data())
        .map(|(a, b)| b.exp() * (b - a))
        .sum();
    Ok(total / n)
}
