//! Forward and backward kernels shared by the autodiff tape and the eager
//! inference path.

use crate::error::{Result, TensorError};
use crate::flops::{self, FlopCounts};

/// Layer-norm epsilon used throughout.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
///
/// `a` is `m x k` with row stride `rsa` and column stride `csa`, likewise for
/// `b` (`k x n`) and `c` (`m x n`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m.saturating_sub(1) * rsa + k.saturating_sub(1) * csa < a.len().max(1) || k == 0);
    assert!(k.saturating_sub(1) * rsb + n.saturating_sub(1) * csb < b.len().max(1) || k == 0);
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    flops::record(FlopCounts {
        linear_macs: (m * k * n) as u64,
        ..FlopCounts::default()
    });
    gemm_uncounted(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// [`gemm`] without touching the counters; attention products are counted
/// as pairs by their callers instead.
#[allow(clippy::too_many_arguments)]
fn gemm_uncounted(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m.saturating_sub(1) * rsa + k.saturating_sub(1) * csa < a.len().max(1) || k == 0);
    assert!(k.saturating_sub(1) * rsb + n.saturating_sub(1) * csb < b.len().max(1) || k == 0);
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `(m x k) * (k x n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, k, 1, b, n, 1, 0.0, &mut out, n, 1);
    out
}

/// `x * w + bias` for `x: rows x din`, `w: din x dout`.
pub fn linear(x: &[f64], w: &[f64], bias: Option<&[f64]>, rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = match bias {
        Some(b) => {
            let mut o = Vec::with_capacity(rows * dout);
            for _ in 0..rows {
                o.extend_from_slice(b);
            }
            o
        }
        None => vec![0.0; rows * dout],
    };
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(rows, din, dout, 1.0, x, din, 1, w, dout, 1, beta, &mut out, dout, 1);
    out
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax over contiguous rows of width `dim`, with max subtraction.
pub fn softmax_rows(x: &[f64], dim: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(dim) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-row statistics saved by [`layer_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], dim: usize) -> (Vec<f64>, NormStats) {
    let rows = x.len() / dim;
    let mut out = vec![0.0; x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks(dim).zip(out.chunks_mut(dim)) {
        let mu = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for i in 0..dim {
            yr[i] = (xr[i] - mu) * rs * gamma[i] + beta[i];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, NormStats { mean, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    stats: &NormStats,
    dy: &[f64],
    dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; dim];
    let mut dbeta = vec![0.0; dim];
    let mut xhat = vec![0.0; dim];
    let mut dxhat = vec![0.0; dim];
    for (r, ((xr, dyr), dxr)) in x.chunks(dim).zip(dy.chunks(dim)).zip(dx.chunks_mut(dim)).enumerate() {
        let mu = stats.mean[r];
        let rs = stats.rstd[r];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..dim {
            xhat[i] = (xr[i] - mu) * rs;
            dxhat[i] = dyr[i] * gamma[i];
            dgamma[i] += dyr[i] * xhat[i];
            dbeta[i] += dyr[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xhat[i];
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        for i in 0..dim {
            dxr[i] = rs * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Axis along which attention sequences run in a `rows x cols x dim` cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// One sequence per column, running over rows.
    Rows,
    /// One sequence per row, running over columns.
    Cols,
}

/// Which keys each query position may attend to along the row axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RowMask {
    /// Every position attends to every position.
    Full,
    /// Positions `< context` attend to all context positions; later positions
    /// attend to the context and to themselves only.
    Prefix { context: usize },
    /// Row-major `n x n` boolean matrix; `allowed[i * n + j]` lets `i` see `j`.
    Explicit { n: usize, allowed: Vec<bool> },
}

impl RowMask {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            RowMask::Full => Ok(()),
            RowMask::Prefix { context } => {
                if *context == 0 || *context > n {
                    return Err(TensorError::InvalidArgument {
                        op: "attention",
                        reason: format!("prefix mask context {context} outside 1..={n}"),
                    });
                }
                Ok(())
            }
            RowMask::Explicit { n: mn, allowed } => {
                if *mn != n || allowed.len() != n * n {
                    return Err(TensorError::InvalidArgument {
                        op: "attention",
                        reason: format!("mask is {mn}x{mn}, sequence length is {n}"),
                    });
                }
                for i in 0..n {
                    if !allowed[i * n..(i + 1) * n].iter().any(|&a| a) {
                        return Err(TensorError::InvalidArgument {
                            op: "attention",
                            reason: format!("mask row {i} allows no keys"),
                        });
                    }
                }
                Ok(())
            }
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            RowMask::Full => true,
            RowMask::Prefix { context } => j < *context || i == j,
            RowMask::Explicit { n, allowed } => allowed[i * n + j],
        }
    }

    /// Fills `keys` with the key positions visible from query `i`, in
    /// ascending order.
    fn keys_for(&self, i: usize, n: usize, keys: &mut Vec<usize>) {
        keys.clear();
        match self {
            RowMask::Full => keys.extend(0..n),
            RowMask::Prefix { context } => {
                keys.extend(0..*context);
                if i >= *context {
                    keys.push(i);
                }
            }
            RowMask::Explicit { allowed, .. } => {
                keys.extend((0..n).filter(|&j| allowed[i * n + j]));
            }
        }
    }

    fn classify(&self, i: usize, n_keys: usize, counts: &mut FlopCounts) {
        match self {
            RowMask::Full => counts.context_pairs += n_keys as u64,
            RowMask::Prefix { context } => {
                if i < *context {
                    counts.context_pairs += n_keys as u64;
                } else {
                    counts.query_context_pairs += *context as u64;
                    counts.query_self_pairs += 1;
                }
            }
            RowMask::Explicit { .. } => counts.explicit_pairs += n_keys as u64,
        }
    }
}

/// Geometry of a multi-head attention over a `rows x cols x dim` token cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub rows: usize,
    pub cols: usize,
    pub heads: usize,
    pub dim: usize,
    pub axis: Axis,
}

impl AttentionLayout {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    fn groups(&self) -> usize {
        match self.axis {
            Axis::Rows => self.cols,
            Axis::Cols => self.rows,
        }
    }

    fn seq_len(&self) -> usize {
        match self.axis {
            Axis::Rows => self.rows,
            Axis::Cols => self.cols,
        }
    }

    fn token(&self, group: usize, pos: usize) -> usize {
        match self.axis {
            Axis::Rows => pos * self.cols + group,
            Axis::Cols => group * self.cols + pos,
        }
    }

    pub fn validate(&self, len: usize, mask: &RowMask) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: format!("dim {} not divisible by {} heads", self.dim, self.heads),
            });
        }
        if len != self.tokens() * self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![len],
                rhs: vec![self.rows, self.cols, self.dim],
            });
        }
        if self.axis == Axis::Cols && *mask != RowMask::Full {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: "column attention is always unmasked".into(),
            });
        }
        mask.validate(self.seq_len())
    }
}

/// Attention probabilities saved for the backward pass, one variable-length
/// list per (group, head, query).
#[derive(Clone, Debug, Default)]
pub struct SavedProbs {
    probs: Vec<f64>,
}

fn gather_head(src: &[f64], layout: &AttentionLayout, group: usize, head: usize, buf: &mut [f64]) {
    let dh = layout.head_dim();
    let n = layout.seq_len();
    for pos in 0..n {
        let t = layout.token(group, pos);
        let off = t * layout.dim + head * dh;
        buf[pos * dh..(pos + 1) * dh].copy_from_slice(&src[off..off + dh]);
    }
}

fn scatter_add_head(dst: &mut [f64], layout: &AttentionLayout, group: usize, head: usize, buf: &[f64]) {
    let dh = layout.head_dim();
    let n = layout.seq_len();
    for pos in 0..n {
        let t = layout.token(group, pos);
        let off = t * layout.dim + head * dh;
        for d in 0..dh {
            dst[off + d] += buf[pos * dh + d];
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax-weighted mix of `values` for one query; returns nothing, writes
/// the normalized probabilities into `scores` and the output into `out`.
#[inline]
fn attend_one(q: &[f64], kbuf: &[f64], vbuf: &[f64], keys: &[usize], dh: usize, scale: f64, scores: &mut Vec<f64>, out: &mut [f64]) {
    scores.clear();
    let mut max = f64::NEG_INFINITY;
    for &j in keys {
        let s = dot(q, &kbuf[j * dh..(j + 1) * dh]) * scale;
        max = max.max(s);
        scores.push(s);
    }
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o = 0.0);
    for (s, &j) in scores.iter_mut().zip(keys) {
        *s *= inv;
        let v = &vbuf[j * dh..(j + 1) * dh];
        for d in 0..dh {
            out[d] += *s * v[d];
        }
    }
}

/// Strided view of `n` key and value rows of one head.
#[derive(Clone, Copy)]
struct Keys<'a> {
    k: &'a [f64],
    v: &'a [f64],
    rs: usize,
    n: usize,
}

const QUERY_BLOCK: usize = 128;

/// Attention of query rows `lo..hi` (row stride `rsq`) against the shared
/// keys and, when `own` is given, each query's own key at the same row
/// index. Scores for a block of queries come from one matrix product, so
/// the working set is `QUERY_BLOCK x shared.n`.
#[allow(clippy::too_many_arguments)]
fn attend_block(
    q: &[f64],
    rsq: usize,
    lo: usize,
    hi: usize,
    shared: Keys<'_>,
    own: Option<Keys<'_>>,
    dh: usize,
    scale: f64,
    out: &mut [f64],
    rso: usize,
    scores: &mut Vec<f64>,
) {
    let nk = shared.n;
    let mut self_scores = [0.0; QUERY_BLOCK];
    let mut start = lo;
    while start < hi {
        let end = (start + QUERY_BLOCK).min(hi);
        let nq = end - start;
        scores.clear();
        scores.resize(nq * nk, 0.0);
        gemm_uncounted(nq, dh, nk, scale, &q[start * rsq..], rsq, 1, shared.k, 1, shared.rs, 0.0, scores, nk, 1);
        for r in 0..nq {
            let row = &mut scores[r * nk..(r + 1) * nk];
            let mut max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if let Some(o) = own {
                let i = start + r;
                let s = dot(&q[i * rsq..i * rsq + dh], &o.k[i * o.rs..i * o.rs + dh]) * scale;
                self_scores[r] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            if own.is_some() {
                self_scores[r] = (self_scores[r] - max).exp();
                sum += self_scores[r];
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|x| *x *= inv);
            self_scores[r] *= inv;
        }
        let dst = &mut out[start * rso..];
        gemm_uncounted(nq, nk, dh, 1.0, scores, nk, 1, shared.v, shared.rs, 1, 0.0, dst, rso, 1);
        if let Some(o) = own {
            for r in 0..nq {
                let i = start + r;
                let p = self_scores[r];
                let v = &o.v[i * o.rs..i * o.rs + dh];
                for d in 0..dh {
                    out[i * rso + d] += p * v[d];
                }
            }
        }
        start = end;
    }
}

/// Multi-head scaled dot-product attention over `q`, `k`, `v` laid out as
/// `rows x cols x dim`. Returns the mixed values in the same layout and,
/// when `save` is set, the probabilities needed by [`attention_backward`].
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    layout: &AttentionLayout,
    mask: &RowMask,
    save: bool,
) -> Result<(Vec<f64>, Option<SavedProbs>)> {
    layout.validate(q.len(), mask)?;
    layout.validate(k.len(), mask)?;
    layout.validate(v.len(), mask)?;
    let dh = layout.head_dim();
    let n = layout.seq_len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut saved = save.then(SavedProbs::default);
    let (mut qb, mut kb, mut vb) = (vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh]);
    let mut keys = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut o = vec![0.0; dh];
    let mut counts = FlopCounts::default();
    let shared_keys = match mask {
        RowMask::Full => Some(n),
        RowMask::Prefix { context } => Some(*context),
        RowMask::Explicit { .. } => None,
    };
    if let (false, Some(nk)) = (save, shared_keys) {
        let mut ob = vec![0.0; n * dh];
        for g in 0..layout.groups() {
            for h in 0..layout.heads {
                gather_head(q, layout, g, h, &mut qb);
                gather_head(k, layout, g, h, &mut kb);
                gather_head(v, layout, g, h, &mut vb);
                // Rows before `nk` see exactly the shared keys; later rows
                // (prefix masks only) also see themselves.
                let split = nk.min(n);
                let shared = Keys { k: &kb, v: &vb, rs: dh, n: nk };
                attend_block(&qb, dh, 0, split, shared, None, dh, scale, &mut ob, dh, &mut scores);
                let own = Keys { k: &kb, v: &vb, rs: dh, n: 0 };
                attend_block(&qb, dh, split, n, shared, Some(own), dh, scale, &mut ob, dh, &mut scores);
                scatter_add_head(&mut out, layout, g, h, &ob);
            }
        }
        for i in 0..n {
            let n_keys = if i < nk { nk } else { nk + 1 };
            for _ in 0..layout.groups() {
                match layout.axis {
                    Axis::Rows => mask.classify(i, n_keys, &mut counts),
                    Axis::Cols => counts.col_pairs += n_keys as u64,
                }
            }
            counts.attention_macs += (2 * dh * n_keys * layout.heads * layout.groups()) as u64;
        }
        flops::record(counts);
        return Ok((out, None));
    }
    for g in 0..layout.groups() {
        for h in 0..layout.heads {
            gather_head(q, layout, g, h, &mut qb);
            gather_head(k, layout, g, h, &mut kb);
            gather_head(v, layout, g, h, &mut vb);
            for i in 0..n {
                mask.keys_for(i, n, &mut keys);
                attend_one(&qb[i * dh..(i + 1) * dh], &kb, &vb, &keys, dh, scale, &mut scores, &mut o);
                let off = layout.token(g, i) * layout.dim + h * dh;
                out[off..off + dh].copy_from_slice(&o);
                if let Some(s) = saved.as_mut() {
                    s.probs.extend_from_slice(&scores);
                }
                if h == 0 {
                    match layout.axis {
                        Axis::Rows => mask.classify(i, keys.len(), &mut counts),
                        Axis::Cols => counts.col_pairs += keys.len() as u64,
                    }
                }
                counts.attention_macs += (2 * dh * keys.len()) as u64;
            }
        }
    }
    flops::record(counts);
    Ok((out, saved))
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    layout: &AttentionLayout,
    mask: &RowMask,
    saved: &SavedProbs,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = layout.head_dim();
    let n = layout.seq_len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let (mut qb, mut kb, mut vb, mut ob) = (vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh]);
    let (mut dqb, mut dkb, mut dvb) = (vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh]);
    let mut keys = Vec::with_capacity(n);
    let mut dp = Vec::with_capacity(n);
    let mut cursor = 0;
    for g in 0..layout.groups() {
        for h in 0..layout.heads {
            gather_head(q, layout, g, h, &mut qb);
            gather_head(k, layout, g, h, &mut kb);
            gather_head(v, layout, g, h, &mut vb);
            gather_head(dout, layout, g, h, &mut ob);
            dqb.iter_mut().for_each(|x| *x = 0.0);
            dkb.iter_mut().for_each(|x| *x = 0.0);
            dvb.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..n {
                mask.keys_for(i, n, &mut keys);
                let p = &saved.probs[cursor..cursor + keys.len()];
                cursor += keys.len();
                let doi = &ob[i * dh..(i + 1) * dh];
                dp.clear();
                let mut t = 0.0;
                for (&j, &pj) in keys.iter().zip(p) {
                    let d = dot(doi, &vb[j * dh..(j + 1) * dh]);
                    t += pj * d;
                    dp.push(d);
                    for d in 0..dh {
                        dvb[j * dh + d] += pj * doi[d];
                    }
                }
                let qi = &qb[i * dh..(i + 1) * dh];
                for ((&j, &pj), &dpj) in keys.iter().zip(p).zip(&dp) {
                    let ds = pj * (dpj - t) * scale;
                    for d in 0..dh {
                        dqb[i * dh + d] += ds * kb[j * dh + d];
                        dkb[j * dh + d] += ds * qi[d];
                    }
                }
            }
            scatter_add_head(&mut dq, layout, g, h, &dqb);
            scatter_add_head(&mut dk, layout, g, h, &dkb);
            scatter_add_head(&mut dv, layout, g, h, &dvb);
        }
    }
    (dq, dk, dv)
}

/// Row attention for query rows against a fixed context, as used with a
/// key/value cache. Query row `i` attends to every context row of its column
/// and to itself, which matches [`RowMask::Prefix`] for the rows after the
/// context.
///
/// `q`, `k_self`, `v_self` are `query_rows x cols x dim`; `k_ctx`, `v_ctx` are
/// `context_rows x cols x dim`.
#[allow(clippy::too_many_arguments)]
pub fn cached_row_attention(
    q: &[f64],
    k_self: &[f64],
    v_self: &[f64],
    k_ctx: &[f64],
    v_ctx: &[f64],
    query_rows: usize,
    context_rows: usize,
    cols: usize,
    heads: usize,
    dim: usize,
) -> Vec<f64> {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_keys = context_rows + 1;
    let mut out = vec![0.0; q.len()];
    let mut scores = Vec::new();
    let rs = cols * dim;
    for c in 0..cols {
        for h in 0..heads {
            let off = c * dim + h * dh;
            let shared = Keys { k: &k_ctx[off.min(k_ctx.len())..], v: &v_ctx[off.min(v_ctx.len())..], rs, n: context_rows };
            let own = Keys { k: &k_self[off..], v: &v_self[off..], rs, n: 0 };
            attend_block(&q[off..], rs, 0, query_rows, shared, Some(own), dh, scale, &mut out[off..], rs, &mut scores);
        }
    }
    let pairs = (query_rows * cols) as u64;
    flops::record(FlopCounts {
        query_context_pairs: pairs * context_rows as u64,
        query_self_pairs: pairs,
        attention_macs: pairs * (n_keys as u64) * 2 * dim as u64,
        ..FlopCounts::default()
    });
    out
}
