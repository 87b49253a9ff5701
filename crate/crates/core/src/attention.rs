//! Scaled dot-product attention and the windowed multi-contrast operators
//! built on it.
//!
//! Windowed attention runs on the layout produced by
//! [`geometry::window_partition`]: one batch entry per window, each holding
//! the window's tokens for every contrast, so a token attends to its
//! spatial neighbours in all contrasts at once.

use std::sync::Arc;

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{MmtError, Result};
use crate::geometry::{self, WindowSpec};
use crate::nn::{Init, Linear};

/// Per-head feature width the head count is derived from.
pub const HEAD_DIM: usize = 32;

/// Head count for feature width `d`: `d / 32` rounded down to a divisor of
/// `d`, at least one.
pub fn head_count(d: usize) -> usize {
    let mut h = (d / HEAD_DIM).max(1);
    while !d.is_multiple_of(h) {
        h -= 1;
    }
    h
}

/// `softmax(q·kᵀ/√d_k + bias + mask)·v` over the last two axes, with any
/// leading batch axes broadcast. Returns the output and the post-softmax
/// weights.
pub fn attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() < 2 || ks.len() < 2 || vs.len() < 2 {
        return Err(MmtError::shape(format!(
            "attention needs matrices, got q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let dk = qs[qs.len() - 1];
    if ks[ks.len() - 1] != dk {
        return Err(MmtError::shape(format!(
            "attention: query width {dk} differs from key width {}",
            ks[ks.len() - 1]
        )));
    }
    if ks[ks.len() - 2] != vs[vs.len() - 2] {
        return Err(MmtError::shape(format!(
            "attention: {} keys but {} values",
            ks[ks.len() - 2],
            vs[vs.len() - 2]
        )));
    }
    let kt = g.transpose(k)?;
    let qk = g.matmul(q, kt)?;
    let mut scores = g.scale(qk, 1.0 / (dk as f64).sqrt());
    if let Some(b) = bias {
        scores = g.add(scores, b)?;
    }
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let last = g.shape(scores).len() - 1;
    let weights = g.softmax(scores, last)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Query, key, value and output projections of one multi-head layer. The
/// per-head projections are packed column-wise into single `d × d`
/// matrices; head `i` owns columns `i·d_k .. (i+1)·d_k`.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MhaParams {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(MmtError::invalid(format!(
                "{heads} heads do not divide feature width {dim}"
            )));
        }
        Ok(init.scoped(name, |init| Self {
            wq: Linear::new(init, "q", dim, dim, true),
            wk: Linear::new(init, "k", dim, dim, true),
            wv: Linear::new(init, "v", dim, dim, true),
            wo: Linear::new(init, "o", dim, dim, true),
            heads,
            dim,
        }))
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[b, n, d]` → `[b, heads, n, d_k]`.
    fn split_heads(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[s[0], s[1], self.heads, self.head_dim()])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    /// Multi-head attention of `q_in` `[b, n_q, d]` over `kv_in`
    /// `[b, n_k, d]`. `bias` broadcasts against `[heads, n_q, n_k]`, `mask`
    /// against `[b, 1, n_q, n_k]`. With `capture`, also returns the
    /// head-averaged weights `[b, n_q, n_k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        q_in: Var,
        kv_in: Var,
        bias: Option<Var>,
        mask: Option<Var>,
        capture: bool,
    ) -> Result<(Var, Option<Tensor>)> {
        let (qs, ks) = (g.shape(q_in).to_vec(), g.shape(kv_in).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return Err(MmtError::shape(format!(
                "multi-head attention of width {} got queries {qs:?} and keys {ks:?}",
                self.dim
            )));
        }
        let q = self.wq.forward(g, ps, q_in)?;
        let k = self.wk.forward(g, ps, kv_in)?;
        let v = self.wv.forward(g, ps, kv_in)?;
        let (q, k, v) = (
            self.split_heads(g, q)?,
            self.split_heads(g, k)?,
            self.split_heads(g, v)?,
        );
        let (out, weights) = attention(g, q, k, v, bias, mask)?;
        let merged = g.permute(out, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, &[qs[0], qs[1], self.dim])?;
        let y = self.wo.forward(g, ps, merged)?;
        let captured = capture.then(|| head_mean(g.value(weights), self.heads));
        Ok((y, captured))
    }
}

/// `[b, heads, n_q, n_k]` → `[b, n_q, n_k]`.
fn head_mean(w: &Tensor, heads: usize) -> Tensor {
    let s = w.shape();
    let (b, plane) = (s[0], s[2] * s[3]);
    let mut out = vec![0.0; b * plane];
    for bi in 0..b {
        let dst = &mut out[bi * plane..(bi + 1) * plane];
        for h in 0..heads {
            let src = &w.data()[(bi * heads + h) * plane..(bi * heads + h + 1) * plane];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += x;
            }
        }
        for d in dst.iter_mut() {
            *d /= heads as f64;
        }
    }
    Tensor::new(vec![b, s[2], s[3]], out).expect("shape matches")
}

/// Learned relative position bias, one table column per head.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: ParamId,
    pub wh: usize,
    pub ww: usize,
    pub heads: usize,
}

impl RelPosBias {
    pub fn new(init: &mut Init<'_>, name: &str, spec: &WindowSpec, heads: usize) -> Self {
        let len = geometry::rel_pos_table_len(spec);
        Self {
            table: init.normal(name, &[len, heads], 0.02),
            wh: spec.wh,
            ww: spec.ww,
            heads,
        }
    }

    /// Bias `[heads, m_q·area, m_k·area]` for a window of `spec`, which may
    /// be smaller than the window the table was built for.
    pub fn gather<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        spec: &WindowSpec,
        m_q: usize,
        m_k: usize,
    ) -> Result<Var> {
        if spec.wh > self.wh || spec.ww > self.ww {
            return Err(MmtError::shape(format!(
                "bias table built for {}x{} windows used with {}x{}",
                self.wh, self.ww, spec.wh, spec.ww
            )));
        }
        let rpi = geometry::relative_position_index_in(spec, self.wh, self.ww, m_q, m_k);
        let pairs = rpi.len();
        let mut idx = Vec::with_capacity(pairs * self.heads);
        for h in 0..self.heads {
            idx.extend(rpi.iter().map(|&r| r * self.heads + h));
        }
        let table = g.param(ps, self.table);
        let area = spec.area();
        g.gather(table, Arc::from(idx), &[self.heads, m_q * area, m_k * area])
    }
}

fn shift_mask_var(g: &mut Graph<'_>, h: usize, w: usize, spec: &WindowSpec, m_q: usize, m_k: usize) -> Result<Option<Var>> {
    if !spec.is_shifted() {
        return Ok(None);
    }
    let mask = geometry::shift_mask_cross(h, w, spec, m_q, m_k)?;
    let s = mask.shape().to_vec();
    let mask = mask.reshape(vec![s[0], 1, s[1], s[2]])?;
    Ok(Some(g.constant(mask)))
}

/// Windowed multi-contrast self-attention on `[m, h·w, d]` tokens. A
/// shifted `spec` rolls the grid first and masks pairs that were not
/// adjacent before the roll. Captured weights are `[n_windows, m·area,
/// m·area]`.
#[allow(clippy::too_many_arguments)]
pub fn mw_mha<'p>(
    g: &mut Graph<'p>,
    ps: &'p ParamStore,
    x: Var,
    h: usize,
    w: usize,
    params: &MhaParams,
    bias: &RelPosBias,
    spec: &WindowSpec,
    capture: bool,
) -> Result<(Var, Option<Tensor>)> {
    let m = g.shape(x)[0];
    let windows = geometry::window_partition(g, x, h, w, spec)?;
    let b = bias.gather(g, ps, spec, m, m)?;
    let mask = shift_mask_var(g, h, w, spec, m, m)?;
    let (y, weights) = params.forward(g, ps, windows, windows, Some(b), mask, capture)?;
    let y = geometry::window_reverse(g, y, m, h, w, spec)?;
    Ok((y, weights))
}

/// Windowed cross-attention: `[1, h·w, d]` target tokens query the
/// `[m, h·w, d]` input-contrast tokens sharing their window. Captured
/// weights are `[n_windows, area, m·area]`.
#[allow(clippy::too_many_arguments)]
pub fn mw_cross_mha<'p>(
    g: &mut Graph<'p>,
    ps: &'p ParamStore,
    q_tokens: Var,
    kv_tokens: Var,
    h: usize,
    w: usize,
    params: &MhaParams,
    bias: &RelPosBias,
    spec: &WindowSpec,
    capture: bool,
) -> Result<(Var, Option<Tensor>)> {
    let (qs, ks) = (g.shape(q_tokens).to_vec(), g.shape(kv_tokens).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != 1 || qs[1..] != ks[1..] {
        return Err(MmtError::shape(format!(
            "cross attention needs [1, L, d] queries and [M, L, d] keys on one grid, got {qs:?} and {ks:?}"
        )));
    }
    let m = ks[0];
    let qw = geometry::window_partition(g, q_tokens, h, w, spec)?;
    let kw = geometry::window_partition(g, kv_tokens, h, w, spec)?;
    let b = bias.gather(g, ps, spec, 1, m)?;
    let mask = shift_mask_var(g, h, w, spec, 1, m)?;
    let (y, weights) = params.forward(g, ps, qw, kw, Some(b), mask, capture)?;
    let y = geometry::window_reverse(g, y, 1, h, w, spec)?;
    Ok((y, weights))
}

/// Reference global attention over all `m·h·w` tokens with no windows and
/// no position bias. Used to compare cost against the windowed operator.
pub fn global_mha<'p>(g: &mut Graph<'p>, ps: &'p ParamStore, x: Var, params: &MhaParams) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(MmtError::shape(format!("global attention expects [M, L, d], got {s:?}")));
    }
    let flat = g.reshape(x, &[1, s[0] * s[1], s[2]])?;
    let (y, _) = params.forward(g, ps, flat, flat, None, None, false)?;
    g.reshape(y, &s)
}
