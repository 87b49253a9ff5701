//! Index arithmetic for patches and windows.
//!
//! Every re-layout in the model is a pure permutation (or a many-to-one
//! gather) described by an index map computed here. The graph then applies
//! the map with `gather`/`gather_rows`, so the geometry can be tested
//! without touching any arithmetic.
//!
//! Token order conventions:
//! * a token grid of extent `h × w` is flattened row-major, `t = i·w + j`;
//! * a patch token concatenates its pixels row-major, pixel-major then
//!   channel: feature `(py·P + px)·C + c`;
//! * a window groups tokens contrast-major, then row-major inside the
//!   window; windows themselves are enumerated row-major.

use std::sync::Arc;

use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{MmtError, Result};
use crate::nn::{Init, Linear};

/// Side of the square pixel patch that becomes one token.
pub const PATCH: usize = 4;

/// Additive attention mask value for blocked pairs.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub wh: usize,
    pub ww: usize,
    pub shift_h: usize,
    pub shift_w: usize,
}

impl WindowSpec {
    pub fn new(wh: usize, ww: usize) -> Result<Self> {
        Self::with_shift(wh, ww, 0, 0)
    }

    pub fn with_shift(wh: usize, ww: usize, shift_h: usize, shift_w: usize) -> Result<Self> {
        if wh == 0 || ww == 0 {
            return Err(MmtError::invalid(format!(
                "window extents must be positive, got {wh}x{ww}"
            )));
        }
        if shift_h >= wh || shift_w >= ww {
            return Err(MmtError::invalid(format!(
                "shift ({shift_h}, {shift_w}) must be smaller than window {wh}x{ww}"
            )));
        }
        Ok(Self {
            wh,
            ww,
            shift_h,
            shift_w,
        })
    }

    /// The alternate-block variant: shift by half a window.
    pub fn shifted(self) -> Self {
        Self {
            shift_h: self.wh / 2,
            shift_w: self.ww / 2,
            ..self
        }
    }

    pub fn unshifted(self) -> Self {
        Self {
            shift_h: 0,
            shift_w: 0,
            ..self
        }
    }

    pub fn is_shifted(&self) -> bool {
        self.shift_h > 0 || self.shift_w > 0
    }

    /// Tokens per window per contrast.
    pub fn area(&self) -> usize {
        self.wh * self.ww
    }

    /// Shrinks the window to a grid smaller than it. An axis fully covered
    /// by one window has nothing to shift across, so its shift is dropped.
    pub fn clamp_to(self, h: usize, w: usize) -> Self {
        let wh = self.wh.min(h);
        let ww = self.ww.min(w);
        Self {
            wh,
            ww,
            shift_h: if wh == h { 0 } else { self.shift_h.min(wh - 1) },
            shift_w: if ww == w { 0 } else { self.shift_w.min(ww - 1) },
        }
    }

    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(self.wh) {
            return Err(MmtError::invalid(format!(
                "token grid height {h} is not a multiple of window height {}",
                self.wh
            )));
        }
        if !w.is_multiple_of(self.ww) {
            return Err(MmtError::invalid(format!(
                "token grid width {w} is not a multiple of window width {}",
                self.ww
            )));
        }
        Ok(())
    }

    pub fn num_windows(&self, h: usize, w: usize) -> usize {
        (h / self.wh) * (w / self.ww)
    }
}

/// Token grid derived from an `H × W` image at the finest scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub h_tokens: usize,
    pub w_tokens: usize,
    pub n_contrasts: usize,
    pub feat_dim: usize,
}

impl PatchGrid {
    pub fn from_image(h: usize, w: usize, n_contrasts: usize, channels: usize) -> Result<Self> {
        if !h.is_multiple_of(PATCH) {
            return Err(MmtError::invalid(format!(
                "image height {h} is not divisible by patch size {PATCH}"
            )));
        }
        if !w.is_multiple_of(PATCH) {
            return Err(MmtError::invalid(format!(
                "image width {w} is not divisible by patch size {PATCH}"
            )));
        }
        Ok(Self {
            h_tokens: h / PATCH,
            w_tokens: w / PATCH,
            n_contrasts,
            feat_dim: PATCH * PATCH * channels,
        })
    }

    pub fn tokens(&self) -> usize {
        self.h_tokens * self.w_tokens
    }
}

/// Element map for `[m, c, h, w]` images → `[m, (h/p)(w/p), p·p·c]` tokens.
pub fn patch_partition_index(m: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    for (name, v) in [("height", h), ("width", w)] {
        if v % p != 0 {
            return Err(MmtError::invalid(format!(
                "image {name} {v} is not divisible by patch size {p}"
            )));
        }
    }
    let (ht, wt) = (h / p, w / p);
    let mut idx = Vec::with_capacity(m * c * h * w);
    for mm in 0..m {
        for ti in 0..ht {
            for tj in 0..wt {
                for py in 0..p {
                    for px in 0..p {
                        for cc in 0..c {
                            idx.push(((mm * c + cc) * h + ti * p + py) * w + tj * p + px);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Row map grouping `f × f` neighbouring tokens: output rows are ordered
/// `(m, coarse token, dy·f + dx)`, so reshaping `[m·(h/f)(w/f)·f², d]` to
/// `[m, (h/f)(w/f), f²·d]` concatenates the group's features.
pub fn merge_rows_index(m: usize, h: usize, w: usize, f: usize) -> Result<Vec<usize>> {
    if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(MmtError::invalid(format!(
            "token grid {h}x{w} cannot be grouped in {f}x{f} blocks"
        )));
    }
    let (hc, wc) = (h / f, w / f);
    let mut idx = Vec::with_capacity(m * h * w);
    for mm in 0..m {
        for i in 0..hc {
            for j in 0..wc {
                for dy in 0..f {
                    for dx in 0..f {
                        idx.push(mm * h * w + (i * f + dy) * w + j * f + dx);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Row map that spreads each token's `f²` feature chunks over an `f × f`
/// block of the finer grid: input rows are `(m, token, dy·f + dx)` for an
/// `h × w` grid, output rows are the `(f·h) × (f·w)` grid row-major.
pub fn expand_rows_index(m: usize, h: usize, w: usize, f: usize) -> Vec<usize> {
    let (hf, wf) = (h * f, w * f);
    let mut idx = Vec::with_capacity(m * hf * wf);
    for mm in 0..m {
        for y in 0..hf {
            for x in 0..wf {
                let (i, dy, j, dx) = (y / f, y % f, x / f, x % f);
                idx.push(((mm * h + i) * w + j) * f * f + dy * f + dx);
            }
        }
    }
    idx
}

/// Row map from `[m, h·w]` tokens to `[n_windows, m·wh·ww]` windows, taken
/// after a cyclic shift by `(-shift_h, -shift_w)`.
pub fn window_partition_index(m: usize, h: usize, w: usize, spec: &WindowSpec) -> Result<Vec<usize>> {
    spec.check_grid(h, w)?;
    let (nwh, nww) = (h / spec.wh, w / spec.ww);
    let mut idx = Vec::with_capacity(m * h * w);
    for wi in 0..nwh {
        for wj in 0..nww {
            for mm in 0..m {
                for r in 0..spec.wh {
                    for c in 0..spec.ww {
                        let i = (wi * spec.wh + r + spec.shift_h) % h;
                        let j = (wj * spec.ww + c + spec.shift_w) % w;
                        idx.push(mm * h * w + i * w + j);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of a permutation.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Region label per shifted-grid position: positions share a label iff
/// they were contiguous before the cyclic shift.
pub fn shift_region_labels(h: usize, w: usize, spec: &WindowSpec) -> Vec<u8> {
    let band = |s: usize, extent: usize, win: usize, shift: usize| -> u8 {
        if shift == 0 || s < extent - win {
            0
        } else if s < extent - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            labels.push(3 * band(i, h, spec.wh, spec.shift_h) + band(j, w, spec.ww, spec.shift_w));
        }
    }
    labels
}

/// Additive mask `[n_windows, m_q·area, m_k·area]` for (possibly cross)
/// windowed attention. Zero for pairs from the same pre-shift region,
/// [`MASK_VALUE`] otherwise. Region ids depend only on spatial position.
pub fn shift_mask_cross(
    h: usize,
    w: usize,
    spec: &WindowSpec,
    m_q: usize,
    m_k: usize,
) -> Result<Tensor> {
    spec.check_grid(h, w)?;
    let labels = shift_region_labels(h, w, spec);
    let (nwh, nww) = (h / spec.wh, w / spec.ww);
    let area = spec.area();
    let (nq, nk) = (m_q * area, m_k * area);
    let mut data = Vec::with_capacity(nwh * nww * nq * nk);
    for wi in 0..nwh {
        for wj in 0..nww {
            let label = |t: usize| {
                let p = t % area;
                labels[(wi * spec.wh + p / spec.ww) * w + wj * spec.ww + p % spec.ww]
            };
            for q in 0..nq {
                let lq = label(q);
                for k in 0..nk {
                    data.push(if label(k) == lq { 0.0 } else { MASK_VALUE });
                }
            }
        }
    }
    Tensor::new(vec![nwh * nww, nq, nk], data)
}

/// Self-attention mask for `m` contrasts sharing each window.
pub fn shift_mask(h: usize, w: usize, spec: &WindowSpec, m: usize) -> Result<Tensor> {
    shift_mask_cross(h, w, spec, m, m)
}

/// Size of a relative position bias table for this window.
pub fn rel_pos_table_len(spec: &WindowSpec) -> usize {
    (2 * spec.wh - 1) * (2 * spec.ww - 1)
}

/// Table row for every (query, key) pair inside a window with `m_q` query
/// contrasts and `m_k` key contrasts, flattened `[m_q·area, m_k·area]`.
/// Only the spatial offset matters, never the contrast.
pub fn relative_position_index(spec: &WindowSpec, m_q: usize, m_k: usize) -> Arc<[usize]> {
    relative_position_index_in(spec, spec.wh, spec.ww, m_q, m_k)
}

/// [`relative_position_index`] addressed into a table sized for a
/// `table_wh × table_ww` window, which must be at least as large as `spec`.
/// Windows clamped to a small grid reuse the full-size table this way.
pub fn relative_position_index_in(
    spec: &WindowSpec,
    table_wh: usize,
    table_ww: usize,
    m_q: usize,
    m_k: usize,
) -> Arc<[usize]> {
    assert!(spec.wh <= table_wh && spec.ww <= table_ww, "window exceeds bias table");
    let area = spec.area();
    let span_w = 2 * table_ww - 1;
    let mut idx = Vec::with_capacity(m_q * area * m_k * area);
    for q in 0..m_q * area {
        let (qr, qc) = ((q % area) / spec.ww, (q % area) % spec.ww);
        for k in 0..m_k * area {
            let (kr, kc) = ((k % area) / spec.ww, (k % area) % spec.ww);
            let dr = qr + table_wh - 1 - kr;
            let dc = qc + table_ww - 1 - kc;
            idx.push(dr * span_w + dc);
        }
    }
    Arc::from(idx)
}

/// `[m, c, h, w]` images → `[m, (h/4)(w/4), 16c]` patch tokens. Pure
/// re-indexing.
pub fn patch_partition(g: &mut Graph<'_>, img: Var) -> Result<Var> {
    let s = g.shape(img).to_vec();
    if s.len() != 4 {
        return Err(MmtError::shape(format!(
            "patch_partition expects [M, C, H, W], got {s:?}"
        )));
    }
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    let idx = patch_partition_index(m, c, h, w, PATCH)?;
    g.gather(img, Arc::from(idx), &[m, (h / PATCH) * (w / PATCH), PATCH * PATCH * c])
}

/// Inverse of [`patch_partition`].
pub fn patch_unpartition(g: &mut Graph<'_>, tokens: Var, c: usize, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let m = s[0];
    let idx = patch_partition_index(m, c, h, w, PATCH)?;
    if s != [m, (h / PATCH) * (w / PATCH), PATCH * PATCH * c] {
        return Err(MmtError::shape(format!(
            "patch_unpartition: tokens {s:?} do not match {c}x{h}x{w} images"
        )));
    }
    g.gather(tokens, Arc::from(invert(&idx)), &[m, c, h, w])
}

fn token_dims(g: &Graph<'_>, x: Var, h: usize, w: usize, what: &str) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] != h * w {
        return Err(MmtError::shape(format!(
            "{what}: expected [M, {}, d] tokens for a {h}x{w} grid, got {s:?}",
            h * w
        )));
    }
    Ok((s[0], s[2]))
}

/// `[m, h·w, d]` tokens → `[n_windows, m·area, d]` cross-contrast windows,
/// cyclically shifted first when `spec` has a shift.
pub fn window_partition(g: &mut Graph<'_>, x: Var, h: usize, w: usize, spec: &WindowSpec) -> Result<Var> {
    let (m, d) = token_dims(g, x, h, w, "window_partition")?;
    let idx = window_partition_index(m, h, w, spec)?;
    let flat = g.reshape(x, &[m * h * w, d])?;
    let rows = g.gather_rows(flat, Arc::from(idx))?;
    g.reshape(rows, &[spec.num_windows(h, w), m * spec.area(), d])
}

/// Inverse of [`window_partition`], undoing the shift as well.
pub fn window_reverse(
    g: &mut Graph<'_>,
    windows: Var,
    m: usize,
    h: usize,
    w: usize,
    spec: &WindowSpec,
) -> Result<Var> {
    let s = g.shape(windows).to_vec();
    if s.len() != 3 || s[0] != spec.num_windows(h, w) || s[1] != m * spec.area() {
        return Err(MmtError::shape(format!(
            "window_reverse: {s:?} is not a window layout of {m} contrasts on {h}x{w}"
        )));
    }
    let d = s[2];
    let idx = invert(&window_partition_index(m, h, w, spec)?);
    let flat = g.reshape(windows, &[m * h * w, d])?;
    let rows = g.gather_rows(flat, Arc::from(idx))?;
    g.reshape(rows, &[m, h * w, d])
}

/// Groups 2×2 neighbours (feature dim 4d) and projects to 2d.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Self {
        Self {
            reduction: Linear::new(init, name, 4 * d, 2 * d, false),
        }
    }

    /// `[m, h·w, d]` → `[m, (h/2)(w/2), 2d]`.
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let (m, d) = token_dims(g, x, h, w, "patch_merge")?;
        let grouped = merge_tokens(g, x, m, h, w, d, 2)?;
        self.reduction.forward(g, ps, grouped)
    }
}

/// The learned-free part of patch merging: `[m, h·w, d]` →
/// `[m, (h/f)(w/f), f²·d]`.
pub fn merge_tokens(
    g: &mut Graph<'_>,
    x: Var,
    m: usize,
    h: usize,
    w: usize,
    d: usize,
    f: usize,
) -> Result<Var> {
    let idx = merge_rows_index(m, h, w, f)?;
    let flat = g.reshape(x, &[m * h * w, d])?;
    let rows = g.gather_rows(flat, Arc::from(idx))?;
    g.reshape(rows, &[m, (h / f) * (w / f), f * f * d])
}

/// The learned-free part of patch expanding: `[m, h·w, f²·d']` →
/// `[m, (f·h)(f·w), d']`.
pub fn expand_tokens(g: &mut Graph<'_>, x: Var, h: usize, w: usize, f: usize) -> Result<Var> {
    let (m, d) = token_dims(g, x, h, w, "patch_expand")?;
    if d % (f * f) != 0 {
        return Err(MmtError::invalid(format!(
            "feature dim {d} is not divisible by {} for a {f}x expand",
            f * f
        )));
    }
    let out_d = d / (f * f);
    let flat = g.reshape(x, &[m * h * w * f * f, out_d])?;
    let rows = g.gather_rows(flat, Arc::from(expand_rows_index(m, h, w, f)))?;
    g.reshape(rows, &[m, h * w * f * f, out_d])
}

/// Linear projection followed by splitting each token into `f × f` finer
/// tokens. Factor 2 maps `d → 2d` then splits to `d/2`; factor 4 maps
/// `d → d` then splits to `d/16`.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub proj: Linear,
    pub factor: usize,
}

impl PatchExpand {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, factor: usize) -> Result<Self> {
        let d_out = match factor {
            2 if d.is_multiple_of(2) => 2 * d,
            4 if d.is_multiple_of(16) => d,
            2 | 4 => {
                return Err(MmtError::invalid(format!(
                    "feature dim {d} cannot be expanded by {factor}"
                )))
            }
            _ => {
                return Err(MmtError::invalid(format!(
                    "expand factor must be 2 or 4, got {factor}"
                )))
            }
        };
        Ok(Self {
            proj: Linear::new(init, name, d, d_out, false),
            factor,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.proj.d_out / (self.factor * self.factor)
    }

    /// `[m, h·w, d]` → `[m, (f·h)(f·w), d_out]`.
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        token_dims(g, x, h, w, "patch_expand")?;
        let y = self.proj.forward(g, ps, x)?;
        expand_tokens(g, y, h, w, self.factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_spec_validation() {
        assert!(WindowSpec::new(0, 4).is_err());
        assert!(WindowSpec::with_shift(4, 4, 4, 0).is_err());
        let s = WindowSpec::new(8, 8).unwrap().shifted();
        assert_eq!((s.shift_h, s.shift_w), (4, 4));
    }

    #[test]
    fn clamping_small_grids() {
        let s = WindowSpec::new(8, 8).unwrap().shifted();
        let c = s.clamp_to(2, 2);
        assert_eq!((c.wh, c.ww, c.shift_h, c.shift_w), (2, 2, 0, 0));
        let c = s.clamp_to(16, 4);
        assert_eq!((c.wh, c.ww, c.shift_h, c.shift_w), (8, 4, 4, 0));
        let c = WindowSpec::new(6, 5).unwrap().shifted().clamp_to(12, 10);
        assert_eq!((c.wh, c.ww, c.shift_h, c.shift_w), (6, 5, 3, 2));
    }

    #[test]
    fn partition_sizes() {
        assert_eq!(patch_partition_index(1, 1, 8, 8, 4).unwrap().len(), 64);
        let grid = PatchGrid::from_image(64, 64, 2, 6).unwrap();
        assert_eq!((grid.tokens(), grid.feat_dim), (256, 96));
        let err = PatchGrid::from_image(30, 32, 1, 1).unwrap_err().to_string();
        assert!(err.contains("height 30"), "{err}");
    }

    #[test]
    fn partition_token_layout() {
        // one contrast, one channel, 8×8 ramp
        let idx = patch_partition_index(1, 1, 8, 8, 4).unwrap();
        // token 1 is the top-right 4×4 block; its first feature is pixel (0, 4)
        assert_eq!(idx[16], 4);
        // token 2, feature 5 = pixel (4 + 1, 0 + 1)
        assert_eq!(idx[2 * 16 + 5], 5 * 8 + 1);
    }

    #[test]
    fn merge_then_expand_index_round_trip() {
        for (m, h, w) in [(1, 4, 4), (2, 2, 6), (3, 8, 2)] {
            let merge = merge_rows_index(m, h, w, 2).unwrap();
            let expand = expand_rows_index(m, h / 2, w / 2, 2);
            let composed: Vec<usize> = expand.iter().map(|&e| merge[e]).collect();
            assert_eq!(composed, (0..m * h * w).collect::<Vec<_>>());
        }
        assert!(merge_rows_index(1, 3, 4, 2).is_err());
    }

    #[test]
    fn window_counts() {
        let s = WindowSpec::new(8, 8).unwrap();
        let idx = window_partition_index(3, 8, 8, &s).unwrap();
        assert_eq!(idx.len(), 192);
        let s = WindowSpec::new(8, 8).unwrap();
        assert_eq!(s.num_windows(16, 16), 4);
        let idx = window_partition_index(1, 16, 16, &s).unwrap();
        assert_eq!(idx.len(), 4 * 64);
        assert!(window_partition_index(1, 12, 16, &s).is_err());
    }

    #[test]
    fn each_contrast_contributes_a_full_window() {
        let s = WindowSpec::with_shift(2, 2, 1, 1).unwrap();
        let (m, h, w) = (3, 4, 6);
        let idx = window_partition_index(m, h, w, &s).unwrap();
        let per_window = m * s.area();
        for win in idx.chunks(per_window) {
            for mm in 0..m {
                let count = win.iter().filter(|&&r| r / (h * w) == mm).count();
                assert_eq!(count, s.area());
            }
        }
    }

    #[test]
    fn zero_shift_mask_is_all_zero() {
        let s = WindowSpec::new(4, 4).unwrap();
        let mask = shift_mask(8, 8, &s, 2).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rel_pos_index_ignores_contrast() {
        let s = WindowSpec::new(3, 2).unwrap();
        let idx = relative_position_index(&s, 2, 2);
        let n = 2 * s.area();
        for q in 0..n {
            for k in 0..n {
                let same = idx[(q % 6) * n + (k % 6)];
                assert_eq!(idx[q * n + k], same);
                assert!(idx[q * n + k] < rel_pos_table_len(&s));
            }
        }
        // a token compared with itself sits at the table centre
        assert_eq!(idx[0], (2 * 2 - 1) * 2 + 1);
    }

    #[test]
    fn clamped_window_indexes_into_full_table() {
        let small = WindowSpec::new(2, 2).unwrap();
        let idx = relative_position_index_in(&small, 4, 4, 1, 1);
        let centre = 3 * 7 + 3;
        assert_eq!(idx[0], centre);
        // query (0,0), key (1,1): offset (-1,-1)
        assert_eq!(idx[3], centre - 7 - 1);
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn window_round_trip(
            m in 1usize..4,
            nh in 1usize..4,
            nw in 1usize..4,
            wh in 1usize..4,
            ww in 1usize..4,
            sh in 0usize..4,
            sw in 0usize..4,
            d in 1usize..4,
        ) {
            let spec = WindowSpec::with_shift(wh, ww, sh % wh, sw % ww).unwrap();
            let (h, w) = (nh * wh, nw * ww);
            let x = ramp(&[m, h * w, d]);
            let mut g = Graph::no_grad();
            let xv = g.constant(x.clone());
            let win = window_partition(&mut g, xv, h, w, &spec).unwrap();
            proptest::prop_assert_eq!(g.shape(win), &[nh * nw, m * wh * ww, d]);
            let back = window_reverse(&mut g, win, m, h, w, &spec).unwrap();
            proptest::prop_assert_eq!(g.value(back), &x);
        }

        #[test]
        fn merge_expand_and_patch_round_trip(
            m in 1usize..4,
            hh in 1usize..4,
            ww in 1usize..4,
            d in 1usize..5,
            f in 1usize..3,
        ) {
            let f = 2 * f;
            let (h, w) = (hh * f, ww * f);
            let x = ramp(&[m, h * w, d]);
            let mut g = Graph::no_grad();
            let xv = g.constant(x.clone());
            let merged = merge_tokens(&mut g, xv, m, h, w, d, f).unwrap();
            let back = expand_tokens(&mut g, merged, hh, ww, f).unwrap();
            proptest::prop_assert_eq!(g.value(back), &x);

            let img = ramp(&[m, d, 4 * hh, 4 * ww]);
            let iv = g.constant(img.clone());
            let tokens = patch_partition(&mut g, iv).unwrap();
            let back = patch_unpartition(&mut g, tokens, d, 4 * hh, 4 * ww).unwrap();
            proptest::prop_assert_eq!(g.value(back), &img);
        }
    }

    #[test]
    fn shifted_window_gathers_rolled_tokens() {
        let spec = WindowSpec::with_shift(2, 2, 1, 1).unwrap();
        let (h, w) = (4, 4);
        let x = ramp(&[1, 16, 1]);
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let win = window_partition(&mut g, xv, h, w, &spec).unwrap();
        // first window starts at original (1, 1)
        assert_eq!(g.value(win).data()[0], x.data()[5]);
        // last window's last token wraps to original (0, 0)
        assert_eq!(g.value(win).data()[15], x.data()[0]);
    }

    #[test]
    fn expand_layer_shapes() {
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let e2 = PatchExpand::new(&mut init, "e2", 32, 2).unwrap();
        let e4 = PatchExpand::new(&mut init, "e4", 32, 4).unwrap();
        let pm = PatchMerge::new(&mut init, "pm", 16);
        assert!(PatchExpand::new(&mut init, "bad", 24, 4).is_err());
        assert_eq!((e2.out_dim(), e4.out_dim()), (16, 2));
        let mut g = Graph::no_grad();
        let x = g.constant(ramp(&[2, 6, 32]));
        let y = e2.forward(&mut g, &store, x, 2, 3).unwrap();
        assert_eq!(g.shape(y), &[2, 24, 16]);
        let y = e4.forward(&mut g, &store, x, 2, 3).unwrap();
        assert_eq!(g.shape(y), &[2, 96, 2]);
        let x = g.constant(ramp(&[2, 16, 16]));
        let y = pm.forward(&mut g, &store, x, 4, 4).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 32]);
    }
}
