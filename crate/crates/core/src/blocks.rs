//! Transformer blocks, the per-contrast CNN heads, and the learned contrast
//! encodings and queries.

use std::sync::Arc;

use crate::attention::{mw_cross_mha, mw_mha, MhaParams, RelPosBias};
use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{MmtError, Result};
use crate::geometry::WindowSpec;
use crate::nn::{Conv2d, Init, LayerNorm, Linear};

/// Hidden width of the MLP relative to the token width.
pub const MLP_RATIO: usize = 4;

/// Kernel size of the image encoder and decoder convolutions.
pub const CNN_KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        init.scoped(name, |init| Self {
            fc1: Linear::new(init, "fc1", dim, MLP_RATIO * dim, true),
            fc2: Linear::new(init, "fc2", MLP_RATIO * dim, dim, true),
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }
}

/// The window actually used on an `h × w` grid: `base` clamped to the grid,
/// shifted by half a window for alternate blocks.
pub fn block_window(base: &WindowSpec, h: usize, w: usize, shifted: bool) -> WindowSpec {
    let s = base.unshifted().clamp_to(h, w);
    if shifted {
        s.shifted().clamp_to(h, w)
    } else {
        s
    }
}

/// One pre-norm windowed self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MhaParams,
    pub bias: RelPosBias,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    pub window: WindowSpec,
    pub shifted: bool,
}

impl EncoderBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        window: WindowSpec,
        shifted: bool,
    ) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                ln_attn: LayerNorm::new(init, "ln_attn", dim),
                attn: MhaParams::new(init, "attn", dim, heads)?,
                bias: RelPosBias::new(init, "rel_bias", &window, heads),
                ln_mlp: LayerNorm::new(init, "ln_mlp", dim),
                mlp: Mlp::new(init, "mlp", dim),
                window: window.unshifted(),
                shifted,
            })
        })
    }

    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        z: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let spec = block_window(&self.window, h, w, self.shifted);
        let n = self.ln_attn.forward(g, ps, z)?;
        let (a, _) = mw_mha(g, ps, n, h, w, &self.attn, &self.bias, &spec, false)?;
        let z = g.add(a, z)?;
        let n = self.ln_mlp.forward(g, ps, z)?;
        let m = self.mlp.forward(g, ps, n)?;
        g.add(m, z)
    }
}

/// A regular-window block followed by a shifted-window block.
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub regular: EncoderBlock,
    pub shifted: EncoderBlock,
}

impl EncoderPair {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, window: WindowSpec) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                regular: EncoderBlock::new(init, "0", dim, heads, window, false)?,
                shifted: EncoderBlock::new(init, "1", dim, heads, window, true)?,
            })
        })
    }

    /// `[m, h·w, d]` → `[m, h·w, d]`.
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        z: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let z = self.regular.forward(g, ps, z, h, w)?;
        self.shifted.forward(g, ps, z, h, w)
    }
}

/// Pre-norm decoder block: self-attention on the target tokens, then
/// cross-attention into the encoder features, then the MLP. The encoder
/// features get their own layer norm before serving as keys and values.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MhaParams,
    pub self_bias: RelPosBias,
    pub ln_query: LayerNorm,
    pub ln_memory: LayerNorm,
    pub cross_attn: MhaParams,
    pub cross_bias: RelPosBias,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    pub window: WindowSpec,
    pub shifted: bool,
}

impl DecoderBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        window: WindowSpec,
        shifted: bool,
    ) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                ln_self: LayerNorm::new(init, "ln_self", dim),
                self_attn: MhaParams::new(init, "self_attn", dim, heads)?,
                self_bias: RelPosBias::new(init, "self_rel_bias", &window, heads),
                ln_query: LayerNorm::new(init, "ln_query", dim),
                ln_memory: LayerNorm::new(init, "ln_memory", dim),
                cross_attn: MhaParams::new(init, "cross_attn", dim, heads)?,
                cross_bias: RelPosBias::new(init, "cross_rel_bias", &window, heads),
                ln_mlp: LayerNorm::new(init, "ln_mlp", dim),
                mlp: Mlp::new(init, "mlp", dim),
                window: window.unshifted(),
                shifted,
            })
        })
    }

    /// `y` `[1, h·w, d]` attends to `f` `[m, h·w, d]`. Returns the updated
    /// `y` and, with `capture`, the cross weights `[n_windows, area,
    /// m·area]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        y: Var,
        f: Var,
        h: usize,
        w: usize,
        capture: bool,
    ) -> Result<(Var, Option<Tensor>)> {
        let (ys, fs) = (g.shape(y).to_vec(), g.shape(f).to_vec());
        if ys.len() != 3 || fs.len() != 3 || ys[0] != 1 || ys[1..] != fs[1..] {
            return Err(MmtError::shape(format!(
                "decoder block needs [1, L, d] targets and [M, L, d] features, got {ys:?} and {fs:?}"
            )));
        }
        let spec = block_window(&self.window, h, w, self.shifted);
        let n = self.ln_self.forward(g, ps, y)?;
        let (a, _) = mw_mha(g, ps, n, h, w, &self.self_attn, &self.self_bias, &spec, false)?;
        let y = g.add(a, y)?;
        let q = self.ln_query.forward(g, ps, y)?;
        let mem = self.ln_memory.forward(g, ps, f)?;
        let (c, weights) = mw_cross_mha(g, ps, q, mem, h, w, &self.cross_attn, &self.cross_bias, &spec, capture)?;
        let y = g.add(c, y)?;
        let n = self.ln_mlp.forward(g, ps, y)?;
        let m = self.mlp.forward(g, ps, n)?;
        Ok((g.add(m, y)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderPair {
    pub regular: DecoderBlock,
    pub shifted: DecoderBlock,
}

impl DecoderPair {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, window: WindowSpec) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                regular: DecoderBlock::new(init, "0", dim, heads, window, false)?,
                shifted: DecoderBlock::new(init, "1", dim, heads, window, true)?,
            })
        })
    }

    /// Returns the updated targets and the cross weights of both blocks
    /// (empty without `capture`).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        y: Var,
        f: Var,
        h: usize,
        w: usize,
        capture: bool,
    ) -> Result<(Var, Vec<Tensor>)> {
        let (y, w0) = self.regular.forward(g, ps, y, f, h, w, capture)?;
        let (y, w1) = self.shifted.forward(g, ps, y, f, h, w, capture)?;
        Ok((y, w0.into_iter().chain(w1).collect()))
    }
}

/// `conv → ReLU → conv` with same padding.
#[derive(Clone, Debug)]
pub struct ConvHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ConvHead {
    fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_mid: usize, c_out: usize) -> Self {
        let pad = CNN_KERNEL / 2;
        init.scoped(name, |init| Self {
            conv1: Conv2d::new(init, "conv1", c_in, c_mid, CNN_KERNEL, 1, pad),
            conv2: Conv2d::new(init, "conv2", c_mid, c_out, CNN_KERNEL, 1, pad),
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, ps, x)?;
        let h = g.relu(h);
        self.conv2.forward(g, ps, h)
    }
}

/// One image encoder (1 → C channels) and one image decoder (C → 1) per
/// contrast.
#[derive(Clone, Debug)]
pub struct ImageCodecs {
    pub encoders: Vec<ConvHead>,
    pub decoders: Vec<ConvHead>,
    pub channels: usize,
}

impl ImageCodecs {
    pub fn new(init: &mut Init<'_>, n_contrasts: usize, channels: usize) -> Self {
        let encoders = (0..n_contrasts)
            .map(|p| ConvHead::new(init, &format!("image_enc.{p}"), 1, channels, channels))
            .collect();
        let decoders = (0..n_contrasts)
            .map(|p| ConvHead::new(init, &format!("image_dec.{p}"), channels, channels, 1))
            .collect();
        Self {
            encoders,
            decoders,
            channels,
        }
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.encoders.len() {
            return Err(MmtError::invalid(format!(
                "contrast index {id} out of range for {} contrasts",
                self.encoders.len()
            )));
        }
        Ok(())
    }

    /// `[n, 1, H, W]` → `[n, C, H, W]`.
    pub fn encode<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var, id: usize) -> Result<Var> {
        self.check_id(id)?;
        self.encoders[id].forward(g, ps, x)
    }

    /// `[n, C, H, W]` → `[n, 1, H, W]`.
    pub fn decode<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, feat: Var, id: usize) -> Result<Var> {
        self.check_id(id)?;
        self.decoders[id].forward(g, ps, feat)
    }
}

/// Per-contrast encodings added to the finest tokens, and per-contrast
/// queries that seed the decoder.
#[derive(Clone, Debug)]
pub struct ContrastEmbedding {
    pub encodings: ParamId,
    pub queries: ParamId,
    pub n_contrasts: usize,
}

impl ContrastEmbedding {
    pub fn new(init: &mut Init<'_>, n_contrasts: usize, token_dim: usize, query_dim: usize) -> Self {
        Self {
            encodings: init.normal("contrast_encodings", &[n_contrasts, token_dim], 0.02),
            queries: init.normal("contrast_queries", &[n_contrasts, query_dim], 0.02),
            n_contrasts,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.n_contrasts) {
            Some(bad) => Err(MmtError::invalid(format!(
                "contrast index {bad} out of range for {} contrasts",
                self.n_contrasts
            ))),
            None => Ok(()),
        }
    }

    /// Adds encoding `ids[i]` to every token of `tokens[i]` (`[m, L, d]`).
    pub fn add_encodings<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParamStore,
        tokens: Var,
        ids: &[usize],
    ) -> Result<Var> {
        self.check_ids(ids)?;
        let table = g.param(ps, self.encodings);
        let rows = g.gather_rows(table, Arc::from(ids))?;
        let d = g.shape(rows)[1];
        let rows = g.reshape(rows, &[ids.len(), 1, d])?;
        g.add(tokens, rows)
    }

    /// Query `id` repeated over `len` tokens: `[1, len, d_q]`.
    pub fn query_map<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, id: usize, len: usize) -> Result<Var> {
        self.check_ids(&[id])?;
        let table = g.param(ps, self.queries);
        let rows = g.gather_rows(table, Arc::from(vec![id; len]))?;
        let d = g.shape(rows)[1];
        g.reshape(rows, &[1, len, d])
    }
}

/// Zeroes every parameter whose name starts with `prefix`, except layer
/// norm gains, which are set to one. Every residual block becomes the
/// identity map under this probe.
pub fn zero_probe(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.name(id).starts_with(prefix) {
            continue;
        }
        let fill = if store.name(id).ends_with("gamma") { 1.0 } else { 0.0 };
        store.get_mut(id).data_mut().fill(fill);
    }
}
