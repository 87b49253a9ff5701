//! The full generator: per-contrast CNN heads around a U-shaped windowed
//! transformer encoder and a query-driven multi-scale decoder.
//!
//! Scale `s` (0 = finest) works on a token grid of `(H/4)/2^s` with feature
//! width `16·C·2^s`. The encoder's up path emits one feature map per scale;
//! the decoder consumes them coarse to fine.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::head_count;
use crate::blocks::{block_window, ContrastEmbedding, DecoderPair, EncoderPair, ImageCodecs, MLP_RATIO};
use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::{MmtError, Result};
use crate::eval::interp::{AttentionLayer, AttentionRecord};
use crate::geometry::{self, PatchExpand, PatchMerge, WindowSpec, PATCH};
use crate::nn::{Init, Linear};

/// Which contrasts are given and which are to be synthesised. Indices are
/// zero-based and sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContrastScenario {
    pub available: Vec<usize>,
    pub missing: Vec<usize>,
    pub n_contrasts: usize,
}

impl ContrastScenario {
    pub fn new(n_contrasts: usize, available: &[usize]) -> Result<Self> {
        let mut avail = available.to_vec();
        avail.sort_unstable();
        avail.dedup();
        if avail.len() != available.len() {
            return Err(MmtError::invalid("available contrasts contain duplicates"));
        }
        if let Some(&bad) = avail.iter().find(|&&a| a >= n_contrasts) {
            return Err(MmtError::invalid(format!(
                "contrast index {bad} out of range for {n_contrasts} contrasts"
            )));
        }
        if avail.is_empty() || avail.len() >= n_contrasts {
            return Err(MmtError::invalid(format!(
                "need between 1 and {} available contrasts, got {}",
                n_contrasts.saturating_sub(1),
                avail.len()
            )));
        }
        let missing = (0..n_contrasts).filter(|c| !avail.contains(c)).collect();
        Ok(Self {
            available: avail,
            missing,
            n_contrasts,
        })
    }

    /// Scenario whose availability bits (contrast 0 = most significant)
    /// spell `bits`.
    pub fn from_bits(n_contrasts: usize, bits: u32) -> Result<Self> {
        let avail: Vec<usize> = (0..n_contrasts)
            .filter(|&c| bits >> (n_contrasts - 1 - c) & 1 == 1)
            .collect();
        Self::new(n_contrasts, &avail)
    }

    pub fn bits(&self) -> u32 {
        self.available
            .iter()
            .fold(0, |acc, &c| acc | 1 << (self.n_contrasts - 1 - c))
    }

    /// One character per contrast, `1` when available.
    pub fn bitstring(&self) -> String {
        (0..self.n_contrasts)
            .map(|c| if self.available.contains(&c) { '1' } else { '0' })
            .collect()
    }

    /// All `2^P − 2` scenarios, ordered by number of inputs then by
    /// ascending bit value.
    pub fn all(n_contrasts: usize) -> Vec<Self> {
        let mut v: Vec<Self> = (1..(1u32 << n_contrasts) - 1)
            .map(|b| Self::from_bits(n_contrasts, b).expect("proper nonempty subset"))
            .collect();
        v.sort_by_key(|s| (s.available.len(), s.bits()));
        v
    }

    /// The `P` scenarios with exactly one missing contrast.
    pub fn single_missing(n_contrasts: usize) -> Vec<Self> {
        Self::all(n_contrasts)
            .into_iter()
            .filter(|s| s.missing.len() == 1)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MmtConfig {
    /// `P`, the number of contrasts the model knows.
    pub n_contrasts: usize,
    /// `C`, channels of the CNN image features.
    pub channels: usize,
    /// Window at every scale before clamping to the grid.
    pub window: (usize, usize),
    /// `S`, the number of scales.
    pub depth: usize,
}

impl Default for MmtConfig {
    fn default() -> Self {
        Self {
            n_contrasts: 3,
            channels: 6,
            window: (8, 8),
            depth: 4,
        }
    }
}

impl MmtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_contrasts < 2 {
            return Err(MmtError::invalid(format!(
                "need at least 2 contrasts, got {}",
                self.n_contrasts
            )));
        }
        if self.channels == 0 || self.depth == 0 {
            return Err(MmtError::invalid("channels and depth must be positive"));
        }
        WindowSpec::new(self.window.0, self.window.1)?;
        Ok(())
    }

    /// Token width at scale `s`.
    pub fn dim(&self, s: usize) -> usize {
        (PATCH * PATCH * self.channels) << s
    }

    pub fn heads(&self, s: usize) -> usize {
        head_count(self.dim(s))
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec::new(self.window.0, self.window.1).expect("validated window")
    }

    /// Smallest image side the depth allows; sizes must be multiples of it.
    pub fn size_multiple(&self) -> usize {
        PATCH << (self.depth - 1)
    }

    /// Token grids per scale, finest first.
    pub fn grids(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|s| ((h / PATCH) >> s, (w / PATCH) >> s))
            .collect()
    }

    /// Checks that an `h × w` image fits every scale's window layout.
    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(MmtError::invalid(format!(
                "image size {h}x{w} must be a positive multiple of {m} for depth {}",
                self.depth
            )));
        }
        for (gh, gw) in self.grids(h, w) {
            block_window(&self.window_spec(), gh, gw, false).check_grid(gh, gw)?;
        }
        Ok(())
    }

    /// Header entries identifying the architecture.
    pub fn to_header(&self) -> BTreeMap<String, String> {
        let heads: Vec<String> = (0..self.depth).map(|s| self.heads(s).to_string()).collect();
        BTreeMap::from([
            ("contrasts".to_string(), self.n_contrasts.to_string()),
            ("channels".to_string(), self.channels.to_string()),
            ("window".to_string(), format!("{}x{}", self.window.0, self.window.1)),
            ("depth".to_string(), self.depth.to_string()),
            ("heads".to_string(), heads.join(",")),
        ])
    }

    pub fn from_header(h: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            h.get(k)
                .ok_or_else(|| MmtError::invalid(format!("checkpoint header lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| MmtError::invalid(format!("checkpoint header {k} is not a number")))
        };
        let window = get("window")?;
        let (a, b) = window
            .split_once('x')
            .ok_or_else(|| MmtError::invalid(format!("bad window {window:?}")))?;
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| MmtError::invalid(format!("bad window {window:?}")))
        };
        let cfg = Self {
            n_contrasts: num("contrasts")?,
            channels: num("channels")?,
            window: (parse(a)?, parse(b)?),
            depth: num("depth")?,
        };
        cfg.validate()?;
        if cfg.to_header().get("heads") != h.get("heads") {
            return Err(MmtError::invalid("checkpoint head counts do not match this build"));
        }
        Ok(cfg)
    }

    /// Closed-form number of learnable scalars.
    pub fn expected_param_count(&self) -> usize {
        let (p, c, s_n) = (self.n_contrasts, self.channels, self.depth);
        let table = (2 * self.window.0 - 1) * (2 * self.window.1 - 1);
        let linear = |i: usize, o: usize, bias: bool| i * o + if bias { o } else { 0 };
        let ln = |d: usize| 2 * d;
        let mha = |d: usize| 4 * linear(d, d, true);
        let mlp = |d: usize| linear(d, MLP_RATIO * d, true) + linear(MLP_RATIO * d, d, true);
        let enc_block = |s: usize| {
            let d = self.dim(s);
            2 * ln(d) + mha(d) + table * self.heads(s) + mlp(d)
        };
        let dec_block = |s: usize| {
            let d = self.dim(s);
            4 * ln(d) + 2 * mha(d) + 2 * table * self.heads(s) + mlp(d)
        };
        let conv = |ci: usize, co: usize| co * ci * 9 + co;
        let mut n = p * (conv(1, c) + conv(c, c)) + p * (conv(c, c) + conv(c, 1));
        n += p * self.dim(0) + p * self.dim(s_n - 1);
        for s in 0..s_n - 1 {
            // down pair + merge, up expand + fuse + pair, decoder pair + expand
            n += 2 * enc_block(s) + linear(4 * self.dim(s), self.dim(s + 1), false);
            n += linear(self.dim(s + 1), 2 * self.dim(s + 1), false);
            n += linear(2 * self.dim(s), self.dim(s), true) + 2 * enc_block(s);
            n += linear(self.dim(s + 1), 2 * self.dim(s + 1), false);
        }
        n += 2 * enc_block(s_n - 1);
        n += (0..s_n).map(|s| 2 * dec_block(s)).sum::<usize>();
        n += linear(self.dim(0), self.dim(0), false);
        n
    }
}

/// Encoder outputs per scale, coarsest first. `levels[k]` lives on grid
/// `grids[k]` with shape `[m, h·w, d]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub grids: Vec<(usize, usize)>,
    pub available: Vec<usize>,
    pub image_size: (usize, usize),
}

#[derive(Clone, Debug)]
struct Modules {
    codecs: ImageCodecs,
    embedding: ContrastEmbedding,
    down: Vec<EncoderPair>,
    merge: Vec<PatchMerge>,
    bottleneck: EncoderPair,
    up_expand: Vec<PatchExpand>,
    up_fuse: Vec<Linear>,
    up: Vec<EncoderPair>,
    decoder: Vec<DecoderPair>,
    dec_expand: Vec<PatchExpand>,
    final_expand: PatchExpand,
}

/// The generator network and its parameters.
#[derive(Clone, Debug)]
pub struct Mmt {
    pub config: MmtConfig,
    pub params: ParamStore,
    modules: Modules,
}

impl Mmt {
    /// Freshly initialised model; the same seed gives identical weights.
    pub fn new(config: MmtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let modules = Self::build(&config, &mut init)?;
        Ok(Self {
            config,
            params,
            modules,
        })
    }

    fn build(cfg: &MmtConfig, init: &mut Init<'_>) -> Result<Modules> {
        let s_n = cfg.depth;
        let win = cfg.window_spec();
        let codecs = ImageCodecs::new(init, cfg.n_contrasts, cfg.channels);
        let embedding = ContrastEmbedding::new(init, cfg.n_contrasts, cfg.dim(0), cfg.dim(s_n - 1));
        let mut down = Vec::new();
        let mut merge = Vec::new();
        for s in 0..s_n - 1 {
            down.push(EncoderPair::new(init, &format!("down.{s}"), cfg.dim(s), cfg.heads(s), win)?);
            merge.push(PatchMerge::new(init, &format!("merge.{s}"), cfg.dim(s)));
        }
        let bottleneck = EncoderPair::new(init, "bottleneck", cfg.dim(s_n - 1), cfg.heads(s_n - 1), win)?;
        let mut up_expand = Vec::new();
        let mut up_fuse = Vec::new();
        let mut up = Vec::new();
        for s in (0..s_n - 1).rev() {
            up_expand.push(PatchExpand::new(init, &format!("up_expand.{s}"), cfg.dim(s + 1), 2)?);
            up_fuse.push(Linear::new(init, &format!("up_fuse.{s}"), 2 * cfg.dim(s), cfg.dim(s), true));
            up.push(EncoderPair::new(init, &format!("up.{s}"), cfg.dim(s), cfg.heads(s), win)?);
        }
        let mut decoder = Vec::new();
        let mut dec_expand = Vec::new();
        for s in (0..s_n).rev() {
            decoder.push(DecoderPair::new(init, &format!("dec.{s}"), cfg.dim(s), cfg.heads(s), win)?);
            if s > 0 {
                dec_expand.push(PatchExpand::new(init, &format!("dec_expand.{s}"), cfg.dim(s), 2)?);
            }
        }
        let final_expand = PatchExpand::new(init, "final_expand", cfg.dim(0), PATCH)?;
        Ok(Modules {
            codecs,
            embedding,
            down,
            merge,
            bottleneck,
            up_expand,
            up_fuse,
            up,
            decoder,
            dec_expand,
            final_expand,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Runs the encoder on `x` `[m, 1, H, W]`, whose entry `i` is contrast
    /// `available[i]`.
    pub fn encode<'p>(&'p self, g: &mut Graph<'p>, x: Var, available: &[usize]) -> Result<FeaturePyramid> {
        let cfg = &self.config;
        let md = &self.modules;
        let ps = &self.params;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(MmtError::shape(format!("encoder input must be [M, 1, H, W], got {s:?}")));
        }
        if available.is_empty() {
            return Err(MmtError::invalid("no available contrasts"));
        }
        if s[0] != available.len() {
            return Err(MmtError::shape(format!(
                "{} images for {} available contrasts",
                s[0],
                available.len()
            )));
        }
        let (m, ih, iw) = (s[0], s[2], s[3]);
        cfg.check_image(ih, iw)?;
        let mut feats = Vec::with_capacity(m);
        for (i, &id) in available.iter().enumerate() {
            let xi = g.narrow(x, 0, i, 1)?;
            feats.push(md.codecs.encode(g, ps, xi, id)?);
        }
        let feats = g.concat(&feats, 0)?;
        let tokens = geometry::patch_partition(g, feats)?;
        let mut z = md.embedding.add_encodings(g, ps, tokens, available)?;

        let grids = cfg.grids(ih, iw);
        let mut skips = Vec::new();
        for sc in 0..cfg.depth - 1 {
            let (h, w) = grids[sc];
            z = md.down[sc].forward(g, ps, z, h, w)?;
            skips.push(z);
            z = md.merge[sc].forward(g, ps, z, h, w)?;
        }
        let (h, w) = grids[cfg.depth - 1];
        z = md.bottleneck.forward(g, ps, z, h, w)?;
        let mut levels = vec![z];
        for (k, sc) in (0..cfg.depth - 1).rev().enumerate() {
            let (ch, cw) = grids[sc + 1];
            let (h, w) = grids[sc];
            let up = md.up_expand[k].forward(g, ps, z, ch, cw)?;
            let cat = g.concat(&[up, skips[sc]], 2)?;
            z = md.up_fuse[k].forward(g, ps, cat)?;
            z = md.up[k].forward(g, ps, z, h, w)?;
            levels.push(z);
        }
        Ok(FeaturePyramid {
            levels,
            grids: grids.into_iter().rev().collect(),
            available: available.to_vec(),
            image_size: (ih, iw),
        })
    }

    /// Synthesises contrast `target` (zero-based) as `[1, 1, H, W]`. The
    /// target may be one of the inputs, which reconstructs it. With
    /// `capture`, the record holds every decoder block's cross weights.
    pub fn decode<'p>(
        &'p self,
        g: &mut Graph<'p>,
        pyramid: &FeaturePyramid,
        target: usize,
        capture: bool,
    ) -> Result<(Var, AttentionRecord)> {
        let cfg = &self.config;
        let md = &self.modules;
        let ps = &self.params;
        if target >= cfg.n_contrasts {
            return Err(MmtError::invalid(format!(
                "target contrast {target} out of range for {} contrasts",
                cfg.n_contrasts
            )));
        }
        let mut record = AttentionRecord {
            available: pyramid.available.clone(),
            target,
            layers: Vec::new(),
        };
        let (h0, w0) = pyramid.grids[0];
        let mut y = md.embedding.query_map(g, ps, target, h0 * w0)?;
        for (k, &f) in pyramid.levels.iter().enumerate() {
            let (h, w) = pyramid.grids[k];
            let (next, weights) = md.decoder[k].forward(g, ps, y, f, h, w, capture)?;
            y = next;
            for (block, wt) in weights.into_iter().enumerate() {
                record.layers.push(AttentionLayer {
                    level: k,
                    block,
                    grid: (h, w),
                    window: block_window(&cfg.window_spec(), h, w, block == 1),
                    weights: wt,
                });
            }
            if k + 1 < pyramid.levels.len() {
                y = md.dec_expand[k].forward(g, ps, y, h, w)?;
            }
        }
        let (hf, wf) = *pyramid.grids.last().expect("at least one scale");
        let pix = md.final_expand.forward(g, ps, y, hf, wf)?;
        let (ih, iw) = pyramid.image_size;
        let pix = g.reshape(pix, &[1, ih, iw, cfg.channels])?;
        let feat = g.permute(pix, &[0, 3, 1, 2])?;
        let img = md.codecs.decode(g, ps, feat, target)?;
        Ok((img, record))
    }

    /// Encodes once and decodes every target, in order.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        x: Var,
        available: &[usize],
        targets: &[usize],
    ) -> Result<Vec<Var>> {
        let pyr = self.encode(g, x, available)?;
        targets
            .iter()
            .map(|&t| self.decode(g, &pyr, t, false).map(|(img, _)| img))
            .collect()
    }
}
