//! L1 synthesis and reconstruction losses, the least-squares adversarial
//! objective with smoothed labels, and the per-contrast patch
//! discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{MmtError, Result};
use crate::nn::{Conv2d, Init};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 5.0,
            lambda_s: 20.0,
            lambda_adv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_s", self.lambda_s),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MmtError::invalid(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }

    /// `λ_r·L_r + λ_s·L_s + λ_adv·L_adv` on plain numbers.
    pub fn combine(&self, l_r: f64, l_s: f64, l_adv: f64) -> f64 {
        self.lambda_r * l_r + self.lambda_s * l_s + self.lambda_adv * l_adv
    }
}

/// Mean over the list of each pair's mean absolute difference.
fn mean_l1(g: &mut Graph<'_>, outputs: &[Var], truths: &[Var], what: &str) -> Result<Var> {
    if outputs.len() != truths.len() {
        return Err(MmtError::shape(format!(
            "{what}: {} outputs but {} references",
            outputs.len(),
            truths.len()
        )));
    }
    if outputs.is_empty() {
        return Err(MmtError::invalid(format!("{what}: no images")));
    }
    let mut total = None;
    for (&o, &t) in outputs.iter().zip(truths) {
        let l = g.l1_loss(o, t)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / outputs.len() as f64))
}

/// Synthesis loss over the missing contrasts.
pub fn synthesis_loss(g: &mut Graph<'_>, outputs: &[Var], truths: &[Var]) -> Result<Var> {
    mean_l1(g, outputs, truths, "synthesis loss")
}

/// Reconstruction loss over the available contrasts.
pub fn reconstruction_loss(g: &mut Graph<'_>, recons: &[Var], inputs: &[Var]) -> Result<Var> {
    mean_l1(g, recons, inputs, "reconstruction loss")
}

/// Smoothed LSGAN targets, drawn once per batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Labels {
    pub fake: f64,
    pub real: f64,
}

impl Labels {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            fake: rng.random_range(0.0..=0.1),
            real: rng.random_range(0.9..=1.0),
        }
    }
}

/// Mean over maps of `mean((map − target)²)`.
fn mean_sq_to(g: &mut Graph<'_>, maps: &[Var], target: f64) -> Result<Var> {
    if maps.is_empty() {
        return Err(MmtError::invalid("adversarial loss over no images"));
    }
    let mut total = None;
    for &m in maps {
        let t = g.constant(Tensor::full(g.shape(m).to_vec(), target));
        let l = g.mse_loss(m, t)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / maps.len() as f64))
}

/// Discriminator objective from score maps of fakes and reals.
pub fn discriminator_loss(g: &mut Graph<'_>, d_fake: &[Var], d_real: &[Var], labels: Labels) -> Result<Var> {
    if d_fake.len() != d_real.len() {
        return Err(MmtError::shape("discriminator loss needs one real per fake"));
    }
    let f = mean_sq_to(g, d_fake, labels.fake)?;
    let r = mean_sq_to(g, d_real, labels.real)?;
    g.add(f, r)
}

/// Generator's adversarial term: fakes pushed toward the real label.
pub fn generator_adv_loss(g: &mut Graph<'_>, d_fake: &[Var], labels: Labels) -> Result<Var> {
    mean_sq_to(g, d_fake, labels.real)
}

/// Both adversarial terms on one graph: `(L_D, L_adv)`.
pub fn adversarial_losses(
    g: &mut Graph<'_>,
    d_fake: &[Var],
    d_real: &[Var],
    labels: Labels,
) -> Result<(Var, Var)> {
    Ok((
        discriminator_loss(g, d_fake, d_real, labels)?,
        generator_adv_loss(g, d_fake, labels)?,
    ))
}

/// Weighted generator objective. `l_adv` is `None` when adversarial
/// training is off.
pub fn generator_loss(
    g: &mut Graph<'_>,
    l_r: Option<Var>,
    l_s: Var,
    l_adv: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = g.scale(l_s, w.lambda_s);
    if let Some(l) = l_r {
        let t = g.scale(l, w.lambda_r);
        total = g.add(total, t)?;
    }
    if let Some(l) = l_adv {
        let t = g.scale(l, w.lambda_adv);
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Channels of the four discriminator convolutions.
pub const DISC_CHANNELS: [usize; 5] = [1, 8, 16, 32, 1];

/// Slope of the discriminator's leaky ReLUs.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Four stride-2 convolutions; the score map is 1/16 of the input.
#[derive(Clone, Debug)]
struct PatchDisc {
    convs: Vec<Conv2d>,
}

/// One patch discriminator per contrast, with its own parameter store.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    nets: Vec<PatchDisc>,
}

impl Discriminator {
    pub fn new(n_contrasts: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let nets = (0..n_contrasts)
            .map(|p| PatchDisc {
                convs: (0..4)
                    .map(|l| {
                        Conv2d::new(
                            &mut init,
                            &format!("disc.{p}.conv{l}"),
                            DISC_CHANNELS[l],
                            DISC_CHANNELS[l + 1],
                            4,
                            2,
                            1,
                        )
                    })
                    .collect(),
            })
            .collect();
        Self { params, nets }
    }

    pub fn n_contrasts(&self) -> usize {
        self.nets.len()
    }

    /// Score map `[n, 1, H/16, W/16]` for images `[n, 1, H, W]` of contrast
    /// `id`.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, img: Var, id: usize) -> Result<Var> {
        let net = self.nets.get(id).ok_or_else(|| {
            MmtError::invalid(format!(
                "contrast index {id} out of range for {} discriminators",
                self.nets.len()
            ))
        })?;
        let s = g.shape(img);
        if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(16) || !s[3].is_multiple_of(16) {
            return Err(MmtError::shape(format!(
                "discriminator input must be [n, 1, H, W] with H, W multiples of 16, got {s:?}"
            )));
        }
        let mut x = img;
        for (l, conv) in net.convs.iter().enumerate() {
            x = conv.forward(g, &self.params, x)?;
            if l < 3 {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(x)
    }
}
