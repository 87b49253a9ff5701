//! AdamW, the cosine schedule, and the alternating generator/discriminator
//! loop with bit-exact checkpoint resume.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, GEN_PREFIX};
use crate::data::{sample_scenario, ScenarioMode};
use crate::diffcore::{Gradients, Graph, ParamId, ParamStore, Tensor};
use crate::error::{MmtError, Result};
use crate::eval::metrics::psnr_ref;
use crate::losses::{
    discriminator_loss, generator_adv_loss, generator_loss, reconstruction_loss, synthesis_loss, Discriminator,
    Labels, LossWeights,
};
use crate::model::{ContrastScenario, Mmt, MmtConfig};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Names of relative position bias tables end with this.
const POS_BIAS_SUFFIX: &str = "rel_bias";
const DISC_PREFIX: &str = "disc/";
const OPT_G_PREFIX: &str = "opt_g/";
const OPT_D_PREFIX: &str = "opt_d/";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: ScenarioMode,
    pub weights: LossWeights,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Evaluate the held-out batch every this many steps.
    pub eval_every: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Slices in the fixed held-out batch.
    pub eval_size: usize,
    /// Learning-rate multiplier for relative position bias tables. They are
    /// the decoder's only source of spatial identity, and at small step
    /// budgets they move too slowly under the shared rate.
    pub pos_bias_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            lr_g: 5e-4,
            lr_d: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            mode: ScenarioMode::Random,
            weights: LossWeights::default(),
            clip_norm: 1.0,
            eval_every: 10,
            checkpoint_every: 0,
            eval_size: 4,
            pos_bias_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MmtError::invalid("epochs and batch size must be at least 1"));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MmtError::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.pos_bias_lr_scale > 0.0 && self.pos_bias_lr_scale.is_finite()) {
            return Err(MmtError::invalid("position-bias learning-rate scale must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(MmtError::invalid("weight decay and clip norm must be nonnegative"));
        }
        if self.eval_every == 0 || self.eval_size == 0 {
            return Err(MmtError::invalid("evaluation interval and held-out batch size must be at least 1"));
        }
        self.weights.validate()
    }

    fn adversarial(&self) -> bool {
        self.weights.lambda_adv > 0.0
    }

    pub fn to_header(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            h.insert(format!("train.{k}"), v);
        };
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        // `{:?}` on f64 round-trips exactly
        put("lr_g", format!("{:?}", self.lr_g));
        put("lr_d", format!("{:?}", self.lr_d));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("seed", self.seed.to_string());
        put("mode", self.mode.to_string());
        put("lambda_r", format!("{:?}", self.weights.lambda_r));
        put("lambda_s", format!("{:?}", self.weights.lambda_s));
        put("lambda_adv", format!("{:?}", self.weights.lambda_adv));
        put("clip_norm", format!("{:?}", self.clip_norm));
        put("eval_every", self.eval_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("eval_size", self.eval_size.to_string());
        put("pos_bias_lr_scale", format!("{:?}", self.pos_bias_lr_scale));
        h
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let p = |k: &str| format!("train.{k}");
        let cfg = Self {
            epochs: ck.parse(&p("epochs"))?,
            batch_size: ck.parse(&p("batch_size"))?,
            lr_g: ck.parse(&p("lr_g"))?,
            lr_d: ck.parse(&p("lr_d"))?,
            weight_decay: ck.parse(&p("weight_decay"))?,
            seed: ck.parse(&p("seed"))?,
            mode: ck.get(&p("mode"))?.parse()?,
            weights: LossWeights {
                lambda_r: ck.parse(&p("lambda_r"))?,
                lambda_s: ck.parse(&p("lambda_s"))?,
                lambda_adv: ck.parse(&p("lambda_adv"))?,
            },
            clip_norm: ck.parse(&p("clip_norm"))?,
            eval_every: ck.parse(&p("eval_every"))?,
            checkpoint_every: ck.parse(&p("checkpoint_every"))?,
            eval_size: ck.parse(&p("eval_size"))?,
            pos_bias_lr_scale: ck.parse(&p("pos_bias_lr_scale"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr0·½·(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moments and per-parameter step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }

    fn push(&self, ck: &mut Checkpoint, prefix: &str, store: &ParamStore) {
        for (id, name, _) in store.iter() {
            ck.blobs.push((format!("{prefix}m/{name}"), self.m[id.index()].clone()));
            ck.blobs.push((format!("{prefix}v/{name}"), self.v[id.index()].clone()));
        }
        let steps = self.steps.iter().map(|&s| s as f64).collect();
        ck.blobs.push((format!("{prefix}steps"), Tensor::new(vec![self.steps.len()], steps).expect("1-d")));
    }

    fn load(ck: &Checkpoint, prefix: &str, store: &ParamStore) -> Result<Self> {
        let mut state = Self::new(store);
        let mut m_store = store.clone();
        m_store.load_named(ck.take_prefix(&format!("{prefix}m/")))?;
        let mut v_store = store.clone();
        v_store.load_named(ck.take_prefix(&format!("{prefix}v/")))?;
        for (id, _, t) in m_store.iter() {
            state.m[id.index()] = t.clone();
        }
        for (id, _, t) in v_store.iter() {
            state.v[id.index()] = t.clone();
        }
        let key = format!("{prefix}steps");
        let steps = ck
            .blobs
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| MmtError::invalid(format!("checkpoint lacks {key}")))?;
        if steps.1.numel() != store.len() {
            return Err(MmtError::invalid(format!("{key} has the wrong length")));
        }
        state.steps = steps.1.data().iter().map(|&s| s as u64).collect();
        Ok(state)
    }
}

/// One decoupled-weight-decay Adam update. Parameters without a gradient
/// are left alone. A non-finite gradient aborts before anything changes.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    adamw_step_scaled(store, grads, state, lr, weight_decay, |_| 1.0)
}

/// [`adamw_step`] with a per-parameter learning-rate multiplier.
pub fn adamw_step_scaled(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
    lr_scale: impl Fn(ParamId) -> f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(MmtError::shape("optimizer state, gradients and parameters disagree"));
    }
    for (id, g) in grads.iter() {
        if let Some(g) = g {
            if g.shape() != store.get(id).shape() {
                return Err(MmtError::shape(format!("gradient shape mismatch for {}", store.name(id))));
            }
            if !g.is_finite() {
                return Err(MmtError::NonFinite(format!("gradient of parameter {}", store.name(id))));
            }
        }
    }
    for (id, g) in grads.iter() {
        let Some(g) = g else { continue };
        let i = id.index();
        let lr = lr * lr_scale(id);
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
            p[k] -= lr * weight_decay * p[k];
            p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales `grads` to norm `max_norm` when above it. Returns the norm
/// before clipping and whether clipping happened.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> (f64, bool) {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Scalars recorded for one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based count of completed steps.
    pub step: usize,
    pub lr: f64,
    pub l_s: f64,
    pub l_r: f64,
    pub l_adv: Option<f64>,
    pub l_d: Option<f64>,
    pub psnr_val: Option<f64>,
    /// Availability bitstring of the batch's scenario.
    pub scenario: String,
    pub clipped: bool,
}

pub const CSV_HEADER: &str = "step,lr,L_s,L_r,L_adv,L_D,psnr_val,scenario,clipped";

impl StepStats {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        format!(
            "{},{:?},{:?},{:?},{},{},{},{},{}",
            self.step,
            self.lr,
            self.l_s,
            self.l_r,
            opt(self.l_adv),
            opt(self.l_d),
            self.psnr_val.map_or(String::new(), crate::eval::metrics::format_db),
            self.scenario,
            u8::from(self.clipped)
        )
    }
}

/// Contrasts `ids` of a `[P, 1, H, W]` slice as `[len, 1, H, W]`.
pub fn select_contrasts(slice: &Tensor, ids: &[usize]) -> Tensor {
    let s = slice.shape();
    let n = s[2] * s[3];
    let mut data = Vec::with_capacity(ids.len() * n);
    for &c in ids {
        data.extend_from_slice(&slice.data()[c * n..(c + 1) * n]);
    }
    Tensor::new(vec![ids.len(), 1, s[2], s[3]], data).expect("sizes match")
}

/// Mean PSNR of synthesised missing contrasts over `(slice, scenario)`
/// pairs, with no gradient tape.
pub fn mean_synthesis_psnr(model: &Mmt, slices: &[Tensor], cases: &[(usize, ContrastScenario)]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (i, sc) in cases {
        let slice = &slices[*i];
        let mut g = Graph::no_grad();
        let x = g.constant(select_contrasts(slice, &sc.available));
        let outs = model.forward(&mut g, x, &sc.available, &sc.missing)?;
        for (&o, &t) in outs.iter().zip(&sc.missing) {
            let truth = select_contrasts(slice, &[t]);
            total += psnr_ref(g.value(o).data(), truth.data())?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Owns everything that evolves during training.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Mmt,
    pub disc: Discriminator,
    opt_g: OptimState,
    opt_d: OptimState,
    rng: ChaCha8Rng,
    step: usize,
    data: Vec<Tensor>,
    held_out: Vec<Tensor>,
    eval_cases: Vec<(usize, ContrastScenario)>,
}

/// Stream ids for the independent random sources of a run.
const STREAM_MAIN: u64 = 0;
const STREAM_EVAL: u64 = 1;
const STREAM_EPOCH_BASE: u64 = 1 << 32;

impl Trainer {
    /// `data` holds `[P, 1, H, W]` training slices. The held-out batch is
    /// drawn from `held_out`, or from `data` when that is empty.
    pub fn new(data: Vec<Tensor>, held_out: Vec<Tensor>, model: Mmt, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let disc = Discriminator::new(model.config.n_contrasts, config.seed.wrapping_add(1));
        let opt_g = OptimState::new(&model.params);
        let opt_d = OptimState::new(&disc.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_MAIN);
        let mut t = Self {
            config,
            model,
            disc,
            opt_g,
            opt_d,
            rng,
            step: 0,
            data,
            held_out,
            eval_cases: Vec::new(),
        };
        t.check_data()?;
        t.eval_cases = t.draw_eval_cases()?;
        Ok(t)
    }

    /// Restores a run from a training checkpoint over the same data.
    pub fn from_checkpoint(data: Vec<Tensor>, held_out: Vec<Tensor>, ck: &Checkpoint) -> Result<Self> {
        if ck.get("kind")? != "train" {
            return Err(MmtError::invalid("checkpoint does not hold training state"));
        }
        let config = TrainConfig::from_checkpoint(ck)?;
        let model_cfg = MmtConfig::from_header(&ck.header)?;
        let mut t = Self::new(data, held_out, Mmt::new(model_cfg, config.seed)?, config)?;
        t.model.params.load_named(ck.take_prefix(GEN_PREFIX))?;
        t.disc.params.load_named(ck.take_prefix(DISC_PREFIX))?;
        t.opt_g = OptimState::load(ck, OPT_G_PREFIX, &t.model.params)?;
        t.opt_d = OptimState::load(ck, OPT_D_PREFIX, &t.disc.params)?;
        t.step = ck.parse("step")?;
        if ck.parse::<usize>("total_steps")? != t.total_steps() {
            return Err(MmtError::invalid("checkpoint was written for a different dataset size"));
        }
        t.rng.set_word_pos(ck.parse("rng_word_pos")?);
        Ok(t)
    }

    fn check_data(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(MmtError::invalid("training set is empty"));
        }
        let cfg = &self.model.config;
        for s in self.data.iter().chain(&self.held_out) {
            let sh = s.shape();
            if sh.len() != 4 || sh[0] != cfg.n_contrasts || sh[1] != 1 {
                return Err(MmtError::shape(format!(
                    "training slices must be [{}, 1, H, W], got {sh:?}",
                    cfg.n_contrasts
                )));
            }
            cfg.check_image(sh[2], sh[3])?;
            if self.config.adversarial() && (sh[2] % 16 != 0 || sh[3] % 16 != 0) {
                return Err(MmtError::invalid("adversarial training needs image sides divisible by 16"));
            }
        }
        Ok(())
    }

    fn eval_pool(&self) -> &[Tensor] {
        if self.held_out.is_empty() {
            &self.data
        } else {
            &self.held_out
        }
    }

    fn draw_eval_cases(&self) -> Result<Vec<(usize, ContrastScenario)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(STREAM_EVAL);
        let pool = self.eval_pool().len();
        let mut order: Vec<usize> = (0..pool).collect();
        order.shuffle(&mut rng);
        order.truncate(self.config.eval_size.min(pool));
        order.sort_unstable();
        order
            .into_iter()
            .map(|i| Ok((i, sample_scenario(self.model.config.n_contrasts, &mut rng, self.config.mode)?)))
            .collect()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch()
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Slice indices of batch `step`. Each epoch's order comes from its own
    /// stream, so it does not depend on how the run was interrupted.
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(STREAM_EPOCH_BASE + epoch as u64);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        let b = step % spe;
        let end = ((b + 1) * self.config.batch_size).min(order.len());
        order[b * self.config.batch_size..end].to_vec()
    }

    /// Mean synthesis PSNR on the held-out batch.
    pub fn held_out_psnr(&self) -> Result<f64> {
        mean_synthesis_psnr(&self.model, self.eval_pool(), &self.eval_cases)
    }

    /// Runs one generator step and, when adversarial training is on, one
    /// discriminator step.
    pub fn train_step(&mut self) -> Result<StepStats> {
        if self.is_done() {
            return Err(MmtError::invalid("training already finished"));
        }
        let cfg = self.config.clone();
        let n_contrasts = self.model.config.n_contrasts;
        let step = self.step;
        let total = self.total_steps();
        let batch = self.batch_indices(step);
        let scenario = sample_scenario(n_contrasts, &mut self.rng, cfg.mode)?;
        let adversarial = cfg.adversarial();
        let labels = adversarial.then(|| Labels::sample(&mut self.rng));
        let lr_g = cosine_lr(step, total, cfg.lr_g);
        let lr_d = cosine_lr(step, total, cfg.lr_d);
        let with_recon = cfg.weights.lambda_r > 0.0;

        let mut targets = scenario.missing.clone();
        if with_recon {
            targets.extend(&scenario.available);
        }
        let n_missing = scenario.missing.len();

        let (mut grads, l_s, l_r, l_adv, fakes) = {
            let mut g = Graph::new();
            g.freeze(&self.disc.params);
            let mut outs = Vec::new();
            let mut truths = Vec::new();
            let mut recons = Vec::new();
            let mut inputs = Vec::new();
            let mut fake_ids = Vec::new();
            for &i in &batch {
                let slice = &self.data[i];
                let x = g.constant(select_contrasts(slice, &scenario.available));
                let ys = self.model.forward(&mut g, x, &scenario.available, &targets)?;
                for (k, (&y, &t)) in ys.iter().zip(&targets).enumerate() {
                    let truth = g.constant(select_contrasts(slice, &[t]));
                    if k < n_missing {
                        outs.push(y);
                        truths.push(truth);
                        fake_ids.push((i, t));
                    } else {
                        recons.push(y);
                        inputs.push(truth);
                    }
                }
            }
            let l_s = synthesis_loss(&mut g, &outs, &truths)?;
            let l_r = if with_recon {
                Some(reconstruction_loss(&mut g, &recons, &inputs)?)
            } else {
                None
            };
            let l_adv = match labels {
                Some(lb) => {
                    let mut scores = Vec::with_capacity(outs.len());
                    for (&o, &(_, t)) in outs.iter().zip(&fake_ids) {
                        scores.push(self.disc.forward(&mut g, o, t)?);
                    }
                    Some(generator_adv_loss(&mut g, &scores, lb)?)
                }
                None => None,
            };
            let total_loss = generator_loss(&mut g, l_r, l_s, l_adv, &cfg.weights)?;
            if !g.value(total_loss).is_finite() {
                return Err(MmtError::NonFinite(format!("generator loss at step {}", step + 1)));
            }
            g.backward(total_loss)?;
            let fakes: Vec<(Tensor, usize, usize)> = outs
                .iter()
                .zip(&fake_ids)
                .map(|(&o, &(i, t))| (g.value(o).clone(), i, t))
                .collect();
            (
                g.param_grads(&self.model.params),
                g.value(l_s).item(),
                l_r.map_or(0.0, |v| g.value(v).item()),
                l_adv.map(|v| g.value(v).item()),
                fakes,
            )
        };
        let (_, clipped) = clip_global_norm(&mut grads, cfg.clip_norm);
        let scales: Vec<f64> = self
            .model
            .params
            .iter()
            .map(|(_, name, _)| if name.ends_with(POS_BIAS_SUFFIX) { cfg.pos_bias_lr_scale } else { 1.0 })
            .collect();
        adamw_step_scaled(&mut self.model.params, &grads, &mut self.opt_g, lr_g, cfg.weight_decay, |id| {
            scales[id.index()]
        })?;

        let l_d = match labels {
            Some(lb) => {
                let (mut grads, l_d) = {
                    let mut g = Graph::new();
                    let mut d_fake = Vec::new();
                    let mut d_real = Vec::new();
                    for (fake, i, t) in &fakes {
                        let f = g.constant(fake.clone());
                        d_fake.push(self.disc.forward(&mut g, f, *t)?);
                        let r = g.constant(select_contrasts(&self.data[*i], &[*t]));
                        d_real.push(self.disc.forward(&mut g, r, *t)?);
                    }
                    let l = discriminator_loss(&mut g, &d_fake, &d_real, lb)?;
                    if !g.value(l).is_finite() {
                        return Err(MmtError::NonFinite(format!("discriminator loss at step {}", step + 1)));
                    }
                    g.backward(l)?;
                    (g.param_grads(&self.disc.params), g.value(l).item())
                };
                clip_global_norm(&mut grads, cfg.clip_norm);
                adamw_step(&mut self.disc.params, &grads, &mut self.opt_d, lr_d, cfg.weight_decay)?;
                Some(l_d)
            }
            None => None,
        };

        self.step += 1;
        let psnr_val = if self.step.is_multiple_of(cfg.eval_every) || self.is_done() {
            Some(self.held_out_psnr()?)
        } else {
            None
        };
        Ok(StepStats {
            step: self.step,
            lr: lr_g,
            l_s,
            l_r,
            l_adv,
            l_d,
            psnr_val,
            scenario: scenario.bitstring(),
            clipped,
        })
    }

    /// Full training state, enough to resume bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            header: self.model.config.to_header(),
            blobs: Vec::new(),
        };
        ck.header.extend(self.config.to_header());
        ck.set("kind", "train");
        ck.set("step", self.step);
        ck.set("total_steps", self.total_steps());
        ck.set("rng_word_pos", self.rng.get_word_pos());
        ck.push_store(GEN_PREFIX, &self.model.params);
        ck.push_store(DISC_PREFIX, &self.disc.params);
        self.opt_g.push(&mut ck, OPT_G_PREFIX, &self.model.params);
        self.opt_d.push(&mut ck, OPT_D_PREFIX, &self.disc.params);
        ck
    }
}
