//! `mmt` subcommands. Contrast numbers are 1-based on the command line and
//! converted to 0-based at this boundary.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_model, Checkpoint};
use crate::data::{
    generate_phantom, mean_normalize, read_dataset, read_volume, slices, write_dataset, write_volume,
    MultiContrastVolume, PhantomConfig, ScenarioMode,
};
use crate::diffcore::{Graph, Tensor};
use crate::error::{MmtError, Result};
use crate::eval::interp::{attention_heatmap, contribution_percentages, write_grid_csv, write_pgm};
use crate::eval::report::{evaluate, ScenarioSet};
use crate::losses::LossWeights;
use crate::model::{Mmt, MmtConfig};
use crate::training::{Trainer, TrainConfig, CSV_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const SUBCOMMANDS: [&str; 4] = ["gen-data", "train", "impute", "eval"];

#[derive(Debug, Parser)]
#[command(name = "mmt", version, about = "Missing-contrast imputation with a multi-scale windowed transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-contrast phantom dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Synthesise target contrasts of one volume.
    Impute(ImputeArgs),
    /// Sweep availability scenarios and report PSNR/SSIM.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Plain-text `key=value` file of flag defaults; flags given on the
    /// command line win.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "MMT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Suppress progress output on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub subjects: usize,
    #[arg(long, default_value_t = 3)]
    pub contrasts: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    pub size: Vec<usize>,
    /// Slices per subject.
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    /// Contrasts (1-based, comma separated) in which lesions appear.
    #[arg(long, value_delimiter = ',')]
    pub lesion_contrasts: Vec<usize>,
    /// Probability that a subject has a lesion; defaults to 1 when lesion
    /// contrasts are given.
    #[arg(long)]
    pub lesion_prob: Option<f64>,
    /// Lesion radius range as a fraction of the image half-width.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"], default_values_t = [0.12, 0.2])]
    pub lesion_radius: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out dataset for the periodic validation PSNR.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Continue from a training checkpoint; its configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// CSV log path; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "random")]
    pub mode: ScenarioMode,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr_g: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_d: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_r: f64,
    #[arg(long, default_value_t = 20.0)]
    pub lambda_s: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_adv: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    /// Also write `<out>.step<N>` every N steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 4)]
    pub eval_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub pos_bias_lr_scale: f64,
    /// Channels of the CNN image features.
    #[arg(long, default_value_t = 6)]
    pub channels: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [8, 8])]
    pub window: Vec<usize>,
    /// Number of scales.
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ImputeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input volume holding either every contrast or only the available
    /// ones, in ascending order.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub available: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write attention heatmaps and a contribution report.
    #[arg(long)]
    pub attention: bool,
    /// Silence the warning for targets that are also inputs.
    #[arg(long)]
    pub allow_reconstruction: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "all")]
    pub scenarios: ScenarioSet,
    /// CSV report path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

/// Reproducibility record written next to every command's outputs.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub start_unix: u64,
    pub end_unix: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    fn new(command: &str, args: &[String], seed: u64) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            seed,
            config: Vec::new(),
            start_unix: unix_now(),
            end_unix: None,
            outputs: Vec::new(),
        }
    }

    fn put(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        s.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| if a.is_empty() || a.contains(char::is_whitespace) { format!("{a:?}") } else { a.clone() })
            .collect();
        s.push_str(&format!("args={}\n", args.join(" ")));
        s.push_str(&format!("seed={}\n", self.seed));
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k}={v}\n"));
        }
        s.push_str(&format!("start_unix={}\n", self.start_unix));
        match self.end_unix {
            Some(t) => s.push_str(&format!("end_unix={t}\n")),
            None => s.push_str("end_unix=\n"),
        }
        for o in &self.outputs {
            s.push_str(&format!("output={}\n", o.display()));
        }
        s
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| MmtError::io(path, e))
    }

    fn finish(&mut self, path: &Path) -> Result<()> {
        self.end_unix = Some(unix_now());
        self.write(path)
    }
}

/// Turns `key=value` lines into `--key value` tokens. Values split on
/// whitespace so multi-valued flags such as `size=64 64` work.
pub fn config_tokens(text: &str, path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| MmtError::Format {
            path: path.to_path_buf(),
            detail: format!("line {} is not key=value: {line:?}", n + 1),
        })?;
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if k == "config" {
            return Err(MmtError::invalid("config files cannot include other config files"));
        }
        out.push(format!("--{k}"));
        out.extend(v.split_whitespace().map(str::to_string));
    }
    Ok(out)
}

/// Inserts the tokens of any `--config FILE` right after the subcommand
/// name, so later command-line flags override them.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut file = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            file = argv.get(i + 1).cloned();
        } else if let Some(f) = a.strip_prefix("--config=") {
            file = Some(f.to_string());
        }
    }
    let Some(file) = file else { return Ok(argv) };
    let path = PathBuf::from(file);
    let text = fs::read_to_string(&path).map_err(|e| MmtError::io(&path, e))?;
    let tokens = config_tokens(&text, &path)?;
    let at = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())).map_or(argv.len(), |i| i + 1);
    let mut out = argv[..at].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}

/// Parses and runs one invocation; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<String> = argv.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    let raw_args = argv.get(1..).unwrap_or_default().to_vec();
    let expanded = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    let cli = match Cli::try_parse_from(expanded) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let res = match &cli.command {
        Command::GenData(a) => gen_data(a, &raw_args),
        Command::Train(a) => train(a, &raw_args),
        Command::Impute(a) => impute(a, &raw_args),
        Command::Eval(a) => eval(a, &raw_args),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn progress(common: &Common, msg: impl AsRef<str>) {
    if !common.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn one_based(list: &[usize], p: usize, what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(list.len());
    for &c in list {
        if c == 0 || c > p {
            return Err(MmtError::invalid(format!("{what} contrast {c} is outside 1..={p}")));
        }
        if out.contains(&(c - 1)) {
            return Err(MmtError::invalid(format!("{what} contrast {c} listed twice")));
        }
        out.push(c - 1);
    }
    Ok(out)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_data(a: &GenDataArgs, raw: &[String]) -> Result<()> {
    let lesion_contrasts = one_based(&a.lesion_contrasts, a.contrasts.max(1), "lesion")?;
    let lesion_prob = a
        .lesion_prob
        .unwrap_or(if lesion_contrasts.is_empty() { 0.0 } else { 1.0 });
    let cfg = PhantomConfig {
        n_contrasts: a.contrasts,
        height: a.size[0],
        width: a.size[1],
        depth: a.depth,
        n_subjects: a.subjects,
        seed: a.common.seed,
        lesion_prob,
        lesion_contrasts,
        lesion_radius: (a.lesion_radius[0], a.lesion_radius[1]),
        noise_sigma: a.noise,
    };
    cfg.validate()?;
    if a.out.exists() {
        let nonempty = fs::read_dir(&a.out)
            .map_err(|e| MmtError::io(&a.out, e))?
            .next()
            .is_some();
        if nonempty && !a.force {
            return Err(MmtError::invalid(format!(
                "{} is not empty; pass --force to write into it",
                a.out.display()
            )));
        }
    }
    let mut m = RunManifest::new("gen-data", raw, a.common.seed);
    m.put("subjects", cfg.n_subjects);
    m.put("contrasts", cfg.n_contrasts);
    m.put("size", format!("{} {}", cfg.height, cfg.width));
    m.put("depth", cfg.depth);
    m.put("lesion_contrasts", a.lesion_contrasts.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    m.put("lesion_prob", format!("{:?}", cfg.lesion_prob));
    m.put("lesion_radius", format!("{:?} {:?}", cfg.lesion_radius.0, cfg.lesion_radius.1));
    m.put("noise", format!("{:?}", cfg.noise_sigma));
    let vols = generate_phantom(&cfg)?;
    write_dataset(&a.out, &vols)?;
    m.outputs = vols.iter().map(|v| a.out.join(format!("{}.mcv", v.subject_id))).collect();
    m.outputs.push(a.out.join(crate::data::INDEX_FILE));
    m.finish(&a.out.join("manifest.txt"))?;
    progress(&a.common, format!("wrote {} volumes to {}", vols.len(), a.out.display()));
    Ok(())
}

/// Mean-normalised training slices of a dataset directory.
fn load_slices(dir: &Path) -> Result<(Vec<MultiContrastVolume>, Vec<Tensor>)> {
    if !dir.is_dir() {
        return Err(MmtError::invalid(format!("{} is not a dataset directory", dir.display())));
    }
    let vols = read_dataset(dir)?;
    if vols.is_empty() {
        return Err(MmtError::invalid(format!("{} holds no volumes", dir.display())));
    }
    let vols = vols.iter().map(mean_normalize).collect::<Result<Vec<_>>>()?;
    let sl = slices(&vols);
    Ok((vols, sl))
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_g: a.lr_g,
        lr_d: a.lr_d,
        weight_decay: a.weight_decay,
        seed: a.common.seed,
        mode: a.mode,
        weights: LossWeights {
            lambda_r: a.lambda_r,
            lambda_s: a.lambda_s,
            lambda_adv: a.lambda_adv,
        },
        clip_norm: a.clip_norm,
        eval_every: a.eval_every,
        checkpoint_every: a.checkpoint_every,
        eval_size: a.eval_size,
        pos_bias_lr_scale: a.pos_bias_lr_scale,
    }
}

fn train(a: &TrainArgs, raw: &[String]) -> Result<()> {
    let (vols, data) = load_slices(&a.data)?;
    let held_out = match &a.val {
        Some(v) => load_slices(v)?.1,
        None => Vec::new(),
    };
    let mut trainer = match &a.resume {
        Some(path) => Trainer::from_checkpoint(data, held_out, &Checkpoint::load(path)?)?,
        None => {
            let cfg = MmtConfig {
                n_contrasts: vols[0].n_contrasts,
                channels: a.channels,
                window: (a.window[0], a.window[1]),
                depth: a.depth,
            };
            cfg.validate()?;
            let model = Mmt::new(cfg, a.common.seed)?;
            Trainer::new(data, held_out, model, train_config(a))?
        }
    };
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.csv"));
    let manifest_path = with_suffix(&a.out, ".manifest.txt");
    let mut m = RunManifest::new("train", raw, trainer.config.seed);
    for (k, v) in trainer.model.config.to_header().into_iter().chain(trainer.config.to_header()) {
        m.put(&k, v);
    }
    m.put("data", a.data.display());
    if let Some(v) = &a.val {
        m.put("val", v.display());
    }
    if let Some(r) = &a.resume {
        m.put("resume", r.display());
    }
    m.outputs = vec![a.out.clone(), log_path.clone()];
    m.write(&manifest_path)?;

    // a resumed run appends to its log; a fresh run starts a new one
    let mut log = if a.resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)
    } else {
        fs::File::create(&log_path).and_then(|mut f| writeln!(f, "{CSV_HEADER}").map(|_| f))
    }
    .map_err(|e| MmtError::io(&log_path, e))?;

    let total = trainer.total_steps();
    progress(
        &a.common,
        format!("training {} parameters for {total} steps", trainer.model.param_count()),
    );
    while !trainer.is_done() {
        let st = trainer.train_step()?;
        writeln!(log, "{}", st.csv_row()).map_err(|e| MmtError::io(&log_path, e))?;
        if let Some(v) = st.psnr_val {
            log.flush().map_err(|e| MmtError::io(&log_path, e))?;
            progress(
                &a.common,
                format!("step {}/{total}: L_s {:.5} L_r {:.5} psnr_val {v:.2} dB", st.step, st.l_s, st.l_r),
            );
        }
        let every = trainer.config.checkpoint_every;
        if every > 0 && st.step % every == 0 && !trainer.is_done() {
            let p = with_suffix(&a.out, &format!(".step{}", st.step));
            trainer.checkpoint().save(&p)?;
            m.outputs.push(p);
        }
    }
    trainer.checkpoint().save(&a.out)?;
    m.finish(&manifest_path)?;
    progress(&a.common, format!("wrote {}", a.out.display()));
    Ok(())
}

/// Mean-normalised `[M, 1, H, W]` inputs per slice.
fn impute_inputs(vol: &MultiContrastVolume, p: usize, available: &[usize]) -> Result<Vec<Tensor>> {
    let (d, h, w) = (vol.depth, vol.height, vol.width);
    // position of each available contrast inside the file
    let src: Vec<usize> = if vol.n_contrasts == p {
        available.to_vec()
    } else if vol.n_contrasts == available.len() {
        (0..available.len()).collect()
    } else {
        return Err(MmtError::invalid(format!(
            "volume has {} contrasts; expected {p} or the {} available ones",
            vol.n_contrasts,
            available.len()
        )));
    };
    let mut scaled = Vec::with_capacity(src.len());
    for &s in &src {
        let c = vol.contrast(s);
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        if !(mean.is_finite() && mean != 0.0) {
            return Err(MmtError::invalid(format!("input contrast has mean {mean}; cannot normalise")));
        }
        scaled.push(c.iter().map(|v| v / mean).collect::<Vec<f64>>());
    }
    (0..d)
        .map(|z| {
            let mut buf = Vec::with_capacity(src.len() * h * w);
            for c in &scaled {
                buf.extend_from_slice(&c[z * h * w..(z + 1) * h * w]);
            }
            Tensor::new(vec![src.len(), 1, h, w], buf)
        })
        .collect()
}

fn impute(a: &ImputeArgs, raw: &[String]) -> Result<()> {
    let model = load_model(&Checkpoint::load(&a.ckpt)?)?;
    let p = model.config.n_contrasts;
    let mut available = one_based(&a.available, p, "available")?;
    available.sort_unstable();
    let targets = one_based(&a.targets, p, "target")?;
    if available.is_empty() || targets.is_empty() {
        return Err(MmtError::invalid("need at least one available and one target contrast"));
    }
    let overlap: Vec<usize> = targets.iter().filter(|t| available.contains(t)).map(|t| t + 1).collect();
    if !overlap.is_empty() && !a.allow_reconstruction {
        progress(
            &a.common,
            format!("warning: targets {overlap:?} are also inputs and will be reconstructed"),
        );
    }
    let vol = read_volume(&a.input)?;
    let inputs = impute_inputs(&vol, p, &available)?;
    fs::create_dir_all(&a.out).map_err(|e| MmtError::io(&a.out, e))?;
    let heat_dir = a.out.join("heatmaps");
    if a.attention {
        fs::create_dir_all(&heat_dir).map_err(|e| MmtError::io(&heat_dir, e))?;
    }

    let (h, w) = (vol.height, vol.width);
    let mut synth: Vec<Vec<f64>> = vec![Vec::with_capacity(vol.depth * h * w); targets.len()];
    let mut contrib: Vec<Vec<f64>> = vec![vec![0.0; available.len()]; targets.len()];
    let mut outputs = Vec::new();
    for (z, x) in inputs.into_iter().enumerate() {
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let pyr = model.encode(&mut g, xv, &available)?;
        for (k, &t) in targets.iter().enumerate() {
            let (img, rec) = model.decode(&mut g, &pyr, t, a.attention)?;
            synth[k].extend_from_slice(g.value(img).data());
            if !a.attention {
                continue;
            }
            let rep = contribution_percentages(&rec)?;
            for (acc, v) in contrib[k].iter_mut().zip(&rep.percentages) {
                *acc += v / vol.depth as f64;
            }
            for (li, layer) in rec.layers.iter().enumerate() {
                for &c in &available {
                    let map = attention_heatmap(&rec, li, c)?;
                    let stem = format!(
                        "{}_t{}_z{z}_s{}b{}_c{}",
                        vol.subject_id,
                        t + 1,
                        layer.level,
                        layer.block,
                        c + 1
                    );
                    let pgm = heat_dir.join(format!("{stem}.pgm"));
                    let csv = heat_dir.join(format!("{stem}.csv"));
                    write_pgm(&pgm, &map)?;
                    write_grid_csv(&csv, &map)?;
                    outputs.push(pgm);
                    outputs.push(csv);
                }
            }
        }
    }
    let mut written = Vec::new();
    for (k, &t) in targets.iter().enumerate() {
        let out = MultiContrastVolume::new(
            format!("{}_c{}", vol.subject_id, t + 1),
            [1, vol.depth, h, w],
            std::mem::take(&mut synth[k]),
        )?;
        let path = a.out.join(format!("{}.mcv", out.subject_id));
        write_volume(&path, &out)?;
        written.push(path);
    }
    if a.attention {
        let path = a.out.join("contributions.csv");
        let mut s = String::from("target,input,percent\n");
        for (k, &t) in targets.iter().enumerate() {
            for (c, v) in available.iter().zip(&contrib[k]) {
                s.push_str(&format!("{},{},{:?}\n", t + 1, c + 1, v));
            }
        }
        fs::write(&path, s).map_err(|e| MmtError::io(&path, e))?;
        written.push(path);
    }
    let mut m = RunManifest::new("impute", raw, a.common.seed);
    m.put("ckpt", a.ckpt.display());
    m.put("in", a.input.display());
    m.put("available", a.available.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    m.put("targets", a.targets.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    m.put("attention", a.attention);
    m.outputs = written.iter().chain(&outputs).cloned().collect();
    m.finish(&a.out.join("manifest.txt"))?;
    progress(&a.common, format!("wrote {} volumes to {}", targets.len(), a.out.display()));
    Ok(())
}

fn eval(a: &EvalArgs, raw: &[String]) -> Result<()> {
    let model = load_model(&Checkpoint::load(&a.ckpt)?)?;
    let (vols, sl) = load_slices(&a.data)?;
    if vols[0].n_contrasts != model.config.n_contrasts {
        return Err(MmtError::invalid(format!(
            "dataset has {} contrasts, model expects {}",
            vols[0].n_contrasts, model.config.n_contrasts
        )));
    }
    let report = evaluate(&model, &sl, a.scenarios)?;
    fs::write(&a.out, report.to_csv()).map_err(|e| MmtError::io(&a.out, e))?;
    if !a.common.quiet {
        print!("{}", report.to_text());
    }
    let mut m = RunManifest::new("eval", raw, a.common.seed);
    m.put("ckpt", a.ckpt.display());
    m.put("data", a.data.display());
    m.put("scenarios", format!("{:?}", a.scenarios).to_lowercase());
    m.outputs = vec![a.out.clone()];
    m.finish(&with_suffix(&a.out, ".manifest.txt"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_tokens() {
        let t = config_tokens("# comment\nsize=32 32\nlr_g = 0.001\n\n--mode=single\n", Path::new("c")).unwrap();
        assert_eq!(t, ["--size", "32", "32", "--lr-g", "0.001", "--mode", "single"]);
        assert!(config_tokens("oops\n", Path::new("c")).is_err());
        assert!(config_tokens("config=x\n", Path::new("c")).is_err());
    }

    #[test]
    fn config_goes_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        fs::write(&f, "subjects=2\n").unwrap();
        let argv: Vec<String> = ["mmt", "gen-data", "--config", f.to_str().unwrap(), "--subjects", "5"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let ex = expand_config(argv).unwrap();
        assert_eq!(&ex[..4], ["mmt", "gen-data", "--subjects", "2"]);
        let cli = Cli::try_parse_from(ex.iter().chain(&["--out".to_string(), "x".to_string()])).unwrap();
        match cli.command {
            Command::GenData(g) => assert_eq!(g.subjects, 5),
            _ => unreachable!(),
        }
    }

    #[test]
    fn one_based_conversion() {
        assert_eq!(one_based(&[1, 3], 3, "x").unwrap(), [0, 2]);
        assert!(one_based(&[0], 3, "x").is_err());
        assert!(one_based(&[4], 3, "x").is_err());
        assert!(one_based(&[2, 2], 3, "x").is_err());
    }

    #[test]
    fn manifest_lists_args_verbatim() {
        let args: Vec<String> = ["--subjects", "4", "--out", "a b"].iter().map(|s| s.to_string()).collect();
        let mut m = RunManifest::new("gen-data", &args, 7);
        m.put("subjects", 4);
        let text = m.render();
        assert!(text.contains("args=--subjects 4 --out \"a b\"\n"));
        assert!(text.contains("seed=7\n") && text.contains("config.subjects=4\n"));
        assert!(text.contains("end_unix=\n"));
    }
}
