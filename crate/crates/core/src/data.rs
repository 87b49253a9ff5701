//! Procedural multi-contrast phantoms, the MCV1 volume format, per-volume
//! normalisation and scenario sampling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::Tensor;
use crate::error::{MmtError, Result};
use crate::model::ContrastScenario;

pub const MCV_MAGIC: &[u8; 4] = b"MCV1";
const MCV_HEADER: usize = 4 + 4 * 4;

/// Name of the dataset index inside a dataset directory.
pub const INDEX_FILE: &str = "index.txt";

/// Inclusive-exclusive box `[z0, z1) × [y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub z0: usize,
    pub z1: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        (self.z0..self.z1).contains(&z) && (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    fn encode(&self) -> String {
        format!("{}-{},{}-{},{}-{}", self.z0, self.z1, self.y0, self.y1, self.x0, self.x1)
    }

    fn decode(s: &str) -> Option<Self> {
        let mut v = Vec::new();
        for part in s.split(',') {
            let (a, b) = part.split_once('-')?;
            v.push(a.parse().ok()?);
            v.push(b.parse().ok()?);
        }
        match v[..] {
            [z0, z1, y0, y1, x0, x1] => Some(Self { z0, z1, y0, y1, x0, x1 }),
            _ => None,
        }
    }
}

/// `P` co-registered `[D, H, W]` stacks stored contrast-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiContrastVolume {
    pub subject_id: String,
    pub n_contrasts: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// Where a synthetic lesion was placed, if any.
    pub lesion: Option<BoundingBox>,
}

impl MultiContrastVolume {
    pub fn new(
        subject_id: impl Into<String>,
        dims: [usize; 4],
        data: Vec<f64>,
    ) -> Result<Self> {
        let [p, d, h, w] = dims;
        if p * d * h * w != data.len() {
            return Err(MmtError::shape(format!(
                "volume {p}x{d}x{h}x{w} needs {} values, got {}",
                p * d * h * w,
                data.len()
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            n_contrasts: p,
            depth: d,
            height: h,
            width: w,
            data,
            lesion: None,
        })
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn contrast(&self, p: usize) -> &[f64] {
        let n = self.depth * self.plane();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn slice(&self, p: usize, z: usize) -> &[f64] {
        let n = self.plane();
        let off = (p * self.depth + z) * n;
        &self.data[off..off + n]
    }

    /// All contrasts of slice `z` as `[P, 1, H, W]`.
    pub fn slice_tensor(&self, z: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.n_contrasts * self.plane());
        for p in 0..self.n_contrasts {
            data.extend_from_slice(self.slice(p, z));
        }
        Tensor::new(vec![self.n_contrasts, 1, self.height, self.width], data).expect("sizes match")
    }
}

/// Divides each contrast by its mean over the whole volume.
pub fn mean_normalize(vol: &MultiContrastVolume) -> Result<MultiContrastVolume> {
    let mut out = vol.clone();
    let n = vol.depth * vol.plane();
    for p in 0..vol.n_contrasts {
        let mean = vol.contrast(p).iter().sum::<f64>() / n as f64;
        if mean == 0.0 || !mean.is_finite() {
            return Err(MmtError::invalid(format!(
                "contrast {} of {} has mean {mean}; cannot normalise",
                p + 1,
                vol.subject_id
            )));
        }
        for v in &mut out.data[p * n..(p + 1) * n] {
            *v /= mean;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub n_contrasts: usize,
    pub height: usize,
    pub width: usize,
    /// Slices per subject.
    pub depth: usize,
    pub n_subjects: usize,
    pub seed: u64,
    /// Probability that a subject carries a lesion.
    pub lesion_prob: f64,
    /// Zero-based contrasts in which lesions are visible.
    pub lesion_contrasts: Vec<usize>,
    /// Range of lesion radii, as a fraction of the half-width of the image.
    pub lesion_radius: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_contrasts: 3,
            height: 64,
            width: 64,
            depth: 1,
            n_subjects: 4,
            seed: 0,
            lesion_prob: 0.0,
            lesion_contrasts: Vec::new(),
            lesion_radius: (0.12, 0.2),
            noise_sigma: 0.01,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_contrasts < 2 {
            return Err(MmtError::invalid(format!(
                "phantoms need at least 2 contrasts, got {}",
                self.n_contrasts
            )));
        }
        if self.height < 8 || self.width < 8 || self.depth == 0 || self.n_subjects == 0 {
            return Err(MmtError::invalid(format!(
                "phantom size {}x{}x{} with {} subjects is too small",
                self.depth, self.height, self.width, self.n_subjects
            )));
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) {
            return Err(MmtError::invalid("lesion probability must lie in [0, 1]"));
        }
        if let Some(bad) = self.lesion_contrasts.iter().find(|&&c| c >= self.n_contrasts) {
            return Err(MmtError::invalid(format!(
                "lesion contrast {} out of range for {} contrasts",
                bad + 1,
                self.n_contrasts
            )));
        }
        let (r0, r1) = self.lesion_radius;
        if !(0.0 < r0 && r0 < r1 && r1 <= 0.5) {
            return Err(MmtError::invalid(format!(
                "lesion radius range ({r0}, {r1}) must satisfy 0 < min < max <= 0.5"
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(MmtError::invalid("noise sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// Intensity of tissue classes 1..=3 for one contrast, monotone in the
/// class value and linear in between.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferFunction {
    pub knots: [f64; 3],
}

impl TransferFunction {
    pub fn apply(&self, t: f64) -> f64 {
        let t = t.clamp(1.0, 3.0) - 1.0;
        let i = (t.floor() as usize).min(1);
        let f = t - i as f64;
        self.knots[i] * (1.0 - f) + self.knots[i + 1] * f
    }
}

/// Per-contrast transfer functions for a dataset seed. Even contrasts
/// rise with the class value, odd contrasts fall, so no single contrast
/// determines the others.
pub fn transfer_functions(n_contrasts: usize, seed: u64) -> Vec<TransferFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..n_contrasts)
        .map(|p| {
            let mut k = [0.0; 3];
            for v in &mut k {
                *v = rng.random_range(0.25..1.0);
            }
            k.sort_by(f64::total_cmp);
            // keep adjacent classes distinguishable
            for i in 1..3 {
                if k[i] - k[i - 1] < 0.15 {
                    k[i] = k[i - 1] + 0.15;
                }
            }
            if p % 2 == 1 {
                k.reverse();
            }
            TransferFunction { knots: k }
        })
        .collect()
}

/// Height of the lesion in visible contrasts.
pub const LESION_CONTRAST: f64 = 0.6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Axis-aligned ellipsoid in normalised `[-1, 1]` coordinates.
#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    /// Soft membership, 1 inside, 0 outside, transition about a pixel wide.
    fn soft(&self, p: [f64; 3], sharp: f64) -> f64 {
        let rho: f64 = (0..3).map(|i| ((p[i] - self.c[i]) / self.r[i]).powi(2)).sum::<f64>().sqrt();
        sigmoid((1.0 - rho) * sharp)
    }

    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.c[i]) / self.r[i]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Generates one subject. Subjects draw from independent streams, so any
/// subject can be regenerated alone.
pub fn generate_subject(cfg: &PhantomConfig, index: usize) -> Result<MultiContrastVolume> {
    cfg.validate()?;
    let tfs = transfer_functions(cfg.n_contrasts, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (p_n, d_n, h_n, w_n) = (cfg.n_contrasts, cfg.depth, cfg.height, cfg.width);
    let sharp = 0.5 * h_n.min(w_n) as f64;
    // depth axis spans [-0.5, 0.5] so thin stacks cut through the middle
    let coord = |z: usize, y: usize, x: usize| -> [f64; 3] {
        [
            if d_n == 1 { 0.0 } else { (z as f64 / (d_n - 1) as f64) - 0.5 },
            2.0 * (y as f64 + 0.5) / h_n as f64 - 1.0,
            2.0 * (x as f64 + 0.5) / w_n as f64 - 1.0,
        ]
    };
    let head = Ellipsoid {
        c: [0.0, rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)],
        r: [1.5, rng.random_range(0.75..0.9), rng.random_range(0.65..0.85)],
    };
    // inner structures with classes 2 and 3
    let n_inner = rng.random_range(2..=4);
    let mut inner = Vec::with_capacity(n_inner);
    for i in 0..n_inner {
        let class = if i % 2 == 0 { 2.0 } else { 3.0 };
        let e = Ellipsoid {
            c: [
                rng.random_range(-0.2..0.2),
                head.c[1] + rng.random_range(-0.4..0.4),
                head.c[2] + rng.random_range(-0.35..0.35),
            ],
            r: [
                rng.random_range(0.5..1.0),
                rng.random_range(0.12..0.3),
                rng.random_range(0.12..0.3),
            ],
        };
        inner.push((e, class));
    }
    let tissue = |p: [f64; 3]| -> f64 {
        let mut t = 1.0f64;
        for (e, class) in &inner {
            t = t.max(1.0 + (class - 1.0) * e.soft(p, sharp));
        }
        t
    };

    // placement is drawn for every subject so the lesion flag does not
    // shift the rest of the random stream
    let radius = cfg.lesion_radius;
    let roll: f64 = rng.random();
    let has_lesion = !cfg.lesion_contrasts.is_empty() && roll < cfg.lesion_prob;
    let lesion = {
        // place the lesion in plain class-1 tissue, away from inner
        // structures; crowded heads fall back to the roomiest candidate
        let mut found = None;
        let mut roomiest: Option<(f64, Ellipsoid)> = None;
        for _ in 0..200 {
            let r = rng.random_range(radius.0..radius.1);
            let e = Ellipsoid {
                c: [
                    0.0,
                    head.c[1] + rng.random_range(-0.55..0.55),
                    head.c[2] + rng.random_range(-0.5..0.5),
                ],
                r: [0.6, r, r],
            };
            let clearance = inner
                .iter()
                .map(|(ie, _)| (0..3).map(|i| ((e.c[i] - ie.c[i]) / (ie.r[i] + e.r[i] + 0.08)).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let inside = head.rho([0.0, e.c[1], e.c[2]]) + r / head.r[1].min(head.r[2]) < 0.85;
            if !inside {
                continue;
            }
            if clearance > 1.0 {
                found = Some(e);
                break;
            }
            if roomiest.is_none_or(|(c, _)| clearance > c) {
                roomiest = Some((clearance, e));
            }
        }
        found.or(roomiest.map(|(_, e)| e)).filter(|_| has_lesion)
    };
    let field: Vec<[f64; 3]> = (0..p_n)
        .map(|_| {
            [
                rng.random_range(-0.04..0.04),
                rng.random_range(-0.04..0.04),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut data = vec![0.0; p_n * d_n * h_n * w_n];
    let mut bbox: Option<BoundingBox> = None;
    for z in 0..d_n {
        for y in 0..h_n {
            for x in 0..w_n {
                let pt = coord(z, y, x);
                let m = head.soft(pt, sharp);
                let t = tissue(pt);
                let l = lesion.map_or(0.0, |e| e.soft(pt, sharp));
                if let Some(e) = lesion {
                    if e.rho(pt) <= 1.0 {
                        let b = bbox.get_or_insert(BoundingBox { z0: z, z1: z + 1, y0: y, y1: y + 1, x0: x, x1: x + 1 });
                        b.z0 = b.z0.min(z);
                        b.z1 = b.z1.max(z + 1);
                        b.y0 = b.y0.min(y);
                        b.y1 = b.y1.max(y + 1);
                        b.x0 = b.x0.min(x);
                        b.x1 = b.x1.max(x + 1);
                    }
                }
                for p in 0..p_n {
                    let [a, b, phase] = field[p];
                    let smooth = a * (pt[1] * 1.3 + phase).sin() + b * (pt[2] * 1.7 + phase).cos();
                    let mut v = m * (tfs[p].apply(t) + smooth);
                    if cfg.lesion_contrasts.contains(&p) {
                        v += LESION_CONTRAST * l * m;
                    }
                    data[((p * d_n + z) * h_n + y) * w_n + x] = v;
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }
    let mut vol = MultiContrastVolume::new(format!("subject_{index:04}"), [p_n, d_n, h_n, w_n], data)?;
    vol.lesion = bbox;
    Ok(vol)
}

/// All subjects of a phantom dataset.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Vec<MultiContrastVolume>> {
    (0..cfg.n_subjects).map(|i| generate_subject(cfg, i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioMode {
    /// Exactly one contrast missing.
    Single,
    /// Uniform over every proper nonempty subset of inputs.
    Random,
}

impl std::str::FromStr for ScenarioMode {
    type Err = MmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "random" => Ok(Self::Random),
            _ => Err(MmtError::invalid(format!("unknown scenario mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for ScenarioMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Random => "random",
        })
    }
}

pub fn sample_scenario(n_contrasts: usize, rng: &mut impl Rng, mode: ScenarioMode) -> Result<ContrastScenario> {
    if n_contrasts < 2 {
        return Err(MmtError::invalid("scenarios need at least 2 contrasts"));
    }
    match mode {
        ScenarioMode::Single => {
            let missing = rng.random_range(0..n_contrasts);
            let avail: Vec<usize> = (0..n_contrasts).filter(|&c| c != missing).collect();
            ContrastScenario::new(n_contrasts, &avail)
        }
        ScenarioMode::Random => {
            let bits = rng.random_range(1..(1u32 << n_contrasts) - 1);
            ContrastScenario::from_bits(n_contrasts, bits)
        }
    }
}

/// Serialises a volume into MCV1 bytes.
pub fn encode_volume(vol: &MultiContrastVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(MCV_HEADER + vol.data.len() * 8 + 4);
    out.extend_from_slice(MCV_MAGIC);
    for d in [vol.n_contrasts, vol.depth, vol.height, vol.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[MCV_HEADER..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses MCV1 bytes; `path` is only used in error messages.
pub fn decode_volume(bytes: &[u8], path: &Path, subject_id: &str) -> Result<MultiContrastVolume> {
    if bytes.len() < 4 || &bytes[..4] != MCV_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(MmtError::BadMagic {
            path: path.to_path_buf(),
            expected: "MCV1".into(),
            found,
        });
    }
    if bytes.len() < MCV_HEADER {
        return Err(MmtError::Truncated {
            path: path.to_path_buf(),
            detail: format!("header needs {MCV_HEADER} bytes, file has {}", bytes.len()),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let dims = [dim(0), dim(1), dim(2), dim(3)];
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let need = n
        .and_then(|n| n.checked_mul(8))
        .and_then(|b| b.checked_add(MCV_HEADER + 4))
        .ok_or_else(|| MmtError::Format {
            path: path.to_path_buf(),
            detail: format!("dimensions {dims:?} overflow"),
        })?;
    if bytes.len() < need {
        return Err(MmtError::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {need} bytes for dimensions {dims:?}, file has {}", bytes.len()),
        });
    }
    if bytes.len() > need {
        return Err(MmtError::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - need),
        });
    }
    let payload = &bytes[MCV_HEADER..need - 4];
    let stored = u32::from_le_bytes(bytes[need - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(MmtError::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    MultiContrastVolume::new(subject_id, dims, data)
}

pub fn write_volume(path: &Path, vol: &MultiContrastVolume) -> Result<()> {
    fs::write(path, encode_volume(vol)).map_err(|e| MmtError::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<MultiContrastVolume> {
    let bytes = fs::read(path).map_err(|e| MmtError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_volume(&bytes, path, &id)
}

/// Writes `<root>/<subject_id>.mcv` for every volume plus the index file,
/// one `file [lesion=z0-z1,y0-y1,x0-x1]` line per volume.
pub fn write_dataset(root: &Path, vols: &[MultiContrastVolume]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| MmtError::io(root, e))?;
    let mut index = String::new();
    for v in vols {
        let name = format!("{}.mcv", v.subject_id);
        write_volume(&root.join(&name), v)?;
        index.push_str(&name);
        if let Some(b) = v.lesion {
            index.push_str(" lesion=");
            index.push_str(&b.encode());
        }
        index.push('\n');
    }
    let path = root.join(INDEX_FILE);
    let mut f = fs::File::create(&path).map_err(|e| MmtError::io(&path, e))?;
    f.write_all(index.as_bytes()).map_err(|e| MmtError::io(&path, e))
}

/// Loads the volumes listed in the index, or every `.mcv` file in name
/// order when there is no index.
pub fn read_dataset(root: &Path) -> Result<Vec<MultiContrastVolume>> {
    let index = root.join(INDEX_FILE);
    let entries: Vec<(PathBuf, Option<BoundingBox>)> = if index.exists() {
        let text = fs::read_to_string(&index).map_err(|e| MmtError::io(&index, e))?;
        let mut v = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let file = parts.next().expect("nonempty line");
            let mut lesion = None;
            for extra in parts {
                match extra.strip_prefix("lesion=").and_then(BoundingBox::decode) {
                    Some(b) => lesion = Some(b),
                    None => {
                        return Err(MmtError::Format {
                            path: index.clone(),
                            detail: format!("line {}: cannot parse {extra:?}", n + 1),
                        })
                    }
                }
            }
            v.push((root.join(file), lesion));
        }
        v
    } else {
        let rd = fs::read_dir(root).map_err(|e| MmtError::io(root, e))?;
        let mut files: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "mcv"))
            .collect();
        files.sort();
        files.into_iter().map(|p| (p, None)).collect()
    };
    if entries.is_empty() {
        return Err(MmtError::invalid(format!("no volumes found in {}", root.display())));
    }
    let mut vols = Vec::with_capacity(entries.len());
    for (path, lesion) in entries {
        let mut v = read_volume(&path)?;
        v.lesion = lesion;
        vols.push(v);
    }
    let first = &vols[0];
    let dims = (first.n_contrasts, first.height, first.width);
    if let Some(bad) = vols.iter().find(|v| (v.n_contrasts, v.height, v.width) != dims) {
        return Err(MmtError::invalid(format!(
            "{} does not match the dataset's {}x{}x{} layout",
            bad.subject_id, dims.0, dims.1, dims.2
        )));
    }
    Ok(vols)
}

/// Every slice of every volume as `[P, 1, H, W]`, in volume then depth
/// order.
pub fn slices(vols: &[MultiContrastVolume]) -> Vec<Tensor> {
    vols.iter()
        .flat_map(|v| (0..v.depth).map(move |z| v.slice_tensor(z)))
        .collect()
}
