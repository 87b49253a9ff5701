//! Decoder cross-attention records and the quantities derived from them.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{MmtError, Result};
use crate::geometry::{window_partition_index, WindowSpec};

/// Head-averaged cross-attention weights of one decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    /// Decoder level, 0 = coarsest.
    pub level: usize,
    /// Block index within the level's pair (0 regular, 1 shifted).
    pub block: usize,
    /// Token grid `(h, w)` at this level.
    pub grid: (usize, usize),
    pub window: WindowSpec,
    /// `[n_windows, area, m·area]`.
    pub weights: Tensor,
}

/// Everything one decode captured, in block order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    /// Zero-based ids of the input contrasts, in key order.
    pub available: Vec<usize>,
    pub target: usize,
    pub layers: Vec<AttentionLayer>,
}

/// Share of decoder cross-attention mass per input contrast.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionReport {
    pub target: usize,
    /// Zero-based input contrasts, aligned with `percentages`.
    pub available: Vec<usize>,
    pub percentages: Vec<f64>,
}

impl ContributionReport {
    pub fn percent_of(&self, contrast: usize) -> Option<f64> {
        self.available.iter().position(|&c| c == contrast).map(|i| self.percentages[i])
    }

    /// `target,input,percent` rows with 1-based contrast numbers.
    pub fn csv(&self) -> String {
        let mut s = String::from("target,input,percent\n");
        for (c, p) in self.available.iter().zip(&self.percentages) {
            s.push_str(&format!("{},{},{:?}\n", self.target + 1, c + 1, p));
        }
        s
    }
}

/// Grid position (`i·w + j`) of every window row of a layer, for a single
/// contrast.
fn window_positions(layer: &AttentionLayer) -> Result<Vec<usize>> {
    let (h, w) = layer.grid;
    window_partition_index(1, h, w, &layer.window)
}

fn check_layer(layer: &AttentionLayer, m: usize) -> Result<(usize, usize)> {
    let s = layer.weights.shape();
    let area = layer.window.area();
    let (h, w) = layer.grid;
    if s.len() != 3 || s[1] != area || s[2] != m * area || s[0] * area != h * w {
        return Err(MmtError::shape(format!(
            "attention layer {:?} does not fit a {h}x{w} grid with {m} inputs and window area {area}",
            s
        )));
    }
    Ok((s[0], area))
}

/// Mass per input contrast over the query tokens selected by `keep`,
/// which sees the layer and the query's grid position.
pub fn contribution_percentages_where(
    record: &AttentionRecord,
    keep: impl Fn(&AttentionLayer, usize) -> bool,
) -> Result<ContributionReport> {
    if record.layers.is_empty() {
        return Err(MmtError::invalid("attention record is empty"));
    }
    let m = record.available.len();
    let mut mass = vec![0.0; m];
    for layer in &record.layers {
        let (n_win, area) = check_layer(layer, m)?;
        let pos = window_positions(layer)?;
        let data = layer.weights.data();
        for win in 0..n_win {
            for q in 0..area {
                if !keep(layer, pos[win * area + q]) {
                    continue;
                }
                let row = &data[(win * area + q) * m * area..][..m * area];
                for (c, chunk) in row.chunks_exact(area).enumerate() {
                    mass[c] += chunk.iter().sum::<f64>();
                }
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(MmtError::invalid("no attention mass in the selected region"));
    }
    Ok(ContributionReport {
        target: record.target,
        available: record.available.clone(),
        percentages: mass.iter().map(|v| 100.0 * (v / total)).collect(),
    })
}

/// Mass per input contrast summed over every decoder block, window and
/// query.
pub fn contribution_percentages(record: &AttentionRecord) -> Result<ContributionReport> {
    contribution_percentages_where(record, |_, _| true)
}

/// Pixel rectangle `[y0, y1) × [x0, x1)` of an `ih × iw` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// Whether grid token `pos` of `layer` covers any pixel of `b` in an
/// `ih × iw` image.
pub fn token_overlaps(layer: &AttentionLayer, pos: usize, b: &PixelBox, image: (usize, usize)) -> bool {
    let (h, w) = layer.grid;
    let (sy, sx) = (image.0 / h, image.1 / w);
    let (i, j) = (pos / w, pos % w);
    i * sy < b.y1 && (i + 1) * sy > b.y0 && j * sx < b.x1 && (j + 1) * sx > b.x0
}

/// Mass received by each key token of `contrast` in decoder layer
/// `layer`, summed over all queries of its window, on the `[h, w]` grid.
pub fn attention_heatmap(record: &AttentionRecord, layer: usize, contrast: usize) -> Result<Tensor> {
    let l = record.layers.get(layer).ok_or_else(|| {
        MmtError::invalid(format!("layer {layer} out of range for {} layers", record.layers.len()))
    })?;
    let c = record.available.iter().position(|&a| a == contrast).ok_or_else(|| {
        MmtError::invalid(format!("contrast {} is not an input of this record", contrast + 1))
    })?;
    let m = record.available.len();
    let (n_win, area) = check_layer(l, m)?;
    let pos = window_positions(l)?;
    let (h, w) = l.grid;
    let mut out = vec![0.0; h * w];
    let data = l.weights.data();
    for win in 0..n_win {
        for q in 0..area {
            let row = &data[(win * area + q) * m * area..][..m * area];
            for k in 0..area {
                out[pos[win * area + k]] += row[c * area + k];
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Heatmaps of every block at decoder `level` (0 = coarsest).
pub fn level_heatmaps(record: &AttentionRecord, level: usize, contrast: usize) -> Result<Vec<Tensor>> {
    let idx: Vec<usize> = (0..record.layers.len()).filter(|&i| record.layers[i].level == level).collect();
    if idx.is_empty() {
        return Err(MmtError::invalid(format!("decoder level {level} out of range")));
    }
    idx.into_iter().map(|i| attention_heatmap(record, i, contrast)).collect()
}

fn grid_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(MmtError::shape(format!("expected a 2-d grid, got {s:?}"))),
    }
}

/// Binary greymap scaled so the maximum maps to 255.
pub fn write_pgm(path: &Path, grid: &Tensor) -> Result<()> {
    let (h, w) = grid_dims(grid)?;
    let max = grid.data().iter().cloned().fold(0.0f64, f64::max);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(grid.data().iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes).map_err(|e| MmtError::io(path, e))
}

/// One CSV line per grid row.
pub fn write_grid_csv(path: &Path, grid: &Tensor) -> Result<()> {
    let (_, w) = grid_dims(grid)?;
    let mut f = fs::File::create(path).map_err(|e| MmtError::io(path, e))?;
    for row in grid.data().chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{}", line.join(",")).map_err(|e| MmtError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Softmax-normalised random rows.
    fn random_layer(rng: &mut ChaCha8Rng, level: usize, grid: (usize, usize), win: WindowSpec, m: usize) -> AttentionLayer {
        let area = win.area();
        let n_win = grid.0 * grid.1 / area;
        let mut data = Vec::new();
        for _ in 0..n_win * area {
            let row: Vec<f64> = (0..m * area).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.into_iter().map(|v| v / s));
        }
        AttentionLayer {
            level,
            block: 0,
            grid,
            window: win,
            weights: Tensor::new(vec![n_win, area, m * area], data).unwrap(),
        }
    }

    fn random_record(seed: u64, m: usize) -> AttentionRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w2 = WindowSpec::new(2, 2).unwrap();
        AttentionRecord {
            available: (0..m).map(|i| i * 2 % 5).collect(),
            target: 4,
            layers: vec![
                random_layer(&mut rng, 0, (2, 2), w2, m),
                random_layer(&mut rng, 1, (4, 4), w2, m),
                random_layer(&mut rng, 1, (4, 4), w2.shifted(), m),
            ],
        }
    }

    #[test]
    fn single_input_gets_everything() {
        let r = contribution_percentages(&random_record(1, 1)).unwrap();
        assert_eq!(r.percentages, vec![100.0]);
    }

    #[test]
    fn uniform_weights_split_evenly() {
        let mut rec = random_record(2, 2);
        for l in &mut rec.layers {
            let n = l.weights.shape()[2] as f64;
            l.weights.data_mut().iter_mut().for_each(|v| *v = 1.0 / n);
        }
        let r = contribution_percentages(&rec).unwrap();
        assert!((r.percentages[0] - 50.0).abs() < 1e-12 && (r.percentages[1] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_column_sums() {
        for seed in 0..5 {
            let rec = random_record(seed, 3);
            let r = contribution_percentages(&rec).unwrap();
            let mut mass = [0.0; 3];
            for l in &rec.layers {
                let s = l.weights.shape().to_vec();
                let area = s[1];
                for win in 0..s[0] {
                    for q in 0..s[1] {
                        for k in 0..s[2] {
                            mass[k / area] += l.weights.data()[(win * s[1] + q) * s[2] + k];
                        }
                    }
                }
            }
            let total: f64 = mass.iter().sum();
            for c in 0..3 {
                assert!((r.percentages[c] - 100.0 * mass[c] / total).abs() < 1e-10);
            }
            assert!((r.percentages.iter().sum::<f64>() - 100.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_record_is_an_error() {
        assert!(contribution_percentages(&AttentionRecord::default()).is_err());
    }

    #[test]
    fn heatmaps_conserve_mass() {
        let rec = random_record(3, 2);
        for (i, l) in rec.layers.iter().enumerate() {
            let maps: Vec<Tensor> = rec.available.iter().map(|&c| attention_heatmap(&rec, i, c).unwrap()).collect();
            assert_eq!(maps[0].shape(), &[l.grid.0, l.grid.1]);
            let total: f64 = maps.iter().flat_map(|m| m.data()).sum();
            assert!((total - (l.grid.0 * l.grid.1) as f64).abs() < 1e-9);
            assert!(maps.iter().flat_map(|m| m.data()).all(|v| v.is_finite() && *v >= 0.0));
        }
        assert_eq!(level_heatmaps(&rec, 1, 0).unwrap().len(), 2);
        assert!(level_heatmaps(&rec, 2, 0).is_err());
        assert!(attention_heatmap(&rec, 0, 1).is_err());
        assert!(attention_heatmap(&rec, 3, 0).is_err());
    }

    #[test]
    fn shifted_layer_maps_keys_to_original_positions() {
        // one-hot rows that always attend to the first key of contrast 0:
        // under a shift that key sits at the window's shifted origin
        let win = WindowSpec::new(2, 2).unwrap().shifted();
        let area = 4;
        let mut data = vec![0.0; 4 * area * area];
        for row in data.chunks_mut(area) {
            row[0] = 1.0;
        }
        let rec = AttentionRecord {
            available: vec![0],
            target: 1,
            layers: vec![AttentionLayer {
                level: 0,
                block: 1,
                grid: (4, 4),
                window: win,
                weights: Tensor::new(vec![4, area, area], data).unwrap(),
            }],
        };
        let map = attention_heatmap(&rec, 0, 0).unwrap();
        let hot: Vec<usize> = (0..16).filter(|&i| map.data()[i] > 0.0).collect();
        assert_eq!(hot, vec![5, 7, 13, 15]);
    }

    #[test]
    fn region_restriction() {
        let rec = random_record(4, 2);
        let b = PixelBox { y0: 0, y1: 4, x0: 0, x1: 4 };
        let r = contribution_percentages_where(&rec, |l, p| token_overlaps(l, p, &b, (16, 16))).unwrap();
        assert!((r.percentages.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        assert!(contribution_percentages_where(&rec, |_, _| false).is_err());
        let l = &rec.layers[1];
        assert!(token_overlaps(l, 0, &b, (16, 16)));
        assert!(!token_overlaps(l, 1, &b, (16, 16)));
    }

    #[test]
    fn exports() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 8.0]).unwrap();
        write_pgm(&dir.path().join("a.pgm"), &t).unwrap();
        let bytes = fs::read(dir.path().join("a.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(*bytes.last().unwrap(), 255);
        write_grid_csv(&dir.path().join("a.csv"), &t).unwrap();
        let text = fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(text, "0.0,1.0,2.0\n3.0,4.0,8.0\n");
        let rep = ContributionReport { target: 1, available: vec![0, 2], percentages: vec![25.0, 75.0] };
        assert_eq!(rep.csv(), "target,input,percent\n2,1,25.0\n2,3,75.0\n");
        assert_eq!(rep.percent_of(2), Some(75.0));
    }
}
