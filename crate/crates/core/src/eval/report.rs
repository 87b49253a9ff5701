//! Per-scenario PSNR/SSIM tables keyed by availability bitstrings.

use crate::diffcore::{Graph, Tensor};
use crate::error::{MmtError, Result};
use crate::eval::metrics::{format_db, psnr_ref, ssim};
use crate::model::{ContrastScenario, Mmt};
use crate::training::select_contrasts;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioSet {
    /// Every nonempty proper subset of inputs.
    All,
    /// Exactly one contrast missing.
    Single,
}

impl std::str::FromStr for ScenarioSet {
    type Err = MmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "single" => Ok(Self::Single),
            _ => Err(MmtError::invalid(format!("unknown scenario set {s:?}"))),
        }
    }
}

impl ScenarioSet {
    pub fn scenarios(self, n_contrasts: usize) -> Vec<ContrastScenario> {
        match self {
            Self::All => ContrastScenario::all(n_contrasts),
            Self::Single => ContrastScenario::single_missing(n_contrasts),
        }
    }
}

/// Population mean and standard deviation; infinite values make both
/// infinite.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.iter().any(|v| v.is_infinite()) {
        return (f64::INFINITY, f64::INFINITY);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metrics of one synthesised contrast over all evaluated slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl Cell {
    pub fn psnr_text(&self) -> String {
        let (m, s) = mean_std(&self.psnr);
        if m.is_infinite() {
            "inf".to_string()
        } else {
            format!("{} ± {:.2}", format_db(m), s)
        }
    }

    pub fn ssim_text(&self) -> String {
        let (m, s) = mean_std(&self.ssim);
        format!("{m:.4} ± {s:.4}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRow {
    pub scenario: ContrastScenario,
    /// One entry per contrast; `None` where the contrast was an input.
    pub cells: Vec<Option<Cell>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_contrasts: usize,
    pub rows: Vec<ScenarioRow>,
}

/// Synthesises every missing contrast of every slice under each scenario.
pub fn evaluate(model: &Mmt, slices: &[Tensor], set: ScenarioSet) -> Result<EvalReport> {
    if slices.is_empty() {
        return Err(MmtError::invalid("evaluation set is empty"));
    }
    let p = model.config.n_contrasts;
    let mut rows = Vec::new();
    for sc in set.scenarios(p) {
        let mut cells: Vec<Option<Cell>> = (0..p)
            .map(|c| {
                sc.missing.contains(&c).then(|| Cell {
                    psnr: Vec::new(),
                    ssim: Vec::new(),
                })
            })
            .collect();
        for slice in slices {
            let s = slice.shape();
            if s.len() != 4 || s[0] != p {
                return Err(MmtError::shape(format!("slice {s:?} does not hold {p} contrasts")));
            }
            let (h, w) = (s[2], s[3]);
            let mut g = Graph::no_grad();
            let x = g.constant(select_contrasts(slice, &sc.available));
            let outs = model.forward(&mut g, x, &sc.available, &sc.missing)?;
            for (&o, &t) in outs.iter().zip(&sc.missing) {
                let truth = select_contrasts(slice, &[t]);
                let est = g.value(o).data();
                let cell = cells[t].as_mut().expect("missing contrast has a cell");
                cell.psnr.push(psnr_ref(est, truth.data())?);
                cell.ssim.push(ssim(est, truth.data(), h, w)?);
            }
        }
        rows.push(ScenarioRow { scenario: sc, cells });
    }
    Ok(EvalReport { n_contrasts: p, rows })
}

impl EvalReport {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["scenario".to_string()];
        for c in 1..=self.n_contrasts {
            h.push(format!("psnr_{c}"));
            h.push(format!("ssim_{c}"));
        }
        h
    }

    fn cells(&self, row: &ScenarioRow) -> Vec<String> {
        let mut v = vec![row.scenario.bitstring()];
        for cell in &row.cells {
            match cell {
                Some(c) => {
                    v.push(c.psnr_text());
                    v.push(c.ssim_text());
                }
                None => {
                    v.push("-".into());
                    v.push("-".into());
                }
            }
        }
        v
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&self.cells(row).join(","));
            s.push('\n');
        }
        s
    }

    /// Fixed-width table for terminals.
    pub fn to_text(&self) -> String {
        let mut table = vec![self.header()];
        table.extend(self.rows.iter().map(|r| self.cells(r)));
        let widths: Vec<usize> = (0..table[0].len())
            .map(|i| table.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:>w$}"))
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}
