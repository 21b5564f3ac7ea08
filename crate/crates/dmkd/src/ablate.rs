//! Ablation grids over masking variants and attention thresholds.
//!
//! A grid is a list of [`AblationCell`]s crossed with a seed list; every
//! cell × seed pair is one full distillation run. Results land in an
//! [`AblationTable`]: one raw row per run plus a mean ± std summary row per
//! cell, rendered as CSV with every real number at full 17-significant-digit
//! precision so the file parses back to the exact same values.

use crate::data::SyntheticDataset;
use crate::distill::{DistillConfig, Variant};
use crate::error::{DmkdError, Result};
use crate::model::ToyModel;
use crate::report::RunReport;
use crate::train::{distill_run, TrainConfig};

/// One grid cell: a masking variant at a threshold pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub variant: Variant,
    pub tau_s: f64,
    pub tau_c: f64,
}

/// One raw result row: a single cell × seed run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub tau_s: f64,
    pub tau_c: f64,
    pub seed: u64,
    pub final_accuracy: f64,
    pub mean_mask_ratio_s: f64,
    pub mean_mask_ratio_c: f64,
}

/// Per-cell aggregate over the seed list.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub variant: Variant,
    pub tau_s: f64,
    pub tau_c: f64,
    pub n_seeds: usize,
    pub mean_accuracy: f64,
    /// Population standard deviation: the seed list is the entire population
    /// under study, not a sample from a larger one.
    pub std_accuracy: f64,
    pub mean_mask_ratio_s: f64,
    pub mean_mask_ratio_c: f64,
}

/// Raw rows in grid order plus one summary row per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<AblationSummary>,
}

/// The masking-strategy comparison: dual masking against each branch alone
/// and against no masking at all, everything at the default thresholds.
pub fn masking_grid() -> Vec<AblationCell> {
    let d = DistillConfig::default();
    [Variant::Dual, Variant::SpatialOnly, Variant::ChannelOnly, Variant::NoMask]
        .into_iter()
        .map(|variant| AblationCell { variant, tau_s: d.tau_s, tau_c: d.tau_c })
        .collect()
}

/// The threshold sweep: first τ_s over {0.45, 0.55, 0.65} at the default
/// τ_c, then τ_c over {0.55, 0.65, 0.75} at the default τ_s — six cells,
/// all under dual masking. The default pair appears in both sweeps, so the
/// table carries its row twice; keeping the duplicate preserves each sweep
/// as a complete, self-contained section.
pub fn threshold_grid() -> Vec<AblationCell> {
    let d = DistillConfig::default();
    let mut cells = Vec::with_capacity(6);
    for tau_s in [0.45, 0.55, 0.65] {
        cells.push(AblationCell { variant: Variant::Dual, tau_s, tau_c: d.tau_c });
    }
    for tau_c in [0.55, 0.65, 0.75] {
        cells.push(AblationCell { variant: Variant::Dual, tau_s: d.tau_s, tau_c });
    }
    cells
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// Mean of the per-epoch mask-ratio means over a whole run; 0 for a run
/// with no epochs.
fn run_ratio(report: &RunReport, pick: impl Fn(&crate::report::EpochRecord) -> f64) -> f64 {
    if report.epochs.is_empty() {
        0.0
    } else {
        mean(report.epochs.iter().map(pick), report.epochs.len())
    }
}

/// Runs every cell × seed combination sequentially in grid order against one
/// shared teacher and dataset. Each run is fully seeded and isolated, so the
/// merge order — and therefore the table — is deterministic.
pub fn run_grid(
    teacher: &ToyModel,
    dataset: &SyntheticDataset,
    cells: &[AblationCell],
    seeds: &[u64],
    base: &DistillConfig,
    tcfg: &TrainConfig,
) -> Result<AblationTable> {
    if cells.is_empty() {
        return Err(DmkdError::ConfigInvalid("ablation grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(DmkdError::ConfigInvalid("ablation seed list is empty".into()));
    }

    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for cell in cells {
        for &seed in seeds {
            let dcfg = DistillConfig {
                variant: cell.variant,
                tau_s: cell.tau_s,
                tau_c: cell.tau_c,
                seed,
                ..base.clone()
            };
            let (_, _, report) = distill_run(teacher, dataset, &dcfg, tcfg)?;
            rows.push(AblationRow {
                variant: cell.variant,
                tau_s: cell.tau_s,
                tau_c: cell.tau_c,
                seed,
                final_accuracy: report.final_test_accuracy,
                mean_mask_ratio_s: run_ratio(&report, |e| e.mean_mask_ratio_s),
                mean_mask_ratio_c: run_ratio(&report, |e| e.mean_mask_ratio_c),
            });
        }
    }

    let summaries = cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let chunk = &rows[i * seeds.len()..(i + 1) * seeds.len()];
            let n = chunk.len();
            let mean_accuracy = mean(chunk.iter().map(|r| r.final_accuracy), n);
            let variance =
                mean(chunk.iter().map(|r| (r.final_accuracy - mean_accuracy).powi(2)), n);
            AblationSummary {
                variant: cell.variant,
                tau_s: cell.tau_s,
                tau_c: cell.tau_c,
                n_seeds: n,
                mean_accuracy,
                std_accuracy: variance.sqrt(),
                mean_mask_ratio_s: mean(chunk.iter().map(|r| r.mean_mask_ratio_s), n),
                mean_mask_ratio_c: mean(chunk.iter().map(|r| r.mean_mask_ratio_c), n),
            }
        })
        .collect();

    Ok(AblationTable { rows, summaries })
}

/// Every real number is written as `{:.16e}` — 17 significant digits, enough
/// for any f64 to survive a parse round-trip bit-exactly.
fn real(v: f64) -> String {
    format!("{:.16e}", v)
}

impl AblationTable {
    /// Renders the table: a raw-rows block, a blank line, then the summary
    /// block. UTF-8, `\n` line endings, one header row per block.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("variant,tau_s,tau_c,seed,final_accuracy,mean_mask_ratio_s,mean_mask_ratio_c\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant,
                real(r.tau_s),
                real(r.tau_c),
                r.seed,
                real(r.final_accuracy),
                real(r.mean_mask_ratio_s),
                real(r.mean_mask_ratio_c),
            ));
        }
        out.push('\n');
        out.push_str(
            "variant,tau_s,tau_c,n_seeds,mean_accuracy,std_accuracy,mean_mask_ratio_s,mean_mask_ratio_c\n",
        );
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.variant,
                real(s.tau_s),
                real(s.tau_c),
                s.n_seeds,
                real(s.mean_accuracy),
                real(s.std_accuracy),
                real(s.mean_mask_ratio_s),
                real(s.mean_mask_ratio_c),
            ));
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
