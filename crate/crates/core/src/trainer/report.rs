use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::LossKind;
use crate::error::Result;

/// Column order of the report CSV. Frozen.
pub const REPORT_COLUMNS: [&str; 11] = [
    "seed",
    "generation",
    "teacher_noise",
    "loss_kind",
    "csl_fraction",
    "pretrain_steps",
    "finetune_frames",
    "frame_error_rate",
    "pretrain_loss_start",
    "pretrain_loss_end",
    "werr_pct",
];

/// `100 · (baseline − candidate) / baseline`.
pub fn relative_improvement(baseline: f64, candidate: f64) -> f64 {
    100.0 * (baseline - candidate) / baseline
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub generation: usize,
    pub teacher_noise: f64,
    pub loss_kind: LossKind,
    pub csl_fraction: f64,
    pub pretrain_steps: usize,
    pub finetune_frames: usize,
    pub frame_error_rate: f64,
    pub pretrain_loss_start: f64,
    pub pretrain_loss_end: f64,
    /// Improvement over the CE-PL row with the same seed, generation and
    /// noise level. Empty for CE-PL rows.
    pub werr_pct: Option<f64>,
}

/// Seed-averaged view of one (generation, noise, method, fraction) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub generation: usize,
    pub teacher_noise: f64,
    pub loss_kind: LossKind,
    pub csl_fraction: f64,
    pub seeds: usize,
    pub frame_error_rate: f64,
    pub werr_pct: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

fn same_cell(a: &ReportRow, b: &ReportRow) -> bool {
    a.seed == b.seed && a.generation == b.generation && a.teacher_noise == b.teacher_noise
}

impl ExperimentReport {
    /// Builds a report and fills the relative-improvement column.
    pub fn new(mut rows: Vec<ReportRow>) -> Self {
        let baselines: Vec<ReportRow> = rows.iter().filter(|r| r.loss_kind == LossKind::CePl).cloned().collect();
        for r in rows.iter_mut() {
            r.werr_pct = match r.loss_kind {
                LossKind::CePl => None,
                LossKind::Csl => baselines
                    .iter()
                    .find(|b| same_cell(b, r))
                    .map(|b| relative_improvement(b.frame_error_rate, r.frame_error_rate)),
            };
        }
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            csv.write_record([
                r.seed.to_string(),
                r.generation.to_string(),
                r.teacher_noise.to_string(),
                r.loss_kind.to_string(),
                r.csl_fraction.to_string(),
                r.pretrain_steps.to_string(),
                r.finetune_frames.to_string(),
                r.frame_error_rate.to_string(),
                r.pretrain_loss_start.to_string(),
                r.pretrain_loss_end.to_string(),
                r.werr_pct.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Mean frame error of the rows matching the cell, over all seeds.
    pub fn mean_error(&self, generation: usize, teacher_noise: f64, kind: LossKind, csl_fraction: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.generation == generation
                    && r.teacher_noise == teacher_noise
                    && r.loss_kind == kind
                    && r.csl_fraction == csl_fraction
            })
            .map(|r| r.frame_error_rate)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Cells in order of first appearance, with improvement computed on the
    /// seed means.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut cells: Vec<SummaryRow> = Vec::new();
        for r in &self.rows {
            let known = cells.iter().any(|c| {
                c.generation == r.generation
                    && c.teacher_noise == r.teacher_noise
                    && c.loss_kind == r.loss_kind
                    && c.csl_fraction == r.csl_fraction
            });
            if known {
                continue;
            }
            let members = self
                .rows
                .iter()
                .filter(|o| {
                    o.generation == r.generation
                        && o.teacher_noise == r.teacher_noise
                        && o.loss_kind == r.loss_kind
                        && o.csl_fraction == r.csl_fraction
                })
                .count();
            cells.push(SummaryRow {
                generation: r.generation,
                teacher_noise: r.teacher_noise,
                loss_kind: r.loss_kind,
                csl_fraction: r.csl_fraction,
                seeds: members,
                frame_error_rate: self
                    .mean_error(r.generation, r.teacher_noise, r.loss_kind, r.csl_fraction)
                    .unwrap_or(f64::NAN),
                werr_pct: None,
            });
        }
        let baseline: Vec<(usize, f64, f64)> = cells
            .iter()
            .filter(|c| c.loss_kind == LossKind::CePl)
            .map(|c| (c.generation, c.teacher_noise, c.frame_error_rate))
            .collect();
        for c in cells.iter_mut().filter(|c| c.loss_kind == LossKind::Csl) {
            c.werr_pct = baseline
                .iter()
                .find(|(g, e, _)| *g == c.generation && *e == c.teacher_noise)
                .map(|&(_, _, b)| relative_improvement(b, c.frame_error_rate));
        }
        cells
    }

    /// Fixed-width summary table; improvement printed with one decimal.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>10} {:>6} {:>6} {:>9} {:>5} {:>9} {:>8}",
            "generation", "noise", "loss", "csl_frac", "seeds", "fer_pct", "werr_pct"
        );
        for c in self.summary() {
            let werr = c.werr_pct.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:>10} {:>6.2} {:>6} {:>9.2} {:>5} {:>9.2} {:>8}",
                c.generation,
                c.teacher_noise,
                c.loss_kind.to_string(),
                c.csl_fraction,
                c.seeds,
                100.0 * c.frame_error_rate,
                werr
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(seed: u64, kind: LossKind, fer: f64) -> ReportRow {
        ReportRow {
            seed,
            generation: 1,
            teacher_noise: 0.2,
            loss_kind: kind,
            csl_fraction: if kind == LossKind::Csl { 1.0 } else { 0.0 },
            pretrain_steps: 10,
            finetune_frames: 100,
            frame_error_rate: fer,
            pretrain_loss_start: 1.0,
            pretrain_loss_end: 0.5,
            werr_pct: None,
        }
    }

    #[test]
    fn improvement_formula_one_decimal() {
        assert_eq!(format!("{:.1}", relative_improvement(32.0, 29.4)), "8.1");
        let rep = ExperimentReport::new(vec![r(0, LossKind::Csl, 0.294), r(0, LossKind::CePl, 0.320)]);
        assert!(rep.summary_table().contains(" 8.1"));
    }

    #[test]
    fn werr_pairs_rows_by_seed() {
        let rep = ExperimentReport::new(vec![
            r(0, LossKind::Csl, 0.25),
            r(0, LossKind::CePl, 0.5),
            r(1, LossKind::Csl, 0.5),
            r(1, LossKind::CePl, 0.5),
        ]);
        assert_eq!(rep.rows[0].werr_pct, Some(50.0));
        assert_eq!(rep.rows[1].werr_pct, None);
        assert_eq!(rep.rows[2].werr_pct, Some(0.0));
        let s = rep.summary();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].seeds, 2);
        assert!((s[0].werr_pct.unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn csv_header_and_shape() {
        let rep = ExperimentReport::new(vec![r(3, LossKind::Csl, 0.1), r(3, LossKind::CePl, 0.2)]);
        let s = rep.to_csv_string().unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], REPORT_COLUMNS.join(","));
        assert!(lines[2].ends_with(','));
    }
}
