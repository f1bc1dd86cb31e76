//! Aggregation of per-pair metrics into sequence, subset and global rows,
//! plus the human-readable table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::hpatches::{Skipped, Subset};
use super::{EvalConfig, PairMetrics};

/// Published aggregate of the full method at 240×320, printed for comparison:
/// repeatability, localisation error, Cor-3 and matching score.
pub const REFERENCE_240X320: (f64, f64, f64, f64) = (0.686, 0.890, 0.867, 0.544);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n − 1) standard deviation; std is 0 for one value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Aggregate over a group of pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub pairs: usize,
    /// Mean over pairs where repeatability is defined.
    pub repeatability: Option<f64>,
    pub localization_error: Option<f64>,
    /// One entry per homography threshold: mean ± std over seeds of the
    /// fraction of correct pairs.
    pub cor: Vec<MeanStd>,
    pub matching_score: f64,
    /// Pairs whose repeatability or localisation error was undefined.
    pub undefined: usize,
}

impl Summary {
    pub fn of(name: &str, pairs: &[&PairMetrics], thresholds: usize, seeds: usize) -> Self {
        let mean_some = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        let rep = mean_some(pairs.iter().filter_map(|p| p.repeatability).collect());
        let loc = mean_some(pairs.iter().filter_map(|p| p.localization_error).collect());
        let undefined = pairs.iter().filter(|p| p.repeatability.is_none() || p.localization_error.is_none()).count();
        let ms = if pairs.is_empty() { 0.0 } else { pairs.iter().map(|p| p.matching_score).sum::<f64>() / pairs.len() as f64 };
        let cor = (0..thresholds)
            .map(|t| {
                let per_seed: Vec<f64> = (0..seeds)
                    .map(|s| {
                        let ok = pairs.iter().filter(|p| p.correct[s][t]).count();
                        if pairs.is_empty() { 0.0 } else { ok as f64 / pairs.len() as f64 }
                    })
                    .collect();
                MeanStd::of(&per_seed)
            })
            .collect();
        Self { name: name.to_string(), pairs: pairs.len(), repeatability: rep, localization_error: loc, cor, matching_score: ms, undefined }
    }
}

/// Full evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub pairs: Vec<PairMetrics>,
    pub sequences: Vec<Summary>,
    /// `illumination`, `viewpoint` (when present) and `all`.
    pub aggregates: Vec<Summary>,
    pub skipped: Vec<Skipped>,
}

impl EvalReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>, skipped: Vec<Skipped>, config: &EvalConfig) -> Self {
        let (nt, ns) = (config.homography_thresholds.len(), config.seeds.len());
        let mut by_seq: BTreeMap<&str, Vec<&PairMetrics>> = BTreeMap::new();
        for p in &pairs {
            by_seq.entry(&p.sequence).or_default().push(p);
        }
        let sequences = by_seq.iter().map(|(name, ps)| Summary::of(name, ps, nt, ns)).collect();
        let mut aggregates = Vec::new();
        for subset in [Subset::Illumination, Subset::Viewpoint] {
            let ps: Vec<&PairMetrics> = pairs.iter().filter(|p| p.subset == Some(subset)).collect();
            if !ps.is_empty() {
                aggregates.push(Summary::of(&subset.to_string(), &ps, nt, ns));
            }
        }
        let all: Vec<&PairMetrics> = pairs.iter().collect();
        aggregates.push(Summary::of("all", &all, nt, ns));
        Self { config: config.clone(), pairs, sequences, aggregates, skipped }
    }

    pub fn overall(&self) -> &Summary {
        self.aggregates.last().expect("report always has an `all` row")
    }

    /// Fixed-width table of the aggregate rows plus the published reference.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let thresholds = &self.config.homography_thresholds;
        let _ = write!(out, "{:<14} {:>6} {:>8} {:>8}", "subset", "pairs", "Repeat", "Loc");
        for t in thresholds {
            let _ = write!(out, " {:>15}", format!("Cor-{t}"));
        }
        let _ = writeln!(out, " {:>8}", "M.Score");
        for s in &self.aggregates {
            out.push_str(&summary_row(s));
        }
        if self.config.resolution == [240, 320] {
            let (r, l, c3, m) = REFERENCE_240X320;
            let _ = write!(out, "{:<14} {:>6} {:>8.3} {:>8.3}", "published", "-", r, l);
            for t in thresholds {
                let cell = if *t == 3.0 { format!("{c3:.3}") } else { "-".into() };
                let _ = write!(out, " {cell:>15}");
            }
            let _ = writeln!(out, " {m:>8.3}");
        }
        for s in &self.skipped {
            let _ = writeln!(out, "skipped {}: {}", s.sequence, s.reason);
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

/// One formatted table row.
pub fn summary_row(s: &Summary) -> String {
    let mut row = format!("{:<14} {:>6} {:>8} {:>8}", s.name, s.pairs, opt(s.repeatability), opt(s.localization_error));
    for c in &s.cor {
        row.push_str(&format!(" {:>15}", format!("{:.3}±{:.3}", c.mean, c.std)));
    }
    row.push_str(&format!(" {:>8.3}\n", s.matching_score));
    row
}
