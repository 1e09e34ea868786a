//! Detection metrics: threshold at a target TPR, FPR95, AUROC, ID
//! accuracy, score histograms and report export.
//!
//! Scores are higher-is-ID and the detector accepts `score >= τ`. FPR95
//! uses exact order statistics (no ROC interpolation) and AUROC is the
//! Mann-Whitney statistic with ties counted as one half, computed from
//! integer counts so it agrees exactly with a pairwise comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::model::MlpModel;

pub const DEFAULT_TPR: f64 = 0.95;
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr95: f64,
    pub auroc: f64,
    #[serde(rename = "acc")]
    pub id_accuracy: f64,
    pub tau: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub hist_id: Vec<usize>,
    pub hist_ood: Vec<usize>,
    pub bin_edges: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

fn check_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidInput(format!("{what} scores are empty")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("{what} scores contain NaN")));
    }
    Ok(())
}

/// Smallest count `c` with `c / n >= tpr`.
fn required_count(n: usize, tpr: f64) -> usize {
    let nf = n as f64;
    let mut c = ((tpr * nf).ceil() as usize).clamp(1, n);
    while c > 1 && (c - 1) as f64 / nf >= tpr {
        c -= 1;
    }
    while c < n && (c as f64 / nf) < tpr {
        c += 1;
    }
    c
}

/// Largest `τ` such that the fraction of ID scores `>= τ` is at least `tpr`.
pub fn threshold_at_tpr(id_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores(id_scores, "ID")?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::InvalidInput(format!("target TPR {tpr} outside (0, 1]")));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(sorted[n - required_count(n, tpr)])
}

/// Fraction of OOD scores accepted (`>= τ`) at the ID threshold for `tpr`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores(ood_scores, "OOD")?;
    let tau = threshold_at_tpr(id_scores, tpr)?;
    Ok(ood_scores.iter().filter(|&&s| s >= tau).count() as f64 / ood_scores.len() as f64)
}

/// `P(ID > OOD) + ½ P(ID = OOD)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores, "ID")?;
    check_scores(ood_scores, "OOD")?;
    let mut ood = ood_scores.to_vec();
    ood.sort_by(f64::total_cmp);
    let mut twice: u128 = 0;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * id_scores.len() as u128 * ood.len() as u128) as f64)
}

/// Fraction of rows whose argmax over the first `K` logits (lowest index on
/// ties) matches the label.
pub fn id_accuracy(model: &MlpModel, id_test: &LabeledBatch) -> Result<f64> {
    if id_test.is_empty() {
        return Err(Error::InvalidInput("ID test set is empty".into()));
    }
    let k = model.num_classes();
    let logits = model.forward(&id_test.features)?.logits;
    let correct = logits
        .row_iter()
        .zip(&id_test.labels)
        .filter(|(row, &y)| {
            let pred = row[..k]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            pred + 1 == y as usize
        })
        .count();
    Ok(correct as f64 / id_test.len() as f64)
}

/// Uniform bins over the joint score range; the last bin is closed.
pub fn histogram(id_scores: &[f64], ood_scores: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let all = id_scores.iter().chain(ood_scores);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    if !(lo < hi) {
        let mid = if lo.is_finite() { lo } else { 0.0 };
        lo = mid - 0.5;
        hi = mid + 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let count = |scores: &[f64]| {
        let mut h = vec![0usize; bins];
        for &s in scores {
            let b = (((s - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
            h[b] += 1;
        }
        h
    };
    let (hi_id, hi_ood) = (count(id_scores), count(ood_scores));
    (edges, hi_id, hi_ood)
}

pub fn evaluate(id_scores: &[f64], ood_scores: &[f64], id_accuracy: f64) -> Result<EvalReport> {
    let tau = threshold_at_tpr(id_scores, DEFAULT_TPR)?;
    let fpr95 = fpr_at_tpr(id_scores, ood_scores, DEFAULT_TPR)?;
    let auroc = auroc(id_scores, ood_scores)?;
    let (bin_edges, hist_id, hist_ood) = histogram(id_scores, ood_scores, HISTOGRAM_BINS);
    Ok(EvalReport {
        fpr95,
        auroc,
        id_accuracy,
        tau,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
        hist_id,
        hist_ood,
        bin_edges,
    })
}

impl EvalReport {
    fn validate(&self) -> Result<()> {
        if self.n_id == 0 || self.n_ood == 0 {
            return Err(Error::InvalidInput(format!(
                "report needs ID and OOD samples (n_id = {}, n_ood = {})",
                self.n_id, self.n_ood
            )));
        }
        if self.hist_id.iter().sum::<usize>() != self.n_id
            || self.hist_ood.iter().sum::<usize>() != self.n_ood
        {
            return Err(Error::InvalidInput("histogram counts do not sum to n_id / n_ood".into()));
        }
        if self.bin_edges.len() != self.hist_id.len() + 1 || self.hist_id.len() != self.hist_ood.len() {
            return Err(Error::InvalidInput("histogram shape mismatch".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Metrics row, then one row per histogram bin, then a checksum footer
    /// carrying the histogram totals.
    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let mut s = String::from("fpr95,auroc,acc,tau,n_id,n_ood\n");
        writeln!(
            s,
            "{},{},{},{},{},{}",
            self.fpr95, self.auroc, self.id_accuracy, self.tau, self.n_id, self.n_ood
        )
        .unwrap();
        s.push_str("bin_lo,bin_hi,id_count,ood_count\n");
        for i in 0..self.hist_id.len() {
            writeln!(
                s,
                "{},{},{},{}",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                self.hist_id[i],
                self.hist_ood[i]
            )
            .unwrap();
        }
        writeln!(
            s,
            "checksum,{},{}",
            self.hist_id.iter().sum::<usize>(),
            self.hist_ood.iter().sum::<usize>()
        )
        .unwrap();
        Ok(s)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::parse(format!("line {line}"), m.to_string());
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 5 || lines[0] != "fpr95,auroc,acc,tau,n_id,n_ood" {
            return Err(bad(1, "missing metrics header"));
        }
        let m: Vec<&str> = lines[1].split(',').collect();
        if m.len() != 6 {
            return Err(bad(2, "metrics row needs 6 fields"));
        }
        let f = |i: usize| m[i].parse::<f64>().map_err(|_| bad(2, "bad number"));
        let u = |i: usize| m[i].parse::<usize>().map_err(|_| bad(2, "bad count"));
        let (fpr95, auroc, id_accuracy, tau, n_id, n_ood) = (f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?);
        if lines[2] != "bin_lo,bin_hi,id_count,ood_count" {
            return Err(bad(3, "missing histogram header"));
        }
        let mut bin_edges = Vec::new();
        let mut hist_id = Vec::new();
        let mut hist_ood = Vec::new();
        let last = lines.len() - 1;
        for (i, line) in lines.iter().enumerate().take(last).skip(3) {
            let p: Vec<&str> = line.split(',').collect();
            if p.len() != 4 {
                return Err(bad(i + 1, "histogram row needs 4 fields"));
            }
            let lo: f64 = p[0].parse().map_err(|_| bad(i + 1, "bad edge"))?;
            let hi: f64 = p[1].parse().map_err(|_| bad(i + 1, "bad edge"))?;
            if bin_edges.is_empty() {
                bin_edges.push(lo);
            }
            bin_edges.push(hi);
            hist_id.push(p[2].parse().map_err(|_| bad(i + 1, "bad count"))?);
            hist_ood.push(p[3].parse().map_err(|_| bad(i + 1, "bad count"))?);
        }
        let footer: Vec<&str> = lines[last].split(',').collect();
        if footer.len() != 3 || footer[0] != "checksum" {
            return Err(bad(last + 1, "missing checksum footer"));
        }
        let sums = (
            footer[1].parse::<usize>().map_err(|_| bad(last + 1, "bad checksum"))?,
            footer[2].parse::<usize>().map_err(|_| bad(last + 1, "bad checksum"))?,
        );
        if sums != (hist_id.iter().sum(), hist_ood.iter().sum()) {
            return Err(bad(last + 1, "checksum does not match histogram"));
        }
        let r = EvalReport {
            fpr95,
            auroc,
            id_accuracy,
            tau,
            n_id,
            n_ood,
            hist_id,
            hist_ood,
            bin_edges,
        };
        r.validate()?;
        Ok(r)
    }
}

/// Writes the report; nothing is written if the report is invalid.
pub fn export_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv()?,
    };
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<EvalReport> {
    let text = fs::read_to_string(path)?;
    match format {
        ReportFormat::Json => EvalReport::from_json(&text),
        ReportFormat::Csv => EvalReport::from_csv(&text),
    }
}
