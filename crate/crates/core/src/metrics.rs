//! Case-level decisions, accuracy and ROC AUC.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

/// Averages the view probabilities and thresholds strictly above 0.5.
pub fn predict_case(p_cc: f64, p_mlo: f64) -> (f64, bool) {
    let p = 0.5 * (p_cc + p_mlo);
    (p, p > 0.5)
}

/// Mann-Whitney estimate of the AUC: the fraction of (positive, negative)
/// pairs ranked correctly, ties counting one half.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_auc",
            expected: vec![scores.len()],
            got: vec![labels.len()],
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk groups of equal scores; every positive beats the negatives seen in
    // earlier groups and ties with those of its own group. Counts stay
    // integral (in halves) so the result is exact.
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * positives * negatives) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CasePrediction {
    pub case_id: String,
    pub p_cc: f64,
    pub p_mlo: f64,
    pub p_avg: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auc: f64,
    pub per_case: Vec<CasePrediction>,
    pub loss_trace: Vec<LossBreakdown>,
}

impl MetricsReport {
    pub fn from_predictions(per_case: Vec<CasePrediction>, loss_trace: Vec<LossBreakdown>) -> Result<Self> {
        let correct = per_case
            .iter()
            .filter(|c| (c.p_avg > 0.5) == (c.label == 1))
            .count();
        let accuracy = correct as f64 / per_case.len().max(1) as f64;
        let scores: Vec<f64> = per_case.iter().map(|c| c.p_avg).collect();
        let labels: Vec<u8> = per_case.iter().map(|c| c.label).collect();
        let auc = compute_auc(&scores, &labels)?;
        Ok(Self {
            accuracy,
            auc,
            per_case,
            loss_trace,
        })
    }

    pub fn summary_line(&self) -> String {
        format!("accuracy={} auc={}", self.accuracy, self.auc)
    }

    pub fn per_case_csv(&self) -> String {
        let mut s = String::from("case_id,p_cc,p_mlo,p_avg,label\n");
        for c in &self.per_case {
            let _ = writeln!(s, "{},{},{},{},{}", c.case_id, c.p_cc, c.p_mlo, c.p_avg, c.label);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("predictions.csv", self.per_case_csv())?;
        write("summary.txt", self.summary_line() + "\n")?;
        if !self.loss_trace.is_empty() {
            write("loss_trace.csv", loss_trace_csv(&self.loss_trace))?;
        }
        Ok(())
    }
}

pub fn loss_trace_csv(trace: &[LossBreakdown]) -> String {
    let mut s = String::from("epoch,corr,clss_cc,clss_mlo,total\n");
    for (e, b) in trace.iter().enumerate() {
        let _ = writeln!(s, "{e},{},{},{},{}", b.corr, b.clss_cc, b.clss_mlo, b.total);
    }
    s
}
