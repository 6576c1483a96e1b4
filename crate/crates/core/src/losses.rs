//! Dual-view correlation loss, per-view cross-entropy and their sum.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, Window};

/// Probabilities of one case from both views together with its label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPrediction {
    pub p_cc: f64,
    pub p_mlo: f64,
    pub label: u8,
}

impl ViewPrediction {
    /// Case-level score: the mean of the two view probabilities.
    pub fn score(&self) -> f64 {
        0.5 * (self.p_cc + self.p_mlo)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub corr: f64,
    pub clss_cc: f64,
    pub clss_mlo: f64,
    pub total: f64,
}

/// Mean-centred cosine similarity of two vectors of equal length `>= 2`.
pub fn cosine_sim(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if sx.len() != 1 || sx != sy {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            expected: sx,
            got: sy,
        });
    }
    let n = sx[0];
    let a = tape.reshape(x, [1, n])?;
    let b = tape.reshape(y, [1, n])?;
    let s = tape.row_cosine(a, b)?;
    tape.reshape(s, Vec::<usize>::new())
}

/// Negative mean over map rows of the similarity between the flattened
/// `C x W` slices of the two views.
pub fn dual_view_corr_loss(tape: &mut Tape, r_cc: Var, r_mlo: Var) -> Result<Var> {
    let shape = tape.shape(r_cc).to_vec();
    if shape != tape.shape(r_mlo) {
        return Err(Error::ShapeMismatch {
            op: "dual_view_corr_loss",
            expected: shape,
            got: tape.shape(r_mlo).to_vec(),
        });
    }
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "dual_view_corr_loss",
            detail: format!("expected a C x H x W map, got {shape:?}"),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut rows = |r: Var| -> Result<Var> {
        let p = tape.extract_patches(r, Window::Row)?;
        tape.reshape(p, [h, c * w])
    };
    let a = rows(r_cc)?;
    let b = rows(r_mlo)?;
    let sims = tape.row_cosine(a, b)?;
    let m = tape.mean(sims);
    Ok(tape.neg(m))
}

pub fn bce(tape: &mut Tape, p: Var, label: f64) -> Result<Var> {
    tape.bce(p, label)
}

/// Unweighted sum of the available terms. A missing correlation term counts
/// as zero.
pub fn total_loss(tape: &mut Tape, corr: Option<Var>, clss_cc: Var, clss_mlo: Var) -> Result<(Var, LossBreakdown)> {
    let cls = tape.add(clss_cc, clss_mlo)?;
    let total = match corr {
        Some(c) => tape.add(c, cls)?,
        None => cls,
    };
    let breakdown = LossBreakdown {
        corr: corr.map_or(0.0, |c| tape.value(c).item()),
        clss_cc: tape.value(clss_cc).item(),
        clss_mlo: tape.value(clss_mlo).item(),
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}
