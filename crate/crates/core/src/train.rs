//! Mini-batch training loop and evaluation.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint;
use crate::dataset::DualViewCase;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{self, CasePrediction, MetricsReport};
use crate::model::{case_loss, model_forward, DchaModel};
use crate::optim::{adam_step, learning_rate, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::preprocess::{augment, PreprocessConfig};
use crate::seeding::{rng, sub_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplier applied to the learning rate once per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub val_fraction: f64,
    /// Applies a shared random rotation and flip to each training case.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-5,
            lr_decay: 0.9,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            val_fraction: 0.2,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("train.lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("train.lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("train.val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Case-averaged loss breakdown.
fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.corr += b.corr;
        m.clss_cc += b.clss_cc;
        m.clss_mlo += b.clss_mlo;
        m.total += b.total;
    }
    m.corr /= n;
    m.clss_cc /= n;
    m.clss_mlo /= n;
    m.total /= n;
    m
}

/// Trains in place and returns the per-epoch mean loss breakdown. When a
/// checkpoint directory is given, `epoch_{e}.ckpt`, `last.ckpt` and
/// `loss_trace.csv` are written after every epoch.
pub fn train(
    model: &mut DchaModel,
    cases: &[DualViewCase],
    cfg: &TrainConfig,
    aug: &PreprocessConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = AdamState::new(&model.params);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut rng(sub_seed(cfg.seed, epoch as u64)));
        let aug_seed = sub_seed(cfg.seed, u64::MAX - epoch as u64);
        let lr = learning_rate(cfg.lr0, cfg.lr_decay, epoch);
        let mut seen = Vec::with_capacity(cases.len());
        for batch in order.chunks(cfg.batch_size) {
            let frozen = &*model;
            let results: Vec<Result<(LossBreakdown, ParamStore)>> = batch
                .par_iter()
                .map(|&i| {
                    let case = if cfg.augment {
                        Cow::Owned(augment(&cases[i], &mut rng(sub_seed(aug_seed, i as u64)), aug))
                    } else {
                        Cow::Borrowed(&cases[i])
                    };
                    frozen.loss_and_grads(&frozen.input(&case.img_cc), &frozen.input(&case.img_mlo), case.label)
                })
                .collect();
            let mut acc = model.params.zeros_like();
            for r in results {
                let (b, g) = r?;
                if !b.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                acc.add_scaled(&g, 1.0 / batch.len() as f64)?;
                seen.push(b);
            }
            adam_step(&mut model.params, &acc, &mut state, lr, &cfg.adam)?;
            step += 1;
        }
        trace.push(mean_breakdown(&seen));
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(&model.params, &dir.join(format!("epoch_{epoch}.ckpt")))?;
            checkpoint::save(&model.params, &dir.join("last.ckpt"))?;
            let p = dir.join("loss_trace.csv");
            fs::write(&p, metrics::loss_trace_csv(&trace)).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(trace)
}

/// Objective of every case under the current parameters, without gradients.
pub fn case_losses(model: &DchaModel, cases: &[DualViewCase]) -> Result<Vec<LossBreakdown>> {
    cases
        .par_iter()
        .map(|c| {
            let mut s = model.session();
            let a = s.tape.constant(model.input(&c.img_cc));
            let b = s.tape.constant(model.input(&c.img_mlo));
            let fp = model_forward(&mut s, &model.config, a, b)?;
            Ok(case_loss(&mut s, &model.config, &fp, c.label)?.1)
        })
        .collect()
}

pub fn mean_loss(model: &DchaModel, cases: &[DualViewCase]) -> Result<LossBreakdown> {
    Ok(mean_breakdown(&case_losses(model, cases)?))
}

/// Mean correlation loss over the cases, computed on the reinvented maps
/// whether or not the model trains with it.
pub fn mean_corr(model: &DchaModel, cases: &[DualViewCase]) -> Result<f64> {
    let v: Vec<f64> = cases
        .par_iter()
        .map(|c| model.corr_value(&model.input(&c.img_cc), &model.input(&c.img_mlo)))
        .collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

pub fn predictions(model: &DchaModel, cases: &[DualViewCase]) -> Result<Vec<CasePrediction>> {
    cases
        .par_iter()
        .map(|c| {
            let (p_cc, p_mlo) = model.predict(&model.input(&c.img_cc), &model.input(&c.img_mlo))?;
            let (p_avg, _) = metrics::predict_case(p_cc, p_mlo);
            Ok(CasePrediction {
                case_id: c.case_id.clone(),
                p_cc,
                p_mlo,
                p_avg,
                label: c.label,
            })
        })
        .collect()
}

pub fn evaluate(model: &DchaModel, cases: &[DualViewCase], loss_trace: Vec<LossBreakdown>) -> Result<MetricsReport> {
    MetricsReport::from_predictions(predictions(model, cases)?, loss_trace)
}
