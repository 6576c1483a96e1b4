//! Dual-view classifier: shared backbone and attention stage, one head per
//! view.

use crate::attention::{AttentionConfig, AttentionKind};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses::{self, LossBreakdown};
use crate::params::{uniform, ParamStore, Session};
use crate::seeding;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionKind,
    pub local_k: usize,
    pub attention_modules: usize,
    /// Adds the dual-view correlation term to the training objective.
    pub corr_loss: bool,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            attention: AttentionKind::Hybrid,
            local_k: 3,
            attention_modules: 1,
            corr_loss: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            backbone: BackboneConfig::paper(),
            ..Self::toy()
        }
    }

    /// Switches to one of the named ablation variants: `full`, `corr_only`,
    /// `attention_only`, `local_corr`, `nonlocal_corr` or `baseline`.
    pub fn with_variant(mut self, name: &str) -> Result<Self> {
        let (kind, corr) = match name {
            "full" => (AttentionKind::Hybrid, true),
            "corr_only" => (AttentionKind::None, true),
            "attention_only" => (AttentionKind::Hybrid, false),
            "local_corr" => (AttentionKind::Local, true),
            "nonlocal_corr" => (AttentionKind::NonLocal, true),
            "baseline" => (AttentionKind::None, false),
            other => return Err(Error::InvalidConfig(format!("unknown model variant `{other}`"))),
        };
        self.attention = kind;
        self.corr_loss = corr;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.backbone.feature_channels()
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            kind: self.attention,
            channels: self.channels(),
            k: self.local_k,
            modules: self.attention_modules,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention_config().validate()?;
        if self.attention != AttentionKind::None && self.attention_modules == 0 {
            return Err(Error::InvalidConfig("attention needs at least one module".into()));
        }
        Ok(())
    }
}

/// Graph handles of one forward pass over both views.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub f_cc: Var,
    pub f_mlo: Var,
    pub r_cc: Var,
    pub r_mlo: Var,
    pub p_cc: Var,
    pub p_mlo: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DchaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl DchaModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        params.merge_prefixed("backbone", config.backbone.init(seeding::sub_seed(seed, 0))?);
        let mut rng = seeding::rng(seeding::sub_seed(seed, 1));
        params.merge_prefixed("attention", config.attention_config().init(&mut rng)?);
        let c = config.channels();
        let bound = (1.0 / c as f64).sqrt();
        let mut rng = seeding::rng(seeding::sub_seed(seed, 2));
        for head in ["head_cc", "head_mlo"] {
            params.insert(format!("{head}.weight"), uniform(vec![1, c], bound, &mut rng));
            params.insert(format!("{head}.bias"), Tensor::zeros(vec![1]));
        }
        Ok(Self { config, params })
    }

    /// Replaces the parameters after checking that paths and shapes match.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                self.params.len()
            )));
        }
        for (path, t) in self.params.iter() {
            let other = params.get(path)?;
            if other.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    expected: t.shape().to_vec(),
                    got: other.shape().to_vec(),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Image as a backbone input, replicated over its input channels.
    pub fn input(&self, img: &GrayImage) -> Tensor {
        let c = self.config.backbone.in_channels;
        let mut data = Vec::with_capacity(c * img.data.len());
        for _ in 0..c {
            data.extend_from_slice(&img.data);
        }
        Tensor::new(vec![c, img.height, img.width], data).expect("consistent size")
    }

    pub fn session(&self) -> Session {
        Session::bind(&self.params)
    }

    /// View probabilities `(p_cc, p_mlo)` for one case.
    pub fn predict(&self, cc: &Tensor, mlo: &Tensor) -> Result<(f64, f64)> {
        let mut s = self.session();
        let a = s.tape.constant(cc.clone());
        let b = s.tape.constant(mlo.clone());
        let fp = model_forward(&mut s, &self.config, a, b)?;
        Ok((s.tape.value(fp.p_cc).item(), s.tape.value(fp.p_mlo).item()))
    }

    /// Training loss of one case and the gradient of every parameter.
    pub fn loss_and_grads(&self, cc: &Tensor, mlo: &Tensor, label: u8) -> Result<(LossBreakdown, ParamStore)> {
        let mut s = self.session();
        let a = s.tape.constant(cc.clone());
        let b = s.tape.constant(mlo.clone());
        let fp = model_forward(&mut s, &self.config, a, b)?;
        let (loss, breakdown) = case_loss(&mut s, &self.config, &fp, label)?;
        s.tape.backward(loss)?;
        Ok((breakdown, s.grads()))
    }

    /// Correlation loss between the two reinvented maps of one case,
    /// whether or not it is part of the objective.
    pub fn corr_value(&self, cc: &Tensor, mlo: &Tensor) -> Result<f64> {
        let mut s = self.session();
        let a = s.tape.constant(cc.clone());
        let b = s.tape.constant(mlo.clone());
        let fp = model_forward(&mut s, &self.config, a, b)?;
        let l = losses::dual_view_corr_loss(&mut s.tape, fp.r_cc, fp.r_mlo)?;
        Ok(s.tape.value(l).item())
    }
}

/// Runs both views through the shared backbone and attention stage, then
/// through their own heads.
pub fn model_forward(s: &mut Session, cfg: &ModelConfig, cc: Var, mlo: Var) -> Result<ForwardPass> {
    let att = cfg.attention_config();
    let f_cc = cfg.backbone.forward(s, "backbone", cc)?;
    let f_mlo = cfg.backbone.forward(s, "backbone", mlo)?;
    let r_cc = att.forward(s, "attention", f_cc)?;
    let r_mlo = att.forward(s, "attention", f_mlo)?;
    let p_cc = head(s, "head_cc", r_cc)?;
    let p_mlo = head(s, "head_mlo", r_mlo)?;
    Ok(ForwardPass {
        f_cc,
        f_mlo,
        r_cc,
        r_mlo,
        p_cc,
        p_mlo,
    })
}

/// `sigmoid(W . gap(R) + b)` as a scalar.
fn head(s: &mut Session, name: &str, r: Var) -> Result<Var> {
    let w = s.param(&format!("{name}.weight"))?;
    let b = s.param(&format!("{name}.bias"))?;
    let pooled = s.tape.global_avg_pool(r)?;
    let c = s.tape.shape(pooled)[0];
    let col = s.tape.reshape(pooled, [c, 1])?;
    let logit = s.tape.matmul(w, col)?;
    let logit = s.tape.reshape(logit, [1])?;
    let logit = s.tape.add(logit, b)?;
    let logit = s.tape.reshape(logit, Vec::<usize>::new())?;
    Ok(s.tape.sigmoid(logit))
}

/// Objective of one case: both cross-entropies plus, when enabled, the
/// correlation loss on the reinvented maps.
pub fn case_loss(s: &mut Session, cfg: &ModelConfig, fp: &ForwardPass, label: u8) -> Result<(Var, LossBreakdown)> {
    let y = f64::from(label);
    let cc = losses::bce(&mut s.tape, fp.p_cc, y)?;
    let mlo = losses::bce(&mut s.tape, fp.p_mlo, y)?;
    let corr = if cfg.corr_loss {
        Some(losses::dual_view_corr_loss(&mut s.tape, fp.r_cc, fp.r_mlo)?)
    } else {
        None
    };
    losses::total_loss(&mut s.tape, corr, cc, mlo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{hybrid_forward, HybridAttentionModule, LocalRelationParams, NonLocalAttentionParams, Projection};
    use crate::backbone::{backbone_forward, BackboneParams};
    use crate::tape::Tape;

    fn image(seed: u64, n: usize) -> Tensor {
        let mut r = seeding::rng(seed);
        uniform(vec![1, n, n], 0.5, &mut r).map(|v| v + 0.5)
    }

    #[test]
    fn identical_views_agree() {
        let mut m = DchaModel::init(ModelConfig::toy(), 4).unwrap();
        let w = m.params.get("head_cc.weight").unwrap().clone();
        *m.params.get_mut("head_mlo.weight").unwrap() = w;
        let img = image(1, 32);
        let (a, b) = m.predict(&img, &img).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
        assert!((m.corr_value(&img, &img).unwrap() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn variants_and_layout() {
        let cfg = ModelConfig::toy().with_variant("baseline").unwrap();
        let m = DchaModel::init(cfg, 0).unwrap();
        assert!(m.params.iter().all(|(k, _)| !k.starts_with("attention")));
        let full = DchaModel::init(ModelConfig::toy(), 0).unwrap();
        assert!(full.params.contains("attention.module0.nonlocal.key.weight"));
        assert!(full.params.num_scalars() < 100_000);
        assert_ne!(full.params.get("head_cc.weight").unwrap(), full.params.get("head_mlo.weight").unwrap());
        assert!(ModelConfig::toy().with_variant("bogus").is_err());
        assert_eq!(ModelConfig::paper().channels(), 1024);
    }

    #[test]
    fn load_params_checks_layout() {
        let mut m = DchaModel::init(ModelConfig::toy(), 0).unwrap();
        let other = DchaModel::init(ModelConfig::toy().with_variant("baseline").unwrap(), 0).unwrap();
        assert!(m.load_params(other.params).is_err());
        let same = DchaModel::init(ModelConfig::toy(), 7).unwrap();
        m.load_params(same.params.clone()).unwrap();
        assert_eq!(m.params, same.params);
    }

    fn sub_store(store: &ParamStore, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in store.iter() {
            if let Some(rest) = k.strip_prefix(&format!("{prefix}.")) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    #[test]
    fn matches_straight_line_composition() {
        let m = DchaModel::init(ModelConfig::toy(), 11).unwrap();
        let (cc, mlo) = (image(2, 32), image(3, 32));
        let (p_cc, p_mlo) = m.predict(&cc, &mlo).unwrap();

        let bb = BackboneParams {
            config: m.config.backbone.clone(),
            store: sub_store(&m.params, "backbone"),
        };
        let oracle = |img: &Tensor, head: &str| -> f64 {
            let f = backbone_forward(img, &bb).unwrap();
            let mut t = Tape::new();
            let mut proj = |role: &str| Projection {
                weight: t.constant(m.params.get(&format!("attention.module0.{role}.weight")).unwrap().clone()),
                bias: t.constant(m.params.get(&format!("attention.module0.{role}.bias")).unwrap().clone()),
            };
            let module = HybridAttentionModule {
                local: LocalRelationParams {
                    query: proj("local.query"),
                    key: proj("local.key"),
                    k: 3,
                },
                nonlocal: NonLocalAttentionParams {
                    query: proj("nonlocal.query"),
                    key: proj("nonlocal.key"),
                },
            };
            let fv = t.constant(f);
            let r = hybrid_forward(&mut t, fv, &module).unwrap();
            let r = t.value(r);
            let (c, hw) = (r.shape()[0], r.shape()[1] * r.shape()[2]);
            let w = m.params.get(&format!("{head}.weight")).unwrap().data();
            let mut logit = m.params.get(&format!("{head}.bias")).unwrap().data()[0];
            for ch in 0..c {
                let mean = r.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
                logit += w[ch] * mean;
            }
            1.0 / (1.0 + (-logit).exp())
        };
        assert!((p_cc - oracle(&cc, "head_cc")).abs() < 1e-12);
        assert!((p_mlo - oracle(&mlo, "head_mlo")).abs() < 1e-12);
    }

    #[test]
    fn breakdown_sums_and_grads_cover_params() {
        let m = DchaModel::init(ModelConfig::toy(), 5).unwrap();
        let (b, g) = m.loss_and_grads(&image(4, 32), &image(5, 32), 1).unwrap();
        assert_eq!(b.total, b.corr + (b.clss_cc + b.clss_mlo));
        assert_eq!(g.len(), m.params.len());
        let cfg = ModelConfig::toy().with_variant("attention_only").unwrap();
        let m = DchaModel::init(cfg, 5).unwrap();
        let (b, _) = m.loss_and_grads(&image(4, 32), &image(5, 32), 0).unwrap();
        assert_eq!(b.corr, 0.0);
    }
}
