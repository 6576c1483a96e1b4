//! Truncated residual feature extractor.
//!
//! A single strided stem convolution (no pooling) followed by stages of
//! 1x1 -> 3x3 -> 1x1 bottlenecks with expansion 4. Every convolution is
//! followed by per-channel spatial normalisation. Exactly three stride-2
//! reductions take place, so an `H x W` image becomes an `H/8 x W/8` map.

use crate::error::{Error, Result};
use crate::params::{he_uniform, ParamStore, Session};
use crate::seeding;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const EXPANSION: usize = 4;
pub const DOWNSCALE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Bottleneck width of each stage as a multiple of `stem_channels`.
    pub stage_channel_multipliers: Vec<usize>,
    pub bottlenecks_per_stage: Vec<usize>,
    /// Stride of the first bottleneck of each stage.
    pub stage_strides: Vec<usize>,
}

impl BackboneConfig {
    /// ResNet-101 with the first max pooling and the last stage removed:
    /// 7x7/2 stem with 64 channels, then 3, 4 and 23 bottlenecks.
    pub fn paper() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stage_channel_multipliers: vec![1, 2, 4],
            bottlenecks_per_stage: vec![3, 4, 23],
            stage_strides: vec![1, 2, 2],
        }
    }

    /// Desk-scale preset: 8-channel stem, one bottleneck per stage, C = 32.
    pub fn toy() -> Self {
        Self {
            in_channels: 1,
            stem_channels: 8,
            stem_kernel: 7,
            stem_stride: 2,
            stage_channel_multipliers: vec![1, 1, 1],
            bottlenecks_per_stage: vec![1, 1, 1],
            stage_strides: vec![1, 2, 2],
        }
    }

    /// Every stride applied, stem first.
    pub fn downsample_strides(&self) -> Vec<usize> {
        std::iter::once(self.stem_stride)
            .chain(self.stage_strides.iter().copied())
            .collect()
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.stem_channels * self.stage_channel_multipliers[stage]
    }

    /// Channel count `C` of the output map.
    pub fn feature_channels(&self) -> usize {
        match self.stage_channel_multipliers.last() {
            Some(_) => EXPANSION * self.stage_width(self.stage_channel_multipliers.len() - 1),
            None => self.stem_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("backbone: {msg}")));
        let n = self.stage_channel_multipliers.len();
        if self.bottlenecks_per_stage.len() != n || self.stage_strides.len() != n {
            return bad(format!(
                "stage lists disagree in length: multipliers {}, bottlenecks {}, strides {}",
                n,
                self.bottlenecks_per_stage.len(),
                self.stage_strides.len()
            ));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.stem_kernel % 2 == 0 {
            return bad("need positive channel counts and an odd stem kernel".into());
        }
        if self.stage_channel_multipliers.contains(&0) || self.bottlenecks_per_stage.contains(&0) {
            return bad("stage multipliers and bottleneck counts must be positive".into());
        }
        let strides = self.downsample_strides();
        if strides.iter().any(|&s| s != 1 && s != 2) || strides.iter().filter(|&&s| s == 2).count() != 3 {
            return bad(format!("need exactly three stride-2 reductions, got strides {strides:?}"));
        }
        Ok(())
    }

    /// Every parameter path with its shape, in build order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv_norm = |out: &mut Vec<(String, Vec<usize>)>, conv: &str, norm: &str, co: usize, ci: usize, k: usize| {
            out.push((format!("{conv}.weight"), vec![co, ci, k, k]));
            out.push((format!("{conv}.bias"), vec![co]));
            out.push((format!("{norm}.scale"), vec![co]));
            out.push((format!("{norm}.offset"), vec![co]));
        };
        conv_norm(&mut out, "stem.conv", "stem.norm", self.stem_channels, self.in_channels, self.stem_kernel);
        let mut c_in = self.stem_channels;
        for (s, &blocks) in self.bottlenecks_per_stage.iter().enumerate() {
            let width = self.stage_width(s);
            let c_out = EXPANSION * width;
            for b in 0..blocks {
                let p = format!("stage{s}.block{b}");
                conv_norm(&mut out, &format!("{p}.conv1"), &format!("{p}.norm1"), width, c_in, 1);
                conv_norm(&mut out, &format!("{p}.conv2"), &format!("{p}.norm2"), width, width, 3);
                conv_norm(&mut out, &format!("{p}.conv3"), &format!("{p}.norm3"), c_out, width, 1);
                if self.block_has_projection(s, b, c_in) {
                    conv_norm(&mut out, &format!("{p}.proj"), &format!("{p}.proj_norm"), c_out, c_in, 1);
                }
                c_in = c_out;
            }
        }
        out
    }

    fn block_stride(&self, stage: usize, block: usize) -> usize {
        if block == 0 {
            self.stage_strides[stage]
        } else {
            1
        }
    }

    fn block_has_projection(&self, stage: usize, block: usize, c_in: usize) -> bool {
        self.block_stride(stage, block) != 1 || c_in != EXPANSION * self.stage_width(stage)
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Deterministic He fan-in initialisation; biases and offsets zero,
    /// normalisation scales one.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = seeding::rng(seed);
        let mut store = ParamStore::new();
        for (path, shape) in self.param_shapes() {
            let t = if path.ends_with(".weight") {
                let fan_in = shape[1] * shape[2] * shape[3];
                he_uniform(shape, fan_in, &mut rng)
            } else if path.ends_with(".scale") {
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            store.insert(path, t);
        }
        Ok(store)
    }

    /// Maps an image to its `C x H/8 x W/8` feature map. Parameters are read
    /// from `session` under `prefix`.
    pub fn forward(&self, s: &mut Session, prefix: &str, img: Var) -> Result<Var> {
        let shape = s.tape.shape(img).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                expected: vec![self.in_channels, 0, 0],
                got: shape,
            });
        }
        if shape[1] % DOWNSCALE != 0 || shape[2] % DOWNSCALE != 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::Dimension {
                op: "backbone_forward",
                detail: format!("input {}x{} is not divisible by {DOWNSCALE}", shape[1], shape[2]),
            });
        }
        let mut x = conv_norm(
            s,
            &format!("{prefix}.stem.conv"),
            &format!("{prefix}.stem.norm"),
            img,
            self.stem_stride,
            self.stem_kernel / 2,
        )?;
        x = s.tape.relu(x);
        let mut c_in = self.stem_channels;
        for (st, &blocks) in self.bottlenecks_per_stage.iter().enumerate() {
            for b in 0..blocks {
                let path = format!("{prefix}.stage{st}.block{b}");
                let proj = self.block_has_projection(st, b, c_in);
                x = bottleneck_forward(s, &path, self.block_stride(st, b), proj, x)?;
                c_in = EXPANSION * self.stage_width(st);
            }
        }
        Ok(x)
    }
}

fn conv_norm(s: &mut Session, conv: &str, norm: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = s.param(&format!("{conv}.weight"))?;
    let b = s.param(&format!("{conv}.bias"))?;
    let gamma = s.param(&format!("{norm}.scale"))?;
    let beta = s.param(&format!("{norm}.offset"))?;
    let y = s.tape.conv2d(x, w, b, stride, pad)?;
    s.tape.instance_norm(y, gamma, beta)
}

/// One bottleneck: `relu(norm(conv3(relu(norm(conv2(relu(norm(conv1 x))))))) + skip)`
/// where the skip path is the identity or a normalised strided 1x1 projection.
pub fn bottleneck_forward(s: &mut Session, path: &str, stride: usize, projection: bool, x: Var) -> Result<Var> {
    let y = conv_norm(s, &format!("{path}.conv1"), &format!("{path}.norm1"), x, 1, 0)?;
    let y = s.tape.relu(y);
    let y = conv_norm(s, &format!("{path}.conv2"), &format!("{path}.norm2"), y, stride, 1)?;
    let y = s.tape.relu(y);
    let y = conv_norm(s, &format!("{path}.conv3"), &format!("{path}.norm3"), y, 1, 0)?;
    let skip = if projection {
        conv_norm(s, &format!("{path}.proj"), &format!("{path}.proj_norm"), x, stride, 0)?
    } else {
        x
    };
    let sum = s.tape.add(y, skip)?;
    Ok(s.tape.relu(sum))
}

/// Backbone weights together with the layout that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub store: ParamStore,
}

pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<BackboneParams> {
    Ok(BackboneParams {
        config: cfg.clone(),
        store: cfg.init(seed)?,
    })
}

/// Forward pass outside of training, returning the feature map value.
pub fn backbone_forward(img: &Tensor, p: &BackboneParams) -> Result<Tensor> {
    let mut prefixed = ParamStore::new();
    prefixed.merge_prefixed("backbone", p.store.clone());
    let mut s = Session::bind(&prefixed);
    let x = s.tape.constant(img.clone());
    let f = p.config.forward(&mut s, "backbone", x)?;
    Ok(s.tape.value(f).clone())
}
