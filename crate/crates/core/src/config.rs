//! Run configuration: `key = value` lines with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`RunConfig::default`]); [`RunConfig::to_text`] prints the
//! full effective configuration in the same syntax.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::phantom::PhantomConfig;
use crate::preprocess::{Edge, PreprocessConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub saliency_dir: PathBuf,
    /// Checkpoint read by `eval` and `saliency`; `checkpoint_dir/last.ckpt`
    /// when unset.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "run/data".into(),
            checkpoint_dir: "run/checkpoints".into(),
            report_dir: "run/report".into(),
            saliency_dir: "run/saliency".into(),
            checkpoint: None,
        }
    }
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.checkpoint_dir.join("last.ckpt"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir.join("manifest.csv")
    }
}

/// Cases that `eval` and `saliency` run on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Held-out part of the id-hash split.
    Val,
    Train,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Val => "val",
            Split::Train => "train",
            Split::All => "all",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "val" => Ok(Split::Val),
            "train" => Ok(Split::Train),
            "all" => Ok(Split::All),
            _ => Err(format!("unknown split `{s}` (val|train|all)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub n_cases: usize,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    /// Runs background removal and chest-wall alignment before training and
    /// evaluation.
    pub preprocess_enabled: bool,
    pub eval_split: Split,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            n_cases: 40,
            model: ModelConfig::toy(),
            model_seed: 0,
            train: TrainConfig::default(),
            preprocess: PreprocessConfig {
                target_size: 64,
                ..PreprocessConfig::default()
            },
            preprocess_enabled: true,
            eval_split: Split::Val,
            paths: Paths::default(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|p| parse::<usize>(p.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_edge(v: &str) -> std::result::Result<Option<Edge>, String> {
    Ok(Some(match v {
        "auto" => return Ok(None),
        "bottom" => Edge::Bottom,
        "top" => Edge::Top,
        "left" => Edge::Left,
        "right" => Edge::Right,
        _ => return Err(format!("unknown edge `{v}` (auto|bottom|top|left|right)")),
    }))
}

fn edge_name(e: Option<Edge>) -> &'static str {
    match e {
        None => "auto",
        Some(Edge::Bottom) => "bottom",
        Some(Edge::Top) => "top",
        Some(Edge::Left) => "left",
        Some(Edge::Right) => "right",
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;

/// Recognised keys. Shortcut keys (`model.variant`, `model.backbone`) have
/// no getter and are not echoed; they set several echoed keys at once.
const KEYS: &[(&str, Option<Getter>, Setter)] = &[
    ("phantom.grid_n", Some(|c| c.phantom.grid_n.to_string()), |c, v| Ok(c.phantom.grid_n = parse(v)?)),
    ("phantom.radius", Some(|c| c.phantom.radius.to_string()), |c, v| Ok(c.phantom.radius = parse(v)?)),
    ("phantom.lesion_prob", Some(|c| c.phantom.lesion_prob.to_string()), |c, v| Ok(c.phantom.lesion_prob = parse(v)?)),
    ("phantom.lesion_radius_min", Some(|c| c.phantom.lesion_radius_range.0.to_string()), |c, v| {
        Ok(c.phantom.lesion_radius_range.0 = parse(v)?)
    }),
    ("phantom.lesion_radius_max", Some(|c| c.phantom.lesion_radius_range.1.to_string()), |c, v| {
        Ok(c.phantom.lesion_radius_range.1 = parse(v)?)
    }),
    ("phantom.lesion_intensity", Some(|c| c.phantom.lesion_intensity.to_string()), |c, v| {
        Ok(c.phantom.lesion_intensity = parse(v)?)
    }),
    ("phantom.background_texture_scale", Some(|c| c.phantom.background_texture_scale.to_string()), |c, v| {
        Ok(c.phantom.background_texture_scale = parse(v)?)
    }),
    ("phantom.misalign_shift_max", Some(|c| c.phantom.misalign_shift_max.to_string()), |c, v| {
        Ok(c.phantom.misalign_shift_max = parse(v)?)
    }),
    ("phantom.image_size", Some(|c| c.phantom.image_size.to_string()), |c, v| Ok(c.phantom.image_size = parse(v)?)),
    ("phantom.seed", Some(|c| c.phantom.seed.to_string()), |c, v| Ok(c.phantom.seed = parse(v)?)),
    ("phantom.n_cases", Some(|c| c.n_cases.to_string()), |c, v| Ok(c.n_cases = parse(v)?)),
    ("model.backbone", None, |c, v| {
        c.model.backbone = match v {
            "toy" => BackboneConfig::toy(),
            "paper" => BackboneConfig::paper(),
            _ => return Err(format!("unknown backbone preset `{v}` (toy|paper)")),
        };
        Ok(())
    }),
    ("model.variant", None, |c, v| {
        c.model = c.model.clone().with_variant(v).map_err(|e| e.to_string())?;
        Ok(())
    }),
    ("model.in_channels", Some(|c| c.model.backbone.in_channels.to_string()), |c, v| {
        Ok(c.model.backbone.in_channels = parse(v)?)
    }),
    ("model.stem_channels", Some(|c| c.model.backbone.stem_channels.to_string()), |c, v| {
        Ok(c.model.backbone.stem_channels = parse(v)?)
    }),
    ("model.stem_kernel", Some(|c| c.model.backbone.stem_kernel.to_string()), |c, v| {
        Ok(c.model.backbone.stem_kernel = parse(v)?)
    }),
    ("model.stem_stride", Some(|c| c.model.backbone.stem_stride.to_string()), |c, v| {
        Ok(c.model.backbone.stem_stride = parse(v)?)
    }),
    ("model.stage_multipliers", Some(|c| list(&c.model.backbone.stage_channel_multipliers)), |c, v| {
        Ok(c.model.backbone.stage_channel_multipliers = parse_list(v)?)
    }),
    ("model.bottlenecks", Some(|c| list(&c.model.backbone.bottlenecks_per_stage)), |c, v| {
        Ok(c.model.backbone.bottlenecks_per_stage = parse_list(v)?)
    }),
    ("model.stage_strides", Some(|c| list(&c.model.backbone.stage_strides)), |c, v| {
        Ok(c.model.backbone.stage_strides = parse_list(v)?)
    }),
    ("model.attention", Some(|c| c.model.attention.name().to_string()), |c, v| Ok(c.model.attention = parse(v)?)),
    ("model.local_k", Some(|c| c.model.local_k.to_string()), |c, v| Ok(c.model.local_k = parse(v)?)),
    ("model.attention_modules", Some(|c| c.model.attention_modules.to_string()), |c, v| {
        Ok(c.model.attention_modules = parse(v)?)
    }),
    ("model.corr_loss", Some(|c| c.model.corr_loss.to_string()), |c, v| Ok(c.model.corr_loss = parse_bool(v)?)),
    ("model.seed", Some(|c| c.model_seed.to_string()), |c, v| Ok(c.model_seed = parse(v)?)),
    ("train.lr0", Some(|c| c.train.lr0.to_string()), |c, v| Ok(c.train.lr0 = parse(v)?)),
    ("train.lr_decay", Some(|c| c.train.lr_decay.to_string()), |c, v| Ok(c.train.lr_decay = parse(v)?)),
    ("train.epochs", Some(|c| c.train.epochs.to_string()), |c, v| Ok(c.train.epochs = parse(v)?)),
    ("train.batch_size", Some(|c| c.train.batch_size.to_string()), |c, v| Ok(c.train.batch_size = parse(v)?)),
    ("train.seed", Some(|c| c.train.seed.to_string()), |c, v| Ok(c.train.seed = parse(v)?)),
    ("train.beta1", Some(|c| c.train.adam.beta1.to_string()), |c, v| Ok(c.train.adam.beta1 = parse(v)?)),
    ("train.beta2", Some(|c| c.train.adam.beta2.to_string()), |c, v| Ok(c.train.adam.beta2 = parse(v)?)),
    ("train.eps", Some(|c| c.train.adam.eps.to_string()), |c, v| Ok(c.train.adam.eps = parse(v)?)),
    ("train.val_fraction", Some(|c| c.train.val_fraction.to_string()), |c, v| Ok(c.train.val_fraction = parse(v)?)),
    ("train.augment", Some(|c| c.train.augment.to_string()), |c, v| Ok(c.train.augment = parse_bool(v)?)),
    ("preprocess.enabled", Some(|c| c.preprocess_enabled.to_string()), |c, v| {
        Ok(c.preprocess_enabled = parse_bool(v)?)
    }),
    ("preprocess.target_size", Some(|c| c.preprocess.target_size.to_string()), |c, v| {
        Ok(c.preprocess.target_size = parse(v)?)
    }),
    ("preprocess.bg_threshold_quantile", Some(|c| c.preprocess.bg_threshold_quantile.to_string()), |c, v| {
        Ok(c.preprocess.bg_threshold_quantile = parse(v)?)
    }),
    ("preprocess.rotation_max_deg", Some(|c| c.preprocess.rotation_max_deg.to_string()), |c, v| {
        Ok(c.preprocess.rotation_max_deg = parse(v)?)
    }),
    ("preprocess.hflip_prob", Some(|c| c.preprocess.hflip_prob.to_string()), |c, v| {
        Ok(c.preprocess.hflip_prob = parse(v)?)
    }),
    ("preprocess.fit_residual_limit", Some(|c| c.preprocess.fit_residual_limit.to_string()), |c, v| {
        Ok(c.preprocess.fit_residual_limit = parse(v)?)
    }),
    ("preprocess.chest_wall_edge", Some(|c| edge_name(c.preprocess.chest_wall_edge).to_string()), |c, v| {
        Ok(c.preprocess.chest_wall_edge = parse_edge(v)?)
    }),
    ("eval.split", Some(|c| c.eval_split.name().to_string()), |c, v| Ok(c.eval_split = parse(v)?)),
    ("paths.data_dir", Some(|c| c.paths.data_dir.display().to_string()), |c, v| Ok(c.paths.data_dir = v.into())),
    ("paths.checkpoint_dir", Some(|c| c.paths.checkpoint_dir.display().to_string()), |c, v| {
        Ok(c.paths.checkpoint_dir = v.into())
    }),
    ("paths.report_dir", Some(|c| c.paths.report_dir.display().to_string()), |c, v| Ok(c.paths.report_dir = v.into())),
    ("paths.saliency_dir", Some(|c| c.paths.saliency_dir.display().to_string()), |c, v| {
        Ok(c.paths.saliency_dir = v.into())
    }),
    ("paths.checkpoint", Some(|c| c.paths.checkpoint().display().to_string()), |c, v| {
        Ok(c.paths.checkpoint = Some(v.into()))
    }),
];

impl RunConfig {
    /// Sets one key; `origin` and `line` only label errors.
    pub fn set(&mut self, key: &str, value: &str, origin: &Path, line: usize) -> Result<()> {
        let (_, _, setter) = KEYS.iter().find(|k| k.0 == key).ok_or_else(|| Error::UnknownKey {
            path: origin.to_path_buf(),
            line,
            key: key.to_string(),
        })?;
        setter(self, value).map_err(|detail| Error::BadValue {
            path: origin.to_path_buf(),
            line,
            key: key.to_string(),
            detail,
        })
    }

    /// Applies `key = value` lines over the current values.
    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::MalformedLine {
                    path: origin.to_path_buf(),
                    line: i + 1,
                });
            };
            self.set(key.trim(), value.trim(), origin, i + 1)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override given outside any file.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let origin = Path::new("--set");
        let (key, value) = assignment.split_once('=').ok_or_else(|| Error::MalformedLine {
            path: origin.to_path_buf(),
            line: 0,
        })?;
        self.set(key.trim(), value.trim(), origin, 0)
    }

    /// Every echoed key with its current value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .filter_map(|(k, get, _)| get.map(|g| format!("{k} = {}\n", g(self))))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.preprocess.validate()?;
        if self.n_cases == 0 {
            return Err(Error::InvalidConfig("phantom.n_cases must be at least 1".into()));
        }
        Ok(())
    }

    /// Writes the effective configuration as `effective_config.txt` in `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("effective_config.txt");
        fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Reads a configuration file over the defaults.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::default();
    cfg.merge_text(&text, path)?;
    Ok(cfg)
}
