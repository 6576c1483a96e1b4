//! `dcha`: phantom generation, training, evaluation and saliency rendering.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dcha_core::checkpoint;
use dcha_core::config::{parse_config, RunConfig, Split};
use dcha_core::dataset::{load_dataset, split_by_id, write_dataset, DualViewCase};
use dcha_core::losses::LossBreakdown;
use dcha_core::model::DchaModel;
use dcha_core::phantom::generate_dataset;
use dcha_core::preprocess::preprocess_case;
use dcha_core::saliency::run_saliency;
use dcha_core::train::{evaluate, train};
use dcha_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dcha", version, about = "Dual-view phantom classification with correlation and hybrid attention")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides one key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Writes a phantom dataset and manifest to `paths.data_dir`.
    Generate,
    /// Trains on the training split; checkpoints go to `paths.checkpoint_dir`.
    Train,
    /// Scores a checkpoint on `eval.split`; reports go to `paths.report_dir`.
    Eval,
    /// Renders Grad-CAM overlays and the hits table to `paths.saliency_dir`.
    Saliency,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Saliency => "saliency",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_cases(cfg: &RunConfig) -> Result<Vec<DualViewCase>> {
    let cases = load_dataset(&cfg.paths.manifest())?;
    if !cfg.preprocess_enabled {
        return Ok(cases);
    }
    use rayon::prelude::*;
    cases.par_iter().map(|c| preprocess_case(c, &cfg.preprocess)).collect()
}

fn select(cases: Vec<DualViewCase>, cfg: &RunConfig, split: Split) -> Vec<DualViewCase> {
    let (train, val) = split_by_id(cases, cfg.train.val_fraction);
    match split {
        Split::Train => train,
        Split::Val => val,
        Split::All => train.into_iter().chain(val).collect(),
    }
}

fn load_model(cfg: &RunConfig) -> Result<DchaModel> {
    let path = cfg.paths.checkpoint();
    if !path.exists() {
        return Err(Error::InvalidConfig(format!("checkpoint {} does not exist", path.display())));
    }
    let mut model = DchaModel::init(cfg.model.clone(), cfg.model_seed)?;
    model.load_params(checkpoint::load(&path)?)?;
    Ok(model)
}

fn read_loss_trace(dir: &Path) -> Vec<LossBreakdown> {
    let Ok(text) = fs::read_to_string(dir.join("loss_trace.csv")) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<f64> = l.split(',').skip(1).filter_map(|v| v.parse().ok()).collect();
            (f.len() == 4).then(|| LossBreakdown {
                corr: f[0],
                clss_cc: f[1],
                clss_mlo: f[2],
                total: f[3],
            })
        })
        .collect()
}

fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Generate => {
            let cases = generate_dataset(&cfg.phantom, cfg.n_cases)?;
            let manifest = write_dataset(&cases, &cfg.paths.data_dir)?;
            cfg.write_effective(&cfg.paths.data_dir)?;
            let positives = cases.iter().filter(|c| c.label == 1).count();
            println!("wrote {} cases ({positives} malignant) to {}", cases.len(), manifest.display());
        }
        Command::Train => {
            let cases = select(load_cases(cfg)?, cfg, Split::Train);
            let dir = &cfg.paths.checkpoint_dir;
            cfg.write_effective(dir)?;
            let mut model = DchaModel::init(cfg.model.clone(), cfg.model_seed)?;
            let trace = train(&mut model, &cases, &cfg.train, &cfg.preprocess, Some(dir))?;
            for (e, b) in trace.iter().enumerate() {
                println!(
                    "epoch {e}: total={:.5} corr={:.5} clss_cc={:.5} clss_mlo={:.5}",
                    b.total, b.corr, b.clss_cc, b.clss_mlo
                );
            }
            println!("trained on {} cases; checkpoints in {}", cases.len(), dir.display());
        }
        Command::Eval => {
            let model = load_model(cfg)?;
            let cases = select(load_cases(cfg)?, cfg, cfg.eval_split);
            let trace = read_loss_trace(&cfg.paths.checkpoint_dir);
            let report = evaluate(&model, &cases, trace)?;
            report.write(&cfg.paths.report_dir)?;
            cfg.write_effective(&cfg.paths.report_dir)?;
            println!("{}", report.summary_line());
        }
        Command::Saliency => {
            let model = load_model(cfg)?;
            let cases = select(load_cases(cfg)?, cfg, cfg.eval_split);
            let records = run_saliency(&model, &cases, &cfg.paths.saliency_dir)?;
            cfg.write_effective(&cfg.paths.saliency_dir)?;
            let hits = records.iter().filter(|r| r.hit).count();
            println!("saliency peaks inside the lesion box: {hits}/{}", records.len());
        }
    }
    Ok(())
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("DCHA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DCHA_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: configuration: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.command.name());
            ExitCode::from(2)
        }
    }
}
