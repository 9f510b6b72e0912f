//! `wsvad`: synthetic data generation, training, evaluation and export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};
use thiserror::Error;
use wsvad_core::config::TrainConfig;
use wsvad_core::data::{generate_synthetic, Dataset, SyntheticConfig, TEST, TRAIN};
use wsvad_core::eval::{
    evaluate, export_pseudo_labels, write_metrics, write_pseudo_labels, write_score_curves, write_training_log,
    MetricsReport,
};
use wsvad_core::train::{train, Checkpoint};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] wsvad_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(wsvad_core::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "wsvad", version, about = "Weakly supervised video anomaly detection on frame embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (manifest.json plus TPF1 feature files).
    GenData {
        /// JSON object overriding the synthetic defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; writes into `<out>/run-<config hash>`.
    Train {
        /// Dataset directory or manifest path.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Frame AUC/AP on the test split; writes metrics.json.
    Eval(ModelArgs),
    /// Pseudo-labels for a split from the trained text branch.
    PseudoLabels {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = TRAIN)]
        split: String,
    },
    /// Per-video `frame,score,truth` CSVs for the test split.
    ExportScores(ModelArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn json(self) -> Value {
        Value::Bool(matches!(self, Switch::On))
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Nvp {
    Off,
    FrameAverage,
    SimilarityAggregate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Temporal {
    Tcsal,
    PlainEncoder,
}

/// Flags applied on top of the config file.
#[derive(Args, Debug)]
struct TrainOverrides {
    /// JSON training config; may name a `preset`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    nvp: Option<Nvp>,
    #[arg(long, value_enum)]
    normality_guidance: Option<Switch>,
    #[arg(long, value_enum)]
    temporal: Option<Temporal>,
    #[arg(long, value_enum)]
    rank_normal: Option<Switch>,
    #[arg(long, value_enum)]
    rank_abnormal: Option<Switch>,
    #[arg(long, value_enum)]
    dil: Option<Switch>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn value_name(v: impl ValueEnum) -> Value {
    Value::String(v.to_possible_value().expect("no skipped variants").get_name().to_string())
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(path) => read_text(path)?,
            None => "{\"preset\":\"synthetic\"}".to_string(),
        };
        let mut base: Value =
            serde_json::from_str(&base).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let Value::Object(obj) = &mut base else {
            return Err(CliError::Usage("config must be a JSON object".into()));
        };
        if let Some(p) = &self.preset {
            obj.insert("preset".into(), Value::String(p.clone()));
        }
        let mut flags = Map::new();
        if let Some(s) = self.seed {
            flags.insert("seed".into(), s.into());
        }
        if let Some(e) = self.epochs {
            flags.insert("epochs".into(), e.into());
        }
        if let Some(v) = self.nvp {
            flags.insert("nvp".into(), value_name(v));
        }
        if let Some(v) = self.temporal {
            flags.insert("temporal".into(), value_name(v));
        }
        for (key, switch) in [
            ("normality_guidance", self.normality_guidance),
            ("rank_normal", self.rank_normal),
            ("rank_abnormal", self.rank_abnormal),
            ("dil", self.dil),
        ] {
            if let Some(s) = switch {
                flags.insert(key.into(), s.json());
            }
        }
        obj.extend(flags);
        Ok(TrainConfig::from_json(&base.to_string())?)
    }
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    Ok(Dataset::open(&manifest)?)
}

fn short_hash(hash: &str) -> &str {
    &hash[..12.min(hash.len())]
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let text = match config {
        Some(p) => read_text(p)?,
        None => "{}".into(),
    };
    let mut cfg = SyntheticConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = generate_synthetic(&cfg)?;
    let manifest = data.write(out)?;
    println!("wrote {} videos to {}", manifest.videos.len(), out.display());
    Ok(())
}

fn run_train(data: &Path, out: &Path, overrides: &TrainOverrides) -> Result<()> {
    let cfg = overrides.resolve()?;
    let dataset = open_dataset(data)?;
    let videos = dataset.load_split(TRAIN)?;
    let hash = cfg.hash();
    let dir = out.join(format!("run-{}", short_hash(&hash)));
    let mut epoch_loss = (0, 0.0, 0usize);
    let (model, log) = train(&cfg, &dataset.manifest.classes, dataset.manifest.dim, &videos, |row| {
        if row.epoch != epoch_loss.0 && epoch_loss.2 > 0 {
            eprintln!("epoch {} mean loss {:.5}", epoch_loss.0, epoch_loss.1 / epoch_loss.2 as f64);
            epoch_loss = (row.epoch, 0.0, 0);
        }
        epoch_loss.0 = row.epoch;
        epoch_loss.1 += row.report.total;
        epoch_loss.2 += 1;
    })?;
    if epoch_loss.2 > 0 {
        eprintln!("epoch {} mean loss {:.5}", epoch_loss.0, epoch_loss.1 / epoch_loss.2 as f64);
    }
    fs::create_dir_all(&dir).map_err(|e| wsvad_core::Error::Io { path: dir.clone(), source: e })?;
    let resolved = serde_json::json!({ "config": cfg, "config_hash": hash });
    let config_path = dir.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&resolved).expect("json") + "\n")
        .map_err(|e| wsvad_core::Error::Io { path: config_path, source: e })?;
    Checkpoint::from_model(&model, &cfg).save(&dir.join("checkpoint.json"))?;
    write_training_log(&dir.join("train_log.csv"), &log)?;
    println!("{}", dir.display());
    Ok(())
}

fn load_model(args: &ModelArgs) -> Result<(Checkpoint, wsvad_core::train::Model, Dataset, PathBuf)> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.restore()?;
    let dataset = open_dataset(&args.data)?;
    if dataset.manifest.classes != ck.classes || dataset.manifest.dim != ck.dim {
        return Err(wsvad_core::Error::Contract("dataset classes or D differ from the checkpoint".into()).into());
    }
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok((ck, model, dataset, out))
}

fn run_eval(args: &ModelArgs, write_curves: bool) -> Result<()> {
    let (ck, model, dataset, out) = load_model(args)?;
    let test = dataset.load_split(TEST)?;
    let r = evaluate(&model.detector, &test)?;
    if write_curves {
        write_score_curves(&out.join("scores"), &r.curves)?;
        println!("wrote {} score curves to {}", r.curves.len(), out.join("scores").display());
    } else {
        let report = MetricsReport {
            auc: r.auc,
            ap: r.ap,
            num_frames: r.num_frames,
            config_hash: ck.config_hash,
        };
        write_metrics(&out.join("metrics.json"), &report)?;
        println!("auc {:.6} ap {:.6} frames {}", r.auc, r.ap, r.num_frames);
    }
    Ok(())
}

fn run_pseudo_labels(args: &ModelArgs, split: &str) -> Result<()> {
    let (ck, model, dataset, out) = load_model(args)?;
    let videos = dataset.load_split(split)?;
    if videos.is_empty() {
        return Err(CliError::Usage(format!("split {split:?} has no videos")));
    }
    let labels = export_pseudo_labels(&model, &videos, &ck.config)?;
    let path = out.join(format!("pseudo_labels_{split}.csv"));
    write_pseudo_labels(&path, &labels)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Train { data, out, overrides } => run_train(&data, &out, &overrides),
        Command::Eval(args) => run_eval(&args, false),
        Command::PseudoLabels { model, split } => run_pseudo_labels(&model, &split),
        Command::ExportScores(args) => run_eval(&args, true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
