//! Command-line verbs. Each verb reads and writes files only, so stages can be
//! rerun independently.
//!
//! Layout under `run.out`:
//!
//! ```text
//! scenes/<date>.wfrs
//! dataset/{train,val,test}.wfds, dataset/stats.json
//! model/model.wfck, model/model.json, model/report.csv
//! eval/metrics.csv, eval/tile_<i>_{prob,label}.pgm
//! predict/<i>_<date>_<row>_<col>.pgm
//! sweep/sweep.csv
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalResult};
use crate::models::{Arch, Model, ModelConfig};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::raster::{self, ChannelStats, RasterStack};
use crate::sampler::{self, DaySplit, Sample, Split, Task};
use crate::synth;
use crate::training::{self, TrainConfig, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "wildfire", version, about = "Wildfire likelihood tiles, models and metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stage; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Working directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub task: Option<Task>,
    #[arg(long, global = true)]
    pub model: Option<Arch>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate synthetic daily raster stacks.
    Synth,
    /// Tile scenes into normalized train/val/test datasets.
    BuildDataset,
    /// Train a model and keep the best-validation checkpoint.
    Train,
    /// Score a split and write a metrics row.
    Eval,
    /// Write per-tile probability maps.
    Predict,
    /// Train and evaluate every combination of the sweep lists.
    Sweep,
}

impl Cli {
    /// Config file, then environment, then flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.run.seed = Some(seed);
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        if let Some(task) = self.task {
            cfg.run.task = task;
        }
        if let Some(arch) = self.model {
            cfg.run.arch = arch;
        }
        if let Some(t) = self.threshold {
            cfg.run.threshold = t;
        }
        cfg.validate()?;
        Ok(cfg.resolved())
    }
}

/// Process exit status for each error class.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::TaskMismatch(_) => 4,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Truncated { .. }
        | Error::MalformedHeader { .. } => 5,
        Error::EmptyDataset(_)
        | Error::SamplingExhausted { .. }
        | Error::GridTooSmall { .. }
        | Error::UndefinedAuc { .. } => 6,
        Error::Io { .. } => 7,
        _ => 1,
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Synth => cmd_synth(cfg).map(drop),
        Command::BuildDataset => cmd_build_dataset(cfg).map(drop),
        Command::Train => cmd_train(cfg).map(drop),
        Command::Eval => cmd_eval(cfg).map(drop),
        Command::Predict => cmd_predict(cfg).map(drop),
        Command::Sweep => cmd_sweep(cfg).map(drop),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("WF_LOG", "info")).init();
    let cli = Cli::parse();
    match cli.run_config().and_then(|cfg| run(cli.command, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::MalformedHeader {
        format: "JSON",
        reason: format!("{}: {e}", path.display()),
    })
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.scenes_dir();
    create_dir(&dir)?;
    let run = synth::gen_scenes(&cfg.synth)?;
    for stack in &run.stacks {
        raster::write_stack(stack, dir.join(format!("{}.wfrs", stack.date())))?;
    }
    log::info!("wrote {} scenes to {}", run.stacks.len(), dir.display());
    Ok(dir)
}

/// All `.wfrs` files in `dir`, in date order.
pub fn read_scenes(dir: &Path) -> Result<Vec<RasterStack>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wfrs"))
        .collect();
    paths.sort();
    let mut stacks = paths.iter().map(raster::read_stack).collect::<Result<Vec<_>>>()?;
    stacks.sort_by_key(|s| s.date());
    if stacks.is_empty() {
        return Err(Error::EmptyDataset(format!("no .wfrs files in {}", dir.display())));
    }
    Ok(stacks)
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.wfds"))
}

/// Normalizes with statistics of the training-split days, then tiles.
pub fn cmd_build_dataset(cfg: &RunConfig) -> Result<PathBuf> {
    let stacks = read_scenes(&cfg.scenes_dir())?;
    let splits = sampler::split_table(&stacks, &cfg.sampler);
    let train_days = stacks
        .iter()
        .filter(|s| splits.get(&s.date()) == Some(&DaySplit::Split(Split::Train)));
    let stats = ChannelStats::compute(train_days)?;
    let normalized = stacks
        .iter()
        .map(|s| raster::normalize(s, &stats))
        .collect::<Result<Vec<_>>>()?;
    let samples = sampler::build_dataset(&normalized, &cfg.sampler, cfg.run.task)?;
    let all = Dataset::new(samples);

    let dir = cfg.dataset_dir();
    create_dir(&dir)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let part = all.split(split);
        log::info!("{split}: {} samples ({} positive)", part.len(), part.positives());
        part.write(split_path(&dir, split))?;
    }
    write_text(&dir.join("stats.json"), &to_json(&stats))?;
    Ok(dir)
}

/// Sidecar describing a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub model: ModelConfig,
    pub task: Task,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
}

/// Static models given sequence data train on the last frame; sequence
/// models need sequence data.
pub fn fit_dataset(data: Dataset, arch: Arch) -> Result<Dataset> {
    let sequential = data.samples.first().is_some_and(|s| matches!(s, Sample::Sequence(_)));
    match (arch.is_sequence(), sequential) {
        (true, false) if !data.is_empty() => Err(Error::TaskMismatch(format!(
            "{arch} needs sequence samples, dataset holds {}",
            data.task().map_or("none".into(), |t| t.to_string())
        ))),
        (false, true) => Ok(data.last_frame()),
        _ => Ok(data),
    }
}

fn load_split(cfg: &RunConfig, split: Split, arch: Arch) -> Result<Dataset> {
    let data = Dataset::read(split_path(&cfg.dataset_dir(), split))?;
    if let Some(task) = data.task() {
        if task != cfg.run.task {
            return Err(Error::TaskMismatch(format!(
                "config task is {} but {split} data holds {task} samples",
                cfg.run.task
            )));
        }
    }
    fit_dataset(data, arch)
}

pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Model::build(config, &mut rng)
}

fn train_model(
    cfg: &RunConfig,
    arch: Arch,
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let train_data = load_split(cfg, Split::Train, arch)?;
    let val_data = load_split(cfg, Split::Val, arch)?;
    let mut model = init_model(model_cfg, train_cfg.rng_seed)?;
    let report = training::train(&mut model, &train_data, &val_data, train_cfg)?;
    model.set_parameters(report.best_params.clone())?;
    Ok((model, report))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let arch = cfg.run.arch;
    let (model, report) = train_model(cfg, arch, cfg.model_config(arch), &cfg.train)?;
    let dir = cfg.model_dir();
    create_dir(&dir)?;
    save_checkpoint(model.parameters(), dir.join("model.wfck"))?;
    let card = ModelCard {
        model: model.config().clone(),
        task: cfg.run.task,
        best_epoch: report.best_epoch,
        best_val_auc: report.best_val_auc,
    };
    write_text(&dir.join("model.json"), &to_json(&card))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).expect("in-memory write");
    fs::write(dir.join("report.csv"), csv).map_err(|e| Error::io(dir.join("report.csv"), e))?;
    Ok(dir)
}

pub fn load_model(dir: &Path) -> Result<(Model, ModelCard)> {
    let card: ModelCard = from_json(&dir.join("model.json"))?;
    let params = load_checkpoint(dir.join("model.wfck"))?;
    Ok((Model::from_parameters(card.model.clone(), params)?, card))
}

fn load_for_eval(cfg: &RunConfig) -> Result<(Model, Dataset)> {
    let (model, card) = load_model(&cfg.model_dir())?;
    if card.task != cfg.run.task {
        return Err(Error::TaskMismatch(format!(
            "model was trained on {} but config task is {}",
            card.task, cfg.run.task
        )));
    }
    let data = load_split(cfg, cfg.eval.split, card.model.arch)?;
    data.check_model(&model)?;
    Ok((model, data))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<PathBuf> {
    let (model, data) = load_for_eval(cfg)?;
    let (scores, labels) = metrics::predict_dataset(&model, &data)?;
    let result = EvalResult::from_scores(&scores, &labels, cfg.run.threshold)?;
    let dir = cfg.run.out.join("eval");
    create_dir(&dir)?;
    let mut csv = Vec::new();
    result.write_csv(&mut csv).expect("in-memory write");
    fs::write(dir.join("metrics.csv"), csv).map_err(|e| Error::io(dir.join("metrics.csv"), e))?;

    let tile = model.config().tile;
    let pixels = tile * tile;
    for i in 0..cfg.eval.pgm_tiles.min(data.len()) {
        let span = i * pixels..(i + 1) * pixels;
        metrics::write_pgm(
            dir.join(format!("tile_{i:05}_prob.pgm")),
            tile,
            tile,
            &scores[span.clone()],
        )?;
        metrics::write_label_pgm(dir.join(format!("tile_{i:05}_label.pgm")), tile, tile, &labels[span])?;
    }
    log::info!("{}", result.csv_row());
    Ok(dir)
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<PathBuf> {
    let (model, data) = load_for_eval(cfg)?;
    let (scores, _) = metrics::predict_dataset(&model, &data)?;
    let dir = cfg.run.out.join("predict");
    create_dir(&dir)?;
    let tile = model.config().tile;
    let pixels = tile * tile;
    for (i, s) in data.samples.iter().enumerate() {
        let (r, c) = s.origin();
        let name = format!("{i:05}_{}_{r}_{c}.pgm", s.date());
        metrics::write_pgm(dir.join(name), tile, tile, &scores[i * pixels..(i + 1) * pixels])?;
    }
    Ok(dir)
}

pub const SWEEP_HEADER: &str = "arch,learning_rate,batch_size,positive_weight,filter_scheme,best_epoch,best_val_auc";

fn or_base<T: Clone>(list: &[T], base: T) -> Vec<T> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

/// Cartesian product of the sweep lists, in nested order arch, learning
/// rate, batch size, positive weight, filter scheme.
pub fn sweep_grid(cfg: &RunConfig) -> Vec<(Arch, TrainConfig, Vec<usize>)> {
    let s = &cfg.sweep;
    let mut grid = Vec::new();
    for arch in or_base(&s.arch, cfg.run.arch) {
        for lr in or_base(&s.learning_rate, cfg.train.learning_rate) {
            for bs in or_base(&s.batch_size, cfg.train.batch_size) {
                for w in or_base(&s.positive_weight, cfg.train.positive_weight) {
                    for scheme in or_base(&s.filter_scheme, cfg.model.filter_scheme.clone()) {
                        let train = TrainConfig {
                            learning_rate: lr,
                            batch_size: bs,
                            positive_weight: w,
                            ..cfg.train.clone()
                        };
                        grid.push((arch, train, scheme));
                    }
                }
            }
        }
    }
    grid
}

fn opt(v: Option<impl ToString>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run.out.join("sweep");
    create_dir(&dir)?;
    let mut out = format!("{SWEEP_HEADER},{}\n", EvalResult::CSV_HEADER);
    for (arch, train_cfg, scheme) in sweep_grid(cfg) {
        train_cfg.validate()?;
        let model_cfg = ModelConfig {
            filter_scheme: scheme.clone(),
            ..cfg.model_config(arch)
        };
        model_cfg.validate()?;
        let (model, report) = train_model(cfg, arch, model_cfg, &train_cfg)?;
        let data = load_split(cfg, cfg.eval.split, arch)?;
        let result = metrics::evaluate(&model, &data, cfg.run.threshold)?;
        let scheme_text = scheme.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        let row = format!(
            "{arch},{},{},{},{scheme_text},{},{},{}\n",
            train_cfg.learning_rate,
            train_cfg.batch_size,
            train_cfg.positive_weight,
            opt(report.best_epoch),
            opt(report.best_val_auc.map(|a| format!("{a:.10}"))),
            result.csv_row()
        );
        log::info!("{}", row.trim_end());
        out.push_str(&row);
    }
    let path = dir.join("sweep.csv");
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
