//! Command-line front end. Settings resolve as flag, then config file, then
//! built-in default. Exit codes: 0 success, 2 usage, 1 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::bench::{self, BenchConfig, BenchReport, BenchTimings};
use crate::dataio::{self, Sample, TemplateStyle, TokenizedSample, Vocab};
use crate::diffscore::{self, ProbeConfig, ScoreEntry, Stat};
use crate::error::{Error, Result};
use crate::filterpipe::{self, FilterSpec, LayerRange, Manifest, OrderStrategy};
use crate::fsutil;
use crate::model::{Checkpoint, ModelConfig, Module, ParamStore};
use crate::objective::{self, CharacteristicMap, ObjectiveParams};
use crate::train::{self, OptimizerConfig, OptimizerKind, TrainConfig};

pub const WORKERS_ENV: &str = "RESOFILTER_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 128,
            max_seq_len: 96,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub beta: Option<f64>,
    /// Defaults to `5 / |D|`.
    pub lambda: Option<f64>,
    pub map: CharacteristicMap,
}

/// Everything a config file may set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelShape,
    pub style: TemplateStyle,
    pub seed: u64,
    pub workers: Option<usize>,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub probe: ProbeConfig,
    pub filter: FilterSpec,
    pub objective: ObjectiveConfig,
    pub analysis_fraction: f64,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelShape::default(),
            style: TemplateStyle::default(),
            seed: 0,
            workers: None,
            pretrain: StageConfig {
                optimizer: OptimizerConfig::adamw(3e-3),
                train: TrainConfig {
                    epochs: 2,
                    batch_size: 8,
                    shuffle: true,
                    seed: 0,
                },
            },
            finetune: StageConfig::default(),
            probe: ProbeConfig::default(),
            filter: FilterSpec::default(),
            objective: ObjectiveConfig::default(),
            analysis_fraction: 0.01,
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "resofilter", version, about = "Score, filter and analyse instruction-tuning data by per-sample weight change")]
pub struct Cli {
    /// JSON config file; flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic clean/dirty corpus
    Synth(SynthArgs),
    /// Train a base model from scratch and write its checkpoint and vocabulary
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint on a dataset
    Train(TrainArgs),
    /// Mean held-out loss of a checkpoint
    Eval(EvalArgs),
    /// Per-sample weight-change scores
    Score(ScoreArgs),
    /// Keep the lowest-scoring fraction of a dataset
    Filter(FilterArgs),
    /// Evaluate the quantity/quality objective over retain fractions
    Sweep(SweepArgs),
    /// Compare features of high-change, low-change and random samples
    Analyze(AnalyzeArgs),
    /// Run the full synthetic benchmark
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Clean samples
    #[arg(long, default_value_t = 400)]
    pub clean: usize,
    /// Dirty samples
    #[arg(long, default_value_t = 100)]
    pub dirty: usize,
    /// RNG seed [default: config seed, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelFiles {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Vocabulary file written by `pretrain`
    #[arg(long, value_name = "PATH")]
    pub vocab: PathBuf,
    /// Chat template [default: turn_markers]
    #[arg(long)]
    pub style: Option<TemplateStyle>,
}

#[derive(Debug, Args)]
pub struct OptimizerArgs {
    /// adamw or sgd [default: adamw]
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// Learning rate [default: 3e-3 for pretrain, 1e-5 for train]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay [default: 0]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [default: 2 for pretrain, 1 for train]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Shuffle batches each epoch [default: true for pretrain, false for train]
    #[arg(long)]
    pub shuffle: Option<bool>,
    /// Shuffle and initialisation seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

impl OptimizerArgs {
    fn apply(&self, stage: &mut StageConfig) {
        if let Some(k) = self.optimizer {
            stage.optimizer.kind = k;
        }
        if let Some(lr) = self.lr {
            stage.optimizer.lr = lr;
        }
        if let Some(wd) = self.weight_decay {
            stage.optimizer.weight_decay = wd;
        }
        if let Some(e) = self.epochs {
            stage.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            stage.train.batch_size = b;
        }
        if let Some(s) = self.shuffle {
            stage.train.shuffle = s;
        }
        if let Some(s) = self.seed {
            stage.train.seed = s;
        }
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Training corpus (JSONL)
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Further corpora whose words join the vocabulary
    #[arg(long, value_name = "PATH")]
    pub vocab_data: Vec<PathBuf>,
    /// Held-out corpus; its loss before and after training is reported
    #[arg(long, value_name = "PATH")]
    pub heldout: Option<PathBuf>,
    /// Vocabulary output
    #[arg(long, value_name = "PATH")]
    pub vocab: PathBuf,
    /// Checkpoint output
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Per-step training loss log (JSONL)
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    /// [default: 64]
    #[arg(long)]
    pub d_model: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// [default: 96]
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Chat template [default: turn_markers]
    #[arg(long)]
    pub style: Option<TemplateStyle>,
    #[command(flatten)]
    pub opt: OptimizerArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelFiles,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Checkpoint output
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Per-step training loss log (JSONL)
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub opt: OptimizerArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelFiles,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelFiles,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Score file output (JSONL)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// w_q, w_k, w_v, w_up or w_down [default: w_up]
    #[arg(long)]
    pub module: Option<Module>,
    /// mean_abs, mean_signed, std, p90, p95, p99, cosine or pearson [default: mean_abs]
    #[arg(long)]
    pub stat: Option<Stat>,
    /// Score over the last N blocks [default: 3]
    #[arg(long, value_name = "N")]
    pub last_layers: Option<usize>,
    /// Explicit inclusive block range FIRST:LAST
    #[arg(long, value_name = "FIRST:LAST", conflicts_with = "last_layers")]
    pub layer_range: Option<LayerRange>,
    /// Worker threads [default: $RESOFILTER_WORKERS, else all cores]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Probe optimizer, adamw or sgd [default: adamw]
    #[arg(long)]
    pub probe_opt: Option<OptimizerKind>,
    /// Probe learning rate [default: 1e-5]
    #[arg(long)]
    pub probe_lr: Option<f64>,
    /// Probe updates per sample [default: 1]
    #[arg(long)]
    pub probe_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    /// Filtered dataset output (JSONL)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Manifest output [default: <out>.manifest.json]
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Fraction of lowest-scoring samples kept, in (0, 1] [default: 0.5]
    #[arg(long)]
    pub retain: Option<f64>,
    /// original, random, min_to_max or max_to_min [default: original]
    #[arg(long, value_parser = ["original", "random", "min_to_max", "max_to_min"])]
    pub order: Option<String>,
    /// Seed for random ordering [default: config seed, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    /// CSV output [default: stdout]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// [default: 1.0]
    #[arg(long)]
    pub beta: Option<f64>,
    /// [default: 5 / number of samples]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated retain fractions
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub grid: Vec<f64>,
    /// neg_normalized or raw [default: neg_normalized]
    #[arg(long, value_parser = ["neg_normalized", "raw"])]
    pub map: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelFiles,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    /// Report output (JSON)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Directory for one CSV per metric
    #[arg(long, value_name = "DIR")]
    pub csv_dir: Option<PathBuf>,
    /// Class size as a fraction of the dataset, in (0, 0.5] [default: 0.01]
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Seed for the random class [default: config seed, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated run seeds
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    /// Report output (JSON)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Wall-time output (JSON)
    #[arg(long, value_name = "PATH")]
    pub timings: Option<PathBuf>,
    /// Worker threads for scoring [default: $RESOFILTER_WORKERS, else all cores]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Retain fraction for both arms [default: 0.5]
    #[arg(long)]
    pub retain: Option<f64>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Pretrain(a) => cmd_pretrain(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Score(a) => cmd_score(&cfg, a),
        Command::Filter(a) => cmd_filter(&cfg, a),
        Command::Sweep(a) => cmd_sweep(&cfg, a),
        Command::Analyze(a) => cmd_analyze(&cfg, a),
        Command::Bench(a) => cmd_bench(&cfg, a),
    }
}

/// Flag, then config, then the environment, then the core count.
pub fn resolve_workers(flag: Option<usize>, cfg: &RunConfig) -> Result<usize> {
    let n = match flag.or(cfg.workers) {
        Some(n) => n,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v:?} is not a count")))?,
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
    };
    if n == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    Ok(n)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fsutil::write_atomic(path, text.as_bytes())
}

struct LoadedModel {
    config: ModelConfig,
    params: ParamStore,
    vocab: Vocab,
    style: TemplateStyle,
}

impl LoadedModel {
    fn load(files: &ModelFiles, cfg: &RunConfig) -> Result<Self> {
        let ckpt = Checkpoint::load(&files.checkpoint)?;
        let vocab = Vocab::load(&files.vocab)?;
        if vocab.len() != ckpt.config.vocab_size {
            return Err(Error::Data(format!(
                "vocabulary has {} tokens but the checkpoint expects {}",
                vocab.len(),
                ckpt.config.vocab_size
            )));
        }
        Ok(LoadedModel {
            config: ckpt.config,
            params: ckpt.params,
            vocab,
            style: files.style.unwrap_or(cfg.style),
        })
    }

    fn encode(&self, samples: &[Sample]) -> Result<Vec<TokenizedSample>> {
        dataio::encode_all(samples, &self.vocab, self.style, self.config.max_seq_len)
    }
}

fn cmd_synth(cfg: &RunConfig, a: SynthArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let corpus = dataio::synth_corpus(a.clean, a.dirty, seed);
    dataio::save_jsonl(&corpus, &a.out)?;
    println!("wrote {} samples to {}", corpus.len(), a.out.display());
    Ok(())
}

fn save_log(path: Option<&Path>, log: &[train::LogRecord]) -> Result<()> {
    if let Some(p) = path {
        let mut text = String::new();
        for r in log {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fsutil::write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, a: PretrainArgs) -> Result<()> {
    let mut stage = cfg.pretrain.clone();
    a.opt.apply(&mut stage);
    stage.optimizer.validate()?;
    stage.train.validate()?;
    let style = a.style.unwrap_or(cfg.style);
    let shape = ModelShape {
        d_model: a.d_model.unwrap_or(cfg.model.d_model),
        n_heads: a.n_heads.unwrap_or(cfg.model.n_heads),
        n_layers: a.n_layers.unwrap_or(cfg.model.n_layers),
        d_ff: a.d_ff.unwrap_or(cfg.model.d_ff),
        max_seq_len: a.max_seq_len.unwrap_or(cfg.model.max_seq_len),
    };

    let data = dataio::load_jsonl(&a.data)?;
    let mut vocab_sources = data.clone();
    for p in &a.vocab_data {
        vocab_sources.extend(dataio::load_jsonl(p)?);
    }
    let heldout = a.heldout.as_deref().map(dataio::load_jsonl).transpose()?;
    if let Some(h) = &heldout {
        vocab_sources.extend(h.iter().cloned());
    }
    let vocab = Vocab::from_samples(&vocab_sources, style);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model: shape.d_model,
        n_heads: shape.n_heads,
        n_layers: shape.n_layers,
        d_ff: shape.d_ff,
        max_seq_len: shape.max_seq_len,
        seed: stage.train.seed,
    };
    config.validate()?;
    let encoded = dataio::encode_all(&data, &vocab, style, config.max_seq_len)?;
    let heldout = heldout
        .map(|h| dataio::encode_all(&h, &vocab, style, config.max_seq_len))
        .transpose()?;

    let init = ParamStore::init(&config)?;
    let (params, log) = train::train(&config, &init, &encoded, &stage.optimizer, &stage.train)?;
    let mut summary = serde_json::Map::new();
    summary.insert("steps".into(), log.len().into());
    summary.insert("final_batch_loss".into(), log.last().map(|r| r.loss).unwrap_or(f64::NAN).into());
    if let Some(h) = &heldout {
        summary.insert("heldout_loss_init".into(), train::eval_loss(&config, &init, h)?.into());
        summary.insert("heldout_loss".into(), train::eval_loss(&config, &params, h)?.into());
    }

    vocab.save(&a.vocab)?;
    Checkpoint { config, params }.save(&a.out)?;
    save_log(a.log.as_deref(), &log)?;
    println!("{}", serde_json::Value::Object(summary));
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: TrainArgs) -> Result<()> {
    let mut stage = cfg.finetune.clone();
    a.opt.apply(&mut stage);
    stage.optimizer.validate()?;
    stage.train.validate()?;
    let m = LoadedModel::load(&a.model, cfg)?;
    let data = m.encode(&dataio::load_jsonl(&a.data)?)?;
    let (params, log) = train::train(&m.config, &m.params, &data, &stage.optimizer, &stage.train)?;
    Checkpoint {
        config: m.config,
        params,
    }
    .save(&a.out)?;
    save_log(a.log.as_deref(), &log)?;
    println!("{} steps, final batch loss {}", log.len(), log.last().map(|r| r.loss).unwrap_or(f64::NAN));
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let m = LoadedModel::load(&a.model, cfg)?;
    let data = m.encode(&dataio::load_jsonl(&a.data)?)?;
    let loss = train::eval_loss(&m.config, &m.params, &data)?;
    println!("{}", serde_json::json!({ "loss": loss, "samples": data.len() }));
    Ok(())
}

fn score_settings(cfg: &RunConfig, a: &ScoreArgs) -> Result<(FilterSpec, ProbeConfig)> {
    let mut spec = cfg.filter.clone();
    if let Some(m) = a.module {
        spec.module = m;
    }
    if let Some(s) = a.stat {
        spec.stat = s;
    }
    if let Some(n) = a.last_layers {
        spec.layer_window = n;
        spec.layer_range = None;
    }
    if let Some(r) = a.layer_range {
        spec.layer_range = Some(r);
    }
    let mut probe = cfg.probe.clone();
    if let Some(k) = a.probe_opt {
        probe.optimizer.kind = k;
    }
    if let Some(lr) = a.probe_lr {
        probe.optimizer.lr = lr;
    }
    if let Some(s) = a.probe_steps {
        probe.steps = s;
    }
    spec.validate()?;
    probe.optimizer.validate()?;
    if probe.steps == 0 {
        return Err(Error::Config("probe steps must be at least 1".into()));
    }
    Ok((spec, probe))
}

fn cmd_score(cfg: &RunConfig, a: ScoreArgs) -> Result<()> {
    let (spec, probe) = score_settings(cfg, &a)?;
    let workers = resolve_workers(a.workers, cfg)?;
    let m = LoadedModel::load(&a.model, cfg)?;
    spec.window(m.config.n_layers)?;
    let data = m.encode(&dataio::load_jsonl(&a.data)?)?;
    let scores = diffscore::score_dataset(&m.config, &m.params, &data, &spec, &probe, workers)?;
    diffscore::save_scores(&scores, &a.out)?;
    println!("scored {} samples into {}", scores.len(), a.out.display());
    Ok(())
}

/// Checks that `scores` holds exactly one entry per sample index.
fn check_coverage(scores: &[ScoreEntry], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for s in scores {
        match seen.get_mut(s.index) {
            Some(slot) if !*slot => *slot = true,
            Some(_) => return Err(Error::Data(format!("duplicate score for sample {}", s.index))),
            None => {
                return Err(Error::Data(format!(
                    "score for sample {} but the dataset has {n} samples",
                    s.index
                )))
            }
        }
    }
    if scores.len() != n {
        return Err(Error::Data(format!("{} scores for {n} samples", scores.len())));
    }
    Ok(())
}

fn cmd_filter(cfg: &RunConfig, a: FilterArgs) -> Result<()> {
    let mut spec = cfg.filter.clone();
    if let Some(r) = a.retain {
        spec.retain_fraction = r;
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    if let Some(o) = &a.order {
        spec.ordering = OrderStrategy::parse(o, seed)?;
    }
    spec.validate()?;

    let raw = fsutil::read(&a.data)?;
    let text = std::str::from_utf8(&raw).map_err(|e| Error::Data(format!("{}: {e}", a.data.display())))?;
    let data = dataio::parse_jsonl(text)?;
    let scores = diffscore::load_scores(&a.scores)?;
    check_coverage(&scores, data.len())?;

    let kept = filterpipe::select(&scores, spec.retain_fraction)?;
    let ordered = filterpipe::order(&kept, &scores, spec.ordering)?;
    let filtered = filterpipe::apply(&data, &ordered)?;
    let manifest = Manifest {
        kept_indices: ordered,
        spec,
        input_hash: fsutil::sha256_hex(&raw),
    };
    let manifest_path = a.manifest.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".manifest.json");
        PathBuf::from(p)
    });
    dataio::save_jsonl(&filtered, &a.out)?;
    write_json(&manifest_path, &manifest)?;
    println!("kept {} of {} samples", filtered.len(), data.len());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, a: SweepArgs) -> Result<()> {
    let scores = diffscore::load_scores(&a.scores)?;
    if scores.is_empty() {
        return Err(Error::Data("score file is empty".into()));
    }
    let defaults = ObjectiveParams::default_for(scores.len());
    let params = ObjectiveParams {
        beta: a.beta.or(cfg.objective.beta).unwrap_or(defaults.beta),
        lambda: a.lambda.or(cfg.objective.lambda).unwrap_or(defaults.lambda),
    };
    params.validate()?;
    let map = match a.map.as_deref() {
        Some("raw") => CharacteristicMap::Raw,
        Some(_) => CharacteristicMap::NegNormalized,
        None => cfg.objective.map,
    };
    if let Some(bad) = a.grid.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::Config(format!("grid fraction {bad} outside (0, 1]")));
    }
    let rows = objective::sweep(&scores, &a.grid, &params, map)?;
    let csv = objective::sweep_csv(&rows);
    match &a.out {
        Some(p) => fsutil::write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, a: AnalyzeArgs) -> Result<()> {
    let fraction = a.fraction.unwrap_or(cfg.analysis_fraction);
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 0.5]")));
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    let m = LoadedModel::load(&a.model, cfg)?;
    let data = m.encode(&dataio::load_jsonl(&a.data)?)?;
    let scores = diffscore::load_scores(&a.scores)?;
    check_coverage(&scores, data.len())?;
    let report = analysis::report(&data, &scores, fraction, seed, &m.params)?;
    if let Some(dir) = &a.csv_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for h in &report.metrics {
            fsutil::write_atomic(&dir.join(format!("{}.csv", h.metric)), h.to_csv().as_bytes())?;
        }
    }
    write_json(&a.out, &report)?;
    for h in &report.metrics {
        let means: Vec<String> = h.classes.iter().map(|c| format!("{}={:.4}", c.class, c.mean)).collect();
        println!("{}: {}", h.metric, means.join(" "));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSuite {
    pub seeds: Vec<u64>,
    pub auc_at_least_0_90: usize,
    pub resofilter_loss_not_worse: usize,
    pub reports: Vec<BenchReport>,
}

fn cmd_bench(cfg: &RunConfig, a: BenchArgs) -> Result<()> {
    let mut bc = cfg.bench.clone();
    bc.workers = resolve_workers(a.workers, cfg)?;
    if let Some(r) = a.retain {
        bc.filter.retain_fraction = r;
    }
    bc.filter.validate()?;
    if a.seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let mut reports = Vec::new();
    let mut timings: Vec<(u64, BenchTimings)> = Vec::new();
    for &seed in &a.seeds {
        let (r, t) = bench::run(&bc, seed)?;
        eprintln!(
            "seed {seed}: auc {:.4}, loss resofilter {:.5} vs random {:.5} ({:.1}s)",
            r.auc, r.loss_resofilter, r.loss_random, t.total
        );
        reports.push(r);
        timings.push((seed, t));
    }
    let suite = BenchSuite {
        seeds: a.seeds.clone(),
        auc_at_least_0_90: reports.iter().filter(|r| r.auc_passes(0.90)).count(),
        resofilter_loss_not_worse: reports.iter().filter(|r| r.loss_passes()).count(),
        reports,
    };
    write_json(&a.out, &suite)?;
    if let Some(p) = &a.timings {
        write_json(p, &timings)?;
    }
    println!(
        "auc >= 0.90 on {}/{} seeds; resofilter loss <= random on {}/{}",
        suite.auc_at_least_0_90,
        suite.seeds.len(),
        suite.resofilter_loss_not_worse,
        suite.seeds.len()
    );
    Ok(())
}
