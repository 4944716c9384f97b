use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kvcloak::attacks::{
    collision_attack, injection_attack, inversion_attack, AttackReport, CollisionParams, DistanceParts, InversionMode,
    PositionRecord, StatsWindow, ThresholdMode,
};
use kvcloak::cloak::{
    decloak_cache, flop_model, fuse_weights, provision, cloak_cache, CloakKey, KeyParams, KeyScope, RowOrder,
};
use kvcloak::container::Container;
use kvcloak::harness::{
    emit_report, generate_corpus, load_report, run_matrix, CorpusConfig, CorpusSource, ExperimentConfig, Precision,
};
use kvcloak::model::echo::{echo_weights, BOS};
use kvcloak::model::{init_weights, Model, ModelConfig, PagedKvCache, Weights};
use kvcloak::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "kvcloak", version, about = "KV-cache attacks and obfuscation on a toy decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize model weights.
    GenWeights(GenWeights),
    /// Sample a prompt corpus as JSON.
    GenCorpus(GenCorpus),
    /// Prefill one corpus item and save its KV-cache.
    Prefill(PrefillArgs),
    /// Sample a key, fuse it into the weights and calibrate it.
    Keygen(KeygenArgs),
    /// Fuse an existing key into plaintext weights.
    Fuse(FuseArgs),
    /// Obfuscate a cache produced by fused weights.
    Cloak(CloakArgs),
    /// Restore a cloaked cache.
    Decloak(DecloakArgs),
    /// Run one reconstruction attack on a cache.
    Attack(AttackArgs),
    /// Run a defense × attack matrix from a config file.
    Matrix(MatrixArgs),
    /// Print the built-in matrix config as JSON.
    DefaultConfig {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the per-block multiplication counts.
    Flops(FlopsArgs),
    /// Summarize a saved report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    ToyMha,
    ToyGqa,
    Echo,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct GenWeights {
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "toy-mha", conflicts_with = "config")]
    preset: Preset,
    /// JSON model configuration instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Relative perturbation of every weight, seeded from `--seed + 1`.
    #[arg(long)]
    perturb: Option<f64>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Model,
    Uniform,
    Distinct,
}

#[derive(Args)]
struct GenCorpus {
    #[arg(long)]
    seed: u64,
    /// Weights to sample from; required for `--source model`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Vocabulary size when no weights are given.
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 20)]
    min_len: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, value_enum, default_value = "model")]
    source: SourceArg,
    #[arg(long, default_value_t = 0.2)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrefillArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    weights: PathBuf,
    /// Corpus whose fused caches calibrate the outlier scale.
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    per_layer: bool,
    #[arg(long)]
    out_key: PathBuf,
    #[arg(long)]
    out_weights: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CloakArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long, default_value_t = 0)]
    epoch: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecloakArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// Restore rows to their original positions instead of key order.
    #[arg(long)]
    original_order: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Inversion,
    Collision,
    Injection,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    LeastSquares,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    cache: PathBuf,
    /// The attacker's copy of the model weights.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_enum)]
    kind: AttackKind,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, value_enum, default_value = "exact")]
    mode: ModeArg,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    vocab_fraction: f64,
    /// Fixed acceptance threshold instead of the running heuristic.
    #[arg(long)]
    threshold: Option<f64>,
    /// Comma-separated instruction tokens for injection.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    instruction: Vec<u32>,
    #[arg(long)]
    max_new: Option<usize>,
    /// Corpus and index holding the true prompt, for scoring.
    #[arg(long, requires = "truth_index")]
    truth: Option<PathBuf>,
    #[arg(long)]
    truth_index: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Experiment config; the built-in matrix is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the built-in matrix.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = 64)]
    block_size: u64,
    #[arg(long, default_value_t = 128)]
    head_dim: u64,
    #[arg(long, default_value_t = 4096)]
    hidden: u64,
}

#[derive(Args)]
struct ReportArgs {
    report: PathBuf,
    /// Re-emit the per-trial CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

macro_rules! by_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn file_precision(path: &Path) -> Result<Precision> {
    let c = Container::load(path).with_context(|| format!("reading {}", path.display()))?;
    match c.float_dtype() {
        Some("f64") => Ok(Precision::F64),
        Some("f32") => Ok(Precision::F32),
        _ => bail!("{} holds no floating-point arrays", path.display()),
    }
}

fn read_corpus(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing corpus {}", path.display()))
}

fn corpus_item(path: &Path, index: usize) -> Result<Vec<u32>> {
    let corpus = read_corpus(path)?;
    let n = corpus.len();
    corpus.into_iter().nth(index).with_context(|| format!("corpus has {n} items, index {index} requested"))
}

fn gen_weights(args: GenWeights) -> Result<()> {
    let weights = match (&args.config, args.preset) {
        (Some(path), _) => {
            let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
            init_weights(&cfg, args.seed)?
        }
        (None, Preset::ToyMha) => init_weights(&ModelConfig::toy_mha(), args.seed)?,
        (None, Preset::ToyGqa) => init_weights(&ModelConfig::toy_gqa(), args.seed)?,
        (None, Preset::Echo) => echo_weights(ModelConfig::toy_mha().vocab, args.seed)?,
    };
    let weights = match args.perturb {
        Some(rho) => weights.perturbed(rho, args.seed.wrapping_add(1)),
        None => weights,
    };
    match args.precision {
        PrecisionArg::F32 => weights.cast::<f32>().save(&args.out)?,
        PrecisionArg::F64 => weights.save(&args.out)?,
    }
    Ok(())
}

fn gen_corpus_with<T: Scalar>(args: &GenCorpus, config: &CorpusConfig) -> Result<Vec<Vec<u32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let model = match &args.weights {
        Some(path) => Some(Model::new(Weights::<T>::load(path)?)?),
        None => None,
    };
    let vocab = match (&model, args.vocab) {
        (Some(m), _) => m.config().vocab,
        (None, Some(v)) => v,
        (None, None) => bail!("either --weights or --vocab is required"),
    };
    Ok(generate_corpus(config, vocab, model.as_ref(), &mut rng)?)
}

fn gen_corpus(args: GenCorpus) -> Result<()> {
    let source = match args.source {
        SourceArg::Model => CorpusSource::ModelSampled { temperature: args.temperature },
        SourceArg::Uniform => CorpusSource::Uniform,
        SourceArg::Distinct => CorpusSource::DistinctUniform,
    };
    let config = CorpusConfig { count: args.count, min_len: args.min_len, max_len: args.max_len, source };
    let precision = match &args.weights {
        Some(path) => file_precision(path)?,
        None => Precision::F64,
    };
    let corpus = by_precision!(precision, gen_corpus_with(&args, &config))?;
    fs::write(&args.out, serde_json::to_string(&corpus)? + "\n")?;
    Ok(())
}

fn prefill<T: Scalar>(args: &PrefillArgs) -> Result<()> {
    let model = Model::new(Weights::<T>::load(&args.weights)?)?;
    let seq = corpus_item(&args.corpus, args.index)?;
    model.forward_prefill(&seq)?.1.save(&args.out)?;
    Ok(())
}

fn keygen<T: Scalar>(args: &KeygenArgs) -> Result<()> {
    let weights = Weights::<T>::load(&args.weights)?;
    let calibration = read_corpus(&args.calibration)?;
    let params = KeyParams { scope: if args.per_layer { KeyScope::PerLayer } else { KeyScope::Global }, ..KeyParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (key, fused) = provision(&weights, &calibration, &params, &mut rng)?;
    key.save(&args.out_key)?;
    fused.as_weights().save(&args.out_weights)?;
    Ok(())
}

fn fuse<T: Scalar>(args: &FuseArgs) -> Result<()> {
    let weights = Weights::<T>::load(&args.weights)?;
    let key = CloakKey::load(&args.key)?;
    fuse_weights(&weights, &key.material())?.as_weights().save(&args.out)?;
    Ok(())
}

fn cloak<T: Scalar>(args: &CloakArgs) -> Result<()> {
    let cache = PagedKvCache::<T>::load(&args.cache)?;
    cloak_cache(&cache, &CloakKey::load(&args.key)?, args.epoch)?.save(&args.out)?;
    Ok(())
}

fn decloak<T: Scalar>(args: &DecloakArgs) -> Result<()> {
    let cache = PagedKvCache::<T>::load(&args.cache)?;
    let order = if args.original_order { RowOrder::Original } else { RowOrder::Permuted };
    decloak_cache(&cache, &CloakKey::load(&args.key)?, order)?.save(&args.out)?;
    Ok(())
}

fn attack<T: Scalar>(args: &AttackArgs) -> Result<AttackReport> {
    let cache = PagedKvCache::<T>::load(&args.cache)?;
    let model = Model::new(Weights::<T>::load(&args.weights)?)?;
    let truth = match (&args.truth, args.truth_index) {
        (Some(path), Some(i)) => Some(corpus_item(path, i)?),
        _ => None,
    };
    Ok(match args.kind {
        AttackKind::Inversion => {
            let mode = match args.mode {
                ModeArg::Exact => InversionMode::Exact,
                ModeArg::LeastSquares => InversionMode::LeastSquares,
            };
            inversion_attack(&cache.extract_layer_kv(args.layer)?, model.weights(), args.layer, mode, truth.as_deref())?
        }
        AttackKind::Collision => {
            let params = CollisionParams {
                layer: args.layer,
                batch_size: args.batch_size,
                sigma_multiplier: args.sigma,
                vocab_fraction: args.vocab_fraction,
                threshold_mode: match args.threshold {
                    Some(threshold) => ThresholdMode::Enhanced { rank: 0, threshold },
                    None => ThresholdMode::Heuristic,
                },
                parts: DistanceParts::Both,
                window: StatsWindow::Cumulative,
            };
            collision_attack(&cache.extract_layer_kv(args.layer)?, &model, &params, truth.as_deref())?
        }
        AttackKind::Injection => {
            let truth = truth.map(|t| if t.first() == Some(&BOS) { t[1..].to_vec() } else { t });
            let max_new = args.max_new.or(truth.as_ref().map(Vec::len)).unwrap_or(cache.seq_len());
            let start = std::time::Instant::now();
            let out = injection_attack(&cache, &args.instruction, max_new, &model)?;
            let mut report = AttackReport::new(
                out.tokens.into_iter().map(PositionRecord::direct).collect(),
                start.elapsed().as_secs_f64(),
            );
            report.protected_input = out.protected_input;
            report.scored(truth.as_deref())
        }
    })
}

fn run_attack(args: AttackArgs) -> Result<()> {
    let report = by_precision!(file_precision(&args.cache)?, attack(&args))?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(path) => fs::write(path, json)?,
        None => print!("{json}"),
    }
    if let (Some(em), Some(rl)) = (report.exact_match, report.rouge_l) {
        eprintln!("exact_match {em:.4}  rouge_l {rl:.4}  ({:.3}s)", report.wall_time);
    }
    Ok(())
}

fn matrix(args: MatrixArgs) -> Result<ExitCode> {
    let config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_matrix(args.seed),
    };
    let report = run_matrix(&config)?;
    emit_report(&report, &args.out, args.csv.as_deref())?;
    print_summary(&report);
    let aborted = report.aborted_trials();
    if aborted > 0 {
        eprintln!("{aborted} trial(s) aborted; see the error column");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn print_summary(report: &kvcloak::harness::Report) {
    println!("{:<16} {:<22} {:>5} {:>7} {:>9} {:>9}", "defense", "attack", "layer", "trials", "exact", "rouge_l");
    for c in &report.aggregates {
        let layer = c.layer.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
        let mean = |s: Option<kvcloak::harness::Summary>| s.map(|s| format!("{:.4}", s.mean)).unwrap_or_else(|| "-".into());
        println!(
            "{:<16} {:<22} {:>5} {:>7} {:>9} {:>9}",
            c.defense,
            c.attack,
            layer,
            c.trials - c.errors,
            mean(c.exact_match),
            mean(c.rouge_l)
        );
    }
    for u in &report.utility {
        println!("utility {:<16} mean KL {:.3e}  top-1 {:.4}", u.defense, u.mean_kl, u.top1_agreement);
    }
    if let Some(o) = &report.overheads {
        for d in &o.defenses {
            println!("overhead {:<16} {:+.1}%", d.defense, 100.0 * d.overhead);
        }
        if let Some(ob) = &o.obfuscation {
            println!("obfuscation fused {:.3} ms, unfused {:.3} ms", 1e3 * ob.fused_seconds, 1e3 * ob.unfused_seconds);
        }
    }
    println!("wall time {:.1}s", report.wall_time);
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::GenWeights(args) => gen_weights(args)?,
        Command::GenCorpus(args) => gen_corpus(args)?,
        Command::Prefill(args) => by_precision!(file_precision(&args.weights)?, prefill(&args))?,
        Command::Keygen(args) => by_precision!(file_precision(&args.weights)?, keygen(&args))?,
        Command::Fuse(args) => by_precision!(file_precision(&args.weights)?, fuse(&args))?,
        Command::Cloak(args) => by_precision!(file_precision(&args.cache)?, cloak(&args))?,
        Command::Decloak(args) => by_precision!(file_precision(&args.cache)?, decloak(&args))?,
        Command::Attack(args) => run_attack(args)?,
        Command::Matrix(args) => return matrix(args),
        Command::DefaultConfig { seed } => print!("{}", ExperimentConfig::default_matrix(seed).to_json()?),
        Command::Flops(args) => {
            let f = flop_model(args.block_size, args.head_dim, args.hidden);
            println!("{}", serde_json::to_string_pretty(&f)?);
        }
        Command::Report(args) => {
            let report = load_report(&args.report)?;
            print_summary(&report);
            if let Some(csv) = &args.csv {
                fs::write(csv, report.to_csv())?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
