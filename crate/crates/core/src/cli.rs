//! The `ted` command line: argument parsing, config merging, run
//! directories named by fingerprint, and exit-code mapping.
//!
//! Every command writes into `<out>/<fingerprint prefix>/` and echoes the
//! effective configuration there. The fingerprint hashes the command, the
//! effective configuration, the contents of every input file and the crate
//! version, so equal fingerprints mean equal outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregator::{load_checkpoint, save_checkpoint};
use crate::diffusion::{save_denoiser, select_captions, train_joint, trajectory_report, ToyDiffConfig};
use crate::encoder::{parse_encoder_uri, HiddenStateSource};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, shuffle_report, stability_runs, EvalOptions, PipelineEmbedder, Similarity, StabilityResult};
use crate::fusion::FusionStrategy;
use crate::io::{load_pairs, load_ted6k, write_jsonl};
use crate::numerics::Precision;
use crate::stats::pearson;
use crate::toygen::{generate, ToyCorpusConfig};
use crate::trainer::{checkpoint_strategy, train_aggregator, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ted", version, about = "Text-encoder evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train a context aggregator on caption pairs.
    Train(Flags),
    /// Score a benchmark with a trained aggregator.
    Eval(Flags),
    /// Score a benchmark with captions deranged across instances.
    Shuffle(Flags),
    /// Train and score once per seed and report the spread.
    Stability(Flags),
    /// Pearson correlation of a two-column table.
    Correlate(Flags),
    /// Joint denoiser and fusion-weight training on the toy mixture.
    Toydiff(Flags),
    /// Write the synthetic caption-pair corpus and benchmark.
    Toygen(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Shuffle(_) => "shuffle",
            Command::Stability(_) => "stability",
            Command::Correlate(_) => "correlate",
            Command::Toydiff(_) => "toydiff",
            Command::Toygen(_) => "toygen",
        }
    }

    fn flags(&self) -> &Flags {
        match self {
            Command::Train(f)
            | Command::Eval(f)
            | Command::Shuffle(f)
            | Command::Stability(f)
            | Command::Correlate(f)
            | Command::Toydiff(f)
            | Command::Toygen(f) => f,
        }
    }
}

/// Flags shared by all commands; each command reads the ones it needs. The
/// same keys (kebab-case) are accepted in a `--config` TOML file.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Flags {
    /// TOML file with defaults for any flag below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Benchmark JSONL.
    #[arg(long)]
    pub bench: Option<PathBuf>,
    /// Caption-pair JSONL.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// `toy:key=value,...` or `tedh:<dir>`.
    #[arg(long)]
    pub encoder: Option<String>,
    /// last, penult, avg, norm_avg, learnable or layer:<i>.
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub freeze_step: Option<u64>,
    /// Aggregator checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Parent of the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// test or run.
    #[arg(long)]
    pub precision: Option<String>,
    /// cosine or dot.
    #[arg(long)]
    pub metric: Option<String>,
    /// Seeds for `stability`.
    #[arg(long)]
    pub n_seeds: Option<usize>,
    /// Second strategy for `stability`; the ranking per seed is reported.
    #[arg(long)]
    pub compare: Option<String>,
    /// Two-column table for `correlate`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Training steps for `toydiff`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Number of captions `toydiff` draws from the corpus.
    #[arg(long)]
    pub captions: Option<usize>,
    /// true or shuffled conditioning for `toydiff`.
    #[arg(long)]
    pub conditioning: Option<String>,
}

macro_rules! merge_fields {
    ($a:expr, $b:expr, $($f:ident),*) => { Flags { config: None, $($f: $a.$f.clone().or_else(|| $b.$f.clone()),)* } };
}

impl Flags {
    /// Flags take precedence over the config file.
    pub fn merged(&self) -> Result<Flags> {
        let file = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading config {}", p.display()), e))?;
                toml::from_str::<Flags>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Flags::default(),
        };
        Ok(merge_fields!(
            self, file, bench, pairs, encoder, fusion, freeze_step, ckpt, out, seed, threads, lr, epochs, batch, tau,
            precision, metric, n_seeds, compare, input, steps, captions, conditioning
        ))
    }
}

/// Exit code for an error: 1 usage or validation, 2 input, 3 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Item { source, .. } => exit_code(source),
        Error::Numeric(_) => 3,
        Error::Io { .. } | Error::Record { .. } | Error::Tedh(_) | Error::Checkpoint(_) => 2,
        Error::Argument(_) | Error::Config(_) | Error::State(_) => 1,
    }
}

/// Single-line, tab-separated error record for scripts.
pub fn error_line(code: i32, kind: &str, message: &str) -> String {
    let flat: String = message.chars().map(|c| if c == '\n' || c == '\t' { ' ' } else { c }).collect();
    format!("error\tcode={code}\tkind={kind}\tmsg={flat}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub fingerprint: String,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            eprintln!("{}", error_line(1, "usage", &e.kind().to_string()));
            return 1;
        }
    };
    match run(&cli.command) {
        Ok(out) => {
            println!("run directory: {}", out.run_dir.display());
            0
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(code, e.kind(), &e.to_string()));
            code
        }
    }
}

/// Runs one command on a thread pool capped by `--threads`.
pub fn run(command: &Command) -> Result<RunOutcome> {
    let flags = command.flags().merged()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = flags.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| dispatch(command.name(), flags))
}

fn dispatch(name: &str, flags: Flags) -> Result<RunOutcome> {
    match name {
        "train" => cmd_train(flags),
        "eval" => cmd_eval(flags),
        "shuffle" => cmd_shuffle(flags),
        "stability" => cmd_stability(flags),
        "correlate" => cmd_correlate(flags),
        "toydiff" => cmd_toydiff(flags),
        "toygen" => cmd_toygen(flags),
        other => Err(Error::Config(format!("unknown command {other}"))),
    }
}

const DEFAULT_ENCODER: &str = "toy:";
const DEFAULT_OUT: &str = "out";

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("missing required flag --{flag}")))
}

/// Hex SHA-256 of a file, failing with an input error naming the path.
fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Creates the run directory and writes `config.toml` and `fingerprint.txt`.
fn open_run(command: &str, effective: &Flags, inputs: &[&Path]) -> Result<RunOutcome> {
    let mut identity = effective.clone();
    identity.out = None;
    identity.threads = None;
    let config = toml::to_string(&identity).map_err(|e| Error::Config(format!("serializing config: {e}")))?;
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(config.as_bytes());
    for p in inputs {
        h.update(file_hash(p)?.as_bytes());
    }
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    let fingerprint = hex::encode(h.finalize());
    let root = effective.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let run_dir = root.join(&fingerprint[..16]);
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(format!("creating {}", run_dir.display()), e))?;
    let echoed = format!("# ted {command}\n{}", toml::to_string(effective).expect("flags serialize"));
    write_file(&run_dir.join("config.toml"), echoed)?;
    write_file(&run_dir.join("fingerprint.txt"), format!("{fingerprint}\n"))?;
    log::info!("{command}: run directory {}", run_dir.display());
    Ok(RunOutcome { run_dir, fingerprint })
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses a string setting, recording `default` when it is unset.
fn setting<T: std::str::FromStr<Err = Error>>(slot: &mut Option<String>, default: &str) -> Result<T> {
    slot.get_or_insert_with(|| default.into()).parse()
}

/// Training settings from flags, with defaults filled back into `flags`.
fn train_config(flags: &mut Flags) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: *flags.lr.get_or_insert(d.lr),
        epochs: *flags.epochs.get_or_insert(d.epochs),
        batch_size: *flags.batch.get_or_insert(d.batch_size),
        tau: *flags.tau.get_or_insert(d.tau),
        seed: *flags.seed.get_or_insert(d.seed),
        fusion: setting(&mut flags.fusion, "norm_avg")?,
        freeze_step: flags.freeze_step,
        precision: setting(&mut flags.precision, "test")?,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn encoder_of(flags: &mut Flags) -> Result<Box<dyn HiddenStateSource>> {
    parse_encoder_uri(flags.encoder.get_or_insert_with(|| DEFAULT_ENCODER.into()))
}

fn eval_options(flags: &mut Flags) -> Result<EvalOptions> {
    Ok(EvalOptions {
        metric: setting::<Similarity>(&mut flags.metric, "cosine")?,
        ..EvalOptions::default()
    })
}

pub fn cmd_train(mut flags: Flags) -> Result<RunOutcome> {
    let pairs_path = require(&flags.pairs, "pairs")?.clone();
    let cfg = train_config(&mut flags)?;
    let encoder = encoder_of(&mut flags)?;
    let run = open_run("train", &flags, &[&pairs_path])?;
    let pairs = load_pairs(&pairs_path)?;
    let out = train_aggregator(&pairs, encoder.as_ref(), &cfg)?;
    save_checkpoint(&out.params, run.run_dir.join("agg.bin"))?;
    out.history.write_tsv(run.run_dir.join("history.tsv"))?;
    if let Some(w) = &out.fusion {
        write_file(&run.run_dir.join("fusion_weights.txt"), w.to_record())?;
    }
    log::info!("trained {} steps in {:.1}s", out.history.rows.len(), out.history.wall_clock_secs);
    Ok(run)
}

pub fn cmd_eval(mut flags: Flags) -> Result<RunOutcome> {
    let bench_path = require(&flags.bench, "bench")?.clone();
    let ckpt = require(&flags.ckpt, "ckpt")?.clone();
    let encoder = encoder_of(&mut flags)?;
    let requested: FusionStrategy = setting(&mut flags.fusion, "norm_avg")?;
    let opts = eval_options(&mut flags)?;
    let params = load_checkpoint(&ckpt)?;
    let run = open_run("eval", &flags, &[&bench_path, &ckpt])?;
    let bench = load_ted6k(&bench_path)?;
    let strategy = checkpoint_strategy(&params, &requested)?;
    let report = evaluate(&bench, encoder.as_ref(), &strategy, &params, &opts)?;
    report.write(&run.run_dir)?;
    print!("{}", report.to_text());
    Ok(run)
}

pub fn cmd_shuffle(mut flags: Flags) -> Result<RunOutcome> {
    let bench_path = require(&flags.bench, "bench")?.clone();
    let ckpt = require(&flags.ckpt, "ckpt")?.clone();
    let encoder = encoder_of(&mut flags)?;
    let requested: FusionStrategy = setting(&mut flags.fusion, "norm_avg")?;
    let seed = *flags.seed.get_or_insert(0);
    let opts = eval_options(&mut flags)?;
    let params = load_checkpoint(&ckpt)?;
    let run = open_run("shuffle", &flags, &[&bench_path, &ckpt])?;
    let bench = load_ted6k(&bench_path)?;
    let strategy = checkpoint_strategy(&params, &requested)?;
    let embedder = PipelineEmbedder::new(encoder.as_ref(), strategy, &params);
    let report = shuffle_report(&bench, &embedder, seed, &opts)?;
    report.write(&run.run_dir)?;
    print!("{}", report.to_text());
    Ok(run)
}

fn stability_tsv(name: &str, r: &StabilityResult) -> String {
    let mut out = String::new();
    for (s, v) in r.seeds.iter().zip(&r.scores) {
        out.push_str(&format!("{name}\t{s}\t{v:.2}\n"));
    }
    out
}

pub fn cmd_stability(mut flags: Flags) -> Result<RunOutcome> {
    let pairs_path = require(&flags.pairs, "pairs")?.clone();
    let bench_path = require(&flags.bench, "bench")?.clone();
    let cfg = train_config(&mut flags)?;
    let n = *flags.n_seeds.get_or_insert(5);
    let encoder = encoder_of(&mut flags)?;
    let compare: Option<FusionStrategy> = flags.compare.as_deref().map(str::parse).transpose()?;
    let run = open_run("stability", &flags, &[&pairs_path, &bench_path])?;
    let pairs = load_pairs(&pairs_path)?;
    let bench = load_ted6k(&bench_path)?;
    let main = stability_runs(&pairs, &bench, encoder.as_ref(), &cfg, n)?;
    let mut tsv = String::from("fusion\tseed\taccuracy\n");
    tsv += &stability_tsv(&cfg.fusion.name(), &main);
    let mut summary = serde_json::json!({ "fusion": cfg.fusion.name(), "runs": main });
    if let Some(other) = compare {
        let alt = stability_runs(&pairs, &bench, encoder.as_ref(), &TrainConfig { fusion: other.clone(), ..cfg.clone() }, n)?;
        tsv += &stability_tsv(&other.name(), &alt);
        let wins: Vec<i8> = main
            .scores
            .iter()
            .zip(&alt.scores)
            .map(|(a, b)| a.partial_cmp(b).map_or(0, |o| o as i8))
            .collect();
        let stable = wins.windows(2).all(|w| w[0] == w[1]);
        summary["compare"] = serde_json::json!({ "fusion": other.name(), "runs": alt, "sign_per_seed": wins, "ranking_stable": stable });
        println!("ranking {} vs {}: {}", cfg.fusion, other, if stable { "stable" } else { "unstable" });
    }
    write_file(&run.run_dir.join("stability.tsv"), tsv)?;
    write_file(&run.run_dir.join("stability.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    println!("max variation {:.2} points over {n} seeds", main.max_variation);
    Ok(run)
}

/// Reads whitespace- or tab-separated `x y` rows; a non-numeric first row is
/// treated as a header.
pub fn read_xy(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(['\t', ',', ' ']).filter(|c| !c.is_empty()).collect();
        let parsed: Option<Vec<f64>> = cells.iter().map(|c| c.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == 2 => {
                xs.push(v[0]);
                ys.push(v[1]);
            }
            None if xs.is_empty() && i == 0 => continue,
            _ => {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    id: None,
                    msg: format!("expected two numbers, got {line:?}"),
                })
            }
        }
    }
    Ok((xs, ys))
}

pub fn cmd_correlate(flags: Flags) -> Result<RunOutcome> {
    let input = require(&flags.input, "input")?.clone();
    let run = open_run("correlate", &flags, &[&input])?;
    let (xs, ys) = read_xy(&input)?;
    let c = pearson(&xs, &ys)?;
    write_file(&run.run_dir.join("correlation.tsv"), c.to_record())?;
    println!("{c}");
    Ok(run)
}

pub fn cmd_toydiff(mut flags: Flags) -> Result<RunOutcome> {
    let d = ToyDiffConfig::default();
    let cfg = ToyDiffConfig {
        steps: *flags.steps.get_or_insert(d.steps),
        batch_size: *flags.batch.get_or_insert(d.batch_size),
        lr: *flags.lr.get_or_insert(d.lr),
        freeze_step: flags.freeze_step,
        seed: *flags.seed.get_or_insert(d.seed),
        conditioning: setting(&mut flags.conditioning, "true")?,
        precision: setting::<Precision>(&mut flags.precision, "test")?,
        ..d
    };
    cfg.validate()?;
    let fusion = flags.fusion.get_or_insert_with(|| "learnable".into());
    if fusion != "learnable" {
        return Err(Error::Config(format!("toydiff trains learnable fusion, got --fusion {fusion}")));
    }
    let n = *flags.captions.get_or_insert(64);
    let encoder = encoder_of(&mut flags)?;
    let inputs: Vec<&Path> = flags.pairs.iter().map(PathBuf::as_path).collect();
    let run = open_run("toydiff", &flags, &inputs)?;
    let all: Vec<String> = match &flags.pairs {
        Some(p) => load_pairs(p)?.into_iter().map(|p| p.caption_a).collect(),
        None => generate(&ToyCorpusConfig::default())?.pairs.into_iter().map(|p| p.caption_a).collect(),
    };
    let captions = select_captions(&all, n, cfg.seed);
    let out = train_joint(&captions, encoder.as_ref(), &cfg)?;
    trajectory_report(&out.trajectory, run.run_dir.join("trajectory.tsv"))?;
    save_denoiser(&out.params, run.run_dir.join("denoiser.bin"))?;
    write_file(&run.run_dir.join("fusion_weights.txt"), out.weights.to_record())?;
    let losses: String = out.losses.iter().enumerate().map(|(i, l)| format!("{i}\t{l:e}\n")).collect();
    write_file(&run.run_dir.join("loss.tsv"), format!("step\tloss\n{losses}"))?;
    let summary = serde_json::json!({
        "final_loss": out.final_loss,
        "max_alpha_drift": out.trajectory.max_drift(),
        "alphas": out.weights.alphas(),
        "captions": captions.len(),
    });
    write_file(&run.run_dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    println!("final loss {:.4}, max alpha drift {:.3e}", out.final_loss, out.trajectory.max_drift());
    Ok(run)
}

pub fn cmd_toygen(mut flags: Flags) -> Result<RunOutcome> {
    let cfg = ToyCorpusConfig {
        seed: *flags.seed.get_or_insert(ToyCorpusConfig::default().seed),
        ..ToyCorpusConfig::default()
    };
    let run = open_run("toygen", &flags, &[])?;
    let corpus = generate(&cfg)?;
    write_jsonl(run.run_dir.join("pairs.jsonl"), &corpus.pairs)?;
    write_jsonl(run.run_dir.join("bench.jsonl"), &corpus.bench)?;
    println!("{} pairs, {} benchmark instances", corpus.pairs.len(), corpus.bench.len());
    Ok(run)
}
