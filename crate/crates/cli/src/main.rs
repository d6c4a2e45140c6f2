//! `s2i`: generate synthetic command corpora, train and evaluate decoders,
//! and run learning-curve and delay-ablation experiments.

mod config;
mod svg;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s2i_core::features::HacConfig;
use s2i_core::harness::{
    generate_dataset, run_delay_ablation, run_learning_curve, CurveSpec, Dataset, Decoder, DecoderConfig,
    GenerationConfig, Grammar, GrammarKind, HarnessError, LearningCurve,
};
use s2i_core::{write_atomic, ErrorKind};
use serde::Serialize;

use config::FileConfig;

#[derive(Debug)]
pub struct CliError {
    kind: ErrorKind,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    fn incompatible(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Incompatible,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config | ErrorKind::Io => 2,
            ErrorKind::Incompatible => 3,
            ErrorKind::Numerical => 4,
        }
    }

    fn label(&self) -> &'static str {
        match self.kind {
            ErrorKind::Config => "config",
            ErrorKind::Io => "io",
            ErrorKind::Incompatible => "incompatible",
            ErrorKind::Numerical => "numerical",
        }
    }
}

impl<E: Into<s2i_core::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        let e = e.into();
        CliError {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "s2i", version, about = "User-taught speech-to-intent lab on synthetic posteriorgrams")]
struct Cli {
    /// TOML file with defaults for any flag (flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (manifest plus posteriorgram files).
    Gen(GenArgs),
    /// Train a decoder on every utterance of a manifest.
    Train(TrainArgs),
    /// Decode every utterance of a manifest and report accuracy.
    Eval(EvalArgs),
    /// Learning curve over training blocks for one decoder.
    Curve(CurveArgs),
    /// NMF learning curves for several HAC delay sets on paired splits.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// order-insensitive, order-sensitive or toy.
    #[arg(long)]
    grammar: Option<String>,
    #[arg(long)]
    speakers: Option<usize>,
    /// Utterances per speaker.
    #[arg(long)]
    utts: Option<usize>,
    /// Confusion noise ε in [0, 1).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct DecoderArgs {
    /// nmf or capsule.
    #[arg(long)]
    decoder: Option<String>,
    /// Comma-separated HAC delays (nmf only), e.g. 1,2,3,5.
    #[arg(long)]
    delays: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    decoder: DecoderArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the model.
    #[arg(long)]
    model: PathBuf,
    /// Decoder initialisation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    decoder: DecoderArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Also write the per-task CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Blocks per speaker (default depends on the grammar).
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for the CSV (and SVG) files.
    #[arg(long)]
    out: PathBuf,
    /// Also write an SVG line chart.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct CurveArgs {
    #[command(flatten)]
    decoder: DecoderArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Decoder; only nmf is accepted.
    #[arg(long)]
    decoder: Option<String>,
    /// Semicolon-separated delay sets, e.g. "1;1,2,3,5".
    #[arg(long)]
    delay_sets: Option<String>,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            return report(&CliError::config(first.trim_start_matches("error: ")));
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> ExitCode {
    #[derive(Serialize)]
    struct Line<'a> {
        error: &'a str,
        exit_code: u8,
        message: &'a str,
    }
    let line = Line {
        error: e.label(),
        exit_code: e.exit_code(),
        message: &e.message,
    };
    eprintln!("{}", serde_json::to_string(&line).expect("serialisable"));
    ExitCode::from(e.exit_code())
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(a) => gen(a, &file),
        Command::Train(a) => train(a, &file),
        Command::Eval(a) => eval(a, &file),
        Command::Curve(a) => curve(a, &file),
        Command::Ablate(a) => ablate(a, &file),
    }
}

fn grammar(name: &str) -> Result<Grammar> {
    if name == "toy" {
        return Ok(Grammar::toy());
    }
    Ok(Grammar::default_for(name.parse::<GrammarKind>()?))
}

fn gen(a: GenArgs, file: &FileConfig) -> Result<()> {
    let g = &file.gen;
    let name = a.grammar.or_else(|| g.grammar.clone()).unwrap_or_else(|| "order-insensitive".into());
    let grammar = grammar(&name)?;
    let mut synthesis = g.synthesis.clone().unwrap_or_default();
    if let Some(noise) = a.noise.or(g.noise) {
        synthesis.confusion_noise = noise;
    }
    let cfg = GenerationConfig {
        speakers: a.speakers.or(g.speakers).unwrap_or(5),
        utterances_per_speaker: a.utts.or(g.utts).unwrap_or(grammar.kind.default_utterances()),
        synthesis,
        confusion_concentration: g.concentration.unwrap_or(1.0),
        seed: a.seed.or(g.seed).unwrap_or(0),
    };
    cfg.validate()?;
    let ds = generate_dataset(&grammar, &cfg)?;
    create_dir(&a.out)?;
    let path = ds.write(&a.out)?;
    println!("wrote {} utterances to {}", ds.len(), path.display());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    write_atomic(path, contents.as_bytes()).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn parse_delays(s: &str) -> Result<HacConfig> {
    Ok(s.parse::<HacConfig>()?)
}

/// Decoder configuration from flags, the config file and defaults.
fn decoder_config(args: &DecoderArgs, file: &FileConfig, seed: Option<u64>) -> Result<DecoderConfig> {
    let e = &file.experiment;
    let name = args.decoder.clone().or_else(|| e.decoder.clone()).unwrap_or_else(|| "nmf".into());
    match name.as_str() {
        "nmf" => {
            let delays = match &args.delays {
                Some(s) => parse_delays(s)?,
                None => e.delays.clone().unwrap_or_default(),
            };
            let mut nmf = file.nmf.clone().unwrap_or_default();
            if let Some(seed) = seed {
                nmf.seed = seed;
            }
            Ok(DecoderConfig::Nmf { delays, nmf })
        }
        "capsule" => {
            if args.delays.is_some() {
                return Err(CliError::config("--delays applies only to the nmf decoder"));
            }
            let mut capsule = file.capsule.clone().unwrap_or_default();
            if let Some(seed) = seed {
                capsule.seed = seed;
            }
            Ok(DecoderConfig::Capsule { capsule })
        }
        other => Err(CliError::config(format!("unknown decoder `{other}` (expected nmf or capsule)"))),
    }
}

fn validate_decoder(cfg: &DecoderConfig) -> Result<()> {
    match cfg {
        DecoderConfig::Nmf { nmf, .. } => nmf.validate()?,
        DecoderConfig::Capsule { capsule } => capsule.validate()?,
    }
    Ok(())
}

fn train(a: TrainArgs, file: &FileConfig) -> Result<()> {
    let cfg = decoder_config(&a.decoder, file, a.seed)?;
    validate_decoder(&cfg)?;
    let ds = Dataset::load(&a.manifest)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let decoder = Decoder::fit(&ds, &all, &cfg)?;
    decoder.save(&a.model)?;
    println!("trained {} decoder on {} utterances, wrote {}", cfg.name(), ds.len(), a.model.display());
    Ok(())
}

#[derive(Serialize)]
struct TaskRow {
    task: String,
    support: usize,
    correct: usize,
    accuracy: f64,
    most_confused_with: String,
}

fn eval(a: EvalArgs, _file: &FileConfig) -> Result<()> {
    let decoder = Decoder::load(&a.model)?;
    if let Some(name) = &a.decoder.decoder {
        if !matches!(name.as_str(), "nmf" | "capsule") {
            return Err(CliError::config(format!("unknown decoder `{name}` (expected nmf or capsule)")));
        }
        if name != decoder.name() {
            return Err(CliError::incompatible(format!("{} holds a {} model, not {name}", a.model.display(), decoder.name())));
        }
    }
    if let Some(s) = &a.decoder.delays {
        let delays = parse_delays(s)?;
        match decoder.delays() {
            None if decoder.name() == "capsule" => {
                return Err(CliError::config("--delays applies only to the nmf decoder"));
            }
            Some(d) if *d == delays => {}
            other => {
                let have = other.map_or("none".to_string(), |d| d.to_string());
                return Err(CliError::incompatible(format!("model was trained with delays {have}, not {delays}")));
            }
        }
    }
    let ds = Dataset::load(&a.manifest)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let predicted = decoder.predict(&ds, &all)?;

    let tasks = &ds.manifest.tasks;
    let mut confusion = vec![vec![0usize; tasks.len()]; tasks.len()];
    for (&truth, &guess) in ds.labels.iter().zip(&predicted) {
        confusion[truth][guess] += 1;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for (k, row) in confusion.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support == 0 {
            continue;
        }
        let worst = (0..tasks.len()).filter(|&j| j != k && row[j] > 0).max_by_key(|&j| (row[j], std::cmp::Reverse(j)));
        w.serialize(TaskRow {
            task: tasks[k].to_string(),
            support,
            correct: row[k],
            accuracy: row[k] as f64 / support as f64,
            most_confused_with: worst.map(|j| tasks[j].to_string()).unwrap_or_default(),
        })
        .expect("in-memory CSV");
    }
    let table = String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8 CSV");
    let correct = ds.labels.iter().zip(&predicted).filter(|(t, p)| t == p).count();
    println!("accuracy {:.6} ({correct}/{})", correct as f64 / ds.len().max(1) as f64, ds.len());
    print!("{table}");
    if let Some(out) = &a.out {
        write_file(out, &table)?;
    }
    Ok(())
}

/// Fills a curve spec from protocol flags, the config file and defaults.
fn curve_spec(p: &ProtocolArgs, file: &FileConfig, ds: &Dataset, decoder: DecoderConfig) -> Result<CurveSpec> {
    let e = &file.experiment;
    let spec = CurveSpec {
        blocks: p.blocks.or(e.blocks).unwrap_or(ds.manifest.grammar.default_blocks()),
        folds: p.folds.or(e.folds).unwrap_or(5),
        decoder,
        seed: p.seed.or(e.seed).unwrap_or(0),
        sizes: e.sizes.clone(),
        jobs: p.jobs.or(e.jobs).unwrap_or(1),
    };
    spec.validate()?;
    Ok(spec)
}

fn write_outputs(p: &ProtocolArgs, raw: &str, aggregate: &str, plot: Option<(&str, String)>) -> Result<()> {
    create_dir(&p.out)?;
    write_file(&p.out.join("raw.csv"), raw)?;
    write_file(&p.out.join("aggregate.csv"), aggregate)?;
    if let Some((name, svg)) = plot {
        write_file(&p.out.join(name), &svg)?;
    }
    print!("{aggregate}");
    Ok(())
}

fn curve(a: CurveArgs, file: &FileConfig) -> Result<()> {
    let cfg = decoder_config(&a.decoder, file, None)?;
    validate_decoder(&cfg)?;
    let ds = Dataset::load(&a.protocol.manifest)?;
    let spec = curve_spec(&a.protocol, file, &ds, cfg)?;
    let curve = run_learning_curve(&ds, &spec)?;
    let plot = a.protocol.plot.then(|| ("curve.svg", svg::render("Learning curve", std::slice::from_ref(&curve))));
    write_outputs(&a.protocol, &curve.raw_csv(), &curve.aggregate_csv(), plot)
}

#[derive(Serialize)]
struct AblationRow {
    delay_set: String,
    m: usize,
    mean_accuracy: f64,
    stderr: f64,
}

fn ablation_csv(curves: &[LearningCurve]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in curves {
        for p in &c.points {
            w.serialize(AblationRow {
                delay_set: c.delay_set.clone(),
                m: p.m,
                mean_accuracy: p.mean_accuracy,
                stderr: p.stderr,
            })
            .expect("in-memory CSV");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8 CSV")
}

fn ablate(a: AblateArgs, file: &FileConfig) -> Result<()> {
    let name = a.decoder.clone().or_else(|| file.experiment.decoder.clone()).unwrap_or_else(|| "nmf".into());
    if name != "nmf" {
        return Err(HarnessError::InvalidSpec(format!("the delay ablation needs the nmf decoder, not `{name}`")).into());
    }
    let delay_sets: Vec<HacConfig> = match &a.delay_sets {
        Some(s) => s.split(';').map(parse_delays).collect::<Result<_>>()?,
        None => file
            .experiment
            .delay_sets
            .clone()
            .unwrap_or_else(|| vec![HacConfig::new(vec![1]).expect("valid"), HacConfig::default()]),
    };
    let mut seen = BTreeSet::new();
    for d in &delay_sets {
        if !seen.insert(d.to_string()) {
            return Err(CliError::config(format!("delay set {d} listed twice")));
        }
    }
    let nmf = file.nmf.clone().unwrap_or_default();
    let base = DecoderConfig::Nmf {
        delays: delay_sets.first().cloned().unwrap_or_default(),
        nmf,
    };
    validate_decoder(&base)?;
    let ds = Dataset::load(&a.protocol.manifest)?;
    let spec = curve_spec(&a.protocol, file, &ds, base)?;
    let ablation = run_delay_ablation(&ds, &spec, &delay_sets)?;
    let plot = a.protocol.plot.then(|| ("ablation.svg", svg::render("HAC delay ablation", &ablation.curves)));
    write_outputs(&a.protocol, &ablation.raw_csv(), &ablation_csv(&ablation.curves), plot)
}
