//! Command-line entry point. Every subcommand loads JSON configs, runs one
//! experiment and writes CSV/JSON artifacts; failures map to exit codes
//! (1 for violated assumptions, 2 for bad input).

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{debug, info};
use serde::Serialize;
use serde_json::json;

use crate::bounds::{self, BoundInputs, BoundReport, CotConfig, IclConfig};
use crate::error::{Error, Result};
use crate::prompts::{self, PromptConfig};
use crate::transformer;
use crate::world::{self, World};

#[derive(Debug, Parser)]
#[command(name = "promptlab", version, about = "Exact ambiguity, ICL and CoT bound experiments on enumerable worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Zero-shot error of the prompt's query against its ambiguity.
    ZeroShot(SweepArgs),
    /// ICL error and bound for every m in --m-range.
    IclSweep(SweepArgs),
    /// CoT error and bound for every m in --m-range.
    CotSweep(SweepArgs),
    /// Build the memorizing transformer for every reachable history.
    Memorize(MemorizeArgs),
    /// Check the ambiguity propositions and Pinsker on random worlds.
    VerifyProps(PropsArgs),
    /// Evaluate bound formulas from a JSON file of inputs.
    BoundCalc(BoundCalcArgs),
    /// Summarize a world: sizes, φ, c, history count and separateness.
    DescribeWorld(DescribeArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub prompt: PathBuf,
    /// Inclusive range A..B of demonstration counts.
    #[arg(long = "m-range", default_value = "0..4")]
    pub m_range: String,
    /// Seed for response-set subsampling.
    #[arg(long)]
    pub seed: u64,
    /// Output directory; CSV goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Cap on the response set.
    #[arg(long = "y-max", default_value_t = bounds::Y_SET_CAP)]
    pub y_max: usize,
    /// Pretraining corpus size; enables the statistical term in reports.
    #[arg(long = "n-docs")]
    pub n_docs: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
}

#[derive(Debug, Args)]
pub struct MemorizeArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Seed for the separating-vector search.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PropsArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Root seed for the random worlds.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundCalcArgs {
    /// JSON object with BoundInputs fields; missing fields default to 0.
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[arg(long)]
    pub world: PathBuf,
}

/// Parses "A..B" or "A..=B" as an inclusive range.
pub fn parse_m_range(s: &str) -> Result<RangeInclusive<usize>> {
    let bad = || Error::config("--m-range", format!("expected A..B, got {s:?}"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::Io { path: path.display().to_string(), msg: e.to_string() })
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.display().to_string(), msg: e.to_string() })
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

/// CSV plus manifest, or CSV on stdout when no directory is given.
fn emit(kind: &str, args: &SweepArgs, world: &World, prompt: &PromptConfig, reports: &[BoundReport]) -> Result<()> {
    let csv = bounds::reports_to_csv(reports)?;
    match &args.out {
        None => print!("{csv}"),
        Some(dir) => {
            out_dir(dir)?;
            write_file(&dir.join(format!("{kind}.csv")), &csv)?;
            let manifest = json!({
                "kind": kind,
                "seed": args.seed,
                "m_range": args.m_range,
                "y_max": args.y_max,
                "n_docs": args.n_docs,
                "delta": args.delta,
                "world": world.config(),
                "prompt": prompt,
                "reports": reports,
            });
            write_file(&dir.join(format!("{kind}.manifest.json")), &pretty(&manifest))?;
            info!("wrote {} rows to {}", reports.len(), dir.display());
        }
    }
    Ok(())
}

fn load_pair(args: &SweepArgs) -> Result<(World, PromptConfig)> {
    let world = World::load(&args.world)?;
    let prompt = PromptConfig::load(&args.prompt)?;
    debug!("loaded world with {} tokens and prompt with {} demos", world.vocab.size(), prompt.demos.len());
    Ok((world, prompt))
}

fn icl_config(world: &World, prompt: &PromptConfig, args: &SweepArgs) -> Result<IclConfig> {
    let full = prompt.icl_prompt(world, prompt.demos.len())?;
    Ok(IclConfig {
        demos: full.demos,
        query: full.query,
        r: prompt.r.unwrap_or(1),
        y_cap: args.y_max,
        seed: args.seed,
        big_n: args.n_docs,
        delta: args.delta,
        parallel: args.parallel,
    })
}

fn run_zero_shot(args: &SweepArgs) -> Result<()> {
    let (world, prompt) = load_pair(args)?;
    let query = world.seq(&prompt.query)?;
    let ys = bounds::response_set(&world, prompt.r.unwrap_or(1), args.y_max, args.seed)?;
    let rep = bounds::run_zero_shot(&world, &query, &ys)?;
    emit("zero-shot", args, &world, &prompt, &[rep])
}

fn run_icl(args: &SweepArgs) -> Result<()> {
    let (world, prompt) = load_pair(args)?;
    let cfg = icl_config(&world, &prompt, args)?;
    let reps = bounds::run_icl_sweep(&world, &cfg, parse_m_range(&args.m_range)?)?;
    emit("icl-sweep", args, &world, &prompt, &reps)
}

fn run_cot(args: &SweepArgs) -> Result<()> {
    let (world, prompt) = load_pair(args)?;
    let dir = args.prompt.parent();
    let cw = prompt.cot_world(world.clone(), dir)?;
    let full = prompt.cot_prompt(&world, prompt.demos.len())?;
    let cfg = CotConfig {
        demos: full.demos,
        query: full.query,
        step_lengths: prompt.step_lengths(),
        y_cap: args.y_max,
        seed: args.seed,
        shifted: cw.shifted.is_some(),
        big_n: args.n_docs,
        delta: args.delta,
        parallel: args.parallel,
    };
    let reps = bounds::run_cot_sweep(&cw, &cfg, parse_m_range(&args.m_range)?)?;
    emit("cot-sweep", args, &world, &prompt, &reps)
}

fn run_memorize(args: &MemorizeArgs) -> Result<()> {
    let world = World::load(&args.world)?;
    let pairs = transformer::memorizer_pairs(&world)?;
    let (model, report) = transformer::build_memorizer(&world.vocab, world.n, &pairs, args.seed)?;
    let body = pretty(&report);
    match &args.out {
        Some(dir) => {
            out_dir(dir)?;
            write_file(&dir.join("model.json"), &model.to_json())?;
            write_file(&dir.join("memorize.report.json"), &body)?;
        }
        None => println!("{body}"),
    }
    if report.max_error > 1e-6 {
        return Err(Error::Certification(format!("memorizer error {:e} exceeds 1e-6", report.max_error)));
    }
    Ok(())
}

fn run_props(args: &PropsArgs) -> Result<()> {
    let rep = bounds::verify_propositions(args.trials, args.seed, args.parallel)?;
    let body = pretty(&rep);
    if let Some(dir) = &args.out {
        out_dir(dir)?;
        write_file(&dir.join("verify-props.json"), &body)?;
    }
    println!("{body}");
    if rep.violations() > 0 {
        return Err(Error::assumption("propositions", format!("{} violations", rep.violations())));
    }
    Ok(())
}

fn run_bound_calc(args: &BoundCalcArgs) -> Result<()> {
    let path = args.inputs.display().to_string();
    let raw = std::fs::read_to_string(&args.inputs).map_err(|e| Error::Io { path: path.clone(), msg: e.to_string() })?;
    let inp: BoundInputs = serde_json::from_str(&raw).map_err(|e| Error::config(format!("{path}: line {} column {}", e.line(), e.column()), e.to_string()))?;
    let cot = |shifted| match bounds::rhs_cot(&inp, shifted) {
        Ok(c) => json!({ "components": c, "total": c.total() }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let icl = bounds::rhs_icl(&inp);
    let body = pretty(&json!({
        "inputs": inp,
        "pretraining": bounds::rhs_pretraining(&inp),
        "icl": { "components": icl, "total": icl.total(), "rate": bounds::icl_rate(&inp) },
        "cot": cot(false),
        "cot_shifted": cot(true),
    }));
    if let Some(dir) = &args.out {
        out_dir(dir)?;
        write_file(&dir.join("bound-calc.json"), &body)?;
    }
    println!("{body}");
    Ok(())
}

/// Everything `describe-world` prints, as a value.
#[derive(Debug, Serialize)]
pub struct WorldSummary {
    pub vocab_size: usize,
    pub tasks: usize,
    pub n: usize,
    pub b: f64,
    pub phi: f64,
    pub c: f64,
    /// Reachable histories (length ≤ n−1).
    pub histories: usize,
    pub separateness: transformer::SeparatenessCert,
}

pub fn describe(world: &World) -> Result<WorldSummary> {
    let hist = world::enumerate_histories(world)?;
    let p = transformer::positional_encoder(world.vocab.alpha, world.vocab.d(), world.n);
    let xs = hist
        .iter()
        .filter(|h| h.genuine_length() < world.n)
        .map(|h| transformer::encode(&world.vocab.embeddings, world.vocab.sos, world.vocab.pad, &p, h.tokens()))
        .collect::<Result<Vec<_>>>()?;
    Ok(WorldSummary {
        vocab_size: world.vocab.size(),
        tasks: world.num_content(),
        n: world.n,
        b: world.b,
        phi: prompts::estimate_phi(world, world.n)?,
        c: prompts::prior_imbalance(world)?,
        histories: hist.len(),
        separateness: transformer::check_separateness(&xs),
    })
}

fn run_describe(args: &DescribeArgs) -> Result<()> {
    let world = World::load(&args.world)?;
    println!("{}", pretty(&describe(&world)?));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::ZeroShot(a) => run_zero_shot(a),
        Command::IclSweep(a) => run_icl(a),
        Command::CotSweep(a) => run_cot(a),
        Command::Memorize(a) => run_memorize(a),
        Command::VerifyProps(a) => run_props(a),
        Command::BoundCalc(a) => run_bound_calc(a),
        Command::DescribeWorld(a) => run_describe(a),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("PROMPTLAB_LOG")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}
