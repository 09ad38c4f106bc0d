use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cachelab::baselines::{LruPolicy, NearestNeighborPolicy, RandomPolicy, SuffixIndex};
use cachelab::cache::{rollout, ReplacementPolicy, RolloutOptions};
use cachelab::eval::{
    build_report, counts_after, curve_csv, emit_report, max_finite_reuse, sweep_history,
    sweep_window, Report, DEFAULT_HISTORY_GRID,
};
use cachelab::imitation::{self, TrainConfig};
use cachelab::model::{ActMode, EmbedderKind, LearnedPolicy, Model};
use cachelab::oracle::{BeladyPolicy, ReuseDistanceTable};
use cachelab::trace::{
    filter_to_llc, generate_synthetic, parse_trace, sample_sets, split, write_trace, AccessTrace,
    CacheGeometry, SetSelection, SplitSpec, SyntheticKind,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Cache replacement experiments: traces, simulation, Belady's oracle and a
/// learned eviction policy.
#[derive(Parser, Debug)]
#[command(name = "cachelab", version)]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for parallel work (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trace from a JSON pattern spec.
    GenTrace(GenTraceArgs),
    /// Keep only the accesses that miss in LRU L1 and L2 caches.
    FilterLlc(FilterLlcArgs),
    /// Run one replacement policy over a trace and print its hit statistics.
    Simulate(SimulateArgs),
    /// Train an eviction model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and the baselines on a trace's test split.
    Eval(EvalArgs),
    /// Normalised hit rate of windowed Belady's against window size.
    SweepWindow(SweepWindowArgs),
    /// Test-split normalised hit rate against model history length.
    SweepHistory(SweepHistoryArgs),
    /// Compare policies across one or more traces.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    /// JSON pattern spec, e.g. {"kind": "cyclic", "n_lines": 17}.
    #[arg(long)]
    spec: PathBuf,
    /// Number of accesses.
    #[arg(long)]
    length: usize,
    /// Geometry JSON (defaults to a 16-way 2MB LLC with 64-byte lines).
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Sets the generated lines map to (defaults to set 0).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    sets: Vec<usize>,
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FilterLlcArgs {
    /// Raw trace file.
    #[arg(long)]
    trace: PathBuf,
    /// L1 geometry JSON (defaults to 4-way 32KB).
    #[arg(long)]
    l1: Option<PathBuf>,
    /// L2 geometry JSON (defaults to 8-way 256KB).
    #[arg(long)]
    l2: Option<PathBuf>,
    /// LLC geometry JSON used to index sets when sampling.
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Keep only these LLC sets afterwards: `reference` for the 64-set
    /// preset, or a count of randomly chosen sets.
    #[arg(long)]
    sample_sets: Option<String>,
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Lru,
    Random,
    Belady,
    BeladyWindow,
    Nn,
    Learned,
    LearnedReuse,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Trace file.
    #[arg(long)]
    trace: PathBuf,
    /// Geometry JSON (defaults to a 16-way 2MB LLC).
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Replacement policy.
    #[arg(long, value_enum)]
    policy: PolicyKind,
    /// Future window for belady-window.
    #[arg(long)]
    window: Option<u64>,
    /// Checkpoint for learned policies.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Trace whose Belady decisions the nn policy memorises.
    #[arg(long)]
    index_trace: Option<PathBuf>,
    /// Longest history suffix the nn policy matches.
    #[arg(long, default_value_t = 80)]
    history_len: usize,
    /// Accesses to exclude from the statistics (cold-start warm-up).
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Trace file; split into train/valid/test.
    #[arg(long)]
    trace: PathBuf,
    /// Training config JSON (missing fields take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Geometry JSON (defaults to a 16-way 2MB LLC).
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Split fractions as train,valid,test.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log path (defaults to the checkpoint path with .log.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trace file; the test split is evaluated.
    #[arg(long)]
    trace: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Geometry JSON (defaults to a 16-way 2MB LLC).
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Split fractions as train,valid,test.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
    /// Reject checkpoints whose embedder differs.
    #[arg(long, value_enum)]
    embedder: Option<EmbedderArg>,
    /// Accesses to exclude from the statistics.
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Report JSON path; a CSV is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum EmbedderArg {
    Vocab,
    Byte,
}

#[derive(Args, Debug)]
struct SweepWindowArgs {
    /// Trace file.
    #[arg(long)]
    trace: PathBuf,
    /// Geometry JSON (defaults to a 16-way 2MB LLC).
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Window sizes; `max` stands for the largest finite reuse distance.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,1,2,4,8,16,32,64,128,256,max"
    )]
    windows: Vec<String>,
    /// Random tie-breaking seeds averaged per point.
    #[arg(long, default_value_t = 5)]
    tie_seeds: usize,
    /// Accesses to exclude from the statistics.
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Curve CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepHistoryArgs {
    /// Trace file; split into train/valid/test.
    #[arg(long)]
    trace: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Geometry JSON (defaults to a 16-way 2MB LLC).
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Split fractions as train,valid,test.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
    /// History lengths to train.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HISTORY_GRID)]
    history: Vec<usize>,
    /// Training runs per history length.
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Curve CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Trace files; each contributes its test split.
    #[arg(long, required = true, num_args = 1..)]
    trace: Vec<PathBuf>,
    /// Geometry JSON (defaults to a 16-way 2MB LLC).
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Policies to compare.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "lru,random,belady,nn"
    )]
    policies: Vec<PolicyKind>,
    /// Checkpoint for learned policies.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Window for belady-window.
    #[arg(long)]
    window: Option<u64>,
    /// Longest history suffix the nn policy matches.
    #[arg(long, default_value_t = 80)]
    history_len: usize,
    /// Split fractions as train,valid,test.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
    /// Accesses to exclude from the statistics.
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Report JSON path; a CSV is written alongside.
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_geometry(path: Option<&Path>, default: CacheGeometry) -> Result<CacheGeometry> {
    match path {
        Some(p) => read_json(p),
        None => Ok(default),
    }
}

fn load_trace(path: &Path) -> Result<AccessTrace> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_trace(BufReader::new(file)).with_context(|| format!("reading trace {}", path.display()))
}

fn save_trace(trace: &AccessTrace, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    write_trace(trace, &mut out)?;
    out.flush()?;
    Ok(())
}

fn parse_split(s: &str) -> Result<SplitSpec> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad split `{s}`"))?;
    let [train, valid, test] = parts[..] else {
        bail!("split needs three fractions, got `{s}`");
    };
    let spec = SplitSpec { train, valid, test };
    spec.validate()?;
    Ok(spec)
}

fn load_model(path: &Path) -> Result<Arc<Model>> {
    Ok(Arc::new(Model::load(path)?))
}

fn trace_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

struct PolicyInputs<'a> {
    table: &'a Arc<ReuseDistanceTable>,
    window: Option<u64>,
    model: Option<&'a Arc<Model>>,
    index: Option<&'a Arc<SuffixIndex>>,
}

fn make_policy(
    kind: PolicyKind,
    inputs: &PolicyInputs<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn ReplacementPolicy + Send>> {
    let need_model = || {
        inputs
            .model
            .cloned()
            .context("learned policies need --model")
    };
    Ok(match kind {
        PolicyKind::Lru => Box::new(LruPolicy),
        PolicyKind::Random => Box::new(RandomPolicy::new(rng.next_u64())),
        PolicyKind::Belady => Box::new(BeladyPolicy::new(Arc::clone(inputs.table))),
        PolicyKind::BeladyWindow => {
            let x = inputs.window.context("belady-window needs --window")?;
            Box::new(BeladyPolicy::windowed(
                Arc::clone(inputs.table),
                Some(x),
                rng.next_u64(),
            ))
        }
        PolicyKind::Nn => {
            let index = inputs.index.context("nn needs an index trace")?;
            Box::new(NearestNeighborPolicy::new(Arc::clone(index)))
        }
        PolicyKind::Learned => Box::new(LearnedPolicy::new(need_model()?, ActMode::Policy)),
        PolicyKind::LearnedReuse => {
            Box::new(LearnedPolicy::new(need_model()?, ActMode::DirectReuse))
        }
    })
}

fn gen_trace(args: GenTraceArgs, seed: u64) -> Result<()> {
    let kind: SyntheticKind = read_json(&args.spec)?;
    let geometry = load_geometry(args.geometry.as_deref(), CacheGeometry::default_llc())?;
    let trace = generate_synthetic(&kind, args.length, &geometry, &args.sets, seed)?;
    save_trace(&trace, &args.out)
}

fn filter_llc(args: FilterLlcArgs, seed: u64) -> Result<()> {
    let raw = load_trace(&args.trace)?;
    let l1 = load_geometry(args.l1.as_deref(), CacheGeometry::default_l1())?;
    let l2 = load_geometry(args.l2.as_deref(), CacheGeometry::default_l2())?;
    let mut out = filter_to_llc(&raw, &l1, &l2);
    if let Some(sel) = &args.sample_sets {
        let llc = load_geometry(args.geometry.as_deref(), CacheGeometry::default_llc())?;
        let selection = match sel.as_str() {
            "reference" => SetSelection::reference_llc(),
            n => SetSelection::Random {
                count: n
                    .parse()
                    .with_context(|| format!("bad --sample-sets `{n}`"))?,
                seed,
            },
        };
        out = sample_sets(&out, &llc, &selection)?;
    }
    save_trace(&out, &args.out)
}

fn simulate(args: SimulateArgs, rng: &mut ChaCha8Rng) -> Result<()> {
    let trace = load_trace(&args.trace)?;
    let geometry = load_geometry(args.geometry.as_deref(), CacheGeometry::default_llc())?;
    let table = Arc::new(ReuseDistanceTable::build(&trace, &geometry));
    let model = match args.model.as_deref() {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let index = match (args.policy, args.index_trace.as_deref()) {
        (PolicyKind::Nn, Some(p)) => Some(Arc::new(SuffixIndex::build(
            &load_trace(p)?,
            &geometry,
            args.history_len,
        ))),
        (PolicyKind::Nn, None) => bail!("nn needs --index-trace"),
        _ => None,
    };
    let inputs = PolicyInputs {
        table: &table,
        window: args.window,
        model: model.as_ref(),
        index: index.as_ref(),
    };
    let mut policy = make_policy(args.policy, &inputs, rng)?;
    let mut stats = rollout(
        &trace,
        &geometry,
        &mut policy,
        RolloutOptions {
            record_outcomes: args.skip > 0,
            ..Default::default()
        },
    )?;
    if args.skip > 0 {
        (stats.hits, stats.misses) = counts_after(&stats, args.skip);
    }
    let mut json = serde_json::to_string_pretty(&stats.summary())?;
    json.push('\n');
    match &args.out {
        Some(p) => write_out(p, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(TrainConfig::default()),
    }
}

fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let trace = load_trace(&args.trace)?;
    let geometry = load_geometry(args.geometry.as_deref(), CacheGeometry::default_llc())?;
    let mut config = load_train_config(args.config.as_deref())?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let (tr, va, _) = split(&trace, &parse_split(&args.split)?)?;
    let outcome = imitation::train(&tr, &va, &geometry, &config)?;
    outcome.model.save(&args.out)?;
    let log_path = args
        .log
        .unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    let mut log = String::new();
    for r in &outcome.log {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    write_out(&log_path, &log)?;
    eprintln!(
        "best validation hit rate {:.4} at step {}",
        outcome.best_valid_hit_rate, outcome.best_step
    );
    Ok(())
}

fn csv_path(json: &Path) -> PathBuf {
    json.with_extension("csv")
}

fn eval(args: EvalArgs, rng: &mut ChaCha8Rng) -> Result<()> {
    let model = load_model(&args.model)?;
    if let Some(kind) = args.embedder {
        model.expect_embedder(match kind {
            EmbedderArg::Vocab => EmbedderKind::Vocab,
            EmbedderArg::Byte => EmbedderKind::Byte,
        })?;
    }
    let trace = load_trace(&args.trace)?;
    let geometry = load_geometry(args.geometry.as_deref(), CacheGeometry::default_llc())?;
    let kinds = [
        PolicyKind::Lru,
        PolicyKind::Random,
        PolicyKind::Belady,
        PolicyKind::Nn,
        PolicyKind::Learned,
    ];
    let report = report_one(
        &args.trace,
        &trace,
        &geometry,
        &kinds,
        Some(&model),
        None,
        model.config().history_len,
        &parse_split(&args.split)?,
        args.skip,
        rng,
    )?;
    emit_report(&[report], &args.out, &csv_path(&args.out))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn report_one(
    path: &Path,
    trace: &AccessTrace,
    geometry: &CacheGeometry,
    kinds: &[PolicyKind],
    model: Option<&Arc<Model>>,
    window: Option<u64>,
    history_len: usize,
    spec: &SplitSpec,
    skip: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Report> {
    let (tr, _, te) = split(trace, spec)?;
    let table = Arc::new(ReuseDistanceTable::build(&te, geometry));
    let index = kinds
        .contains(&PolicyKind::Nn)
        .then(|| Arc::new(SuffixIndex::build(&tr, geometry, history_len)));
    let inputs = PolicyInputs {
        table: &table,
        window,
        model,
        index: index.as_ref(),
    };
    let mut policies = kinds
        .iter()
        .map(|&k| make_policy(k, &inputs, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(build_report(
        &trace_id(path),
        &te,
        geometry,
        &mut policies,
        &table,
        skip,
    )?)
}

fn report(args: ReportArgs, rng: &mut ChaCha8Rng) -> Result<()> {
    let geometry = load_geometry(args.geometry.as_deref(), CacheGeometry::default_llc())?;
    let model = match args.model.as_deref() {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let spec = parse_split(&args.split)?;
    let mut reports = Vec::with_capacity(args.trace.len());
    for path in &args.trace {
        let trace = load_trace(path)?;
        reports.push(report_one(
            path,
            &trace,
            &geometry,
            &args.policies,
            model.as_ref(),
            args.window,
            args.history_len,
            &spec,
            args.skip,
            rng,
        )?);
    }
    emit_report(&reports, &args.out, &csv_path(&args.out))?;
    Ok(())
}

fn sweep_window_cmd(args: SweepWindowArgs, rng: &mut ChaCha8Rng) -> Result<()> {
    let trace = load_trace(&args.trace)?;
    let geometry = load_geometry(args.geometry.as_deref(), CacheGeometry::default_llc())?;
    let max = max_finite_reuse(&ReuseDistanceTable::build(&trace, &geometry));
    let windows = args
        .windows
        .iter()
        .map(|w| match w.as_str() {
            "max" => Ok(max),
            n => n
                .parse::<u64>()
                .with_context(|| format!("bad window `{n}`")),
        })
        .collect::<Result<Vec<u64>>>()?;
    let mut windows = windows;
    windows.sort_unstable();
    windows.dedup();
    let seeds: Vec<u64> = (0..args.tie_seeds).map(|_| rng.next_u64()).collect();
    let points = sweep_window(&trace, &geometry, &windows, &seeds, args.skip)?;
    write_out(&args.out, &curve_csv(&points))
}

fn sweep_history_cmd(args: SweepHistoryArgs, rng: &mut ChaCha8Rng) -> Result<()> {
    let trace = load_trace(&args.trace)?;
    let geometry = load_geometry(args.geometry.as_deref(), CacheGeometry::default_llc())?;
    let config = load_train_config(args.config.as_deref())?;
    let (tr, va, te) = split(&trace, &parse_split(&args.split)?)?;
    let seeds: Vec<u64> = (0..args.runs).map(|_| rng.next_u64()).collect();
    let points = sweep_history(&tr, &va, &te, &geometry, &config, &args.history, &seeds)?;
    write_out(&args.out, &curve_csv(&points))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    let explicit_seed = std::env::args().any(|a| a == "--seed" || a.starts_with("--seed="));
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    match cli.command {
        Command::GenTrace(a) => gen_trace(a, cli.seed),
        Command::FilterLlc(a) => filter_llc(a, cli.seed),
        Command::Simulate(a) => simulate(a, &mut rng),
        Command::Train(a) => train(a, explicit_seed.then_some(cli.seed)),
        Command::Eval(a) => eval(a, &mut rng),
        Command::SweepWindow(a) => sweep_window_cmd(a, &mut rng),
        Command::SweepHistory(a) => sweep_history_cmd(a, &mut rng),
        Command::Report(a) => report(a, &mut rng),
    }
}
