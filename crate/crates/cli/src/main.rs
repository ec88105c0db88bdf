mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nbfrec::checkpoint::{Checkpoint, LoadMode};
use nbfrec::dataset::Dataset;
use nbfrec::eval::{CandidatePolicy, EvalOptions, Metric, RankingReport};
use nbfrec::ingest::{self, GraphStats, Schema};
use nbfrec::synth::{self, SynthSpec};
use nbfrec::transfer::{self, summarize, SeedSummary};
use serde::Serialize;
use serde_json::json;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "nbfrec", version, about = "Inductive link prediction on bipartite interaction graphs")]
struct Cli {
    /// Worker threads for data-parallel work; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a delimited interaction log into a graph cache.
    Ingest(IngestArgs),
    /// Train end to end (or jointly on several datasets) and report on the test split.
    Train(TrainArgs),
    /// Evaluate a pretrained backbone on a new dataset through fresh heads.
    ZeroShot(ZeroShotArgs),
    /// Train a pretrained backbone with a fresh head on a new dataset.
    FineTune(FineTuneArgs),
    /// Pretrain on each dataset and zero-shot evaluate on every other one.
    Matrix(MatrixArgs),
    /// Generate a synthetic clustered interaction log.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    data: PathBuf,
    /// Columns as `user,item[,feature...]`.
    #[arg(long, required_unless_present_all = ["user_col", "item_col"])]
    schema: Option<String>,
    #[arg(long, requires = "item_col")]
    user_col: Option<String>,
    #[arg(long, requires = "user_col")]
    item_col: Option<String>,
    #[arg(long, value_delimiter = ',')]
    feature_cols: Vec<String>,
    /// Path of the graph cache to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    /// hits@K or ndcg@K; repeatable.
    #[arg(long = "metric")]
    metrics: Vec<String>,
    /// `full` or `sampled:N`.
    #[arg(long, default_value = "full")]
    candidates: String,
    /// Include every query's rank in the reports.
    #[arg(long)]
    per_query: bool,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A single `key=value` override; repeatable, applied after --config.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Graph cache; repeat to pretrain one backbone on several datasets.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace edge features by a learned constant.
    #[arg(long)]
    structural_only: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ZeroShotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FineTuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    structural_only: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 0.15)]
    p_intra: f64,
    #[arg(long, default_value_t = 0.01)]
    p_inter: f64,
    #[arg(long, default_value_t = 4)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.8)]
    signal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also draw a second, distinct instance of the same family with this seed.
    #[arg(long)]
    pair_seed: Option<u64>,
    #[arg(long, default_value = "synth")]
    stem: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to rerun a command, written next to its outputs.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    build: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(nbfrec::Error),
}

impl From<nbfrec::Error> for Failure {
    fn from(e: nbfrec::Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(e) if e.is_numerical() => 3,
            Failure::Lib(e) if e.is_data_error() || matches!(e, nbfrec::Error::NegativeSampling { .. }) => 2,
            Failure::Lib(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

struct Run {
    command: &'static str,
    started: Instant,
    timings: BTreeMap<String, f64>,
    stage: Instant,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run {
            command,
            started: Instant::now(),
            timings: BTreeMap::new(),
            stage: Instant::now(),
        }
    }

    fn lap(&mut self, name: impl Into<String>) {
        self.timings.insert(name.into(), self.stage.elapsed().as_secs_f64());
        self.stage = Instant::now();
    }

    fn finish(
        mut self,
        manifest_path: &Path,
        config: serde_json::Value,
        seeds: Vec<u64>,
        inputs: Vec<PathBuf>,
        mut outputs: Vec<PathBuf>,
    ) -> Outcome<()> {
        self.timings.insert("total".into(), self.started.elapsed().as_secs_f64());
        outputs.push(manifest_path.to_path_buf());
        let manifest = RunManifest {
            command: self.command.into(),
            args: std::env::args().collect(),
            build: build_id(),
            config,
            seeds,
            inputs,
            outputs,
            timings: self.timings,
        };
        std::fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

fn build_id() -> String {
    match option_env!("NBFREC_BUILD_ID") {
        Some(id) => format!("{} ({id})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn eval_options(args: &EvalArgs, config: &RunConfig, seed: u64) -> Outcome<EvalOptions> {
    let mut metrics = args
        .metrics
        .iter()
        .map(|m| m.parse::<Metric>().map_err(|e| Failure::Usage(e.to_string())))
        .collect::<Outcome<Vec<_>>>()?;
    if metrics.is_empty() {
        metrics = EvalOptions::default().metrics;
    }
    let candidates: CandidatePolicy = args.candidates.parse().map_err(|e: nbfrec::Error| Failure::Usage(e.to_string()))?;
    Ok(EvalOptions {
        metrics,
        candidates,
        seed,
        execution: config.train.execution,
    })
}

fn eval_json(args: &EvalArgs, eval: &EvalOptions) -> serde_json::Value {
    json!({
        "metrics": eval.metrics.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        "candidates": args.candidates,
    })
}

fn run_config(args: &ConfigArgs) -> Outcome<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        config = config.from_text(&text).map_err(Failure::Usage)?;
    }
    let pairs = args
        .set
        .iter()
        .map(|s| s.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects key=value, got '{s}'"))))
        .collect::<Outcome<Vec<_>>>()?;
    config = config.apply(pairs).map_err(Failure::Usage)?;
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    Ok(config)
}

fn load_dataset(path: &Path, config: &RunConfig) -> Outcome<Dataset> {
    let file = std::fs::File::open(path)?;
    let data = ingest::read_cache(std::io::BufReader::new(file))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    Ok(Dataset::with_ratios(name, data.graph, config.ratios(), config.split_seed)?)
}

fn out_dir(path: &Path) -> Outcome<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn print_report(label: &str, report: &RankingReport) {
    let cells: Vec<String> = report.metric.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    println!("{label}: {} ({} queries)", cells.join(", "), report.queries);
}

fn print_summary(label: &str, summary: &BTreeMap<String, SeedSummary>) {
    let cells: Vec<String> = summary.iter().map(|(k, s)| format!("{k} {s}")).collect();
    println!("{label}: {}", cells.join(", "));
}

fn report_value(report: &RankingReport, per_query: bool) -> Outcome<serde_json::Value> {
    Ok(serde_json::from_str(&report.to_json(per_query)?)?)
}

fn cmd_ingest(args: IngestArgs) -> Outcome<()> {
    let mut run = Run::new("ingest");
    let schema = match (&args.user_col, &args.item_col, &args.schema) {
        (Some(u), Some(i), _) => Schema::new(u.clone(), i.clone(), args.feature_cols.clone()),
        (_, _, Some(s)) => {
            let cols: Vec<String> = s.split(',').map(|c| c.trim().to_string()).collect();
            if cols.len() < 2 || cols.iter().any(String::is_empty) {
                return Err(Failure::Usage(format!("--schema '{s}' must list user,item[,feature...]")));
            }
            Schema::new(cols[0].clone(), cols[1].clone(), cols[2..].to_vec())
        }
        _ => return Err(Failure::Usage("need --user-col and --item-col, or --schema".into())),
    };
    if !args.data.exists() {
        return Err(Failure::Usage(format!("input {} does not exist", args.data.display())));
    }
    let data = ingest::ingest_path(&args.data, &schema)?;
    run.lap("parse");
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    let mut buf = Vec::new();
    ingest::write_cache(&data, &mut buf)?;
    std::fs::write(&args.out, buf)?;
    run.lap("write");

    let stats = data.stats();
    let stats_path = args.out.with_extension("stats.json");
    write_json(&stats_path, &json!({ "stats": stats, "duplicates": data.duplicates }))?;
    println!(
        "{} users, {} items, {} interactions ({} duplicate rows dropped)",
        stats.users, stats.items, stats.interactions, data.duplicates
    );
    let config = json!({
        "user_col": schema.user_col,
        "item_col": schema.item_col,
        "feature_cols": schema.feature_cols,
    });
    run.finish(
        &args.out.with_extension("manifest.json"),
        config,
        vec![],
        vec![args.data],
        vec![args.out.clone(), stats_path],
    )
}

fn cmd_train(args: TrainArgs) -> Outcome<()> {
    let mut run = Run::new("train");
    let mut config = run_config(&args.config)?;
    config.train.seed = args.seed;
    config.model.structural_only |= args.structural_only;
    let eval = eval_options(&args.eval, &config, args.seed)?;
    let datasets = args
        .data
        .iter()
        .map(|p| load_dataset(p, &config))
        .collect::<Outcome<Vec<_>>>()?;
    run.lap("load");
    out_dir(&args.out)?;
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let (checkpoint, fit) = transfer::multi_graph_pretrain(&refs, &config.model, &config.train, &mut ())?;
    run.lap("train");
    let backbone = checkpoint.backbone();
    let mut reports = BTreeMap::new();
    for d in &datasets {
        let head = checkpoint.head(&d.name).expect("trained head");
        let report = transfer::test_report(&backbone, head, d, &eval)?;
        print_report(&d.name, &report);
        reports.insert(d.name.clone(), report_value(&report, args.eval.per_query)?);
    }
    run.lap("evaluate");

    let ck_path = args.out.join("checkpoint.nbfc");
    checkpoint.save(&ck_path)?;
    let report_path = args.out.join("report.json");
    write_json(
        &report_path,
        &json!({ "reports": reports, "history": fit.history, "best_epoch": fit.best_epoch }),
    )?;
    run.finish(
        &args.out.join("manifest.json"),
        json!({ "run": config, "eval": eval_json(&args.eval, &eval) }),
        vec![args.seed],
        args.data,
        vec![ck_path, report_path],
    )
}

fn load_backbone(path: &Path) -> Outcome<nbfrec::model::Backbone> {
    Ok(Checkpoint::load(path, LoadMode::BackboneOnly)?.backbone())
}

fn seeded_document(
    seeds: &[u64],
    reports: &[RankingReport],
    per_query: bool,
) -> Outcome<(serde_json::Value, BTreeMap<String, SeedSummary>)> {
    let summary = summarize(reports);
    let runs = seeds
        .iter()
        .zip(reports)
        .map(|(s, r)| Ok(json!({ "seed": s, "report": report_value(r, per_query)? })))
        .collect::<Outcome<Vec<_>>>()?;
    Ok((json!({ "runs": runs, "summary": summary }), summary))
}

fn cmd_zero_shot(args: ZeroShotArgs) -> Outcome<()> {
    let mut run = Run::new("zero-shot");
    let config = run_config(&args.config)?;
    let backbone = load_backbone(&args.checkpoint)?;
    let target = load_dataset(&args.data, &config)?;
    run.lap("load");
    out_dir(&args.out)?;
    let mut reports = Vec::new();
    let mut eval = eval_options(&args.eval, &config, 0)?;
    for &seed in &args.seeds {
        eval.seed = seed;
        let report = transfer::zero_shot(&backbone, &target, seed, &eval)?;
        print_report(&format!("seed {seed}"), &report);
        reports.push(report);
    }
    run.lap("evaluate");
    let (doc, summary) = seeded_document(&args.seeds, &reports, args.eval.per_query)?;
    print_summary(&target.name, &summary);
    let report_path = args.out.join("report.json");
    write_json(&report_path, &doc)?;
    run.finish(
        &args.out.join("manifest.json"),
        json!({ "run": config, "eval": eval_json(&args.eval, &eval) }),
        args.seeds,
        vec![args.checkpoint, args.data],
        vec![report_path],
    )
}

fn cmd_fine_tune(args: FineTuneArgs) -> Outcome<()> {
    let mut run = Run::new("fine-tune");
    let mut config = run_config(&args.config)?;
    let backbone = load_backbone(&args.checkpoint)?;
    let target = load_dataset(&args.data, &config)?;
    run.lap("load");
    out_dir(&args.out)?;
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    let mut eval = eval_options(&args.eval, &config, 0)?;
    for &seed in &args.seeds {
        config.train.seed = seed;
        eval.seed = seed;
        let tuned = transfer::fine_tune(&backbone, &target, &config.train, &eval)?;
        run.lap(format!("seed {seed}"));
        let report = tuned.reports[&target.name].clone();
        print_report(&format!("seed {seed}"), &report);
        let path = args.out.join(format!("checkpoint-seed{seed}.nbfc"));
        tuned.checkpoint.save(&path)?;
        outputs.push(path);
        reports.push(report);
    }
    let (doc, summary) = seeded_document(&args.seeds, &reports, args.eval.per_query)?;
    print_summary(&target.name, &summary);
    let report_path = args.out.join("report.json");
    write_json(&report_path, &doc)?;
    outputs.push(report_path);
    config.train.seed = args.seeds.first().copied().unwrap_or(0);
    run.finish(
        &args.out.join("manifest.json"),
        json!({ "run": config, "eval": eval_json(&args.eval, &eval) }),
        args.seeds,
        vec![args.checkpoint, args.data],
        outputs,
    )
}

fn cmd_matrix(args: MatrixArgs) -> Outcome<()> {
    let mut run = Run::new("matrix");
    let mut config = run_config(&args.config)?;
    config.model.structural_only |= args.structural_only;
    let datasets = args
        .data
        .iter()
        .map(|p| load_dataset(p, &config))
        .collect::<Outcome<Vec<_>>>()?;
    run.lap("load");
    out_dir(&args.out)?;
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let mut outputs = Vec::new();
    let mut matrices = Vec::new();
    let mut eval = eval_options(&args.eval, &config, 0)?;
    for &seed in &args.seeds {
        config.train.seed = seed;
        eval.seed = seed;
        let m = transfer::transfer_matrix(&refs, &config.model, &config.train, &eval)?;
        run.lap(format!("seed {seed}"));
        let path = args.out.join(format!("matrix-seed{seed}.csv"));
        std::fs::write(&path, m.to_csv())?;
        outputs.push(path);
        matrices.push(m);
    }
    let names = matrices[0].names.clone();
    let n = names.len();
    let mut cells = Vec::with_capacity(n);
    for t in 0..n {
        let mut row = Vec::with_capacity(n);
        for s in 0..n {
            let reports: Vec<RankingReport> = matrices.iter().map(|m| m.reports[t][s].clone()).collect();
            row.push(summarize(&reports));
        }
        cells.push(row);
    }
    let metric = matrices[0].metric.clone();
    println!("{metric}, rows are targets, columns are sources");
    for (name, row) in names.iter().zip(&cells) {
        let line: Vec<String> = row.iter().map(|c| c[&metric].to_string()).collect();
        println!("{name}: {}", line.join(" | "));
    }
    let json_path = args.out.join("matrix.json");
    write_json(
        &json_path,
        &json!({ "names": names, "metric": metric, "seeds": args.seeds, "summary": cells }),
    )?;
    outputs.push(json_path);
    config.train.seed = args.seeds.first().copied().unwrap_or(0);
    run.finish(
        &args.out.join("manifest.json"),
        json!({ "run": config, "eval": eval_json(&args.eval, &eval) }),
        args.seeds,
        args.data,
        outputs,
    )
}

fn write_synthetic(data: &synth::Synthetic, dir: &Path, stem: &str, outputs: &mut Vec<PathBuf>) -> Outcome<GraphStats> {
    let (csv, labels) = synth::write_dataset(data, dir, stem)?;
    let cache = dir.join(format!("{stem}.nbfg"));
    let mut buf = Vec::new();
    ingest::write_cache(&ingest::with_default_ids(data.graph.clone()), &mut buf)?;
    std::fs::write(&cache, buf)?;
    outputs.extend([csv, labels, cache]);
    let stats = GraphStats::of(&data.graph);
    println!(
        "{stem}: {} users, {} items, {} interactions (expected {:.1})",
        stats.users,
        stats.items,
        stats.interactions,
        data.spec.expected_edges()
    );
    Ok(stats)
}

fn cmd_synth(args: SynthArgs) -> Outcome<()> {
    let mut run = Run::new("synth");
    let spec = SynthSpec {
        num_users: args.users,
        num_items: args.items,
        num_clusters: args.clusters,
        p_intra: args.p_intra,
        p_inter: args.p_inter,
        feature_dim: args.feature_dim,
        feature_signal: args.signal,
        seed: args.seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    out_dir(&args.out)?;
    let mut outputs = Vec::new();
    let mut seeds = vec![args.seed];
    match args.pair_seed {
        None => {
            let data = synth::generate(&spec)?;
            write_synthetic(&data, &args.out, &args.stem, &mut outputs)?;
        }
        Some(b) => {
            let (x, y) = synth::family_pair(&spec, args.seed, b)?;
            write_synthetic(&x, &args.out, &format!("{}-a", args.stem), &mut outputs)?;
            write_synthetic(&y, &args.out, &format!("{}-b", args.stem), &mut outputs)?;
            seeds.push(b);
        }
    }
    run.lap("generate");
    run.finish(
        &args.out.join(format!("{}.manifest.json", args.stem)),
        serde_json::to_value(&spec)?,
        seeds,
        vec![],
        outputs,
    )
}

fn dispatch(cli: Cli) -> Outcome<()> {
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--workers: {e}")))?;
    }
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::ZeroShot(a) => cmd_zero_shot(a),
        Command::FineTune(a) => cmd_fine_tune(a),
        Command::Matrix(a) => cmd_matrix(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
