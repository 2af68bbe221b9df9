use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ecsynth::cluster::{cluster_stats, hash_embed, kmeans, quota_sample, read_embeddings, ClusterModel, KMeansOptions};
use ecsynth::config::{EvalSection, JudgeKind, PipelineConfig, Stage};
use ecsynth::data::{
    read_corpus, read_ec_dataset, read_eval_matrix, read_json, read_scores, write_corpus, write_ec_dataset, write_json,
    write_jsonl, write_scores, ECExample,
};
use ecsynth::demo::{write_demo_bundle, DEMO_SEED};
use ecsynth::eval::{evaluate_grid, format_grid, good_ratio, weighted_metric, GridInput, ModelOutputs};
use ecsynth::grammar::{
    count_outcomes, error_stats, inject_all, injected_pairs, roundtrip_filter, HttpInjector, InjectorClient, MockInjector,
    MockInjectorConfig,
};
use ecsynth::llm::HttpClientConfig;
use ecsynth::mix::{continue_plan, filter_by_weight, mix_datasets, MixSpec, PlanPaths, Ratio, Schedule, Strategy};
use ecsynth::pipeline::{judge_from, run_pipeline};
use ecsynth::reweight::{fit_with_report, format_report, weight, FitOptions, ReweightFit, ReweightParams};
use ecsynth::scoring::{align_scores, score_dataset, NGramScorer};
use ecsynth::simbench::{generate, write_benchmark, PlantedSpec};
use ecsynth::typo::{corrupt_dataset, KeyboardModel, TypoConfig};
use ecsynth::Error;

#[derive(Parser)]
#[command(name = "ecsynth", version, about = "Synthesize, reweight and mix error-correction training data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages from a config file.
    Run(RunArgs),
    /// Write the bundled demo inputs and config.
    DemoBundle {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEMO_SEED)]
        seed: u64,
    },
    /// K-means over document embeddings.
    Cluster(ClusterArgs),
    /// Per-cluster quota sampling.
    Sample(SampleArgs),
    /// Grammar-error injection with roundtrip filtration.
    InjectGrammar(InjectGrammarArgs),
    /// Keyboard typo simulation on dataset sources.
    InjectTypos(InjectTyposArgs),
    /// Score dataset targets with the public and domain n-gram models.
    Score(ScoreArgs),
    /// Fit the reweighting model against live metrics.
    FitReweight(FitArgs),
    /// Generate a planted reweighting benchmark.
    Simbench(SimbenchArgs),
    /// Keep examples whose weight reaches a threshold.
    Filter(FilterArgs),
    /// Mix original and synthetic examples at a fixed ratio.
    Mix(MixArgs),
    /// Write a continue-training manifest.
    Plan(PlanArgs),
    /// Offline evaluation of model outputs.
    Evaluate(EvaluateArgs),
    /// Summary statistics for a dataset or cluster model.
    Stats(StatsArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated stages; all stages when omitted.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<String>,
    /// Overrides paths.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Precomputed embeddings; hashed bag-of-words vectors otherwise.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long, default_value_t = 10)]
    per_cluster: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientArg {
    Mock,
    Http,
}

#[derive(Args)]
struct InjectGrammarArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ClientArg::Mock)]
    client: ClientArg,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    failure_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Kept pairs.
    #[arg(long)]
    out: PathBuf,
    /// Raw per-request outcomes.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct InjectTyposArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    p_transpose: f64,
    #[arg(long, default_value_t = 0.015)]
    p_omit: f64,
    #[arg(long, default_value_t = 0.01)]
    p_repeat: f64,
    #[arg(long, default_value_t = 0.02)]
    p_spatial: f64,
    #[arg(long, default_value_t = 3)]
    max_errors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keyboard layout file; QWERTY when omitted.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, required_unless_present = "import")]
    public_corpus: Option<PathBuf>,
    #[arg(long, required_unless_present = "import")]
    domain_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Precomputed scores, aligned to the input instead of recomputed.
    #[arg(long, conflicts_with_all = ["public_corpus", "domain_corpus"])]
    import: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long = "eval-matrix", required = true)]
    eval_matrix: Vec<PathBuf>,
    #[arg(long)]
    validation: Vec<PathBuf>,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    c_min: f64,
    #[arg(long, default_value_t = 2.0)]
    c_max: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fit as JSON.
    #[arg(long)]
    out: PathBuf,
    /// Text report; printed when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SimbenchArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 12)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 1e-3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    /// Fit JSON whose parameters weight the input; requires --scores.
    #[arg(long, requires = "scores")]
    weights: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long, default_value = "1:4")]
    ratio: Ratio,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, default_value = "contmixfil")]
    strategy: Strategy,
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    filtered: Option<PathBuf>,
    #[arg(long, default_value = "1:4")]
    ratio: Ratio,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    Exact,
    Normalized,
    Http,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// One outputs file per run.
    #[arg(long, required = true)]
    outputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = JudgeArg::Exact)]
    judge: JudgeArg,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Fit JSON whose parameters weight the dataset; requires --scores.
    #[arg(long, requires = "scores")]
    weights: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Grid as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, required_unless_present = "clusters")]
    dataset: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset")]
    clusters: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    buckets: usize,
}

/// Exit status plus message.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 1 } else { 2 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Run(a) => run(a),
        Command::DemoBundle { out, seed } => {
            let s = write_demo_bundle(&out, seed)?;
            log::info!("wrote demo bundle to {} ({} corpus documents)", out.display(), s.corpus);
            Ok(())
        }
        Command::Cluster(a) => cluster(a),
        Command::Sample(a) => sample(a),
        Command::InjectGrammar(a) => inject_grammar(a),
        Command::InjectTypos(a) => inject_typos(a),
        Command::Score(a) => score(a),
        Command::FitReweight(a) => fit_reweight(a),
        Command::Simbench(a) => simbench(a),
        Command::Filter(a) => filter(a),
        Command::Mix(a) => mix(a),
        Command::Plan(a) => plan(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Stats(a) => stats(a),
    }
}

fn run(a: RunArgs) -> CmdResult {
    let config = PipelineConfig::load(&a.config).map_err(invalid)?;
    let stages = a
        .stages
        .iter()
        .map(|s| s.trim().parse::<Stage>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(invalid)?;
    let base = a.config.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let summary = run_pipeline(&config, base, a.out.as_deref(), &stages).map_err(|e| Failure {
        code: e.exit_code() as u8,
        message: e.to_string(),
    })?;
    for r in &summary.records {
        log::info!("{}: {}", r.stage, serde_json::to_string(&r.counts).unwrap_or_default());
    }
    log::info!("artifacts in {}", summary.out_dir.display());
    Ok(())
}

fn cluster(a: ClusterArgs) -> CmdResult {
    let docs = read_corpus(&a.corpus)?;
    let embedded = match &a.embeddings {
        Some(p) => read_embeddings(p)?,
        None => hash_embed(&docs, a.dim, a.seed).map_err(invalid)?,
    };
    let opts = KMeansOptions {
        k: a.k,
        seed: a.seed,
        max_iters: a.max_iters,
        tol: a.tol,
    };
    let model = kmeans(&embedded, &opts)?;
    write_json(&a.out, &model)?;
    log::info!("{} clusters, objective {:.6}, {} iterations", model.num_clusters(), model.objective, model.iterations);
    Ok(())
}

fn sample(a: SampleArgs) -> CmdResult {
    let docs = read_corpus(&a.corpus)?;
    let model: ClusterModel = read_json(&a.clusters)?;
    let ids = quota_sample(&model, a.per_cluster, a.seed)?;
    let by_id: BTreeMap<&str, _> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let picked: Vec<_> = ids
        .iter()
        .map(|id| by_id.get(id.as_str()).map(|d| (*d).clone()).ok_or_else(|| invalid(format!("unknown document {id:?}"))))
        .collect::<Result<_, _>>()?;
    write_corpus(&picked, &a.out)?;
    log::info!("sampled {} documents", picked.len());
    Ok(())
}

fn http_config(endpoint: Option<String>) -> Result<HttpClientConfig, Failure> {
    let endpoint = endpoint.ok_or_else(|| invalid("--endpoint is required for the http client"))?;
    serde_json::from_value(serde_json::json!({ "endpoint": endpoint })).map_err(invalid)
}

fn inject_grammar(a: InjectGrammarArgs) -> CmdResult {
    let client: Box<dyn InjectorClient> = match a.client {
        ClientArg::Mock => {
            let cfg = MockInjectorConfig {
                seed: a.seed,
                failure_rate: a.failure_rate,
                ..MockInjectorConfig::default()
            };
            cfg.validate().map_err(invalid)?;
            Box::new(MockInjector::new(cfg)?)
        }
        ClientArg::Http => Box::new(HttpInjector::new(http_config(a.endpoint)?)),
    };
    if a.concurrency == 0 {
        return Err(invalid("--concurrency must be positive"));
    }
    let docs = read_corpus(&a.input)?;
    let items: Vec<(String, String)> = docs.iter().map(|d| (d.id.clone(), d.text.clone())).collect();
    let records = inject_all(client.as_ref(), &items, a.concurrency);
    let counts = count_outcomes(&records);
    let filtered = roundtrip_filter(&injected_pairs(&records));
    write_ec_dataset(&filtered.kept, &a.out)?;
    if let Some(p) = &a.records {
        write_jsonl(p, &records)?;
    }
    log::info!(
        "{} requests: {} injected, {} skipped, {} parse failures, {} client failures; kept {} after roundtrip ({} dropped)",
        items.len(),
        counts.injected,
        counts.skipped,
        counts.parse_failed,
        counts.client_failed,
        filtered.kept.len(),
        filtered.dropped_count
    );
    Ok(())
}

fn inject_typos(a: InjectTyposArgs) -> CmdResult {
    let cfg = TypoConfig {
        p_transpose: a.p_transpose,
        p_omit: a.p_omit,
        p_repeat: a.p_repeat,
        p_spatial: a.p_spatial,
        max_errors_per_example: a.max_errors,
        seed: a.seed,
    };
    cfg.validate().map_err(invalid)?;
    let keyboard = match &a.layout {
        Some(p) => KeyboardModel::from_file(p)?,
        None => KeyboardModel::qwerty(),
    };
    let examples = read_ec_dataset(&a.input)?;
    let corrupted = corrupt_dataset(&examples, &cfg, &keyboard);
    let events: usize = corrupted.iter().map(|c| c.events.len()).sum();
    let out: Vec<ECExample> = corrupted.into_iter().map(|c| c.example).collect();
    write_ec_dataset(&out, &a.out)?;
    log::info!("{} examples, {} typo events", out.len(), events);
    Ok(())
}

fn score(a: ScoreArgs) -> CmdResult {
    let examples = read_ec_dataset(&a.input)?;
    let scores = if let Some(p) = &a.import {
        align_scores(&examples, &read_scores(p)?)?
    } else {
        if a.order == 0 || a.delta.is_nan() || a.delta <= 0.0 {
            return Err(invalid("--order must be at least 1 and --delta positive"));
        }
        let public = NGramScorer::train(&read_corpus(a.public_corpus.as_deref().expect("clap enforces"))?, a.order, a.delta)?;
        let domain = NGramScorer::train(&read_corpus(a.domain_corpus.as_deref().expect("clap enforces"))?, a.order, a.delta)?;
        score_dataset(&examples, &public, &domain)
    };
    write_scores(&scores, &a.out)?;
    log::info!("scored {} samples", scores.len());
    Ok(())
}

fn fit_reweight(a: FitArgs) -> CmdResult {
    let init = ReweightParams {
        c_min: a.c_min,
        c_max: a.c_max,
        lambda: a.lambda,
        ..ReweightParams::default()
    };
    init.validate().map_err(invalid)?;
    let opts = FitOptions {
        restarts: a.restarts,
        seed: a.seed,
        ..FitOptions::default()
    };
    let train = a.eval_matrix.iter().map(|p| read_eval_matrix(p)).collect::<Result<Vec<_>, _>>()?;
    let validation = a.validation.iter().map(|p| read_eval_matrix(p)).collect::<Result<Vec<_>, _>>()?;
    let scores = read_scores(&a.scores)?;
    let fit = fit_with_report(&train, &validation, &scores, &init, &opts)?;
    write_json(&a.out, &fit)?;
    let report = format_report(&fit);
    match &a.report {
        Some(p) => std::fs::write(p, report).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => print!("{report}"),
    }
    Ok(())
}

fn simbench(a: SimbenchArgs) -> CmdResult {
    let spec = PlantedSpec {
        n: a.n,
        k: a.k,
        d: a.d,
        noise: a.noise,
        seed: a.seed,
        ..PlantedSpec::default()
    };
    spec.validate().map_err(invalid)?;
    let bench = generate(&spec)?;
    write_benchmark(&bench, &a.out)?;
    log::info!(
        "planted benchmark in {}: mean weight {:.4}, noise floor {:.3e}",
        a.out.display(),
        bench.truth.mean_weight,
        bench.truth.noise_floor
    );
    Ok(())
}

/// Attaches weights from a fit to `examples` using aligned scores.
fn apply_fit(examples: Vec<ECExample>, fit_path: &Path, scores_path: &Path) -> Result<Vec<ECExample>, Failure> {
    let fit: ReweightFit = read_json(fit_path)?;
    let scores = align_scores(&examples, &read_scores(scores_path)?)?;
    Ok(examples
        .into_iter()
        .zip(&scores)
        .map(|(mut ex, s)| {
            ex.weight = Some(weight(&fit.params, s));
            ex
        })
        .collect())
}

fn filter(a: FilterArgs) -> CmdResult {
    let mut examples = read_ec_dataset(&a.input)?;
    if let (Some(w), Some(s)) = (&a.weights, &a.scores) {
        examples = apply_fit(examples, w, s)?;
    }
    let kept = filter_by_weight(&examples, a.threshold)?;
    write_ec_dataset(&kept, &a.out)?;
    log::info!("kept {} of {} examples at threshold {}", kept.len(), examples.len(), a.threshold);
    Ok(())
}

fn mix(a: MixArgs) -> CmdResult {
    let original = read_ec_dataset(&a.original)?;
    let synthetic = read_ec_dataset(&a.synthetic)?;
    let spec = MixSpec {
        ratio: a.ratio,
        seed: a.seed,
        length: a.length,
        ..MixSpec::default()
    };
    let mixed = mix_datasets(&original, &synthetic, &spec)?;
    write_ec_dataset(&mixed, &a.out)?;
    log::info!("wrote {} mixed examples", mixed.len());
    Ok(())
}

fn plan(a: PlanArgs) -> CmdResult {
    let spec = MixSpec {
        ratio: a.ratio,
        seed: a.seed,
        ..MixSpec::default()
    };
    let paths = PlanPaths {
        original: a.original,
        synthetic: a.synthetic,
        filtered_synthetic: a.filtered,
    };
    let manifest = continue_plan(a.strategy, &paths, &spec, &Schedule::default()).map_err(invalid)?;
    write_json(&a.out, &manifest)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let section = EvalSection {
        judge: match a.judge {
            JudgeArg::Exact => JudgeKind::Exact,
            JudgeArg::Normalized => JudgeKind::Normalized,
            JudgeArg::Http => JudgeKind::Http,
        },
        http: match a.judge {
            JudgeArg::Http => Some(http_config(a.endpoint)?),
            _ => None,
        },
        ..EvalSection::default()
    };
    if a.k == 0 {
        return Err(invalid("--k must be at least 1"));
    }
    let judge = judge_from(&section)?;
    let mut dataset = read_ec_dataset(&a.dataset)?;
    let weighted = if let (Some(w), Some(s)) = (&a.weights, &a.scores) {
        dataset = apply_fit(dataset, w, s)?;
        true
    } else {
        false
    };
    let weights: Option<BTreeMap<String, f64>> =
        weighted.then(|| dataset.iter().map(|e| (e.id.clone(), e.weight.unwrap_or(1.0))).collect());
    let runs = a.outputs.iter().map(|p| ModelOutputs::read(p)).collect::<Result<Vec<_>, _>>()?;
    for r in &runs {
        let plain = good_ratio(r, &dataset, judge.as_ref(), a.k)?;
        match &weights {
            Some(w) => {
                let wm = weighted_metric(r, &dataset, judge.as_ref(), a.k, w)?;
                println!("{}: top-{} {:.4}, weighted {:.4}", r.model_id, a.k, plain, wm);
            }
            None => println!("{}: top-{} {:.4}", r.model_id, a.k, plain),
        }
    }
    let name = a.dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let rows = evaluate_grid(
        &[GridInput {
            name,
            dataset: &dataset,
            runs,
        }],
        judge.as_ref(),
        weights.as_ref(),
    )?;
    print!("{}", format_grid(&rows));
    if let Some(p) = &a.out {
        write_json(p, &rows)?;
    }
    Ok(())
}

fn stats(a: StatsArgs) -> CmdResult {
    let value = if let Some(p) = &a.clusters {
        let model: ClusterModel = read_json(p)?;
        serde_json::to_value(cluster_stats(&model, a.buckets.max(1)))
    } else {
        let ds = read_ec_dataset(a.dataset.as_deref().expect("clap enforces"))?;
        serde_json::to_value(error_stats(&ds))
    };
    println!("{}", serde_json::to_string_pretty(&value.map_err(invalid)?).map_err(invalid)?);
    Ok(())
}
