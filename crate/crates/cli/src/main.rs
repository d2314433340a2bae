//! `ceaeval` — command-line front end for the evaluation toolkit.
//!
//! Subcommands mirror the library's stages: corpus curation, context
//! windows, expressive planning, judging, reward math, metrics, the
//! attention-bias kernel, and full evaluation runs with report rendering.
//!
//! Exit codes: 0 success, 1 configuration/corpus/I-O error, 2 run finished
//! but per-utterance failures exceeded the configured budget.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use ceaeval_core::attnbias::{
    dynamic_bias_trace, export_bias_to_path, grad_check, BiasParams, GradProbe,
};
use ceaeval_core::backend::HashEmbedding;
use ceaeval_core::context::build_context;
use ceaeval_core::corpus::{filter_for_rl, rebalance_by_score, Corpus};
use ceaeval_core::judge::{
    annotate_regions, parse_verdict, render_judge_prompt, JudgeMode, Lang,
};
use ceaeval_core::metrics::{
    embedding_agreement, icc_2_1, lcc, percent_agreement, tolerance_acc, PairedScores,
    RatingMatrix,
};
use ceaeval_core::pipeline::{
    load_report, make_chat_backend, render_report, run_evaluation, BackendSpec, BallotRecord,
    PlanRecord, ReportFormat, RunConfig, VerdictRecord,
};
use ceaeval_core::planner::{parse_plan, render_planner_prompt_opts, vote_plans, PlanBallot};
use ceaeval_core::reward::{reward, DEFAULT_SIGMA};
use ceaeval_core::backend::{request_key, ChatMessage, ChatRequest};
use ceaeval_core::templates;

#[derive(Parser)]
#[command(name = "ceaeval", version, about = "Context-aware expressive speech evaluation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inspect and curate JSONL corpora.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Context-window utilities.
    Context {
        #[command(subcommand)]
        cmd: ContextCmd,
    },
    /// Generate voted expressive plans for every annotated line.
    Plan(PlanArgs),
    /// Judge previously generated plans against their utterances.
    Judge(JudgeArgs),
    /// Reward math for predicted vs. reference scores.
    Reward(RewardArgs),
    /// Correlation, accuracy, and agreement statistics.
    Metrics {
        #[command(subcommand)]
        cmd: MetricsCmd,
    },
    /// Attention-bias kernel tools.
    Bias {
        #[command(subcommand)]
        cmd: BiasCmd,
    },
    /// Execute a full evaluation run from a JSON config.
    Run(RunArgs),
    /// Render the report of a finished run.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Parse a corpus and report its shape.
    Validate { path: PathBuf },
    /// Drop annotations whose audio duration is outside [min, max] seconds.
    Filter {
        path: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        min: f64,
        #[arg(long, default_value_t = 45.0)]
        max: f64,
        /// Output file; omit to write JSONL to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resample annotated lines into equal score buckets.
    Rebalance {
        path: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target sample count (default: number of annotated lines).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ContextCmd {
    /// Print the context window around one line.
    Show {
        #[arg(long)]
        corpus: PathBuf,
        /// Story id.
        #[arg(long)]
        story: String,
        /// Target line index within the story.
        #[arg(long)]
        line: usize,
        /// Context size: surrounding lines on each side (0 = none).
        #[arg(long)]
        cts: usize,
        /// Render lines without speaker-role prefixes.
        #[arg(long)]
        no_roles: bool,
    },
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Backend spec JSON file; defaults to the synthesizing mock.
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Collect one ballot per context size 1..=cts-max.
    #[arg(long = "cts-max", default_value_t = 15)]
    cts_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Render context lines without speaker-role prefixes.
    #[arg(long)]
    no_roles: bool,
    /// Directory receiving ballots.jsonl and plans.jsonl.
    #[arg(long, default_value = "plan_out")]
    out: PathBuf,
}

#[derive(Args)]
struct JudgeArgs {
    /// Directory containing plans.jsonl (e.g. a run or plan output dir).
    #[arg(long)]
    plans: PathBuf,
    /// Corpus the plans were generated from.
    #[arg(long)]
    corpus: PathBuf,
    /// Backend spec JSON file; defaults to the synthesizing mock.
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Judging mode: `cot` (explicit reasoning) or `plain`.
    #[arg(long, default_value = "plain")]
    mode: String,
    /// Prompt language: `en` or `zh`.
    #[arg(long, default_value = "en")]
    lang: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file for verdict records; omit to write JSONL to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RewardArgs {
    /// Predicted score in [0, 5].
    #[arg(long, requires = "ref_score", conflicts_with = "batch")]
    pred: Option<f64>,
    /// Reference (human) score in [0, 5].
    #[arg(long = "ref", requires = "pred")]
    ref_score: Option<f64>,
    /// JSONL file of records with `pred` and `ref` (or `human`) fields.
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Linear correlation and tolerance accuracy of paired score files.
    Score {
        /// Predictions: one value per line, bare number or {"value": x, "cts": k}.
        #[arg(long)]
        pred: PathBuf,
        /// References, same format and length.
        #[arg(long = "ref")]
        ref_path: PathBuf,
        /// Group pairs before scoring; only `cts` is supported.
        #[arg(long = "group-by")]
        group_by: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
    },
    /// Inter-rater agreement over a subjects-by-raters matrix.
    Agreement {
        /// JSON array of arrays: numbers for icc, strings otherwise.
        #[arg(long)]
        matrix: PathBuf,
        /// icc | percent | embedding
        #[arg(long)]
        kind: String,
    },
}

#[derive(Subcommand)]
enum BiasCmd {
    /// Compute the dynamic bias trace for a token fixture and export it.
    Trace {
        /// JSON fixture: {"prompt_tokens": [...], "audio_span": [s, e],
        /// "output_tokens": [...], "dim": d}.
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bias_out")]
        out: PathBuf,
    },
    /// Verify analytic gate gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        len: usize,
        #[arg(long, default_value_t = 6)]
        dim: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Fail (exit 1) if the max relative error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Reuse completed targets from an interrupted run.
    #[arg(long)]
    resume: bool,
    /// Force the direct-scoring baseline path.
    #[arg(long = "no-planner")]
    no_planner: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing report.json.
    #[arg(long)]
    run: PathBuf,
    /// table | csv | plotdata
    #[arg(long, default_value = "table")]
    format: String,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    match cli.cmd {
        Cmd::Corpus { cmd } => corpus_cmd(cmd),
        Cmd::Context { cmd } => context_cmd(cmd),
        Cmd::Plan(args) => plan_cmd(args),
        Cmd::Judge(args) => judge_cmd(args),
        Cmd::Reward(args) => reward_cmd(args),
        Cmd::Metrics { cmd } => metrics_cmd(cmd),
        Cmd::Bias { cmd } => bias_cmd(cmd),
        Cmd::Run(args) => run_cmd(args),
        Cmd::Report(args) => report_cmd(args),
    }
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn emit_corpus(corpus: &Corpus, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => corpus
            .save(path)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", corpus.to_jsonl()),
    }
    Ok(())
}

fn corpus_cmd(cmd: CorpusCmd) -> anyhow::Result<i32> {
    match cmd {
        CorpusCmd::Validate { path } => {
            let corpus = load_corpus(&path)?;
            let lines: usize = corpus.stories.iter().map(|s| s.lines.len()).sum();
            println!(
                "ok: {} stories, {} lines, {} annotated",
                corpus.stories.len(),
                lines,
                corpus.annotated_count()
            );
        }
        CorpusCmd::Filter { path, min, max, out } => {
            let corpus = load_corpus(&path)?;
            let before = corpus.annotated_count();
            let filtered = filter_for_rl(&corpus, min, max)?;
            let after = filtered.annotated_count();
            emit_corpus(&filtered, out.as_deref())?;
            eprintln!("kept {after} of {before} annotated lines (duration in [{min}, {max}] s)");
        }
        CorpusCmd::Rebalance { path, seed, size, out } => {
            let corpus = load_corpus(&path)?;
            let balanced = rebalance_by_score(&corpus, seed, size)?;
            emit_corpus(&balanced, out.as_deref())?;
            eprintln!(
                "resampled {} annotated lines into {} stories (seed {seed})",
                balanced.annotated_count(),
                balanced.stories.len()
            );
        }
    }
    Ok(0)
}

fn context_cmd(cmd: ContextCmd) -> anyhow::Result<i32> {
    let ContextCmd::Show { corpus, story, line, cts, no_roles } = cmd;
    let corpus = load_corpus(&corpus)?;
    let found = corpus
        .stories
        .iter()
        .find(|s| s.story_id == story)
        .ok_or_else(|| anyhow!("story {story:?} not found"))?;
    let window = build_context(&found.lines, line, cts)?;
    let with_roles = !no_roles;
    let lines = window.render_lines(with_roles);
    if !lines.is_empty() {
        println!("{lines}");
    }
    println!(">>> {}", window.render_target(with_roles));
    Ok(0)
}

fn load_backend_spec(path: Option<&Path>) -> anyhow::Result<BackendSpec> {
    match path {
        None => Ok(BackendSpec::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading backend spec {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing backend spec {}", path.display()))
        }
    }
}

fn append_jsonl<T: serde::Serialize>(
    buf: &mut String,
    record: &T,
) {
    buf.push_str(&serde_json::to_string(record).expect("record serializes"));
    buf.push('\n');
}

fn plan_cmd(args: PlanArgs) -> anyhow::Result<i32> {
    let corpus = load_corpus(&args.corpus)?;
    if args.cts_max == 0 {
        bail!("--cts-max must be >= 1");
    }
    let spec = load_backend_spec(args.backend.as_deref())?;
    let backend = make_chat_backend(&spec, args.seed)?;
    let temperature = match &spec {
        BackendSpec::Http { config } => config.temperature,
        BackendSpec::Mock { .. } => 0.0,
    };

    let mut ballots_buf = String::new();
    let mut plans_buf = String::new();
    let mut n_plans = 0usize;
    let mut n_ballots = 0usize;
    let mut n_failed = 0usize;
    for (story, line) in corpus.annotated() {
        let mut ballots = Vec::new();
        for cts in 1..=args.cts_max {
            let window = build_context(&story.lines, line.line_index, cts)?;
            let prompt = render_planner_prompt_opts(&window, &line.text, !args.no_roles);
            let req = ChatRequest { messages: vec![ChatMessage::user(prompt)], temperature };
            let key = request_key(&req);
            let mut record = BallotRecord {
                cfg: "adhoc".to_string(),
                template: templates::PLANNER_EN_VERSION.to_string(),
                story_id: story.story_id.clone(),
                line_index: line.line_index,
                cts,
                request_key: key,
                plan: None,
                error: None,
            };
            match backend
                .chat(&req)
                .map_err(|e| e.to_string())
                .and_then(|resp| parse_plan(&resp.text).map_err(|e| e.to_string()))
            {
                Ok(plan) => {
                    ballots.push(PlanBallot { cts, plan: plan.clone() });
                    record.plan = Some(plan);
                }
                Err(message) => record.error = Some(message),
            }
            n_ballots += 1;
            append_jsonl(&mut ballots_buf, &record);
        }
        match vote_plans(&ballots) {
            Ok(plan) => {
                n_plans += 1;
                append_jsonl(
                    &mut plans_buf,
                    &PlanRecord {
                        cfg: "adhoc".to_string(),
                        story_id: story.story_id.clone(),
                        line_index: line.line_index,
                        ballots: ballots.len(),
                        plan,
                    },
                );
            }
            Err(e) => {
                n_failed += 1;
                eprintln!(
                    "warning: {}:{} produced no plan: {e}",
                    story.story_id, line.line_index
                );
            }
        }
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("ballots.jsonl"), ballots_buf)?;
    std::fs::write(args.out.join("plans.jsonl"), plans_buf)?;
    println!(
        "wrote {n_plans} plans ({n_ballots} ballots, {n_failed} failed targets) to {}",
        args.out.display()
    );
    Ok(0)
}

fn parse_mode(s: &str) -> anyhow::Result<JudgeMode> {
    match s.to_lowercase().as_str() {
        "cot" | "with_cot" => Ok(JudgeMode::WithCot),
        "plain" | "without_cot" => Ok(JudgeMode::WithoutCot),
        other => bail!("unknown mode {other:?} (cot|plain)"),
    }
}

fn parse_lang(s: &str) -> anyhow::Result<Lang> {
    match s.to_lowercase().as_str() {
        "en" => Ok(Lang::En),
        "zh" => Ok(Lang::Zh),
        other => bail!("unknown language {other:?} (en|zh)"),
    }
}

fn judge_cmd(args: JudgeArgs) -> anyhow::Result<i32> {
    let mode = parse_mode(&args.mode)?;
    let lang = parse_lang(&args.lang)?;
    let corpus = load_corpus(&args.corpus)?;
    let plans_path = args.plans.join("plans.jsonl");
    let text = std::fs::read_to_string(&plans_path)
        .with_context(|| format!("reading {}", plans_path.display()))?;
    let plans: Vec<PlanRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", plans_path.display()))?;

    let spec = load_backend_spec(args.backend.as_deref())?;
    let backend = make_chat_backend(&spec, args.seed)?;
    let temperature = match &spec {
        BackendSpec::Http { config } => config.temperature,
        BackendSpec::Mock { .. } => 0.0,
    };

    let mut out_buf = String::new();
    let mut n_ok = 0usize;
    let mut n_err = 0usize;
    for plan in &plans {
        let line = corpus
            .stories
            .iter()
            .find(|s| s.story_id == plan.story_id)
            .and_then(|s| s.lines.iter().find(|l| l.line_index == plan.line_index))
            .ok_or_else(|| {
                anyhow!("plan target {}:{} not in corpus", plan.story_id, plan.line_index)
            })?;
        let annotation = line
            .annotation
            .as_ref()
            .ok_or_else(|| {
                anyhow!("plan target {}:{} is unannotated", plan.story_id, plan.line_index)
            })?;
        let system = render_judge_prompt(&plan.plan, mode, lang);
        let user = format!("Target utterance: {}\n[audio: {}]", line.text, annotation.audio_ref);
        let req = ChatRequest {
            messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
            temperature,
        };
        let key = request_key(&req);
        let resp = backend.chat(&req)?;
        let mut record = VerdictRecord {
            cfg: plan.cfg.clone(),
            template: match lang {
                Lang::En => templates::JUDGE_EN_VERSION.to_string(),
                Lang::Zh => templates::JUDGE_ZH_VERSION.to_string(),
            },
            story_id: plan.story_id.clone(),
            line_index: plan.line_index,
            cts: plan.ballots,
            mode,
            request_key: key,
            raw_text: resp.text.clone(),
            final_score: None,
            dimension_scores: BTreeMap::new(),
            error: None,
        };
        match parse_verdict(&resp.text) {
            Ok(v) => {
                record.final_score = Some(v.final_score);
                record.dimension_scores = v.dimension_scores;
                n_ok += 1;
            }
            Err(e) => {
                record.error = Some(e.to_string());
                n_err += 1;
            }
        }
        append_jsonl(&mut out_buf, &record);
    }

    match &args.out {
        Some(path) => std::fs::write(path, out_buf)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{out_buf}"),
    }
    eprintln!("judged {} plans: {n_ok} scored, {n_err} unparseable", plans.len());
    Ok(0)
}

#[derive(Deserialize)]
struct RewardLine {
    pred: f64,
    #[serde(rename = "ref", alias = "human")]
    ref_score: f64,
}

fn reward_cmd(args: RewardArgs) -> anyhow::Result<i32> {
    match (args.pred, args.ref_score, &args.batch) {
        (Some(pred), Some(reference), None) => {
            println!("{:.12}", reward(pred, reference, args.sigma)?);
        }
        (None, None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let mut rewards = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RewardLine = serde_json::from_str(line)
                    .with_context(|| format!("{}:{}", path.display(), i + 1))?;
                let r = reward(rec.pred, rec.ref_score, args.sigma)?;
                rewards.push(r);
                println!("{:.12}", r);
            }
            if rewards.is_empty() {
                bail!("no records in {}", path.display());
            }
            let mean: f64 = rewards.iter().sum::<f64>() / rewards.len() as f64;
            eprintln!("n={} mean={:.12}", rewards.len(), mean);
        }
        _ => bail!("provide either --pred and --ref, or --batch FILE"),
    }
    Ok(0)
}

/// One score per line: either a bare number or `{"value": x, "cts": k}`.
fn read_score_file(path: &Path) -> anyhow::Result<Vec<(f64, Option<usize>)>> {
    #[derive(Deserialize)]
    struct Entry {
        value: f64,
        #[serde(default)]
        cts: Option<usize>,
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .parse::<f64>()
            .map(|v| (v, None))
            .or_else(|_| {
                serde_json::from_str::<Entry>(line).map(|e| (e.value, e.cts))
            })
            .map_err(|_| anyhow!("{}:{}: expected a number or {{\"value\", \"cts\"}}", path.display(), i + 1))?;
        out.push(parsed);
    }
    Ok(out)
}

fn fmt_opt(v: Result<f64, impl std::fmt::Display>) -> String {
    match v {
        Ok(x) => format!("{x:.6}"),
        Err(_) => "n/a".to_string(),
    }
}

fn metrics_cmd(cmd: MetricsCmd) -> anyhow::Result<i32> {
    match cmd {
        MetricsCmd::Score { pred, ref_path, group_by, tolerance } => {
            let preds = read_score_file(&pred)?;
            let refs = read_score_file(&ref_path)?;
            if preds.len() != refs.len() {
                bail!("length mismatch: {} predictions vs {} references", preds.len(), refs.len());
            }
            let print_group = |label: Option<usize>, pairs: &[(f64, f64)]| -> anyhow::Result<()> {
                let (p, r): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
                let paired = PairedScores::new(p, r)?;
                let prefix = match label {
                    Some(cts) => format!("cts {cts}  "),
                    None => String::new(),
                };
                println!(
                    "{prefix}n {}  lcc {}  acc {}",
                    paired.len(),
                    fmt_opt(lcc(&paired)),
                    fmt_opt(tolerance_acc(&paired, tolerance)),
                );
                Ok(())
            };
            match group_by.as_deref() {
                None => {
                    let pairs: Vec<(f64, f64)> =
                        preds.iter().zip(&refs).map(|(p, r)| (p.0, r.0)).collect();
                    print_group(None, &pairs)?;
                }
                Some("cts") => {
                    let mut groups: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
                    for (i, (p, r)) in preds.iter().zip(&refs).enumerate() {
                        let cts = p.1.or(r.1).ok_or_else(|| {
                            anyhow!("pair {} has no cts field; cannot group", i + 1)
                        })?;
                        groups.entry(cts).or_default().push((p.0, r.0));
                    }
                    for (cts, pairs) in &groups {
                        print_group(Some(*cts), pairs)?;
                    }
                }
                Some(other) => bail!("unsupported group key {other:?} (only cts)"),
            }
        }
        MetricsCmd::Agreement { matrix, kind } => {
            let text = std::fs::read_to_string(&matrix)
                .with_context(|| format!("reading {}", matrix.display()))?;
            let value = match kind.to_lowercase().as_str() {
                "icc" => {
                    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
                        .context("icc expects a JSON array of number arrays")?;
                    icc_2_1(&RatingMatrix::new(&rows)?)?
                }
                "percent" => {
                    let rows: Vec<Vec<String>> = serde_json::from_str(&text)
                        .context("percent expects a JSON array of string arrays")?;
                    percent_agreement(&rows)?
                }
                "embedding" => {
                    let rows: Vec<Vec<String>> = serde_json::from_str(&text)
                        .context("embedding expects a JSON array of string arrays")?;
                    embedding_agreement(&rows, &HashEmbedding::default())?
                }
                other => bail!("unknown agreement kind {other:?} (icc|percent|embedding)"),
            };
            println!("{value:.6}");
        }
    }
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceFixture {
    prompt_tokens: Vec<String>,
    #[serde(default)]
    audio_span: Option<(usize, usize)>,
    output_tokens: Vec<String>,
    dim: usize,
}

fn bias_cmd(cmd: BiasCmd) -> anyhow::Result<i32> {
    match cmd {
        BiasCmd::Trace { fixture, seed, out } => {
            let text = std::fs::read_to_string(&fixture)
                .with_context(|| format!("reading {}", fixture.display()))?;
            let fx: TraceFixture = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", fixture.display()))?;
            if fx.dim == 0 {
                bail!("fixture dim must be >= 1");
            }
            let seq = annotate_regions(&fx.prompt_tokens, fx.audio_span, &fx.output_tokens)?;
            let len = seq.len();
            let params = BiasParams::from_seed(seed, fx.dim);
            // Hidden states come from an offset stream so they are not the
            // same draws as the gate weights.
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let x = Array2::from_shape_fn((len, fx.dim), |_| {
                StandardNormal.sample(&mut rng)
            });
            let trace = dynamic_bias_trace(&x, &seq, &params)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("bias_trace.txt");
            export_bias_to_path(&trace, &path)?;
            println!(
                "wrote {} matrices (sequence length {len}, dim {}) to {}",
                trace.len(),
                fx.dim,
                path.display()
            );
        }
        BiasCmd::Gradcheck { seed, len, dim, eps, tol } => {
            let probe = GradProbe::random(seed, len, dim);
            let report = grad_check(&BiasParams::from_seed(seed, dim), &probe, eps)?;
            let ok = report.max_rel_err <= tol;
            println!(
                "max_rel_err {:.3e} at {} over {} components: {}",
                report.max_rel_err,
                report.worst_component,
                report.analytic.len(),
                if ok { "ok" } else { "FAIL" }
            );
            if !ok {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn run_cmd(args: RunArgs) -> anyhow::Result<i32> {
    let mut cfg = RunConfig::load(&args.config)?;
    if args.no_planner {
        cfg.use_planner = false;
        cfg.validate()?;
    }
    let outcome = run_evaluation(&cfg, args.resume)?;
    print!("{}", render_report(&outcome.report, ReportFormat::Table));
    println!("run dir: {}", outcome.run_dir.display());
    if !outcome.within_failure_budget(cfg.max_failure_ratio) {
        eprintln!(
            "failure budget exceeded: {} of {} evaluations failed (max ratio {})",
            outcome.report.failed, outcome.report.attempted, cfg.max_failure_ratio
        );
        return Ok(2);
    }
    Ok(0)
}

fn report_cmd(args: ReportArgs) -> anyhow::Result<i32> {
    let format: ReportFormat = args
        .format
        .parse()
        .map_err(|e: String| anyhow!(e))?;
    let report = load_report(&args.run)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(render_report(&report, format).as_bytes())?;
    Ok(0)
}
