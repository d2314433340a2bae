//! End-to-end evaluation orchestration: run configuration, content-addressed
//! run directories, staged planner/judge execution under bounded
//! concurrency, JSONL persistence of every intermediate, resumable runs,
//! and report rendering.
//!
//! A run is identified by a hash over everything that can change its
//! results — corpus content, CTS grid, modes, prompts language, seed, and
//! backend identity — so `runs/<hash12>/` is stable across machines and
//! re-invocations. Intermediates stream to JSONL files as targets complete
//! (crash-tolerant, unordered) and are rewritten in canonical corpus order
//! when the run finishes. With `resume`, targets whose records already
//! exist are reused without touching the backends, and a second pass over a
//! finished run performs zero backend calls while reproducing the report
//! byte-for-byte.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    request_key, BackendConfig, BackendError, ChatBackend, ChatMessage, ChatRequest, HttpBackend,
    MockBackend,
};
use crate::context::build_context;
use crate::corpus::{Corpus, CorpusError, Story, StoryLine};
use crate::judge::{
    parse_verdict, render_baseline_prompt_opts, render_judge_prompt, JudgeMode, Lang,
};
use crate::metrics::{lcc, tolerance_acc, PairedScores, DEFAULT_TOLERANCE};
use crate::planner::{parse_plan, render_planner_prompt_opts, ExpressivePlan, PlanBallot};
use crate::templates;

pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const BALLOTS_FILE: &str = "ballots.jsonl";
pub const PLANS_FILE: &str = "plans.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";
pub const TARGETS_FILE: &str = "targets.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.into();
    move |source| PipelineError::Io { path, source }
}

/// Which backend serves a pipeline stage.
///
/// `mock` runs fully offline: scripted responses by request key, optionally
/// topped up with seeded synthesis so unscripted prompts still get
/// structurally valid plans/verdicts. `http` talks to a chat-completion
/// server; its API key comes from the `CEAEVAL_API_KEY` environment
/// variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<PathBuf>,
        #[serde(default = "default_true")]
        synthesize: bool,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        fail_on_calls: Vec<u64>,
    },
    Http {
        #[serde(flatten)]
        config: BackendConfig,
    },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Mock { script: None, synthesize: true, fail_on_calls: Vec::new() }
    }
}

fn default_true() -> bool {
    true
}
fn default_cts_values() -> Vec<usize> {
    vec![0, 5, 10, 15]
}
fn default_modes() -> Vec<JudgeMode> {
    vec![JudgeMode::WithoutCot, JudgeMode::WithCot]
}
fn default_planner_cts_max() -> usize {
    15
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_max_failure_ratio() -> f64 {
    0.5
}

/// Full description of an evaluation run. Serialized as plain JSON; every
/// field except `corpus` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// JSONL corpus path. The config hash covers the file's *content*, so a
    /// run directory stays valid when the corpus merely moves.
    pub corpus: PathBuf,
    /// Context sizes evaluated on the baseline (no-planner) path.
    #[serde(default = "default_cts_values")]
    pub cts_values: Vec<usize>,
    #[serde(default = "default_modes")]
    pub modes: Vec<JudgeMode>,
    /// Plan-then-judge (default) vs. direct baseline scoring.
    #[serde(default = "default_true")]
    pub use_planner: bool,
    /// Planner ballots are collected for CTS 1..=this; judge cells on the
    /// planner path are keyed by it.
    #[serde(default = "default_planner_cts_max")]
    pub planner_cts_max: usize,
    #[serde(default)]
    pub lang: Lang,
    /// Prefix context lines with `"<role> said:"`.
    #[serde(default = "default_true")]
    pub context_roles: bool,
    #[serde(default)]
    pub planner_backend: BackendSpec,
    #[serde(default)]
    pub judge_backend: BackendSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Stamped verbatim into the report; keep it fixed for reproducible
    /// report bytes. Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    /// Failure budget: above this ratio the CLI exits nonzero.
    #[serde(default = "default_max_failure_ratio")]
    pub max_failure_ratio: f64,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>) -> Self {
        RunConfig {
            corpus: corpus.into(),
            cts_values: default_cts_values(),
            modes: default_modes(),
            use_planner: true,
            planner_cts_max: default_planner_cts_max(),
            lang: Lang::En,
            context_roles: true,
            planner_backend: BackendSpec::default(),
            judge_backend: BackendSpec::default(),
            seed: 0,
            out_dir: default_out_dir(),
            timestamp: None,
            max_failure_ratio: default_max_failure_ratio(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.modes.is_empty() {
            return Err(PipelineError::Config("at least one judge mode is required".to_string()));
        }
        if self.use_planner {
            if self.planner_cts_max == 0 {
                return Err(PipelineError::Config(
                    "planner_cts_max must be >= 1 when the planner is enabled".to_string(),
                ));
            }
        } else if self.cts_values.is_empty() {
            return Err(PipelineError::Config(
                "cts_values must not be empty on the baseline path".to_string(),
            ));
        }
        if !(self.max_failure_ratio.is_finite() && (0.0..=1.0).contains(&self.max_failure_ratio)) {
            return Err(PipelineError::Config(format!(
                "max_failure_ratio must be in [0, 1], got {}",
                self.max_failure_ratio
            )));
        }
        if let BackendSpec::Http { config } = &self.planner_backend {
            config.validate()?;
        }
        if let BackendSpec::Http { config } = &self.judge_backend {
            config.validate()?;
        }
        Ok(())
    }

    /// Deduplicated CTS grid, first occurrence wins.
    fn cts_grid(&self) -> Vec<usize> {
        let mut seen = HashSet::new();
        self.cts_values.iter().copied().filter(|c| seen.insert(*c)).collect()
    }

    /// Deduplicated mode list, first occurrence wins.
    fn mode_list(&self) -> Vec<JudgeMode> {
        let mut seen = HashSet::new();
        self.modes.iter().copied().filter(|m| seen.insert(*m)).collect()
    }

    /// The (cts, mode) cells this config produces.
    pub fn cell_keys(&self) -> Vec<(usize, JudgeMode)> {
        if self.use_planner {
            self.mode_list().into_iter().map(|m| (self.planner_cts_max, m)).collect()
        } else {
            let mut keys = Vec::new();
            for cts in self.cts_grid() {
                for mode in self.mode_list() {
                    keys.push((cts, mode));
                }
            }
            keys
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn backend_hash_view(spec: &BackendSpec) -> Result<serde_json::Value, PipelineError> {
    Ok(match spec {
        BackendSpec::Mock { script, synthesize, fail_on_calls } => {
            let script_sha = match script {
                Some(path) => {
                    let bytes = std::fs::read(path).map_err(io_err(path))?;
                    serde_json::Value::String(sha256_hex(&bytes))
                }
                None => serde_json::Value::Null,
            };
            serde_json::json!({
                "kind": "mock",
                "script_sha256": script_sha,
                "synthesize": synthesize,
                "fail_on_calls": fail_on_calls,
            })
        }
        // Connection tuning (timeouts, retries, parallelism) does not alter
        // what a well-behaved server returns, so only identity fields count.
        BackendSpec::Http { config } => serde_json::json!({
            "kind": "http",
            "base_url": config.base_url,
            "model_id": config.model_id,
            "temperature": config.temperature,
        }),
    })
}

/// Hash of every result-affecting config field. Output location and
/// timestamp are deliberately excluded; the corpus enters by content, not
/// path. serde_json orders map keys, so the serialization is canonical.
pub fn config_hash(cfg: &RunConfig, corpus_text: &str) -> Result<String, PipelineError> {
    let payload = serde_json::json!({
        "corpus_sha256": sha256_hex(corpus_text.as_bytes()),
        "cts_values": cfg.cts_grid(),
        "modes": cfg.mode_list(),
        "use_planner": cfg.use_planner,
        "planner_cts_max": cfg.planner_cts_max,
        "lang": cfg.lang,
        "context_roles": cfg.context_roles,
        "seed": cfg.seed,
        "planner_backend": backend_hash_view(&cfg.planner_backend)?,
        "judge_backend": backend_hash_view(&cfg.judge_backend)?,
    });
    Ok(sha256_hex(serde_json::to_string(&payload).expect("value serializes").as_bytes()))
}

/// One planner prompt/response at a specific context size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallotRecord {
    pub cfg: String,
    pub template: String,
    pub story_id: String,
    pub line_index: usize,
    pub cts: usize,
    pub request_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<ExpressivePlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The voted plan for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub cfg: String,
    pub story_id: String,
    pub line_index: usize,
    pub ballots: usize,
    pub plan: ExpressivePlan,
}

/// Raw judge output and its parse, for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub cfg: String,
    pub template: String,
    pub story_id: String,
    pub line_index: usize,
    pub cts: usize,
    pub mode: JudgeMode,
    pub request_key: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_score: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dimension_scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One (target, cell) evaluation that produced a usable score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub cfg: String,
    pub story_id: String,
    pub line_index: usize,
    pub cts: usize,
    pub mode: JudgeMode,
    pub pred: f64,
    pub human: f64,
}

/// Ledger entry for a failure that cost a score (or a whole target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub cfg: String,
    pub story_id: String,
    pub line_index: usize,
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<JudgeMode>,
    pub message: String,
}

/// Completion marker: a target with this record needs no backend calls on
/// resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub cfg: String,
    pub story_id: String,
    pub line_index: usize,
    pub scores: usize,
    pub errors: usize,
}

/// One report cell: metrics for a (cts, mode) setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub cts: usize,
    pub mode: JudgeMode,
    pub n: usize,
    pub lcc: Option<f64>,
    pub acc: Option<f64>,
}

/// Final run artifact. Field order is the serialization order, and all
/// content is deterministic given the config, so the JSON form is
/// byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub timestamp: String,
    pub lang: Lang,
    pub use_planner: bool,
    pub attempted: usize,
    pub failed: usize,
    pub template_versions: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<BTreeMap<String, f64>>,
    pub cells: Vec<ReportCell>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub run_dir: PathBuf,
}

impl RunOutcome {
    /// Whether per-utterance failures stayed within the configured budget.
    pub fn within_failure_budget(&self, max_ratio: f64) -> bool {
        if self.report.attempted == 0 {
            return true;
        }
        (self.report.failed as f64 / self.report.attempted as f64) <= max_ratio
    }
}

/// Everything recorded about one target, in memory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct TargetBundle {
    ballots: Vec<BallotRecord>,
    plan: Option<PlanRecord>,
    verdicts: Vec<VerdictRecord>,
    scores: Vec<ScoreRecord>,
    errors: Vec<ErrorRecord>,
}

fn mode_rank(mode: JudgeMode) -> usize {
    match mode {
        JudgeMode::WithoutCot => 0,
        JudgeMode::WithCot => 1,
    }
}

impl TargetBundle {
    fn sort(&mut self) {
        self.ballots.sort_by_key(|b| b.cts);
        self.verdicts.sort_by_key(|v| (v.cts, mode_rank(v.mode)));
        self.scores.sort_by_key(|s| (s.cts, mode_rank(s.mode)));
        self.errors.sort_by(|a, b| {
            (a.cts, a.mode.map(mode_rank), a.stage.clone())
                .cmp(&(b.cts, b.mode.map(mode_rank), b.stage.clone()))
        });
    }

    fn marker(&self, cfg: &str, story_id: &str, line_index: usize) -> TargetRecord {
        TargetRecord {
            cfg: cfg.to_string(),
            story_id: story_id.to_string(),
            line_index,
            scores: self.scores.len(),
            errors: self.errors.len(),
        }
    }
}

pub fn make_chat_backend(
    spec: &BackendSpec,
    seed: u64,
) -> Result<Arc<dyn ChatBackend>, PipelineError> {
    match spec {
        BackendSpec::Mock { script, synthesize, fail_on_calls } => {
            let mut backend =
                if *synthesize { MockBackend::synthesizing(seed) } else { MockBackend::new() };
            if let Some(path) = script {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                let map: HashMap<String, String> =
                    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
                        path: path.clone(),
                        source,
                    })?;
                backend = backend.with_script(map);
            }
            backend = backend.fail_on_calls(fail_on_calls.iter().copied());
            Ok(Arc::new(backend))
        }
        BackendSpec::Http { config } => Ok(Arc::new(HttpBackend::new(config.clone())?)),
    }
}

fn spec_temperature(spec: &BackendSpec) -> f64 {
    match spec {
        BackendSpec::Mock { .. } => 0.0,
        BackendSpec::Http { config } => config.temperature,
    }
}

/// Run the evaluation described by `cfg`, constructing backends from the
/// config. See [`run_evaluation_with_backends`].
pub fn run_evaluation(cfg: &RunConfig, resume: bool) -> Result<RunOutcome, PipelineError> {
    let planner = make_chat_backend(&cfg.planner_backend, cfg.seed)?;
    let judge = make_chat_backend(&cfg.judge_backend, cfg.seed)?;
    run_evaluation_with_backends(cfg, resume, planner, judge)
}

/// Run the evaluation with caller-supplied backends (the injection point
/// for tests and embedding instrumentation).
pub fn run_evaluation_with_backends(
    cfg: &RunConfig,
    resume: bool,
    planner: Arc<dyn ChatBackend>,
    judge: Arc<dyn ChatBackend>,
) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let corpus_text =
        std::fs::read_to_string(&cfg.corpus).map_err(io_err(&cfg.corpus))?;
    let corpus = Corpus::from_jsonl(&corpus_text)?;
    let hash = config_hash(cfg, &corpus_text)?;
    let cfg_tag = hash[..12].to_string();

    let targets: Vec<(&Story, &StoryLine)> = corpus.annotated().collect();
    if targets.is_empty() {
        return Err(PipelineError::Config("no targets".to_string()));
    }

    let run_dir = cfg.out_dir.join(&cfg_tag);
    std::fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    write_run_manifest(&run_dir, cfg, &hash)?;

    let existing = if resume { load_existing(&run_dir, &cfg_tag) } else { HashMap::new() };

    // Stream-append newly computed bundles so an interrupted run can resume.
    let appender = Mutex::new(RunFiles::open(&run_dir)?);

    let mut bundles: Vec<Option<TargetBundle>> = vec![None; targets.len()];
    let mut pending: Vec<usize> = Vec::new();
    for (i, (story, line)) in targets.iter().enumerate() {
        let key = (story.story_id.clone(), line.line_index);
        if let Some(found) = existing.get(&key) {
            bundles[i] = Some(found.clone());
        } else {
            pending.push(i);
        }
    }

    let workers = planner
        .max_parallel()
        .max(judge.max_parallel())
        .min(pending.len().max(1))
        .max(1);
    let slots: Mutex<&mut Vec<Option<TargetBundle>>> = Mutex::new(&mut bundles);
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let at = cursor.fetch_add(1, Ordering::SeqCst);
                if at >= pending.len() {
                    break;
                }
                let idx = pending[at];
                let (story, line) = targets[idx];
                let mut bundle =
                    eval_target(cfg, &cfg_tag, story, line, planner.as_ref(), judge.as_ref());
                bundle.sort();
                if let Ok(mut files) = appender.lock() {
                    files.append(&bundle, &cfg_tag, &story.story_id, line.line_index);
                }
                slots.lock().unwrap()[idx] = Some(bundle);
            });
        }
    });

    let bundles: Vec<TargetBundle> =
        bundles.into_iter().map(|b| b.expect("every target evaluated")).collect();

    // Canonical rewrite in corpus order, then the report.
    write_stage_files(&run_dir, &cfg_tag, &targets, &bundles)?;
    let report = build_report(cfg, &hash, &targets, &bundles);
    let report_path = run_dir.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    std::fs::write(&report_path, text).map_err(io_err(&report_path))?;

    Ok(RunOutcome { report, run_dir })
}

/// Evaluate one annotated line end to end. Failures are recorded, never
/// propagated — a batch run must survive individual bad responses.
fn eval_target(
    cfg: &RunConfig,
    cfg_tag: &str,
    story: &Story,
    line: &StoryLine,
    planner: &dyn ChatBackend,
    judge: &dyn ChatBackend,
) -> TargetBundle {
    let mut bundle = TargetBundle::default();
    let annotation = line.annotation.as_ref().expect("targets are annotated");
    let human = annotation.expressive_score;
    let audio_ref = annotation.audio_ref.clone();
    let planner_temp = spec_temperature(&cfg.planner_backend);
    let judge_temp = spec_temperature(&cfg.judge_backend);
    let (planner_tpl, judge_tpl, baseline_tpl) = match cfg.lang {
        Lang::En => {
            (templates::PLANNER_EN_VERSION, templates::JUDGE_EN_VERSION, templates::BASELINE_EN_VERSION)
        }
        Lang::Zh => {
            // The planner prompt ships in English only; judge/baseline have
            // localized variants.
            (templates::PLANNER_EN_VERSION, templates::JUDGE_ZH_VERSION, templates::BASELINE_ZH_VERSION)
        }
    };

    let push_error =
        |bundle: &mut TargetBundle, stage: &str, cts: Option<usize>, mode: Option<JudgeMode>, message: String| {
            bundle.errors.push(ErrorRecord {
                cfg: cfg_tag.to_string(),
                story_id: story.story_id.clone(),
                line_index: line.line_index,
                stage: stage.to_string(),
                cts,
                mode,
                message,
            });
        };

    let judge_cell = |bundle: &mut TargetBundle,
                      system_prompt: String,
                      user_prompt: String,
                      cts: usize,
                      mode: JudgeMode,
                      template: &str| {
        let req = ChatRequest {
            messages: vec![ChatMessage::system(system_prompt), ChatMessage::user(user_prompt)],
            temperature: judge_temp,
        };
        let key = request_key(&req);
        let resp = match judge.chat(&req) {
            Ok(resp) => resp,
            Err(e) => {
                bundle.errors.push(ErrorRecord {
                    cfg: cfg_tag.to_string(),
                    story_id: story.story_id.clone(),
                    line_index: line.line_index,
                    stage: "judge_chat".to_string(),
                    cts: Some(cts),
                    mode: Some(mode),
                    message: e.to_string(),
                });
                return;
            }
        };
        let mut record = VerdictRecord {
            cfg: cfg_tag.to_string(),
            template: template.to_string(),
            story_id: story.story_id.clone(),
            line_index: line.line_index,
            cts,
            mode,
            request_key: key,
            raw_text: resp.text.clone(),
            final_score: None,
            dimension_scores: BTreeMap::new(),
            error: None,
        };
        match parse_verdict(&resp.text) {
            Ok(verdict) => {
                record.final_score = Some(verdict.final_score);
                record.dimension_scores = verdict.dimension_scores;
                bundle.scores.push(ScoreRecord {
                    cfg: cfg_tag.to_string(),
                    story_id: story.story_id.clone(),
                    line_index: line.line_index,
                    cts,
                    mode,
                    pred: verdict.final_score,
                    human,
                });
            }
            Err(e) => {
                record.error = Some(e.to_string());
                bundle.errors.push(ErrorRecord {
                    cfg: cfg_tag.to_string(),
                    story_id: story.story_id.clone(),
                    line_index: line.line_index,
                    stage: "verdict_parse".to_string(),
                    cts: Some(cts),
                    mode: Some(mode),
                    message: e.to_string(),
                });
            }
        }
        bundle.verdicts.push(record);
    };

    if cfg.use_planner {
        let mut ballots: Vec<PlanBallot> = Vec::new();
        for cts in 1..=cfg.planner_cts_max {
            let window = match build_context(&story.lines, line.line_index, cts) {
                Ok(w) => w,
                Err(e) => {
                    push_error(&mut bundle, "context", Some(cts), None, e.to_string());
                    continue;
                }
            };
            let prompt = render_planner_prompt_opts(&window, &line.text, cfg.context_roles);
            let req = ChatRequest {
                messages: vec![ChatMessage::user(prompt)],
                temperature: planner_temp,
            };
            let key = request_key(&req);
            let mut record = BallotRecord {
                cfg: cfg_tag.to_string(),
                template: planner_tpl.to_string(),
                story_id: story.story_id.clone(),
                line_index: line.line_index,
                cts,
                request_key: key,
                plan: None,
                error: None,
            };
            match planner.chat(&req).map_err(|e| e.to_string()).and_then(|resp| {
                parse_plan(&resp.text).map_err(|e| e.to_string())
            }) {
                Ok(plan) => {
                    ballots.push(PlanBallot { cts, plan: plan.clone() });
                    record.plan = Some(plan);
                }
                Err(message) => record.error = Some(message),
            }
            bundle.ballots.push(record);
        }

        match crate::planner::vote_plans(&ballots) {
            Ok(plan) => {
                bundle.plan = Some(PlanRecord {
                    cfg: cfg_tag.to_string(),
                    story_id: story.story_id.clone(),
                    line_index: line.line_index,
                    ballots: ballots.len(),
                    plan: plan.clone(),
                });
                for mode in cfg.mode_list() {
                    let system = render_judge_prompt(&plan, mode, cfg.lang);
                    let user = format!("Target utterance: {}\n[audio: {}]", line.text, audio_ref);
                    judge_cell(&mut bundle, system, user, cfg.planner_cts_max, mode, judge_tpl);
                }
            }
            Err(e) => {
                push_error(&mut bundle, "plan_vote", None, None, e.to_string());
            }
        }
    } else {
        for cts in cfg.cts_grid() {
            let window = match build_context(&story.lines, line.line_index, cts) {
                Ok(w) => w,
                Err(e) => {
                    push_error(&mut bundle, "context", Some(cts), None, e.to_string());
                    continue;
                }
            };
            for mode in cfg.mode_list() {
                let system =
                    render_baseline_prompt_opts(&window, mode, cfg.lang, cfg.context_roles);
                let user = format!("[audio: {audio_ref}]");
                judge_cell(&mut bundle, system, user, cts, mode, baseline_tpl);
            }
        }
    }

    bundle
}

/// How many judge scores this config plans per target.
fn planned_per_target(cfg: &RunConfig) -> usize {
    if cfg.use_planner {
        cfg.mode_list().len()
    } else {
        cfg.cts_grid().len() * cfg.mode_list().len()
    }
}

fn build_report(
    cfg: &RunConfig,
    hash: &str,
    targets: &[(&Story, &StoryLine)],
    bundles: &[TargetBundle],
) -> EvalReport {
    let attempted = targets.len() * planned_per_target(cfg);
    let produced: usize = bundles.iter().map(|b| b.scores.len()).sum();
    let failed = attempted.saturating_sub(produced);

    let mut cells = Vec::new();
    for (cts, mode) in cfg.cell_keys() {
        let mut preds = Vec::new();
        let mut humans = Vec::new();
        for bundle in bundles {
            for s in &bundle.scores {
                if s.cts == cts && s.mode == mode {
                    preds.push(s.pred);
                    humans.push(s.human);
                }
            }
        }
        let n = preds.len();
        if n == 0 {
            continue;
        }
        let paired = PairedScores::new(preds, humans).ok();
        let lcc_value = paired.as_ref().and_then(|p| lcc(p).ok());
        let acc_value = paired.as_ref().and_then(|p| tolerance_acc(p, DEFAULT_TOLERANCE).ok());
        cells.push(ReportCell { cts, mode, n, lcc: lcc_value, acc: acc_value });
    }

    EvalReport {
        config_hash: hash.to_string(),
        timestamp: cfg.timestamp.clone().unwrap_or_else(|| "unset".to_string()),
        lang: cfg.lang,
        use_planner: cfg.use_planner,
        attempted,
        failed,
        template_versions: templates::template_versions(),
        agreement: plan_agreement(cfg, bundles),
        cells,
    }
}

/// Plan-stability agreement on the planner path: treat the per-CTS ballots
/// of each target as raters of that target's emotion and measure their
/// consensus. Only targets with a full, parseable ballot set participate so
/// the rating matrix stays rectangular.
fn plan_agreement(cfg: &RunConfig, bundles: &[TargetBundle]) -> Option<BTreeMap<String, f64>> {
    if !cfg.use_planner || cfg.planner_cts_max < 2 {
        return None;
    }
    let k = cfg.planner_cts_max;
    let emotion_rows: Vec<Vec<String>> = bundles
        .iter()
        .filter(|b| b.ballots.len() == k && b.ballots.iter().all(|r| r.plan.is_some()))
        .map(|b| {
            b.ballots
                .iter()
                .map(|r| r.plan.as_ref().expect("filtered").emotion.clone())
                .collect()
        })
        .collect();
    if emotion_rows.is_empty() {
        return None;
    }

    let mut block = BTreeMap::new();
    if let Ok(v) = crate::metrics::percent_agreement(&emotion_rows) {
        block.insert("plan_emotion_percent".to_string(), v);
    }
    let embedder = crate::backend::HashEmbedding::default();
    if let Ok(v) = crate::metrics::embedding_agreement(&emotion_rows, &embedder) {
        block.insert("plan_emotion_embedding".to_string(), v);
    }
    if block.is_empty() {
        None
    } else {
        Some(block)
    }
}

struct RunFiles {
    ballots: std::fs::File,
    plans: std::fs::File,
    verdicts: std::fs::File,
    scores: std::fs::File,
    errors: std::fs::File,
    targets: std::fs::File,
}

impl RunFiles {
    fn open(dir: &Path) -> Result<Self, PipelineError> {
        let open = |name: &str| -> Result<std::fs::File, PipelineError> {
            let path = dir.join(name);
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(path))
        };
        Ok(RunFiles {
            ballots: open(BALLOTS_FILE)?,
            plans: open(PLANS_FILE)?,
            verdicts: open(VERDICTS_FILE)?,
            scores: open(SCORES_FILE)?,
            errors: open(ERRORS_FILE)?,
            targets: open(TARGETS_FILE)?,
        })
    }

    fn append(&mut self, bundle: &TargetBundle, cfg_tag: &str, story_id: &str, line_index: usize) {
        // Append errors are swallowed here: streaming persistence is a
        // best-effort crash aid, and the canonical rewrite at run end
        // reports real I/O problems.
        let _ = append_records(&mut self.ballots, &bundle.ballots);
        if let Some(plan) = &bundle.plan {
            let _ = append_records(&mut self.plans, std::slice::from_ref(plan));
        }
        let _ = append_records(&mut self.verdicts, &bundle.verdicts);
        let _ = append_records(&mut self.scores, &bundle.scores);
        let _ = append_records(&mut self.errors, &bundle.errors);
        let marker = bundle.marker(cfg_tag, story_id, line_index);
        let _ = append_records(&mut self.targets, std::slice::from_ref(&marker));
    }
}

fn append_records<T: Serialize>(file: &mut std::fs::File, records: &[T]) -> std::io::Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())?;
    file.flush()
}

/// Read a JSONL stage file, skipping lines that fail to parse (a crashed
/// writer can leave a torn final line).
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Vec<T> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect()
}

type TargetKey = (String, usize);

/// Reconstruct completed targets from a previous (possibly interrupted)
/// run over the same config hash.
fn load_existing(run_dir: &Path, cfg_tag: &str) -> HashMap<TargetKey, TargetBundle> {
    let markers: Vec<TargetRecord> = read_jsonl(&run_dir.join(TARGETS_FILE));
    let mut done: HashSet<TargetKey> = HashSet::new();
    for m in markers {
        if m.cfg == cfg_tag {
            done.insert((m.story_id, m.line_index));
        }
    }
    if done.is_empty() {
        return HashMap::new();
    }

    let mut map: HashMap<TargetKey, TargetBundle> = HashMap::new();
    fn bundle_of(
        map: &mut HashMap<TargetKey, TargetBundle>,
        key: TargetKey,
    ) -> &mut TargetBundle {
        map.entry(key).or_default()
    }

    for r in read_jsonl::<BallotRecord>(&run_dir.join(BALLOTS_FILE)) {
        let key = (r.story_id.clone(), r.line_index);
        if r.cfg == cfg_tag && done.contains(&key) {
            let b = bundle_of(&mut map, key);
            if !b.ballots.iter().any(|x| x.cts == r.cts) {
                b.ballots.push(r);
            }
        }
    }
    for r in read_jsonl::<PlanRecord>(&run_dir.join(PLANS_FILE)) {
        let key = (r.story_id.clone(), r.line_index);
        if r.cfg == cfg_tag && done.contains(&key) {
            let b = bundle_of(&mut map, key);
            if b.plan.is_none() {
                b.plan = Some(r);
            }
        }
    }
    for r in read_jsonl::<VerdictRecord>(&run_dir.join(VERDICTS_FILE)) {
        let key = (r.story_id.clone(), r.line_index);
        if r.cfg == cfg_tag && done.contains(&key) {
            let b = bundle_of(&mut map, key);
            if !b.verdicts.iter().any(|x| x.cts == r.cts && x.mode == r.mode) {
                b.verdicts.push(r);
            }
        }
    }
    for r in read_jsonl::<ScoreRecord>(&run_dir.join(SCORES_FILE)) {
        let key = (r.story_id.clone(), r.line_index);
        if r.cfg == cfg_tag && done.contains(&key) {
            let b = bundle_of(&mut map, key);
            if !b.scores.iter().any(|x| x.cts == r.cts && x.mode == r.mode) {
                b.scores.push(r);
            }
        }
    }
    for r in read_jsonl::<ErrorRecord>(&run_dir.join(ERRORS_FILE)) {
        let key = (r.story_id.clone(), r.line_index);
        if r.cfg == cfg_tag && done.contains(&key) {
            let b = bundle_of(&mut map, key);
            if !b.errors.contains(&r) {
                b.errors.push(r);
            }
        }
    }

    for b in map.values_mut() {
        b.sort();
    }
    map
}

/// Rewrite every stage file in canonical corpus order so a finished run
/// directory has deterministic content regardless of worker scheduling.
fn write_stage_files(
    run_dir: &Path,
    cfg_tag: &str,
    targets: &[(&Story, &StoryLine)],
    bundles: &[TargetBundle],
) -> Result<(), PipelineError> {
    fn write_all<T: Serialize>(path: PathBuf, records: Vec<&T>) -> Result<(), PipelineError> {
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r).expect("record serializes"));
            buf.push('\n');
        }
        std::fs::write(&path, buf).map_err(io_err(path))
    }

    write_all(
        run_dir.join(BALLOTS_FILE),
        bundles.iter().flat_map(|b| &b.ballots).collect(),
    )?;
    write_all(run_dir.join(PLANS_FILE), bundles.iter().filter_map(|b| b.plan.as_ref()).collect())?;
    write_all(
        run_dir.join(VERDICTS_FILE),
        bundles.iter().flat_map(|b| &b.verdicts).collect(),
    )?;
    write_all(run_dir.join(SCORES_FILE), bundles.iter().flat_map(|b| &b.scores).collect())?;
    write_all(run_dir.join(ERRORS_FILE), bundles.iter().flat_map(|b| &b.errors).collect())?;

    let markers: Vec<TargetRecord> = targets
        .iter()
        .zip(bundles)
        .map(|((story, line), b)| b.marker(cfg_tag, &story.story_id, line.line_index))
        .collect();
    write_all(run_dir.join(TARGETS_FILE), markers.iter().collect())
}

fn write_run_manifest(run_dir: &Path, cfg: &RunConfig, hash: &str) -> Result<(), PipelineError> {
    let manifest = serde_json::json!({
        "config_hash": hash,
        "timestamp": cfg.timestamp.clone().unwrap_or_else(|| "unset".to_string()),
        "template_versions": templates::template_versions(),
        "config": cfg,
    });
    let path = run_dir.join(RUN_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(path))
}

/// Load a previously written report from a run directory.
pub fn load_report(run_dir: impl AsRef<Path>) -> Result<EvalReport, PipelineError> {
    let path = run_dir.as_ref().join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json { path, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Plotdata,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "plotdata" => Ok(ReportFormat::Plotdata),
            other => Err(format!("unknown report format {other:?} (table|csv|plotdata)")),
        }
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "n/a".to_string(),
    }
}

/// Render a report for humans (`table`), spreadsheets (`csv`), or plotting
/// tools (`plotdata`: one block of `cts lcc acc` lines per mode).
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => {
            let header = ["cts", "mode", "n", "lcc", "acc"];
            let rows: Vec<[String; 5]> = report
                .cells
                .iter()
                .map(|c| {
                    [
                        c.cts.to_string(),
                        c.mode.to_string(),
                        c.n.to_string(),
                        fmt_metric(c.lcc),
                        fmt_metric(c.acc),
                    ]
                })
                .collect();
            let mut widths = [0usize; 5];
            for (i, h) in header.iter().enumerate() {
                widths[i] = h.len();
            }
            for row in &rows {
                for (i, cell) in row.iter().enumerate() {
                    widths[i] = widths[i].max(cell.len());
                }
            }
            let fmt_row = |cells: &[String; 5]| -> String {
                cells
                    .iter()
                    .enumerate()
                    .map(|(i, c)| format!("{c:<width$}", width = widths[i]))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            let mut out = format!(
                "run {}  lang {}  planner {}  attempted {}  failed {}\n",
                &report.config_hash[..12.min(report.config_hash.len())],
                report.lang,
                if report.use_planner { "on" } else { "off" },
                report.attempted,
                report.failed,
            );
            let header_row: [String; 5] = header.map(|h| h.to_string());
            out.push_str(&fmt_row(&header_row));
            out.push('\n');
            for row in &rows {
                out.push_str(&fmt_row(row));
                out.push('\n');
            }
            if let Some(agreement) = &report.agreement {
                for (name, value) in agreement {
                    out.push_str(&format!("agreement {name} {value:.6}\n"));
                }
            }
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from("cts,mode,n,lcc,acc\n");
            for c in &report.cells {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    c.cts,
                    c.mode,
                    c.n,
                    fmt_metric(c.lcc),
                    fmt_metric(c.acc)
                ));
            }
            out
        }
        ReportFormat::Plotdata => {
            let mut modes: Vec<JudgeMode> = Vec::new();
            for c in &report.cells {
                if !modes.contains(&c.mode) {
                    modes.push(c.mode);
                }
            }
            let mut out = format!(
                "# run {}\n",
                &report.config_hash[..12.min(report.config_hash.len())]
            );
            for mode in modes {
                out.push_str(&format!("# series mode={mode}\n# cts lcc acc\n"));
                for c in report.cells.iter().filter(|c| c.mode == mode) {
                    out.push_str(&format!(
                        "{} {} {}\n",
                        c.cts,
                        fmt_metric(c.lcc),
                        fmt_metric(c.acc)
                    ));
                }
                out.push('\n');
            }
            out
        }
    }
}
