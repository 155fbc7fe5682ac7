//! The `hfalign` command line.
//!
//! Every subcommand reads one config file, works inside `--workdir`, prints
//! a JSON summary on stdout and records the same summary under its name in
//! `run_report.json`. Failures print `error: ...` on stderr and exit 1; a
//! correction stage waiting on people exits 3 after printing its summary.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};
use thiserror::Error;

use hfalign_core::config::{derive_seed, AlignMethod, ExperimentConfig};
use hfalign_core::jsonl::{export_jsonl, import_jsonl, RecordKind};
use hfalign_core::promptgen::RefinerClient;
use hfalign_core::store::VideoSchema;
use hfalign_core::{AnnotationFilter, CoreError, IdGen, Prompt, Store, Video, VideoSource};
use hfalign_pipeline::align::{align_run, AlignCorpus};
use hfalign_pipeline::correction::{
    conservation_audit, Adjudicator, Correction, CriticFactory, HumanQueue, OracleAdjudicator, OracleCritics,
    OracleReviewer, Reviewer, Stage, SystemClock, TrainedCritics,
};
use hfalign_pipeline::critic::Critic;
use hfalign_pipeline::eval::{pairwise_eval, uplift_report, PairwiseConfig};
use hfalign_pipeline::experiment::{make_prompts, pretrain_base, reference_corpus, sample_corpus, train_critic};
use hfalign_pipeline::toygen::GenModel;
use hfalign_pipeline::PipelineError;

use crate::api::{serve, AppState, SystemTime};

pub const STORE_FILE: &str = "store.jsonl";
pub const BASE_GENERATOR: &str = "base_generator.json";
pub const ALIGNED_GENERATOR: &str = "aligned_generator.json";
pub const CRITIC: &str = "critic.json";
pub const RUN_REPORT: &str = "run_report.json";

/// Exit status of a correction stage that waits on the human queue.
pub const EXIT_BLOCKED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Pipeline(#[from] PipelineError),

    /// A stage needs output from an earlier stage that is not there.
    #[error("{0}")]
    Missing(String),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

type CliResult<T> = Result<T, CliError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "hfalign", version, about = "Feedback-aligned toy video generation pipeline")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "configs/default.json")]
    pub config: PathBuf,

    /// Master seed; defaults to `seeds.master` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory holding the store, checkpoints and run report.
    #[arg(long, global = true, default_value = "run")]
    pub workdir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compose (and optionally refine) prompts.
    GenPrompts,
    /// Fit the base generator and sample synthesized plus reference videos.
    GenVideos,
    /// Annotate unannotated synthesized videos.
    Annotate {
        #[arg(long, value_enum, default_value_t = Annotators::Oracle)]
        by: Annotators,
        /// Port for `--by serve`; defaults to `service.port`.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Run the annotation HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
    /// Run data correction stages.
    Correct {
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Critic used inside the loop.
        #[arg(long, value_enum, default_value_t = CriticArg::Trained)]
        critic: CriticArg,
        #[arg(long, value_enum, default_value_t = Role::Oracle)]
        adjudicator: Role,
        #[arg(long, value_enum, default_value_t = Role::Oracle)]
        reviewer: Role,
    },
    /// Train the critic on the active annotations.
    TrainCritic {
        /// Train on labels only.
        #[arg(long)]
        no_reason: bool,
        /// Use the large critic.
        #[arg(long)]
        large: bool,
    },
    /// Fine-tune the base generator against the critic.
    Align {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Oracle uplift and pairwise comparison of base vs aligned generator.
    Eval {
        /// Skip the pairwise comparison.
        #[arg(long)]
        no_pairwise: bool,
    },
    /// Write store records as JSONL.
    Export {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load JSONL records into the store.
    Import {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Annotators {
    Oracle,
    Serve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Coarse,
    Refine,
    Final,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriticArg {
    Trained,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Oracle,
    Queue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Rwl,
    Rs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Prompts,
    Videos,
    Annotations,
    Audit,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(Outcome { summary, code }) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Outcome {
    summary: Value,
    code: i32,
}

impl Outcome {
    fn ok(summary: Value) -> Self {
        Self { summary, code: 0 }
    }
}

struct Workspace {
    dir: PathBuf,
    cfg: ExperimentConfig,
    seed: u64,
}

impl Workspace {
    fn open(cli: &Cli) -> CliResult<Self> {
        let cfg = ExperimentConfig::load(&cli.config)?;
        fs::create_dir_all(&cli.workdir).map_err(io_err(format!("cannot create {}", cli.workdir.display())))?;
        let seed = cli.seed.unwrap_or(cfg.seeds.master);
        Ok(Self { dir: cli.workdir.clone(), cfg, seed })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn store(&self) -> CliResult<Store> {
        let schema = VideoSchema { shape: self.cfg.shape(), vocab_size: self.cfg.vocab.size };
        Ok(Store::open(self.path(STORE_FILE))?.with_schema(schema))
    }

    fn seed(&self, stream: &str) -> u64 {
        derive_seed(self.seed, stream)
    }

    fn generator(&self, name: &str, hint: &str) -> CliResult<GenModel> {
        let path = self.path(name);
        if !path.exists() {
            return Err(CliError::Missing(format!("{} not found; run `{hint}` first", path.display())));
        }
        Ok(GenModel::load(path)?)
    }

    fn critic(&self) -> CliResult<Critic> {
        let path = self.path(CRITIC);
        if !path.exists() {
            return Err(CliError::Missing(format!("{} not found; run `train-critic` first", path.display())));
        }
        Ok(Critic::load(path)?)
    }

    /// Stores `summary` under `key` in the run report.
    fn record(&self, key: &str, summary: &Value) -> CliResult<()> {
        let path = self.path(RUN_REPORT);
        let mut report: Map<String, Value> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(CoreError::from)?,
            Err(_) => Map::new(),
        };
        report.insert(key.to_string(), summary.clone());
        let text = serde_json::to_string_pretty(&Value::Object(report)).map_err(CoreError::from)?;
        fs::write(&path, text + "\n").map_err(io_err(format!("cannot write {}", path.display())))
    }
}

fn lookup_maps(store: &Store) -> (HashMap<String, Video>, HashMap<String, Prompt>) {
    let t = store.read();
    (
        t.videos.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        t.prompts.iter().map(|(k, p)| (k.clone(), p.clone())).collect(),
    )
}

fn execute(cli: &Cli) -> CliResult<Outcome> {
    let ws = Workspace::open(cli)?;
    let (key, outcome) = match &cli.command {
        Command::GenPrompts => ("gen_prompts", gen_prompts(&ws)?),
        Command::GenVideos => ("gen_videos", gen_videos(&ws)?),
        Command::Annotate { by: Annotators::Oracle, .. } => ("annotate", annotate_oracle(&ws)?),
        Command::Annotate { by: Annotators::Serve, port } | Command::Serve { port } => {
            return run_server(&ws, *port).map(Outcome::ok);
        }
        Command::Correct { stage, critic, adjudicator, reviewer } => {
            ("correct", correct(&ws, *stage, *critic, *adjudicator, *reviewer)?)
        }
        Command::TrainCritic { no_reason, large } => ("train_critic", train(&ws, *no_reason, *large)?),
        Command::Align { method, lambda, epochs } => ("align", align(&ws, *method, *lambda, *epochs)?),
        Command::Eval { no_pairwise } => ("eval", eval(&ws, !no_pairwise)?),
        Command::Export { kind, out } => return export(&ws, *kind, out.as_deref()).map(Outcome::ok),
        Command::Import { kind, input } => ("import", import(&ws, *kind, input)?),
    };
    ws.record(key, &outcome.summary)?;
    Ok(outcome)
}

fn gen_prompts(ws: &Workspace) -> CliResult<Outcome> {
    let client = match &ws.cfg.data.refiner {
        Some(r) => RefinerClient::http(r.endpoint.clone(), Duration::from_millis(r.timeout_ms)),
        None => RefinerClient::fallback_only(),
    };
    let (prompts, fallbacks) = make_prompts(&ws.cfg, ws.seed("prompts"), &client)?;
    let store = ws.store()?;
    let n = store.insert_prompts(prompts)?;
    store.flush()?;
    Ok(Outcome::ok(json!({ "command": "gen-prompts", "seed": ws.seed, "prompts": n, "caption_fallbacks": fallbacks })))
}

fn gen_videos(ws: &Workspace) -> CliResult<Outcome> {
    let store = ws.store()?;
    let prompts = store.prompts();
    if prompts.is_empty() {
        return Err(CliError::Missing("the store has no prompts; run `gen-prompts` first".into()));
    }
    let (base, fit) = pretrain_base(&ws.cfg, &prompts, ws.seed("base"))?;
    base.save(ws.path(BASE_GENERATOR))?;
    let syn = sample_corpus(&base, &prompts, ws.cfg.data.videos_per_prompt, ws.seed("syn"));
    let real = reference_corpus(&ws.cfg, &prompts, ws.cfg.data.real_per_prompt, ws.seed("real"))?;
    let (n_syn, n_real) = (syn.len(), real.len());
    store.insert_videos(syn.into_iter().chain(real).collect())?;
    store.flush()?;
    Ok(Outcome::ok(json!({
        "command": "gen-videos",
        "seed": ws.seed,
        "synthesized": n_syn,
        "real": n_real,
        "base_fit_loss": fit.epoch_loss,
    })))
}

fn annotate_oracle(ws: &Workspace) -> CliResult<Outcome> {
    let oracle = ws.cfg.oracle()?;
    let store = ws.store()?;
    let (videos, prompts) = {
        let t = store.read();
        let annotated: std::collections::HashSet<&str> = t.annotations.values().map(|a| a.video_id.as_str()).collect();
        let todo: Vec<Video> = t
            .videos
            .values()
            .filter(|v| v.source == VideoSource::Synthesized && !annotated.contains(v.id.as_str()))
            .cloned()
            .collect();
        (todo, t.prompts.clone())
    };
    let mut ids = IdGen::seeded(ws.seed("annotate"));
    let mut records = Vec::with_capacity(videos.len() * 3);
    for v in &videos {
        let p = prompts
            .get(&v.prompt_id)
            .ok_or_else(|| CliError::Missing(format!("video `{}` names unknown prompt `{}`", v.id, v.prompt_id)))?;
        records.extend(oracle.annotate(v, p, &mut ids)?);
    }
    let n = store.insert_annotations(records)?;
    store.flush()?;
    Ok(Outcome::ok(json!({ "command": "annotate", "by": "oracle", "videos": videos.len(), "annotations": n })))
}

fn run_server(ws: &Workspace, port: Option<u16>) -> CliResult<Value> {
    let store = Arc::new(ws.store()?);
    let port = port.unwrap_or(ws.cfg.service.port);
    let state = Arc::new(AppState::new(store, ws.cfg.clone(), Arc::new(SystemTime)));
    let addr = std::net::SocketAddr::from(([127, 0, 0, 1], port));
    let runtime = tokio::runtime::Runtime::new().map_err(io_err("cannot start the async runtime"))?;
    runtime.block_on(serve(state, addr)).map_err(io_err(format!("server on {addr}")))?;
    Ok(json!({ "command": "serve", "port": port, "status": "stopped" }))
}

fn correct(ws: &Workspace, stage: StageArg, critic: CriticArg, adjudicator: Role, reviewer: Role) -> CliResult<Outcome> {
    let store = ws.store()?;
    let oracle = ws.cfg.oracle()?;
    let critics: Box<dyn CriticFactory> = match critic {
        CriticArg::Trained => Box::new(TrainedCritics { cfg: ws.cfg.clone(), with_reason: ws.cfg.critic.with_reason }),
        CriticArg::Oracle => Box::new(OracleCritics(oracle.clone())),
    };
    let adj: Box<dyn Adjudicator> = match adjudicator {
        Role::Oracle => Box::new(OracleAdjudicator(oracle.clone())),
        Role::Queue => Box::new(HumanQueue),
    };
    let rev: Box<dyn Reviewer> = match reviewer {
        Role::Oracle => Box::new(OracleReviewer { oracle, mode: ws.cfg.correction.review_mode }),
        Role::Queue => Box::new(HumanQueue),
    };
    let clock = SystemClock;
    let c = Correction::new(&store, ws.cfg.correction.clone(), &clock, ws.seed("correct"));
    let result = match stage {
        StageArg::All => c.run_all(critics.as_ref(), adj.as_ref(), rev.as_ref()),
        StageArg::Coarse => c.run_stage(Stage::Coarse, critics.as_ref(), adj.as_ref(), rev.as_ref()),
        StageArg::Refine => c.run_stage(Stage::RefineA, critics.as_ref(), adj.as_ref(), rev.as_ref()),
        StageArg::Final => c.run_stage(Stage::Final, critics.as_ref(), adj.as_ref(), rev.as_ref()),
    };
    // Progress is kept even when a stage stops early.
    store.flush()?;
    let (status, pending, code) = match result {
        Ok(_) => ("ok", 0, 0),
        Err(PipelineError::Blocked { pending, .. }) => ("blocked", pending, EXIT_BLOCKED),
        Err(e) => return Err(e.into()),
    };
    let state = c.state()?;
    let audit = conservation_audit(&store);
    let summary = json!({
        "command": "correct",
        "status": status,
        "pending": pending,
        "stage": state.stage.as_str(),
        "steps": state.reports,
        "audit": if state.stage == Stage::Done { json!(audit) } else { Value::Null },
    });
    Ok(Outcome { summary, code })
}

fn train(ws: &Workspace, no_reason: bool, large: bool) -> CliResult<Outcome> {
    let store = ws.store()?;
    let annotations = store.query_annotations(&AnnotationFilter::active());
    if annotations.is_empty() {
        return Err(CliError::Missing("no active annotations; run `annotate` first".into()));
    }
    let (videos, prompts) = lookup_maps(&store);
    let with_reason = ws.cfg.critic.with_reason && !no_reason;
    let t = train_critic(
        &ws.cfg,
        &annotations,
        &videos,
        &prompts,
        with_reason,
        large,
        ws.cfg.critic.holdout_fraction,
        ws.seed("critic"),
    )?;
    t.critic.save(ws.path(CRITIC))?;
    Ok(Outcome::ok(json!({
        "command": "train-critic",
        "with_reason": with_reason,
        "large": large,
        "annotations": annotations.len(),
        "train_videos": t.train_videos,
        "holdout_videos": t.holdout_videos,
        "epoch_loss": t.fit.epoch_loss,
        "holdout": t.holdout,
    })))
}

fn align(ws: &Workspace, method: Option<MethodArg>, lambda: Option<f64>, epochs: Option<usize>) -> CliResult<Outcome> {
    let store = ws.store()?;
    let base = ws.generator(BASE_GENERATOR, "gen-videos")?;
    let critic = ws.critic()?;
    let (_, prompts) = lookup_maps(&store);
    let pair = |source: VideoSource| -> CliResult<Vec<(Video, Prompt)>> {
        store
            .videos()
            .into_iter()
            .filter(|v| v.source == source)
            .map(|v| {
                let p = prompts
                    .get(&v.prompt_id)
                    .cloned()
                    .ok_or_else(|| CliError::Missing(format!("video `{}` names unknown prompt `{}`", v.id, v.prompt_id)))?;
                Ok((v, p))
            })
            .collect()
    };
    let (syn, real) = (pair(VideoSource::Synthesized)?, pair(VideoSource::Real)?);
    let eval_prompts = store.prompts();
    let corpus = AlignCorpus { syn: &syn, real: &real, eval_prompts: &eval_prompts, eval_per_prompt: 1 };
    let mut cfg = ws.cfg.align.clone();
    if let Some(m) = method {
        cfg.method = match m {
            MethodArg::Rwl => AlignMethod::Rwl,
            MethodArg::Rs => AlignMethod::Rs,
        };
    }
    if let Some(l) = lambda {
        cfg.lambda = l;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let (aligned, report) = align_run(&base, &critic, &corpus, &cfg, &ws.cfg.score_map, ws.seed("align"), |_| {})
        .map_err(|e| match e {
            PipelineError::Aborted { source, .. } => *source,
            other => other,
        })?;
    aligned.save(ws.path(ALIGNED_GENERATOR))?;
    let mut summary = json!({ "command": "align" });
    summary["report"] = json!(report);
    Ok(Outcome::ok(summary))
}

fn eval(ws: &Workspace, pairwise: bool) -> CliResult<Outcome> {
    let store = ws.store()?;
    let base = ws.generator(BASE_GENERATOR, "gen-videos")?;
    let aligned = ws.generator(ALIGNED_GENERATOR, "align")?;
    let oracle = ws.cfg.oracle()?;
    let prompts = store.prompts();
    let uplift = uplift_report(
        &base,
        &aligned,
        &prompts,
        &oracle,
        ws.cfg.eval.samples_per_prompt,
        &ws.cfg.score_map,
        ws.seed("uplift"),
    )?;
    let table = if pairwise {
        let n = ws.cfg.eval.pairwise_prompts.min(prompts.len());
        let pc = PairwiseConfig {
            raters: ws.cfg.eval.raters,
            threshold: ws.cfg.eval.majority_threshold,
            epsilon: ws.cfg.eval.tie_epsilon,
            samples: 1,
            seed: ws.seed("pairwise"),
        };
        let t = pairwise_eval(("aligned", &aligned), ("base", &base), &prompts[..n], &oracle, &ws.cfg.score_map, &pc)?;
        json!({
            "method_a": t.method_a,
            "method_b": t.method_b,
            "prompts": t.rows.len(),
            "a_wins_pct": t.a_wins_pct,
            "b_wins_pct": t.b_wins_pct,
            "ties_pct": t.ties_pct,
            "majority_pct": t.majority_pct,
        })
    } else {
        Value::Null
    };
    Ok(Outcome::ok(json!({
        "command": "eval",
        "seed": ws.seed,
        "uplift": uplift,
        "pairwise": table,
        "stats": hfalign_core::compute_stats(&store),
    })))
}

fn export(ws: &Workspace, kind: KindArg, out: Option<&Path>) -> CliResult<Value> {
    let store = ws.store()?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).map_err(io_err(format!("cannot create {}", p.display())))?),
        None => Box::new(std::io::stdout()),
    };
    let n = match kind {
        KindArg::Audit => {
            let log = store.audit_log();
            for e in &log {
                serde_json::to_writer(&mut sink, e).map_err(CoreError::from)?;
                sink.write_all(b"\n").map_err(io_err("cannot write the audit log"))?;
            }
            log.len()
        }
        KindArg::Prompts => export_jsonl(&store, RecordKind::Prompts, &mut sink)?,
        KindArg::Videos => export_jsonl(&store, RecordKind::Videos, &mut sink)?,
        KindArg::Annotations => export_jsonl(&store, RecordKind::Annotations, &mut sink)?,
    };
    sink.flush().map_err(io_err("cannot flush export"))?;
    if out.is_none() {
        // Records went to stdout; the summary goes to stderr instead.
        eprintln!("{}", json!({ "command": "export", "records": n }));
        std::process::exit(0);
    }
    Ok(json!({ "command": "export", "records": n }))
}

fn import(ws: &Workspace, kind: KindArg, input: &Path) -> CliResult<Outcome> {
    let kind = match kind {
        KindArg::Prompts => RecordKind::Prompts,
        KindArg::Videos => RecordKind::Videos,
        KindArg::Annotations => RecordKind::Annotations,
        KindArg::Audit => return Err(CliError::Missing("the audit log cannot be imported".into())),
    };
    let store = ws.store()?;
    let file = fs::File::open(input).map_err(io_err(format!("cannot open {}", input.display())))?;
    let n = import_jsonl(&store, kind, BufReader::new(file))?;
    store.flush()?;
    Ok(Outcome::ok(json!({ "command": "import", "kind": kind.as_str(), "records": n })))
}
