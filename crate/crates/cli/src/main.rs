use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use meses::config::{ConfigError, RunConfig};
use meses::cooc::{read_index, write_index, CoocIndex, IndexError};
use meses::eval::{average_precision, binary_metrics, pool_agent_max, rank_fuse, BinaryMetrics, EvalError};
use meses::model::{ModelError, ScoreHead};
use meses::numkernel::{read_checkpoint, write_checkpoint, Checkpoint, KernelError};
use meses::perturb::Variant;
use meses::pipeline::{self, Manifest, NextVisitMetrics, PipelineError, Prepared, SlotScore};
use meses::schema::{load_corpus, read_anomaly_labels, save_corpus, Corpus, SchemaError};
use meses::synthgen::{generate, generate_benchmark, GenError};
use meses::train::{EpochRecord, Task, TrainError};

const EVENTS_FILE: &str = "events.jsonl";
const SUBSTRATE_FILE: &str = "substrate.jsonl";
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_PASS_FRACTION: f64 = 0.99;

#[derive(Parser, Debug)]
#[command(name = "meses", version, about = "Multi-entity spatiotemporal event sequence pipeline")]
struct Cli {
    /// TOML file overlaid on the selected profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base profile: desk or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (substrate and events) to the output directory.
    Generate,
    /// Build the co-occurrence index of every partition.
    Index(DataArgs),
    /// Pre-train the backbone with the joint self-supervised objective.
    Pretrain(DataArgs),
    /// Attach a task head and fine-tune a pre-trained checkpoint.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Perturbation family used to synthesise anomaly-task positives.
        #[arg(long, value_enum, default_value = "structural")]
        perturb: PerturbArg,
        /// Skip the co-occurrence sub-layer in every block.
        #[arg(long)]
        bypass_cooc: bool,
    },
    /// Score every test-partition event with a checkpoint.
    Score {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "noise")]
        head: HeadArg,
        /// Sum of the global normalized ranks of the noise and prototype scores.
        #[arg(long, conflicts_with = "head")]
        fuse: bool,
    },
    /// Compute a metrics report from a score file or a checkpoint.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, required_unless_present = "checkpoint")]
        scores: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of the joint loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 500)]
        samples: usize,
    },
}

#[derive(clap::Args, Debug)]
struct DataArgs {
    /// Directory holding events.jsonl and substrate.jsonl (defaults to --out).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TaskArg {
    Anomaly,
    NextVisit,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PerturbArg {
    Structural,
    Swap,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum HeadArg {
    Noise,
    Prototype,
    Anomaly,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    NonFinite(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::NonFinite(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SchemaError> for CliError {
    fn from(e: SchemaError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::MissingHead(_) | ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Train(TrainError::NonFiniteLoss { .. }) => CliError::NonFinite(e.to_string()),
            PipelineError::Train(TrainError::Config(_)) | PipelineError::Gen(_) => CliError::Usage(e.to_string()),
            PipelineError::Train(TrainError::Model(m)) | PipelineError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Written next to every stage output.
#[derive(Serialize)]
struct StageManifest<'a> {
    stage: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    corpus_hash: Option<String>,
    outputs: Vec<String>,
    config: RunConfig,
}

/// First line of a score file.
#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct ScoreHeader {
    config_hash: String,
    corpus_hash: String,
    seed: u64,
    head: String,
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    event_key: usize,
    score: f64,
}

#[derive(Serialize)]
struct AnomalyReport {
    config_hash: String,
    corpus_hash: String,
    seed: u64,
    head: String,
    event: BinaryMetrics,
    agent: BinaryMetrics,
}

#[derive(Serialize)]
struct CheckpointReport {
    config_hash: String,
    corpus_hash: String,
    seed: u64,
    stage: String,
    noise_detection_ap: f64,
    corrupted_prevalence: f64,
    prototype_accuracy: f64,
    next_visit: Option<NextVisitMetrics>,
}

#[derive(Serialize)]
struct GradcheckReport {
    config_hash: String,
    seed: u64,
    checked: usize,
    skipped: usize,
    tolerance: f64,
    pass_fraction: f64,
    max_rel_error: f64,
    passed: bool,
}

struct Ctx {
    cli_config: Option<PathBuf>,
    profile: Option<String>,
    seed: Option<u64>,
    out: PathBuf,
}

impl Ctx {
    fn explicit(&self) -> bool {
        self.cli_config.is_some() || self.profile.is_some() || self.seed.is_some()
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.cli_config.as_deref(), self.profile.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.gen.seed = s;
        }
        Ok(cfg)
    }

    /// The flags' configuration when any were given, else the one embedded in
    /// the checkpoint.
    fn resolve_for(&self, m: &Manifest) -> Result<RunConfig, CliError> {
        if !self.explicit() {
            return Ok(m.config.clone());
        }
        let cfg = self.resolve()?;
        if cfg.model() != m.config.model() {
            log::warn!("model settings differ from the checkpoint's; the checkpoint's architecture is used");
        }
        Ok(cfg)
    }

    fn data_dir<'a>(&'a self, d: &'a DataArgs) -> &'a Path {
        d.data.as_deref().unwrap_or(&self.out)
    }

    fn write_manifest(
        &self,
        stage: &str,
        cfg: &RunConfig,
        corpus: Option<&Corpus>,
        outputs: &[&Path],
    ) -> Result<(), CliError> {
        let m = StageManifest {
            stage,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            corpus_hash: corpus.map(pipeline::corpus_hash),
            outputs: outputs
                .iter()
                .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()))
                .collect(),
            config: cfg.canonical(),
        };
        write_json(&self.out.join(format!("{stage}.manifest.json")), &m)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn load(dir: &Path) -> Result<Corpus, CliError> {
    Ok(load_corpus(&dir.join(EVENTS_FILE), &dir.join(SUBSTRATE_FILE))?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(read_checkpoint(&mut BufReader::new(File::open(path)?))?)
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

fn partition_names() -> [(&'static str, fn(&Prepared) -> &CoocIndex); 3] {
    [
        ("train", |p| &p.train.index),
        ("val", |p| &p.val.index),
        ("test", |p| &p.test.index),
    ]
}

/// Splits the corpus and checks any index files in `dir` against the
/// partitions they claim to cover.
fn prepare(corpus: &Corpus, cfg: &RunConfig, dir: &Path) -> Result<Prepared, CliError> {
    let data = pipeline::prepare(corpus, cfg)?;
    for (name, get) in partition_names() {
        let path = dir.join(format!("index.{name}.bin"));
        if !path.exists() {
            continue;
        }
        let stored = read_index(&mut BufReader::new(File::open(&path)?))?;
        if &stored != get(&data) {
            return Err(CliError::Data(format!(
                "{} does not match the {name} partition of this corpus and config",
                path.display()
            )));
        }
    }
    Ok(data)
}

fn epoch_logger(path: &Path) -> Result<impl FnMut(&EpochRecord), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    Ok(move |r: &EpochRecord| {
        let line = serde_json::to_string(r).expect("epoch record serializes");
        if writeln!(f, "{line}").and_then(|_| f.flush()).is_err() {
            log::warn!("could not append to the epoch log");
        }
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx {
        cli_config: cli.config,
        profile: cli.profile,
        seed: cli.seed,
        out: cli.out,
    };
    std::fs::create_dir_all(&ctx.out)?;
    match cli.command {
        Command::Generate => cmd_generate(&ctx),
        Command::Index(d) => cmd_index(&ctx, &d),
        Command::Pretrain(d) => cmd_pretrain(&ctx, &d),
        Command::Finetune {
            data,
            checkpoint,
            task,
            perturb,
            bypass_cooc,
        } => cmd_finetune(&ctx, &data, &checkpoint, task, perturb, bypass_cooc),
        Command::Score {
            data,
            checkpoint,
            head,
            fuse,
        } => cmd_score(&ctx, &data, &checkpoint, head, fuse),
        Command::Evaluate {
            data,
            scores,
            checkpoint,
        } => match scores {
            Some(s) => cmd_evaluate_scores(&ctx, &data, &s),
            None => cmd_evaluate_checkpoint(&ctx, &data, checkpoint.as_deref().expect("clap requires one")),
        },
        Command::Gradcheck { samples } => cmd_gradcheck(&ctx, samples),
    }
}

fn cmd_generate(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = ctx.resolve()?;
    let (corpus, labels) = if cfg.data.benchmark {
        let b = generate_benchmark(&cfg.gen, cfg.data.train_frac, cfg.data.val_frac)?;
        (b.synth.corpus, Some(b.labels))
    } else {
        (generate(&cfg.gen)?.corpus, None)
    };
    let (events, substrate) = (ctx.out.join(EVENTS_FILE), ctx.out.join(SUBSTRATE_FILE));
    save_corpus(&corpus, &events, &substrate, labels.as_deref())?;
    log::info!("{} events for {} entities", corpus.events.len(), corpus.entities().len());
    ctx.write_manifest("generate", &cfg, Some(&corpus), &[&events, &substrate])
}

fn cmd_index(ctx: &Ctx, d: &DataArgs) -> Result<(), CliError> {
    let cfg = ctx.resolve()?;
    let corpus = load(ctx.data_dir(d))?;
    let data = pipeline::prepare(&corpus, &cfg)?;
    let mut outputs = Vec::new();
    for (name, get) in partition_names() {
        let path = ctx.out.join(format!("index.{name}.bin"));
        let mut w = BufWriter::new(File::create(&path)?);
        write_index(&mut w, get(&data))?;
        w.flush()?;
        outputs.push(path);
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.write_manifest("index", &cfg, Some(&corpus), &refs)
}

fn cmd_pretrain(ctx: &Ctx, d: &DataArgs) -> Result<(), CliError> {
    let cfg = ctx.resolve()?;
    let dir = ctx.data_dir(d);
    let corpus = load(dir)?;
    let data = prepare(&corpus, &cfg, dir)?;
    let mut model = pipeline::new_model(&cfg, &corpus)?;
    let log_path = ctx.out.join("pretrain.epochs.jsonl");
    let report = pipeline::pretrain(&mut model, &corpus, &data, &cfg, epoch_logger(&log_path)?)?;
    log::info!(
        "best epoch {:?} of {} (stopped early: {})",
        report.best_epoch,
        report.epochs.len(),
        report.stopped_early
    );
    let ck_path = ctx.out.join("pretrain.ckpt");
    save_checkpoint(&ck_path, &pipeline::checkpoint(&model, &cfg, &corpus, "pretrain"))?;
    ctx.write_manifest("pretrain", &cfg, Some(&corpus), &[&ck_path, &log_path])
}

fn cmd_finetune(
    ctx: &Ctx,
    d: &DataArgs,
    ck: &Path,
    task: TaskArg,
    perturb: PerturbArg,
    bypass: bool,
) -> Result<(), CliError> {
    let dir = ctx.data_dir(d);
    let corpus = load(dir)?;
    let (mut model, m) = pipeline::restore(&load_checkpoint(ck)?, &corpus)?;
    let mut cfg = ctx.resolve_for(&m)?;
    cfg.backbone.bypass_cooc = bypass;
    let data = prepare(&corpus, &cfg, dir)?;
    let (task, name) = match task {
        TaskArg::Anomaly => (Task::Anomaly, "anomaly"),
        TaskArg::NextVisit => (Task::NextVisit, "next-visit"),
    };
    let variant = match perturb {
        PerturbArg::Structural => Variant::Structural,
        PerturbArg::Swap => Variant::Swap,
    };
    let stage = format!("finetune.{name}");
    let log_path = ctx.out.join(format!("{stage}.epochs.jsonl"));
    pipeline::finetune(&mut model, &corpus, &data, &cfg, task, variant, epoch_logger(&log_path)?)?;
    let ck_path = ctx.out.join(format!("{stage}.ckpt"));
    save_checkpoint(&ck_path, &pipeline::checkpoint(&model, &cfg, &corpus, &stage))?;
    ctx.write_manifest(&stage, &cfg, Some(&corpus), &[&ck_path, &log_path])
}

fn cmd_score(ctx: &Ctx, d: &DataArgs, ck: &Path, head: HeadArg, fuse: bool) -> Result<(), CliError> {
    let dir = ctx.data_dir(d);
    let corpus = load(dir)?;
    let (model, m) = pipeline::restore(&load_checkpoint(ck)?, &corpus)?;
    let cfg = ctx.resolve_for(&m)?;
    let data = prepare(&corpus, &cfg, dir)?;
    let windows = pipeline::identity_windows(&data.test);
    let run = |h| pipeline::score(&model, &corpus, &data.test, &windows, h, &cfg);
    let (label, mut slots): (&str, Vec<SlotScore>) = if fuse {
        let noise = run(ScoreHead::Noise)?;
        let proto = run(ScoreHead::Prototype)?;
        let a: Vec<f64> = noise.iter().map(|s| s.score).collect();
        let b: Vec<f64> = proto.iter().map(|s| s.score).collect();
        let fused = rank_fuse(&a, &b)?;
        let slots = noise
            .into_iter()
            .zip(fused)
            .map(|(s, f)| SlotScore { score: f, ..s })
            .collect();
        ("fused", slots)
    } else {
        match head {
            HeadArg::Noise => ("noise", run(ScoreHead::Noise)?),
            HeadArg::Prototype => ("prototype", run(ScoreHead::Prototype)?),
            HeadArg::Anomaly => ("anomaly", run(ScoreHead::Anomaly)?),
        }
    };
    if let Some(bad) = slots.iter().find(|s| !s.score.is_finite()) {
        return Err(CliError::NonFinite(format!("non-finite score for event {}", bad.row)));
    }
    slots.sort_by_key(|s| s.row);
    let path = ctx.out.join("scores.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    let header = ScoreHeader {
        config_hash: cfg.hash(),
        corpus_hash: pipeline::corpus_hash(&corpus),
        seed: cfg.seed,
        head: label.into(),
    };
    writeln!(w, "{}", json_line(&header))?;
    for s in &slots {
        writeln!(w, "{}", json_line(&ScoreLine { event_key: s.row, score: s.score }))?;
    }
    w.flush()?;
    ctx.write_manifest("score", &cfg, Some(&corpus), &[&path])
}

/// Pretty-prints a report on stdout; a closed pipe is not an error.
fn print_report(v: &impl Serialize) {
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn json_line(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("record serializes")
}

fn read_scores(path: &Path) -> Result<(ScoreHeader, Vec<ScoreLine>), CliError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let bad = |n: usize, e: serde_json::Error| CliError::Data(format!("{}:{n}: {e}", path.display()));
    let first = lines
        .next()
        .transpose()?
        .ok_or_else(|| CliError::Data(format!("{} is empty", path.display())))?;
    let header: ScoreHeader = serde_json::from_str(&first).map_err(|e| bad(1, e))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, e))?);
    }
    Ok((header, out))
}

fn cmd_evaluate_scores(ctx: &Ctx, d: &DataArgs, scores: &Path) -> Result<(), CliError> {
    let dir = ctx.data_dir(d);
    let corpus = load(dir)?;
    let (header, lines) = read_scores(scores)?;
    let hash = pipeline::corpus_hash(&corpus);
    if header.corpus_hash != hash {
        return Err(CliError::Data(format!(
            "{} was produced for corpus {} but {} holds corpus {hash}",
            scores.display(),
            header.corpus_hash,
            dir.display()
        )));
    }
    let labels = read_anomaly_labels(&dir.join(EVENTS_FILE), &corpus.substrate)?;
    let (mut s, mut l, mut g) = (Vec::new(), Vec::new(), Vec::new());
    for line in &lines {
        let ev = corpus
            .events
            .get(line.event_key)
            .ok_or_else(|| CliError::Data(format!("event_key {} out of range", line.event_key)))?;
        s.push(line.score);
        l.push(labels[line.event_key]);
        g.push(ev.entity_id);
    }
    let (_, agent_scores, agent_labels) = pool_agent_max(&s, &l, &g)?;
    let report = AnomalyReport {
        config_hash: header.config_hash,
        corpus_hash: hash,
        seed: header.seed,
        head: header.head,
        event: binary_metrics(&s, &l)?,
        agent: binary_metrics(&agent_scores, &agent_labels)?,
    };
    let path = ctx.out.join("metrics.json");
    write_json(&path, &report)?;
    print_report(&report);
    Ok(())
}

fn cmd_evaluate_checkpoint(ctx: &Ctx, d: &DataArgs, ck: &Path) -> Result<(), CliError> {
    let dir = ctx.data_dir(d);
    let corpus = load(dir)?;
    let (model, m) = pipeline::restore(&load_checkpoint(ck)?, &corpus)?;
    let cfg = ctx.resolve_for(&m)?;
    let data = prepare(&corpus, &cfg, dir)?;
    let corrupted = pipeline::corrupt_for_eval(&corpus, &data.test, &cfg.perturb, cfg.seed);
    let noise = pipeline::score(&model, &corpus, &data.test, &corrupted, ScoreHead::Noise, &cfg)?;
    let s: Vec<f64> = noise.iter().map(|x| x.score).collect();
    let l: Vec<bool> = noise.iter().map(|x| x.perturbed).collect();
    let identity = pipeline::identity_windows(&data.test);
    let report = CheckpointReport {
        config_hash: cfg.hash(),
        corpus_hash: m.corpus_hash.clone(),
        seed: cfg.seed,
        stage: m.stage.clone(),
        noise_detection_ap: average_precision(&s, &l)?,
        corrupted_prevalence: l.iter().filter(|&&b| b).count() as f64 / l.len().max(1) as f64,
        prototype_accuracy: pipeline::prototype_accuracy(&model, &corpus, &data.test, &identity, &cfg)?,
        next_visit: if m.next_visit_heads {
            Some(pipeline::evaluate_next_visit(&model, &corpus, &data.test, &cfg)?)
        } else {
            None
        },
    };
    let path = ctx.out.join("metrics.json");
    write_json(&path, &report)?;
    print_report(&report);
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, samples: usize) -> Result<(), CliError> {
    let cfg = ctx.resolve()?;
    let rep = pipeline::joint_gradcheck(&cfg, samples, 1e-5)?;
    let pass_fraction = rep.pass_fraction(GRADCHECK_TOLERANCE);
    let report = GradcheckReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checked: rep.checked.len(),
        skipped: rep.skipped,
        tolerance: GRADCHECK_TOLERANCE,
        pass_fraction,
        max_rel_error: rep.max_rel_error(),
        passed: pass_fraction >= GRADCHECK_PASS_FRACTION,
    };
    write_json(&ctx.out.join("gradcheck.json"), &report)?;
    print_report(&report);
    if !report.passed {
        return Err(CliError::NonFinite(format!(
            "only {:.2}% of coordinates within {GRADCHECK_TOLERANCE:e}",
            100.0 * pass_fraction
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.code())
        }
    }
}
