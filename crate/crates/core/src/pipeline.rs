//! Stage-level glue shared by the command line and the end-to-end tests:
//! partition preparation, model construction from a checkpoint, pre-training,
//! fine-tuning, scoring and evaluation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::cooc::{CoocIndex, Partition};
use crate::eval::{hit_at_k, mrr, t_pm60, EvalError};
use crate::model::{Batch, JointObjective, Model, ModelError, ScoreHead};
use crate::numkernel::{grad_check, Checkpoint, GradCheckReport, Graph, KernelError};
use crate::perturb::{corrupt, PerturbConfig, PerturbedWindow, Variant};
use crate::synthgen::{generate, GenConfig, GenError};
use crate::schema::{chunk_windows, temporal_split, write_events, write_substrate, Corpus, CorpusSplit, SchemaError};
use crate::train::{derive_rng, fit, parallel_map, FitReport, FitSettings, PartitionData, Task, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

/// The three partitions of a corpus with their windows and indexes.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: CorpusSplit,
    pub train: PartitionData,
    pub val: PartitionData,
    pub test: PartitionData,
}

pub fn partition(corpus: &Corpus, rows: &[usize], tag: Partition, t: usize) -> Result<PartitionData, SchemaError> {
    Ok(PartitionData {
        windows: chunk_windows(corpus, rows, t)?,
        index: CoocIndex::build(corpus, rows, tag),
    })
}

pub fn prepare(corpus: &Corpus, cfg: &RunConfig) -> Result<Prepared, SchemaError> {
    let split = temporal_split(corpus, cfg.data.train_frac, cfg.data.val_frac, cfg.data.val_placement)?;
    let t = cfg.backbone.window;
    Ok(Prepared {
        train: partition(corpus, &split.train, Partition::Train, t)?,
        val: partition(corpus, &split.val, Partition::Val, t)?,
        test: partition(corpus, &split.test, Partition::Test, t)?,
        split,
    })
}

/// Hex SHA-256 over the canonical substrate and (label-free) event files.
pub fn corpus_hash(corpus: &Corpus) -> String {
    let mut buf = Vec::new();
    write_substrate(&mut buf, &corpus.substrate).expect("writing to a Vec");
    write_events(&mut buf, &corpus.events, None).expect("writing to a Vec");
    hex::encode(Sha256::digest(&buf))
}

const INIT_STREAM: u64 = 0x1A17;
const ANOMALY_HEAD_STREAM: u64 = 0x1A18;
const NEXT_VISIT_HEAD_STREAM: u64 = 0x1A19;
const EVAL_STREAM: u64 = 0xE7A1;
const GRADCHECK_STREAM: u64 = 0x6C4E;

/// Freshly initialised pre-training model for `corpus`.
pub fn new_model(cfg: &RunConfig, corpus: &Corpus) -> Result<Model, ModelError> {
    let mut rng = derive_rng(cfg.seed, INIT_STREAM, 0);
    Model::new(&cfg.model(), &corpus.substrate, corpus.entities(), &mut rng)
}

/// What a checkpoint needs to be rebuilt against the same corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub entities: Vec<u32>,
    pub anomaly_head: bool,
    pub next_visit_heads: bool,
    pub bypass_cooc: bool,
}

pub fn checkpoint(model: &Model, cfg: &RunConfig, corpus: &Corpus, stage: &str) -> Checkpoint {
    let m = Manifest {
        stage: stage.into(),
        config_hash: cfg.hash(),
        corpus_hash: corpus_hash(corpus),
        seed: cfg.seed,
        config: cfg.canonical(),
        entities: model.net.entities.clone(),
        anomaly_head: model.net.anomaly.is_some(),
        next_visit_heads: model.net.poi.is_some(),
        bypass_cooc: model.net.backbone.cfg.bypass_cooc,
    };
    Checkpoint::from_registry(serde_json::to_string(&m).expect("manifest serializes"), &model.reg)
}

pub fn read_manifest(ckpt: &Checkpoint) -> Result<Manifest, PipelineError> {
    serde_json::from_str(&ckpt.manifest).map_err(|e| PipelineError::Manifest(e.to_string()))
}

/// Rebuilds the model described by a checkpoint and loads its values.
pub fn restore(ckpt: &Checkpoint, corpus: &Corpus) -> Result<(Model, Manifest), PipelineError> {
    let m = read_manifest(ckpt)?;
    if m.corpus_hash != corpus_hash(corpus) {
        return Err(PipelineError::Manifest("checkpoint was produced for a different corpus".into()));
    }
    let mut model = Model::new(&m.config.model(), &corpus.substrate, m.entities.clone(), &mut derive_rng(m.seed, INIT_STREAM, 0))?;
    if m.anomaly_head {
        model.add_anomaly_head(&mut derive_rng(m.seed, ANOMALY_HEAD_STREAM, 0))?;
    }
    if m.next_visit_heads {
        model.add_next_visit_heads(&mut derive_rng(m.seed, NEXT_VISIT_HEAD_STREAM, 0))?;
    }
    set_bypass(&mut model, m.bypass_cooc);
    let loaded = ckpt.load_into(&mut model.reg)?;
    if loaded != model.reg.len() {
        return Err(PipelineError::Manifest(format!(
            "checkpoint holds {loaded} of {} parameters",
            model.reg.len()
        )));
    }
    Ok((model, m))
}

pub fn set_bypass(model: &mut Model, bypass: bool) {
    model.net.cfg.backbone.bypass_cooc = bypass;
    model.net.backbone.cfg.bypass_cooc = bypass;
}

fn settings(cfg: &RunConfig, task: Task) -> FitSettings {
    let mut s = FitSettings {
        task,
        optim: cfg.optim.clone(),
        perturb: cfg.perturb.clone(),
        lr_factor: 1.0,
        min_overlap: cfg.cooc.min_overlap,
        seed: cfg.seed,
        threads: cfg.worker_threads(),
    };
    if task != Task::Pretrain {
        s.lr_factor = cfg.finetune.lr_factor;
        s.optim.max_epochs = cfg.finetune.max_epochs;
        s.optim.patience = cfg.finetune.patience;
    }
    s
}

pub fn pretrain(
    model: &mut Model,
    corpus: &Corpus,
    data: &Prepared,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&crate::train::EpochRecord),
) -> Result<FitReport, PipelineError> {
    Ok(fit(model, corpus, &data.train, &data.val, &settings(cfg, Task::Pretrain), on_epoch)?)
}

/// Attaches the task head(s) and fine-tunes the whole model. The anomaly
/// task draws on-the-fly perturbations of `variant`.
pub fn finetune(
    model: &mut Model,
    corpus: &Corpus,
    data: &Prepared,
    cfg: &RunConfig,
    task: Task,
    variant: Variant,
    on_epoch: impl FnMut(&crate::train::EpochRecord),
) -> Result<FitReport, PipelineError> {
    set_bypass(model, cfg.backbone.bypass_cooc);
    match task {
        Task::Anomaly if model.net.anomaly.is_none() => {
            model.add_anomaly_head(&mut derive_rng(cfg.seed, ANOMALY_HEAD_STREAM, 0))?
        }
        Task::NextVisit if model.net.poi.is_none() => {
            model.add_next_visit_heads(&mut derive_rng(cfg.seed, NEXT_VISIT_HEAD_STREAM, 0))?
        }
        Task::Pretrain => {
            return Err(PipelineError::Manifest("fine-tuning needs a downstream task".into()));
        }
        _ => {}
    }
    let mut s = settings(cfg, task);
    s.perturb.variant = variant;
    Ok(fit(model, corpus, &data.train, &data.val, &s, on_epoch)?)
}

/// One scored real slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotScore {
    /// Corpus row of the original event.
    pub row: usize,
    pub entity_id: u32,
    pub score: f64,
    /// Whether the operator changed this event.
    pub perturbed: bool,
}

fn batches(
    model: &Model,
    corpus: &Corpus,
    data: &PartitionData,
    windows: &[PerturbedWindow],
    cfg: &RunConfig,
) -> Result<Vec<Batch>, PipelineError> {
    let chunks: Vec<&[PerturbedWindow]> = windows.chunks(cfg.optim.batch_size).collect();
    parallel_map(&chunks, cfg.worker_threads(), |c| {
        model.net.assemble(corpus, Some(&data.index), c, cfg.cooc.min_overlap)
    })
    .into_iter()
    .map(|b| b.map_err(PipelineError::from))
    .collect()
}

/// Scores every real slot of `windows` with one head.
pub fn score(
    model: &Model,
    corpus: &Corpus,
    data: &PartitionData,
    windows: &[PerturbedWindow],
    head: ScoreHead,
    cfg: &RunConfig,
) -> Result<Vec<SlotScore>, PipelineError> {
    let bs = batches(model, corpus, data, windows, cfg)?;
    let scored = parallel_map(&bs, cfg.worker_threads(), |b| {
        let mut g = Graph::new();
        let p = g.bind(&model.reg);
        model.net.score(&mut g, &p, b, head)
    });
    let mut out = Vec::new();
    for (b, s) in bs.iter().zip(scored) {
        let s = s?;
        for i in 0..b.n() {
            if let Some(row) = b.rows[i] {
                out.push(SlotScore {
                    row,
                    entity_id: model.net.entities[b.entity[i]],
                    score: s[i],
                    perturbed: b.labels[i],
                });
            }
        }
    }
    Ok(out)
}

pub fn identity_windows(data: &PartitionData) -> Vec<PerturbedWindow> {
    data.windows.iter().map(PerturbedWindow::identity).collect()
}

/// Structural corruption of every window with a fixed evaluation stream.
pub fn corrupt_for_eval(corpus: &Corpus, data: &PartitionData, perturb: &PerturbConfig, seed: u64) -> Vec<PerturbedWindow> {
    data.windows
        .iter()
        .enumerate()
        .map(|(i, w)| corrupt(w, &corpus.substrate, perturb, &mut derive_rng(seed, EVAL_STREAM, i as u64)))
        .collect()
}

/// Fraction of real slots whose nearest prototype is their own entity's.
pub fn prototype_accuracy(
    model: &Model,
    corpus: &Corpus,
    data: &PartitionData,
    windows: &[PerturbedWindow],
    cfg: &RunConfig,
) -> Result<f64, PipelineError> {
    let bs = batches(model, corpus, data, windows, cfg)?;
    let preds = parallel_map(&bs, cfg.worker_threads(), |b| {
        let mut g = Graph::new();
        let p = g.bind(&model.reg);
        model.net.nearest_prototype(&mut g, &p, b)
    });
    let (mut hit, mut n) = (0usize, 0usize);
    for (b, pr) in bs.iter().zip(preds) {
        for (i, guess) in pr?.into_iter().enumerate() {
            if let Some(u) = guess {
                n += 1;
                hit += (u == b.entity[i]) as usize;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextVisitMetrics {
    pub queries: usize,
    pub hit_at_1: f64,
    pub hit_at_5: f64,
    pub hit_at_10: f64,
    pub mrr: f64,
    pub t_pm60: f64,
}

pub fn evaluate_next_visit(model: &Model, corpus: &Corpus, data: &PartitionData, cfg: &RunConfig) -> Result<NextVisitMetrics, PipelineError> {
    let windows = identity_windows(data);
    let bs = batches(model, corpus, data, &windows, cfg)?;
    let preds = parallel_map(&bs, cfg.worker_threads(), |b| {
        let mut g = Graph::new();
        let p = g.bind(&model.reg);
        model.net.next_visit_predict(&mut g, &p, b)
    });
    let (mut scores, mut targets, mut mixtures, mut deltas) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for p in preds {
        let p = p?;
        scores.extend(p.scores);
        targets.extend(p.targets);
        mixtures.extend(p.mixtures);
        deltas.extend(p.deltas);
    }
    Ok(NextVisitMetrics {
        queries: targets.len(),
        hit_at_1: hit_at_k(&scores, &targets, 1)?,
        hit_at_5: hit_at_k(&scores, &targets, 5)?,
        hit_at_10: hit_at_k(&scores, &targets, 10)?,
        mrr: mrr(&scores, &targets)?,
        t_pm60: t_pm60(&mixtures, &deltas)?,
    })
}

/// Central-difference check of the full joint pre-training loss, both heads
/// and the backbone, on eight corrupted windows of a generated corpus with
/// 20 entities and 16 contexts, using the architecture of `cfg`.
pub fn joint_gradcheck(cfg: &RunConfig, samples: usize, step: f64) -> Result<GradCheckReport, PipelineError> {
    let gen = GenConfig {
        n_entities: 20,
        n_contexts: 16,
        hotspot_count: 3,
        events_per_entity: 40,
        seed: cfg.seed,
        ..cfg.gen.clone()
    };
    let corpus = generate(&gen)?.corpus;
    let mut model = new_model(cfg, &corpus)?;
    let rows: Vec<usize> = (0..corpus.events.len()).collect();
    let index = CoocIndex::build(&corpus, &rows, Partition::Train);
    let windows = chunk_windows(&corpus, &rows, cfg.backbone.window)?;
    let pws: Vec<PerturbedWindow> = windows
        .iter()
        .step_by(3)
        .take(8)
        .enumerate()
        .map(|(i, w)| corrupt(w, &corpus.substrate, &cfg.perturb, &mut derive_rng(cfg.seed, GRADCHECK_STREAM, i as u64)))
        .collect();
    let batch = model.net.assemble(&corpus, Some(&index), &pws, cfg.cooc.min_overlap)?;
    let net = model.net.clone();
    let mut obj = JointObjective { net: &net, batch: &batch };
    let mut rng = derive_rng(cfg.seed, GRADCHECK_STREAM, u64::MAX);
    Ok(grad_check(&mut obj, &mut model.reg, samples, step, &mut rng)?)
}
