//! Optimisation: cosine schedule, AdamW with global-norm clipping, EMA early
//! stopping, and the epoch loop shared by pre-training and fine-tuning.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cooc::CoocIndex;
use crate::model::{Batch, Model, ModelError, Network};
use crate::numkernel::{Graph, ParamRegistry, Tensor, Var};
use crate::perturb::{corrupt, swap_corrupt, PerturbConfig, PerturbedWindow, Variant};
use crate::schema::{Corpus, EventRecord, EventWindow};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("step {step} outside the schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("no training windows")]
    NoData,
    #[error("invalid optimiser settings: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub ema_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-4,
            eta_min: 1e-6,
            weight_decay: 1e-3,
            clip_norm: 1.0,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
            ema_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let pos = [self.peak_lr, self.eta_min, self.clip_norm, self.ema_factor];
        if pos.iter().any(|&x| !(x > 0.0)) || self.weight_decay < 0.0 || self.ema_factor > 1.0 {
            return Err(TrainError::Config("rates and norms must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `eta_min + (peak - eta_min) (1 + cos(pi step / total)) / 2`, written as a
/// convex combination so both endpoints are exact.
pub fn cosine_lr(step: usize, total: usize, peak: f64, eta_min: f64) -> Result<f64, TrainError> {
    if step > total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    if total == 0 {
        return Ok(peak);
    }
    let w = (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0;
    Ok(peak * w + eta_min * (1.0 - w))
}

/// Scales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(reg: &mut ParamRegistry, max_norm: f64) -> f64 {
    let norm = reg.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for id in reg.ids().collect::<Vec<_>>() {
            reg.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(reg: &ParamRegistry) -> Self {
        let zeros = |id| Tensor::zeros(reg.value(id).shape());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: reg.ids().map(zeros).collect(),
            v: reg.ids().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One decoupled-weight-decay Adam update from the gradients in `reg`.
    /// Returns `false`, leaving everything untouched, if a gradient is not
    /// finite.
    pub fn step(&mut self, reg: &mut ParamRegistry, lr: f64, weight_decay: f64) -> bool {
        if !reg.grad_norm().is_finite() {
            log::warn!("non-finite gradient; optimiser step skipped");
            return false;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = reg.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = reg.grad(id).data().to_vec();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let theta = reg.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] -= lr * weight_decay * theta[i] + lr * mh / (vh.sqrt() + self.eps);
            }
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Early stopping on an exponential moving average of validation losses.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    pub factor: f64,
    pub patience: usize,
    pub ema: Option<f64>,
    pub best: f64,
    pub best_epoch: usize,
    pub since_best: usize,
    epochs: usize,
}

impl EarlyStop {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            ema: None,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            epochs: 0,
        }
    }

    /// Feeds one epoch's loss; the first loss seeds the average.
    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epochs += 1;
        let ema = match self.ema {
            None => loss,
            Some(e) => self.factor * loss + (1.0 - self.factor) * e,
        };
        self.ema = Some(ema);
        let improved = ema < self.best;
        if improved {
            self.best = ema;
            self.best_epoch = self.epochs;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pretrain,
    Anomaly,
    NextVisit,
}

/// Windows and indexes for one partition.
#[derive(Clone, Debug)]
pub struct PartitionData {
    pub windows: Vec<EventWindow>,
    pub index: CoocIndex,
}

/// Donor events and per-entity exclusion sets for the swap operator.
#[derive(Clone, Debug, Default)]
pub struct SwapPool {
    pub donors: Vec<EventRecord>,
    pub excluded: HashMap<u32, HashSet<u32>>,
}

impl SwapPool {
    pub fn from_rows(corpus: &Corpus, rows: &[usize]) -> Self {
        let mut excluded: HashMap<u32, HashSet<u32>> = HashMap::new();
        let donors: Vec<EventRecord> = rows.iter().map(|&r| corpus.events[r]).collect();
        for e in &donors {
            excluded.entry(e.entity_id).or_default().insert(e.context_id);
        }
        Self { donors, excluded }
    }
}

#[derive(Clone, Debug)]
pub struct FitSettings {
    pub task: Task,
    pub optim: OptimConfig,
    pub perturb: PerturbConfig,
    /// Learning-rate multiplier (0.5 for fine-tuning).
    pub lr_factor: f64,
    pub min_overlap: f64,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: Task,
    pub epoch: usize,
    pub steps: usize,
    pub skipped_steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_noise: Option<f64>,
    pub train_proto: Option<f64>,
    pub val_loss: f64,
    pub ema: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

const VAL_STREAM: u64 = 0x5641_4C00;

/// A ChaCha stream keyed by the run seed and a tuple of counters.
pub fn derive_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng
}

/// Prepares the input windows of one batch for `task`. Each window uses its
/// own stream so results do not depend on how work is split across threads.
fn prepare_window(
    task: Task,
    corpus: &Corpus,
    w: &EventWindow,
    settings: &FitSettings,
    swap: &SwapPool,
    rng: &mut ChaCha8Rng,
) -> PerturbedWindow {
    let empty = HashSet::new();
    match (task, settings.perturb.variant) {
        (Task::NextVisit, _) => PerturbedWindow::identity(w),
        (Task::Anomaly, Variant::Swap) => swap_corrupt(
            w,
            &swap.donors,
            swap.excluded.get(&w.entity_id).unwrap_or(&empty),
            settings.perturb.swap_prob,
            rng,
        ),
        _ => corrupt(w, &corpus.substrate, &settings.perturb, rng),
    }
}

/// Assembles batches for the given window order, in parallel across up to
/// `threads` workers. `stream` separates epochs and the validation pass.
#[allow(clippy::too_many_arguments)]
pub fn prepare_batches(
    model: &Model,
    corpus: &Corpus,
    data: &PartitionData,
    order: &[usize],
    settings: &FitSettings,
    swap: &SwapPool,
    stream: u64,
) -> Result<Vec<Batch>, TrainError> {
    let bs = settings.optim.batch_size;
    let chunks: Vec<&[usize]> = order.chunks(bs).collect();
    let build = |chunk: &[usize]| -> Result<Batch, TrainError> {
        let pws: Vec<PerturbedWindow> = chunk
            .iter()
            .map(|&i| {
                let mut rng = derive_rng(settings.seed, stream, i as u64);
                prepare_window(settings.task, corpus, &data.windows[i], settings, swap, &mut rng)
            })
            .collect();
        Ok(model.net.assemble(corpus, Some(&data.index), &pws, settings.min_overlap)?)
    };
    parallel_map(&chunks, settings.threads, |c| build(c)).into_iter().collect()
}

/// Maps `f` over `items` with up to `threads` scoped workers, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let per = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

struct StepLoss {
    total: f64,
    noise: Option<f64>,
    proto: Option<f64>,
}

/// Builds the task loss on a batch. Returns `None` when the batch has
/// nothing to learn from.
fn batch_loss(
    net: &Network,
    reg: &ParamRegistry,
    batch: &Batch,
    task: Task,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Graph, Var, StepLoss)>, TrainError> {
    let mut g = Graph::new();
    let p = g.bind(reg);
    let (loss, noise, proto) = match task {
        Task::Pretrain => {
            let l = net.pretrain_losses(&mut g, &p, batch)?;
            (l.total, Some(l.noise), l.proto)
        }
        Task::Anomaly => (net.anomaly_loss(&mut g, &p, batch)?, None, None),
        Task::NextVisit => match net.next_visit_loss(&mut g, &p, batch, rng)? {
            Some(l) => (l, None, None),
            None => return Ok(None),
        },
    };
    let scalar = |v| g.value(v).item().expect("scalar loss");
    let out = StepLoss {
        total: scalar(loss),
        noise: noise.map(scalar),
        proto: proto.map(scalar),
    };
    Ok(Some((g, loss, out)))
}

/// Mean task loss over `data` with a fixed corruption stream.
pub fn evaluate_loss(
    model: &Model,
    corpus: &Corpus,
    data: &PartitionData,
    settings: &FitSettings,
    swap: &SwapPool,
) -> Result<f64, TrainError> {
    let order: Vec<usize> = (0..data.windows.len()).collect();
    let batches = prepare_batches(model, corpus, data, &order, settings, swap, VAL_STREAM)?;
    let losses = parallel_map(&batches, settings.threads, |b| {
        let mut rng = derive_rng(settings.seed, VAL_STREAM, b.rows.iter().flatten().next().copied().unwrap_or(0) as u64);
        batch_loss(&model.net, &model.reg, b, settings.task, &mut rng).map(|o| o.map(|(_, _, l)| (l.total, b.b)))
    });
    let (mut sum, mut n) = (0.0, 0usize);
    for l in losses {
        if let Some((v, w)) = l? {
            sum += v * w as f64;
            n += w;
        }
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Trains `model` on `train` for up to `max_epochs`, early-stopping on the
/// EMA of the `val` loss (or the train loss when `val` is empty), and
/// restores the parameters of the best epoch. `on_epoch` sees every record.
pub fn fit(
    model: &mut Model,
    corpus: &Corpus,
    train: &PartitionData,
    val: &PartitionData,
    settings: &FitSettings,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitReport, TrainError> {
    let oc = &settings.optim;
    oc.validate()?;
    let n = train.windows.len();
    if n == 0 {
        return Err(TrainError::NoData);
    }
    let swap = match (settings.task, settings.perturb.variant) {
        (Task::Anomaly, Variant::Swap) => {
            let rows: Vec<usize> = train.windows.iter().flat_map(|w| w.rows.iter().copied()).collect();
            SwapPool::from_rows(corpus, &rows)
        }
        _ => SwapPool::default(),
    };
    let steps_per_epoch = n.div_ceil(oc.batch_size);
    let total = oc.max_epochs * steps_per_epoch;
    let peak = oc.peak_lr * settings.lr_factor;
    let eta_min = oc.eta_min * settings.lr_factor;
    let mut opt = AdamW::new(&model.reg);
    let mut stopper = EarlyStop::new(oc.ema_factor, oc.patience);
    let mut best: Option<ParamRegistry> = None;
    let mut report = FitReport {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut step = 0usize;
    for epoch in 1..=oc.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(settings.seed, epoch as u64, u64::MAX));
        let batches = prepare_batches(model, corpus, train, &order, settings, &swap, epoch as u64)?;
        let (mut sum, mut nsum, mut psum, mut pcount, mut count) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let mut skipped = 0;
        let mut lr = peak;
        for (k, batch) in batches.iter().enumerate() {
            lr = cosine_lr(step, total, peak, eta_min)?;
            model.reg.zero_grad();
            let mut rng = derive_rng(settings.seed, epoch as u64, (1 << 40) + k as u64);
            let Some((g, loss, out)) = batch_loss(&model.net, &model.reg, batch, settings.task, &mut rng)? else {
                step += 1;
                continue;
            };
            if !out.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            g.backward_into(loss, &mut model.reg).map_err(ModelError::from)?;
            clip_grad_norm(&mut model.reg, oc.clip_norm);
            if !opt.step(&mut model.reg, lr, oc.weight_decay) {
                skipped += 1;
            }
            step += 1;
            sum += out.total;
            nsum += out.noise.unwrap_or(0.0);
            if let Some(pv) = out.proto {
                psum += pv;
                pcount += 1;
            }
            count += 1;
        }
        let train_loss = sum / count.max(1) as f64;
        let val_loss = if val.windows.is_empty() {
            train_loss
        } else {
            evaluate_loss(model, corpus, val, settings, &swap)?
        };
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, step });
        }
        let decision = stopper.observe(val_loss);
        if decision.improved {
            best = Some(model.reg.clone());
            report.best_epoch = epoch;
        }
        let rec = EpochRecord {
            task: settings.task,
            epoch,
            steps: count,
            skipped_steps: skipped,
            lr,
            train_loss,
            train_noise: (settings.task == Task::Pretrain).then(|| nsum / count.max(1) as f64),
            train_proto: (pcount > 0).then(|| psum / pcount as f64),
            val_loss,
            ema: stopper.ema.unwrap_or(val_loss),
            improved: decision.improved,
        };
        log::info!(
            "{:?} epoch {epoch}: train {:.5} val {:.5} ema {:.5}",
            settings.task,
            rec.train_loss,
            rec.val_loss,
            rec.ema
        );
        on_epoch(&rec);
        report.epochs.push(rec);
        if decision.stop {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(b) = best {
        model.reg = b;
    }
    model.reg.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 1000, 2e-4, 1e-6).unwrap(), 2e-4);
        assert_eq!(cosine_lr(1000, 1000, 2e-4, 1e-6).unwrap(), 1e-6);
        let mid = cosine_lr(500, 1000, 2e-4, 1e-6).unwrap();
        assert!((mid - (2e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(1001, 1000, 2e-4, 1e-6).is_err());
        let lrs: Vec<f64> = (0..=10).map(|s| cosine_lr(s, 10, 1.0, 0.1).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    fn one_param(v: Vec<f64>) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        reg.register("w", Tensor::from_vec(v)).unwrap();
        reg
    }

    #[test]
    fn adamw_first_step_and_decay() {
        let mut reg = one_param(vec![0.5, -2.0]);
        let id = reg.id("w").unwrap();
        let mut opt = AdamW::new(&reg);
        opt.step(&mut reg, 0.1, 0.0);
        assert_eq!(reg.value(id).data(), &[0.5, -2.0]);

        reg.grad_mut(id).data_mut().copy_from_slice(&[1.0, 1.0]);
        let mut opt = AdamW::new(&reg);
        opt.step(&mut reg, 0.1, 0.0);
        // m_hat = v_hat = 1 after bias correction
        let expect = 0.1 / (1.0 + 1e-8);
        assert!((0.5 - reg.value(id).data()[0] - expect).abs() < 1e-15);

        let mut reg = one_param(vec![3.0]);
        let mut opt = AdamW::new(&reg);
        opt.step(&mut reg, 0.1, 0.01);
        assert!((reg.value(reg.id("w").unwrap()).data()[0] - 3.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut reg = one_param(vec![1.0]);
        let id = reg.id("w").unwrap();
        reg.grad_mut(id).data_mut()[0] = f64::NAN;
        let mut opt = AdamW::new(&reg);
        assert!(!opt.step(&mut reg, 0.1, 0.1));
        assert_eq!(reg.value(id).data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut reg = ParamRegistry::new();
        let a = reg.register("a", Tensor::from_vec(vec![0.0; 2])).unwrap();
        let b = reg.register("b", Tensor::from_vec(vec![0.0])).unwrap();
        reg.grad_mut(a).data_mut().copy_from_slice(&[3.0, 4.0]);
        reg.grad_mut(b).data_mut()[0] = 12.0;
        assert_eq!(clip_grad_norm(&mut reg, 1.0), 13.0);
        assert!(reg.grad_norm() <= 1.0 + 1e-9);
        assert!((reg.grad(b).data()[0] - 12.0 / 13.0).abs() < 1e-15);
    }

    #[test]
    fn early_stopping_rules() {
        let mut s = EarlyStop::new(0.1, 3);
        s.observe(1.0);
        s.observe(0.5);
        assert!((s.ema.unwrap() - 0.95).abs() < 1e-15);

        let mut s = EarlyStop::new(0.1, 3);
        let stopped_at = (1..=10).find(|_| s.observe(1.0).stop);
        assert_eq!(stopped_at, Some(4));

        let mut s = EarlyStop::new(0.1, 3);
        assert!((0..100).all(|i| !s.observe(10.0 - i as f64 * 0.05).stop));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let xs: Vec<usize> = (0..37).collect();
        let one = parallel_map(&xs, 1, |x| x * x);
        let four = parallel_map(&xs, 4, |x| x * x);
        assert_eq!(one, four);
    }
}
