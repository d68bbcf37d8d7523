//! Pre-training heads and losses plus the fine-tune heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkernel::{Bound, Graph, KernelError, ParamId, ParamRegistry, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("no valid events in the batch")]
    EmptyBatch,
    #[error("need at least two contexts for ranking, got {0}")]
    TooFewContexts(usize),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the prototype loss.
    pub gamma: f64,
    /// InfoNCE temperature.
    pub beta: f64,
    /// Projector hidden width; zero means `d`.
    pub h_proj: usize,
    /// Drop the prototype loss entirely.
    pub disable_prototype_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            beta: 0.07,
            h_proj: 0,
            disable_prototype_loss: false,
        }
    }
}

/// A dense layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn register(reg: &mut ParamRegistry, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self, KernelError> {
        Ok(Self {
            w: reg.register_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?,
            b: reg.register_const(&format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, KernelError> {
        g.linear(x, p.get(self.w), Some(p.get(self.b)))
    }
}

/// ReLU MLP over a list of dense layers; no activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn register(reg: &mut ParamRegistry, name: &str, widths: &[usize], rng: &mut impl Rng) -> Result<Self, KernelError> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::register(reg, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Result<Var, KernelError> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.apply(g, p, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Output width of the last layer.
    pub fn last(&self) -> Dense {
        *self.layers.last().expect("mlp has layers")
    }
}

/// Maps `[n, in]` to `[n]` logits through `head`.
pub fn logits_of(g: &mut Graph, p: &Bound, head: &Mlp, h: Var) -> Result<Var, KernelError> {
    let z = head.apply(g, p, h)?;
    let n = g.shape(z)[0];
    g.reshape(z, &[n])
}

/// Mean over `valid` entries of `softplus(z) - y z`.
pub fn masked_bce(g: &mut Graph, logits: Var, y: &[bool], valid: &[bool]) -> Result<Var, ObjectiveError> {
    let n = g.shape(logits)[0];
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let yv: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let sp = g.softplus(logits);
    let yz = g.mul_const(logits, &yv, &[n])?;
    let per = g.sub(sp, yz)?;
    let w: Vec<f64> = valid.iter().map(|&v| if v { 1.0 / count as f64 } else { 0.0 }).collect();
    let weighted = g.mul_const(per, &w, &[n])?;
    Ok(g.sum(weighted))
}

/// Two-layer projector onto the prototype space, unit-normalized.
#[derive(Clone, Debug)]
pub struct Projector {
    pub mlp: Mlp,
}

impl Projector {
    pub fn register(reg: &mut ParamRegistry, d: usize, h_proj: usize, d_f: usize, rng: &mut impl Rng) -> Result<Self, KernelError> {
        Ok(Self {
            mlp: Mlp::register(reg, "proj", &[d, h_proj, d_f], rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var, KernelError> {
        let z = self.mlp.apply(g, p, h)?;
        g.l2_normalize(z)
    }
}

/// InfoNCE of unit anchors `[na, k]` against unit prototypes `[nb, k]`;
/// `targets[i]` is the row of anchor `i`'s own prototype.
pub fn info_nce(g: &mut Graph, anchors: Var, protos: Var, targets: &[usize], beta: f64) -> Result<Var, KernelError> {
    let s = g.matmul_t(anchors, protos)?;
    let s = g.scale(s, 1.0 / beta);
    let ls = g.log_softmax(s, None)?;
    let picked = g.pick(ls, targets)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Prototype contrastive loss over the unperturbed valid rows of `h`.
/// `entity[i]` is the dense entity index of row `i`; prototypes of entities
/// with at least one anchor form the candidate set. Returns `None` when there
/// are no anchors.
pub fn prototype_loss(
    g: &mut Graph,
    p: &Bound,
    projector: &Projector,
    h: Var,
    y: &[bool],
    valid: &[bool],
    entity: &[usize],
    protos: Var,
    beta: f64,
) -> Result<Option<Var>, KernelError> {
    let anchors: Vec<usize> = (0..valid.len()).filter(|&i| valid[i] && !y[i]).collect();
    if anchors.is_empty() {
        log::warn!("prototype loss skipped: no unperturbed events in batch");
        return Ok(None);
    }
    let mut members: Vec<usize> = anchors.iter().map(|&i| entity[i]).collect();
    members.sort_unstable();
    members.dedup();
    let targets: Vec<usize> = anchors
        .iter()
        .map(|&i| members.binary_search(&entity[i]).expect("member present"))
        .collect();
    let rows = g.gather(h, &anchors)?;
    let a = projector.apply(g, p, rows)?;
    let pr = g.gather(protos, &members)?;
    let pr = g.l2_normalize(pr)?;
    Ok(Some(info_nce(g, a, pr, &targets, beta)?))
}

/// `noise + gamma * proto`.
pub fn joint_loss(g: &mut Graph, noise: Var, proto: Option<Var>, gamma: f64) -> Var {
    match proto {
        Some(pv) if gamma != 0.0 => {
            let s = g.scale(pv, gamma);
            g.add(noise, s).expect("scalar losses")
        }
        _ => noise,
    }
}

// ----------------------------------------------------------------------
// fine-tune heads

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Uniform negatives per query in the sampled softmax.
    pub n_neg: usize,
    pub poi_temperature: f64,
    /// Mixture components of the time head.
    pub k: usize,
    /// Hours per model unit of time delta.
    pub time_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            n_neg: 256,
            poi_temperature: 0.1,
            k: 3,
            time_scale: 24.0,
        }
    }
}

pub const SIGMA_FLOOR_HOURS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct PoiHead {
    pub query: Mlp,
    pub table: ParamId,
    pub n_contexts: usize,
}

impl PoiHead {
    pub fn register(reg: &mut ParamRegistry, d: usize, n_contexts: usize, rng: &mut impl Rng) -> Result<Self, KernelError> {
        Ok(Self {
            query: Mlp::register(reg, "poi.query", &[d, d, d], rng)?,
            table: reg.register_uniform("poi.table", &[n_contexts, d], d, rng)?,
            n_contexts,
        })
    }

    pub fn queries(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var, KernelError> {
        self.query.apply(g, p, h)
    }

    /// Full-catalogue scores `[n, n_contexts]`.
    pub fn scores(&self, g: &mut Graph, p: &Bound, q: Var) -> Result<Var, KernelError> {
        g.matmul_t(q, p.get(self.table))
    }
}

/// Candidate lists for the sampled softmax: target first, then uniform
/// negatives (one resample when a draw hits the target, dropped if it hits
/// again), then the other distinct in-batch targets.
pub fn sample_candidates(targets: &[usize], n_contexts: usize, n_neg: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut batch: Vec<usize> = targets.to_vec();
    batch.sort_unstable();
    batch.dedup();
    targets
        .iter()
        .map(|&t| {
            let mut c = vec![t];
            for _ in 0..n_neg {
                let mut x = rng.random_range(0..n_contexts);
                if x == t {
                    x = rng.random_range(0..n_contexts);
                }
                if x != t {
                    c.push(x);
                }
            }
            c.extend(batch.iter().copied().filter(|&b| b != t));
            c
        })
        .collect()
}

/// Mean cross-entropy of the first candidate against the rest, on
/// `q . e / temperature`.
pub fn sampled_softmax(
    g: &mut Graph,
    q: Var,
    table: Var,
    candidates: &[Vec<usize>],
    temperature: f64,
) -> Result<Var, KernelError> {
    let n = candidates.len();
    let d = g.shape(q)[1];
    let k = candidates.iter().map(Vec::len).max().unwrap_or(1);
    let mut idx = Vec::with_capacity(n * k);
    let mut mask = Vec::with_capacity(n * k);
    for c in candidates {
        for j in 0..k {
            idx.push(c.get(j).copied().unwrap_or(c[0]));
            mask.push(j >= c.len());
        }
    }
    let e = g.gather(table, &idx)?;
    let e = g.reshape(e, &[n, k, d])?;
    let q3 = g.reshape(q, &[n, 1, d])?;
    let s = g.matmul_t(q3, e)?;
    let s = g.reshape(s, &[n, k])?;
    let s = g.scale(s, 1.0 / temperature);
    let ls = g.log_softmax(s, Some(&mask))?;
    let picked = g.pick(ls, &vec![0; n])?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

#[derive(Clone, Debug)]
pub struct TimeHead {
    pub mlp: Mlp,
    pub k: usize,
}

/// Graph nodes of a batch of mixtures in model time units.
#[derive(Clone, Copy, Debug)]
pub struct GmmVars {
    pub log_weights: Var,
    pub means: Var,
    pub sigmas: Var,
}

impl TimeHead {
    pub fn register(reg: &mut ParamRegistry, d: usize, k: usize, rng: &mut impl Rng) -> Result<Self, KernelError> {
        Ok(Self {
            mlp: Mlp::register(reg, "time", &[2 * d, d, 3 * k], rng)?,
            k,
        })
    }

    /// Mixture parameters from the query and the true next context's
    /// embedding, both `[n, d]`. `sigma_floor` is in model units.
    pub fn mixture(&self, g: &mut Graph, p: &Bound, q: Var, e: Var, sigma_floor: f64) -> Result<GmmVars, KernelError> {
        let x = g.concat(&[q, e], 1)?;
        let raw = self.mlp.apply(g, p, x)?;
        let k = self.k;
        let logits = g.slice(raw, 1, 0, k)?;
        let means = g.slice(raw, 1, k, k)?;
        let s = g.slice(raw, 1, 2 * k, k)?;
        let s = g.softplus(s);
        let sigmas = g.clamp_min(s, sigma_floor);
        let log_weights = g.log_softmax(logits, None)?;
        Ok(GmmVars {
            log_weights,
            means,
            sigmas,
        })
    }
}

/// Mean negative log-likelihood of `delta` (model units) under the mixtures.
pub fn gmm_nll(g: &mut Graph, m: &GmmVars, delta: &[f64]) -> Result<Var, KernelError> {
    let shape = g.shape(m.means).to_vec();
    let k = shape[1];
    let dv: Vec<f64> = delta.iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect();
    let dc = g.constant(Tensor::new(shape, dv)?);
    let diff = g.sub(dc, m.means)?;
    let log_s = g.log(m.sigmas);
    let neg_log_s = g.scale(log_s, -1.0);
    let inv = g.exp(neg_log_s);
    let z = g.mul(diff, inv)?;
    let z2 = g.mul(z, z)?;
    let quad = g.scale(z2, -0.5);
    let ln = g.sub(quad, log_s)?;
    let ln = g.add_scalar(ln, -0.5 * (2.0 * std::f64::consts::PI).ln());
    let joint = g.add(ln, m.log_weights)?;
    let lse = g.logsumexp(joint)?;
    let mean = g.mean(lse);
    Ok(g.scale(mean, -1.0))
}

/// A one-dimensional Gaussian mixture in hours.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl Gmm {
    pub fn pdf(&self, x: f64) -> f64 {
        let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sigmas)
            .map(|((w, m), s)| {
                let z = (x - m) / s;
                w * c / s * (-0.5 * z * z).exp()
            })
            .sum()
    }

    pub fn nll(&self, x: f64) -> f64 {
        -self.pdf(x).ln()
    }

    /// Probability mass in `[delta - w, delta + w]`.
    pub fn mass_within(&self, delta: f64, w: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sigmas)
            .map(|((wt, m), s)| wt * (normal_cdf((delta + w - m) / s) - normal_cdf((delta - w - m) / s)))
            .sum()
    }

    /// Highest-density point: a 512-point grid over the union of
    /// `mean +- 4 sigma` envelopes, then golden-section search in the
    /// bracket around the best grid point.
    pub fn mode(&self) -> f64 {
        let lo = self
            .means
            .iter()
            .zip(&self.sigmas)
            .map(|(m, s)| m - 4.0 * s)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .means
            .iter()
            .zip(&self.sigmas)
            .map(|(m, s)| m + 4.0 * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let n = 512;
        let step = (hi - lo) / (n - 1) as f64;
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..n {
            let v = self.pdf(lo + step * i as f64);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let (mut a, mut b) = (lo + step * best.saturating_sub(1) as f64, lo + step * (best + 1).min(n - 1) as f64);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - r * (b - a);
        let mut d = a + r * (b - a);
        for _ in 0..100 {
            if self.pdf(c) > self.pdf(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - r * (b - a);
            d = a + r * (b - a);
        }
        0.5 * (a + b)
    }
}

/// Reads row `i` of a mixture batch and converts it to hours.
pub fn gmm_row(g: &Graph, m: &GmmVars, i: usize, time_scale: f64) -> Gmm {
    let k = g.shape(m.means)[1];
    let row = |v: Var| g.value(v).data()[i * k..(i + 1) * k].to_vec();
    Gmm {
        weights: row(m.log_weights).into_iter().map(f64::exp).collect(),
        means: row(m.means).into_iter().map(|x| x * time_scale).collect(),
        sigmas: row(m.sigmas).into_iter().map(|x| x * time_scale).collect(),
    }
}
