//! The assembled network: feature encoder, backbone and heads, plus batch
//! assembly from (possibly corrupted) windows and co-occurrence peers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, CliqueInput};
use crate::cooc::CoocIndex;
use crate::featencode::{EncoderConfig, FeatureEncoder, SlotEvent};
use crate::numkernel::{Bound, Evaluation, Graph, KernelError, Objective, ParamRegistry, Var};
use crate::objectives::{
    gmm_nll, gmm_row, joint_loss, logits_of, masked_bce, prototype_loss, sample_candidates, sampled_softmax, Gmm,
    HeadConfig, LossConfig, Mlp, ObjectiveError, PoiHead, Projector, TimeHead, SIGMA_FLOOR_HOURS,
};
use crate::perturb::PerturbedWindow;
use crate::schema::{Corpus, EventRecord, Substrate};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown entity {0}")]
    UnknownEntity(u32),
    #[error("unknown context {0}")]
    UnknownContext(u32),
    #[error("{0} head is not attached")]
    MissingHead(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl From<ModelError> for KernelError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Kernel(k) => k,
            ModelError::Objective(ObjectiveError::Kernel(k)) => k,
            other => KernelError::Shape(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub heads: HeadConfig,
}

/// Everything but the parameter values.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    /// Sorted entity ids; positions index the prototype table.
    pub entities: Vec<u32>,
    pub substrate: Substrate,
    pub encoder: FeatureEncoder,
    pub backbone: Backbone,
    pub noise: Mlp,
    pub projector: Projector,
    pub anomaly: Option<Mlp>,
    pub poi: Option<PoiHead>,
    pub time: Option<TimeHead>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub reg: ParamRegistry,
}

impl Model {
    /// Registers the encoder, backbone, noise head and projector.
    pub fn new(cfg: &ModelConfig, substrate: &Substrate, entities: Vec<u32>, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let f = cfg.encoder.n_tokens();
        cfg.backbone.validate(f)?;
        let d = cfg.backbone.d;
        let d_f = cfg.backbone.d_f(f);
        let mut reg = ParamRegistry::new();
        let coords: Vec<[f64; 2]> = substrate.contexts().iter().map(|c| c.coords).collect();
        let encoder = FeatureEncoder::register(
            &mut reg,
            &cfg.encoder,
            d_f,
            &coords,
            entities.len(),
            substrate.n_activities as usize,
            rng,
        )?;
        let backbone = Backbone::register(&mut reg, &cfg.backbone, f, rng)?;
        let noise = Mlp::register(&mut reg, "noise", &[d, 1], rng)?;
        let h_proj = if cfg.loss.h_proj == 0 { d } else { cfg.loss.h_proj };
        let projector = Projector::register(&mut reg, d, h_proj, d_f, rng)?;
        Ok(Self {
            net: Network {
                cfg: cfg.clone(),
                entities,
                substrate: substrate.clone(),
                encoder,
                backbone,
                noise,
                projector,
                anomaly: None,
                poi: None,
                time: None,
            },
            reg,
        })
    }

    pub fn add_anomaly_head(&mut self, rng: &mut impl Rng) -> Result<(), ModelError> {
        let d = self.net.cfg.backbone.d;
        self.net.anomaly = Some(Mlp::register(&mut self.reg, "anomaly", &[d, d, d, 1], rng)?);
        Ok(())
    }

    pub fn add_next_visit_heads(&mut self, rng: &mut impl Rng) -> Result<(), ModelError> {
        let d = self.net.cfg.backbone.d;
        let x = self.net.substrate.len();
        if x < 2 {
            return Err(ObjectiveError::TooFewContexts(x).into());
        }
        self.net.poi = Some(PoiHead::register(&mut self.reg, d, x, rng)?);
        self.net.time = Some(TimeHead::register(&mut self.reg, d, self.net.cfg.heads.k, rng)?);
        Ok(())
    }
}

/// Dense inputs for one batch of windows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub b: usize,
    pub t: usize,
    /// Clique size actually assembled (1 when peers are skipped).
    pub c: usize,
    pub focal: Vec<Option<SlotEvent>>,
    /// `B * T * (C - 1)` peer slots.
    pub peers: Vec<Option<SlotEvent>>,
    pub peer_mask: Vec<bool>,
    pub pad_mask: Vec<bool>,
    pub labels: Vec<bool>,
    /// Dense entity index per slot (the window's entity).
    pub entity: Vec<usize>,
    /// Corpus row of the original event in each slot.
    pub rows: Vec<Option<usize>>,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.b * self.t
    }

    pub fn valid(&self) -> Vec<bool> {
        self.pad_mask.iter().map(|&m| !m).collect()
    }
}

impl Network {
    pub fn f(&self) -> usize {
        self.encoder.cfg.n_tokens()
    }

    pub fn entity_index(&self, id: u32) -> Result<usize, ModelError> {
        self.entities.binary_search(&id).map_err(|_| ModelError::UnknownEntity(id))
    }

    fn slot(&self, e: &EventRecord) -> Result<SlotEvent, ModelError> {
        Ok(SlotEvent {
            context: self.substrate.position(e.context_id).ok_or(ModelError::UnknownContext(e.context_id))?,
            entity: self.entity_index(e.entity_id)?,
            t_start: e.t_start,
            duration: e.duration,
            activity: e.activity as usize,
        })
    }

    /// Builds a batch. Peers are retrieved from `index` for each (possibly
    /// corrupted) focal event and taken uncorrupted from `corpus`; with no
    /// index or with the co-occurrence sub-layer bypassed, no peers are
    /// assembled.
    pub fn assemble(
        &self,
        corpus: &Corpus,
        index: Option<&CoocIndex>,
        windows: &[PerturbedWindow],
        min_overlap: f64,
    ) -> Result<Batch, ModelError> {
        let t = self.cfg.backbone.window;
        let b = windows.len();
        let c = match index {
            Some(_) if !self.cfg.backbone.bypass_cooc => self.cfg.backbone.clique,
            _ => 1,
        };
        let mut batch = Batch {
            b,
            t,
            c,
            focal: Vec::with_capacity(b * t),
            peers: Vec::with_capacity(b * t * (c - 1)),
            peer_mask: Vec::with_capacity(b * t * c),
            pad_mask: Vec::with_capacity(b * t),
            labels: Vec::with_capacity(b * t),
            entity: Vec::with_capacity(b * t),
            rows: Vec::with_capacity(b * t),
        };
        for pw in windows {
            let w = &pw.window;
            if w.t != t {
                return Err(ModelError::Config(format!("window length {} but model expects {t}", w.t)));
            }
            let ent = self.entity_index(w.entity_id)?;
            for i in 0..t {
                batch.entity.push(ent);
                match w.events.get(i) {
                    Some(e) => {
                        batch.focal.push(Some(self.slot(e)?));
                        batch.pad_mask.push(false);
                        batch.labels.push(pw.labels[i]);
                        batch.rows.push(Some(w.rows[i]));
                        batch.peer_mask.push(false);
                        if c > 1 {
                            let ps = index
                                .expect("peers imply an index")
                                .retrieve_peers(&corpus.events, e, c, min_overlap);
                            for k in 0..c - 1 {
                                match ps.peers.get(k) {
                                    Some(&row) => {
                                        batch.peers.push(Some(self.slot(&corpus.events[row])?));
                                        batch.peer_mask.push(false);
                                    }
                                    None => {
                                        batch.peers.push(None);
                                        batch.peer_mask.push(true);
                                    }
                                }
                            }
                        }
                    }
                    None => {
                        batch.focal.push(None);
                        batch.pad_mask.push(true);
                        batch.labels.push(false);
                        batch.rows.push(None);
                        batch.peer_mask.push(false);
                        for _ in 1..c {
                            batch.peers.push(None);
                            batch.peer_mask.push(true);
                        }
                    }
                }
            }
        }
        Ok(batch)
    }

    /// Encodes a batch to `H: [B * T, d]` and returns the prototype table.
    pub fn encode(&self, g: &mut Graph, p: &Bound, batch: &Batch, causal: bool) -> Result<(Var, Var), KernelError> {
        let (b, t, c) = (batch.b, batch.t, batch.c);
        let (f, d_f) = (self.f(), self.encoder.d_f);
        let loc = self.encoder.location_table(g, p)?;
        let protos = self.encoder.prototypes(g, p)?;
        let focal = self.encoder.embed_slots(g, p, loc, protos, &batch.focal)?;
        let focal = g.reshape(focal, &[b, t, f, d_f])?;
        let peers = if c > 1 {
            let pv = self.encoder.embed_slots(g, p, loc, protos, &batch.peers)?;
            Some(g.reshape(pv, &[b, t, c - 1, f, d_f])?)
        } else {
            None
        };
        let input = CliqueInput {
            b,
            t,
            c,
            focal,
            peers,
            peer_mask: batch.peer_mask.clone(),
            pad_mask: batch.pad_mask.clone(),
        };
        let (h, _) = self.backbone.forward(g, p, &input, causal, false)?;
        let h = g.reshape(h, &[b * t, self.cfg.backbone.d])?;
        Ok((h, protos))
    }

    /// Noise-detection BCE, prototype InfoNCE and their weighted sum.
    pub fn pretrain_losses(&self, g: &mut Graph, p: &Bound, batch: &Batch) -> Result<PretrainLosses, ModelError> {
        let (h, protos) = self.encode(g, p, batch, false)?;
        let valid = batch.valid();
        let z = logits_of(g, p, &self.noise, h)?;
        let noise = masked_bce(g, z, &batch.labels, &valid)?;
        let proto = if self.cfg.loss.disable_prototype_loss {
            None
        } else {
            prototype_loss(g, p, &self.projector, h, &batch.labels, &valid, &batch.entity, protos, self.cfg.loss.beta)?
        };
        let total = joint_loss(g, noise, proto, self.cfg.loss.gamma);
        Ok(PretrainLosses { total, noise, proto })
    }

    pub fn anomaly_loss(&self, g: &mut Graph, p: &Bound, batch: &Batch) -> Result<Var, ModelError> {
        let head = self.anomaly.as_ref().ok_or(ModelError::MissingHead("anomaly"))?;
        let (h, _) = self.encode(g, p, batch, false)?;
        let z = logits_of(g, p, head, h)?;
        Ok(masked_bce(g, z, &batch.labels, &batch.valid())?)
    }

    /// Per-slot scores of one head; padded slots get `NaN`.
    pub fn score(&self, g: &mut Graph, p: &Bound, batch: &Batch, head: ScoreHead) -> Result<Vec<f64>, ModelError> {
        let (h, protos) = self.encode(g, p, batch, false)?;
        let raw = match head {
            ScoreHead::Noise => {
                let z = logits_of(g, p, &self.noise, h)?;
                g.value(z).data().to_vec()
            }
            ScoreHead::Anomaly => {
                let m = self.anomaly.as_ref().ok_or(ModelError::MissingHead("anomaly"))?;
                let z = logits_of(g, p, m, h)?;
                g.value(z).data().to_vec()
            }
            ScoreHead::Prototype => {
                let a = self.projector.apply(g, p, h)?;
                let own = g.gather(protos, &batch.entity)?;
                let own = g.l2_normalize(own)?;
                let cos = g.dot_last(a, own)?;
                g.value(cos).data().iter().map(|x| -x).collect()
            }
        };
        Ok(raw
            .into_iter()
            .zip(&batch.pad_mask)
            .map(|(s, &m)| if m { f64::NAN } else { s })
            .collect())
    }

    /// For each real slot, the entity whose normalized prototype has the
    /// highest cosine with the projected representation (lowest index on ties).
    pub fn nearest_prototype(&self, g: &mut Graph, p: &Bound, batch: &Batch) -> Result<Vec<Option<usize>>, ModelError> {
        let (h, protos) = self.encode(g, p, batch, false)?;
        let a = self.projector.apply(g, p, h)?;
        let pn = g.l2_normalize(protos)?;
        let s = g.matmul_t(a, pn)?;
        let u = self.entities.len();
        let sv = g.value(s).data();
        Ok((0..batch.n())
            .map(|i| {
                if batch.pad_mask[i] {
                    return None;
                }
                let row = &sv[i * u..(i + 1) * u];
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                Some(best)
            })
            .collect())
    }

    /// Next-visit queries: every real slot whose successor in the window is
    /// also real. Returns `(query rows, target contexts, deltas in hours)`.
    pub fn next_visit_targets(batch: &Batch) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut deltas = Vec::new();
        for b in 0..batch.b {
            for i in 0..batch.t.saturating_sub(1) {
                let r = b * batch.t + i;
                if let (Some(cur), Some(next)) = (batch.focal[r], batch.focal[r + 1]) {
                    rows.push(r);
                    targets.push(next.context);
                    deltas.push(next.t_start - cur.t_start);
                }
            }
        }
        (rows, targets, deltas)
    }

    /// Sampled-softmax POI loss plus GMM time NLL, equally weighted, on a
    /// causally encoded batch of uncorrupted windows.
    pub fn next_visit_loss(&self, g: &mut Graph, p: &Bound, batch: &Batch, rng: &mut impl Rng) -> Result<Option<Var>, ModelError> {
        let poi = self.poi.as_ref().ok_or(ModelError::MissingHead("poi"))?;
        let time = self.time.as_ref().ok_or(ModelError::MissingHead("time"))?;
        let (rows, targets, deltas) = Self::next_visit_targets(batch);
        if rows.is_empty() {
            return Ok(None);
        }
        let hc = &self.cfg.heads;
        let (h, _) = self.encode(g, p, batch, true)?;
        let hq = g.gather(h, &rows)?;
        let q = poi.queries(g, p, hq)?;
        let table = p.get(poi.table);
        let cands = sample_candidates(&targets, poi.n_contexts, hc.n_neg, rng);
        let ce = sampled_softmax(g, q, table, &cands, hc.poi_temperature)?;
        let e = g.gather(table, &targets)?;
        let m = time.mixture(g, p, q, e, SIGMA_FLOOR_HOURS / hc.time_scale)?;
        let scaled: Vec<f64> = deltas.iter().map(|d| d / hc.time_scale).collect();
        let nll = gmm_nll(g, &m, &scaled)?;
        Ok(Some(g.add(ce, nll)?))
    }

    /// Full-catalogue POI scores and hour-unit mixtures for every next-visit
    /// query of the batch.
    pub fn next_visit_predict(&self, g: &mut Graph, p: &Bound, batch: &Batch) -> Result<NextVisitPrediction, ModelError> {
        let poi = self.poi.as_ref().ok_or(ModelError::MissingHead("poi"))?;
        let time = self.time.as_ref().ok_or(ModelError::MissingHead("time"))?;
        let (rows, targets, deltas) = Self::next_visit_targets(batch);
        let mut out = NextVisitPrediction {
            rows: rows.clone(),
            targets: targets.clone(),
            deltas: deltas.clone(),
            scores: Vec::new(),
            mixtures: Vec::new(),
        };
        if rows.is_empty() {
            return Ok(out);
        }
        let hc = &self.cfg.heads;
        let (h, _) = self.encode(g, p, batch, true)?;
        let hq = g.gather(h, &rows)?;
        let q = poi.queries(g, p, hq)?;
        let s = poi.scores(g, p, q)?;
        let x = poi.n_contexts;
        out.scores = g.value(s).data().chunks(x).map(<[f64]>::to_vec).collect();
        let e = g.gather(p.get(poi.table), &targets)?;
        let m = time.mixture(g, p, q, e, SIGMA_FLOOR_HOURS / hc.time_scale)?;
        out.mixtures = (0..rows.len()).map(|i| gmm_row(g, &m, i, hc.time_scale)).collect();
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainLosses {
    pub total: Var,
    pub noise: Var,
    pub proto: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreHead {
    Noise,
    Prototype,
    Anomaly,
}

#[derive(Clone, Debug)]
pub struct NextVisitPrediction {
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
    pub deltas: Vec<f64>,
    pub scores: Vec<Vec<f64>>,
    pub mixtures: Vec<Gmm>,
}

/// The pre-training joint loss on a fixed batch, as a function of the
/// registry values.
pub struct JointObjective<'a> {
    pub net: &'a Network,
    pub batch: &'a Batch,
}

impl Objective for JointObjective<'_> {
    fn eval(&mut self, reg: &ParamRegistry) -> Result<Evaluation, KernelError> {
        let mut g = Graph::new();
        let p = g.bind(reg);
        let l = self.net.pretrain_losses(&mut g, &p, self.batch)?;
        Ok(Evaluation {
            loss: g.value(l.total).item().expect("scalar"),
            kinks: g.kink_offsets(),
        })
    }

    fn grad(&mut self, reg: &mut ParamRegistry) -> Result<f64, KernelError> {
        let mut g = Graph::new();
        let p = g.bind(reg);
        let l = self.net.pretrain_losses(&mut g, &p, self.batch)?;
        g.backward_into(l.total, reg)?;
        Ok(g.value(l.total).item().expect("scalar"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooc::Partition;
    use crate::numkernel::grad_check;
    use crate::perturb::{corrupt, PerturbConfig};
    use crate::schema::chunk_windows;
    use crate::synthgen::{generate, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Corpus, ModelConfig) {
        let gen = GenConfig {
            n_entities: 6,
            n_contexts: 8,
            n_activities: 3,
            signature_size: 2,
            events_per_entity: 12,
            hotspot_count: 2,
            ..GenConfig::default()
        };
        let corpus = generate(&gen).unwrap().corpus;
        let mut cfg = ModelConfig::default();
        cfg.encoder.ns = 2;
        cfg.encoder.h = 2;
        cfg.backbone = BackboneConfig {
            d: 20,
            blocks: 1,
            heads: 2,
            clique: 3,
            window: 4,
            d_ff: 0,
            bypass_cooc: false,
        };
        cfg.loss.h_proj = 6;
        cfg.heads.n_neg = 4;
        (corpus, cfg)
    }

    fn batch_for(net: &Network, corpus: &Corpus, index: Option<&CoocIndex>, seed: u64) -> Batch {
        let rows: Vec<usize> = (0..corpus.events.len()).collect();
        let windows = chunk_windows(corpus, &rows, net.cfg.backbone.window).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = PerturbConfig { p_norm: 0.0, ..PerturbConfig::default() };
        let pw: Vec<_> = windows.iter().take(5).map(|w| corrupt(w, &corpus.substrate, &pc, &mut rng)).collect();
        net.assemble(corpus, index, &pw, 0.0).unwrap()
    }

    #[test]
    fn assembled_peers_come_from_other_entities_at_the_same_context() {
        let (corpus, cfg) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&cfg, &corpus.substrate, corpus.entities(), &mut rng).unwrap();
        let rows: Vec<usize> = (0..corpus.events.len()).collect();
        let idx = CoocIndex::build(&corpus, &rows, Partition::Train);
        let b = batch_for(&model.net, &corpus, Some(&idx), 1);
        assert_eq!(b.c, 3);
        assert_eq!(b.peers.len(), b.n() * 2);
        for i in 0..b.n() {
            assert!(!b.peer_mask[i * 3]);
            for k in 0..2 {
                let masked = b.peer_mask[i * 3 + 1 + k];
                let slot = b.peers[i * 2 + k];
                assert_eq!(masked, slot.is_none());
                if let (Some(peer), Some(focal)) = (slot, b.focal[i]) {
                    assert_eq!(peer.context, focal.context);
                    assert_ne!(peer.entity, focal.entity);
                }
            }
        }
        assert!(b.peers.iter().any(Option::is_some));
    }

    #[test]
    fn bypass_skips_peer_assembly_without_changing_outputs() {
        let (corpus, mut cfg) = tiny();
        let rows: Vec<usize> = (0..corpus.events.len()).collect();
        let idx = CoocIndex::build(&corpus, &rows, Partition::Train);
        cfg.backbone.bypass_cooc = true;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&cfg, &corpus.substrate, corpus.entities(), &mut rng).unwrap();
        let with = batch_for(&model.net, &corpus, Some(&idx), 2);
        let without = batch_for(&model.net, &corpus, None, 2);
        assert_eq!(with.c, 1);
        let run = |b: &Batch| {
            let mut g = Graph::new();
            let p = g.bind(&model.reg);
            model.net.score(&mut g, &p, b, ScoreHead::Noise).unwrap()
        };
        let (a, b) = (run(&with), run(&without));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn joint_objective_passes_gradient_check() {
        let (corpus, cfg) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = Model::new(&cfg, &corpus.substrate, corpus.entities(), &mut rng).unwrap();
        let rows: Vec<usize> = (0..corpus.events.len()).collect();
        let idx = CoocIndex::build(&corpus, &rows, Partition::Train);
        let batch = batch_for(&model.net, &corpus, Some(&idx), 3);
        let net = model.net.clone();
        let mut obj = JointObjective { net: &net, batch: &batch };
        let report = grad_check(&mut obj, &mut model.reg, 150, 1e-5, &mut rng).unwrap();
        let bad: Vec<_> = report.checked.iter().filter(|c| c.rel_error >= 1e-4).collect();
        assert!(report.pass_fraction(1e-4) >= 0.99, "failing coordinates: {bad:?}");
    }

    #[test]
    fn next_visit_loss_and_predictions() {
        let (corpus, cfg) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = Model::new(&cfg, &corpus.substrate, corpus.entities(), &mut rng).unwrap();
        model.add_next_visit_heads(&mut rng).unwrap();
        let rows: Vec<usize> = (0..corpus.events.len()).collect();
        let windows = chunk_windows(&corpus, &rows, 4).unwrap();
        let pw: Vec<_> = windows.iter().take(3).map(PerturbedWindow::identity).collect();
        let batch = model.net.assemble(&corpus, None, &pw, 0.0).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&model.reg);
        let l = model.net.next_visit_loss(&mut g, &p, &batch, &mut rng).unwrap().unwrap();
        assert!(g.value(l).item().unwrap().is_finite());
        let mut g = Graph::new();
        let p = g.bind(&model.reg);
        let pred = model.net.next_visit_predict(&mut g, &p, &batch).unwrap();
        assert_eq!(pred.rows.len(), 9);
        assert_eq!(pred.scores[0].len(), corpus.substrate.len());
        for m in &pred.mixtures {
            assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(m.sigmas.iter().all(|&s| s >= SIGMA_FLOOR_HOURS - 1e-15));
        }
    }

    #[test]
    fn prototype_scores_are_negative_cosines() {
        let (corpus, cfg) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::new(&cfg, &corpus.substrate, corpus.entities(), &mut rng).unwrap();
        let batch = batch_for(&model.net, &corpus, None, 4);
        let mut g = Graph::new();
        let p = g.bind(&model.reg);
        let s = model.net.score(&mut g, &p, &batch, ScoreHead::Prototype).unwrap();
        assert!(s.iter().filter(|x| !x.is_nan()).all(|x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(x)));
        let nearest = model.net.nearest_prototype(&mut g, &p, &batch).unwrap();
        assert_eq!(nearest.iter().filter(|x| x.is_some()).count(), batch.valid().iter().filter(|&&v| v).count());
    }
}
