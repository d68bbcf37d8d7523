//! Synthetic corpora with planted entity signatures, shared hotspots and
//! inserted-visit anomalies.

use std::collections::HashSet;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::schema::{temporal_split, ContextRecord, Corpus, EventRecord, Substrate, ValPlacement};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_entities: usize,
    pub n_contexts: usize,
    pub n_activities: usize,
    /// Contexts in each entity's home set.
    pub signature_size: usize,
    pub events_per_entity: usize,
    /// Shared contexts every entity may visit.
    pub hotspot_count: usize,
    /// Std of visit hours around each entity's characteristic hour.
    pub hour_profile_spread: f64,
    /// Fraction of test events replaced by inserted visits.
    pub anomaly_rate: f64,
    /// Fraction of entities that receive inserted visits; the per-event
    /// rate inside those entities is `anomaly_rate / anomalous_entity_frac`.
    pub anomalous_entity_frac: f64,
    /// Partition home sets so no two entities share a non-hotspot context.
    pub disjoint_homes: bool,
    /// Fraction of events emitted without a duration.
    pub point_event_frac: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_entities: 50,
            n_contexts: 40,
            n_activities: 6,
            signature_size: 4,
            events_per_entity: 400,
            hotspot_count: 5,
            hour_profile_spread: 1.5,
            anomaly_rate: 0.05,
            anomalous_entity_frac: 0.2,
            disjoint_homes: false,
            point_event_frac: 0.1,
            seed: 0,
        }
    }
}

/// Probability that a visit goes to a hotspot rather than the home set.
pub const HOTSPOT_WEIGHT: f64 = 0.2;

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let err = |m: &str| Err(GenError::Config(m.to_string()));
        if self.n_entities == 0 || self.n_contexts == 0 || self.n_activities == 0 {
            return err("counts must be at least 1");
        }
        if self.signature_size == 0 || self.events_per_entity == 0 {
            return err("signature_size and events_per_entity must be at least 1");
        }
        if self.signature_size > self.n_contexts {
            return err("signature_size exceeds n_contexts");
        }
        if self.hotspot_count + self.signature_size > self.n_contexts {
            return err("hotspots plus home set exceed n_contexts");
        }
        if self.disjoint_homes && self.hotspot_count + self.n_entities * self.signature_size > self.n_contexts {
            return err("not enough contexts for disjoint home sets");
        }
        for (name, r) in [
            ("anomaly_rate", self.anomaly_rate),
            ("anomalous_entity_frac", self.anomalous_entity_frac),
            ("point_event_frac", self.point_event_frac),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(GenError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.anomalous_entity_frac == 0.0 && self.anomaly_rate > 0.0 {
            return err("anomalous_entity_frac is zero but anomaly_rate is positive");
        }
        if self.anomaly_rate > self.anomalous_entity_frac {
            return err("anomaly_rate cannot exceed anomalous_entity_frac");
        }
        if !(self.hour_profile_spread >= 0.0) {
            return err("hour_profile_spread must be non-negative");
        }
        Ok(())
    }
}

/// A generated corpus plus the ground truth it was drawn from. Entity `u`
/// has id `u`; context ids are dense.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub home_sets: Vec<Vec<u32>>,
    pub hotspots: Vec<u32>,
    pub char_hours: Vec<f64>,
}

pub fn generate(cfg: &GenConfig) -> Result<SynthCorpus, GenError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let contexts: Vec<ContextRecord> = (0..cfg.n_contexts as u32)
        .map(|id| ContextRecord {
            context_id: id,
            coords: [rng.random::<f64>(), rng.random::<f64>()],
            activity_label: rng.random_range(0..cfg.n_activities as u32),
        })
        .collect();
    let substrate = Substrate::new("2024-01-01T00:00:00Z".into(), cfg.n_activities as u32, contexts)
        .map_err(|e| GenError::Config(e.to_string()))?;

    let mut ids: Vec<u32> = (0..cfg.n_contexts as u32).collect();
    ids.shuffle(&mut rng);
    let hotspots = ids[..cfg.hotspot_count].to_vec();
    let pool = &ids[cfg.hotspot_count..];
    let home_sets: Vec<Vec<u32>> = (0..cfg.n_entities)
        .map(|u| {
            if cfg.disjoint_homes {
                pool[u * cfg.signature_size..(u + 1) * cfg.signature_size].to_vec()
            } else {
                sample(&mut rng, pool.len(), cfg.signature_size)
                    .iter()
                    .map(|i| pool[i])
                    .collect()
            }
        })
        .collect();
    let char_hours: Vec<f64> = (0..cfg.n_entities).map(|_| rng.random_range(0.0..24.0)).collect();

    let hour_noise = Normal::new(0.0, cfg.hour_profile_spread).expect("spread validated");
    let dur = LogNormal::new(0.0, 0.6).expect("valid lognormal");
    let mut events = Vec::with_capacity(cfg.n_entities * cfg.events_per_entity);
    for u in 0..cfg.n_entities {
        // home contexts are visited with decaying preference 1, 1/2, 1/3, ...
        let weights: Vec<f64> = (0..cfg.signature_size).map(|k| 1.0 / (k + 1) as f64).collect();
        let total: f64 = weights.iter().sum();
        for day in 0..cfg.events_per_entity {
            let ctx = if !hotspots.is_empty() && rng.random::<f64>() < HOTSPOT_WEIGHT {
                hotspots[rng.random_range(0..hotspots.len())]
            } else {
                let mut x = rng.random::<f64>() * total;
                let mut k = 0;
                while k + 1 < weights.len() && x >= weights[k] {
                    x -= weights[k];
                    k += 1;
                }
                home_sets[u][k]
            };
            let hour = (char_hours[u] + hour_noise.sample(&mut rng)).rem_euclid(24.0);
            let duration = if rng.random::<f64>() < cfg.point_event_frac {
                None
            } else {
                Some(dur.sample(&mut rng))
            };
            events.push(EventRecord {
                entity_id: u as u32,
                context_id: ctx,
                t_start: 24.0 * day as f64 + hour,
                duration,
                activity: substrate.contexts()[ctx as usize].activity_label,
            });
        }
    }
    Ok(SynthCorpus {
        corpus: Corpus::new(substrate, events),
        home_sets,
        hotspots,
        char_hours,
    })
}

/// Replaces selected events in `rows` with inserted visits: the context is
/// drawn from outside the entity's home set and the hotspots, and the hour is
/// moved roughly half a day away from the entity's characteristic hour on the
/// same day. Events are selected i.i.d. with probability `rate` within the
/// given entities. Returns the new events (re-sorted) and aligned labels.
pub fn plant_inserted_visits(
    synth: &SynthCorpus,
    rows: &[usize],
    entities: &HashSet<u32>,
    rate: f64,
    rng: &mut impl Rng,
) -> (Vec<EventRecord>, Vec<bool>) {
    let corpus = &synth.corpus;
    let mut events = corpus.events.clone();
    let mut labels = vec![false; events.len()];
    let hot: HashSet<u32> = synth.hotspots.iter().copied().collect();
    for &r in rows {
        let u = events[r].entity_id;
        if !entities.contains(&u) || !(rng.random::<f64>() < rate) {
            continue;
        }
        let home: HashSet<u32> = synth.home_sets[u as usize].iter().copied().collect();
        let mut outside: Vec<u32> = corpus
            .substrate
            .contexts()
            .iter()
            .map(|c| c.context_id)
            .filter(|c| !home.contains(c) && !hot.contains(c))
            .collect();
        if outside.is_empty() {
            outside = corpus
                .substrate
                .contexts()
                .iter()
                .map(|c| c.context_id)
                .filter(|c| !home.contains(c))
                .collect();
        }
        if outside.is_empty() {
            continue;
        }
        let ctx = outside[rng.random_range(0..outside.len())];
        let hour = (synth.char_hours[u as usize] + 12.0 + rng.random_range(-3.0..3.0)).rem_euclid(24.0);
        let e = &mut events[r];
        let day = (e.t_start / 24.0).floor();
        e.context_id = ctx;
        e.activity = corpus.substrate.context(ctx).expect("context exists").activity_label;
        e.t_start = 24.0 * day + hour;
        labels[r] = true;
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&events[a], &events[b]);
        x.entity_id.cmp(&y.entity_id).then(x.t_start.total_cmp(&y.t_start))
    });
    (
        order.iter().map(|&i| events[i]).collect(),
        order.iter().map(|&i| labels[i]).collect(),
    )
}

/// A labeled benchmark: a generated corpus whose test suffix (per the
/// temporal split) carries inserted visits.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub synth: SynthCorpus,
    pub labels: Vec<bool>,
    pub anomalous_entities: Vec<u32>,
}

pub fn generate_benchmark(cfg: &GenConfig, train_frac: f64, val_frac: f64) -> Result<Benchmark, GenError> {
    let mut synth = generate(cfg)?;
    let split = temporal_split(&synth.corpus, train_frac, val_frac, ValPlacement::Head)
        .map_err(|e| GenError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA40A_1E5D);
    let n_anom = if cfg.anomaly_rate > 0.0 {
        ((cfg.anomalous_entity_frac * cfg.n_entities as f64).round() as usize).clamp(1, cfg.n_entities)
    } else {
        0
    };
    let mut anomalous: Vec<u32> = sample(&mut rng, cfg.n_entities, n_anom)
        .iter()
        .map(|u| u as u32)
        .collect();
    anomalous.sort_unstable();
    let per_event = if n_anom == 0 {
        0.0
    } else {
        (cfg.anomaly_rate * cfg.n_entities as f64 / n_anom as f64).min(1.0)
    };
    let set: HashSet<u32> = anomalous.iter().copied().collect();
    let (events, labels) = plant_inserted_visits(&synth, &split.test, &set, per_event, &mut rng);
    synth.corpus.events = events;
    Ok(Benchmark {
        synth,
        labels,
        anomalous_entities: anomalous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_entities: 6,
            n_contexts: 20,
            signature_size: 3,
            events_per_entity: 30,
            hotspot_count: 2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn single_entity_count() {
        let cfg = GenConfig {
            n_entities: 1,
            events_per_entity: 5,
            ..small()
        };
        let s = generate(&cfg).unwrap();
        assert_eq!(s.corpus.events.len(), 5);
        assert!(s.corpus.events.iter().all(|e| e.entity_id == 0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let render = |s: &SynthCorpus| {
            let mut buf = Vec::new();
            crate::schema::write_substrate(&mut buf, &s.corpus.substrate).unwrap();
            crate::schema::write_events(&mut buf, &s.corpus.events, None).unwrap();
            buf
        };
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(render(&a), render(&b));
        let c = generate(&GenConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(render(&a), render(&c));
    }

    #[test]
    fn rejects_oversized_signature() {
        let cfg = GenConfig {
            signature_size: 21,
            ..small()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn visits_stay_in_home_and_hotspots() {
        let s = generate(&GenConfig::default()).unwrap();
        for e in &s.corpus.events {
            let u = e.entity_id as usize;
            assert!(s.home_sets[u].contains(&e.context_id) || s.hotspots.contains(&e.context_id));
            assert_eq!(e.activity, s.corpus.substrate.context(e.context_id).unwrap().activity_label);
        }
        let hot = s
            .corpus
            .events
            .iter()
            .filter(|e| s.hotspots.contains(&e.context_id))
            .count() as f64
            / s.corpus.events.len() as f64;
        assert!((hot - HOTSPOT_WEIGHT).abs() < 0.02, "{hot}");
    }

    #[test]
    fn planting_rate_zero_and_one() {
        let s = generate(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let all: HashSet<u32> = (0..6).collect();
        let (ev, labels) = plant_inserted_visits(&s, &[0, 1, 2], &all, 0.0, &mut rng);
        assert_eq!(ev, s.corpus.events);
        assert!(labels.iter().all(|l| !l));

        let rows: Vec<usize> = (20..30).collect();
        let (ev, labels) = plant_inserted_visits(&s, &rows, &all, 1.0, &mut rng);
        assert_eq!(labels.iter().filter(|&&l| l).count(), 10);
        for (e, &l) in ev.iter().zip(&labels) {
            if l {
                assert!(!s.home_sets[e.entity_id as usize].contains(&e.context_id));
            }
        }
    }

    #[test]
    fn benchmark_labels_only_in_test_suffix() {
        let cfg = GenConfig {
            anomaly_rate: 0.3,
            anomalous_entity_frac: 0.5,
            ..small()
        };
        let b = generate_benchmark(&cfg, 0.9, 0.2).unwrap();
        let split = temporal_split(&b.synth.corpus, 0.9, 0.2, ValPlacement::Head).unwrap();
        for r in split.training_partition() {
            assert!(!b.labels[r]);
        }
        assert!(b.labels.iter().any(|&l| l));
        for (e, &l) in b.synth.corpus.events.iter().zip(&b.labels) {
            if l {
                assert!(b.anomalous_entities.contains(&e.entity_id));
                assert!(!b.synth.home_sets[e.entity_id as usize].contains(&e.context_id));
            }
        }
    }
}
