//! The perturbation operator: structural location/time corruption and the
//! cross-entity context swap, each emitting per-event "was changed" labels.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::schema::{EventRecord, EventWindow, Substrate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Loc,
    Time,
    Both,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Structural,
    Swap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Probability that a window is left untouched.
    pub p_norm: f64,
    pub flag_rate: f64,
    pub modes: Vec<Mode>,
    pub variant: Variant,
    pub swap_prob: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            p_norm: 0.7,
            flag_rate: 0.3,
            modes: vec![Mode::Loc, Mode::Time, Mode::Both],
            variant: Variant::Structural,
            swap_prob: 0.3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid perturbation config: {0}")]
pub struct PerturbError(String);

impl PerturbConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        for (n, v) in [("p_norm", self.p_norm), ("flag_rate", self.flag_rate), ("swap_prob", self.swap_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PerturbError(format!("{n} must lie in [0, 1]")));
            }
        }
        if self.modes.is_empty() && self.variant == Variant::Structural {
            return Err(PerturbError("modes must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedWindow {
    pub window: EventWindow,
    /// Per slot, `true` when the event differs from the original.
    pub labels: Vec<bool>,
    /// Per slot, the flags of the accepted draw (before any reverts).
    pub flags: Vec<bool>,
}

impl PerturbedWindow {
    pub fn identity(window: &EventWindow) -> Self {
        Self {
            window: window.clone(),
            labels: vec![false; window.t],
            flags: vec![false; window.t],
        }
    }
}

/// Bitwise equality on every field.
pub fn same_bits(a: &EventRecord, b: &EventRecord) -> bool {
    a.entity_id == b.entity_id
        && a.context_id == b.context_id
        && a.activity == b.activity
        && a.t_start.to_bits() == b.t_start.to_bits()
        && a.duration.map(f64::to_bits) == b.duration.map(f64::to_bits)
}

fn uniform(lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws a point uniformly in the substrate's bounding box and moves the
/// event to the nearest context, taking that context's activity label.
pub fn perturb_location(event: &EventRecord, substrate: &Substrate, rng: &mut impl Rng) -> EventRecord {
    let (lo, hi) = substrate.bounding_box();
    let p = [uniform(lo[0], hi[0], rng), uniform(lo[1], hi[1], rng)];
    let c = substrate.nearest(p);
    EventRecord {
        context_id: c.context_id,
        activity: c.activity_label,
        ..*event
    }
}

/// Resamples the start of `events[index]` uniformly inside the open gap
/// between the previous event's end and the next event's start. Returns
/// `None` at the window boundaries or when the gap is empty.
pub fn perturb_time(events: &[EventRecord], index: usize, rng: &mut impl Rng) -> Option<EventRecord> {
    if index == 0 || index + 1 >= events.len() {
        return None;
    }
    let lo = events[index - 1].t_end();
    let hi = events[index + 1].t_start;
    if !(lo < hi) {
        return None;
    }
    let mut t = rng.random_range(lo..hi);
    while t <= lo {
        t = rng.random_range(lo..hi);
    }
    Some(EventRecord {
        t_start: t,
        ..events[index]
    })
}

const MAX_REDRAWS: usize = 64;

/// Structural corruption of one window.
///
/// Time perturbations read the previous neighbour from the window as
/// corrupted so far, so the output stays chronologically ordered.
pub fn corrupt(window: &EventWindow, substrate: &Substrate, cfg: &PerturbConfig, rng: &mut impl Rng) -> PerturbedWindow {
    let n = window.n_real();
    if n == 0 || rng.random::<f64>() < cfg.p_norm {
        return PerturbedWindow::identity(window);
    }
    let time_only = cfg.modes.iter().all(|&m| m == Mode::Time);
    for attempt in 0..MAX_REDRAWS {
        let mut flags: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < cfg.flag_rate).collect();
        if !flags.iter().any(|&f| f) {
            flags[rng.random_range(0..n)] = true;
        }
        let mut events = window.events.clone();
        for i in 0..n {
            if !flags[i] {
                continue;
            }
            let mode = cfg.modes[rng.random_range(0..cfg.modes.len())];
            if matches!(mode, Mode::Loc | Mode::Both) {
                events[i] = perturb_location(&events[i], substrate, rng);
            }
            if matches!(mode, Mode::Time | Mode::Both) {
                if let Some(e) = perturb_time(&events, i, rng) {
                    events[i] = e;
                }
            }
        }
        if let Some(pw) = finish(window, events, &flags) {
            return pw;
        }
        if time_only || attempt + 1 == MAX_REDRAWS {
            break;
        }
    }
    // every flag reverted: move one event's location instead
    for _ in 0..MAX_REDRAWS {
        let i = rng.random_range(0..n);
        let mut events = window.events.clone();
        events[i] = perturb_location(&events[i], substrate, rng);
        let mut flags = vec![false; n];
        flags[i] = true;
        if let Some(pw) = finish(window, events, &flags) {
            return pw;
        }
    }
    PerturbedWindow::identity(window)
}

fn finish(window: &EventWindow, events: Vec<EventRecord>, flags: &[bool]) -> Option<PerturbedWindow> {
    let mut labels = vec![false; window.t];
    let mut out = window.clone();
    for (i, e) in events.into_iter().enumerate() {
        if !same_bits(&e, &window.events[i]) {
            labels[i] = true;
            out.events[i] = e;
        }
    }
    if !labels.iter().any(|&l| l) {
        return None;
    }
    let mut f = vec![false; window.t];
    f[..flags.len()].copy_from_slice(flags);
    Some(PerturbedWindow {
        window: out,
        labels,
        flags: f,
    })
}

/// Cross-entity swap: each event, with probability `swap_prob`, takes the
/// context and activity of a random donor event from another entity whose
/// context is outside `excluded` and outside the window's own contexts.
pub fn swap_corrupt(
    window: &EventWindow,
    donors: &[EventRecord],
    excluded: &HashSet<u32>,
    swap_prob: f64,
    rng: &mut impl Rng,
) -> PerturbedWindow {
    let own: HashSet<u32> = window.events.iter().map(|e| e.context_id).collect();
    let pool: Vec<&EventRecord> = donors
        .iter()
        .filter(|d| d.entity_id != window.entity_id && !excluded.contains(&d.context_id) && !own.contains(&d.context_id))
        .collect();
    let mut out = PerturbedWindow::identity(window);
    for i in 0..window.n_real() {
        if !(rng.random::<f64>() < swap_prob) {
            continue;
        }
        out.flags[i] = true;
        if pool.is_empty() {
            continue;
        }
        let d = pool[rng.random_range(0..pool.len())];
        let e = &mut out.window.events[i];
        e.context_id = d.context_id;
        e.activity = d.activity;
        out.labels[i] = true;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ContextRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sub(coords: &[[f64; 2]]) -> Substrate {
        let contexts = coords
            .iter()
            .enumerate()
            .map(|(i, &c)| ContextRecord {
                context_id: i as u32,
                coords: c,
                activity_label: i as u32,
            })
            .collect();
        Substrate::new("o".into(), coords.len() as u32, contexts).unwrap()
    }

    fn window(times: &[(f64, Option<f64>)], t: usize) -> EventWindow {
        EventWindow {
            entity_id: 0,
            events: times
                .iter()
                .map(|&(s, d)| EventRecord {
                    entity_id: 0,
                    context_id: 0,
                    t_start: s,
                    duration: d,
                    activity: 0,
                })
                .collect(),
            rows: (0..times.len()).collect(),
            t,
        }
    }

    #[test]
    fn p_norm_one_is_identity() {
        let s = sub(&[[0.0, 0.0], [1.0, 1.0]]);
        let w = window(&[(0.0, None), (1.0, None), (2.0, None)], 4);
        let cfg = PerturbConfig { p_norm: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let p = corrupt(&w, &s, &cfg, &mut rng);
            assert_eq!(p.window, w);
            assert!(p.labels.iter().all(|&l| !l));
        }
    }

    #[test]
    fn single_event_time_only_falls_back_to_location() {
        let s = sub(&[[0.0, 0.0], [1.0, 1.0]]);
        let w = window(&[(5.0, None)], 1);
        let cfg = PerturbConfig {
            p_norm: 0.0,
            modes: vec![Mode::Time],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_time(&w.events, 0, &mut rng), None);
        for _ in 0..50 {
            let p = corrupt(&w, &s, &cfg, &mut rng);
            assert_eq!(p.labels, vec![true]);
            assert_eq!(p.window.events[0].context_id, 1);
            assert_eq!(p.window.events[0].t_start, 5.0);
        }
        // a single context admits no change at all
        let one = sub(&[[0.3, 0.3]]);
        let p = corrupt(&w, &one, &cfg, &mut rng);
        assert_eq!(p, PerturbedWindow::identity(&w));
    }

    #[test]
    fn location_snaps_to_nearest() {
        let s = sub(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(s.nearest([0.1, 0.1]).context_id, 0);
        assert_eq!(s.nearest([0.5, 0.5]).context_id, 0);
        let one = sub(&[[0.2, 0.7]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = window(&[(0.0, None)], 1).events[0];
        let moved = perturb_location(&EventRecord { activity: 9, ..e }, &one, &mut rng);
        assert_eq!((moved.context_id, moved.activity), (0, 0));
    }

    #[test]
    fn time_interval_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = window(&[(1.0, Some(1.0)), (3.0, None), (5.0, None)], 3);
        for _ in 0..1000 {
            let e = perturb_time(&w.events, 1, &mut rng).unwrap();
            assert!(e.t_start > 2.0 && e.t_start < 5.0);
        }
        assert_eq!(perturb_time(&w.events, 0, &mut rng), None);
        assert_eq!(perturb_time(&w.events, 2, &mut rng), None);
        let overlap = window(&[(1.0, Some(4.0)), (3.0, None), (4.0, None)], 3);
        assert_eq!(perturb_time(&overlap.events, 1, &mut rng), None);
    }

    #[test]
    fn swap_examples() {
        let w = window(&[(0.0, None), (1.0, None)], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let donor = EventRecord {
            entity_id: 7,
            context_id: 4,
            t_start: 0.0,
            duration: None,
            activity: 2,
        };
        let none = swap_corrupt(&w, &[donor], &HashSet::new(), 0.0, &mut rng);
        assert_eq!(none, PerturbedWindow::identity(&w));
        let all = swap_corrupt(&w, &[donor], &HashSet::new(), 1.0, &mut rng);
        assert_eq!(all.labels, vec![true, true, false]);
        assert!(all.window.events.iter().all(|e| e.context_id == 4 && e.activity == 2));
        let excl: HashSet<u32> = [4].into_iter().collect();
        let skipped = swap_corrupt(&w, &[donor], &excl, 1.0, &mut rng);
        assert!(skipped.labels.iter().all(|&l| !l));
        assert_eq!(skipped.window, w);
    }

    #[test]
    fn corrupted_windows_are_sound_and_ordered() {
        let s = sub(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.4, 0.6]]);
        let times: Vec<(f64, Option<f64>)> = (0..10).map(|i| (i as f64 * 3.0, if i % 3 == 0 { None } else { Some(1.0) })).collect();
        let w = window(&times, 12);
        let cfg = PerturbConfig { p_norm: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let p = corrupt(&w, &s, &cfg, &mut rng);
            assert!(p.labels.iter().any(|&l| l));
            assert!(!p.labels[10] && !p.labels[11]);
            for i in 0..10 {
                assert_eq!(!p.labels[i], same_bits(&p.window.events[i], &w.events[i]));
            }
            assert!(p.window.events.windows(2).all(|x| x[0].t_start <= x[1].t_start));
        }
    }

    #[test]
    fn flag_rate_matches_binomial() {
        let s = sub(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let times: Vec<(f64, Option<f64>)> = (0..32).map(|i| (i as f64 * 2.0, Some(0.5))).collect();
        let w = window(&times, 32);
        let cfg = PerturbConfig { p_norm: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let mut flagged = 0usize;
        for _ in 0..n {
            flagged += corrupt(&w, &s, &cfg, &mut rng).flags.iter().filter(|&&f| f).count();
        }
        let rate = flagged as f64 / (n * 32) as f64;
        let tol = 3.0 * (0.3f64 * 0.7 / 32.0).sqrt() / 100.0;
        assert!((rate - 0.3).abs() < tol, "rate {rate} tol {tol}");
    }
}
