//! Event-stream data model, JSONL corpus I/O, windowing and temporal splits.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{file}:{line}: unknown context_id {context_id}")]
    DanglingContext { file: String, line: usize, context_id: u32 },
    #[error("{file}:{line}: negative duration {duration}")]
    NegativeDuration { file: String, line: usize, duration: f64 },
    #[error("invalid substrate: {0}")]
    Substrate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub context_id: u32,
    pub coords: [f64; 2],
    pub activity_label: u32,
}

#[derive(Serialize, Deserialize)]
struct SubstrateHeader {
    origin_iso: String,
    n_activities: u32,
}

/// The shared context set with its 2-D embedding.
///
/// Contexts are addressed both by their external `context_id` and by their
/// dense position in `contexts`; downstream tables are indexed by position.
#[derive(Clone, Debug, PartialEq)]
pub struct Substrate {
    pub origin_iso: String,
    pub n_activities: u32,
    contexts: Vec<ContextRecord>,
    bbox: ([f64; 2], [f64; 2]),
    pos: HashMap<u32, usize>,
}

impl Substrate {
    pub fn new(origin_iso: String, n_activities: u32, contexts: Vec<ContextRecord>) -> Result<Self, SchemaError> {
        if contexts.is_empty() {
            return Err(SchemaError::Substrate("no contexts".into()));
        }
        if n_activities == 0 {
            return Err(SchemaError::Substrate("n_activities must be positive".into()));
        }
        let mut pos = HashMap::with_capacity(contexts.len());
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (i, c) in contexts.iter().enumerate() {
            if pos.insert(c.context_id, i).is_some() {
                return Err(SchemaError::Substrate(format!("duplicate context_id {}", c.context_id)));
            }
            if !c.coords.iter().all(|v| v.is_finite()) {
                return Err(SchemaError::Substrate(format!("context {} has non-finite coords", c.context_id)));
            }
            if c.activity_label >= n_activities {
                return Err(SchemaError::Substrate(format!(
                    "context {} activity_label {} >= n_activities {n_activities}",
                    c.context_id, c.activity_label
                )));
            }
            for k in 0..2 {
                lo[k] = lo[k].min(c.coords[k]);
                hi[k] = hi[k].max(c.coords[k]);
            }
        }
        Ok(Self {
            origin_iso,
            n_activities,
            contexts,
            bbox: (lo, hi),
            pos,
        })
    }

    pub fn contexts(&self) -> &[ContextRecord] {
        &self.contexts
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Area of interest: (min, max) per coordinate.
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        self.bbox
    }

    pub fn position(&self, context_id: u32) -> Option<usize> {
        self.pos.get(&context_id).copied()
    }

    pub fn context(&self, context_id: u32) -> Option<&ContextRecord> {
        self.position(context_id).map(|i| &self.contexts[i])
    }

    /// Nearest context to `p` in Euclidean distance; ties go to the smallest
    /// `context_id`.
    pub fn nearest(&self, p: [f64; 2]) -> &ContextRecord {
        let mut best = &self.contexts[0];
        let mut best_d = f64::INFINITY;
        for c in &self.contexts {
            let dx = c.coords[0] - p[0];
            let dy = c.coords[1] - p[1];
            let d = dx * dx + dy * dy;
            if d < best_d || (d == best_d && c.context_id < best.context_id) {
                best = c;
                best_d = d;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub entity_id: u32,
    pub context_id: u32,
    pub t_start: f64,
    /// Hours; `None` marks a point event.
    pub duration: Option<f64>,
    pub activity: u32,
}

impl EventRecord {
    /// Duration with point events mapped to zero.
    pub fn dur(&self) -> f64 {
        self.duration.unwrap_or(0.0)
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.dur()
    }

    pub fn is_point(&self) -> bool {
        self.duration.is_none()
    }
}

#[derive(Deserialize)]
struct EventLine {
    entity_id: u32,
    context_id: u32,
    t_start: f64,
    duration: Option<f64>,
    activity: u32,
    #[serde(default)]
    anomaly: Option<u8>,
}

#[derive(Serialize)]
struct EventOut {
    entity_id: u32,
    context_id: u32,
    t_start: f64,
    duration: Option<f64>,
    activity: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    anomaly: Option<u8>,
}

/// A loaded corpus: events sorted by `(entity_id, t_start)` with ties in
/// input order. The row position of an event in `events` is its key.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub substrate: Substrate,
    pub events: Vec<EventRecord>,
}

impl Corpus {
    pub fn new(substrate: Substrate, mut events: Vec<EventRecord>) -> Self {
        sort_events(&mut events);
        Self { substrate, events }
    }

    /// Distinct entity ids in ascending order; the position is the dense
    /// entity index used by prototype tables.
    pub fn entities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.events.iter().map(|e| e.entity_id).collect();
        ids.dedup();
        ids
    }

    /// Per-entity contiguous row ranges.
    pub fn entity_ranges(&self) -> Vec<(u32, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.events.len() {
            if i == self.events.len() || self.events[i].entity_id != self.events[start].entity_id {
                out.push((self.events[start].entity_id, start..i));
                start = i;
            }
        }
        out
    }
}

fn sort_events(events: &mut [EventRecord]) {
    events.sort_by(|a, b| a.entity_id.cmp(&b.entity_id).then(a.t_start.total_cmp(&b.t_start)));
}

fn sorted_order(events: &[EventRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&events[a], &events[b]);
        x.entity_id.cmp(&y.entity_id).then(x.t_start.total_cmp(&y.t_start))
    });
    order
}

fn file_name(p: &Path) -> String {
    p.display().to_string()
}

pub fn read_substrate(path: &Path) -> Result<Substrate, SchemaError> {
    let fname = file_name(path);
    let reader = BufReader::new(File::open(path)?);
    let mut header: Option<SubstrateHeader> = None;
    let mut contexts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |e: serde_json::Error| SchemaError::Parse {
            file: fname.clone(),
            line: i + 1,
            msg: e.to_string(),
        };
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(perr)?);
        } else {
            contexts.push(serde_json::from_str::<ContextRecord>(&line).map_err(perr)?);
        }
    }
    let h = header.ok_or_else(|| SchemaError::Substrate(format!("{fname}: missing header line")))?;
    Substrate::new(h.origin_iso, h.n_activities, contexts)
}

/// Parses an event file in on-disk order, returning the optional anomaly
/// column alongside.
fn read_event_lines(
    path: &Path,
    substrate: &Substrate,
) -> Result<(Vec<EventRecord>, Vec<Option<u8>>), SchemaError> {
    let fname = file_name(path);
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let parse_err = |msg: String| SchemaError::Parse {
            file: fname.clone(),
            line: lineno,
            msg,
        };
        let ev: EventLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !ev.t_start.is_finite() {
            return Err(parse_err("t_start must be finite".into()));
        }
        if let Some(d) = ev.duration {
            if !d.is_finite() {
                return Err(parse_err("duration must be finite".into()));
            }
            if d < 0.0 {
                return Err(SchemaError::NegativeDuration {
                    file: fname,
                    line: lineno,
                    duration: d,
                });
            }
        }
        if substrate.position(ev.context_id).is_none() {
            return Err(SchemaError::DanglingContext {
                file: fname,
                line: lineno,
                context_id: ev.context_id,
            });
        }
        if ev.activity >= substrate.n_activities {
            return Err(parse_err(format!("activity {} out of range", ev.activity)));
        }
        if matches!(ev.anomaly, Some(a) if a > 1) {
            return Err(parse_err("anomaly must be 0 or 1".into()));
        }
        events.push(EventRecord {
            entity_id: ev.entity_id,
            context_id: ev.context_id,
            t_start: ev.t_start,
            duration: ev.duration,
            activity: ev.activity,
        });
        labels.push(ev.anomaly);
    }
    Ok((events, labels))
}

/// Loads and validates a corpus. Any `anomaly` field is parsed for
/// validation and then discarded.
pub fn load_corpus(events_path: &Path, substrate_path: &Path) -> Result<Corpus, SchemaError> {
    let substrate = read_substrate(substrate_path)?;
    let (events, _) = read_event_lines(events_path, &substrate)?;
    Ok(Corpus::new(substrate, events))
}

static LABEL_READS: AtomicUsize = AtomicUsize::new(0);

/// Number of times anomaly labels have been read in this process. Training
/// paths are tested to leave this unchanged.
pub fn label_reads() -> usize {
    LABEL_READS.load(Ordering::SeqCst)
}

/// Reads the anomaly column aligned to the canonical corpus order. Events
/// without the field count as normal. This is the only way labels leave a
/// file, and every call is counted.
pub fn read_anomaly_labels(events_path: &Path, substrate: &Substrate) -> Result<Vec<bool>, SchemaError> {
    LABEL_READS.fetch_add(1, Ordering::SeqCst);
    let (events, labels) = read_event_lines(events_path, substrate)?;
    Ok(sorted_order(&events)
        .into_iter()
        .map(|i| labels[i] == Some(1))
        .collect())
}

pub fn write_substrate(w: &mut impl Write, s: &Substrate) -> Result<(), SchemaError> {
    let header = SubstrateHeader {
        origin_iso: s.origin_iso.clone(),
        n_activities: s.n_activities,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for c in &s.contexts {
        writeln!(w, "{}", serde_json::to_string(c).expect("context serializes"))?;
    }
    Ok(())
}

/// Canonical event serialization; `labels`, when given, adds the anomaly
/// column.
pub fn write_events(w: &mut impl Write, events: &[EventRecord], labels: Option<&[bool]>) -> Result<(), SchemaError> {
    if let Some(l) = labels {
        if l.len() != events.len() {
            return Err(SchemaError::Argument("label count differs from event count".into()));
        }
    }
    for (i, e) in events.iter().enumerate() {
        let out = EventOut {
            entity_id: e.entity_id,
            context_id: e.context_id,
            t_start: e.t_start,
            duration: e.duration,
            activity: e.activity,
            anomaly: labels.map(|l| l[i] as u8),
        };
        writeln!(w, "{}", serde_json::to_string(&out).expect("event serializes"))?;
    }
    Ok(())
}

pub fn save_corpus(
    corpus: &Corpus,
    events_path: &Path,
    substrate_path: &Path,
    labels: Option<&[bool]>,
) -> Result<(), SchemaError> {
    let mut s = std::io::BufWriter::new(File::create(substrate_path)?);
    write_substrate(&mut s, &corpus.substrate)?;
    s.flush()?;
    let mut e = std::io::BufWriter::new(File::create(events_path)?);
    write_events(&mut e, &corpus.events, labels)?;
    e.flush()?;
    Ok(())
}

/// A fixed-length window of one entity's stream. `rows` are corpus row
/// positions of the real events; slots past `rows.len()` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct EventWindow {
    pub entity_id: u32,
    pub events: Vec<EventRecord>,
    pub rows: Vec<usize>,
    pub t: usize,
}

impl EventWindow {
    pub fn n_real(&self) -> usize {
        self.events.len()
    }

    /// `true` marks a padded slot.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.t).map(|i| i >= self.events.len()).collect()
    }
}

/// Splits each entity's events (restricted to `rows`, which must be in
/// corpus order) into consecutive non-overlapping windows of length `t`.
pub fn chunk_windows(corpus: &Corpus, rows: &[usize], t: usize) -> Result<Vec<EventWindow>, SchemaError> {
    if t < 1 {
        return Err(SchemaError::Argument("window length must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let entity = corpus.events[rows[i]].entity_id;
        let mut j = i;
        while j < rows.len() && corpus.events[rows[j]].entity_id == entity {
            j += 1;
        }
        for chunk in rows[i..j].chunks(t) {
            out.push(EventWindow {
                entity_id: entity,
                events: chunk.iter().map(|&r| corpus.events[r]).collect(),
                rows: chunk.to_vec(),
                t,
            });
        }
        i = j;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Temporal,
    LabeledBenchmark,
}

/// Where the validation slice sits inside each entity's training prefix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValPlacement {
    /// Earliest events of the training prefix.
    #[default]
    Head,
    /// Latest events of the training prefix.
    Tail,
}

/// Disjoint row sets; `train ∪ val` is the chronological prefix of every
/// entity stream and `test` the suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub mode: SplitMode,
}

impl CorpusSplit {
    /// Train and validation rows together, in corpus order.
    pub fn training_partition(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        rows.sort_unstable();
        rows
    }
}

/// Per entity: the first `floor(train_frac * n)` events form the training
/// prefix and the rest are test; `floor(val_frac * n_train)` events of the
/// prefix are held out as validation.
pub fn temporal_split(
    corpus: &Corpus,
    train_frac: f64,
    val_frac: f64,
    placement: ValPlacement,
) -> Result<CorpusSplit, SchemaError> {
    for (name, f) in [("train_frac", train_frac), ("val_frac", val_frac)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(SchemaError::Argument(format!("{name} must lie in (0, 1), got {f}")));
        }
    }
    let mut split = CorpusSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        mode: SplitMode::Temporal,
    };
    for (_, range) in corpus.entity_ranges() {
        let n = range.len();
        let n_train = (train_frac * n as f64).floor() as usize;
        let n_val = (val_frac * n_train as f64).floor() as usize;
        let prefix = range.start..range.start + n_train;
        let (val, train) = match placement {
            ValPlacement::Head => (prefix.start..prefix.start + n_val, prefix.start + n_val..prefix.end),
            ValPlacement::Tail => (prefix.end - n_val..prefix.end, prefix.start..prefix.end - n_val),
        };
        split.train.extend(train);
        split.val.extend(val);
        split.test.extend(prefix.end..range.end);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// Row positions grouped by entity, handy for building per-entity sets.
pub fn rows_by_entity(corpus: &Corpus, rows: &[usize]) -> BTreeMap<u32, Vec<usize>> {
    let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &r in rows {
        m.entry(corpus.events[r].entity_id).or_default().push(r);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn substrate(n: u32) -> Substrate {
        let contexts = (0..n)
            .map(|i| ContextRecord {
                context_id: i,
                coords: [i as f64, 0.0],
                activity_label: i % 2,
            })
            .collect();
        Substrate::new("2020-01-01T00:00:00Z".into(), 2, contexts).unwrap()
    }

    fn ev(entity: u32, ctx: u32, t: f64) -> EventRecord {
        EventRecord {
            entity_id: entity,
            context_id: ctx,
            t_start: t,
            duration: Some(0.5),
            activity: 0,
        }
    }

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const SUB: &str = "{\"origin_iso\":\"2020-01-01T00:00:00Z\",\"n_activities\":2}\n\
        {\"context_id\":0,\"coords\":[0.0,0.0],\"activity_label\":0}\n\
        {\"context_id\":1,\"coords\":[1.0,1.0],\"activity_label\":1}\n";

    #[test]
    fn empty_event_file_gives_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_tmp(&dir, "s.jsonl", SUB);
        let e = write_tmp(&dir, "e.jsonl", "");
        let c = load_corpus(&e, &s).unwrap();
        assert!(c.events.is_empty());
        assert_eq!(c.substrate.len(), 2);
    }

    #[test]
    fn out_of_order_events_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_tmp(&dir, "s.jsonl", SUB);
        let body = "{\"entity_id\":3,\"context_id\":0,\"t_start\":5.0,\"duration\":null,\"activity\":0}\n\
            {\"entity_id\":3,\"context_id\":1,\"t_start\":1.0,\"duration\":2.0,\"activity\":1}\n\
            {\"entity_id\":3,\"context_id\":0,\"t_start\":3.0,\"duration\":null,\"activity\":0}\n";
        let e = write_tmp(&dir, "e.jsonl", body);
        let c = load_corpus(&e, &s).unwrap();
        let ts: Vec<f64> = c.events.iter().map(|e| e.t_start).collect();
        assert_eq!(ts, vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn dangling_context_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_tmp(&dir, "s.jsonl", SUB);
        let body = "{\"entity_id\":0,\"context_id\":0,\"t_start\":1.0,\"duration\":null,\"activity\":0}\n\
            {\"entity_id\":0,\"context_id\":9,\"t_start\":2.0,\"duration\":null,\"activity\":0}\n";
        let e = write_tmp(&dir, "e.jsonl", body);
        match load_corpus(&e, &s) {
            Err(SchemaError::DanglingContext { line, context_id, .. }) => {
                assert_eq!((line, context_id), (2, 9));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_and_negative_duration() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_tmp(&dir, "s.jsonl", SUB);
        let e = write_tmp(&dir, "e.jsonl", "{\"entity_id\":0}\n");
        assert!(matches!(load_corpus(&e, &s), Err(SchemaError::Parse { line: 1, .. })));
        let e = write_tmp(
            &dir,
            "e2.jsonl",
            "{\"entity_id\":0,\"context_id\":0,\"t_start\":1.0,\"duration\":-1.0,\"activity\":0}\n",
        );
        assert!(matches!(load_corpus(&e, &s), Err(SchemaError::NegativeDuration { .. })));
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_tmp(&dir, "s.jsonl", SUB);
        let body = "{\"entity_id\":1,\"context_id\":1,\"t_start\":0.1,\"duration\":null,\"activity\":1}\n\
            {\"entity_id\":0,\"context_id\":0,\"t_start\":7.25,\"duration\":1e-3,\"activity\":0}\n";
        let e = write_tmp(&dir, "e.jsonl", body);
        let c = load_corpus(&e, &s).unwrap();
        let (e2, s2) = (dir.path().join("e2.jsonl"), dir.path().join("s2.jsonl"));
        save_corpus(&c, &e2, &s2, None).unwrap();
        let c2 = load_corpus(&e2, &s2).unwrap();
        assert_eq!(c, c2);
        let (e3, s3) = (dir.path().join("e3.jsonl"), dir.path().join("s3.jsonl"));
        save_corpus(&c2, &e3, &s3, None).unwrap();
        assert_eq!(std::fs::read(&e2).unwrap(), std::fs::read(&e3).unwrap());
        assert_eq!(std::fs::read(&s2).unwrap(), std::fs::read(&s3).unwrap());
    }

    #[test]
    fn labels_follow_canonical_order_and_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_tmp(&dir, "s.jsonl", SUB);
        let body = "{\"entity_id\":0,\"context_id\":0,\"t_start\":9.0,\"duration\":null,\"activity\":0,\"anomaly\":1}\n\
            {\"entity_id\":0,\"context_id\":0,\"t_start\":1.0,\"duration\":null,\"activity\":0,\"anomaly\":0}\n";
        let e = write_tmp(&dir, "e.jsonl", body);
        let c = load_corpus(&e, &s).unwrap();
        let before = label_reads();
        let labels = read_anomaly_labels(&e, &c.substrate).unwrap();
        assert_eq!(labels, vec![false, true]);
        assert!(label_reads() > before);
    }

    #[test]
    fn window_partition_examples() {
        for (n, expect) in [(70usize, vec![32, 32, 6]), (32, vec![32]), (5, vec![5])] {
            let events: Vec<_> = (0..n).map(|i| ev(0, 0, i as f64)).collect();
            let c = Corpus::new(substrate(1), events);
            let rows: Vec<usize> = (0..n).collect();
            let w = chunk_windows(&c, &rows, 32).unwrap();
            let sizes: Vec<usize> = w.iter().map(EventWindow::n_real).collect();
            assert_eq!(sizes, expect);
            let last = w.last().unwrap().pad_mask();
            let pads = last.iter().filter(|&&m| m).count();
            assert_eq!(pads, 32 - expect.last().unwrap());
            assert!(last.iter().skip_while(|&&m| !m).all(|&m| m));
        }
        let c = Corpus::new(substrate(1), vec![ev(0, 0, 0.0)]);
        assert!(chunk_windows(&c, &[0], 0).is_err());
    }

    #[test]
    fn ten_event_split_counts() {
        let events: Vec<_> = (0..10).map(|i| ev(0, 0, i as f64)).collect();
        let c = Corpus::new(substrate(1), events);
        let s = temporal_split(&c, 0.9, 0.2, ValPlacement::Head).unwrap();
        // prefix floor(0.9 * 10) = 9, val floor(0.2 * 9) = 1
        assert_eq!(s.training_partition().len(), 9);
        assert_eq!(s.val, vec![0]);
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.test, vec![9]);
        let tail = temporal_split(&c, 0.9, 0.2, ValPlacement::Tail).unwrap();
        assert_eq!(tail.val, vec![8]);
    }

    #[test]
    fn equal_timestamps_split_by_input_order() {
        let events: Vec<_> = (0..10).map(|i| ev(0, i % 2, 4.0)).collect();
        let c = Corpus::new(substrate(2), events.clone());
        assert_eq!(c.events, events);
        let s = temporal_split(&c, 0.9, 0.2, ValPlacement::Head).unwrap();
        assert_eq!(s.test, vec![9]);
    }

    #[test]
    fn fraction_bounds() {
        let c = Corpus::new(substrate(1), vec![ev(0, 0, 0.0)]);
        assert!(temporal_split(&c, 1.0, 0.2, ValPlacement::Head).is_err());
        assert!(temporal_split(&c, 0.9, 0.0, ValPlacement::Head).is_err());
    }

    #[test]
    fn nearest_prefers_smallest_id_on_ties() {
        let s = Substrate::new(
            "o".into(),
            1,
            vec![
                ContextRecord { context_id: 5, coords: [1.0, 0.0], activity_label: 0 },
                ContextRecord { context_id: 2, coords: [-1.0, 0.0], activity_label: 0 },
            ],
        )
        .unwrap();
        assert_eq!(s.nearest([0.0, 0.0]).context_id, 2);
    }

    proptest! {
        #[test]
        fn windows_cover_and_split_is_chronological(
            times in proptest::collection::vec((0u32..4, 0.0f64..100.0), 0..200),
            t in 1usize..20,
        ) {
            let events: Vec<_> = times.iter().map(|&(u, t)| ev(u, 0, t)).collect();
            let c = Corpus::new(substrate(1), events);
            let rows: Vec<usize> = (0..c.events.len()).collect();
            let windows = chunk_windows(&c, &rows, t).unwrap();
            let covered: usize = windows.iter().map(EventWindow::n_real).sum();
            prop_assert_eq!(covered, c.events.len());
            for w in &windows {
                prop_assert!(w.events.windows(2).all(|p| p[0].t_start <= p[1].t_start));
            }
            let s = temporal_split(&c, 0.9, 0.2, ValPlacement::Head).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), c.events.len());
            for (u, train) in rows_by_entity(&c, &s.training_partition()) {
                let max_train = train.iter().map(|&r| c.events[r].t_start).fold(f64::MIN, f64::max);
                for &r in &s.test {
                    if c.events[r].entity_id == u {
                        prop_assert!(max_train <= c.events[r].t_start);
                    }
                }
            }
        }

        #[test]
        fn event_times_round_trip_bit_exactly(
            raw in proptest::collection::vec((-1e12f64..1e12, proptest::option::of(0.0f64..1e6)), 1..50),
        ) {
            let events: Vec<_> = raw
                .iter()
                .map(|&(t, d)| EventRecord { duration: d, ..ev(0, 0, t) })
                .collect();
            let c = Corpus::new(substrate(1), events);
            let dir = tempfile::tempdir().unwrap();
            let (e, s) = (dir.path().join("e.jsonl"), dir.path().join("s.jsonl"));
            save_corpus(&c, &e, &s, None).unwrap();
            let back = load_corpus(&e, &s).unwrap();
            for (a, b) in c.events.iter().zip(&back.events) {
                prop_assert_eq!(a.t_start.to_bits(), b.t_start.to_bits());
                prop_assert_eq!(a.duration.map(f64::to_bits), b.duration.map(f64::to_bits));
            }
        }
    }
}
