//! Context-keyed inverted index and temporally nearest peer retrieval.
//!
//! The on-disk layout is described in `docs/index-format.md`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::schema::{Corpus, EventRecord};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("index format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    fn tag(self) -> u8 {
        match self {
            Partition::Train => 0,
            Partition::Val => 1,
            Partition::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Partition::Train),
            1 => Some(Partition::Val),
            2 => Some(Partition::Test),
            _ => None,
        }
    }
}

/// Bucket per context of corpus row positions, each bucket ordered by
/// `(t_start, row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoocIndex {
    pub partition: Partition,
    buckets: BTreeMap<u32, Vec<u32>>,
}

/// Peers of one focal event. `mask[0]` is the focal slot and never masked;
/// `mask[c]` is true for padded peer slots.
#[derive(Clone, Debug, PartialEq)]
pub struct PeerSet {
    pub peers: Vec<usize>,
    pub mask: Vec<bool>,
}

impl PeerSet {
    pub fn empty(c: usize) -> Self {
        let mut mask = vec![true; c];
        mask[0] = false;
        Self { peers: Vec::new(), mask }
    }
}

/// Peer ranking distance: start gap plus end gap, point events ending at
/// their start.
pub fn peer_distance(a: &EventRecord, b: &EventRecord) -> f64 {
    (a.t_start - b.t_start).abs() + (a.t_end() - b.t_end()).abs()
}

/// Overlap filter. The fraction is intersection length over the focal
/// interval length; a point focal event passes when it lies inside the
/// candidate interval.
pub fn passes_overlap(focal: &EventRecord, cand: &EventRecord, min_overlap: f64) -> bool {
    if min_overlap <= 0.0 {
        return true;
    }
    let len = focal.t_end() - focal.t_start;
    if len <= 0.0 {
        return cand.t_start <= focal.t_start && focal.t_start <= cand.t_end();
    }
    let inter = (focal.t_end().min(cand.t_end()) - focal.t_start.max(cand.t_start)).max(0.0);
    inter / len >= min_overlap
}

#[derive(PartialEq)]
struct Ranked(f64, usize);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl CoocIndex {
    /// Indexes the given rows of `corpus`.
    pub fn build(corpus: &Corpus, rows: &[usize], partition: Partition) -> Self {
        let mut buckets: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &r in rows {
            buckets.entry(corpus.events[r].context_id).or_default().push(r as u32);
        }
        for b in buckets.values_mut() {
            b.sort_by(|&x, &y| {
                corpus.events[x as usize]
                    .t_start
                    .total_cmp(&corpus.events[y as usize].t_start)
                    .then(x.cmp(&y))
            });
        }
        Self { partition, buckets }
    }

    pub fn bucket(&self, context_id: u32) -> &[u32] {
        self.buckets.get(&context_id).map_or(&[], Vec::as_slice)
    }

    pub fn n_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn n_events(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn buckets(&self) -> impl Iterator<Item = (u32, &[u32])> {
        self.buckets.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// The `c - 1` nearest events at the focal context from other entities,
    /// by [`peer_distance`] with ties on ascending row. Scans outward from the
    /// focal start time and stops once the start gap alone exceeds the worst
    /// kept distance.
    pub fn retrieve_peers(&self, events: &[EventRecord], focal: &EventRecord, c: usize, min_overlap: f64) -> PeerSet {
        assert!(c >= 1, "clique size must be at least 1");
        let k = c - 1;
        let bucket = self.bucket(focal.context_id);
        if k == 0 || bucket.is_empty() {
            return PeerSet::empty(c);
        }
        let split = bucket.partition_point(|&r| events[r as usize].t_start < focal.t_start);
        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
        let consider = |r: u32, heap: &mut BinaryHeap<Ranked>| {
            let e = &events[r as usize];
            if e.entity_id == focal.entity_id || !passes_overlap(focal, e, min_overlap) {
                return;
            }
            let cand = Ranked(peer_distance(focal, e), r as usize);
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(cand);
            }
        };
        let (mut lo, mut hi) = (split, split);
        loop {
            let bound = |heap: &BinaryHeap<Ranked>| if heap.len() < k { f64::INFINITY } else { heap.peek().unwrap().0 };
            let gap_lo = (lo > 0).then(|| focal.t_start - events[bucket[lo - 1] as usize].t_start);
            let gap_hi = (hi < bucket.len()).then(|| events[bucket[hi] as usize].t_start - focal.t_start);
            let take_lo = match (gap_lo, gap_hi) {
                (None, None) => break,
                (Some(a), Some(b)) => a <= b,
                (Some(_), None) => true,
                (None, Some(_)) => false,
            };
            let gap = if take_lo { gap_lo.unwrap() } else { gap_hi.unwrap() };
            if gap > bound(&heap) {
                break;
            }
            if take_lo {
                lo -= 1;
                consider(bucket[lo], &mut heap);
            } else {
                consider(bucket[hi], &mut heap);
                hi += 1;
            }
        }
        let peers: Vec<usize> = heap.into_sorted_vec().into_iter().map(|r| r.1).collect();
        let mut mask = vec![true; c];
        for m in mask.iter_mut().take(peers.len() + 1) {
            *m = false;
        }
        PeerSet { peers, mask }
    }
}

pub const MAGIC: &[u8; 8] = b"MESESIDX";
pub const VERSION: u32 = 1;

pub fn write_index(w: &mut impl Write, idx: &CoocIndex) -> Result<(), IndexError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[idx.partition.tag(), 0, 0, 0])?;
    w.write_all(&(idx.buckets.len() as u64).to_le_bytes())?;
    w.write_all(&(idx.n_events() as u64).to_le_bytes())?;
    let mut offset = 0u64;
    for (&ctx, b) in &idx.buckets {
        w.write_all(&ctx.to_le_bytes())?;
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&(b.len() as u64).to_le_bytes())?;
        offset += b.len() as u64;
    }
    for b in idx.buckets.values() {
        for r in b {
            w.write_all(&r.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], IndexError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_index(r: &mut impl Read) -> Result<CoocIndex, IndexError> {
    if &take::<8>(r)? != MAGIC {
        return Err(IndexError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(IndexError::Format(format!("unsupported version {version}")));
    }
    let tag = take::<4>(r)?;
    let partition = Partition::from_tag(tag[0]).ok_or_else(|| IndexError::Format("bad partition tag".into()))?;
    let n_buckets = u64::from_le_bytes(take(r)?) as usize;
    let n_pos = u64::from_le_bytes(take(r)?) as usize;
    let mut table = Vec::with_capacity(n_buckets.min(1 << 20));
    for _ in 0..n_buckets {
        let ctx = u32::from_le_bytes(take(r)?);
        let off = u64::from_le_bytes(take(r)?) as usize;
        let len = u64::from_le_bytes(take(r)?) as usize;
        table.push((ctx, off, len));
    }
    let mut flat = Vec::with_capacity(n_pos.min(1 << 24));
    for _ in 0..n_pos {
        flat.push(u32::from_le_bytes(take(r)?));
    }
    let mut buckets = BTreeMap::new();
    for (ctx, off, len) in table {
        let end = off.checked_add(len).filter(|&e| e <= flat.len());
        let end = end.ok_or_else(|| IndexError::Format(format!("bucket {ctx} out of range")))?;
        buckets.insert(ctx, flat[off..end].to_vec());
    }
    Ok(CoocIndex { partition, buckets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ContextRecord, Substrate};
    use proptest::prelude::*;

    fn corpus(events: Vec<EventRecord>) -> Corpus {
        let s = Substrate::new(
            "o".into(),
            1,
            (0..4)
                .map(|i| ContextRecord { context_id: i, coords: [0.0, i as f64], activity_label: 0 })
                .collect(),
        )
        .unwrap();
        Corpus::new(s, events)
    }

    fn ev(u: u32, ctx: u32, t: f64, d: Option<f64>) -> EventRecord {
        EventRecord { entity_id: u, context_id: ctx, t_start: t, duration: d, activity: 0 }
    }

    /// Full-scan reference with the same distance, filter and tie rule.
    fn brute(events: &[EventRecord], rows: &[usize], focal: &EventRecord, c: usize, min_overlap: f64) -> Vec<usize> {
        let mut cands: Vec<(f64, usize)> = rows
            .iter()
            .filter(|&&r| {
                let e = &events[r];
                e.context_id == focal.context_id && e.entity_id != focal.entity_id && passes_overlap(focal, e, min_overlap)
            })
            .map(|&r| (peer_distance(focal, &events[r]), r))
            .collect();
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        cands.into_iter().take(c - 1).map(|x| x.1).collect()
    }

    #[test]
    fn empty_and_single_bucket() {
        let c = corpus(vec![]);
        let idx = CoocIndex::build(&c, &[], Partition::Train);
        assert_eq!(idx.n_buckets(), 0);
        let c = corpus((0..5).map(|i| ev(i, 2, 5.0 - i as f64, None)).collect());
        let rows: Vec<usize> = (0..5).collect();
        let idx = CoocIndex::build(&c, &rows, Partition::Train);
        assert_eq!(idx.n_buckets(), 1);
        let b = idx.bucket(2);
        assert_eq!(b.len(), 5);
        assert!(b.windows(2).all(|w| c.events[w[0] as usize].t_start <= c.events[w[1] as usize].t_start));
    }

    #[test]
    fn sole_visitor_gets_masked_peers() {
        let c = corpus(vec![ev(0, 1, 0.0, None), ev(0, 1, 3.0, None), ev(1, 2, 0.0, None)]);
        let idx = CoocIndex::build(&c, &[0, 1, 2], Partition::Train);
        let p = idx.retrieve_peers(&c.events, &c.events[0], 4, 0.0);
        assert_eq!(p, PeerSet::empty(4));
        assert_eq!(p.mask, vec![false, true, true, true]);
    }

    #[test]
    fn keeps_two_nearest_of_three() {
        let c = corpus(vec![
            ev(0, 0, 10.0, None),
            ev(1, 0, 9.5, None),  // distance 1
            ev(2, 0, 11.0, None), // distance 2
            ev(3, 0, 8.5, None),  // distance 3
        ]);
        let rows: Vec<usize> = (0..4).collect();
        let idx = CoocIndex::build(&c, &rows, Partition::Train);
        let p = idx.retrieve_peers(&c.events, &c.events[0], 3, 0.0);
        assert_eq!(p.peers, vec![1, 2]);
        assert_eq!(p.mask, vec![false, false, false]);
    }

    #[test]
    fn ties_go_to_smaller_row() {
        let c = corpus(vec![ev(0, 0, 10.0, None), ev(1, 0, 9.0, None), ev(2, 0, 11.0, None)]);
        let idx = CoocIndex::build(&c, &[0, 1, 2], Partition::Train);
        let p = idx.retrieve_peers(&c.events, &c.events[0], 2, 0.0);
        assert_eq!(p.peers, vec![1]);
    }

    #[test]
    fn overlap_filter_and_point_containment() {
        let focal = ev(0, 0, 10.0, Some(2.0));
        assert!(passes_overlap(&focal, &ev(1, 0, 11.0, Some(5.0)), 0.5));
        assert!(!passes_overlap(&focal, &ev(1, 0, 11.5, Some(5.0)), 0.5));
        let point = ev(0, 0, 10.0, None);
        assert!(passes_overlap(&point, &ev(1, 0, 9.0, Some(1.0)), 0.1));
        assert!(!passes_overlap(&point, &ev(1, 0, 10.5, Some(1.0)), 0.1));
    }

    #[test]
    fn file_round_trip() {
        let c = corpus((0..20).map(|i| ev(i % 3, i % 4, i as f64 * 0.7, None)).collect());
        let rows: Vec<usize> = (0..20).collect();
        let idx = CoocIndex::build(&c, &rows, Partition::Val);
        let mut buf = Vec::new();
        write_index(&mut buf, &idx).unwrap();
        assert_eq!(read_index(&mut buf.as_slice()).unwrap(), idx);
        buf[0] = b'X';
        assert!(read_index(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            raw in proptest::collection::vec((0u32..6, 0u32..3, 0u32..40, proptest::option::of(0u32..6)), 1..150),
            c in 1usize..6,
            min_overlap in prop_oneof![Just(0.0), 0.0f64..1.0],
        ) {
            // integer-valued times make distance ties common
            let events: Vec<EventRecord> = raw.iter().map(|&(u, x, t, d)| ev(u, x, t as f64, d.map(f64::from))).collect();
            let c_ = corpus(events);
            let rows: Vec<usize> = (0..c_.events.len()).filter(|r| r % 5 != 0).collect();
            let idx = CoocIndex::build(&c_, &rows, Partition::Train);
            prop_assert_eq!(idx.n_events(), rows.len());
            for f in &c_.events {
                let p = idx.retrieve_peers(&c_.events, f, c, min_overlap);
                prop_assert_eq!(&p.peers, &brute(&c_.events, &rows, f, c, min_overlap));
                prop_assert!(p.peers.iter().all(|&r| c_.events[r].entity_id != f.entity_id));
                let bigger = idx.retrieve_peers(&c_.events, f, c + 1, min_overlap);
                prop_assert!(p.peers.iter().all(|r| bigger.peers.contains(r)));
            }
        }
    }
}
