//! Factorized encoder over the clique tensor: per block, attention across the
//! feature tokens of every slot, a one-way focal-to-peer cross-attention, and
//! attention along the sequence on the focal slot.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkernel::{Bound, Graph, KernelError, ParamId, ParamRegistry, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Clique size: focal slot plus up to `clique - 1` peers.
    pub clique: usize,
    pub window: usize,
    /// Feed-forward width; zero means `d`.
    pub d_ff: usize,
    pub bypass_cooc: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d: 1040,
            blocks: 6,
            heads: 4,
            clique: 4,
            window: 32,
            d_ff: 0,
            bypass_cooc: false,
        }
    }
}

impl BackboneConfig {
    pub fn d_ff(&self) -> usize {
        if self.d_ff == 0 {
            self.d
        } else {
            self.d_ff
        }
    }

    /// Token width for `f` tokens per event.
    pub fn d_f(&self, f: usize) -> usize {
        self.d / f
    }

    pub fn validate(&self, f: usize) -> Result<(), KernelError> {
        let bad = |m: String| Err(KernelError::Shape(m));
        if f == 0 || !self.d.is_multiple_of(f) {
            return bad(format!("d = {} is not divisible by F = {f}", self.d));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) || !self.d_f(f).is_multiple_of(self.heads) {
            return bad(format!("d = {} and d_f = {} must be divisible by H = {}", self.d, self.d_f(f), self.heads));
        }
        if self.clique == 0 || self.window == 0 {
            return bad("clique and window must be positive".into());
        }
        Ok(())
    }
}

/// A pre-LN encoder layer: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub width: usize,
    pub heads: usize,
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    w1: (ParamId, ParamId),
    w2: (ParamId, ParamId),
}

fn dense(reg: &mut ParamRegistry, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<(ParamId, ParamId), KernelError> {
    let w = reg.register_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?;
    let b = reg.register_const(&format!("{name}.b"), &[fan_out], 0.0)?;
    Ok((w, b))
}

fn norm(reg: &mut ParamRegistry, name: &str, width: usize) -> Result<(ParamId, ParamId), KernelError> {
    Ok((
        reg.register_const(&format!("{name}.gamma"), &[width], 1.0)?,
        reg.register_const(&format!("{name}.beta"), &[width], 0.0)?,
    ))
}

impl EncoderLayer {
    pub fn register(reg: &mut ParamRegistry, name: &str, width: usize, d_ff: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, KernelError> {
        Ok(Self {
            width,
            heads,
            ln1: norm(reg, &format!("{name}.ln1"), width)?,
            wq: dense(reg, &format!("{name}.q"), width, width, rng)?,
            wk: dense(reg, &format!("{name}.k"), width, width, rng)?,
            wv: dense(reg, &format!("{name}.v"), width, width, rng)?,
            wo: dense(reg, &format!("{name}.o"), width, width, rng)?,
            ln2: norm(reg, &format!("{name}.ln2"), width)?,
            w1: dense(reg, &format!("{name}.ff1"), width, d_ff, rng)?,
            w2: dense(reg, &format!("{name}.ff2"), d_ff, width, rng)?,
        })
    }

    fn lin(g: &mut Graph, p: &Bound, x: Var, w: (ParamId, ParamId)) -> Result<Var, KernelError> {
        g.linear(x, p.get(w.0), Some(p.get(w.1)))
    }

    /// `x: [n, lq, w]` queries; `kv: [n, lk, w]` keys and values, or `None`
    /// for self-attention.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        kv: Option<Var>,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var, KernelError> {
        let hq = g.layer_norm(x, p.get(self.ln1.0), p.get(self.ln1.1), LN_EPS)?;
        let hk = match kv {
            Some(kv) => g.layer_norm(kv, p.get(self.ln1.0), p.get(self.ln1.1), LN_EPS)?,
            None => hq,
        };
        let q = Self::lin(g, p, hq, self.wq)?;
        let k = Self::lin(g, p, hk, self.wk)?;
        let v = Self::lin(g, p, hk, self.wv)?;
        let a = g.attention(q, k, v, self.heads, key_mask, causal)?;
        let o = Self::lin(g, p, a, self.wo)?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, p.get(self.ln2.0), p.get(self.ln2.1), LN_EPS)?;
        let h = Self::lin(g, p, h, self.w1)?;
        let h = g.relu(h);
        let h = Self::lin(g, p, h, self.w2)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub feat: EncoderLayer,
    pub cross: EncoderLayer,
    pub seq: EncoderLayer,
}

/// Graph-level input: the focal slot and the peer slots as separate
/// tensors. `peer_mask[(b * T + t) * C + c]` is true for padded peers and
/// `pad_mask[b * T + t]` for padded sequence positions.
#[derive(Clone, Debug)]
pub struct CliqueInput {
    pub b: usize,
    pub t: usize,
    pub c: usize,
    /// `[B, T, F, d_f]`.
    pub focal: Var,
    /// `[B, T, C - 1, F, d_f]`, absent when `C = 1`.
    pub peers: Option<Var>,
    pub peer_mask: Vec<bool>,
    pub pad_mask: Vec<bool>,
}

/// Value-level rank-5 clique tensor `X[B, T, F, C, d_f]` with its masks.
#[derive(Clone, Debug, PartialEq)]
pub struct CliqueTensor {
    pub x: Tensor,
    pub peer_mask: Vec<bool>,
    pub pad_mask: Vec<bool>,
}

impl CliqueTensor {
    pub fn new(x: Tensor, peer_mask: Vec<bool>, pad_mask: Vec<bool>) -> Result<Self, KernelError> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(KernelError::Shape(format!("clique tensor must be rank 5, got {s:?}")));
        }
        let (b, t, c) = (s[0], s[1], s[3]);
        if peer_mask.len() != b * t * c || pad_mask.len() != b * t {
            return Err(KernelError::Shape("mask lengths do not match the tensor".into()));
        }
        if peer_mask.chunks(c).any(|m| m[0]) {
            return Err(KernelError::Shape("the focal slot can never be masked".into()));
        }
        Ok(Self { x, peer_mask, pad_mask })
    }

    /// Records the tensor as a constant and splits it into focal and peers.
    pub fn to_input(&self, g: &mut Graph) -> Result<CliqueInput, KernelError> {
        let x = g.constant(self.x.clone());
        self.split(g, x)
    }

    /// Like [`Self::to_input`] but differentiable with respect to the values.
    pub fn to_differentiable_input(&self, g: &mut Graph) -> Result<(Var, CliqueInput), KernelError> {
        let x = g.input(self.x.clone());
        Ok((x, self.split(g, x)?))
    }

    fn split(&self, g: &mut Graph, x: Var) -> Result<CliqueInput, KernelError> {
        let s = self.x.shape().to_vec();
        let (b, t, f, c, d_f) = (s[0], s[1], s[2], s[3], s[4]);
        let xc = g.permute(x, &[0, 1, 3, 2, 4])?;
        let focal = g.slice(xc, 2, 0, 1)?;
        let focal = g.reshape(focal, &[b, t, f, d_f])?;
        let peers = if c > 1 { Some(g.slice(xc, 2, 1, c - 1)?) } else { None };
        Ok(CliqueInput {
            b,
            t,
            c,
            focal,
            peers,
            peer_mask: self.peer_mask.clone(),
            pad_mask: self.pad_mask.clone(),
        })
    }
}

/// Focal and peer tensors after each sub-layer of one block.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub after_feat: (Var, Option<Var>),
    pub after_cross: (Var, Option<Var>),
    pub after_seq: (Var, Option<Var>),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub f: usize,
    pub d_f: usize,
    pub blocks: Vec<Block>,
}

impl Backbone {
    pub fn register(reg: &mut ParamRegistry, cfg: &BackboneConfig, f: usize, rng: &mut impl Rng) -> Result<Self, KernelError> {
        cfg.validate(f)?;
        let d_f = cfg.d_f(f);
        let blocks = (0..cfg.blocks)
            .map(|l| {
                Ok(Block {
                    feat: EncoderLayer::register(reg, &format!("bb.{l}.feat"), d_f, cfg.d_ff(), cfg.heads, rng)?,
                    cross: EncoderLayer::register(reg, &format!("bb.{l}.cross"), d_f, cfg.d_ff(), cfg.heads, rng)?,
                    seq: EncoderLayer::register(reg, &format!("bb.{l}.seq"), d_f, cfg.d_ff(), cfg.heads, rng)?,
                })
            })
            .collect::<Result<_, KernelError>>()?;
        Ok(Self { cfg: cfg.clone(), f, d_f, blocks })
    }

    /// Attention across the `F` tokens of every slot.
    pub fn feature_attention(&self, g: &mut Graph, p: &Bound, l: usize, x: Var) -> Result<Var, KernelError> {
        let s = g.shape(x).to_vec();
        let slots: usize = s[..s.len() - 2].iter().product();
        let flat = g.reshape(x, &[slots, self.f, self.d_f])?;
        let y = self.blocks[l].feat.forward(g, p, flat, None, None, false)?;
        g.reshape(y, &s)
    }

    /// The focal slot of every `(b, t, f)` queries all `C` slots at that
    /// token; only the focal slot is rewritten.
    pub fn peer_cross_attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        l: usize,
        focal: Var,
        peers: Option<Var>,
        input: &CliqueInput,
    ) -> Result<Var, KernelError> {
        if self.cfg.bypass_cooc {
            return Ok(focal);
        }
        let (b, t, c, f, d_f) = (input.b, input.t, input.c, self.f, self.d_f);
        let n = b * t * f;
        let q = g.reshape(focal, &[n, 1, d_f])?;
        let keys = match peers {
            Some(pv) => {
                let pp = g.permute(pv, &[0, 1, 3, 2, 4])?;
                let pp = g.reshape(pp, &[n, c - 1, d_f])?;
                g.concat(&[q, pp], 1)?
            }
            None => q,
        };
        let mut mask = Vec::with_capacity(n * c);
        for bt in 0..b * t {
            for _ in 0..f {
                mask.extend_from_slice(&input.peer_mask[bt * c..(bt + 1) * c]);
            }
        }
        let y = self.blocks[l].cross.forward(g, p, q, Some(keys), Some(&mask), false)?;
        g.reshape(y, &[b, t, f, d_f])
    }

    /// Attention along `T` on the focal slot, each token position attending
    /// to the same token of the other events.
    pub fn sequence_attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        l: usize,
        focal: Var,
        input: &CliqueInput,
        causal: bool,
    ) -> Result<Var, KernelError> {
        let (b, t, f, d_f) = (input.b, input.t, self.f, self.d_f);
        let x = g.permute(focal, &[0, 2, 1, 3])?;
        let x = g.reshape(x, &[b * f, t, d_f])?;
        let mut mask = Vec::with_capacity(b * f * t);
        for bi in 0..b {
            for _ in 0..f {
                mask.extend_from_slice(&input.pad_mask[bi * t..(bi + 1) * t]);
            }
        }
        let y = self.blocks[l].seq.forward(g, p, x, None, Some(&mask), causal)?;
        let y = g.reshape(y, &[b, f, t, d_f])?;
        g.permute(y, &[0, 2, 1, 3])
    }

    /// Runs every block and returns `H: [B, T, d]`, plus per-block traces
    /// when `trace` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: &CliqueInput,
        causal: bool,
        trace: bool,
    ) -> Result<(Var, Vec<BlockTrace>), KernelError> {
        let mut focal = input.focal;
        let mut peers = input.peers;
        let mut traces = Vec::new();
        for l in 0..self.blocks.len() {
            focal = self.feature_attention(g, p, l, focal)?;
            if let Some(pv) = peers {
                peers = Some(self.feature_attention(g, p, l, pv)?);
            }
            let after_feat = (focal, peers);
            focal = self.peer_cross_attention(g, p, l, focal, peers, input)?;
            let after_cross = (focal, peers);
            focal = self.sequence_attention(g, p, l, focal, input, causal)?;
            if trace {
                traces.push(BlockTrace {
                    after_feat,
                    after_cross,
                    after_seq: (focal, peers),
                });
            }
        }
        let h = g.reshape(focal, &[input.b, input.t, self.cfg.d])?;
        Ok((h, traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            d: 12,
            blocks: 2,
            heads: 2,
            clique: 3,
            window: 4,
            d_ff: 0,
            bypass_cooc: false,
        }
    }

    fn setup(cfg: &BackboneConfig, f: usize) -> (ParamRegistry, Backbone) {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bb = Backbone::register(&mut reg, cfg, f, &mut rng).unwrap();
        (reg, bb)
    }

    fn clique(b: usize, t: usize, f: usize, c: usize, d_f: usize, seed: u64) -> CliqueTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * t * f * c * d_f;
        let x = Tensor::new(vec![b, t, f, c, d_f], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut peer_mask = vec![false; b * t * c];
        for bt in 0..b * t {
            for ci in 1..c {
                peer_mask[bt * c + ci] = (bt + ci) % 3 == 0;
            }
        }
        let mut pad_mask = vec![false; b * t];
        pad_mask[b * t - 1] = true;
        CliqueTensor::new(x, peer_mask, pad_mask).unwrap()
    }

    fn run(reg: &ParamRegistry, bb: &Backbone, ct: &CliqueTensor) -> Vec<f64> {
        let mut g = Graph::new();
        let p = g.bind(reg);
        let input = ct.to_input(&mut g).unwrap();
        let (h, _) = bb.forward(&mut g, &p, &input, false, false).unwrap();
        g.value(h).data().to_vec()
    }

    #[test]
    fn full_profile_width_divides() {
        let c = BackboneConfig::default();
        assert_eq!(c.d_f(5), 208);
        assert!(c.validate(5).is_ok());
        assert!(BackboneConfig { d: 41, ..cfg() }.validate(5).is_err());
    }

    #[test]
    fn output_shape_and_zero_blocks() {
        let (reg, bb) = setup(&cfg(), 3);
        let ct = clique(2, 4, 3, 3, 4, 1);
        assert_eq!(run(&reg, &bb, &ct).len(), 2 * 4 * 12);
        let (reg0, bb0) = setup(&BackboneConfig { blocks: 0, ..cfg() }, 3);
        let out = run(&reg0, &bb0, &ct);
        // the flattened focal slot, token-major per event
        let x = ct.x.data();
        for bt in 0..8 {
            for f in 0..3 {
                for j in 0..4 {
                    let src = (((bt * 3) + f) * 3) * 4 + j;
                    assert_eq!(out[bt * 12 + f * 4 + j], x[src]);
                }
            }
        }
    }

    #[test]
    fn masked_peer_and_pad_changes_do_not_leak() {
        let (reg, bb) = setup(&cfg(), 3);
        let ct = clique(2, 4, 3, 3, 4, 2);
        let base = run(&reg, &bb, &ct);
        let mut changed = ct.clone();
        let (t, f, c, d_f) = (4, 3, 3, 4);
        for bt in 0..8 {
            for ci in 1..c {
                if ct.peer_mask[bt * c + ci] {
                    for fi in 0..f {
                        for j in 0..d_f {
                            changed.x.data_mut()[((bt * f + fi) * c + ci) * d_f + j] = 7.5;
                        }
                    }
                }
            }
        }
        // the padded last position of batch 1
        let pad_bt = 2 * t - 1;
        for k in 0..f * c * d_f {
            changed.x.data_mut()[pad_bt * f * c * d_f + k] = -3.0;
        }
        let out = run(&reg, &bb, &changed);
        for bt in 0..8 {
            if bt == pad_bt {
                continue;
            }
            assert_eq!(&out[bt * 12..(bt + 1) * 12], &base[bt * 12..(bt + 1) * 12]);
        }
    }

    #[test]
    fn cross_attention_with_no_peers_attends_to_self() {
        let (reg, bb) = setup(&cfg(), 3);
        let mut ct = clique(1, 2, 3, 3, 4, 3);
        for bt in 0..2 {
            ct.peer_mask[bt * 3 + 1] = true;
            ct.peer_mask[bt * 3 + 2] = true;
        }
        let mut g = Graph::new();
        let p = g.bind(&reg);
        let input = ct.to_input(&mut g).unwrap();
        let y = bb.peer_cross_attention(&mut g, &p, 0, input.focal, input.peers, &input).unwrap();
        // with the focal slot alone, attention returns its own value projection
        let solo = CliqueTensor::new(
            {
                let mut v = Vec::new();
                for bt in 0..2 {
                    for fi in 0..3 {
                        let base = (bt * 3 + fi) * 3 * 4;
                        v.extend_from_slice(&ct.x.data()[base..base + 4]);
                    }
                }
                Tensor::new(vec![1, 2, 3, 1, 4], v).unwrap()
            },
            vec![false; 2],
            vec![false; 2],
        )
        .unwrap();
        let mut g2 = Graph::new();
        let p2 = g2.bind(&reg);
        let in2 = solo.to_input(&mut g2).unwrap();
        let y2 = bb.peer_cross_attention(&mut g2, &p2, 0, in2.focal, None, &in2).unwrap();
        assert_eq!(g.value(y).data(), g2.value(y2).data());
    }

    #[test]
    fn focal_changes_never_reach_peers() {
        let (reg, bb) = setup(&cfg(), 3);
        let ct = clique(1, 4, 3, 3, 4, 4);
        let peers_of = |ct: &CliqueTensor| {
            let mut g = Graph::new();
            let p = g.bind(&reg);
            let input = ct.to_input(&mut g).unwrap();
            let (_, tr) = bb.forward(&mut g, &p, &input, false, true).unwrap();
            tr.iter()
                .flat_map(|b| [b.after_feat.1, b.after_cross.1, b.after_seq.1])
                .map(|v| g.value(v.unwrap()).data().to_vec())
                .collect::<Vec<_>>()
        };
        let base = peers_of(&ct);
        let mut changed = ct.clone();
        for bt in 0..4 {
            for fi in 0..3 {
                let at = (bt * 3 + fi) * 3 * 4;
                changed.x.data_mut()[at] += 1.0;
            }
        }
        assert_eq!(base, peers_of(&changed));
    }

    #[test]
    fn bypass_equals_skipping_cross_attention() {
        let c = BackboneConfig { bypass_cooc: true, ..cfg() };
        let (reg, bb) = setup(&c, 3);
        let ct = clique(2, 4, 3, 3, 4, 5);
        let out = run(&reg, &bb, &ct);
        // reference: feature then sequence sub-layers only
        let mut g = Graph::new();
        let p = g.bind(&reg);
        let input = ct.to_input(&mut g).unwrap();
        let mut focal = input.focal;
        for l in 0..2 {
            focal = bb.feature_attention(&mut g, &p, l, focal).unwrap();
            focal = bb.sequence_attention(&mut g, &p, l, focal, &input, false).unwrap();
        }
        assert_eq!(g.value(focal).data(), out.as_slice());
        // and the sub-layer is the identity on the whole tensor
        let mut g = Graph::new();
        let p = g.bind(&reg);
        let input = ct.to_input(&mut g).unwrap();
        let y = bb.peer_cross_attention(&mut g, &p, 0, input.focal, input.peers, &input).unwrap();
        assert_eq!(y, input.focal);
    }

    #[test]
    fn single_token_and_single_position() {
        let c = BackboneConfig { d: 4, heads: 2, window: 1, ..cfg() };
        let (reg, bb) = setup(&c, 1);
        let ct = clique(2, 1, 1, 3, 4, 6);
        let ct = CliqueTensor::new(ct.x, ct.peer_mask, vec![false; 2]).unwrap();
        assert_eq!(run(&reg, &bb, &ct).len(), 8);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let (reg, bb) = setup(&cfg(), 3);
        let ct = clique(2, 4, 3, 3, 4, 7);
        let out = run(&reg, &bb, &ct);
        let half = ct.x.len() / 2;
        let mut x = ct.x.data()[half..].to_vec();
        x.extend_from_slice(&ct.x.data()[..half]);
        let mut pm = ct.peer_mask[12..].to_vec();
        pm.extend_from_slice(&ct.peer_mask[..12]);
        let mut pad = ct.pad_mask[4..].to_vec();
        pad.extend_from_slice(&ct.pad_mask[..4]);
        let swapped = CliqueTensor::new(Tensor::new(ct.x.shape().to_vec(), x).unwrap(), pm, pad).unwrap();
        let out2 = run(&reg, &bb, &swapped);
        assert_eq!(&out2[..48], &out[48..]);
        assert_eq!(&out2[48..], &out[..48]);
    }

    #[test]
    fn causal_prefix_ignores_future() {
        let (reg, bb) = setup(&cfg(), 3);
        let ct = clique(1, 4, 3, 3, 4, 8);
        let ct = CliqueTensor::new(ct.x, ct.peer_mask, vec![false; 4]).unwrap();
        let run_causal = |ct: &CliqueTensor| {
            let mut g = Graph::new();
            let p = g.bind(&reg);
            let input = ct.to_input(&mut g).unwrap();
            let (h, _) = bb.forward(&mut g, &p, &input, true, false).unwrap();
            g.value(h).data().to_vec()
        };
        let base = run_causal(&ct);
        let mut changed = ct.clone();
        let per_pos = 3 * 3 * 4;
        for k in 0..per_pos {
            changed.x.data_mut()[3 * per_pos + k] += 0.5;
        }
        let out = run_causal(&changed);
        assert_eq!(&out[..36], &base[..36]);
        assert_ne!(&out[36..], &base[36..]);
    }
}
