//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: an op can only reference vars created before it. The
//! backward pass walks the tape once in reverse.

use super::params::{ParamId, ParamRegistry};
use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};
use super::KernelError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs shape is a suffix of lhs shape and repeats over the leading axes
    Suffix,
    /// rhs shape is a prefix of lhs shape; each rhs element covers a block
    Prefix,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batched: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    MulConst {
        a: Var,
        c: Vec<f64>,
        bcast: Bcast,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Sin {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Softplus {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    ClampMin {
        a: Var,
        min: f64,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        map: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: Vec<usize>,
    },
    Slice {
        a: Var,
        outer: usize,
        src_inner: usize,
        offset: usize,
        inner: usize,
    },
    SumAll {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    SumLast {
        a: Var,
        width: usize,
    },
    Softmax {
        a: Var,
        mask: Option<Vec<bool>>,
        width: usize,
    },
    LogSoftmax {
        a: Var,
        mask: Option<Vec<bool>>,
        probs: Vec<f64>,
        width: usize,
    },
    LogSumExp {
        a: Var,
        probs: Vec<f64>,
        width: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        width: usize,
    },
    L2Normalize {
        a: Var,
        norms: Vec<f64>,
        width: usize,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
        width: usize,
    },
    Pick {
        a: Var,
        idx: Vec<usize>,
        width: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        n: usize,
        lq: usize,
        lk: usize,
        d: usize,
        probs: Vec<f64>,
    },
    Time2Vec {
        tau: Vec<f64>,
        w: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Parameter handles bound into one graph, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T, KernelError> {
    Err(KernelError::Shape(msg.into()))
}

fn last_dim(shape: &[usize]) -> Result<usize, KernelError> {
    match shape.last() {
        Some(&w) if w > 0 => Ok(w),
        _ => shape_err(format!("op needs a non-empty last axis, got {shape:?}")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a differentiable input that is not a registered parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(id), true)
    }

    /// Binds every parameter of `reg` as a leaf of this graph.
    pub fn bind(&mut self, reg: &ParamRegistry) -> Bound {
        let vars = reg
            .ids()
            .map(|id| self.param(id, reg.value(id)))
            .collect();
        Bound { vars }
    }

    // ------------------------------------------------------------------
    // linear algebra

    /// `a[..., m, k] @ b`, where `b` is a shared `[k, n]` matrix or a batched
    /// `[..., k, n]` tensor with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] @ b^T`, where `b` is `[n, k]` or batched `[..., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return shape_err(format!("matmul inner mismatch {sa:?} x {sb:?}"));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let batched = sb.len() > 2;
        if batched && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return shape_err(format!("matmul batch mismatch {sa:?} x {sb:?}"));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if batched {
                for bi in 0..batch {
                    let aa = &av[bi * m * k..(bi + 1) * m * k];
                    let bb = &bv[bi * k * n..(bi + 1) * k * n];
                    let cc = &mut out[bi * m * n..(bi + 1) * m * n];
                    if trans_b {
                        gemm_nt(aa, bb, cc, m, k, n);
                    } else {
                        gemm_nn(aa, bb, cc, m, k, n);
                    }
                }
            } else if trans_b {
                gemm_nt(av, bv, &mut out, batch * m, k, n);
            } else {
                gemm_nn(av, bv, &mut out, batch * m, k, n);
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `x @ w + b` with `w: [in, out]` and optional bias `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, KernelError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ------------------------------------------------------------------
    // elementwise

    fn bcast_kind(sa: &[usize], sb: &[usize], allow_prefix: bool) -> Result<Bcast, KernelError> {
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(Bcast::Suffix)
        } else if allow_prefix && sb.len() <= sa.len() && sa[..sb.len()] == *sb {
            Ok(Bcast::Prefix)
        } else {
            shape_err(format!("cannot broadcast {sb:?} onto {sa:?}"))
        }
    }

    fn bcast_index(bcast: Bcast, i: usize, a_len: usize, b_len: usize) -> usize {
        match bcast {
            Bcast::Same => i,
            Bcast::Suffix => i % b_len,
            Bcast::Prefix => i / (a_len / b_len),
        }
    }

    /// `a + b`; `b` may be a trailing-suffix broadcast (e.g. a bias).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let bcast = Self::bcast_kind(self.shape(a), self.shape(b), false)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let bl = bv.len();
        let out: Vec<f64> = match bcast {
            Bcast::Same => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            _ => av.iter().enumerate().map(|(i, x)| x + bv[i % bl]).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b, bcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "sub shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a, b }, rg))
    }

    /// Elementwise product; `b` may broadcast as a suffix or a prefix of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let bcast = Self::bcast_kind(self.shape(a), self.shape(b), true)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (al, bl) = (av.len(), bv.len());
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[Self::bcast_index(bcast, i, al, bl)])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b, bcast }, rg))
    }

    /// Multiplies by a constant laid out like `shape` (same, suffix or prefix of `a`).
    pub fn mul_const(&mut self, a: Var, c: &[f64], shape: &[usize]) -> Result<Var, KernelError> {
        if shape.iter().product::<usize>() != c.len() {
            return shape_err("mul_const: constant length does not match its shape");
        }
        let bcast = Self::bcast_kind(self.shape(a), shape, true)?;
        let av = self.value(a).data();
        let (al, bl) = (av.len(), c.len());
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, x)| x * c[Self::bcast_index(bcast, i, al, bl)])
            .collect();
        let s = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::MulConst {
                a,
                c: c.to_vec(),
                bcast,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::AddScalar { a }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Tensor::new(shape, out).unwrap(), op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    /// `max(x, min)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(a, |x| x.max(min), Op::ClampMin { a, min })
    }

    // ------------------------------------------------------------------
    // layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, KernelError> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.requires(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        let nd = sa.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for {sa:?}"));
        }
        let mut strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * sa[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let pstr: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let total: usize = sa.iter().product();
        let mut map = Vec::with_capacity(total);
        if total > 0 {
            let mut idx = vec![0usize; nd];
            let mut off = 0usize;
            for _ in 0..total {
                map.push(off);
                for ax in (0..nd).rev() {
                    idx[ax] += 1;
                    off += pstr[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    off -= pstr[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
        }
        let src = self.value(a).data();
        let out: Vec<f64> = map.iter().map(|&o| src[o]).collect();
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { a, map }, rg))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, KernelError> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return shape_err("concat of zero tensors"),
        };
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut axis_total = 0;
        let mut inner = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return shape_err(format!("concat shape mismatch {first:?} vs {s:?}"));
            }
            axis_total += s[axis];
            inner.push(s[axis] * tail);
        }
        let row: usize = inner.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&inner) {
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Narrows `axis` to `start..start + len`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return shape_err(format!("slice {start}+{len} on axis {axis} of {sa:?}"));
        }
        let outer: usize = sa[..axis].iter().product();
        let tail: usize = sa[axis + 1..].iter().product();
        let src_inner = sa[axis] * tail;
        let offset = start * tail;
        let inner = len * tail;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[o * src_inner + offset..o * src_inner + offset + inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                a,
                outer,
                src_inner,
                offset,
                inner,
            },
            rg,
        ))
    }

    /// Rows of a `[rows, width]` table.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var, KernelError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return shape_err(format!("gather needs a 2-d table, got {st:?}"));
        }
        let (rows, width) = (st[0], st[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err(format!("gather index {bad} out of {rows} rows"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor::new(vec![idx.len(), width], out)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Selects one entry per row along the last axis: `[..., w] -> [...]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        let width = last_dim(&sa)?;
        let rows = self.value(a).len() / width;
        if idx.len() != rows || idx.iter().any(|&i| i >= width) {
            return shape_err("pick: one in-range index per row required");
        }
        let src = self.value(a).data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| src[r * width + i]).collect();
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::new(sa[..sa.len() - 1].to_vec(), out)?,
            Op::Pick {
                a,
                idx: idx.to_vec(),
                width,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::MeanAll { a }, rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        let width = last_dim(&sa)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(width)
            .map(|r| r.iter().sum())
            .collect();
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::new(sa[..sa.len() - 1].to_vec(), out)?,
            Op::SumLast { a, width },
            rg,
        ))
    }

    /// Dot product along the last axis of two same-shaped tensors.
    pub fn dot_last(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let p = self.mul(a, b)?;
        self.sum_last(p)
    }

    // ------------------------------------------------------------------
    // normalisation

    fn check_mask(mask: Option<&[bool]>, total: usize, width: usize) -> Result<(), KernelError> {
        if let Some(m) = mask {
            if m.len() != total {
                return shape_err("mask length must match the tensor");
            }
            if m.chunks(width).any(|r| r.iter().all(|&x| x)) {
                return Err(KernelError::FullyMasked);
            }
        }
        Ok(())
    }

    /// Softmax over the last axis. `mask[i] == true` excludes an entry: it
    /// gets probability exactly zero. A fully masked row is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, KernelError> {
        let width = last_dim(self.shape(a))?;
        let total = self.value(a).len();
        Self::check_mask(mask, total, width)?;
        let out = softmax_rows(self.value(a).data(), mask, width);
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                a,
                mask: mask.map(<[bool]>::to_vec),
                width,
            },
            rg,
        ))
    }

    /// Log-softmax over the last axis. Masked entries are reported as 0 and
    /// receive no gradient.
    pub fn log_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, KernelError> {
        let width = last_dim(self.shape(a))?;
        let total = self.value(a).len();
        Self::check_mask(mask, total, width)?;
        let src = self.value(a).data();
        let probs = softmax_rows(src, mask, width);
        let mut out = vec![0.0; total];
        for (r, row) in src.chunks(width).enumerate() {
            let lse = logsumexp_row(row, mask.map(|m| &m[r * width..(r + 1) * width]));
            for (j, &x) in row.iter().enumerate() {
                if !mask.is_some_and(|m| m[r * width + j]) {
                    out[r * width + j] = x - lse;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LogSoftmax {
                a,
                mask: mask.map(<[bool]>::to_vec),
                probs,
                width,
            },
            rg,
        ))
    }

    /// `log(sum(exp(x)))` over the last axis.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        let width = last_dim(&sa)?;
        let src = self.value(a).data();
        let probs = softmax_rows(src, None, width);
        let out: Vec<f64> = src.chunks(width).map(|r| logsumexp_row(r, None)).collect();
        let rg = self.requires(a);
        Ok(self.push(
            Tensor::new(sa[..sa.len() - 1].to_vec(), out)?,
            Op::LogSumExp { a, probs, width },
            rg,
        ))
    }

    /// Layer normalisation over the last axis followed by `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, KernelError> {
        let sx = self.shape(x).to_vec();
        let width = last_dim(&sx)?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return shape_err("layer_norm affine params must be [width]");
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / width;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                width,
            },
            rg,
        ))
    }

    /// Scales each last-axis vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        let width = last_dim(&sa)?;
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(src.len() / width);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(width) {
            let n = dot(row, row).sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(sa, out)?, Op::L2Normalize { a, norms, width }, rg))
    }

    // ------------------------------------------------------------------
    // fused ops

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [n, lq, d]`, `k, v: [n, lk, d]`, `d` split into `heads` equal
    /// parts. `key_mask[n * lk]` excludes keys (true = masked); `causal`
    /// additionally hides keys after the query position. Every query must
    /// keep at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var, KernelError> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 3 || sk.len() != 3 || self.shape(v) != sk.as_slice() {
            return shape_err(format!("attention shapes q {sq:?} k {sk:?}"));
        }
        let (n, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if sk[0] != n || sk[2] != d || heads == 0 || d % heads != 0 {
            return shape_err(format!("attention q {sq:?} k {sk:?} heads {heads}"));
        }
        if causal && lq != lk {
            return shape_err("causal attention needs lq == lk");
        }
        if let Some(m) = key_mask {
            if m.len() != n * lk {
                return shape_err("attention key mask must be [n, lk]");
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![0.0; n * heads * lq * lk];
        let mut out = vec![0.0; n * lq * d];
        let mut scores = vec![0.0; lk];
        for b in 0..n {
            for h in 0..heads {
                for i in 0..lq {
                    let qrow = &qv[(b * lq + i) * d + h * dh..(b * lq + i) * d + (h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    let mut any = false;
                    for j in 0..lk {
                        let hidden = key_mask.is_some_and(|m| m[b * lk + j]) || (causal && j > i);
                        if hidden {
                            scores[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        any = true;
                        let krow = &kv[(b * lk + j) * d + h * dh..(b * lk + j) * d + (h + 1) * dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    if !any {
                        return Err(KernelError::FullyMasked);
                    }
                    let prow = &mut probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                    let mut z = 0.0;
                    for j in 0..lk {
                        if scores[j] != f64::NEG_INFINITY {
                            let e = (scores[j] - max).exp();
                            prow[j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out[(b * lq + i) * d + h * dh..(b * lq + i) * d + (h + 1) * dh];
                    for j in 0..lk {
                        if scores[j] == f64::NEG_INFINITY {
                            continue;
                        }
                        prow[j] /= z;
                        let p = prow[j];
                        let vrow = &vv[(b * lk + j) * d + h * dh..(b * lk + j) * d + (h + 1) * dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            Tensor::new(vec![n, lq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                n,
                lq,
                lk,
                d,
                probs,
            },
            rg,
        ))
    }

    /// Channel-wise periodic time features: channel 0 is `w0 * tau + b0`,
    /// channel `k > 0` is `sin(wk * tau + bk)`. `tau` is constant.
    pub fn time2vec(&mut self, tau: &[f64], w: Var, b: Var) -> Result<Var, KernelError> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 1 || self.shape(b) != sw.as_slice() || sw[0] == 0 {
            return shape_err("time2vec weights must be matching non-empty vectors");
        }
        let width = sw[0];
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(tau.len() * width);
        for &t in tau {
            out.push(wv[0] * t + bv[0]);
            for j in 1..width {
                out.push((wv[j] * t + bv[j]).sin());
            }
        }
        let rg = self.requires(w) || self.requires(b);
        Ok(self.push(
            Tensor::new(vec![tau.len(), width], out)?,
            Op::Time2Vec {
                tau: tau.to_vec(),
                w,
                b,
            },
            rg,
        ))
    }

    /// Signed offsets of every ReLU or clamp input from its kink, in
    /// recording order; used by the finite-difference oracle to detect
    /// stencils that straddle a non-differentiable point.
    pub fn kink_offsets(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (a, at) = match node.op {
                Op::Relu { a } => (a, 0.0),
                Op::ClampMin { a, min } => (a, min),
                _ => continue,
            };
            out.extend(self.value(a).data().iter().map(|&x| x - at));
        }
        out
    }

    // ------------------------------------------------------------------
    // backward

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, KernelError> {
        if self.value(loss).len() != 1 {
            return Err(KernelError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backprop_node(i, g, lower);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `reg`.
    pub fn backward_into(&self, loss: Var, reg: &mut ParamRegistry) -> Result<Gradients, KernelError> {
        let grads = self.backward(loss)?;
        self.accumulate(&grads, reg);
        Ok(grads)
    }

    /// Adds the gradients of every bound parameter leaf into `reg`.
    pub fn accumulate(&self, grads: &Gradients, reg: &mut ParamRegistry) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.grads[i].as_deref() {
                    for (dst, src) in reg.grad_mut(id).data_mut().iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! grad_of {
            ($v:expr) => {
                grad_slot(lower, nodes, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batched,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(a), val(b));
                if let Some(da) = grad_of!(a) {
                    if batched {
                        for bi in 0..batch {
                            let gg = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = &bv[bi * k * n..(bi + 1) * k * n];
                            let dd = &mut da[bi * m * k..(bi + 1) * m * k];
                            if trans_b {
                                gemm_nn(gg, bb, dd, m, n, k);
                            } else {
                                gemm_nt(gg, bb, dd, m, n, k);
                            }
                        }
                    } else if trans_b {
                        gemm_nn(g, bv, da, batch * m, n, k);
                    } else {
                        gemm_nt(g, bv, da, batch * m, n, k);
                    }
                }
                if let Some(db) = grad_of!(b) {
                    if batched {
                        for bi in 0..batch {
                            let gg = &g[bi * m * n..(bi + 1) * m * n];
                            let aa = &av[bi * m * k..(bi + 1) * m * k];
                            let dd = &mut db[bi * k * n..(bi + 1) * k * n];
                            if trans_b {
                                gemm_tn(gg, aa, dd, n, m, k);
                            } else {
                                gemm_tn(aa, gg, dd, k, m, n);
                            }
                        }
                    } else if trans_b {
                        gemm_tn(g, av, db, n, batch * m, k);
                    } else {
                        gemm_tn(av, g, db, k, batch * m, n);
                    }
                }
            }
            &Op::Add { a, b, bcast } => {
                if let Some(da) = grad_of!(a) {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(db) = grad_of!(b) {
                    let bl = db.len();
                    match bcast {
                        Bcast::Same => {
                            for (d, x) in db.iter_mut().zip(g) {
                                *d += x;
                            }
                        }
                        _ => {
                            for (j, x) in g.iter().enumerate() {
                                db[j % bl] += x;
                            }
                        }
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = grad_of!(a) {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(db) = grad_of!(b) {
                    for (d, x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            &Op::Mul { a, b, bcast } => {
                let (av, bv) = (val(a), val(b));
                let (al, bl) = (av.len(), bv.len());
                if let Some(da) = grad_of!(a) {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j] * bv[Self::bcast_index(bcast, j, al, bl)];
                    }
                }
                if let Some(db) = grad_of!(b) {
                    for j in 0..al {
                        db[Self::bcast_index(bcast, j, al, bl)] += g[j] * av[j];
                    }
                }
            }
            Op::MulConst { a, c, bcast } => {
                let al = nodes[a.0].value.len();
                if let Some(da) = grad_of!(*a) {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j] * c[Self::bcast_index(*bcast, j, al, c.len())];
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(da) = grad_of!(a) {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += c * x;
                    }
                }
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                if let Some(da) = grad_of!(a) {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            &Op::Relu { a } => {
                let av = val(a);
                if let Some(da) = grad_of!(a) {
                    for j in 0..da.len() {
                        if av[j] > 0.0 {
                            da[j] += g[j];
                        }
                    }
                }
            }
            &Op::Sin { a } => {
                let av = val(a);
                if let Some(da) = grad_of!(a) {
                    for j in 0..da.len() {
                        da[j] += g[j] * av[j].cos();
                    }
                }
            }
            &Op::Exp { a } => {
                if let Some(da) = grad_of!(a) {
                    for j in 0..da.len() {
                        da[j] += g[j] * out[j];
                    }
                }
            }
            &Op::Log { a } => {
                let av = val(a);
                if let Some(da) = grad_of!(a) {
                    for j in 0..da.len() {
                        da[j] += g[j] / av[j];
                    }
                }
            }
            &Op::Softplus { a } => {
                let av = val(a);
                if let Some(da) = grad_of!(a) {
                    for j in 0..da.len() {
                        da[j] += g[j] * sigmoid(av[j]);
                    }
                }
            }
            &Op::Sigmoid { a } => {
                if let Some(da) = grad_of!(a) {
                    for j in 0..da.len() {
                        da[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                }
            }
            &Op::ClampMin { a, min } => {
                let av = val(a);
                if let Some(da) = grad_of!(a) {
                    for j in 0..da.len() {
                        if av[j] > min {
                            da[j] += g[j];
                        }
                    }
                }
            }
            Op::Permute { a, map } => {
                if let Some(da) = grad_of!(*a) {
                    for (j, &o) in map.iter().enumerate() {
                        da[o] += g[j];
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let row: usize = inner.iter().sum();
                let mut col = 0;
                for (&p, &w) in parts.iter().zip(inner) {
                    if let Some(dp) = grad_of!(p) {
                        for o in 0..*outer {
                            let src = &g[o * row + col..o * row + col + w];
                            for (d, x) in dp[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    col += w;
                }
            }
            &Op::Slice {
                a,
                outer,
                src_inner,
                offset,
                inner,
            } => {
                if let Some(da) = grad_of!(a) {
                    for o in 0..outer {
                        let dst = &mut da[o * src_inner + offset..o * src_inner + offset + inner];
                        for (d, x) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Gather { table, idx, width } => {
                if let Some(dt) = grad_of!(*table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..*width {
                            dt[i * width + j] += g[r * width + j];
                        }
                    }
                }
            }
            Op::Pick { a, idx, width } => {
                if let Some(da) = grad_of!(*a) {
                    for (r, &i) in idx.iter().enumerate() {
                        da[r * width + i] += g[r];
                    }
                }
            }
            &Op::SumAll { a } => {
                if let Some(da) = grad_of!(a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::MeanAll { a } => {
                if let Some(da) = grad_of!(a) {
                    let s = g[0] / da.len().max(1) as f64;
                    for d in da.iter_mut() {
                        *d += s;
                    }
                }
            }
            &Op::SumLast { a, width } => {
                if let Some(da) = grad_of!(a) {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j / width];
                    }
                }
            }
            Op::Softmax { a, mask, width } => {
                if let Some(da) = grad_of!(*a) {
                    for r in 0..out.len() / width {
                        let y = &out[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let s = dot(y, gr);
                        for j in 0..*width {
                            if mask.as_ref().is_some_and(|m| m[r * width + j]) {
                                continue;
                            }
                            da[r * width + j] += y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax {
                a,
                mask,
                probs,
                width,
            } => {
                if let Some(da) = grad_of!(*a) {
                    for r in 0..out.len() / width {
                        let masked = |j: usize| mask.as_ref().is_some_and(|m| m[r * width + j]);
                        let gs: f64 = (0..*width).filter(|&j| !masked(j)).map(|j| g[r * width + j]).sum();
                        for j in 0..*width {
                            if masked(j) {
                                continue;
                            }
                            da[r * width + j] += g[r * width + j] - probs[r * width + j] * gs;
                        }
                    }
                }
            }
            Op::LogSumExp { a, probs, width } => {
                if let Some(da) = grad_of!(*a) {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j / width] * probs[j];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                width,
            } => {
                let w = *width;
                let gv = val(*gamma);
                if let Some(dg) = grad_of!(*gamma) {
                    for (j, (gg, xh)) in g.iter().zip(xhat).enumerate() {
                        dg[j % w] += gg * xh;
                    }
                }
                if let Some(db) = grad_of!(*beta) {
                    for (j, gg) in g.iter().enumerate() {
                        db[j % w] += gg;
                    }
                }
                if let Some(dx) = grad_of!(*x) {
                    let mut dxhat = vec![0.0; w];
                    for r in 0..rstd.len() {
                        let gr = &g[r * w..(r + 1) * w];
                        let xr = &xhat[r * w..(r + 1) * w];
                        for j in 0..w {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / w as f64;
                        let m2 = dot(&dxhat, xr) / w as f64;
                        for j in 0..w {
                            dx[r * w + j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms, width } => {
                if let Some(da) = grad_of!(*a) {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let y = &out[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let s = dot(y, gr);
                        for j in 0..*width {
                            da[r * width + j] += (gr[j] - y[j] * s) / nrm;
                        }
                    }
                }
            }
            &Op::Attention {
                q,
                k,
                v,
                heads,
                n,
                lq,
                lk,
                d,
                ref probs,
            } => {
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(q), val(k), val(v));
                // dS for every (batch, head, query, key)
                let mut ds = vec![0.0; probs.len()];
                let mut dp = vec![0.0; lk];
                for b in 0..n {
                    for h in 0..heads {
                        for i in 0..lq {
                            let base = ((b * heads + h) * lq + i) * lk;
                            let prow = &probs[base..base + lk];
                            let grow = &g[(b * lq + i) * d + h * dh..(b * lq + i) * d + (h + 1) * dh];
                            let mut s = 0.0;
                            for j in 0..lk {
                                if prow[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vrow = &vv[(b * lk + j) * d + h * dh..(b * lk + j) * d + (h + 1) * dh];
                                dp[j] = dot(grow, vrow);
                                s += prow[j] * dp[j];
                            }
                            for j in 0..lk {
                                ds[base + j] = prow[j] * (dp[j] - s);
                            }
                        }
                    }
                }
                if let Some(dv) = grad_of!(v) {
                    for b in 0..n {
                        for h in 0..heads {
                            for i in 0..lq {
                                let base = ((b * heads + h) * lq + i) * lk;
                                let grow = &g[(b * lq + i) * d + h * dh..(b * lq + i) * d + (h + 1) * dh];
                                for j in 0..lk {
                                    let p = probs[base + j];
                                    if p == 0.0 {
                                        continue;
                                    }
                                    let drow = &mut dv[(b * lk + j) * d + h * dh..(b * lk + j) * d + (h + 1) * dh];
                                    for (dd, &x) in drow.iter_mut().zip(grow) {
                                        *dd += p * x;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dq) = grad_of!(q) {
                    for b in 0..n {
                        for h in 0..heads {
                            for i in 0..lq {
                                let base = ((b * heads + h) * lq + i) * lk;
                                let drow = &mut dq[(b * lq + i) * d + h * dh..(b * lq + i) * d + (h + 1) * dh];
                                for j in 0..lk {
                                    let s = ds[base + j] * scale;
                                    if s == 0.0 {
                                        continue;
                                    }
                                    let krow = &kv[(b * lk + j) * d + h * dh..(b * lk + j) * d + (h + 1) * dh];
                                    for (dd, &x) in drow.iter_mut().zip(krow) {
                                        *dd += s * x;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dk) = grad_of!(k) {
                    for b in 0..n {
                        for h in 0..heads {
                            for i in 0..lq {
                                let base = ((b * heads + h) * lq + i) * lk;
                                let qrow = &qv[(b * lq + i) * d + h * dh..(b * lq + i) * d + (h + 1) * dh];
                                for j in 0..lk {
                                    let s = ds[base + j] * scale;
                                    if s == 0.0 {
                                        continue;
                                    }
                                    let drow = &mut dk[(b * lk + j) * d + h * dh..(b * lk + j) * d + (h + 1) * dh];
                                    for (dd, &x) in drow.iter_mut().zip(qrow) {
                                        *dd += s * x;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Time2Vec { tau, w, b } => {
                let width = nodes[w.0].value.len();
                let wv = val(*w);
                let bv = val(*b);
                let mut dz = vec![0.0; g.len()];
                for (r, &t) in tau.iter().enumerate() {
                    dz[r * width] = g[r * width];
                    for j in 1..width {
                        dz[r * width + j] = g[r * width + j] * (wv[j] * t + bv[j]).cos();
                    }
                }
                if let Some(dw) = grad_of!(*w) {
                    for (r, &t) in tau.iter().enumerate() {
                        for j in 0..width {
                            dw[j] += dz[r * width + j] * t;
                        }
                    }
                }
                if let Some(db) = grad_of!(*b) {
                    for (j, x) in dz.iter().enumerate() {
                        db[j % width] += x;
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; None when `v` needs no gradient.
fn grad_slot<'a>(lower: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let slot = &mut lower[v.0];
    Some(slot.get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp_row(row: &[f64], mask: Option<&[bool]>) -> f64 {
    let keep = |j: usize| !mask.is_some_and(|m| m[j]);
    let max = (0..row.len())
        .filter(|&j| keep(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..row.len()).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
    max + s.ln()
}

fn softmax_rows(src: &[f64], mask: Option<&[bool]>, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (r, row) in src.chunks(width).enumerate() {
        let keep = |j: usize| !mask.is_some_and(|m| m[r * width + j]);
        let max = (0..width)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..width {
            if keep(j) {
                let e = (row[j] - max).exp();
                out[r * width + j] = e;
                z += e;
            }
        }
        for j in 0..width {
            out[r * width + j] /= z;
        }
    }
    out
}
