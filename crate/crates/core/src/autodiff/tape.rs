//! Recording tape and reverse-mode differentiation.
//!
//! Operations are appended in execution order, so the tape is already a
//! topological order of the computation; `backward` walks it once in reverse.

use rand::Rng as _;

use super::kernels::{axpy, gemm_nn, gemm_nt, gemm_tn, inverse_axes, permute};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Additive logit offset for disallowed attention entries.
pub const MASK_NEG: f64 = -1e9;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Rows whose layer-norm input variance falls below this are reported as
/// ill-conditioned (finite differences are unreliable there).
const LN_CONDITIONING_VAR: f64 = 1e3 * LN_EPS;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: T },
    Gelu { x: Var },
    Relu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    GatherRows { table: Var, rows: Vec<usize> },
    GatherLast { x: Var, cols: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Dropout { x: Var, keep: Vec<T> },
    MaskedMse { pred: Var, target: Vec<T>, selected: Vec<bool>, count: usize },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Recording,
    Consumed,
}

/// Single-threaded recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    state: State,
    warnings: Vec<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), state: State::Recording, warnings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Conditioning notes raised while recording (e.g. near-constant
    /// layer-norm rows).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after `backward`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value of a single-element node, as f64.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].as_f64()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(self.state, State::Recording);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `a[.., M, K] · b[K, N] → [.., M, N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Batched product over matching leading axes:
    /// `a[.., M, K] · b[.., K, N]`, or `a[.., M, K] · b[.., N, K]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::Shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if kb != k {
            return Err(Error::Shape(format!("bmm inner {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for t in 0..batch {
                let ab = &ad[t * m * k..(t + 1) * m * k];
                let bb = &bd[t * k * n..(t + 1) * k * n];
                let ob = &mut out[t * m * n..(t + 1) * m * n];
                if transpose_b {
                    gemm_nt(ab, bb, ob, m, k, n);
                } else {
                    gemm_nn(ab, bb, ob, m, k, n);
                }
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::BatchMatMul { a, b, transpose_b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what} {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Broadcast a `[N]` bias over the last axis of `x[.., N]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!("bias {:?} for {:?}", self.shape(bias), self.shape(x))));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bi) in row.iter_mut().zip(&b) {
                *o += bi;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// Affine layer `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.map(x, |e| e * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |e| if e > T::zero() { e } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &e| if e > m { e } else { m });
            let mut z = 0.0f64;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                z += e.as_f64();
            }
            let inv = T::of(1.0 / z);
            for e in row.iter_mut() {
                *e *= inv;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x }, rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape(format!("layer_norm gain/bias for width {n}")));
        }
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let rows = v.len() / n;
        let mut xhat = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut ill = 0usize;
        for row in v.data().chunks(n) {
            let mean = row.iter().map(|e| e.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|e| (e.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            if var < LN_CONDITIONING_VAR {
                ill += 1;
            }
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(T::of(r));
            xhat.extend(row.iter().map(|e| T::of((e.as_f64() - mean) * r)));
        }
        if ill > 0 {
            self.warnings.push(format!(
                "layer_norm: {ill} of {rows} rows have near-constant input (variance < {LN_CONDITIONING_VAR:e})"
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((o, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row gather from a `[V, D]` table (embedding lookup) → `[rows.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows on {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::Shape(format!("row index {bad} out of range {v}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&t[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows { table, rows: rows.to_vec() }, rg))
    }

    /// Pick one column per row: `x[N, C]`, `cols[N]` → `[N]`.
    pub fn gather_last(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let c = self.value(x).last_dim();
        let n = self.value(x).len() / c;
        if cols.len() != n || cols.iter().any(|&j| j >= c) {
            return Err(Error::Shape(format!("gather_last: {} columns for {n}x{c}", cols.len())));
        }
        let d = self.value(x).data();
        let out: Vec<T> = cols.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n], out)?, Op::GatherLast { x, cols: cols.to_vec() }, rg))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for rank {}", first.len())));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::Shape(format!("concat {first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("permute {axes:?} of {s:?}")));
        }
        let (data, shape) = permute(self.value(x).data(), s, axes);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let scale = T::of(1.0 / (1.0 - p));
        let keep: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { scale }).collect();
        let v = self.value(x);
        let out = v.data().iter().zip(&keep).map(|(&e, &k)| e * k).collect();
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, keep }, rg)
    }

    /// Mean squared error over the selected entries of a flat prediction.
    pub fn masked_mse(&mut self, pred: Var, target: &[T], selected: &[bool]) -> Result<Var> {
        let p = self.value(pred).data();
        if target.len() != p.len() || selected.len() != p.len() {
            return Err(Error::Shape(format!("masked_mse over {} values", p.len())));
        }
        let count = selected.iter().filter(|&&s| s).count();
        if count == 0 {
            return Err(Error::Training("loss over zero selected positions".into()));
        }
        let mut acc = 0.0f64;
        for ((&pi, &ti), &s) in p.iter().zip(target).zip(selected) {
            if s {
                acc += (pi.as_f64() - ti.as_f64()).powi(2);
            }
        }
        let out = Tensor::scalar(T::of(acc / count as f64));
        let rg = self.rg(&[pred]);
        Ok(self.push(out, Op::MaskedMse { pred, target: target.to_vec(), selected: selected.to_vec(), count }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = T::of(self.value(x).data().iter().map(|e| e.as_f64()).sum());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().map(|e| e.as_f64()).sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::of(s)), Op::Mean { x }, rg)
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss. Gradients sum into leaves; the
    /// recorded operations are released afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.state == State::Consumed {
            return Err(Error::Training("backward called twice on one recording".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Training(format!("backward from non-scalar of shape {:?}", self.shape(loss))));
        }
        self.state = State::Consumed;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sb, n) = (self.shape(*b).to_vec(), self.value(Var(i)).last_dim());
                let k = sb[0];
                let m = g.len() / n;
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.value(*a).data(), g, &mut db, m, k, n);
                    self.accumulate(*b, db);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.shape(*a).to_vec();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = self.value(Var(i)).last_dim();
                let batch: usize = sa[..r - 2].iter().product();
                let mut da = self.requires_grad(*a).then(|| vec![T::zero(); batch * m * k]);
                let mut db = self.requires_grad(*b).then(|| vec![T::zero(); batch * k * n]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                for t in 0..batch {
                    let gb = &g[t * m * n..(t + 1) * m * n];
                    let ab = &ad[t * m * k..(t + 1) * m * k];
                    let bb = &bd[t * k * n..(t + 1) * k * n];
                    if *transpose_b {
                        // C = A Bᵀ with B [N, K]
                        if let Some(da) = da.as_mut() {
                            gemm_nn(gb, bb, &mut da[t * m * k..(t + 1) * m * k], m, n, k);
                        }
                        if let Some(db) = db.as_mut() {
                            gemm_tn(gb, ab, &mut db[t * k * n..(t + 1) * k * n], m, n, k);
                        }
                    } else {
                        if let Some(da) = da.as_mut() {
                            gemm_nt(gb, bb, &mut da[t * m * k..(t + 1) * m * k], m, n, k);
                        }
                        if let Some(db) = db.as_mut() {
                            gemm_tn(ab, gb, &mut db[t * k * n..(t + 1) * k * n], m, k, n);
                        }
                    }
                }
                if let Some(da) = da {
                    self.accumulate(*a, da);
                }
                if let Some(db) = db {
                    self.accumulate(*b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.iter().map(|&e| -e).collect());
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(&gi, &bi)| gi * bi).collect();
                    self.accumulate(*a, d);
                }
                if self.requires_grad(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(&gi, &ai)| gi * ai).collect();
                    self.accumulate(*b, d);
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(*x, g.to_vec());
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let mut acc = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        for (a, &e) in acc.iter_mut().zip(row) {
                            *a += e.as_f64();
                        }
                    }
                    self.accumulate(*bias, acc.into_iter().map(T::of).collect());
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(*x, g.iter().map(|&e| e * *c).collect());
            }
            Op::Gelu { x } => {
                let d = g.iter().zip(self.value(*x).data()).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect();
                self.accumulate(*x, d);
            }
            Op::Relu { x } => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(*x, d);
            }
            Op::Softmax { x } => {
                let y = self.value(Var(i));
                let n = y.last_dim();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(y.data().chunks(n)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    let s = T::of(s);
                    d.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - s)));
                }
                self.accumulate(*x, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.value(*gain).len();
                if self.requires_grad(*x) {
                    let gv = self.value(*gain).data();
                    let mut d = Vec::with_capacity(g.len());
                    for ((gr, xr), &r) in g.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a.as_f64() * b.as_f64()).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b.as_f64()).sum::<f64>() / n as f64;
                        let r = r.as_f64();
                        d.extend(dxhat.iter().zip(xr).map(|(&dh, &xh)| T::of(r * (dh - m1 - xh.as_f64() * m2))));
                    }
                    self.accumulate(*x, d);
                }
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0f64; n];
                    let mut db = vec![0.0f64; n];
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j].as_f64() * xr[j].as_f64();
                            db[j] += gr[j].as_f64();
                        }
                    }
                    self.accumulate(*gain, dg.into_iter().map(T::of).collect());
                    self.accumulate(*bias, db.into_iter().map(T::of).collect());
                }
            }
            Op::GatherRows { table, rows } => {
                if self.requires_grad(*table) {
                    let d = self.value(*table).last_dim();
                    let mut dt = vec![T::zero(); self.value(*table).len()];
                    for (gr, &r) in g.chunks(d).zip(rows) {
                        axpy(T::one(), gr, &mut dt[r * d..(r + 1) * d]);
                    }
                    self.accumulate(*table, dt);
                }
            }
            Op::GatherLast { x, cols } => {
                let c = self.value(*x).last_dim();
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (r, (&gi, &j)) in g.iter().zip(cols).enumerate() {
                    d[r * c + j] = gi;
                }
                self.accumulate(*x, d);
            }
            Op::Concat { parts, axis } => {
                let shape = self.value(Var(i)).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(p, d);
                    }
                    offset += len;
                }
            }
            Op::Reshape { x } => self.accumulate(*x, g.to_vec()),
            Op::Permute { x, axes } => {
                let out_shape = self.value(Var(i)).shape().to_vec();
                let (d, _) = permute(g, &out_shape, &inverse_axes(axes));
                self.accumulate(*x, d);
            }
            Op::Dropout { x, keep } => {
                self.accumulate(*x, g.iter().zip(keep).map(|(&gi, &k)| gi * k).collect());
            }
            Op::MaskedMse { pred, target, selected, count } => {
                let scale = g[0].as_f64() * 2.0 / *count as f64;
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(selected)
                    .map(|((&p, &t), &s)| if s { T::of(scale * (p.as_f64() - t.as_f64())) } else { T::zero() })
                    .collect();
                self.accumulate(*pred, d);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![g[0] / T::of(n as f64); n]);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + fast_tanh(u))
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((u * two).exp() + T::one())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let u = c * (x + a * x * x * x);
    let t = fast_tanh(u);
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
