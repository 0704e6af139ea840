use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, gemm, gemm_nt, gemm_tn};
use super::{numel, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    TransposeLast2(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; `backward` walks them in reverse.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Period of `b` when it broadcasts over leading dims of `a`.
fn broadcast_suffix(a: &[usize], b: &[usize]) -> Option<usize> {
    // b may carry leading singleton dims; what remains must be a suffix of a.
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let core = &b[first..];
    if core.len() <= a.len() && a[a.len() - core.len()..] == *core {
        Some(numel(core))
    } else {
        None
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: false,
        }
    }

    /// Tape that rejects any NaN/Inf produced by an op.
    pub fn checked() -> Self {
        Tape {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Loads a parameter; repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            requires_grad: store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: inner dims differ")));
        }
        let shared_b = sb.len() == 2;
        let (batch, m) = if shared_b {
            (1, numel(&sa[..sa.len() - 1]))
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: batch dims differ")));
            }
            (numel(&sa[..sa.len() - 2]), sa[sa.len() - 2])
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let bo = if shared_b { 0 } else { bi * k * n };
                gemm(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let period = broadcast_suffix(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("{sa:?} vs {sb:?}")))?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let data: Vec<T> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % period]))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(name, Tensor::new(sa, data)?, op, rg)
    }

    /// Elementwise sum; `b` may broadcast over leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        let rg = self.requires_grad(x);
        self.push("scale", value, Op::Scale(x, s), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::shape("slice", format!("{s:?} axis {axis} range {start}..{end}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.requires_grad(x);
        self.push("slice", Tensor::new(shape, data)?, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.requires_grad(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("{s:?}: rank < 2")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_last2(self.value(x).data(), r, c);
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.requires_grad(x);
        self.push("transpose", Tensor::new(shape, data)?, Op::TransposeLast2(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let rg = self.requires_grad(x);
        self.push("softmax", Tensor::new(s, data)?, Op::Softmax(x), rg)
    }

    /// Normalizes the last axis, then applies learnable `gamma`/`beta` of that length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {s:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::of_f64(1e-5);
        let dn = T::of_f64(d as f64);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(
            "layer_norm",
            Tensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        let rg = self.requires_grad(x);
        self.push("gelu", value, Op::Gelu(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.sum_all() / T::of_f64(v.len() as f64);
        let rg = self.requires_grad(x);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_all();
        let rg = self.requires_grad(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let sq: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let m = sq / T::of_f64(av.len() as f64);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("mse", Tensor::scalar(m), Op::Mse(a, b), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn grads(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Reverse pass that accumulates parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Grads<T>> {
        let grads = self.grads(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(grads)
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.requires_grad(a) {
                    let mut da = vec![T::zero(); ad.len()];
                    for bi in 0..batch {
                        let bo = if shared_b { 0 } else { bi * k * n };
                        gemm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &bd[bo..bo + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accum(grads, a, Tensor::new(self.shape(a).to_vec(), da)?);
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::zero(); bd.len()];
                    for bi in 0..batch {
                        let bo = if shared_b { 0 } else { bi * k * n };
                        gemm_tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut db[bo..bo + k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accum(grads, b, Tensor::new(self.shape(b).to_vec(), db)?);
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.requires_grad(a) {
                    self.accum(grads, a, g.clone());
                }
                if self.requires_grad(b) {
                    let db = reduce_to(gd, self.value(b).len(), |x| x * sign);
                    self.accum(grads, b, Tensor::new(self.shape(b).to_vec(), db)?);
                }
            }
            &Op::Mul(a, b) => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let period = bd.len();
                if self.requires_grad(a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * bd[i % period])
                        .collect();
                    self.accum(grads, a, Tensor::new(self.shape(a).to_vec(), da)?);
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::zero(); period];
                    for (i, (&gv, &av)) in gd.iter().zip(ad).enumerate() {
                        db[i % period] += gv * av;
                    }
                    self.accum(grads, b, Tensor::new(self.shape(b).to_vec(), db)?);
                }
            }
            &Op::Scale(x, s) => {
                self.accum(grads, x, g.map(|v| v * s));
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let shape = node.value.shape();
                let outer = numel(&shape[..axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[axis];
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accum(grads, v, Tensor::new(self.shape(v).to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let sx = self.shape(x);
                let outer = numel(&sx[..axis]);
                let inner = numel(&sx[axis + 1..]);
                let len = node.value.shape()[axis];
                let mut d = vec![T::zero(); self.value(x).len()];
                for o in 0..outer {
                    let dst = (o * sx[axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accum(grads, x, Tensor::new(sx.to_vec(), d)?);
            }
            &Op::Reshape(x) => {
                self.accum(grads, x, g.clone().reshaped(self.shape(x))?);
            }
            &Op::TransposeLast2(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let d = transpose_last2(gd, r, c);
                self.accum(grads, x, Tensor::new(self.shape(x).to_vec(), d)?);
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, x, Tensor::new(self.shape(x).to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let dn = T::of_f64(d as f64);
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for r in 0..rstd.len() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (gr[j] * gam[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                if self.requires_grad(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (i, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                        dg[i % d] += gv * xh;
                    }
                    self.accum(grads, *gamma, Tensor::new(vec![d], dg)?);
                }
                if self.requires_grad(*beta) {
                    let db = reduce_to(gd, d, |v| v);
                    self.accum(grads, *beta, Tensor::new(vec![d], db)?);
                }
            }
            &Op::Gelu(x) => {
                let xd = self.value(x).data();
                let d = gd.iter().zip(xd).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accum(grads, x, Tensor::new(self.shape(x).to_vec(), d)?);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                let v = gd[0] / T::of_f64(n as f64);
                self.accum(grads, x, Tensor::full(self.shape(x), v));
            }
            &Op::Sum(x) => {
                self.accum(grads, x, Tensor::full(self.shape(x), gd[0]));
            }
            &Op::Mse(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let c = T::of_f64(2.0) * gd[0] / T::of_f64(av.len() as f64);
                let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                if self.requires_grad(b) {
                    let db = da.iter().map(|&v| -v).collect();
                    self.accum(grads, b, Tensor::new(self.shape(b).to_vec(), db)?);
                }
                if self.requires_grad(a) {
                    self.accum(grads, a, Tensor::new(self.shape(a).to_vec(), da)?);
                }
            }
        }
        Ok(())
    }
}

fn reduce_to<T: Real>(g: &[T], period: usize, f: impl Fn(T) -> T) -> Vec<T> {
    let mut out = vec![T::zero(); period];
    for (i, &v) in g.iter().enumerate() {
        out[i % period] += f(v);
    }
    out
}

fn transpose_last2<T: Real>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (bs, bo) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                bo[j * r + i] = bs[i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 5]);
    }

    #[test]
    fn matmul_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        let b = tape.constant(Tensor::zeros(&[5, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[3, 4]") && err.contains("[5, 5]"));
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 5], 0.3));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_shape_and_order() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[2, 7], 1.0));
        let b = tape.constant(Tensor::full(&[3, 7], 2.0));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[5, 7]);
        assert_eq!(tape.value(c).data()[13], 1.0);
        assert_eq!(tape.value(c).data()[14], 2.0);

        let d = tape.constant(Tensor::full(&[2, 3], 0.0));
        assert!(tape.concat(&[a, d], 0).is_err());
        let e = tape.concat(&[a, d], 1).unwrap();
        assert_eq!(tape.shape(e), &[2, 10]);
    }

    #[test]
    fn broadcast_only_leading() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[4, 3]));
        let row = tape.constant(Tensor::zeros(&[3]));
        let row1 = tape.constant(Tensor::zeros(&[1, 3]));
        let col = tape.constant(Tensor::zeros(&[4, 1]));
        assert!(tape.add(a, row).is_ok());
        assert!(tape.add(a, row1).is_ok());
        assert!(tape.add(a, col).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.grads(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_product_sum() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let b = tape.leaf(t(&[3], &[4.0, -5.0, 6.0]), true);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.grads(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4.0, -5.0, 6.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(tape.grads(x).is_err());
    }

    #[test]
    fn checked_tape_rejects_nan() {
        let mut tape = Tape::<f32>::checked();
        let x = tape.constant(Tensor::full(&[2], f32::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn grads_accumulate_linearly() {
        // backward(L1) + backward(L2) == backward(L1 + L2)
        let mut rng = Rng::new(9);
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::randn(&[4, 3], 1.0, &mut rng), true);
        let x_val = Tensor::<f32>::randn(&[5, 4], 1.0, &mut rng);

        let build = |tape: &mut Tape<f32>, store: &ParamStore<f32>| {
            let x = tape.constant(x_val.clone());
            let wv = tape.param(store, w);
            let y = tape.matmul(x, wv).unwrap();
            let l1 = tape.mean(y).unwrap();
            let y2 = tape.gelu(y).unwrap();
            let l2 = tape.sum(y2).unwrap();
            (l1, l2)
        };

        let mut tape = Tape::new();
        let (l1, l2) = build(&mut tape, &store);
        tape.backward(l1, &mut store).unwrap();
        tape.backward(l2, &mut store).unwrap();
        let separate = store.grad(w).clone();

        store.zero_grad();
        let mut tape = Tape::new();
        let (l1, l2) = build(&mut tape, &store);
        let total = tape.add(l1, l2).unwrap();
        tape.backward(total, &mut store).unwrap();
        assert!(separate.max_abs_diff(store.grad(w)) < 1e-6);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full(&[2, 2], 1.0), false);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2], 1.0), true);
        let wv = tape.param(&store, w);
        let y = tape.matmul(x, wv).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(w).sum_all(), 0.0);
    }
}
