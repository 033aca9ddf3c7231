//! Eager computation tape with reverse-mode differentiation.
//!
//! Every op evaluates immediately and appends a node to the tape, so node
//! order is a topological order by construction. `backward` walks the tape
//! once in reverse.

use crate::conv::{self, col2im, im2col, ConvGeom};
use crate::error::{shape_err, AutogradError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    InstanceNorm(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    L2NormalizeRows(Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    GatherColumns { x: Var, batch: usize, locations: Vec<usize> },
    SelectBatch { x: Var, batch: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, usize)>,
    aux: Vec<f64>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(name, format!("operands {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(name: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(name, format!("expected a matrix, got {s:?}")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_aux(value, op, requires_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Constant input; gradients are not tracked through it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (for tests and input-sensitivity checks).
    pub fn tracked_input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a parameter; its gradient flows back to `store` via
    /// [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some((store.uid(), id.0));
        v
    }

    /// Param leaf looked up by name.
    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| AutogradError::Contract(format!("unknown parameter `{name}`")))?;
        Ok(self.param(store, id))
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, (u64, usize))> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Leaf, false)
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    fn row_operands(&self, name: &str, x: Var, r: Var) -> Result<(usize, usize)> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        if self.value(r).len() != d || d == 0 {
            return shape_err(
                name,
                format!("row operand {:?} does not match last axis of {:?}", self.shape(r), tx.shape()),
            );
        }
        Ok((tx.len() / d, d))
    }

    /// `x[.., j] + r[j]`, broadcasting `r` over every leading index.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, d) = self.row_operands("add_row", x, r)?;
        let rv = self.value(r).data().to_vec();
        let tx = self.value(x);
        let data = tx.data().iter().enumerate().map(|(i, v)| v + rv[i % d]).collect();
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(t, Op::AddRow(x, r), rg))
    }

    /// `x[.., j] * r[j]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, d) = self.row_operands("mul_row", x, r)?;
        let rv = self.value(r).data().to_vec();
        let tx = self.value(x);
        let data = tx.data().iter().enumerate().map(|(i, v)| v * rv[i % d]).collect();
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(t, Op::MulRow(x, r), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return shape_err("matmul", format!("inner dims {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        conv::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), rg))
    }

    /// `x: [n, c, h, w]`, `w: [o, c, kh, kw]`, optional bias `[o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, c, h, wd], &[o, c2, kh, kw]) = (&xs[..], &ws[..]) else {
            return shape_err("conv2d", format!("expected rank-4 input and kernel, got {xs:?} and {ws:?}"));
        };
        if c != c2 {
            return shape_err("conv2d", format!("input has {c} channels, kernel expects {c2}"));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return shape_err("conv2d", format!("bias length {} != {o}", self.value(b).len()));
            }
        }
        let geom = ConvGeom { kh, kw, stride, pad };
        let Some((ho, wo)) = geom.conv_out(h, wd) else {
            return shape_err("conv2d", format!("kernel {kh}x{kw} does not fit input {h}x{wd}"));
        };
        let plane = ho * wo;
        let ck = c * kh * kw;
        let mut out = vec![0.0; n * o * plane];
        let mut col = vec![0.0; ck * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for bi in 0..n {
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, geom, ho, wo, &mut col);
                let dst = &mut out[bi * o * plane..(bi + 1) * o * plane];
                if let Some(bv) = bv {
                    for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bv[oc]);
                    }
                }
                conv::gemm_nn(wv, &col, dst, o, ck, plane);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, o, ho, wo], out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// `x: [n, c, h, w]`, `w: [c, o, kh, kw]`, optional bias `[o]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, c, h, wd], &[c2, o, kh, kw]) = (&xs[..], &ws[..]) else {
            return shape_err(
                "conv_transpose2d",
                format!("expected rank-4 input and kernel, got {xs:?} and {ws:?}"),
            );
        };
        if c != c2 {
            return shape_err("conv_transpose2d", format!("input has {c} channels, kernel expects {c2}"));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return shape_err("conv_transpose2d", format!("bias length {} != {o}", self.value(b).len()));
            }
        }
        let geom = ConvGeom { kh, kw, stride, pad };
        let Some((ho, wo)) = geom.transpose_out(h, wd) else {
            return shape_err("conv_transpose2d", format!("degenerate output for input {h}x{wd}"));
        };
        if geom.conv_out(ho, wo) != Some((h, wd)) {
            return shape_err("conv_transpose2d", "stride/padding combination is not invertible");
        }
        let plane = h * wd;
        let okk = o * kh * kw;
        let mut out = vec![0.0; n * o * ho * wo];
        let mut cols = vec![0.0; okk * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                cols.iter_mut().for_each(|v| *v = 0.0);
                conv::gemm_tn(wv, &xv[bi * c * plane..(bi + 1) * c * plane], &mut cols, okk, c, plane);
                let dst = &mut out[bi * o * ho * wo..(bi + 1) * o * ho * wo];
                col2im(&cols, o, ho, wo, geom, h, wd, dst);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oc, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bv[oc]);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&[n, o, ho, wo], out)?,
            Op::ConvTranspose2d { x, w, b, geom },
            rg,
        ))
    }

    /// Normalizes each `(sample, channel)` plane to zero mean and unit
    /// (biased) variance. No affine term.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return shape_err("instance_norm", format!("expected [n, c, ...], got {shape:?}"));
        }
        let groups = shape[0] * shape[1];
        let m: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let s = &src[g * m..(g + 1) * m];
            let mean = s.iter().sum::<f64>() / m as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out[g * m..(g + 1) * m].iter_mut().zip(s) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        Ok(self.push_aux(Tensor::new(&shape, out)?, Op::InstanceNorm(x), rg, inv_std))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(AutogradError::Contract("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&d, lead)) = shape.split_last() else {
            return shape_err("sum_last", "rank-0 input");
        };
        let out: Vec<f64> = self.value(x).data().chunks(d).map(|c| c.iter().sum()).collect();
        let new_shape = if lead.is_empty() { vec![1] } else { lead.to_vec() };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::SumLast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Scales each row of a matrix to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("l2_normalize_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push_aux(Tensor::new(&[r, c], out)?, Op::L2NormalizeRows(x), rg, norms))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = matrix_dims("cross_entropy_rows", self.value(logits))?;
        if targets.len() != r || r == 0 {
            return shape_err(
                "cross_entropy_rows",
                format!("{} targets for {r} rows", targets.len()),
            );
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return shape_err("cross_entropy_rows", format!("target {t} out of {c} classes"));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[targets[i]];
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push_aux(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            rg,
            probs,
        ))
    }

    /// Picks the channel vectors of sample `batch` at flat spatial
    /// `locations` of a `[n, c, h, w]` map, giving `[locations.len(), c]`.
    pub fn gather_columns(&mut self, x: Var, batch: usize, locations: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return shape_err("gather_columns", format!("expected [n, c, h, w], got {shape:?}"));
        };
        if batch >= n {
            return shape_err("gather_columns", format!("batch index {batch} out of {n}"));
        }
        let plane = h * w;
        if let Some(&l) = locations.iter().find(|&&l| l >= plane) {
            return shape_err("gather_columns", format!("location {l} outside {h}x{w} map"));
        }
        let src = &self.value(x).data()[batch * c * plane..(batch + 1) * c * plane];
        let mut out = Vec::with_capacity(locations.len() * c);
        for &l in locations {
            for ch in 0..c {
                out.push(src[ch * plane + l]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[locations.len(), c], out)?,
            Op::GatherColumns {
                x,
                batch,
                locations: locations.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `[batch]` of the leading axis, keeping it as a size-1 axis.
    pub fn select_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || batch >= shape[0] {
            return shape_err("select_batch", format!("index {batch} out of {shape:?}"));
        }
        let m: usize = shape[1..].iter().product();
        let data = self.value(x).data()[batch * m..(batch + 1) * m].to_vec();
        let mut new_shape = shape.clone();
        new_shape[0] = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&new_shape, data)?, Op::SelectBatch { x, batch }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(AutogradError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        // leaves that require grad but were unreachable get explicit zeros
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| conv::axpy(1.0, g, d));
                acc(*b, &mut |d| conv::axpy(1.0, g, d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| conv::axpy(1.0, g, d));
                acc(*b, &mut |d| conv::axpy(-1.0, g, d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x));
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if va[i] <= vb[i] {
                            d[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        if va[i] > vb[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::AddScalar(x) => acc(*x, &mut |d| conv::axpy(1.0, g, d)),
            Op::MulScalar(x, s) => acc(*x, &mut |d| conv::axpy(*s, g, d)),
            Op::AddRow(x, r) => {
                let dlen = val(*r).len();
                acc(*x, &mut |d| conv::axpy(1.0, g, d));
                acc(*r, &mut |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % dlen] += gi;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (val(*x), val(*r));
                let dlen = vr.len();
                acc(*x, &mut |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i] += gi * vr[i % dlen];
                    }
                });
                acc(*r, &mut |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % dlen] += gi * vx[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| conv::gemm_nt(g, vb, d, m, n, k));
                acc(*b, &mut |d| conv::gemm_tn(va, g, d, k, m, n));
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ys = node.value.shape();
                let (o, ho, wo) = (ys[1], ys[2], ys[3]);
                let plane = ho * wo;
                let ck = c * geom.kh * geom.kw;
                let (vx, vw) = (val(*x), val(*w));
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut col = vec![0.0; ck * plane];
                let mut dx = if need_x { vec![0.0; vx.len()] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0; vw.len()] } else { Vec::new() };
                for bi in 0..n {
                    let dy = &g[bi * o * plane..(bi + 1) * o * plane];
                    if need_w {
                        im2col(&vx[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, *geom, ho, wo, &mut col);
                        conv::gemm_nt(dy, &col, &mut dw, o, plane, ck);
                    }
                    if need_x {
                        col.iter_mut().for_each(|v| *v = 0.0);
                        conv::gemm_tn(vw, dy, &mut col, ck, o, plane);
                        col2im(&col, c, h, wd, *geom, ho, wo, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                }
                if need_x {
                    acc(*x, &mut |d| conv::axpy(1.0, &dx, d));
                }
                if need_w {
                    acc(*w, &mut |d| conv::axpy(1.0, &dw, d));
                }
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for bi in 0..n {
                            for (oc, chunk) in g[bi * o * plane..(bi + 1) * o * plane].chunks(plane).enumerate() {
                                d[oc] += chunk.iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ys = node.value.shape();
                let (o, ho, wo) = (ys[1], ys[2], ys[3]);
                let plane = h * wd;
                let okk = o * geom.kh * geom.kw;
                let (vx, vw) = (val(*x), val(*w));
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut cols = vec![0.0; okk * plane];
                let mut dx = if need_x { vec![0.0; vx.len()] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0; vw.len()] } else { Vec::new() };
                for bi in 0..n {
                    let dy = &g[bi * o * ho * wo..(bi + 1) * o * ho * wo];
                    im2col(dy, o, ho, wo, *geom, h, wd, &mut cols);
                    if need_x {
                        conv::gemm_nn(vw, &cols, &mut dx[bi * c * plane..(bi + 1) * c * plane], c, okk, plane);
                    }
                    if need_w {
                        conv::gemm_nt(&vx[bi * c * plane..(bi + 1) * c * plane], &cols, &mut dw, c, plane, okk);
                    }
                }
                if need_x {
                    acc(*x, &mut |d| conv::axpy(1.0, &dx, d));
                }
                if need_w {
                    acc(*w, &mut |d| conv::axpy(1.0, &dw, d));
                }
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for bi in 0..n {
                            for (oc, chunk) in g[bi * o * ho * wo..(bi + 1) * o * ho * wo].chunks(ho * wo).enumerate() {
                                d[oc] += chunk.iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::InstanceNorm(x) => {
                let y = node.value.data();
                let shape = node.value.shape();
                let m: usize = shape[2..].iter().product();
                let inv = &node.aux;
                acc(*x, &mut |d| {
                    for (gi, &inv_std) in inv.iter().enumerate() {
                        let r = gi * m..(gi + 1) * m;
                        let (gs, ys) = (&g[r.clone()], &y[r.clone()]);
                        let sum_g: f64 = gs.iter().sum();
                        let sum_gy: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        let mf = m as f64;
                        for ((dv, &gv), &yv) in d[r].iter_mut().zip(gs).zip(ys) {
                            *dv += inv_std / mf * (mf * gv - sum_g - yv * sum_gy);
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += if vx[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * y));
            }
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(vx).for_each(|((d, g), x)| *d += g / x));
            }
            Op::Square(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(vx).for_each(|((d, g), x)| *d += 2.0 * g * x));
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if vx[i] > *lo && vx[i] < *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SumLast(x) => {
                let dlen = *self.nodes[x.0].value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += g[i / dlen];
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| conv::axpy(1.0, g, d)),
            Op::L2NormalizeRows(x) => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let norms = &node.aux;
                acc(*x, &mut |d| {
                    for (i, &nrm) in norms.iter().enumerate() {
                        let r = i * c..(i + 1) * c;
                        let yd: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            d[j] += (g[j] - y[j] * yd) / nrm;
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets } => {
                let c = self.nodes[logits.0].value.shape()[1];
                let r = targets.len() as f64;
                let probs = &node.aux;
                acc(*logits, &mut |d| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[i * c + j] += g[0] * (probs[i * c + j] - onehot) / r;
                        }
                    }
                });
            }
            Op::GatherColumns { x, batch, locations } => {
                let xs = self.nodes[x.0].value.shape();
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                let base = batch * c * plane;
                acc(*x, &mut |d| {
                    for (s, &l) in locations.iter().enumerate() {
                        for ch in 0..c {
                            d[base + ch * plane + l] += g[s * c + ch];
                        }
                    }
                });
            }
            Op::SelectBatch { x, batch } => {
                let m = g.len();
                acc(*x, &mut |d| conv::axpy(1.0, g, &mut d[batch * m..(batch + 1) * m]));
            }
        }
    }
}
