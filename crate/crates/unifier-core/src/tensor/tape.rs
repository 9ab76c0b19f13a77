//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in execution order, so the tape is always
//! topologically sorted; `backward` walks it once in reverse. Leaves copy
//! their values in and may carry a source id so parameter stores can
//! collect gradients after the fact.

use crate::error::{Error, Result};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Identifies where a leaf's gradient should be deposited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceId(pub usize);

/// Axis selector for rank-2 channel means: `Feature` averages over the
/// sequence axis (one value per feature channel), `Embedding` averages over
/// the feature axis (one value per sequence position).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceAxis {
    Feature,
    Embedding,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    Scale { x: usize, c: f64 },
    Gelu { x: usize },
    Sigmoid { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    MeanReduce { x: usize, axis: ReduceAxis },
    ConcatCols { parts: Vec<usize> },
    SliceCols { x: usize, from: usize, to: usize },
    GatherRows { x: usize, rows: Vec<usize> },
    Transpose { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    Reshape { x: usize },
    EmbedRow { table: usize, idx: usize },
    NllMean { logp: usize, targets: Vec<usize> },
    BceWithLogitsMean { logits: usize, targets: Vec<f64> },
    SmoothL1Mean { pred: usize, targets: Vec<f64>, beta: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::MeanReduce { .. } => "mean_reduce",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Transpose { .. } => "transpose",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::Reshape { .. } => "reshape",
            Op::EmbedRow { .. } => "embed_row",
            Op::NllMean { .. } => "nll_mean",
            Op::BceWithLogitsMean { .. } => "bce_with_logits_mean",
            Op::SmoothL1Mean { .. } => "smooth_l1_mean",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    source: Option<SourceId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// row-major matmul kernels

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// dA += dC · Bᵀ
fn mm_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (dv, bv) in dcrow.iter().zip(brow) {
                s += dv * bv;
            }
            da[i * k + p] += s;
        }
    }
}

/// dB += Aᵀ · dC
fn mm_grad_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, &dv) in dbrow.iter_mut().zip(dcrow) {
                *o += av * dv;
            }
        }
    }
}

/// Iterate lanes along `axis`: calls `f(lane_base, stride)` once per lane.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * lane * inner + i, inner);
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op name of node `i`; used by instrumentation tests and cost audits.
    pub fn op_name(&self, i: usize) -> &'static str {
        self.nodes[i].op.name()
    }

    /// Number of nodes of the named op kind within [from, to).
    pub fn count_ops(&self, kind: &str, from: usize, to: usize) -> usize {
        (from..to.min(self.nodes.len()))
            .filter(|&i| self.nodes[i].op.name() == kind)
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` call w.r.t. node `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Leaves that carry a source id, with their accumulated gradients.
    pub fn source_grads(&self) -> impl Iterator<Item = (SourceId, &[f64])> {
        self.nodes.iter().zip(&self.grads).filter_map(|(n, g)| {
            match (n.source, g.as_deref()) {
                (Some(src), Some(grad)) => Some((src, grad)),
                _ => None,
            }
        })
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, source: Option<SourceId>) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite values out of op {} with shape {:?}",
            op.name(),
            value.shape
        );
        self.nodes.push(Node { value, op, needs_grad, source });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copy an external tensor in as a leaf. Gradient participation follows
    /// the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad;
        let value = Tensor { requires_grad: false, grad: None, ..t.clone() };
        self.push(value, Op::Leaf, needs, None)
    }

    /// Leaf that remembers where its gradient belongs.
    pub fn leaf_with_source(&mut self, t: &Tensor, source: SourceId) -> Var {
        let needs = t.requires_grad;
        let value = Tensor { requires_grad: false, grad: None, ..t.clone() };
        self.push(value, Op::Leaf, needs, Some(source))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor { requires_grad: false, grad: None, ..t };
        self.push(value, Op::Leaf, false, None)
    }

    /// Re-enter a node's value as a gradient-blocked constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false, None)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// `a[..., m, k] · b[k, n]`; rank-3 lhs is applied batch-wise.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if bsh.len() != 2 {
            return Err(Error::shape(format!("matmul rhs must be rank 2, got {bsh:?}")));
        }
        if ash.len() != 2 && ash.len() != 3 {
            return Err(Error::shape(format!("matmul lhs must be rank 2 or 3, got {ash:?}")));
        }
        let (k, n) = (bsh[0], bsh[1]);
        let inner = ash[ash.len() - 1];
        if inner != k {
            return Err(Error::shape(format!("matmul inner dims disagree: {ash:?} vs {bsh:?}")));
        }
        let m = ash[ash.len() - 2];
        let batch = if ash.len() == 3 { ash[0] } else { 1 };
        let mut out = vec![0.0; batch * m * n];
        let adata = &self.nodes[a.0].value.data;
        let bdata = &self.nodes[b.0].value.data;
        for q in 0..batch {
            mm(&adata[q * m * k..(q + 1) * m * k], bdata, m, k, n, &mut out[q * m * n..(q + 1) * m * n]);
        }
        let oshape = if ash.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_data(&oshape, out)?;
        Ok(self.push(value, Op::Matmul { a: a.0, b: b.0 }, needs, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_data(&self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, needs, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_data(&self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, needs, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_data(&self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, needs, None))
    }

    /// Broadcast-add a length-d row vector over every row of `x: [s, d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rs = self.shape(row).to_vec();
        if xs.len() != 2 || rs != [xs[1]] {
            return Err(Error::shape(format!("add_row expects [s,d] + [d], got {xs:?} + {rs:?}")));
        }
        let d = xs[1];
        let rdata = &self.nodes[row.0].value.data;
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + rdata[i % d])
            .collect();
        let needs = self.needs(x) || self.needs(row);
        let value = Tensor::from_data(&xs, data)?;
        Ok(self.push(value, Op::AddRow { x: x.0, row: row.0 }, needs, None))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        let value = Tensor::from_data(&self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x: x.0, c }, needs, None)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| gelu(v)).collect();
        let needs = self.needs(x);
        let value = Tensor::from_data(&self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x: x.0 }, needs, None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| sigmoid(v)).collect();
        let needs = self.needs(x);
        let value = Tensor::from_data(&self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid { x: x.0 }, needs, None)
    }

    /// Per-row layer normalization over `x: [s, d]` with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(format!("layer_norm expects rank 2, got {xs:?}")));
        }
        let (s, d) = (xs[0], xs[1]);
        if d < 2 {
            return Err(Error::shape("layer_norm feature width must be >= 2"));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm gain/bias must be length-d vectors"));
        }
        let xd = &self.nodes[x.0].value.data;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut out = vec![0.0; s * d];
        let mut means = vec![0.0; s];
        let mut rstds = vec![0.0; s];
        for i in 0..s {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let value = Tensor::from_data(&xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, mean: means, rstd: rstds },
            needs,
            None,
        ))
    }

    /// Shift-stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {xs:?}")));
        }
        let xd = self.nodes[x.0].value.data.clone();
        let mut out = xd;
        for_each_lane(&xs, axis, |base, stride| {
            let lane = xs[axis];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..lane {
                mx = mx.max(out[base + j * stride]);
            }
            let mut z = 0.0;
            for j in 0..lane {
                let e = (out[base + j * stride] - mx).exp();
                out[base + j * stride] = e;
                z += e;
            }
            for j in 0..lane {
                out[base + j * stride] /= z;
            }
        });
        let needs = self.needs(x);
        let value = Tensor::from_data(&xs, out)?;
        Ok(self.push(value, Op::Softmax { x: x.0, axis }, needs, None))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("log_softmax axis {axis} out of range for {xs:?}")));
        }
        let xd = self.nodes[x.0].value.data.clone();
        let mut out = xd;
        for_each_lane(&xs, axis, |base, stride| {
            let lane = xs[axis];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..lane {
                mx = mx.max(out[base + j * stride]);
            }
            let mut z = 0.0;
            for j in 0..lane {
                z += (out[base + j * stride] - mx).exp();
            }
            let lz = mx + z.ln();
            for j in 0..lane {
                out[base + j * stride] -= lz;
            }
        });
        let needs = self.needs(x);
        let value = Tensor::from_data(&xs, out)?;
        Ok(self.push(value, Op::LogSoftmax { x: x.0, axis }, needs, None))
    }

    /// Channel means of a rank-2 tensor; see [`ReduceAxis`].
    pub fn mean_reduce(&mut self, x: Var, axis: ReduceAxis) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(format!("mean_reduce expects rank 2, got {xs:?}")));
        }
        let (s, d) = (xs[0], xs[1]);
        let xd = &self.nodes[x.0].value.data;
        let (out, oshape) = match axis {
            ReduceAxis::Feature => {
                let mut v = vec![0.0; d];
                for i in 0..s {
                    for j in 0..d {
                        v[j] += xd[i * d + j];
                    }
                }
                for e in v.iter_mut() {
                    *e /= s as f64;
                }
                (v, vec![d])
            }
            ReduceAxis::Embedding => {
                let mut v = vec![0.0; s];
                for i in 0..s {
                    v[i] = xd[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64;
                }
                (v, vec![s])
            }
        };
        let needs = self.needs(x);
        let value = Tensor::from_data(&oshape, out)?;
        Ok(self.push(value, Op::MeanReduce { x: x.0, axis }, needs, None))
    }

    /// Concatenate rank-2 tensors along the feature axis. All parts must
    /// share both dimensions; slot k occupies columns [k*d, (k+1)*d).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols needs at least one input"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::shape(format!("concat_cols expects rank 2, got {first:?}")));
        }
        for &p in parts {
            if self.shape(p) != first {
                return Err(Error::shape(format!(
                    "concat_cols inputs disagree: {:?} vs {:?}",
                    self.shape(p),
                    first
                )));
            }
        }
        let (s, d) = (first[0], first[1]);
        let k = parts.len();
        let mut out = vec![0.0; s * k * d];
        for (slot, &p) in parts.iter().enumerate() {
            let pd = &self.nodes[p.0].value.data;
            for i in 0..s {
                out[i * k * d + slot * d..i * k * d + (slot + 1) * d]
                    .copy_from_slice(&pd[i * d..(i + 1) * d]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::from_data(&[s, k * d], out)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, needs, None))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || from >= to || to > xs[1] {
            return Err(Error::shape(format!("slice_cols [{from},{to}) invalid for {xs:?}")));
        }
        let (s, d) = (xs[0], xs[1]);
        let w = to - from;
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; s * w];
        for i in 0..s {
            out[i * w..(i + 1) * w].copy_from_slice(&xd[i * d + from..i * d + to]);
        }
        let needs = self.needs(x);
        let value = Tensor::from_data(&[s, w], out)?;
        Ok(self.push(value, Op::SliceCols { x: x.0, from, to }, needs, None))
    }

    /// Select rows of a rank-2 tensor (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(format!("gather_rows expects rank 2, got {xs:?}")));
        }
        if rows.is_empty() {
            return Err(Error::shape("gather_rows needs at least one row"));
        }
        let (s, d) = (xs[0], xs[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= s) {
            return Err(Error::shape(format!("gather_rows index {bad} out of range {s}")));
        }
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; rows.len() * d];
        for (i, &r) in rows.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let needs = self.needs(x);
        let value = Tensor::from_data(&[rows.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows { x: x.0, rows: rows.to_vec() }, needs, None))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(format!("transpose expects rank 2, got {xs:?}")));
        }
        let (m, n) = (xs[0], xs[1]);
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let needs = self.needs(x);
        let value = Tensor::from_data(&[n, m], out)?;
        Ok(self.push(value, Op::Transpose { x: x.0 }, needs, None))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 }, needs, None)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel() as f64;
        let s: f64 = self.nodes[x.0].value.data.iter().sum::<f64>() / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x: x.0 }, needs, None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.nodes[x.0].value.data.clone();
        let needs = self.needs(x);
        let value = Tensor::from_data(shape, data)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, needs, None))
    }

    /// Row `idx` of an embedding table, as a `[1, d]` tensor.
    pub fn embed_row(&mut self, table: Var, idx: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || idx >= ts[0] {
            return Err(Error::shape(format!("embed_row {idx} invalid for table {ts:?}")));
        }
        let d = ts[1];
        let data = self.nodes[table.0].value.data[idx * d..(idx + 1) * d].to_vec();
        let needs = self.needs(table);
        let value = Tensor::from_data(&[1, d], data)?;
        Ok(self.push(value, Op::EmbedRow { table: table.0, idx }, needs, None))
    }

    /// Mean negative log-likelihood: `-(1/m) Σ logp[i, targets[i]]`.
    pub fn nll_mean(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let xs = self.shape(logp).to_vec();
        if xs.len() != 2 || targets.len() != xs[0] {
            return Err(Error::shape(format!(
                "nll_mean expects [m,c] with m targets, got {xs:?} and {} targets",
                targets.len()
            )));
        }
        let c = xs[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(format!("target class {bad} out of range {c}")));
        }
        let xd = &self.nodes[logp.0].value.data;
        let m = xs[0] as f64;
        let loss = -targets.iter().enumerate().map(|(i, &t)| xd[i * c + t]).sum::<f64>() / m;
        let needs = self.needs(logp);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllMean { logp: logp.0, targets: targets.to_vec() },
            needs,
            None,
        ))
    }

    /// Numerically stable binary cross-entropy from logits, averaged.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.nodes[logits.0].value.numel();
        if targets.len() != n {
            return Err(Error::shape(format!(
                "bce target count {} != logit count {n}",
                targets.len()
            )));
        }
        let xd = &self.nodes[logits.0].value.data;
        let loss = xd
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-(x.abs())).exp().ln_1p())
            .sum::<f64>()
            / n as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogitsMean { logits: logits.0, targets: targets.to_vec() },
            needs,
            None,
        ))
    }

    /// Huber-style smooth L1 against fixed targets, averaged over elements.
    pub fn smooth_l1_mean(&mut self, pred: Var, targets: &[f64], beta: f64) -> Result<Var> {
        let n = self.nodes[pred.0].value.numel();
        if targets.len() != n {
            return Err(Error::shape(format!(
                "smooth_l1 target count {} != pred count {n}",
                targets.len()
            )));
        }
        if beta <= 0.0 {
            return Err(Error::contract("smooth_l1 beta must be positive"));
        }
        let xd = &self.nodes[pred.0].value.data;
        let loss = xd
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum::<f64>()
            / n as f64;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1Mean { pred: pred.0, targets: targets.to_vec(), beta },
            needs,
            None,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Node gradients are replaced (not
    /// accumulated) on each call; accumulation across backward passes is the
    /// parameter store's job.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let gout = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn add_grad(&mut self, node: usize, delta: impl FnOnce(&mut Vec<f64>)) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let n = self.nodes[node].value.numel();
        let g = self.grads[node].get_or_insert_with(|| vec![0.0; n]);
        delta(g);
    }

    fn propagate(&mut self, i: usize, gout: &[f64]) {
        if !self.nodes[i].needs_grad {
            return;
        }
        // Ops hold node indices; temporarily move the op out to satisfy the
        // borrow checker while mutating gradient buffers.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let ash = self.nodes[*a].value.shape.clone();
                let bsh = self.nodes[*b].value.shape.clone();
                let (k, n) = (bsh[0], bsh[1]);
                let m = ash[ash.len() - 2];
                let batch = if ash.len() == 3 { ash[0] } else { 1 };
                if self.nodes[*a].needs_grad {
                    let bdata = self.nodes[*b].value.data.clone();
                    self.add_grad(*a, |ga| {
                        for q in 0..batch {
                            mm_grad_a(
                                &gout[q * m * n..(q + 1) * m * n],
                                &bdata,
                                m,
                                k,
                                n,
                                &mut ga[q * m * k..(q + 1) * m * k],
                            );
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    let adata = self.nodes[*a].value.data.clone();
                    self.add_grad(*b, |gb| {
                        for q in 0..batch {
                            mm_grad_b(&adata[q * m * k..(q + 1) * m * k], &gout[q * m * n..(q + 1) * m * n], m, k, n, gb);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.add_grad(*a, |g| for (gi, &d) in g.iter_mut().zip(gout) { *gi += d });
                self.add_grad(*b, |g| for (gi, &d) in g.iter_mut().zip(gout) { *gi += d });
            }
            Op::Sub { a, b } => {
                self.add_grad(*a, |g| for (gi, &d) in g.iter_mut().zip(gout) { *gi += d });
                self.add_grad(*b, |g| for (gi, &d) in g.iter_mut().zip(gout) { *gi -= d });
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let bd = self.nodes[*b].value.data.clone();
                    self.add_grad(*a, |g| {
                        for ((gi, &d), &bv) in g.iter_mut().zip(gout).zip(&bd) {
                            *gi += d * bv;
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    let ad = self.nodes[*a].value.data.clone();
                    self.add_grad(*b, |g| {
                        for ((gi, &d), &av) in g.iter_mut().zip(gout).zip(&ad) {
                            *gi += d * av;
                        }
                    });
                }
            }
            Op::AddRow { x, row } => {
                let d = self.nodes[*row].value.numel();
                self.add_grad(*x, |g| for (gi, &dv) in g.iter_mut().zip(gout) { *gi += dv });
                self.add_grad(*row, |g| {
                    for (i, &dv) in gout.iter().enumerate() {
                        g[i % d] += dv;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.add_grad(*x, |g| for (gi, &dv) in g.iter_mut().zip(gout) { *gi += c * dv });
            }
            Op::Gelu { x } => {
                let xd = self.nodes[*x].value.data.clone();
                self.add_grad(*x, |g| {
                    for ((gi, &dv), &xv) in g.iter_mut().zip(gout).zip(&xd) {
                        *gi += dv * gelu_prime(xv);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let sd = self.nodes[i].value.data.clone();
                self.add_grad(*x, |g| {
                    for ((gi, &dv), &sv) in g.iter_mut().zip(gout).zip(&sd) {
                        *gi += dv * sv * (1.0 - sv);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xs = self.nodes[*x].value.shape.clone();
                let (s, d) = (xs[0], xs[1]);
                let xd = self.nodes[*x].value.data.clone();
                let gd = self.nodes[*gain].value.data.clone();
                let mean = mean.clone();
                let rstd = rstd.clone();
                if self.nodes[*x].needs_grad {
                    self.add_grad(*x, |g| {
                        for r in 0..s {
                            let m = mean[r];
                            let rs = rstd[r];
                            // dyh = dy * gain; two lane means of dyh and dyh*xhat
                            let mut mean_dyh = 0.0;
                            let mut mean_dyh_xhat = 0.0;
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - m) * rs;
                                let dyh = gout[r * d + j] * gd[j];
                                mean_dyh += dyh;
                                mean_dyh_xhat += dyh * xhat;
                            }
                            mean_dyh /= d as f64;
                            mean_dyh_xhat /= d as f64;
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - m) * rs;
                                let dyh = gout[r * d + j] * gd[j];
                                g[r * d + j] += rs * (dyh - mean_dyh - xhat * mean_dyh_xhat);
                            }
                        }
                    });
                }
                if self.nodes[*gain].needs_grad {
                    self.add_grad(*gain, |g| {
                        for r in 0..s {
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - mean[r]) * rstd[r];
                                g[j] += gout[r * d + j] * xhat;
                            }
                        }
                    });
                }
                if self.nodes[*bias].needs_grad {
                    self.add_grad(*bias, |g| {
                        for r in 0..s {
                            for j in 0..d {
                                g[j] += gout[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let shape = self.nodes[i].value.shape.clone();
                let p = self.nodes[i].value.data.clone();
                let lane = shape[*axis];
                let axis = *axis;
                self.add_grad(*x, |g| {
                    for_each_lane(&shape, axis, |base, stride| {
                        let mut dot = 0.0;
                        for j in 0..lane {
                            dot += gout[base + j * stride] * p[base + j * stride];
                        }
                        for j in 0..lane {
                            let ix = base + j * stride;
                            g[ix] += p[ix] * (gout[ix] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax { x, axis } => {
                let shape = self.nodes[i].value.shape.clone();
                let logp = self.nodes[i].value.data.clone();
                let lane = shape[*axis];
                let axis = *axis;
                self.add_grad(*x, |g| {
                    for_each_lane(&shape, axis, |base, stride| {
                        let mut sum = 0.0;
                        for j in 0..lane {
                            sum += gout[base + j * stride];
                        }
                        for j in 0..lane {
                            let ix = base + j * stride;
                            g[ix] += gout[ix] - logp[ix].exp() * sum;
                        }
                    });
                });
            }
            Op::MeanReduce { x, axis } => {
                let xs = self.nodes[*x].value.shape.clone();
                let (s, d) = (xs[0], xs[1]);
                match axis {
                    ReduceAxis::Feature => self.add_grad(*x, |g| {
                        for i2 in 0..s {
                            for j in 0..d {
                                g[i2 * d + j] += gout[j] / s as f64;
                            }
                        }
                    }),
                    ReduceAxis::Embedding => self.add_grad(*x, |g| {
                        for i2 in 0..s {
                            for j in 0..d {
                                g[i2 * d + j] += gout[i2] / d as f64;
                            }
                        }
                    }),
                }
            }
            Op::ConcatCols { parts } => {
                let d = self.nodes[parts[0]].value.shape[1];
                let s = self.nodes[parts[0]].value.shape[0];
                let k = parts.len();
                for (slot, &p) in parts.iter().enumerate() {
                    self.add_grad(p, |g| {
                        for i2 in 0..s {
                            for j in 0..d {
                                g[i2 * d + j] += gout[i2 * k * d + slot * d + j];
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, from, to } => {
                let d = self.nodes[*x].value.shape[1];
                let s = self.nodes[*x].value.shape[0];
                let (from, to) = (*from, *to);
                let w = to - from;
                self.add_grad(*x, |g| {
                    for i2 in 0..s {
                        for j in 0..w {
                            g[i2 * d + from + j] += gout[i2 * w + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = self.nodes[*x].value.shape[1];
                let rows = rows.clone();
                self.add_grad(*x, |g| {
                    for (i2, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            g[r * d + j] += gout[i2 * d + j];
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let xs = self.nodes[*x].value.shape.clone();
                let (m, n) = (xs[0], xs[1]);
                self.add_grad(*x, |g| {
                    for i2 in 0..m {
                        for j in 0..n {
                            g[i2 * n + j] += gout[j * m + i2];
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let dv = gout[0];
                self.add_grad(*x, |g| for gi in g.iter_mut() { *gi += dv });
            }
            Op::MeanAll { x } => {
                let n = self.nodes[*x].value.numel() as f64;
                let dv = gout[0] / n;
                self.add_grad(*x, |g| for gi in g.iter_mut() { *gi += dv });
            }
            Op::Reshape { x } => {
                self.add_grad(*x, |g| for (gi, &dv) in g.iter_mut().zip(gout) { *gi += dv });
            }
            Op::EmbedRow { table, idx } => {
                let d = self.nodes[*table].value.shape[1];
                let idx = *idx;
                self.add_grad(*table, |g| {
                    for j in 0..d {
                        g[idx * d + j] += gout[j];
                    }
                });
            }
            Op::NllMean { logp, targets } => {
                let c = self.nodes[*logp].value.shape[1];
                let m = targets.len() as f64;
                let targets = targets.clone();
                let dv = gout[0];
                self.add_grad(*logp, |g| {
                    for (i2, &t) in targets.iter().enumerate() {
                        g[i2 * c + t] -= dv / m;
                    }
                });
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let xd = self.nodes[*logits].value.data.clone();
                let n = targets.len() as f64;
                let targets = targets.clone();
                let dv = gout[0];
                self.add_grad(*logits, |g| {
                    for ((gi, &x), &t) in g.iter_mut().zip(&xd).zip(&targets) {
                        *gi += dv * (sigmoid(x) - t) / n;
                    }
                });
            }
            Op::SmoothL1Mean { pred, targets, beta } => {
                let xd = self.nodes[*pred].value.data.clone();
                let n = targets.len() as f64;
                let beta = *beta;
                let targets = targets.clone();
                let dv = gout[0];
                self.add_grad(*pred, |g| {
                    for ((gi, &p), &t) in g.iter_mut().zip(&xd).zip(&targets) {
                        let d = p - t;
                        *gi += dv * (d / beta).clamp(-1.0, 1.0) / n;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}
