//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Operations are recorded in topological order during the forward pass;
//! `backward` replays the adjoints in reverse. Each simulated client owns
//! a private tape per training step.

use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

enum Op {
    Leaf,
    /// a[m x k] * b[k x n]
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// x[n x d] + b[1 x d], b added to every row
    AddRowBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    RmsNormRows { x: NodeId, gain: NodeId },
    Gelu(NodeId),
    /// Row gather from a [V x d] table.
    Embed { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    /// Per-row dot product of two [n x d] tensors -> [n x 1]
    RowwiseDot(NodeId, NodeId),
    /// x[n x d] * w[n x 1], column broadcast
    MulColBroadcast(NodeId, NodeId),
    /// Column means: [n x k] -> [1 x k]
    ColMean(NodeId),
    /// Dot with a constant vector: [1 x k] -> [1 x 1]
    DotConst(NodeId, Vec<f64>),
    /// Mean masked NLL over row-softmaxed logits [T x V].
    NllMasked { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

const RMS_EPS: f64 = 1e-8;

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.rows, value.cols);
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant leaf (no gradient consumer reads it back).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Record a parameter's current value as a leaf.
    pub fn param(&mut self, p: &Param) -> NodeId {
        self.push(p.value.clone(), Op::Leaf)
    }

    /// Accumulate a leaf's gradient into the parameter's grad slot.
    /// Frozen parameters are skipped, keeping their grad identically zero.
    pub fn absorb_grad(&self, id: NodeId, p: &mut Param) {
        if !p.trainable {
            return;
        }
        let g = self.grad(id);
        debug_assert_eq!(g.shape(), p.grad.shape());
        for (dst, src) in p.grad.data.iter_mut().zip(&g.data) {
            *dst += *src;
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k1) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k1 != k2 {
            return Err(Error::Shape(format!("matmul {}x{} * {}x{}", m, k1, k2, n)));
        }
        let mut out = Tensor::zeros(m, n);
        {
            let av = self.value(a);
            let bv = self.value(b);
            matmul_into(av, bv, &mut out);
        }
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = v.shape();
        let mut out = Tensor::zeros(n, m);
        for i in 0..m {
            for j in 0..n {
                *out.at_mut(j, i) = v.at(i, j);
            }
        }
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("add: shapes differ".into()));
        }
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.value(a).shape();
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::Add(a, b)))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).shape();
        let (br, bc) = self.value(b).shape();
        if br != 1 || bc != d {
            return Err(Error::Shape("add_row_broadcast: bias must be 1 x d".into()));
        }
        let mut out = self.value(x).clone();
        for i in 0..n {
            for j in 0..d {
                *out.at_mut(i, j) += self.nodes[b.0].value.at(0, j);
            }
        }
        Ok(self.push(out, Op::AddRowBroadcast(x, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("mul: shapes differ".into()));
        }
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.value(a).shape();
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        self.push(out, Op::Scale(a, c))
    }

    /// Numerically stable row softmax (max subtraction).
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (n, k) = v.shape();
        let mut out = Tensor::zeros(n, k);
        for i in 0..n {
            softmax_row(v.row(i), &mut out.data[i * k..(i + 1) * k]);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// RMS normalization per row with a learned gain: y = x / rms(x) * g.
    pub fn rmsnorm_rows(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).shape();
        if self.value(gain).shape() != (1, d) {
            return Err(Error::Shape("rmsnorm gain must be 1 x d".into()));
        }
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let row = self.value(x).row(i);
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + RMS_EPS).sqrt();
            for j in 0..d {
                *out.at_mut(i, j) = row[j] / rms * self.nodes[gain.0].value.at(0, j);
            }
        }
        Ok(self.push(out, Op::RmsNormRows { x, gain }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.value(table).shape();
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Invalid(format!("token id {} out of vocab {}", bad, v)));
        }
        let mut out = Tensor::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            out.data[i * d..(i + 1) * d].copy_from_slice(self.value(table).row(id));
        }
        Ok(self.push(out, Op::Embed { table, ids: ids.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = self.value(x).shape();
        if start + len > d {
            return Err(Error::Shape("slice_cols out of range".into()));
        }
        let mut out = Tensor::zeros(n, len);
        for i in 0..n {
            for j in 0..len {
                *out.at_mut(i, j) = self.value(x).at(i, start + j);
            }
        }
        Ok(self.push(out, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: empty".into()));
        }
        let n = self.value(parts[0]).rows;
        if parts.iter().any(|&p| self.value(p).rows != n) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(n, total);
        for i in 0..n {
            let mut off = 0;
            for &p in parts {
                let c = self.value(p).cols;
                for j in 0..c {
                    *out.at_mut(i, off + j) = self.value(p).at(i, j);
                }
                off += c;
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn rowwise_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("rowwise_dot: shapes differ".into()));
        }
        let (n, d) = self.value(a).shape();
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..d {
                s += self.value(a).at(i, j) * self.value(b).at(i, j);
            }
            out.data[i] = s;
        }
        Ok(self.push(out, Op::RowwiseDot(a, b)))
    }

    pub fn mul_col_broadcast(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).shape();
        if self.value(w).shape() != (n, 1) {
            return Err(Error::Shape("mul_col_broadcast: weight must be n x 1".into()));
        }
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let wv = self.value(w).data[i];
            for j in 0..d {
                *out.at_mut(i, j) = self.value(x).at(i, j) * wv;
            }
        }
        Ok(self.push(out, Op::MulColBroadcast(x, w)))
    }

    pub fn col_mean(&mut self, x: NodeId) -> NodeId {
        let (n, k) = self.value(x).shape();
        let mut out = Tensor::zeros(1, k);
        for j in 0..k {
            let mut s = 0.0;
            for i in 0..n {
                s += self.value(x).at(i, j);
            }
            out.data[j] = s / n as f64;
        }
        self.push(out, Op::ColMean(x))
    }

    pub fn dot_const(&mut self, x: NodeId, c: Vec<f64>) -> Result<NodeId> {
        let (r, k) = self.value(x).shape();
        if r != 1 || c.len() != k {
            return Err(Error::Shape("dot_const: expects 1 x k and len-k constant".into()));
        }
        let s: f64 = self.value(x).data.iter().zip(&c).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor { rows: 1, cols: 1, data: vec![s] }, Op::DotConst(x, c)))
    }

    /// Mean NLL over masked positions; probabilities via stable row softmax.
    /// The mask marks response positions; instruction positions are excluded.
    pub fn nll_masked(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let (t, v) = self.value(logits).shape();
        if targets.len() != t || mask.len() != t {
            return Err(Error::Shape("nll_masked: targets/mask length must equal rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&x| x >= v) {
            return Err(Error::Invalid(format!("target id {} out of vocab {}", bad, v)));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Invalid("nll_masked: mask selects no positions".into()));
        }
        let mut total = 0.0;
        let mut probs = vec![0.0; v];
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            softmax_row(self.value(logits).row(i), &mut probs);
            total -= probs[targets[i]].max(f64::MIN_POSITIVE).ln();
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor { rows: 1, cols: 1, data: vec![loss] },
            Op::NllMasked { logits, targets: targets.to_vec(), mask: mask.to_vec() },
        ))
    }

    /// Propagate adjoints from a scalar loss node back through the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invalid("backward: loss node not on tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid("backward: loss must be scalar".into()));
        }
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[loss.0].grad.data[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            // Take the op apart without holding a borrow on the whole node.
            let grad = self.nodes[idx].grad.clone();
            if grad.data.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    // dA = dY * B^T ; dB = A^T * dY
                    let bv = self.nodes[b.0].value.clone();
                    let av = self.nodes[a.0].value.clone();
                    {
                        let ga = &mut self.nodes[a.0].grad;
                        for i in 0..ga.rows {
                            for j in 0..ga.cols {
                                let mut s = 0.0;
                                for k in 0..grad.cols {
                                    s += grad.at(i, k) * bv.at(j, k);
                                }
                                *ga.at_mut(i, j) += s;
                            }
                        }
                    }
                    let gb = &mut self.nodes[b.0].grad;
                    for i in 0..gb.rows {
                        for j in 0..gb.cols {
                            let mut s = 0.0;
                            for k in 0..grad.rows {
                                s += av.at(k, i) * grad.at(k, j);
                            }
                            *gb.at_mut(i, j) += s;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..grad.rows {
                        for j in 0..grad.cols {
                            *ga.at_mut(j, i) += grad.at(i, j);
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut self.nodes[a.0].grad, &grad);
                    accumulate(&mut self.nodes[b.0].grad, &grad);
                }
                Op::AddRowBroadcast(x, b) => {
                    let (x, b) = (*x, *b);
                    accumulate(&mut self.nodes[x.0].grad, &grad);
                    let gb = &mut self.nodes[b.0].grad;
                    for i in 0..grad.rows {
                        for j in 0..grad.cols {
                            *gb.at_mut(0, j) += grad.at(i, j);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (i, g) in grad.data.iter().enumerate() {
                        self.nodes[a.0].grad.data[i] += g * bv.data[i];
                    }
                    for (i, g) in grad.data.iter().enumerate() {
                        self.nodes[b.0].grad.data[i] += g * av.data[i];
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    for (i, g) in grad.data.iter().enumerate() {
                        self.nodes[a.0].grad.data[i] += g * c;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = self.nodes[idx].value.clone();
                    let (n, k) = y.shape();
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..k {
                            dot += grad.at(i, j) * y.at(i, j);
                        }
                        for j in 0..k {
                            *ga.at_mut(i, j) += y.at(i, j) * (grad.at(i, j) - dot);
                        }
                    }
                }
                Op::RmsNormRows { x, gain } => {
                    let (x, gain) = (*x, *gain);
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gain.0].value.clone();
                    let (n, d) = xv.shape();
                    for i in 0..n {
                        let row = xv.row(i);
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64 + RMS_EPS;
                        let rms = ms.sqrt();
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += grad.at(i, j) * gv.at(0, j) * row[j];
                        }
                        for j in 0..d {
                            let gx = grad.at(i, j) * gv.at(0, j) / rms
                                - row[j] * dot / (d as f64 * rms * ms);
                            self.nodes[x.0].grad.data[i * d + j] += gx;
                        }
                        for j in 0..d {
                            self.nodes[gain.0].grad.data[j] += grad.at(i, j) * row[j] / rms;
                        }
                    }
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let xv = self.nodes[x.0].value.clone();
                    for (i, g) in grad.data.iter().enumerate() {
                        self.nodes[x.0].grad.data[i] += g * gelu_prime(xv.data[i]);
                    }
                }
                Op::Embed { table, ids } => {
                    let (table, ids) = (*table, ids.clone());
                    let d = grad.cols;
                    for (i, id) in ids.iter().enumerate() {
                        for j in 0..d {
                            self.nodes[table.0].grad.data[id * d + j] += grad.at(i, j);
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..grad.rows {
                        for j in 0..len {
                            *gx.at_mut(i, start + j) += grad.at(i, j);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.cols;
                        for i in 0..grad.rows {
                            for j in 0..c {
                                self.nodes[p.0].grad.data[i * c + j] += grad.at(i, off + j);
                            }
                        }
                        off += c;
                    }
                }
                Op::RowwiseDot(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let (n, d) = av.shape();
                    for i in 0..n {
                        let g = grad.data[i];
                        for j in 0..d {
                            self.nodes[a.0].grad.data[i * d + j] += g * bv.at(i, j);
                        }
                        for j in 0..d {
                            self.nodes[b.0].grad.data[i * d + j] += g * av.at(i, j);
                        }
                    }
                }
                Op::MulColBroadcast(x, w) => {
                    let (x, w) = (*x, *w);
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    let (n, d) = xv.shape();
                    for i in 0..n {
                        let wval = wv.data[i];
                        let mut s = 0.0;
                        for j in 0..d {
                            self.nodes[x.0].grad.data[i * d + j] += grad.at(i, j) * wval;
                            s += grad.at(i, j) * xv.at(i, j);
                        }
                        self.nodes[w.0].grad.data[i] += s;
                    }
                }
                Op::ColMean(x) => {
                    let x = *x;
                    let gx = &mut self.nodes[x.0].grad;
                    let (n, k) = gx.shape();
                    for i in 0..n {
                        for j in 0..k {
                            *gx.at_mut(i, j) += grad.at(0, j) / n as f64;
                        }
                    }
                }
                Op::DotConst(x, c) => {
                    let (x, c) = (*x, c.clone());
                    let g = grad.data[0];
                    for (j, cv) in c.iter().enumerate() {
                        self.nodes[x.0].grad.data[j] += g * cv;
                    }
                }
                Op::NllMasked { logits, targets, mask } => {
                    let (logits, targets, mask) = (*logits, targets.clone(), mask.clone());
                    let lv = self.nodes[logits.0].value.clone();
                    let (t, v) = lv.shape();
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let g = grad.data[0];
                    let mut probs = vec![0.0; v];
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        softmax_row(lv.row(i), &mut probs);
                        for j in 0..v {
                            let mut d = probs[j];
                            if j == targets[i] {
                                d -= 1.0;
                            }
                            self.nodes[logits.0].grad.data[i * v + j] += g * d / count;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += *s;
    }
}

fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (m, k) = a.shape();
    let n = b.cols;
    for i in 0..m {
        for p in 0..k {
            let av = a.at(i, p);
            if av == 0.0 {
                continue;
            }
            let brow = b.row(p);
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(y), &t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn matmul_projector() {
        let mut tape = Tape::new();
        let p = tape.constant(t(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let x = tape.constant(t(2, 1, &[5.0, 7.0]));
        let y = tape.matmul(p, x).unwrap();
        assert_eq!(tape.value(y), &t(2, 1, &[5.0, 0.0]));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(2, 1, &[1.0, 1.0]));
        let y = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(y), &t(2, 1, &[3.0, 7.0]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 2));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_value() {
        let mut tape = Tape::new();
        let x = tape.constant(t(3, 2, &[0.0, 0.0, 0.0, 3.0f64.ln(), 1000.0, 1000.0]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        assert!((v.at(0, 0) - 0.5).abs() < 1e-12);
        assert!((v.at(1, 0) - 0.25).abs() < 1e-12);
        assert!((v.at(1, 1) - 0.75).abs() < 1e-12);
        // stable under large inputs
        assert!((v.at(2, 0) - 0.5).abs() < 1e-12);
        for r in 0..3 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 3, &[0.3, -1.2, 2.0]));
        let xs = tape.constant(t(1, 3, &[0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0]));
        let a = tape.softmax_rows(x);
        let b = tape.softmax_rows(xs);
        for j in 0..3 {
            assert!((tape.value(a).at(0, j) - tape.value(b).at(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(3, 4));
        let loss = tape.nll_masked(logits, &[0, 1, 2], &[true, true, true]).unwrap();
        assert!((tape.value(loss).scalar() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_certainty_is_zero() {
        let mut tape = Tape::new();
        // enormous logit on the target -> p ~ 1
        let logits = tape.constant(t(1, 3, &[500.0, 0.0, 0.0]));
        let loss = tape.nll_masked(logits, &[0], &[true]).unwrap();
        assert!(tape.value(loss).scalar().abs() < 1e-12);
    }

    #[test]
    fn nll_derived_case() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(1, 2, &[0.0, 3.0f64.ln()]));
        let loss = tape.nll_masked(logits, &[1], &[true]).unwrap();
        assert!((tape.value(loss).scalar() - (-(0.75f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn nll_all_false_mask_errors() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(2, 4));
        assert!(tape.nll_masked(logits, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn backward_sum_of_linear() {
        // loss = sum(W * x) with x = [1, 1] -> dW = all-ones
        let mut tape = Tape::new();
        let w = Param::trainable(t(2, 2, &[0.5, -0.3, 0.2, 0.9]));
        let wn = tape.param(&w);
        let x = tape.constant(t(2, 1, &[1.0, 1.0]));
        let y = tape.matmul(wn, x).unwrap();
        let yt = tape.transpose(y);
        let loss = tape.dot_const(yt, vec![1.0, 1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wn), &t(2, 2, &[1.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn frozen_param_grad_stays_zero() {
        let mut tape = Tape::new();
        let mut w = Param::frozen(t(1, 2, &[2.0, 3.0]));
        let wn = tape.param(&w);
        let loss = tape.dot_const(wn, vec![1.0, 1.0]).unwrap();
        tape.backward(loss).unwrap();
        tape.absorb_grad(wn, &mut w);
        assert!(w.grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_off_tape_loss() {
        let mut tape = Tape::new();
        assert!(tape.backward(NodeId(3)).is_err());
    }

    /// Central finite differences on randomized composite graphs.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let n = 3;
            let d = 4;
            let x_data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w_data: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g_data: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.5)).collect();

            let eval = |w: &[f64], g: &[f64], tape_out: Option<&mut Vec<f64>>| -> f64 {
                let mut tape = Tape::new();
                let x = tape.constant(t(n, d, &x_data));
                let wp = Param::trainable(t(d, d, w));
                let gp = Param::trainable(t(1, d, g));
                let wn = tape.param(&wp);
                let gn = tape.param(&gp);
                let xn = tape.rmsnorm_rows(x, gn).unwrap();
                let h = tape.matmul(xn, wn).unwrap();
                let h = tape.gelu(h);
                let sm = tape.softmax_rows(h);
                let hw = tape.mul(h, sm).unwrap();
                let m = tape.col_mean(hw);
                let loss = tape.dot_const(m, vec![1.0; d]).unwrap();
                let out = tape.value(loss).scalar();
                if let Some(store) = tape_out {
                    tape.backward(loss).unwrap();
                    store.extend_from_slice(&tape.grad(wn).data);
                    store.extend_from_slice(&tape.grad(gn).data);
                }
                out
            };

            let mut analytic = Vec::new();
            eval(&w_data, &g_data, Some(&mut analytic));

            let eps = 1e-5;
            let mut idx = 0;
            let mut check = |numeric: f64| {
                let a = analytic[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-3,
                    "grad {} analytic {} numeric {}",
                    idx,
                    a,
                    numeric
                );
                idx += 1;
            };
            for i in 0..w_data.len() {
                let mut wp = w_data.clone();
                wp[i] += eps;
                let mut wm = w_data.clone();
                wm[i] -= eps;
                check((eval(&wp, &g_data, None) - eval(&wm, &g_data, None)) / (2.0 * eps));
            }
            for i in 0..g_data.len() {
                let mut gp = g_data.clone();
                gp[i] += eps;
                let mut gm = g_data.clone();
                gm[i] -= eps;
                check((eval(&w_data, &gp, None) - eval(&w_data, &gm, None)) / (2.0 * eps));
            }
        }
    }
}
