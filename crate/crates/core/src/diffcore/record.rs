use ndarray::{Array2, ArrayView2};

use super::tensor::{sign, Tensor};
use super::DiffError;

/// Index of a node inside a [`Record`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Primitive applications understood by the record.
#[derive(Debug, Clone)]
pub enum Op {
    /// Leaf supplied at every forward call.
    Input,
    /// Leaf whose value is stored in the record.
    Param(Tensor),
    /// `x · w + b` with `x: (n, k)`, `w: (k, m)`, `b: (m)`.
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    Relu(NodeId),
    /// Row-wise L2 normalization of an `(n, m)` matrix.
    Normalize(NodeId),
    /// Mean over rows of `-log softmax(logits)[class]`. `classes` holds
    /// integer-valued class indices and receives no gradient.
    SoftmaxCrossEntropy { logits: NodeId, classes: NodeId },
    /// Mean absolute difference over all elements.
    L1 { pred: NodeId, target: NodeId },
    /// Mean over rows of `1 - cos(pred_row, target_row)`.
    Cosine { pred: NodeId, target: NodeId },
    /// Weighted sum of scalar nodes.
    WeightedSum(Vec<(NodeId, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Normalize(_) => "normalize",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::L1 { .. } => "l1",
            Op::Cosine { .. } => "cosine",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu(x) | Op::Normalize(x) => vec![*x],
            Op::SoftmaxCrossEntropy { logits, classes } => vec![*logits, *classes],
            Op::L1 { pred, target } | Op::Cosine { pred, target } => vec![*pred, *target],
            Op::WeightedSum(terms) => terms.iter().map(|(n, _)| *n).collect(),
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param(_))
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Immutable, topologically ordered list of primitive applications.
///
/// Operands always precede their consumers because nodes can only be created
/// through [`RecordBuilder`], which hands out ids in creation order.
#[derive(Debug, Clone)]
pub struct Record {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    terminals: Vec<NodeId>,
}

/// Incrementally builds a [`Record`], checking shapes as nodes are added.
#[derive(Debug, Default)]
pub struct RecordBuilder {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
}

impl RecordBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> Result<&[usize], DiffError> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or(DiffError::UnknownNode { node: id })
    }

    fn matrix_shape(&self, id: NodeId, consumer: &'static str) -> Result<(usize, usize), DiffError> {
        let s = self.shape(id)?;
        if s.len() != 2 {
            return Err(DiffError::RankMismatch { node: id, op: consumer, expected: 2, found: s.len() });
        }
        Ok((s[0], s[1]))
    }

    fn mismatch(node: NodeId, expected: &[usize], found: &[usize]) -> DiffError {
        DiffError::ShapeMismatch { node: Some(node), expected: expected.to_vec(), found: found.to_vec() }
    }

    /// Declares an input leaf with a fixed shape.
    pub fn input(&mut self, shape: &[usize]) -> Result<NodeId, DiffError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(DiffError::InvalidShape { shape: shape.to_vec() });
        }
        let id = self.push(Op::Input, shape.to_vec());
        self.inputs.push(id);
        Ok(id)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Param(value), shape)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, DiffError> {
        let (n, k) = self.matrix_shape(x, "affine")?;
        let (k2, m) = self.matrix_shape(w, "affine")?;
        if k != k2 {
            return Err(Self::mismatch(w, &[k, m], &[k2, m]));
        }
        if let Some(b) = b {
            let bs = self.shape(b)?;
            if bs != [m] {
                return Err(Self::mismatch(b, &[m], bs));
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, vec![n, m]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s = self.shape(x)?.to_vec();
        Ok(self.push(Op::Relu(x), s))
    }

    pub fn normalize(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let (n, m) = self.matrix_shape(x, "normalize")?;
        Ok(self.push(Op::Normalize(x), vec![n, m]))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, classes: NodeId) -> Result<NodeId, DiffError> {
        let (n, _) = self.matrix_shape(logits, "softmax_cross_entropy")?;
        let cs = self.shape(classes)?;
        if cs != [n] {
            return Err(Self::mismatch(classes, &[n], cs));
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, classes }, vec![1]))
    }

    pub fn l1(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, DiffError> {
        let ps = self.shape(pred)?.to_vec();
        let ts = self.shape(target)?;
        if ps != ts {
            return Err(Self::mismatch(target, &ps, ts));
        }
        Ok(self.push(Op::L1 { pred, target }, vec![1]))
    }

    pub fn cosine(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, DiffError> {
        let (n, m) = self.matrix_shape(pred, "cosine")?;
        let ts = self.shape(target)?;
        if ts != [n, m] {
            return Err(Self::mismatch(target, &[n, m], ts));
        }
        Ok(self.push(Op::Cosine { pred, target }, vec![1]))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId, DiffError> {
        for &(id, _) in terms {
            let s = self.shape(id)?;
            if s.iter().product::<usize>() != 1 {
                return Err(DiffError::NonScalarOutput { node: id, shape: s.to_vec() });
            }
        }
        Ok(self.push(Op::WeightedSum(terms.to_vec()), vec![1]))
    }

    pub fn build(self) -> Record {
        let mut consumed = vec![false; self.nodes.len()];
        for node in &self.nodes {
            for op in node.op.operands() {
                consumed[op.0] = true;
            }
        }
        let terminals = (0..self.nodes.len())
            .filter(|&i| !consumed[i] && !self.nodes[i].op.is_leaf())
            .map(NodeId)
            .collect();
        Record { nodes: self.nodes, inputs: self.inputs, terminals }
    }
}

impl Record {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    /// Non-leaf nodes that no other node consumes.
    pub fn terminals(&self) -> &[NodeId] {
        &self.terminals
    }

    pub fn shape(&self, id: NodeId) -> Option<&[usize]> {
        self.nodes.get(id.0).map(|n| n.shape.as_slice())
    }

    pub fn op(&self, id: NodeId) -> Option<&Op> {
        self.nodes.get(id.0).map(|n| &n.op)
    }

    pub(crate) fn op_mut(&mut self, id: NodeId) -> Option<&mut Op> {
        self.nodes.get_mut(id.0).map(|n| &mut n.op)
    }

    /// Stored value of a parameter leaf.
    pub fn param_value(&self, id: NodeId) -> Option<&Tensor> {
        match self.op(id)? {
            Op::Param(t) => Some(t),
            _ => None,
        }
    }

    /// Evaluates every node. `feeds` are matched to the declared inputs in order.
    pub fn forward(&self, feeds: &[Tensor]) -> Result<Evaluation<'_>, DiffError> {
        if feeds.len() != self.inputs.len() {
            return Err(DiffError::FeedCount { expected: self.inputs.len(), found: feeds.len() });
        }
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        let mut feed_iter = feeds.iter();
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let get = |n: NodeId| -> &Tensor {
                match &self.nodes[n.0].op {
                    Op::Param(t) => t,
                    _ => values[n.0].as_ref().expect("operand evaluated"),
                }
            };
            let value = match &node.op {
                Op::Param(_) => None,
                Op::Input => {
                    let feed = feed_iter.next().expect("feed count checked");
                    if feed.shape() != node.shape.as_slice() {
                        return Err(DiffError::ShapeMismatch {
                            node: Some(id),
                            expected: node.shape.clone(),
                            found: feed.shape().to_vec(),
                        });
                    }
                    Some(feed.clone())
                }
                Op::Affine { x, w, b } => Some(affine_forward(get(*x), get(*w), b.map(get))),
                Op::Relu(x) => Some(get(*x).map(|v| v.max(0.0))),
                Op::Normalize(x) => Some(normalize_forward(get(*x))),
                Op::SoftmaxCrossEntropy { logits, classes } => {
                    Some(Tensor::scalar(softmax_ce_forward(id, get(*logits), get(*classes))?))
                }
                Op::L1 { pred, target } => {
                    let (p, t) = (get(*pred), get(*target));
                    let total: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum();
                    Some(Tensor::scalar(total / p.len() as f64))
                }
                Op::Cosine { pred, target } => Some(Tensor::scalar(cosine_forward(get(*pred), get(*target)))),
                Op::WeightedSum(terms) => {
                    Some(Tensor::scalar(terms.iter().map(|(n, w)| w * get(*n).data()[0]).sum()))
                }
            };
            values.push(value);
        }
        Ok(Evaluation { record: self, values })
    }

    /// Values of all terminal nodes, in node order.
    pub fn forward_outputs(&self, feeds: &[Tensor]) -> Result<Vec<Tensor>, DiffError> {
        let eval = self.forward(feeds)?;
        Ok(self.terminals.iter().map(|&t| eval.value(t).clone()).collect())
    }

    /// Reverse-mode gradient of the scalar `output` with respect to each `wrt` leaf.
    pub fn grad(&self, feeds: &[Tensor], output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, DiffError> {
        self.forward(feeds)?.grad(output, wrt)
    }
}

/// All node values from one forward pass over a [`Record`].
#[derive(Debug)]
pub struct Evaluation<'r> {
    record: &'r Record,
    values: Vec<Option<Tensor>>,
}

impl<'r> Evaluation<'r> {
    pub fn record(&self) -> &'r Record {
        self.record
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.record.nodes[id.0].op {
            Op::Param(t) => t,
            _ => self.values[id.0].as_ref().expect("forward evaluates every node"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    /// Signed residuals at every non-differentiable point of the record:
    /// ReLU inputs and L1 differences. A zero entry sits exactly on a kink.
    pub fn kink_residuals(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.record.nodes {
            match &node.op {
                Op::Relu(x) => out.extend_from_slice(self.value(*x).data()),
                Op::L1 { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    out.extend(p.data().iter().zip(t.data()).map(|(a, b)| a - b));
                }
                _ => {}
            }
        }
        out
    }

    pub fn grad(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, DiffError> {
        self.backward(&[(output, 1.0)], wrt)
    }

    /// Gradient of `Σ weight · node` over the seeded scalar nodes.
    pub fn backward(&self, seeds: &[(NodeId, f64)], wrt: &[NodeId]) -> Result<Vec<Tensor>, DiffError> {
        let nodes = &self.record.nodes;
        for &(s, _) in seeds {
            let node = nodes.get(s.0).ok_or(DiffError::UnknownNode { node: s })?;
            if node.shape.iter().product::<usize>() != 1 {
                return Err(DiffError::NonScalarOutput { node: s, shape: node.shape.clone() });
            }
        }
        for &w in wrt {
            let node = nodes.get(w.0).ok_or(DiffError::UnknownNode { node: w })?;
            if !node.op.is_leaf() {
                return Err(DiffError::NotALeaf { node: w, op: node.op.name() });
            }
        }

        let mut reaches = vec![false; nodes.len()];
        for &w in wrt {
            reaches[w.0] = true;
        }
        for (i, node) in nodes.iter().enumerate() {
            if !reaches[i] && node.op.operands().iter().any(|o| reaches[o.0]) {
                reaches[i] = true;
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut last = 0;
        for &(s, w) in seeds {
            if reaches[s.0] {
                accumulate(&mut adj[s.0], Tensor::filled(&nodes[s.0].shape, w));
                last = last.max(s.0);
            }
        }
        if seeds.iter().any(|(s, _)| reaches[s.0]) {
            for i in (0..=last).rev() {
                let Some(dy) = adj[i].take() else { continue };
                if nodes[i].op.is_leaf() {
                    adj[i] = Some(dy);
                    continue;
                }
                self.propagate(&nodes[i].op, &dy, &reaches, &mut adj);
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| adj[w.0].clone().unwrap_or_else(|| Tensor::zeros(&nodes[w.0].shape)))
            .collect())
    }

    fn propagate(&self, op: &Op, dy: &Tensor, reaches: &[bool], adj: &mut [Option<Tensor>]) {
        match op {
            Op::Input | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let dyv = as_view(dy);
                if reaches[x.0] {
                    let dx = dyv.dot(&as_view(wv).t());
                    accumulate(&mut adj[x.0], from_array(dx));
                }
                if reaches[w.0] {
                    let dw = as_view(xv).t().dot(&dyv);
                    accumulate(&mut adj[w.0], from_array(dw));
                }
                if let Some(b) = b {
                    if reaches[b.0] {
                        let m = dy.cols();
                        let mut db = vec![0.0; m];
                        for r in 0..dy.rows() {
                            for (acc, v) in db.iter_mut().zip(dy.row(r)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut adj[b.0], Tensor::vector(db));
                    }
                }
            }
            Op::Relu(x) => {
                if reaches[x.0] {
                    let dx = self.value(*x).zip_map(dy, |v, g| if v > 0.0 { g } else { 0.0 }).expect("same shape");
                    accumulate(&mut adj[x.0], dx);
                }
            }
            Op::Normalize(x) => {
                if reaches[x.0] {
                    accumulate(&mut adj[x.0], normalize_backward(self.value(*x), dy));
                }
            }
            Op::SoftmaxCrossEntropy { logits, classes } => {
                if reaches[logits.0] {
                    let g = softmax_ce_backward(self.value(*logits), self.value(*classes), dy.data()[0]);
                    accumulate(&mut adj[logits.0], g);
                }
            }
            Op::L1 { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let k = dy.data()[0] / p.len() as f64;
                if reaches[pred.0] {
                    accumulate(&mut adj[pred.0], p.zip_map(t, |a, b| k * sign(a - b)).expect("same shape"));
                }
                if reaches[target.0] {
                    accumulate(&mut adj[target.0], p.zip_map(t, |a, b| -k * sign(a - b)).expect("same shape"));
                }
            }
            Op::Cosine { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let g = dy.data()[0];
                if reaches[pred.0] {
                    accumulate(&mut adj[pred.0], cosine_backward(p, t, g));
                }
                if reaches[target.0] {
                    accumulate(&mut adj[target.0], cosine_backward(t, p, g));
                }
            }
            Op::WeightedSum(terms) => {
                let g = dy.data()[0];
                for &(n, w) in terms {
                    if reaches[n.0] {
                        accumulate(&mut adj[n.0], Tensor::filled(&self.record.nodes[n.0].shape, g * w));
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.axpy(1.0, &g),
        None => *slot = Some(g),
    }
}

fn as_view(t: &Tensor) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((t.rows(), t.cols()), t.data()).expect("2-d tensor")
}

fn from_array(a: Array2<f64>) -> Tensor {
    let (r, c) = a.dim();
    let data = if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    };
    Tensor::matrix(r, c, data).expect("consistent dims")
}

fn affine_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let mut out = as_view(x).dot(&as_view(w));
    if let Some(b) = b {
        for mut row in out.rows_mut() {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    from_array(out)
}

const NORM_FLOOR: f64 = 1e-300;

fn normalize_forward(x: &Tensor) -> Tensor {
    let m = x.cols();
    let mut out = x.clone();
    for r in out.data_mut().chunks_mut(m) {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > NORM_FLOOR {
            r.iter_mut().for_each(|v| *v /= norm);
        } else {
            r.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

fn normalize_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let m = x.cols();
    let mut dx = vec![0.0; x.len()];
    for ((xr, gr), out) in x.data().chunks(m).zip(dy.data().chunks(m)).zip(dx.chunks_mut(m)) {
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= NORM_FLOOR {
            continue;
        }
        let proj: f64 = xr.iter().zip(gr).map(|(a, g)| a * g).sum::<f64>() / norm;
        for ((o, a), g) in out.iter_mut().zip(xr).zip(gr) {
            *o = (g - (a / norm) * proj) / norm;
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("same shape")
}

fn class_index(node: NodeId, v: f64, classes: usize) -> Result<usize, DiffError> {
    if v.fract() != 0.0 || v < 0.0 || v >= classes as f64 {
        return Err(DiffError::InvalidLabel { node, value: v, classes });
    }
    Ok(v as usize)
}

fn softmax_ce_forward(node: NodeId, logits: &Tensor, classes: &Tensor) -> Result<f64, DiffError> {
    let c = logits.cols();
    let n = logits.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let k = class_index(node, classes.data()[i], c)?;
        total += log_sum_exp(row) - row[k];
    }
    Ok(total / n as f64)
}

fn softmax_ce_backward(logits: &Tensor, classes: &Tensor, g: f64) -> Tensor {
    let c = logits.cols();
    let n = logits.rows();
    let scale = g / n as f64;
    let mut out = vec![0.0; logits.len()];
    for i in 0..n {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let k = classes.data()[i] as usize;
        let dst = &mut out[i * c..(i + 1) * c];
        for (j, (d, &z)) in dst.iter_mut().zip(row).enumerate() {
            let p = (z - lse).exp();
            *d = scale * (p - if j == k { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn cosine_row(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    (dot, pn, tn)
}

fn cosine_forward(p: &Tensor, t: &Tensor) -> f64 {
    let m = p.cols();
    let n = p.rows();
    let mut total = 0.0;
    for (pr, tr) in p.data().chunks(m).zip(t.data().chunks(m)) {
        let (dot, pn, tn) = cosine_row(pr, tr);
        let cos = if pn > NORM_FLOOR && tn > NORM_FLOOR { dot / (pn * tn) } else { 0.0 };
        total += 1.0 - cos;
    }
    total / n as f64
}

/// Gradient of the mean cosine loss with respect to `p`, given the partner `t`.
fn cosine_backward(p: &Tensor, t: &Tensor, g: f64) -> Tensor {
    let m = p.cols();
    let scale = -g / p.rows() as f64;
    let mut out = vec![0.0; p.len()];
    for ((pr, tr), o) in p.data().chunks(m).zip(t.data().chunks(m)).zip(out.chunks_mut(m)) {
        let (dot, pn, tn) = cosine_row(pr, tr);
        if pn <= NORM_FLOOR || tn <= NORM_FLOOR {
            continue;
        }
        let cos = dot / (pn * tn);
        for ((d, a), b) in o.iter_mut().zip(pr).zip(tr) {
            *d = scale * (b / (pn * tn) - cos * a / (pn * pn));
        }
    }
    Tensor::new(p.shape().to_vec(), out).expect("same shape")
}
