use crate::autodiff::kernels::{
    axis_split, broadcast_shape, col2im, for_each_broadcast, im2col, mm, mm_a_bt, mm_at_b, ConvGeom,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Ln,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Conv2d { input: Var, kernel: Var, cols: Vec<f64>, geom: ConvGeom },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, a: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Softmax { a: Var, axis: usize },
    LogSumExp { a: Var, axis: usize },
    SumAll { a: Var },
    SumAxis { a: Var, axis: usize },
    MaxPool { a: Var, argmax: Vec<usize> },
    Reshape { a: Var },
    ConcatCols { parts: Vec<Var>, rows: usize },
    SliceCols { a: Var, start: usize, in_cols: usize },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    Gather { a: Var, indices: Vec<usize> },
    Cosine { centers: Var, tokens: Var, center_norms: Vec<f64>, token_norms: Vec<f64>, dots: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Gradient tape. Nodes are appended in evaluation order, so the node list is
/// already a topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: requires_grad.then(Vec::new),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node_requires(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    /// Leaf without gradient tracking (inputs, labels).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        let numel = value.numel();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].grad = Some(vec![0.0; numel]);
        v
    }

    /// Copy of `a` cut off from the gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node_requires(v)
    }

    /// Accumulated gradient; `None` for nodes that do not require one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            let data = if g.is_empty() {
                vec![0.0; node.value.numel()]
            } else {
                g.clone()
            };
            Tensor::new(node.value.shape(), data).expect("grad shape matches value")
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.clear();
            }
        }
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node_requires(v))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(&[cols, rows], data)?;
        let rg = self.node_requires(a);
        Ok(self.push(value, Op::Transpose { a, rows, cols }, rg))
    }

    /// Cross-correlation of `input[C×H×W]` with `kernel[C'×C×p×p]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != sk[3] {
            return Err(Error::dim(format!("conv2d of input {si:?} with kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be at least 1".into()));
        }
        let p = sk[2];
        if si[1] + 2 * pad < p || si[2] + 2 * pad < p {
            return Err(Error::dim(format!(
                "kernel {p}x{p} larger than padded input {si:?} (pad {pad})"
            )));
        }
        let geom = ConvGeom {
            channels: si[0],
            height: si[1],
            width: si[2],
            out_channels: sk[0],
            kernel: p,
            stride,
            pad,
            out_height: (si[1] + 2 * pad - p) / stride + 1,
            out_width: (si[2] + 2 * pad - p) / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let data = mm(
            self.value(kernel).data(),
            &cols,
            geom.out_channels,
            geom.patch_len(),
            geom.out_pixels(),
        );
        let value = Tensor::new(&[geom.out_channels, geom.out_height, geom.out_width], data)?;
        let rg = self.any_requires(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, cols, geom }, rg))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::dim(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; out.iter().product()];
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
            let (x, y) = (da[ia], db[ib]);
            data[o] = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
        });
        let value = Tensor::new(&out, data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value = self.value(a).map(|x| match kind {
            UnaryKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
        });
        let rg = self.node_requires(a);
        self.push(value, Op::Unary { kind, a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.node_requires(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.node_requires(a);
        self.push(value, Op::AddScalar { a }, rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside or on the bounds.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.node_requires(a);
        self.push(value, Op::Clamp { a, lo, hi }, rg)
    }

    // ---- reductions -------------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} on shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    data[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[at(l)] /= sum;
                }
            }
        }
        let value = Tensor::new(&shape, data)?;
        let rg = self.node_requires(a);
        Ok(self.push(value, Op::Softmax { a, axis }, rg))
    }

    /// `log Σ exp` along `axis`, keeping the reduced axis with length 1.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("log_sum_exp axis {axis} on shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..len).map(|l| (src[at(l)] - max).exp()).sum();
                data[o * inner + i] = max + sum.ln();
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.node_requires(a);
        Ok(self.push(value, Op::LogSumExp { a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.node_requires(a);
        self.push(Tensor::scalar(total), Op::SumAll { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("sum axis {axis} on shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.node_requires(a);
        Ok(self.push(value, Op::SumAxis { a, axis }, rg))
    }

    /// Non-overlapping max pooling over `C×H×W`. Ties go to the first
    /// position in row-major window order.
    pub fn max_pool2d(&mut self, a: Var, window: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || window == 0 || !s[1].is_multiple_of(window) || !s[2].is_multiple_of(window) {
            return Err(Error::dim(format!("max_pool2d window {window} over {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / window, w / window);
        let src = self.value(a).data();
        let mut data = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let first = (ch * h + oy * window) * w + ox * window;
                    let mut best = src[first];
                    let mut best_at = first;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = (ch * h + oy * window + ky) * w + ox * window + kx;
                            if src[idx] > best {
                                best = src[idx];
                                best_at = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    data[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], data)?;
        let rg = self.node_requires(a);
        Ok(self.push(value, Op::MaxPool { a, argmax }, rg))
    }

    // ---- structural -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.node_requires(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Concatenate rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let rows = self.shape(*first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim(format!(
                    "concat_cols: part {s:?} does not have {rows} rows"
                )));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let cols = self.shape(p)[1];
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + cols]
                    .copy_from_slice(&src[r * cols..(r + 1) * cols]);
            }
            offset += cols;
        }
        let value = Tensor::new(&[rows, total], data)?;
        let rg = self.any_requires(parts);
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec(), rows }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim(format!("slice_cols {start}..{} of {s:?}", start + len)));
        }
        let (rows, in_cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * in_cols + start..r * in_cols + start + len]);
        }
        let value = Tensor::new(&[rows, len], data)?;
        let rg = self.node_requires(a);
        Ok(self.push(value, Op::SliceCols { a, start, in_cols }, rg))
    }

    /// Stack rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let cols = self.shape(*first)[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::dim(format!(
                    "concat_rows: part {s:?} does not have {cols} columns"
                )));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        let rg = self.any_requires(parts);
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(Error::dim(format!("slice_rows {start}..{} of {s:?}", start + len)));
        }
        let cols = s[1];
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(&[len, cols], data)?;
        let rg = self.node_requires(a);
        Ok(self.push(value, Op::SliceRows { a, start }, rg))
    }

    /// `out[i] = a[indices[i]]` reshaped to `shape`; backward scatter-adds.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.node_requires(a);
        Ok(self.push(value, Op::Gather { a, indices }, rg))
    }

    /// `V[k,n] = ⟨c_k, t_n⟩ / (‖c_k‖·‖t_n‖ + 1e-8)` for `centers[D×K]`,
    /// `tokens[D×N]`.
    pub fn cosine_similarity(&mut self, centers: Var, tokens: Var) -> Result<Var> {
        let (sc, st) = (self.shape(centers).to_vec(), self.shape(tokens).to_vec());
        if sc.len() != 2 || st.len() != 2 || sc[0] != st[0] {
            return Err(Error::dim(format!(
                "cosine similarity of centers {sc:?} with tokens {st:?}"
            )));
        }
        let (d, k, n) = (sc[0], sc[1], st[1]);
        let (c, t) = (self.value(centers).data(), self.value(tokens).data());
        let dots = mm_at_b(c, t, d, k, n);
        let center_norms = column_norms(c, d, k);
        let token_norms = column_norms(t, d, n);
        let mut data = vec![0.0; k * n];
        for i in 0..k {
            for j in 0..n {
                data[i * n + j] = dots[i * n + j] / (center_norms[i] * token_norms[j] + COSINE_EPS);
            }
        }
        let value = Tensor::new(&[k, n], data)?;
        let rg = self.any_requires(&[centers, tokens]);
        Ok(self.push(
            value,
            Op::Cosine { centers, tokens, center_norms, token_norms, dots },
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Gradients are added to the
    /// stored ones, so calling twice without [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a single-element loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.node_requires(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let contributions = self.local_grads(i, &g);
            for (v, cg) in contributions {
                if !self.node_requires(v) {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(cg),
                }
            }
            let stored = self.nodes[i].grad.as_mut().expect("adjoint on a grad node");
            if stored.is_empty() {
                *stored = g;
            } else {
                stored.iter_mut().zip(&g).for_each(|(a, c)| *a += c);
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.node_requires(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if needs(*a) {
                    out.push((*a, mm_a_bt(g, val(*b), *m, *n, *k)));
                }
                if needs(*b) {
                    out.push((*b, mm_at_b(val(*a), g, *m, *k, *n)));
                }
            }
            Op::Transpose { a, rows, cols } => {
                let mut ga = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        ga[i * cols + j] = g[j * rows + i];
                    }
                }
                out.push((*a, ga));
            }
            Op::Conv2d { input, kernel, cols, geom } => {
                if needs(*kernel) {
                    let gk = mm_a_bt(g, cols, geom.out_channels, geom.out_pixels(), geom.patch_len());
                    out.push((*kernel, gk));
                }
                if needs(*input) {
                    let gcols = mm_at_b(
                        val(*kernel),
                        g,
                        geom.out_channels,
                        geom.patch_len(),
                        geom.out_pixels(),
                    );
                    out.push((*input, col2im(&gcols, geom)));
                }
            }
            Op::Binary { kind, a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (val(*a), val(*b));
                let mut ga = needs(*a).then(|| vec![0.0; da.len()]);
                let mut gb = needs(*b).then(|| vec![0.0; db.len()]);
                for_each_broadcast(node.value.shape(), sa, sb, |o, ia, ib| {
                    let (x, y, go) = (da[ia], db[ib], g[o]);
                    let (dx, dy) = match kind {
                        BinaryKind::Add => (go, go),
                        BinaryKind::Sub => (go, -go),
                        BinaryKind::Mul => (go * y, go * x),
                        BinaryKind::Div => (go / y, -go * x / (y * y)),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += dx;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += dy;
                    }
                });
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gb) = gb {
                    out.push((*b, gb));
                }
            }
            Op::Unary { kind, a } => {
                let x = val(*a);
                let y = node.value.data();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(j, &go)| match kind {
                        UnaryKind::Relu => {
                            if x[j] > 0.0 {
                                go
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sigmoid => go * y[j] * (1.0 - y[j]),
                        UnaryKind::Exp => go * y[j],
                        UnaryKind::Ln => go / x[j],
                    })
                    .collect();
                out.push((*a, ga));
            }
            Op::Scale { a, factor } => out.push((*a, g.iter().map(|x| x * factor).collect())),
            Op::AddScalar { a } | Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::Clamp { a, lo, hi } => {
                let x = val(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&go, &xv)| if xv >= *lo && xv <= *hi { go } else { 0.0 })
                    .collect();
                out.push((*a, ga));
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let s: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            ga[at(l)] = y[at(l)] * (g[at(l)] - s);
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::LogSumExp { a, axis } => {
                let x = val(*a);
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                let lse = node.value.data();
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for l in 0..len {
                            let at = (o * len + l) * inner + i;
                            ga[at] = g[r] * (x[at] - lse[r]).exp();
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::SumAll { a } => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::MaxPool { a, argmax } => {
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    ga[src] += g[o];
                }
                out.push((*a, ga));
            }
            Op::ConcatCols { parts, rows } => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(rows * cols);
                        for r in 0..*rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + cols]);
                        }
                        out.push((p, gp));
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { a, start, in_cols } => {
                let (rows, len) = (node.value.shape()[0], node.value.shape()[1]);
                let mut ga = vec![0.0; rows * in_cols];
                for r in 0..rows {
                    ga[r * in_cols + start..r * in_cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                out.push((*a, ga));
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.value(p).numel();
                    if needs(p) {
                        out.push((p, g[offset..offset + numel].to_vec()));
                    }
                    offset += numel;
                }
            }
            Op::SliceRows { a, start } => {
                let cols = node.value.shape()[1];
                let mut ga = vec![0.0; self.value(*a).numel()];
                ga[start * cols..start * cols + g.len()].copy_from_slice(g);
                out.push((*a, ga));
            }
            Op::Gather { a, indices } => {
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (o, &src) in indices.iter().enumerate() {
                    ga[src] += g[o];
                }
                out.push((*a, ga));
            }
            Op::Cosine { centers, tokens, center_norms, token_norms, dots } => {
                let (d, k) = (self.shape(*centers)[0], self.shape(*centers)[1]);
                let n = self.shape(*tokens)[1];
                let (c, t) = (val(*centers), val(*tokens));
                // h = G/den; r_k, s_n collect the norm-derivative terms.
                let mut h = vec![0.0; k * n];
                let mut center_coef = vec![0.0; k];
                let mut token_coef = vec![0.0; n];
                for i in 0..k {
                    for j in 0..n {
                        let den = center_norms[i] * token_norms[j] + COSINE_EPS;
                        let gij = g[i * n + j];
                        h[i * n + j] = gij / den;
                        let q = gij * dots[i * n + j] / (den * den);
                        center_coef[i] += q * token_norms[j];
                        token_coef[j] += q * center_norms[i];
                    }
                }
                if needs(*centers) {
                    let mut gc = mm_a_bt(t, &h, d, n, k);
                    for i in 0..k {
                        if center_norms[i] > 0.0 {
                            let s = center_coef[i] / center_norms[i];
                            for row in 0..d {
                                gc[row * k + i] -= s * c[row * k + i];
                            }
                        }
                    }
                    out.push((*centers, gc));
                }
                if needs(*tokens) {
                    let mut gt = mm(c, &h, d, k, n);
                    for j in 0..n {
                        if token_norms[j] > 0.0 {
                            let s = token_coef[j] / token_norms[j];
                            for row in 0..d {
                                gt[row * n + j] -= s * t[row * n + j];
                            }
                        }
                    }
                    out.push((*tokens, gt));
                }
            }
        }
        out
    }
}

fn column_norms(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut norms = vec![0.0; cols];
    for r in 0..rows {
        for (c, n) in norms.iter_mut().enumerate() {
            let v = x[r * cols + c];
            *n += v * v;
        }
    }
    norms.iter().map(|s| s.sqrt()).collect()
}

/// Logistic function; exactly 0.5 at 0 and stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
