use super::array::{matmul_acc, matmul_into, transpose_into, Array, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Backward rule for an operation the tape does not know natively.
/// `backward` receives dLoss/dOutput and returns dLoss/dInput for every
/// input declared when the node was pushed, in the same order.
pub trait CustomGrad {
    fn backward(&self, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddConst(TensorId),
    AddBias(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Relu(TensorId),
    Exp(TensorId),
    Softmax(TensorId, usize),
    LogSoftmax(TensorId, usize),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    SumAll(TensorId),
    MeanAxis0(TensorId),
    RepeatRows(TensorId),
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<TensorId>),
    FlattenTime(TensorId),
    Custom {
        inputs: Vec<TensorId>,
        grad_fn: Box<dyn CustomGrad>,
    },
}

struct Node {
    value: Array,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Dynamic gradient tape. Every forward pass records its computation here;
/// [`Tape::backward`] then fills in gradients by walking the record in
/// reverse. A tape belongs to one thread for the duration of a training
/// step; detached [`Array`] values are what crosses thread boundaries.
///
/// Repeated `backward` calls accumulate into existing gradients; build a
/// fresh tape per step rather than resetting.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are tracked for it (and анything
    /// computed from it) iff `requires_grad`.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradients (masks, positional encodings,
    /// smoothed targets, input features).
    pub fn constant(&mut self, value: Array) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Reads a single-element tensor as an `f64`.
    pub fn scalar(&self, id: TensorId) -> Result<f64, TensorError> {
        let v = self.value(id);
        if v.numel() != 1 {
            return Err(TensorError::contract(
                "scalar",
                format!("expected a single-element tensor, got shape {:?}", v.shape()),
            ));
        }
        Ok(v.data()[0])
    }

    fn push(&mut self, value: Array, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── elementwise and affine ops ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::dim(
                name,
                format!("shapes differ: {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Array::from_parts(shape, data), rg, op))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * factor).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs(&[a]);
        self.push(Array::from_parts(shape, data), rg, Op::Scale(a, factor))
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x + c).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs(&[a]);
        self.push(Array::from_parts(shape, data), rg, Op::AddConst(a))
    }

    /// `x[R,C] + bias[C]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.value(x).dims2()?;
        let vb = self.value(bias);
        if vb.shape() != [c] {
            return Err(TensorError::dim(
                "add_bias",
                format!("bias shape {:?} does not match columns of {:?}", vb.shape(), [r, c]),
            ));
        }
        let vx = self.value(x).data();
        let b = self.value(bias).data();
        let mut data = vx.to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Array::from_parts(vec![r, c], data), rg, Op::AddBias(x, bias)))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Array::from_parts(vec![m, n], out), rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        let out = transpose_into(self.value(a).data(), r, c);
        let rg = self.needs(&[a]);
        Ok(self.push(Array::from_parts(vec![c, r], out), rg, Op::Transpose(a)))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs(&[a]);
        self.push(Array::from_parts(shape, data), rg, Op::Relu(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x.exp()).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs(&[a]);
        self.push(Array::from_parts(shape, data), rg, Op::Exp(a))
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let out = softmax_values(self.value(a), axis, false)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::Softmax(a, axis)))
    }

    /// Numerically stable log-softmax along `axis` (max subtraction), so
    /// each output slice exponentiates-and-sums to one.
    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let out = softmax_values(self.value(a), axis, true)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::LogSoftmax(a, axis)))
    }

    /// Normalizes each last-axis slice to zero mean, unit variance, then
    /// applies `gain` and `bias` (both of last-axis length).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("non-empty shape");
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.value(id).shape();
            if s != [d] {
                return Err(TensorError::dim(
                    "layer_norm",
                    format!("{name} shape {s:?} does not match last axis of {:?}", vx.shape()),
                ));
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::Parameter {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let vx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = vec![0.0; vx.numel()];
        for (out, xs) in data.chunks_mut(d).zip(vx.data().chunks(d)) {
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[j] = (xs[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Array::from_parts(shape, data),
            rg,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-D convolution over `x[C_in, T, F]` with square kernels
    /// `w[C_out, C_in, k, k]`, bias `b[C_out]`, zero padding `pad` and the
    /// same `stride` on both spatial axes. Output length per axis is
    /// `(len + 2*pad - k) / stride + 1`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        if stride == 0 {
            return Err(TensorError::Parameter {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let geom = ConvGeometry::resolve(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
            stride,
            pad,
        )?;
        let patches = geom.im2col(self.value(x).data());
        // w viewed as [C_out, C_in*k*k] times patches [C_in*k*k, T'*F']
        // is exactly the row-major output [C_out, T', F'].
        let mut out = vec![0.0; geom.c_out * geom.t_out * geom.f_out];
        matmul_into(
            self.value(w).data(),
            &patches,
            &mut out,
            geom.c_out,
            geom.ckk(),
            geom.t_out * geom.f_out,
        );
        let bias = self.value(b).data().to_vec();
        let plane = geom.t_out * geom.f_out;
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            for v in chunk.iter_mut() {
                *v += bias[c];
            }
        }
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(
            Array::from_parts(vec![geom.c_out, geom.t_out, geom.f_out], out),
            rg,
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    // ── lookup, reduction, reshaping ────────────────────────────────────

    /// Gathers rows of `table[V, d]`; output row `i` is `table[ids[i]]`.
    /// Gradients accumulate into the looked-up rows only.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(TensorError::contract("embedding", "empty id list"));
        }
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Array::from_parts(vec![ids.len(), d], data),
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Array::scalar(s), rg, Op::SumAll(a))
    }

    /// Column means of a matrix: `[R, C] -> [1, C]`.
    pub fn mean_axis0(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        let v = self.value(a).data();
        let mut out = vec![0.0; c];
        for row in v.chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Array::from_parts(vec![1, c], out), rg, Op::MeanAxis0(a)))
    }

    /// Tiles a `[1, C]` row vector into `[n, C]`.
    pub fn repeat_rows(&mut self, a: TensorId, n: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        if r != 1 {
            return Err(TensorError::dim(
                "repeat_rows",
                format!("expected a [1, C] row vector, got {:?}", self.value(a).shape()),
            ));
        }
        if n == 0 {
            return Err(TensorError::Parameter {
                op: "repeat_rows",
                msg: "repeat count must be positive".into(),
            });
        }
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Array::from_parts(vec![n, c], data), rg, Op::RepeatRows(a)))
    }

    /// Takes columns `[start, start+len)` of a matrix.
    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 {
            return Err(TensorError::dim("slice_cols", "empty slice".into()));
        }
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len - 1,
                bound: c,
            });
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for row in v.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Array::from_parts(vec![r, len], data),
            rg,
            Op::SliceCols { x, start, len },
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::contract("concat_cols", "no inputs"));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(TensorError::dim(
                    "concat_cols",
                    format!(
                        "row counts differ: {:?} vs {:?}",
                        self.value(parts[0]).shape(),
                        self.value(p).shape()
                    ),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p).data();
                data.extend_from_slice(&v[row * w..(row + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Array::from_parts(vec![r, total], data),
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Rearranges a conv stack `[C, T, F]` into per-frame feature rows
    /// `[T, C*F]` (channel-major within each row).
    pub fn flatten_time(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let [c, t, f]: [usize; 3] = match shape.as_slice() {
            [c, t, f] => [*c, *t, *f],
            other => {
                return Err(TensorError::dim(
                    "flatten_time",
                    format!("expected rank-3 [C, T, F], got {other:?}"),
                ))
            }
        };
        let v = self.value(x).data();
        let mut data = vec![0.0; c * t * f];
        for ci in 0..c {
            for ti in 0..t {
                for fi in 0..f {
                    data[ti * (c * f) + ci * f + fi] = v[ci * (t * f) + ti * f + fi];
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Array::from_parts(vec![t, c * f], data),
            rg,
            Op::FlattenTime(x),
        ))
    }

    /// Records an externally computed op together with its backward rule.
    /// The CTC loss uses this: its gradient comes out of the same dynamic
    /// program as the loss value.
    pub fn custom(
        &mut self,
        inputs: &[TensorId],
        value: Array,
        grad_fn: Box<dyn CustomGrad>,
    ) -> TensorId {
        let rg = self.needs(inputs);
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                grad_fn,
            },
        )
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Propagates dLoss/dNode from a scalar `loss` to every tensor that
    /// requires gradients. Calling it twice accumulates a second pass.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing on the tape wants gradients
        }
        add_into(&mut self.nodes[loss.0].grad, &[1.0]);

        for i in (0..=loss.0).rev() {
            let (left, right) = self.nodes.split_at_mut(i);
            let node = &right[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            backprop_node(node, grad, left);
        }
        Ok(())
    }
}

/// Accumulates `src` into an optional gradient buffer, allocating on first use.
fn add_into(slot: &mut Option<Vec<f64>>, src: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *slot = Some(src.to_vec()),
    }
}

fn add_into_scaled(slot: &mut Option<Vec<f64>>, src: &[f64], factor: f64) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(src) {
                *a += b * factor;
            }
        }
        None => *slot = Some(src.iter().map(|&v| v * factor).collect()),
    }
}

fn accum(left: &mut [Node], id: TensorId, src: &[f64]) {
    let n = &mut left[id.0];
    if n.requires_grad {
        add_into(&mut n.grad, src);
    }
}

fn backprop_node(node: &Node, grad: &[f64], left: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}

        Op::Add(a, b) => {
            accum(left, *a, grad);
            accum(left, *b, grad);
        }

        Op::Sub(a, b) => {
            accum(left, *a, grad);
            let nb = &mut left[b.0];
            if nb.requires_grad {
                add_into_scaled(&mut nb.grad, grad, -1.0);
            }
        }

        Op::Mul(a, b) => {
            if left[a.0].requires_grad {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(left[b.0].value.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                add_into(&mut left[a.0].grad, &da);
            }
            if left[b.0].requires_grad {
                let db: Vec<f64> = grad
                    .iter()
                    .zip(left[a.0].value.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                add_into(&mut left[b.0].grad, &db);
            }
        }

        Op::Scale(a, factor) => {
            let na = &mut left[a.0];
            if na.requires_grad {
                add_into_scaled(&mut na.grad, grad, *factor);
            }
        }

        Op::AddConst(a) => accum(left, *a, grad),

        Op::AddBias(x, bias) => {
            accum(left, *x, grad);
            if left[bias.0].requires_grad {
                let c = left[bias.0].value.numel();
                let mut db = vec![0.0; c];
                for row in grad.chunks(c) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                add_into(&mut left[bias.0].grad, &db);
            }
        }

        Op::MatMul(a, b) => {
            let (m, k) = left[a.0].value.dims2().expect("checked at forward");
            let n = left[b.0].value.shape()[1];
            if left[a.0].requires_grad {
                // dA = G * B^T
                let bt = transpose_into(left[b.0].value.data(), k, n);
                let mut da = vec![0.0; m * k];
                matmul_into(grad, &bt, &mut da, m, n, k);
                add_into(&mut left[a.0].grad, &da);
            }
            if left[b.0].requires_grad {
                // dB = A^T * G
                let at = transpose_into(left[a.0].value.data(), m, k);
                let mut db = vec![0.0; k * n];
                matmul_into(&at, grad, &mut db, k, m, n);
                add_into(&mut left[b.0].grad, &db);
            }
        }

        Op::Transpose(a) => {
            if left[a.0].requires_grad {
                let (r, c) = left[a.0].value.dims2().expect("checked at forward");
                let da = transpose_into(grad, c, r);
                add_into(&mut left[a.0].grad, &da);
            }
        }

        Op::Relu(a) => {
            if left[a.0].requires_grad {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(left[a.0].value.data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                add_into(&mut left[a.0].grad, &da);
            }
        }

        Op::Exp(a) => {
            if left[a.0].requires_grad {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                add_into(&mut left[a.0].grad, &da);
            }
        }

        Op::Softmax(a, axis) => {
            if left[a.0].requires_grad {
                let mut da = vec![0.0; grad.len()];
                for_each_axis_slice(node.value.shape(), *axis, |indices| {
                    let y = node.value.data();
                    let dot: f64 = indices.iter().map(|&i| grad[i] * y[i]).sum();
                    for &i in indices {
                        da[i] = y[i] * (grad[i] - dot);
                    }
                });
                add_into(&mut left[a.0].grad, &da);
            }
        }

        Op::LogSoftmax(a, axis) => {
            if left[a.0].requires_grad {
                let mut da = vec![0.0; grad.len()];
                for_each_axis_slice(node.value.shape(), *axis, |indices| {
                    let y = node.value.data();
                    let gsum: f64 = indices.iter().map(|&i| grad[i]).sum();
                    for &i in indices {
                        da[i] = grad[i] - y[i].exp() * gsum;
                    }
                });
                add_into(&mut left[a.0].grad, &da);
            }
        }

        Op::LayerNorm { x, gain, bias, eps } => {
            let d = *left[x.0].value.shape().last().expect("non-empty");
            let xv = left[x.0].value.data();
            let gv = left[gain.0].value.data();
            let nslices = xv.len() / d;
            let mut dx = vec![0.0; xv.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for s in 0..nslices {
                let xs = &xv[s * d..(s + 1) * d];
                let gs = &grad[s * d..(s + 1) * d];
                let mean = xs.iter().sum::<f64>() / d as f64;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv_std).collect();
                for j in 0..d {
                    dgain[j] += gs[j] * xhat[j];
                    dbias[j] += gs[j];
                }
                let dxhat: Vec<f64> = (0..d).map(|j| gs[j] * gv[j]).collect();
                let sum_dxhat: f64 = dxhat.iter().sum();
                let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                let df = d as f64;
                for j in 0..d {
                    dx[s * d + j] =
                        inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
            accum(left, *x, &dx);
            accum(left, *gain, &dgain);
            accum(left, *bias, &dbias);
        }

        Op::Conv2d { x, w, b, stride, pad } => {
            let geom = ConvGeometry::resolve(
                left[x.0].value.shape(),
                left[w.0].value.shape(),
                left[b.0].value.shape(),
                *stride,
                *pad,
            )
            .expect("checked at forward");
            let plane = geom.t_out * geom.f_out;
            if left[b.0].requires_grad {
                let mut db = vec![0.0; geom.c_out];
                for (c, chunk) in grad.chunks(plane).enumerate() {
                    db[c] = chunk.iter().sum();
                }
                add_into(&mut left[b.0].grad, &db);
            }
            if left[w.0].requires_grad {
                // dW = G[C_out, T'F'] * patches^T
                let patches = geom.im2col(left[x.0].value.data());
                let pt = transpose_into(&patches, geom.ckk(), plane);
                let mut dw = vec![0.0; geom.c_out * geom.ckk()];
                matmul_into(grad, &pt, &mut dw, geom.c_out, plane, geom.ckk());
                add_into(&mut left[w.0].grad, &dw);
            }
            if left[x.0].requires_grad {
                // dPatches = W^T * G, then scatter back through im2col.
                let wt = transpose_into(left[w.0].value.data(), geom.c_out, geom.ckk());
                let mut dp = vec![0.0; geom.ckk() * plane];
                matmul_into(&wt, grad, &mut dp, geom.ckk(), geom.c_out, plane);
                let dx = geom.col2im(&dp);
                add_into(&mut left[x.0].grad, &dx);
            }
        }

        Op::Embedding { table, ids } => {
            if left[table.0].requires_grad {
                let (_, d) = left[table.0].value.dims2().expect("checked at forward");
                let mut dt = vec![0.0; left[table.0].value.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += grad[i * d + j];
                    }
                }
                add_into(&mut left[table.0].grad, &dt);
            }
        }

        Op::SumAll(a) => {
            let na = &mut left[a.0];
            if na.requires_grad {
                let g = grad[0];
                let da = vec![g; na.value.numel()];
                add_into(&mut na.grad, &da);
            }
        }

        Op::MeanAxis0(a) => {
            let na = &mut left[a.0];
            if na.requires_grad {
                let (r, c) = na.value.dims2().expect("checked at forward");
                let mut da = vec![0.0; r * c];
                for row in da.chunks_mut(c) {
                    for (d, &g) in row.iter_mut().zip(grad) {
                        *d += g / r as f64;
                    }
                }
                add_into(&mut na.grad, &da);
            }
        }

        Op::RepeatRows(a) => {
            let na = &mut left[a.0];
            if na.requires_grad {
                let c = na.value.shape()[1];
                let mut da = vec![0.0; c];
                for row in grad.chunks(c) {
                    for (d, &g) in da.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                add_into(&mut na.grad, &da);
            }
        }

        Op::SliceCols { x, start, len } => {
            let nx = &mut left[x.0];
            if nx.requires_grad {
                let (r, c) = nx.value.dims2().expect("checked at forward");
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    for j in 0..*len {
                        dx[row * c + start + j] += grad[row * len + j];
                    }
                }
                add_into(&mut nx.grad, &dx);
            }
        }

        Op::ConcatCols(parts) => {
            let total = node.value.shape()[1];
            let rows = node.value.shape()[0];
            let mut offset = 0;
            for &p in parts {
                let w = left[p.0].value.shape()[1];
                if left[p.0].requires_grad {
                    let mut dp = vec![0.0; rows * w];
                    for row in 0..rows {
                        dp[row * w..(row + 1) * w]
                            .copy_from_slice(&grad[row * total + offset..row * total + offset + w]);
                    }
                    add_into(&mut left[p.0].grad, &dp);
                }
                offset += w;
            }
        }

        Op::FlattenTime(x) => {
            let nx = &mut left[x.0];
            if nx.requires_grad {
                let [c, t, f]: [usize; 3] = match nx.value.shape() {
                    [c, t, f] => [*c, *t, *f],
                    _ => unreachable!("checked at forward"),
                };
                let mut dx = vec![0.0; c * t * f];
                for ci in 0..c {
                    for ti in 0..t {
                        for fi in 0..f {
                            dx[ci * (t * f) + ti * f + fi] = grad[ti * (c * f) + ci * f + fi];
                        }
                    }
                }
                add_into(&mut nx.grad, &dx);
            }
        }

        Op::Custom { inputs, grad_fn } => {
            let grads = grad_fn.backward(grad);
            debug_assert_eq!(grads.len(), inputs.len());
            for (id, g) in inputs.iter().zip(grads) {
                accum(left, *id, &g);
            }
        }
    }
}

/// Shared forward for softmax / log-softmax along an arbitrary axis.
fn softmax_values(x: &Array, axis: usize, log: bool) -> Result<Array, TensorError> {
    if axis >= x.rank() {
        return Err(TensorError::dim(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    let mut out = vec![0.0; x.numel()];
    let data = x.data();
    for_each_axis_slice(x.shape(), axis, |indices| {
        let max = indices
            .iter()
            .map(|&i| data[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &i in indices {
            sum += (data[i] - max).exp();
        }
        let lse = max + sum.ln();
        for &i in indices {
            out[i] = if log {
                data[i] - lse
            } else {
                (data[i] - lse).exp()
            };
        }
    });
    Ok(Array::from_parts(x.shape().to_vec(), out))
}

/// Calls `f` with the flat indices of every 1-D slice along `axis`.
fn for_each_axis_slice(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut indices = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (a, slot) in indices.iter_mut().enumerate() {
                *slot = o * axis_len * inner + a * inner + i;
            }
            f(&indices);
        }
    }
}

/// Geometry of a 2-D convolution, shared by forward and backward.
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    t_in: usize,
    f_in: usize,
    t_out: usize,
    f_out: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        b_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        let [c_in, t_in, f_in]: [usize; 3] = match x_shape {
            [c, t, f] => [*c, *t, *f],
            other => {
                return Err(TensorError::dim(
                    "conv2d",
                    format!("input must be rank-3 [C, T, F], got {other:?}"),
                ))
            }
        };
        let [c_out, wc_in, k, k2]: [usize; 4] = match w_shape {
            [a, b, c, d] => [*a, *b, *c, *d],
            other => {
                return Err(TensorError::dim(
                    "conv2d",
                    format!("kernels must be rank-4 [C_out, C_in, k, k], got {other:?}"),
                ))
            }
        };
        if wc_in != c_in || k != k2 {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel shape {w_shape:?} incompatible with input {x_shape:?}"),
            ));
        }
        if b_shape != [c_out] {
            return Err(TensorError::dim(
                "conv2d",
                format!("bias shape {b_shape:?} does not match C_out={c_out}"),
            ));
        }
        let span = |len: usize| -> Option<usize> {
            (len + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
        };
        let (t_out, f_out) = match (span(t_in), span(f_in)) {
            (Some(t), Some(f)) if t >= 1 && f >= 1 => (t, f),
            _ => {
                return Err(TensorError::dim(
                    "conv2d",
                    format!(
                        "kernel {k} with pad {pad} does not fit input {x_shape:?} (output would be empty)"
                    ),
                ))
            }
        };
        Ok(ConvGeometry {
            c_in,
            c_out,
            k,
            t_in,
            f_in,
            t_out,
            f_out,
            stride,
            pad,
        })
    }

    fn ckk(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Patch matrix `[C_in*k*k, T'*F']`; zero outside the padded input.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let plane = self.t_out * self.f_out;
        let mut patches = vec![0.0; self.ckk() * plane];
        for ci in 0..self.c_in {
            for dt in 0..self.k {
                for df in 0..self.k {
                    let prow = (ci * self.k + dt) * self.k + df;
                    for tp in 0..self.t_out {
                        let ti = (tp * self.stride + dt) as isize - self.pad as isize;
                        if ti < 0 || ti as usize >= self.t_in {
                            continue;
                        }
                        for fp in 0..self.f_out {
                            let fi = (fp * self.stride + df) as isize - self.pad as isize;
                            if fi < 0 || fi as usize >= self.f_in {
                                continue;
                            }
                            patches[prow * plane + tp * self.f_out + fp] =
                                x[ci * (self.t_in * self.f_in) + ti as usize * self.f_in + fi as usize];
                        }
                    }
                }
            }
        }
        patches
    }

    /// Adjoint of `im2col`: scatters patch gradients back onto the input.
    fn col2im(&self, dpatches: &[f64]) -> Vec<f64> {
        let plane = self.t_out * self.f_out;
        let mut dx = vec![0.0; self.c_in * self.t_in * self.f_in];
        for ci in 0..self.c_in {
            for dt in 0..self.k {
                for df in 0..self.k {
                    let prow = (ci * self.k + dt) * self.k + df;
                    for tp in 0..self.t_out {
                        let ti = (tp * self.stride + dt) as isize - self.pad as isize;
                        if ti < 0 || ti as usize >= self.t_in {
                            continue;
                        }
                        for fp in 0..self.f_out {
                            let fi = (fp * self.stride + df) as isize - self.pad as isize;
                            if fi < 0 || fi as usize >= self.f_in {
                                continue;
                            }
                            dx[ci * (self.t_in * self.f_in) + ti as usize * self.f_in + fi as usize] +=
                                dpatches[prow * plane + tp * self.f_out + fp];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Output spatial length of one conv axis: `(len + 2*pad - k) / stride + 1`.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}
