use super::linalg::{col2im_add, gemm, im2col, ConvGeom, Mat};
use super::Tensor;
use crate::error::{Error, Result};

/// Negative slope of every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Affine(Var, f64),
    LeakyRelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SmoothL1(Var),
    Sum(Var),
    Softmax(Var),
    LogSumExp(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Up2(Var),
    Down2(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    NormalizeRows { x: Var, eps: f64, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation graph. Nodes are appended in evaluation order, so the
/// node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        assert_eq!(node.value.len(), 1, "scalar() on non-scalar node");
        node.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("graph nodes are well formed")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds the leaf gradient of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.value(a), m, k),
            Mat::new(self.value(b), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose expects a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    /// Broadcast check: the smaller operand's shape must be a suffix of the larger.
    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let (big, small) = if numel(sa) >= numel(sb) { (sa, sb) } else { (sb, sa) };
        let scalar = numel(small) == 1;
        if scalar || (small.len() <= big.len() && big.ends_with(small)) {
            Ok(big.to_vec())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.broadcast(op, a, b)?;
        let n = numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..n).map(|i| f(va[i % va.len()], vb[i % vb.len()])).collect();
        Ok((shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    /// `out[i, j] = x[i, j] * s[i]` for `x: [m x n]` and `s` holding `m` values.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x);
        let m = sx[0];
        if numel(self.shape(s)) != m {
            return Err(Error::shape("scale_rows", sx, self.shape(s)));
        }
        let n = numel(sx) / m;
        let (vx, vs) = (self.value(x), self.value(s));
        let out = (0..m * n).map(|i| vx[i] * vs[i / n]).collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(shape, out, Op::ScaleRows(x, s), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Affine(x, scale), rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::LeakyRelu(x), |v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        // NaN passes through so the loss check can report it as a fault
        if let Some(bad) = self.value(x).iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Elementwise smooth-L1 with transition at 1.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, Op::SmoothL1(x), |v| {
            if v.abs() < 1.0 {
                0.5 * v * v
            } else {
                v.abs() - 0.5
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![total], Op::Sum(x), rg)
    }

    /// Softmax over all elements, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|&e| (e - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = exps.into_iter().map(|e| e / z).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Softmax(x), rg)
    }

    /// `log(sum(exp(x)))` over all elements.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
        let rg = self.rg(x);
        self.push(vec![1], vec![lse], Op::LogSumExp(x), rg)
    }

    /// 2-D cross-correlation of `x: [c_in x h x w]` with `w: [c_out x c_in x k x k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        if k % 2 == 0 || stride == 0 {
            return Err(Error::Dimension(format!(
                "conv2d needs an odd kernel and positive stride, got k={k} stride={stride}"
            )));
        }
        let span_h = h + 2 * pad;
        let span_w = wd + 2 * pad;
        if span_h < k || span_w < k {
            return Err(Error::Dimension(format!(
                "conv2d output extent < 1 for input {h}x{wd}, k={k}, pad={pad}"
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh: (span_h - k) / stride + 1,
            ow: (span_w - k) / stride + 1,
        };
        if let Some(b) = b {
            if numel(self.shape(b)) != c_out {
                return Err(Error::shape("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let cols = im2col(self.value(x), &geom);
        let n_out = geom.out_pixels();
        let mut out = vec![0.0; c_out * n_out];
        if let Some(b) = b {
            let bv = self.value(b);
            for (o, row) in out.chunks_mut(n_out).enumerate() {
                row.fill(bv[o]);
            }
        }
        gemm(
            Mat::new(self.value(w), c_out, geom.patch_len()),
            Mat::new(&cols, geom.patch_len(), n_out),
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        let shape = vec![c_out, geom.oh, geom.ow];
        Ok(self.push(shape, out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    fn spatial(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::Dimension(format!("{op} expects [c x h x w], got {s:?}"))),
        }
    }

    /// Nearest-neighbour upsampling by 2 in both spatial axes.
    pub fn up2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.spatial("up2", x)?;
        let src = self.value(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::Up2(x), rg))
    }

    /// 2x2 average pooling with stride 2.
    pub fn down2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.spatial("down2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("down2 needs even extents, got {h}x{w}")));
        }
        let src = self.value(x);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let at = |dy: usize, dx: usize| src[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                    out[(ch * oh + y) * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::Down2(x), rg))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Picks flat elements of `x` by index into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if numel(shape) != indices.len() {
            return Err(Error::shape("gather", &[indices.len()], shape));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!("gather index {bad} out of range {n}")));
        }
        let src = self.value(x);
        let out = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Gather(x, indices), rg))
    }

    /// Rows of a `[m x n]` matrix, looked up by index (embedding lookup).
    pub fn rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("rows expects a matrix, got {s:?}")));
        }
        let n = s[1];
        let idx = ids.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(x, idx, &[ids.len(), n])
    }

    /// Divides each row of `x: [m x n]` by `(||row|| + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("normalize_rows expects a matrix, got {s:?}")));
        }
        let n = s[1];
        let v = self.value(x);
        let norms: Vec<f64> = v.chunks(n).map(|r| r.iter().map(|e| e * e).sum::<f64>().sqrt()).collect();
        let out = v
            .chunks(n)
            .zip(&norms)
            .flat_map(|(r, &nm)| r.iter().map(move |e| e / (nm + eps)))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(s, out, Op::NormalizeRows { x, eps, norms }, rg))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                send(*a, &mut |da| gemm(Mat::new(g, m, n), Mat::new(vb, k, n).t(), 1.0, da));
                send(*b, &mut |db| gemm(Mat::new(va, m, k).t(), Mat::new(g, m, n), 1.0, db));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                send(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, &mut |da| {
                    let n = da.len();
                    g.iter().enumerate().for_each(|(i, gi)| da[i % n] += gi);
                });
                send(*b, &mut |db| {
                    let n = db.len();
                    g.iter().enumerate().for_each(|(i, gi)| db[i % n] += sign * gi);
                });
            }
            Op::Mul(a, b) => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                send(*a, &mut |da| {
                    let n = da.len();
                    g.iter()
                        .enumerate()
                        .for_each(|(i, gi)| da[i % n] += gi * vb[i % vb.len()]);
                });
                send(*b, &mut |db| {
                    let n = db.len();
                    g.iter()
                        .enumerate()
                        .for_each(|(i, gi)| db[i % n] += gi * va[i % va.len()]);
                });
            }
            Op::ScaleRows(x, s) => {
                let vx = &nodes[x.0].value;
                let vs = &nodes[s.0].value;
                let n = vx.len() / vs.len();
                send(*x, &mut |dx| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * vs[i / n];
                    }
                });
                send(*s, &mut |ds| {
                    for (i, gi) in g.iter().enumerate() {
                        ds[i / n] += gi * vx[i];
                    }
                });
            }
            Op::Affine(x, scale) => send(*x, &mut |dx| {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += scale * gi)
            }),
            Op::LeakyRelu(x) => {
                let vx = &nodes[x.0].value;
                send(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * if vx[i] > 0.0 { 1.0 } else { LEAKY_SLOPE };
                    }
                });
            }
            Op::Sigmoid(x) => send(*x, &mut |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Tanh(x) => send(*x, &mut |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Exp(x) => send(*x, &mut |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * out[i];
                }
            }),
            Op::Log(x) => {
                let vx = &nodes[x.0].value;
                send(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] / vx[i];
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = &nodes[x.0].value;
                send(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::SmoothL1(x) => {
                let vx = &nodes[x.0].value;
                send(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        let d = if vx[i].abs() < 1.0 { vx[i] } else { vx[i].signum() };
                        dx[i] += g[i] * d;
                    }
                });
            }
            Op::Sum(x) => send(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Softmax(x) => {
                let dot: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                send(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += out[i] * (g[i] - dot);
                    }
                });
            }
            Op::LogSumExp(x) => {
                let vx = &nodes[x.0].value;
                let lse = out[0];
                send(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[0] * (vx[i] - lse).exp();
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let c_out = nodes[w.0].shape[0];
                let n_out = geom.out_pixels();
                let p = geom.patch_len();
                let vw = &nodes[w.0].value;
                send(*w, &mut |dw| {
                    gemm(Mat::new(g, c_out, n_out), Mat::new(cols, p, n_out).t(), 1.0, dw)
                });
                if let Some(b) = b {
                    send(*b, &mut |db| {
                        for (o, row) in g.chunks(n_out).enumerate() {
                            db[o] += row.iter().sum::<f64>();
                        }
                    });
                }
                send(*x, &mut |dx| {
                    let mut dcols = vec![0.0; p * n_out];
                    gemm(Mat::new(vw, c_out, p).t(), Mat::new(g, c_out, n_out), 0.0, &mut dcols);
                    col2im_add(&dcols, geom, dx);
                });
            }
            Op::Up2(x) => {
                let s = &nodes[x.0].shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                send(*x, &mut |dx| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Down2(x) => {
                let s = &nodes[x.0].shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                send(*x, &mut |dx| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[(ch * h + y) * w + xx] += 0.25 * g[(ch * oh + y / 2) * ow + xx / 2];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    send(*p, &mut |dp| {
                        dp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, gi)| *d += gi)
                    });
                    offset += n;
                }
            }
            Op::Reshape(x) => send(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)),
            Op::Gather(x, idx) => send(*x, &mut |dx| {
                for (gi, &i) in g.iter().zip(idx) {
                    dx[i] += gi;
                }
            }),
            Op::NormalizeRows { x, eps, norms } => {
                let vx = &nodes[x.0].value;
                let n = vx.len() / norms.len();
                send(*x, &mut |dx| {
                    for (r, &nm) in norms.iter().enumerate() {
                        let row = &vx[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let denom = nm + eps;
                        // y = x / (|x| + eps); dy/dx = I/denom - x x^T / (|x| denom^2)
                        let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let coef = if nm > 0.0 { dot / (nm * denom * denom) } else { 0.0 };
                        for j in 0..n {
                            dx[r * n + j] += gr[j] / denom - coef * row[j];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[2, 1], &[2.0, 5.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p), &[2.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0]));
        let y = g.leaky_relu(x);
        assert!((g.value(y)[0] + 0.1).abs() < 1e-15);
        let z = g.constant(Tensor::vector(vec![0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);

        let a = g.constant(Tensor::vector(vec![1.0, -1.0]));
        let b = g.constant(Tensor::vector(vec![2.0, 2.0]));
        let (la, lb) = (g.leaky_relu(a), g.leaky_relu(b));
        let m = g.mul(la, lb).unwrap();
        assert!((g.value(m)[0] - 2.0).abs() < 1e-12);
        assert!((g.value(m)[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x);
        assert_eq!(g.value(s), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let s = g.softmax(x);
        assert!((g.value(s)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g.value(s)[1] - 1.0 / 3.0).abs() < 1e-12);

        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = g.softmax(x);
        assert!(g.value(s).iter().all(|v| v.is_finite()));
        assert!((g.value(s)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);

        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);

        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = g.constant(t(&[1, 4, 4], &data));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, None, 2, 0).unwrap();
        assert_eq!(g.value(y), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn conv2d_rejects_empty_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, None, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn resample_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = g.up2(x).unwrap();
        assert_eq!(
            g.value(u),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let d = g.down2(u).unwrap();
        assert_eq!(g.value(d), g.value(x));

        let c = g.constant(Tensor::full(&[2, 4, 6], 0.7));
        let d = g.down2(c).unwrap();
        assert!(g.value(d).iter().all(|&v| v == 0.7));

        let odd = g.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(g.down2(odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_and_sigmoid() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::full(&[2, 3], 0.3));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
        // a second sweep accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_leading_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2], &[10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0, 22.0, 13.0, 24.0]);
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, bad).is_err());
    }
}
