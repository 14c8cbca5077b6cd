//! Minimal reverse-mode automatic differentiation engine.
//!
//! Tensors live inside a [`Graph`] (a Wengert tape): every operation records
//! the op kind and its input ids, and [`Graph::backward`] replays the tape in
//! reverse to accumulate gradients. The op set is exactly what the hashing
//! architecture needs: affine, conv2d, adaptive average pooling, pairwise 1-d
//! pooling, sigmoid, relu and elementwise arithmetic, plus a sum reduction for
//! building scalar losses.
//!
//! All arithmetic is in `f64`. Relu and the hinge (which is relu of a scalar)
//! use subgradient 0 at the kink.

use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
pub type TensorId = usize;

/// An n-dimensional array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension("tensor", format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::dimension(
                "tensor",
                format!("shape {shape:?} implies {n} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }
}

/// Output-column range [lo, hi) for which `ox*stride + q - padding` lands
/// inside an input row of width `w`.
#[inline]
fn valid_ox_range(q: usize, padding: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let base = q as isize - padding as isize;
    let lo = if base >= 0 { 0 } else { ((-base) as usize + stride - 1) / stride };
    // largest ox with ox*stride + base <= w-1
    let hi_num = w as isize - 1 - base;
    let hi = if hi_num < 0 { 0 } else { (hi_num as usize / stride + 1).min(ow) };
    (lo.min(hi), hi)
}

/// Geometry of one conv application, shared by forward and backward.
#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold the input into a [rows x cols] patch matrix so the conv becomes
    /// a dense multiply with contiguous inner loops.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut col = vec![0.0; self.rows() * n];
        for ci in 0..self.c_in {
            let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for p in 0..self.kh {
                for q in 0..self.kw {
                    let r = (ci * self.kh + p) * self.kw + q;
                    let crow = &mut col[r * n..(r + 1) * n];
                    let (lo, hi) = valid_ox_range(q, self.padding, self.stride, self.w, self.ow);
                    let base = q as isize - self.padding as isize;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + p) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let out = &mut crow[oy * self.ow..(oy + 1) * self.ow];
                        for ox in lo..hi {
                            out[ox] = xrow[((ox * self.stride) as isize + base) as usize];
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatter a patch-matrix gradient back onto the input layout.
    fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        let n = self.cols();
        for ci in 0..self.c_in {
            let dxc = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for p in 0..self.kh {
                for q in 0..self.kw {
                    let r = (ci * self.kh + p) * self.kw + q;
                    let crow = &col[r * n..(r + 1) * n];
                    let (lo, hi) = valid_ox_range(q, self.padding, self.stride, self.w, self.ow);
                    let base = q as isize - self.padding as isize;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + p) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dxc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let grow = &crow[oy * self.ow..(oy + 1) * self.ow];
                        for ox in lo..hi {
                            drow[((ox * self.stride) as isize + base) as usize] += grow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: TensorId, w: TensorId, b: TensorId },
    Conv2d { x: TensorId, k: TensorId, stride: usize, padding: usize },
    AvgPool2d { x: TensorId },
    AvgPool1dPairs { x: TensorId },
    Sigmoid { x: TensorId },
    Relu { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Sum { x: TensorId },
    Scale { x: TensorId, c: f64 },
    AddScalar { x: TensorId },
    Reshape { x: TensorId },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Wengert tape holding tensors and recorded operations in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Insert a leaf tensor. Gradients are materialized on it after
    /// [`Graph::backward`] iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if materialized.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        debug_assert!(
            value.data.iter().all(|v| v.is_finite()),
            "non-finite value out of {op:?}"
        );
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        self.nodes.len() - 1
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    /// out[i] = sum_j W[i,j] * x[j] + b[i]
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if wv.shape.len() != 2 {
            return Err(Error::dimension("affine", format!("W must be 2-d, got {:?}", wv.shape)));
        }
        let (m, n) = (wv.shape[0], wv.shape[1]);
        if xv.len() != n || bv.len() != m {
            return Err(Error::dimension(
                "affine",
                format!("W {:?} incompatible with x {:?} and b {:?}", wv.shape, xv.shape, bv.shape),
            ));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wv.data[i * n..(i + 1) * n];
            let mut acc = bv.data[i];
            for j in 0..n {
                acc += row[j] * xv.data[j];
            }
            out[i] = acc;
        }
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(Tensor { shape: vec![m], data: out }, Op::Affine { x, w, b }, rq))
    }

    /// Cross-correlation of `x: [C_in,H,W]` with `k: [C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: TensorId, k: TensorId, stride: usize, padding: usize) -> Result<TensorId> {
        let xv = self.value(x);
        let kv = self.value(k);
        if xv.shape.len() != 3 || kv.shape.len() != 4 {
            return Err(Error::dimension(
                "conv2d",
                format!("expected x rank 3 and kernels rank 4, got {:?} and {:?}", xv.shape, kv.shape),
            ));
        }
        let (c_in, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let (c_out, kc, kh, kw) = (kv.shape[0], kv.shape[1], kv.shape[2], kv.shape[3]);
        if kc != c_in {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dimension("conv2d", "stride must be positive"));
        }
        let oh = (h + 2 * padding).checked_sub(kh).map(|d| d / stride + 1);
        let ow = (w + 2 * padding).checked_sub(kw).map(|d| d / stride + 1);
        let (oh, ow) = match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
            _ => {
                return Err(Error::dimension(
                    "conv2d",
                    format!("non-positive output size for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"),
                ))
            }
        };
        let geom = ConvGeom { c_in, h, w, kh, kw, stride, padding, oh, ow };
        let col = geom.im2col(&xv.data);
        let (rows, n) = (geom.rows(), geom.cols());
        let mut out = vec![0.0; c_out * n];
        for co in 0..c_out {
            let orow = &mut out[co * n..(co + 1) * n];
            let krow = &kv.data[co * rows..(co + 1) * rows];
            for (r, &kval) in krow.iter().enumerate() {
                let crow = &col[r * n..(r + 1) * n];
                for j in 0..n {
                    orow[j] += kval * crow[j];
                }
            }
        }
        let rq = self.requires(x) || self.requires(k);
        Ok(self.push(
            Tensor { shape: vec![c_out, oh, ow], data: out },
            Op::Conv2d { x, k, stride, padding },
            rq,
        ))
    }

    /// Adaptive average pooling restricted to exact tiling: `H % out_h == 0`.
    pub fn avgpool2d(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.shape.len() != 3 {
            return Err(Error::dimension("avgpool2d", format!("expected rank 3, got {:?}", xv.shape)));
        }
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
            return Err(Error::dimension(
                "avgpool2d",
                format!("target {out_h}x{out_w} does not tile input {h}x{w}"),
            ));
        }
        let (th, tw) = (h / out_h, w / out_w);
        let inv = 1.0 / (th * tw) as f64;
        let mut out = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for p in 0..th {
                        for q in 0..tw {
                            acc += xv.data[(ci * h + oy * th + p) * w + ox * tw + q];
                        }
                    }
                    out[(ci * out_h + oy) * out_w + ox] = acc * inv;
                }
            }
        }
        let rq = self.requires(x);
        Ok(self.push(Tensor { shape: vec![c, out_h, out_w], data: out }, Op::AvgPool2d { x }, rq))
    }

    /// out[j] = (x[2j] + x[2j+1]) / 2 over non-overlapping adjacent pairs.
    pub fn avgpool1d_pairs(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        let n = xv.len();
        if n % 2 != 0 {
            return Err(Error::dimension("avgpool1d_pairs", format!("odd length {n}")));
        }
        let out: Vec<f64> = (0..n / 2).map(|j| (xv.data[2 * j] + xv.data[2 * j + 1]) * 0.5).collect();
        let rq = self.requires(x);
        Ok(self.push(Tensor { shape: vec![n / 2], data: out }, Op::AvgPool1dPairs { x }, rq))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(x).data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.value(x).shape.clone();
        let rq = self.requires(x);
        self.push(Tensor { shape, data: out }, Op::Sigmoid { x }, rq)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(x).data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape.clone();
        let rq = self.requires(x);
        self.push(Tensor { shape, data: out }, Op::Relu { x }, rq)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: fn(f64, f64) -> f64,
        op: fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape != bv.shape {
            return Err(Error::dimension(name, format!("shapes {:?} vs {:?}", av.shape, bv.shape)));
        }
        let out: Vec<f64> = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape.clone();
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data: out }, op(a, b), rq))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data.iter().sum();
        let rq = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rq)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.value(x).data.iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape.clone();
        let rq = self.requires(x);
        self.push(Tensor { shape, data: out }, Op::Scale { x, c }, rq)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.value(x).data.iter().map(|&v| v + c).collect();
        let shape = self.value(x).shape.clone();
        let rq = self.requires(x);
        self.push(Tensor { shape, data: out }, Op::AddScalar { x }, rq)
    }

    /// View with a new shape; element count must match.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != xv.len() {
            return Err(Error::dimension(
                "reshape",
                format!("cannot view {:?} as {shape:?}", xv.shape),
            ));
        }
        let data = xv.data.clone();
        let rq = self.requires(x);
        Ok(self.push(Tensor { shape, data }, Op::Reshape { x }, rq))
    }

    pub fn flatten(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len();
        self.reshape(x, vec![n]).expect("flatten cannot fail")
    }

    /// ||a - b||^2 as a scalar node.
    pub fn squared_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum(sq))
    }

    /// Backpropagate from a scalar loss. Gradients accumulate into every
    /// `requires_grad` node reachable from `loss`; repeated calls without a
    /// fresh graph keep accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape),
            ));
        }
        // Local upstream buffer per node; only nodes that require grad get one.
        let mut up: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        up[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let g = match up[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut up);
            if let Op::Leaf = self.nodes[id].op {
                let len = self.nodes[id].value.len();
                let grad = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; len]);
                for (gi, &v) in grad.iter_mut().zip(&g) {
                    *gi += v;
                }
            }
        }
        Ok(())
    }

    fn accum(up: &mut [Option<Vec<f64>>], nodes: &[Node], id: TensorId, add: impl Fn(&mut [f64])) {
        if !nodes[id].requires_grad {
            return;
        }
        let buf = up[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
        add(buf);
    }

    fn propagate(&self, id: TensorId, g: &[f64], up: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match nodes[id].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = &nodes[x].value;
                let wv = &nodes[w].value;
                let (m, n) = (wv.shape[0], wv.shape[1]);
                Self::accum(up, nodes, x, |dx| {
                    for i in 0..m {
                        let row = &wv.data[i * n..(i + 1) * n];
                        for j in 0..n {
                            dx[j] += g[i] * row[j];
                        }
                    }
                });
                Self::accum(up, nodes, w, |dw| {
                    for i in 0..m {
                        for j in 0..n {
                            dw[i * n + j] += g[i] * xv.data[j];
                        }
                    }
                });
                Self::accum(up, nodes, b, |db| {
                    for i in 0..m {
                        db[i] += g[i];
                    }
                });
            }
            Op::Conv2d { x, k, stride, padding } => {
                let xv = &nodes[x].value;
                let kv = &nodes[k].value;
                let (c_in, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let (c_out, _, kh, kw) = (kv.shape[0], kv.shape[1], kv.shape[2], kv.shape[3]);
                let ov = &nodes[id].value;
                let (oh, ow) = (ov.shape[1], ov.shape[2]);
                let need_x = nodes[x].requires_grad;
                let need_k = nodes[k].requires_grad;
                if !need_x && !need_k {
                    return;
                }
                let geom = ConvGeom { c_in, h, w, kh, kw, stride, padding, oh, ow };
                let (rows, n) = (geom.rows(), geom.cols());
                if need_k {
                    // dK[co, r] = <g[co], col[r]>
                    let col = geom.im2col(&xv.data);
                    let dk = up[k].get_or_insert_with(|| vec![0.0; kv.len()]);
                    for co in 0..c_out {
                        let grow = &g[co * n..(co + 1) * n];
                        for r in 0..rows {
                            let crow = &col[r * n..(r + 1) * n];
                            // 4 accumulators so the reduction vectorizes
                            let mut acc = [0.0f64; 4];
                            let chunks = n / 4;
                            for c in 0..chunks {
                                for l in 0..4 {
                                    acc[l] += grow[4 * c + l] * crow[4 * c + l];
                                }
                            }
                            let mut total = acc.iter().sum::<f64>();
                            for j in 4 * chunks..n {
                                total += grow[j] * crow[j];
                            }
                            dk[co * rows + r] += total;
                        }
                    }
                }
                if need_x {
                    // dcol[r] = sum_co K[co, r] * g[co], scattered back by col2im
                    let mut dcol = vec![0.0; rows * n];
                    for co in 0..c_out {
                        let grow = &g[co * n..(co + 1) * n];
                        let krow = &kv.data[co * rows..(co + 1) * rows];
                        for (r, &kval) in krow.iter().enumerate() {
                            let drow = &mut dcol[r * n..(r + 1) * n];
                            for j in 0..n {
                                drow[j] += kval * grow[j];
                            }
                        }
                    }
                    let dx = up[x].get_or_insert_with(|| vec![0.0; xv.len()]);
                    geom.col2im_add(&dcol, dx);
                }
            }
            Op::AvgPool2d { x } => {
                let xv = &nodes[x].value;
                let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let ov = &nodes[id].value;
                let (oh, ow) = (ov.shape[1], ov.shape[2]);
                let (th, tw) = (h / oh, w / ow);
                let inv = 1.0 / (th * tw) as f64;
                Self::accum(up, nodes, x, |dx| {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(ci * oh + oy) * ow + ox] * inv;
                                for p in 0..th {
                                    for q in 0..tw {
                                        dx[(ci * h + oy * th + p) * w + ox * tw + q] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool1dPairs { x } => {
                Self::accum(up, nodes, x, |dx| {
                    for (j, &gv) in g.iter().enumerate() {
                        dx[2 * j] += gv * 0.5;
                        dx[2 * j + 1] += gv * 0.5;
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &nodes[id].value.data;
                Self::accum(up, nodes, x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu { x } => {
                let xv = &nodes[x].value.data;
                Self::accum(up, nodes, x, |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                Self::accum(up, nodes, a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i];
                    }
                });
                Self::accum(up, nodes, b, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i];
                    }
                });
            }
            Op::Sub { a, b } => {
                Self::accum(up, nodes, a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i];
                    }
                });
                Self::accum(up, nodes, b, |db| {
                    for i in 0..db.len() {
                        db[i] -= g[i];
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &nodes[a].value.data;
                let bv = &nodes[b].value.data;
                Self::accum(up, nodes, a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                Self::accum(up, nodes, b, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                Self::accum(up, nodes, x, |dx| {
                    for v in dx.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Scale { x, c } => {
                Self::accum(up, nodes, x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * c;
                    }
                });
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                Self::accum(up, nodes, x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i];
                    }
                });
            }
        }
    }

    /// Inputs of relu nodes whose pre-activation is within `margin` of the
    /// kink. Used by gradient-check drivers to reject unlucky samples.
    pub fn near_relu_kink(&self, margin: f64) -> bool {
        self.nodes.iter().any(|n| {
            if let Op::Relu { x } = n.op {
                self.nodes[x].value.data.iter().any(|v| v.abs() < margin)
            } else {
                false
            }
        })
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// True if any forward pass landed within the kink margin of a relu/hinge.
    pub near_kink: bool,
}

/// Compare the analytic gradient of `f` (a scalar-valued tensor program over
/// the given inputs) against central differences.
///
/// Relative error per coordinate uses denominator `max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    let eval = |points: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>, bool)> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = points.iter().map(|t| g.leaf(t.clone(), want_grad)).collect();
        let out = f(&mut g, &ids)?;
        if !g.value(out).is_scalar() {
            return Err(Error::contract("grad_check", "program must be scalar-valued"));
        }
        let y = g.value(out).data()[0];
        let near = g.near_relu_kink(1e-3);
        let grads = if want_grad {
            g.backward(out)?;
            ids.iter()
                .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(id).len()]))
                .collect()
        } else {
            Vec::new()
        };
        Ok((y, grads, near))
    };

    let (_, analytic, near_kink) = eval(inputs, true)?;
    if near_kink {
        // Caller should redraw; the margin (1e-3 vs eps 1e-5) guarantees the
        // sweep below cannot cross a kink once the base point is clear of one.
        return Ok(GradCheckReport { max_relative_error: 0.0, near_kink: true });
    }
    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.len() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let (y_plus, _, _) = eval(&work, false)?;
            work[ti].data_mut()[ci] = orig - eps;
            let (y_minus, _, _) = eval(&work, false)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (y_plus - y_minus) / (2.0 * eps);
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(GradCheckReport { max_relative_error: max_err, near_kink })
}
