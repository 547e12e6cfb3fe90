//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape and are referenced by [`Var`] handles; [`Tape::backward`] runs once
//! and returns gradients for every recorded node. Image tensors use the
//! `[N, C, H, W]` layout.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::NnError;
use super::params::{ParamId, ParamStore};

pub type Shape = Vec<usize>;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map from an input plane to an output plane: output entry
/// `r` is `sum(w * input[i])` over `rows[r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    pub input_len: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Square,
    Log,
    Affine(f64, f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, g: ConvGeom, cols: Vec<f64> },
    ConvT2d { x: Var, w: Var, b: Var, g: ConvGeom },
    Linear { x: Var, w: Var, b: Var },
    Unary { x: Var, kind: Unary },
    Binary { a: Var, b: Var, kind: Binary },
    Concat { a: Var, b: Var },
    Crop { x: Var, top: usize, left: usize },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumRows { x: Var },
    Gather { x: Var, maps: Vec<Rc<SparseMap>> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of parameter leaves, summed when a parameter was used twice.
    pub fn params(&self) -> &BTreeMap<ParamId, Vec<f64>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<f64>> {
        self.params
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> NnError {
    NnError::Shape(alloc::format!("{what}: {a:?} vs {b:?}"))
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of size
/// `m x k` and `op(B)` of size `k x n`. `ta`/`tb` mean the stored matrix is
/// the transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches for these
    // dimensions and strides; the slices do not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[C, H, W]` image into `[C*K*K, Ho*Wo]` patch columns.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize, x: &mut [f64]) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all nodes so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var, NnError> {
        self.leaf(value, shape, true)
    }

    /// Input without gradient.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var, NnError> {
        self.leaf(value, shape, false)
    }

    fn leaf(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var, NnError> {
        if value.len() != numel(shape) {
            return Err(NnError::Shape(alloc::format!("{} values for shape {shape:?}", value.len())));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, requires_grad))
    }

    /// Records a parameter; with `trainable = false` it acts as a constant.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let v = self.push(store.values(id).to_vec(), store.shape(id).to_vec(), Op::Leaf, trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// 2D convolution. `x: [N, Cin, H, W]`, `w: [Cout, Cin, K, K]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return Err(shape_err("conv2d input/weight", &xs, &ws));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err("conv2d kernel larger than input", &xs, &ws));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let g = ConvGeom { n, cin, h, w: wd, cout, k, stride, pad, ho, wo };
        let ckk = cin * k * k;
        let plane = ho * wo;
        let mut cols = vec![0.0; n * ckk * plane];
        let mut out = vec![0.0; n * cout * plane];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..n {
                let col = &mut cols[i * ckk * plane..(i + 1) * ckk * plane];
                im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, k, stride, pad, ho, wo, col);
                let o = &mut out[i * cout * plane..(i + 1) * cout * plane];
                for (co, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.fill(bv[co]);
                }
                gemm(cout, ckk, plane, wv, false, col, false, o, 1.0);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, vec![n, cout, ho, wo], Op::Conv2d { x, w, b, g, cols }, rg))
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`] in its input).
    /// `x: [N, Cin, H, W]`, `w: [Cin, Cout, K, K]`, `b: [Cout]`; output side
    /// `(H - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || self.shape(b) != [ws[1]] || stride == 0 {
            return Err(shape_err("conv_transpose2d input/weight", &xs, &ws));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(shape_err("conv_transpose2d padding too large", &xs, &ws));
        }
        let (ho, wo) = (full_h - 2 * pad, full_w - 2 * pad);
        // Geometry of the forward convolution this op is the adjoint of:
        // image `[Cout, Ho, Wo]`, patch grid `H x W`.
        let g = ConvGeom { n, cin, h, w: wd, cout, k, stride, pad, ho, wo };
        let ckk = cout * k * k;
        let plane = h * wd;
        let mut cols = vec![0.0; ckk * plane];
        let mut out = vec![0.0; n * cout * ho * wo];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..n {
                gemm(ckk, cin, plane, wv, true, &xv[i * cin * plane..(i + 1) * cin * plane], false, &mut cols, 0.0);
                let o = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                for (co, chunk) in o.chunks_mut(ho * wo).enumerate() {
                    chunk.fill(bv[co]);
                }
                col2im(&cols, cout, ho, wo, k, stride, pad, h, wd, o);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, vec![n, cout, ho, wo], Op::ConvT2d { x, w, b, g }, rg))
    }

    /// Fully connected layer: `x: [N, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(shape_err("linear input/weight", &xs, &ws));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(&self.nodes[b.0].value);
        }
        gemm(n, din, dout, &self.nodes[x.0].value, false, &self.nodes[w.0].value, true, &mut out, 1.0);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, vec![n, dout], Op::Linear { x, w, b }, rg))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var, NnError> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = match kind {
            Unary::LeakyRelu(s) => xv.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect(),
            Unary::Relu => xv.iter().map(|&v| v.max(0.0)).collect(),
            Unary::Sigmoid => xv.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Tanh => xv.iter().map(|&v| libm::tanh(v)).collect(),
            Unary::Abs => xv.iter().map(|v| v.abs()).collect(),
            Unary::Square => xv.iter().map(|v| v * v).collect(),
            Unary::Log => {
                if xv.iter().any(|&v| v <= 0.0) {
                    return Err(NnError::Domain("log of a non-positive value"));
                }
                xv.iter().map(|&v| libm::log(v)).collect()
            }
            Unary::Affine(a, b) => xv.iter().map(|v| a * v + b).collect(),
            Unary::Clamp(lo, hi) => xv.iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Unary { x, kind }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, NnError> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Unary::Tanh)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Unary::Square)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NnError> {
        self.unary(x, Unary::Log)
    }

    /// `a * x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var, NnError> {
        self.unary(x, Unary::Affine(a, b))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NnError> {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("elementwise operands", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = av
            .iter()
            .zip(bv)
            .map(|(x, y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, Binary::Mul)
    }

    /// Channel concatenation of `[N, Ca, H, W]` and `[N, Cb, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat_channels", &sa, &sb));
        }
        let plane = sa[2] * sa[3];
        let (la, lb) = (sa[1] * plane, sb[1] * plane);
        let mut out = Vec::with_capacity(sa[0] * (la + lb));
        for i in 0..sa[0] {
            out.extend_from_slice(&self.nodes[a.0].value[i * la..(i + 1) * la]);
            out.extend_from_slice(&self.nodes[b.0].value[i * lb..(i + 1) * lb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], Op::Concat { a, b }, rg))
    }

    /// Spatial crop of `[N, C, H, W]` to `[N, C, height, width]` at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || top + height > s[2] || left + width > s[3] {
            return Err(shape_err("crop window", &s, &[top, left, height, width]));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(s[0] * s[1] * height * width);
        for nc in 0..s[0] * s[1] {
            for y in 0..height {
                let start = (nc * s[2] + top + y) * s[3] + left;
                out.extend_from_slice(&xv[start..start + width]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![s[0], s[1], height, width], Op::Crop { x, top, left }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        if numel(shape) != self.nodes[x.0].value.len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape { x }, rg))
    }

    /// Sum of all entries (scalar).
    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![s], vec![1], Op::Sum { x }, rg))
    }

    /// Mean of all entries (scalar).
    pub fn mean(&mut self, x: Var) -> Result<Var, NnError> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(NnError::Shape("mean of an empty tensor".into()));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![m], vec![1], Op::Mean { x }, rg))
    }

    /// Per-row sums of `[N, ...]`, giving `[N]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] == 0 {
            return Err(NnError::Shape("sum_rows needs a leading batch axis".into()));
        }
        let per = numel(&s[1..]);
        let out = self.nodes[x.0].value.chunks(per.max(1)).map(|c| c.iter().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(out, vec![s[0]], Op::SumRows { x }, rg))
    }

    /// Applies a per-sample sparse map to every channel plane:
    /// `x: [N, C, ...]` with planes of `maps[n].input_len` values gives
    /// `[N, C, rows]`.
    pub fn gather(&mut self, x: Var, maps: Vec<Rc<SparseMap>>) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || maps.len() != s[0] {
            return Err(shape_err("gather batch", &s, &[maps.len()]));
        }
        let plane = numel(&s[2..]);
        let out_len = maps.first().map_or(0, |m| m.rows.len());
        if maps.iter().any(|m| m.input_len != plane || m.rows.len() != out_len) {
            return Err(NnError::Shape("gather map does not match the input plane".into()));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; s[0] * s[1] * out_len];
        for (n, map) in maps.iter().enumerate() {
            for c in 0..s[1] {
                let src = &xv[(n * s[1] + c) * plane..(n * s[1] + c + 1) * plane];
                let dst = &mut out[(n * s[1] + c) * out_len..(n * s[1] + c + 1) * out_len];
                for (r, row) in map.rows.iter().enumerate() {
                    dst[r] = row.iter().map(|&(i, w)| w * src[i as usize]).sum();
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![s[0], s[1], out_len], Op::Gather { x, maps }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NnError::UnknownLabel(bad));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (i, row) in lv.chunks(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - m)).sum();
            for j in 0..k {
                probs[i * k + j] = libm::exp(row[j] - m) / z;
            }
            loss += -(row[labels[i]] - m - libm::log(z));
        }
        loss /= s[0] as f64;
        let rg = self.rg(logits);
        Ok(self.push(vec![loss], vec![1], Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Reverse pass from a scalar. Allowed once per recorded pass; call
    /// [`Tape::reset`] before recording again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NnError> {
        if self.consumed {
            return Err(NnError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(NnError::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                match params.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, g: geo, cols } => {
                let ConvGeom { n, cin, h, w: wd, cout, k, stride, pad, ho, wo } = *geo;
                let ckk = cin * k * k;
                let plane = ho * wo;
                self.accumulate(grads, *b, |db| {
                    for i in 0..n {
                        for co in 0..cout {
                            db[co] += g[(i * cout + co) * plane..(i * cout + co + 1) * plane].iter().sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for i in 0..n {
                        let go = &g[i * cout * plane..(i + 1) * cout * plane];
                        let col = &cols[i * ckk * plane..(i + 1) * ckk * plane];
                        gemm(cout, plane, ckk, go, false, col, true, dw, 1.0);
                    }
                });
                let wv = &self.nodes[w.0].value;
                self.accumulate(grads, *x, |dx| {
                    let mut dcol = vec![0.0; ckk * plane];
                    for i in 0..n {
                        let go = &g[i * cout * plane..(i + 1) * cout * plane];
                        gemm(ckk, cout, plane, wv, true, go, false, &mut dcol, 0.0);
                        col2im(&dcol, cin, h, wd, k, stride, pad, ho, wo, &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd]);
                    }
                });
            }
            Op::ConvT2d { x, w, b, g: geo } => {
                let ConvGeom { n, cin, h, w: wd, cout, k, stride, pad, ho, wo } = *geo;
                let ckk = cout * k * k;
                let plane = h * wd;
                let oplane = ho * wo;
                self.accumulate(grads, *b, |db| {
                    for i in 0..n {
                        for co in 0..cout {
                            db[co] += g[(i * cout + co) * oplane..(i * cout + co + 1) * oplane].iter().sum::<f64>();
                        }
                    }
                });
                let needs_cols = self.nodes[w.0].requires_grad || self.nodes[x.0].requires_grad;
                if !needs_cols {
                    return;
                }
                let mut gcols = vec![0.0; n * ckk * plane];
                for i in 0..n {
                    im2col(
                        &g[i * cout * oplane..(i + 1) * cout * oplane],
                        cout,
                        ho,
                        wo,
                        k,
                        stride,
                        pad,
                        h,
                        wd,
                        &mut gcols[i * ckk * plane..(i + 1) * ckk * plane],
                    );
                }
                let xv = &self.nodes[x.0].value;
                self.accumulate(grads, *w, |dw| {
                    for i in 0..n {
                        let xi = &xv[i * cin * plane..(i + 1) * cin * plane];
                        gemm(cin, plane, ckk, xi, false, &gcols[i * ckk * plane..(i + 1) * ckk * plane], true, dw, 1.0);
                    }
                });
                let wv = &self.nodes[w.0].value;
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        gemm(
                            cin,
                            ckk,
                            plane,
                            wv,
                            false,
                            &gcols[i * ckk * plane..(i + 1) * ckk * plane],
                            false,
                            &mut dx[i * cin * plane..(i + 1) * cin * plane],
                            1.0,
                        );
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[x.0].shape;
                let (n, din) = (xs[0], xs[1]);
                let dout = self.nodes[w.0].shape[0];
                self.accumulate(grads, *b, |db| {
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
                let xv = &self.nodes[x.0].value;
                self.accumulate(grads, *w, |dw| gemm(dout, n, din, g, true, xv, false, dw, 1.0));
                let wv = &self.nodes[w.0].value;
                self.accumulate(grads, *x, |dx| gemm(n, dout, din, g, false, wv, false, dx, 1.0));
            }
            Op::Unary { x, kind } => {
                let xv = &self.nodes[x.0].value;
                let yv = &node.value;
                let kind = *kind;
                self.accumulate(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        let (xi, yi) = (xv[i], yv[i]);
                        let d = match kind {
                            Unary::LeakyRelu(s) => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    s
                                }
                            }
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Tanh => 1.0 - yi * yi,
                            Unary::Abs => {
                                if xi > 0.0 {
                                    1.0
                                } else if xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * xi,
                            Unary::Log => 1.0 / xi,
                            Unary::Affine(a, _) => a,
                            Unary::Clamp(lo, hi) => {
                                if xi >= lo && xi <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        dx[i] += d * g[i];
                    }
                });
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                match kind {
                    Binary::Add => {
                        self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                        self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                    }
                    Binary::Sub => {
                        self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                        self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, v)| *x -= v));
                    }
                    Binary::Mul => {
                        self.accumulate(grads, *a, |d| {
                            for i in 0..d.len() {
                                d[i] += g[i] * bv[i];
                            }
                        });
                        self.accumulate(grads, *b, |d| {
                            for i in 0..d.len() {
                                d[i] += g[i] * av[i];
                            }
                        });
                    }
                }
            }
            Op::Concat { a, b } => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let plane = sa[2] * sa[3];
                let (la, lb) = (sa[1] * plane, sb[1] * plane);
                let n = sa[0];
                self.accumulate(grads, *a, |d| {
                    for i in 0..n {
                        let src = &g[i * (la + lb)..i * (la + lb) + la];
                        d[i * la..(i + 1) * la].iter_mut().zip(src).for_each(|(x, v)| *x += v);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..n {
                        let src = &g[i * (la + lb) + la..(i + 1) * (la + lb)];
                        d[i * lb..(i + 1) * lb].iter_mut().zip(src).for_each(|(x, v)| *x += v);
                    }
                });
            }
            Op::Crop { x, top, left } => {
                let s = &self.nodes[x.0].shape;
                let (hh, ww) = (node.shape[2], node.shape[3]);
                let (top, left) = (*top, *left);
                self.accumulate(grads, *x, |d| {
                    for nc in 0..s[0] * s[1] {
                        for y in 0..hh {
                            let start = (nc * s[2] + top + y) * s[3] + left;
                            let src = &g[(nc * hh + y) * ww..(nc * hh + y + 1) * ww];
                            d[start..start + ww].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, v)| *a += v));
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean { x } => {
                let inv = g[0] / self.nodes[x.0].value.len() as f64;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|a| *a += inv));
            }
            Op::SumRows { x } => {
                let per = self.nodes[x.0].value.len() / node.value.len();
                self.accumulate(grads, *x, |d| {
                    for (i, chunk) in d.chunks_mut(per.max(1)).enumerate() {
                        chunk.iter_mut().for_each(|a| *a += g[i]);
                    }
                });
            }
            Op::Gather { x, maps } => {
                let s = &self.nodes[x.0].shape;
                let plane = self.nodes[x.0].value.len() / (s[0] * s[1]);
                let out_len = node.shape[2];
                self.accumulate(grads, *x, |d| {
                    for (n, map) in maps.iter().enumerate() {
                        for c in 0..s[1] {
                            let go = &g[(n * s[1] + c) * out_len..(n * s[1] + c + 1) * out_len];
                            let dst = &mut d[(n * s[1] + c) * plane..(n * s[1] + c + 1) * plane];
                            for (r, row) in map.rows.iter().enumerate() {
                                for &(i, w) in row {
                                    dst[i as usize] += w * go[r];
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.nodes[logits.0].shape[1];
                let scale = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |d| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == l { 1.0 } else { 0.0 };
                            d[i * k + j] += scale * (probs[i * k + j] - target);
                        }
                    }
                });
            }
        }
    }
}

/// Human-readable op name list, for diagnostics.
pub fn describe(tape: &Tape) -> Vec<String> {
    tape.nodes
        .iter()
        .map(|n| {
            let name = match n.op {
                Op::Leaf => "leaf",
                Op::Conv2d { .. } => "conv2d",
                Op::ConvT2d { .. } => "conv_transpose2d",
                Op::Linear { .. } => "linear",
                Op::Unary { .. } => "unary",
                Op::Binary { .. } => "binary",
                Op::Concat { .. } => "concat",
                Op::Crop { .. } => "crop",
                Op::Reshape { .. } => "reshape",
                Op::Sum { .. } => "sum",
                Op::Mean { .. } => "mean",
                Op::SumRows { .. } => "sum_rows",
                Op::Gather { .. } => "gather",
                Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            };
            alloc::format!("{name}{:?}", n.shape)
        })
        .collect()
}
