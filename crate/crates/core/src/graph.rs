//! Reverse-mode automatic differentiation over a closed operator set.
//!
//! A [`Graph`] is a write-once tape: operator methods append nodes eagerly
//! (forward values are computed at construction time) and [`Graph::backward`]
//! walks the tape in reverse, accumulating gradients for every parameter
//! leaf bound via [`Graph::param`]. The operator set is exactly what the
//! networks in this crate need; there is no broadcasting beyond the scalar
//! variants, which keeps every shape rule explicit.

use std::collections::BTreeMap;
use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::RegionIndex;
use crate::optim::{Grads, ParamStore};
use crate::scalar::{self, Real};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Work size above which matrix/conv kernels fan out across threads.
const PAR_THRESHOLD: usize = 1 << 16;

enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, T),
    Scale(NodeId, T),
    Relu(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Log2(NodeId),
    ClampMin(NodeId, T),
    NormalCdf(NodeId),
    NormalInterval { lo: NodeId, hi: NodeId },
    SigmoidInterval { lo: NodeId, hi: NodeId },
    Sum(NodeId),
    Mean(NodeId),
    Mix { x: NodeId, w: NodeId, b: NodeId },
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    PoolRegions { x: NodeId, idx: Rc<RegionIndex> },
    BroadcastRegions { x: NodeId, idx: Rc<RegionIndex> },
    ConcatRows(NodeId, NodeId),
    SliceRows { x: NodeId, start: usize },
    SelectCols { x: NodeId, cols: Rc<Vec<usize>> },
    RowScale { x: NodeId, s: NodeId },
    Reshape(NodeId),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Log2(..) => "log2",
            Op::ClampMin(..) => "clamp_min",
            Op::NormalCdf(..) => "normal_cdf",
            Op::NormalInterval { .. } => "normal_interval",
            Op::SigmoidInterval { .. } => "sigmoid_interval",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mix { .. } => "mix",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::PoolRegions { .. } => "pool_regions",
            Op::BroadcastRegions { .. } => "broadcast_regions",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SelectCols { .. } => "select_cols",
            Op::RowScale { .. } => "row_scale",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Differentiable computation tape bound to a parameter store.
pub struct Graph<'p, T: Real = f64> {
    nodes: Vec<Node<T>>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, NodeId>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph { nodes: Vec::new(), params, bound: BTreeMap::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(Op::Leaf, value)
    }

    /// Binds a named parameter tensor as a trainable leaf. Binding the same
    /// name twice returns the same node so gradients accumulate correctly.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let id = self.push_unchecked(Op::Leaf, tensor);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn push_unchecked(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push_unchecked(op, value))
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<()> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b)?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b)?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b)?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("div", a, b)?;
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x / y)?;
        self.push(Op::Div(a, b), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(scalar::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(scalar::softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(scalar::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(scalar::sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Base-2 logarithm; inputs must be positive.
    pub fn log2(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(scalar::log2);
        self.push(Op::Log2(a), v)
    }

    /// max(x, c) with zero gradient where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| if x > c { x } else { c });
        self.push(Op::ClampMin(a, c), v)
    }

    pub fn normal_cdf(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(scalar::std_normal_cdf);
        self.push(Op::NormalCdf(a), v)
    }

    /// Standard-normal mass of `[lo, hi]` elementwise. Computed on the
    /// tail with the smaller magnitude so the result keeps full relative
    /// precision even when both bounds sit far out; a naive Φ(hi) − Φ(lo)
    /// quantizes at the ulp of 1.0 there, which destroys log-likelihood
    /// gradients.
    pub fn normal_interval(&mut self, lo: NodeId, hi: NodeId) -> Result<NodeId> {
        self.binary_elementwise("normal_interval", lo, hi)?;
        let v = self.nodes[lo]
            .value
            .zip_map(&self.nodes[hi].value, scalar::std_normal_interval)?;
        self.push(Op::NormalInterval { lo, hi }, v)
    }

    /// `sigmoid(hi) - sigmoid(lo)` elementwise for `lo <= hi`, evaluated on
    /// the saturating side as `sigmoid(-lo) - sigmoid(-hi)` so tail masses
    /// keep relative precision.
    pub fn sigmoid_interval(&mut self, lo: NodeId, hi: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sigmoid_interval", lo, hi)?;
        let v = self.nodes[lo].value.zip_map(&self.nodes[hi].value, |l, h| {
            if l + h >= T::zero() {
                (scalar::sigmoid(-l) - scalar::sigmoid(-h)).max(T::zero())
            } else {
                (scalar::sigmoid(h) - scalar::sigmoid(l)).max(T::zero())
            }
        })?;
        self.push(Op::SigmoidInterval { lo, hi }, v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: T = self.nodes[a].value.data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.len();
        if n == 0 {
            return Err(Error::ShapeMismatch { op: "mean", detail: "empty tensor".into() });
        }
        let s: T = self.nodes[a].value.data().iter().copied().sum();
        let v = s / T::from_f64_lossy(n as f64);
        self.push(Op::Mean(a), Tensor::scalar(v))
    }

    /// Channel mixing (a 1x1 convolution over flattened positions):
    /// `w (Cout,Cin) · x (Cin,M) + b (Cout)` -> `(Cout,M)`.
    pub fn mix(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        let ok = xv.shape().len() == 2
            && wv.shape().len() == 2
            && bv.shape().len() == 1
            && wv.cols() == xv.rows()
            && bv.len() == wv.rows();
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "mix",
                detail: format!("w {:?} x {:?} b {:?}", wv.shape(), xv.shape(), bv.shape()),
            });
        }
        let (cout, cin, m) = (wv.rows(), xv.rows(), xv.cols());
        let mut out = vec![T::zero(); cout * m];
        let xd = xv.data();
        let wd = wv.data();
        let bd = bv.data();
        let run = |oc: usize, dst: &mut [T]| {
            let bias = bd[oc];
            for v in dst.iter_mut() {
                *v = bias;
            }
            for c in 0..cin {
                let wv = wd[oc * cin + c];
                let src = &xd[c * m..(c + 1) * m];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + wv * s;
                }
            }
        };
        if cout * cin * m > PAR_THRESHOLD {
            out.par_chunks_mut(m).enumerate().for_each(|(oc, dst)| run(oc, dst));
        } else {
            for (oc, dst) in out.chunks_mut(m).enumerate() {
                run(oc, dst);
            }
        }
        self.push(Op::Mix { x, w, b }, Tensor::new(vec![cout, m], out)?)
    }

    /// 3x3 convolution, stride 1, reflect padding:
    /// `x (Cin,H,W)`, `w (Cout,Cin,3,3)`, `b (Cout)` -> `(Cout,H,W)`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        let ok = xs.len() == 3
            && ws.len() == 4
            && ws[1] == xs[0]
            && ws[2] == 3
            && ws[3] == 3
            && bv.len() == ws[0]
            && xs[1] >= 2
            && xs[2] >= 2;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv3x3",
                detail: format!("x {:?} w {:?} b {:?} (spatial dims must be >= 2)", xs, ws, bv.shape()),
            });
        }
        let (cin, h, wd_) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        let pad = reflect_pad(xv.data(), cin, h, wd_);
        let (ph, pw) = (h + 2, wd_ + 2);
        let wdat = wv.data();
        let bdat = bv.data();
        let mut out = vec![T::zero(); cout * h * wd_];
        let run = |oc: usize, dst: &mut [T]| {
            let bias = bdat[oc];
            for v in dst.iter_mut() {
                *v = bias;
            }
            for ic in 0..cin {
                let plane = &pad[ic * ph * pw..(ic + 1) * ph * pw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wdat[((oc * cin + ic) * 3 + ky) * 3 + kx];
                        for y in 0..h {
                            let src = &plane[(y + ky) * pw + kx..(y + ky) * pw + kx + wd_];
                            let drow = &mut dst[y * wd_..(y + 1) * wd_];
                            for (d, &s) in drow.iter_mut().zip(src) {
                                *d = *d + wv * s;
                            }
                        }
                    }
                }
            }
        };
        if cout * cin * h * wd_ > PAR_THRESHOLD {
            out.par_chunks_mut(h * wd_).enumerate().for_each(|(oc, dst)| run(oc, dst));
        } else {
            for (oc, dst) in out.chunks_mut(h * wd_).enumerate() {
                run(oc, dst);
            }
        }
        self.push(Op::Conv3x3 { x, w, b }, Tensor::new(vec![cout, h, wd_], out)?)
    }

    /// Per-region spatial average: `x (C,H,W)` -> `(C,N)`. Columns of absent
    /// classes are zero.
    pub fn pool_regions(&mut self, x: NodeId, idx: &Rc<RegionIndex>) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let xs = xv.shape();
        if xs.len() != 3 || xs[1] != idx.height || xs[2] != idx.width {
            return Err(Error::ShapeMismatch {
                op: "pool_regions",
                detail: format!("features {:?} vs map {}x{}", xs, idx.width, idx.height),
            });
        }
        let (c, hw, n) = (xs[0], xs[1] * xs[2], idx.num_classes);
        let mut out = vec![T::zero(); c * n];
        let xd = xv.data();
        for ch in 0..c {
            let plane = &xd[ch * hw..(ch + 1) * hw];
            for (class, pixels) in idx.pixels.iter().enumerate() {
                if pixels.is_empty() {
                    continue;
                }
                let mut acc = T::zero();
                for &p in pixels {
                    acc += plane[p as usize];
                }
                out[ch * n + class] = acc / T::from_f64_lossy(pixels.len() as f64);
            }
        }
        self.push(Op::PoolRegions { x, idx: Rc::clone(idx) }, Tensor::new(vec![c, n], out)?)
    }

    /// Inverse of pooling: every pixel of class `n` receives column `n`.
    /// `x (C,N)` -> `(C,H,W)`.
    pub fn broadcast_regions(&mut self, x: NodeId, idx: &Rc<RegionIndex>) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.shape().len() != 2 || xv.cols() != idx.num_classes {
            return Err(Error::ShapeMismatch {
                op: "broadcast_regions",
                detail: format!("prior {:?} vs {} classes", xv.shape(), idx.num_classes),
            });
        }
        let (c, n) = (xv.rows(), idx.num_classes);
        let hw = idx.width * idx.height;
        let mut out = vec![T::zero(); c * hw];
        let xd = xv.data();
        for ch in 0..c {
            let dst = &mut out[ch * hw..(ch + 1) * hw];
            for class in 0..n {
                let v = xd[ch * n + class];
                for &p in &idx.pixels[class] {
                    dst[p as usize] = v;
                }
            }
        }
        self.push(
            Op::BroadcastRegions { x, idx: Rc::clone(idx) },
            Tensor::new(vec![c, idx.height, idx.width], out)?,
        )
    }

    /// Stacks `a (Ra,M)` on top of `b (Rb,M)`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let shape = vec![ta.rows() + tb.rows(), ta.cols()];
        self.push(Op::ConcatRows(a, b), Tensor::new(shape, data)?)
    }

    /// Contiguous row slice of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.shape().len() != 2 || start + len > xv.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} of {:?}", start, start + len, xv.shape()),
            });
        }
        let m = xv.cols();
        let data = xv.data()[start * m..(start + len) * m].to_vec();
        self.push(Op::SliceRows { x, start }, Tensor::new(vec![len, m], data)?)
    }

    /// Gathers the given columns of a rank-2 tensor.
    pub fn select_cols(&mut self, x: NodeId, cols: &Rc<Vec<usize>>) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.shape().len() != 2 || cols.iter().any(|&c| c >= xv.cols()) {
            return Err(Error::ShapeMismatch {
                op: "select_cols",
                detail: format!("columns {:?} of {:?}", cols, xv.shape()),
            });
        }
        let (r, n, k) = (xv.rows(), xv.cols(), cols.len());
        let mut data = Vec::with_capacity(r * k);
        for row in 0..r {
            for &c in cols.iter() {
                data.push(xv.data()[row * n + c]);
            }
        }
        self.push(Op::SelectCols { x, cols: Rc::clone(cols) }, Tensor::new(vec![r, k], data)?)
    }

    /// Scales row `r` of `x (R,M)` by `s[r]` where `s` has shape `(R,)`.
    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xv, sv) = (&self.nodes[x].value, &self.nodes[s].value);
        if xv.shape().len() != 2 || sv.shape().len() != 1 || sv.len() != xv.rows() {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                detail: format!("x {:?} s {:?}", xv.shape(), sv.shape()),
            });
        }
        let (r, m) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r * m);
        for row in 0..r {
            let f = sv.data()[row];
            for &v in &xv.data()[row * m..(row + 1) * m] {
                data.push(v * f);
            }
        }
        self.push(Op::RowScale { x, s }, Tensor::new(vec![r, m], data)?)
    }

    /// Same data, new extents; the total length must match.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let n: usize = shape.iter().product();
        if n != xv.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", xv.shape(), shape),
            });
        }
        let v = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        self.push(Op::Reshape(x), v)
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// parameter leaf bound on this graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<Grads<T>> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.nodes[loss].value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if !gout.all_finite() {
                return Err(Error::NonFinite { op: self.nodes[id].op.name() });
            }
            self.dispatch_backward(id, &gout, &mut grads)?;
            if let Op::Leaf = self.nodes[id].op {
                grads[id] = Some(gout); // leaves keep their gradient for collection
            }
        }

        let mut out = Grads::new();
        for (name, &id) in &self.bound {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn dispatch_backward(
        &self,
        id: NodeId,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, gout.clone(), self.nodes[*a].value.shape());
                accumulate(grads, *b, gout.clone(), self.nodes[*b].value.shape());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gout.clone(), self.nodes[*a].value.shape());
                accumulate(grads, *b, gout.map(|g| -g), self.nodes[*b].value.shape());
            }
            Op::Mul(a, b) => {
                let ga = gout.zip_map(&self.nodes[*b].value, |g, y| g * y)?;
                let gb = gout.zip_map(&self.nodes[*a].value, |g, x| g * x)?;
                accumulate(grads, *a, ga, self.nodes[*a].value.shape());
                accumulate(grads, *b, gb, self.nodes[*b].value.shape());
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                let ga = gout.zip_map(bv, |g, y| g / y)?;
                let av = &self.nodes[*a].value;
                let mut gb = gout.clone();
                for i in 0..gb.len() {
                    let y = bv.data()[i];
                    gb.data_mut()[i] = -gout.data()[i] * av.data()[i] / (y * y);
                }
                accumulate(grads, *a, ga, av.shape());
                accumulate(grads, *b, gb, bv.shape());
            }
            Op::AddScalar(a, _) => accumulate(grads, *a, gout.clone(), self.nodes[*a].value.shape()),
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, gout.map(|g| g * c), self.nodes[*a].value.shape());
            }
            Op::Relu(a) => {
                let xv = &self.nodes[*a].value;
                let ga = gout.zip_map(xv, |g, x| if x > T::zero() { g } else { T::zero() })?;
                accumulate(grads, *a, ga, xv.shape());
            }
            Op::Exp(a) => {
                let ga = gout.zip_map(&node.value, |g, y| g * y)?;
                accumulate(grads, *a, ga, self.nodes[*a].value.shape());
            }
            Op::Softplus(a) => {
                let xv = &self.nodes[*a].value;
                let ga = gout.zip_map(xv, |g, x| g * scalar::sigmoid(x))?;
                accumulate(grads, *a, ga, xv.shape());
            }
            Op::Tanh(a) => {
                let ga = gout.zip_map(&node.value, |g, y| g * (T::one() - y * y))?;
                accumulate(grads, *a, ga, self.nodes[*a].value.shape());
            }
            Op::Sigmoid(a) => {
                let ga = gout.zip_map(&node.value, |g, y| g * y * (T::one() - y))?;
                accumulate(grads, *a, ga, self.nodes[*a].value.shape());
            }
            Op::Square(a) => {
                let xv = &self.nodes[*a].value;
                let two = T::from_f64_lossy(2.0);
                let ga = gout.zip_map(xv, |g, x| g * two * x)?;
                accumulate(grads, *a, ga, xv.shape());
            }
            Op::Log2(a) => {
                let xv = &self.nodes[*a].value;
                let ln2 = T::from_f64_lossy(scalar::ln_2());
                let ga = gout.zip_map(xv, |g, x| g / (x * ln2))?;
                accumulate(grads, *a, ga, xv.shape());
            }
            Op::ClampMin(a, c) => {
                let xv = &self.nodes[*a].value;
                let c = *c;
                let ga = gout.zip_map(xv, |g, x| if x > c { g } else { T::zero() })?;
                accumulate(grads, *a, ga, xv.shape());
            }
            Op::NormalCdf(a) => {
                let xv = &self.nodes[*a].value;
                let ga = gout.zip_map(xv, |g, x| g * scalar::std_normal_pdf(x))?;
                accumulate(grads, *a, ga, xv.shape());
            }
            Op::NormalInterval { lo, hi } => {
                let lv = &self.nodes[*lo].value;
                let hv = &self.nodes[*hi].value;
                let glo = gout.zip_map(lv, |g, x| -g * scalar::std_normal_pdf(x))?;
                let ghi = gout.zip_map(hv, |g, x| g * scalar::std_normal_pdf(x))?;
                accumulate(grads, *lo, glo, lv.shape());
                accumulate(grads, *hi, ghi, hv.shape());
            }
            Op::SigmoidInterval { lo, hi } => {
                let deriv = |x: T| {
                    let s = scalar::sigmoid(x);
                    s * (T::one() - s)
                };
                let lv = &self.nodes[*lo].value;
                let hv = &self.nodes[*hi].value;
                let glo = gout.zip_map(lv, |g, x| -g * deriv(x))?;
                let ghi = gout.zip_map(hv, |g, x| g * deriv(x))?;
                accumulate(grads, *lo, glo, lv.shape());
                accumulate(grads, *hi, ghi, hv.shape());
            }
            Op::Sum(a) => {
                let g = gout.item();
                let shape = self.nodes[*a].value.shape();
                accumulate(grads, *a, Tensor::full(shape, g), shape);
            }
            Op::Mean(a) => {
                let shape = self.nodes[*a].value.shape();
                let n = T::from_f64_lossy(self.nodes[*a].value.len() as f64);
                accumulate(grads, *a, Tensor::full(shape, gout.item() / n), shape);
            }
            Op::Mix { x, w, b } => self.backward_mix(*x, *w, *b, gout, grads)?,
            Op::Conv3x3 { x, w, b } => self.backward_conv(*x, *w, *b, gout, grads)?,
            Op::PoolRegions { x, idx } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (c, hw, n) = (xs[0], xs[1] * xs[2], idx.num_classes);
                let mut gx = Tensor::zeros(&xs);
                for ch in 0..c {
                    let plane = &mut gx.data_mut()[ch * hw..(ch + 1) * hw];
                    for (class, pixels) in idx.pixels.iter().enumerate() {
                        if pixels.is_empty() {
                            continue;
                        }
                        let g = gout.data()[ch * n + class] / T::from_f64_lossy(pixels.len() as f64);
                        for &p in pixels {
                            plane[p as usize] += g;
                        }
                    }
                }
                accumulate(grads, *x, gx, &xs);
            }
            Op::BroadcastRegions { x, idx } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (c, n) = (xs[0], xs[1]);
                let hw = idx.width * idx.height;
                let mut gx = Tensor::zeros(&xs);
                for ch in 0..c {
                    let gplane = &gout.data()[ch * hw..(ch + 1) * hw];
                    for class in 0..n {
                        let mut acc = T::zero();
                        for &p in &idx.pixels[class] {
                            acc += gplane[p as usize];
                        }
                        gx.data_mut()[ch * n + class] = acc;
                    }
                }
                accumulate(grads, *x, gx, &xs);
            }
            Op::ConcatRows(a, b) => {
                let (ra, m) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let rb = self.nodes[*b].value.rows();
                let ga = Tensor::new(vec![ra, m], gout.data()[..ra * m].to_vec())?;
                let gb = Tensor::new(vec![rb, m], gout.data()[ra * m..].to_vec())?;
                accumulate(grads, *a, ga, &[ra, m]);
                accumulate(grads, *b, gb, &[rb, m]);
            }
            Op::SliceRows { x, start } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let m = xs[1];
                let mut gx = Tensor::zeros(&xs);
                gx.data_mut()[start * m..start * m + gout.len()].copy_from_slice(gout.data());
                accumulate(grads, *x, gx, &xs);
            }
            Op::SelectCols { x, cols } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (r, n, k) = (xs[0], xs[1], cols.len());
                let mut gx = Tensor::zeros(&xs);
                for row in 0..r {
                    for (j, &c) in cols.iter().enumerate() {
                        gx.data_mut()[row * n + c] += gout.data()[row * k + j];
                    }
                }
                accumulate(grads, *x, gx, &xs);
            }
            Op::Reshape(x) => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let g = Tensor::new(xs.clone(), gout.data().to_vec())?;
                accumulate(grads, *x, g, &xs);
            }
            Op::RowScale { x, s } => {
                let xv = &self.nodes[*x].value;
                let sv = &self.nodes[*s].value;
                let (r, m) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[r, m]);
                let mut gs = Tensor::zeros(&[r]);
                for row in 0..r {
                    let f = sv.data()[row];
                    let mut acc = T::zero();
                    for i in 0..m {
                        let g = gout.data()[row * m + i];
                        gx.data_mut()[row * m + i] = g * f;
                        acc += g * xv.data()[row * m + i];
                    }
                    gs.data_mut()[row] = acc;
                }
                accumulate(grads, *x, gx, &[r, m]);
                accumulate(grads, *s, gs, &[r]);
            }
        }
        Ok(())
    }

    fn backward_mix(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let (cout, cin, m) = (wv.rows(), xv.rows(), xv.cols());
        let (gd, xd, wd) = (gout.data(), xv.data(), wv.data());

        let mut gx = vec![T::zero(); cin * m];
        let run_gx = |c: usize, dst: &mut [T]| {
            for oc in 0..cout {
                let wv = wd[oc * cin + c];
                let src = &gd[oc * m..(oc + 1) * m];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + wv * s;
                }
            }
        };
        if cout * cin * m > PAR_THRESHOLD {
            gx.par_chunks_mut(m).enumerate().for_each(|(c, dst)| run_gx(c, dst));
        } else {
            for (c, dst) in gx.chunks_mut(m).enumerate() {
                run_gx(c, dst);
            }
        }

        let mut gw = vec![T::zero(); cout * cin];
        let run_gw = |oc: usize, dst: &mut [T]| {
            let grow = &gd[oc * m..(oc + 1) * m];
            for (c, d) in dst.iter_mut().enumerate() {
                let xrow = &xd[c * m..(c + 1) * m];
                let mut acc = T::zero();
                for (&g, &xx) in grow.iter().zip(xrow) {
                    acc += g * xx;
                }
                *d = acc;
            }
        };
        if cout * cin * m > PAR_THRESHOLD {
            gw.par_chunks_mut(cin).enumerate().for_each(|(oc, dst)| run_gw(oc, dst));
        } else {
            for (oc, dst) in gw.chunks_mut(cin).enumerate() {
                run_gw(oc, dst);
            }
        }

        let mut gb = vec![T::zero(); cout];
        for oc in 0..cout {
            let mut acc = T::zero();
            for &g in &gd[oc * m..(oc + 1) * m] {
                acc += g;
            }
            gb[oc] = acc;
        }

        accumulate(grads, x, Tensor::new(vec![cin, m], gx)?, &[cin, m]);
        accumulate(grads, w, Tensor::new(vec![cout, cin], gw)?, &[cout, cin]);
        accumulate(grads, b, Tensor::new(vec![cout], gb)?, &[cout]);
        Ok(())
    }

    fn backward_conv(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let xs = xv.shape();
        let (cin, h, wd_) = (xs[0], xs[1], xs[2]);
        let cout = wv.shape()[0];
        let (ph, pw) = (h + 2, wd_ + 2);
        let pad = reflect_pad(xv.data(), cin, h, wd_);
        let (gd, wdat) = (gout.data(), wv.data());

        // d_input via the padded plane, then fold the border back.
        let mut gpad = vec![T::zero(); cin * ph * pw];
        let run_gp = |ic: usize, dst: &mut [T]| {
            for oc in 0..cout {
                let gplane = &gd[oc * h * wd_..(oc + 1) * h * wd_];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wdat[((oc * cin + ic) * 3 + ky) * 3 + kx];
                        for y in 0..h {
                            let grow = &gplane[y * wd_..(y + 1) * wd_];
                            let drow = &mut dst[(y + ky) * pw + kx..(y + ky) * pw + kx + wd_];
                            for (d, &g) in drow.iter_mut().zip(grow) {
                                *d = *d + wv * g;
                            }
                        }
                    }
                }
            }
        };
        if cout * cin * h * wd_ > PAR_THRESHOLD {
            gpad.par_chunks_mut(ph * pw).enumerate().for_each(|(ic, dst)| run_gp(ic, dst));
        } else {
            for (ic, dst) in gpad.chunks_mut(ph * pw).enumerate() {
                run_gp(ic, dst);
            }
        }
        let mut gx = Tensor::zeros(xs);
        for ic in 0..cin {
            let src = &gpad[ic * ph * pw..(ic + 1) * ph * pw];
            let dst = &mut gx.data_mut()[ic * h * wd_..(ic + 1) * h * wd_];
            for py in 0..ph {
                let y = reflect_index(py as isize - 1, h);
                for px in 0..pw {
                    let xcol = reflect_index(px as isize - 1, wd_);
                    dst[y * wd_ + xcol] += src[py * pw + px];
                }
            }
        }

        // d_weights
        let mut gw = vec![T::zero(); cout * cin * 9];
        let run_gw = |oc: usize, dst: &mut [T]| {
            let gplane = &gd[oc * h * wd_..(oc + 1) * h * wd_];
            for ic in 0..cin {
                let plane = &pad[ic * ph * pw..(ic + 1) * ph * pw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = T::zero();
                        for y in 0..h {
                            let grow = &gplane[y * wd_..(y + 1) * wd_];
                            let srow = &plane[(y + ky) * pw + kx..(y + ky) * pw + kx + wd_];
                            for (&g, &s) in grow.iter().zip(srow) {
                                acc += g * s;
                            }
                        }
                        dst[(ic * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        };
        if cout * cin * h * wd_ > PAR_THRESHOLD {
            gw.par_chunks_mut(cin * 9).enumerate().for_each(|(oc, dst)| run_gw(oc, dst));
        } else {
            for (oc, dst) in gw.chunks_mut(cin * 9).enumerate() {
                run_gw(oc, dst);
            }
        }

        let mut gb = vec![T::zero(); cout];
        for oc in 0..cout {
            let mut acc = T::zero();
            for &g in &gd[oc * h * wd_..(oc + 1) * h * wd_] {
                acc += g;
            }
            gb[oc] = acc;
        }

        accumulate(grads, x, gx, xs);
        accumulate(grads, w, Tensor::new(vec![cout, cin, 3, 3], gw)?, &[cout, cin, 3, 3]);
        accumulate(grads, b, Tensor::new(vec![cout], gb)?, &[cout]);
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>, shape: &[usize]) {
    debug_assert_eq!(g.shape(), shape);
    match &mut grads[id] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 2);
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

fn reflect_pad<T: Real>(data: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ph * pw..(ch + 1) * ph * pw];
        for py in 0..ph {
            let y = reflect_index(py as isize - 1, h);
            for px in 0..pw {
                let x = reflect_index(px as isize - 1, w);
                dst[py * pw + px] = src[y * w + x];
            }
        }
    }
    out
}

/// Builds a graph with the given closure, evaluates the scalar loss it
/// returns, and runs the reverse pass. Parameters never touched by the
/// closure receive zero gradients so optimizer steps always see a complete
/// gradient set.
pub fn forward_backward<T: Real, F>(params: &ParamStore<T>, build: F) -> Result<(T, Grads<T>)>
where
    F: FnOnce(&mut Graph<'_, T>) -> Result<NodeId>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    let loss_value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    for (name, tensor) in params.iter() {
        if grads.get(name).is_none() {
            grads.insert(name.clone(), Tensor::zeros(tensor.shape()));
        }
    }
    Ok((loss_value, grads))
}
