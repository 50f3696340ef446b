//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive in execution order. Each primitive is a
//! whole-tensor operation (convolution, layer norm, the fused selective scan,
//! ...) with a hand-written adjoint, so a network forward pass records a few
//! hundred nodes rather than millions of scalar ones.
//!
//! ```
//! use deflare_core::autodiff::Graph;
//! use deflare_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ssm::{self, ScanDims, ScanInputs};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Sigmoid,
    Softplus,
    Silu,
    /// Clamp to `[0, 1]`; gradient 1 on the closed interval, 0 outside.
    Clip01,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    Dense,
    Depthwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding; output extent `ceil(n / stride)`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub mode: ConvMode,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(mode: ConvMode) -> Self {
        ConvSpec {
            mode,
            stride: 1,
            padding: Padding::Same,
        }
    }
}

/// Geometry of one 2D convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(x: &[usize], wshape: &[usize], spec: ConvSpec) -> Result<Self> {
        if x.len() != 3 {
            return Err(Error::invalid(
                "conv2d",
                format!("expected [H, W, C] input, got {x:?}"),
            ));
        }
        let (h, w, cin) = (x[0], x[1], x[2]);
        let (kh, kw, cout) = match (spec.mode, wshape) {
            (ConvMode::Dense, &[kh, kw, ci, co]) if ci == cin => (kh, kw, co),
            (ConvMode::Depthwise, &[kh, kw, c]) if c == cin => (kh, kw, c),
            _ => return Err(Error::shape("conv2d", x, wshape)),
        };
        if spec.stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        let s = spec.stride;
        let (oh, ow, pad_top, pad_left) = match spec.padding {
            Padding::Same => {
                let oh = h.div_ceil(s);
                let ow = w.div_ceil(s);
                let ph = ((oh.max(1) - 1) * s + kh).saturating_sub(h);
                let pw = ((ow.max(1) - 1) * s + kw).saturating_sub(w);
                if kh > h + ph || kw > w + pw {
                    return Err(Error::shape("conv2d", x, wshape));
                }
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape("conv2d", x, wshape));
                }
                ((h - kh) / s + 1, (w - kw) / s + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            stride: s,
            pad_top,
            pad_left,
        })
    }

    /// Input coordinate for output `o` and tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k).checked_sub(pad)?;
        (i < extent).then_some(i)
    }
}

const ABSENT: usize = usize::MAX;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        mode: ConvMode,
    },
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    Scan {
        inputs: [Var; 6],
        dims: ScanDims,
        states: Vec<f64>,
    },
    Upsample2(Var),
    BlurDown(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in execution order, which is
/// therefore a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar_like() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar_like() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

#[inline]
fn bget(t: &Tensor, i: usize) -> f64 {
    if t.is_scalar_like() {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Sums `g` down to the shape of `like` (identity, or to a scalar).
fn reduce_to(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        Tensor::from_parts(like.shape().to_vec(), vec![g.sum()])
    }
}

const BLUR_TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[inline]
fn clamp_tap(o: usize, t: usize, extent: usize) -> usize {
    (2 * o + t).saturating_sub(2).min(extent - 1)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|v| !self.value(*v).all_finite()),
            "primitive produced non-finite values from finite inputs"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = binary_shape(op, ta, tb)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(bget(ta, i), bget(tb, i))).collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        let out = self.value(a).map(|v| v + shift);
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Sigmoid => ssm::sigmoid,
            Unary::Softplus => ssm::softplus,
            Unary::Silu => |v| v * ssm::sigmoid(v),
            Unary::Clip01 => |v| v.clamp(0.0, 1.0),
            Unary::Abs => f64::abs,
        };
        let out = self.value(a).map(f);
        self.push(out, Op::Unary(a, kind), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn clip01(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Clip01)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_last(start, len)?;
        Ok(self.push(out, Op::SliceLast { x: a, start }, &[a]))
    }

    /// Normalizes over the trailing axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!(
                "layer norm eps must be positive, got {eps}"
            )));
        }
        let tx = self.value(x);
        let c = tx.last_dim();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / c.max(1);
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Affine map over the trailing axis: `x [.., cin] @ w [cin, cout] + b [cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.last_dim() != tw.shape()[0] {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let (cin, cout) = (tw.shape()[0], tw.shape()[1]);
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::shape("linear", tw.shape(), self.value(b).shape()));
            }
        }
        let rows = tx.numel() / cin.max(1);
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = b {
            let tb = self.value(b).data();
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(tb);
            }
        }
        let (xd, wd) = (tx.data(), tw.data());
        for r in 0..rows {
            let o = &mut out[r * cout..(r + 1) * cout];
            for (i, &xi) in xd[r * cin..(r + 1) * cin].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (oj, wj) in o.iter_mut().zip(&wd[i * cout..(i + 1) * cout]) {
                    *oj += xi * wj;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        if shape.is_empty() {
            shape.push(cout);
        } else {
            *shape.last_mut().unwrap() = cout;
        }
        let out = Tensor::from_parts(shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// 2D convolution over an `[H, W, C]` map with weights `[kh, kw, cin, cout]`
    /// (dense) or `[kh, kw, c]` (depthwise).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let g = ConvGeom::new(tx.shape(), tw.shape(), spec)?;
        if let Some(b) = b {
            if self.value(b).numel() != g.cout {
                return Err(Error::shape("conv2d", tw.shape(), self.value(b).shape()));
            }
        }
        let mut out = vec![0.0; g.oh * g.ow * g.cout];
        if let Some(b) = b {
            let tb = self.value(b).data();
            for p in 0..g.oh * g.ow {
                out[p * g.cout..(p + 1) * g.cout].copy_from_slice(tb);
            }
        }
        let (xd, wd) = (tx.data(), tw.data());
        for oy in 0..g.oh {
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else {
                    continue;
                };
                for ox in 0..g.ow {
                    let o = &mut out[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else {
                            continue;
                        };
                        let xin = &xd[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                        match spec.mode {
                            ConvMode::Dense => {
                                let tap = (ky * g.kw + kx) * g.cin * g.cout;
                                for (ci, &xv) in xin.iter().enumerate() {
                                    let wr = &wd[tap + ci * g.cout..tap + (ci + 1) * g.cout];
                                    for (oj, wj) in o.iter_mut().zip(wr) {
                                        *oj += xv * wj;
                                    }
                                }
                            }
                            ConvMode::Depthwise => {
                                let wr =
                                    &wd[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                                for ((oj, xv), wj) in o.iter_mut().zip(xin).zip(wr) {
                                    *oj += xv * wj;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![g.oh, g.ow, g.cout], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                geom: g,
                mode: spec.mode,
            },
            &inputs,
        ))
    }

    /// Row gather over the trailing-axis rows of `x`. Output row `r` copies
    /// input row `index[r]`, or is zero when `index[r]` is `None`.
    pub fn gather_rows(
        &mut self,
        x: Var,
        index: Rc<Vec<usize>>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let rows = tx.numel() / c.max(1);
        if out_shape.last().copied().unwrap_or(1) != c
            || out_shape.iter().product::<usize>() != index.len() * c
        {
            return Err(Error::shape("gather_rows", tx.shape(), out_shape));
        }
        let mut out = vec![0.0; index.len() * c];
        for (r, &src) in index.iter().enumerate() {
            if src == ABSENT {
                continue;
            }
            if src >= rows {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("row {src} out of range for {rows} rows"),
                ));
            }
            out[r * c..(r + 1) * c].copy_from_slice(&tx.data()[src * c..(src + 1) * c]);
        }
        let out = Tensor::from_parts(out_shape.to_vec(), out);
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// Fused selective scan over `seqs` independent sequences of length `len`.
    ///
    /// `x`, `delta_raw`: `[seqs * len, channels]`; `b`, `c`: `[seqs * len, state]`;
    /// `a_log`: `[channels, state]`; `d`: `[channels]`. Step sizes are
    /// `softplus(delta_raw)`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta_raw: Var,
        b: Var,
        c: Var,
        a_log: Var,
        d: Var,
        seqs: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (ta, td) = (self.value(a_log), self.value(d));
        if tx.rank() != 2
            || ta.rank() != 2
            || ta.shape()[0] != tx.shape()[1]
            || td.numel() != tx.shape()[1]
        {
            return Err(Error::shape("selective_scan", tx.shape(), ta.shape()));
        }
        let (rows, channels, state) = (tx.shape()[0], tx.shape()[1], ta.shape()[1]);
        if seqs == 0 || rows % seqs != 0 {
            return Err(Error::invalid(
                "selective_scan",
                format!("{rows} rows do not split into {seqs} sequences"),
            ));
        }
        if self.value(delta_raw).shape() != tx.shape() {
            return Err(Error::shape(
                "selective_scan",
                tx.shape(),
                self.value(delta_raw).shape(),
            ));
        }
        for v in [b, c] {
            if self.value(v).shape() != [rows, state] {
                return Err(Error::shape(
                    "selective_scan",
                    &[rows, state],
                    self.value(v).shape(),
                ));
            }
        }
        let dims = ScanDims {
            seqs,
            len: rows / seqs,
            channels,
            state,
        };
        let inputs = [x, delta_raw, b, c, a_log, d];
        let keep = inputs.iter().any(|v| self.requires_grad(*v));
        let (y, states) = ssm::selective_forward(dims, self.scan_inputs(&inputs), keep);
        let out = Tensor::from_parts(vec![rows, channels], y);
        Ok(self.push(
            out,
            Op::Scan {
                inputs,
                dims,
                states,
            },
            &inputs,
        ))
    }

    fn scan_inputs(&self, v: &[Var; 6]) -> ScanInputs<'_> {
        ScanInputs {
            x: self.value(v[0]).data(),
            delta_raw: self.value(v[1]).data(),
            b: self.value(v[2]).data(),
            c: self.value(v[3]).data(),
            a_log: self.value(v[4]).data(),
            d: self.value(v[5]).data(),
        }
    }

    /// Nearest-neighbour 2x upsampling of an `[H, W, C]` map.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[h, w, c] = tx.shape() else {
            return Err(Error::invalid(
                "upsample2",
                format!("expected [H, W, C], got {:?}", tx.shape()),
            ));
        };
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                out[(y * 2 * w + xx) * c..(y * 2 * w + xx + 1) * c]
                    .copy_from_slice(&tx.data()[src..src + c]);
            }
        }
        let out = Tensor::from_parts(vec![2 * h, 2 * w, c], out);
        Ok(self.push(out, Op::Upsample2(x), &[x]))
    }

    /// One Gaussian-pyramid reduction: 5-tap binomial blur with edge clamping,
    /// then keep every second row and column. Constants are preserved exactly.
    pub fn blur_down(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[h, w, c] = tx.shape() else {
            return Err(Error::invalid(
                "blur_down",
                format!("expected [H, W, C], got {:?}", tx.shape()),
            ));
        };
        if h == 0 || w == 0 {
            return Err(Error::invalid("blur_down", "empty image"));
        }
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (ty, ky) in BLUR_TAPS.iter().enumerate() {
                    let iy = clamp_tap(oy, ty, h);
                    for (tx_, kx) in BLUR_TAPS.iter().enumerate() {
                        let ix = clamp_tap(ox, tx_, w);
                        let k = ky * kx;
                        for (oj, v) in o
                            .iter_mut()
                            .zip(&tx.data()[(iy * w + ix) * c..(iy * w + ix + 1) * c])
                        {
                            *oj += k * v;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![oh, ow, c], out);
        Ok(self.push(out, Op::BlurDown(x), &[x]))
    }

    /// Reverse pass from a scalar `loss`. Every `requires_grad` node reachable
    /// from the loss receives a gradient of its own shape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, self.value(*a)));
                acc(*b, reduce_to(g, self.value(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, self.value(*a)));
                acc(*b, reduce_to(&g.map(|v| -v), self.value(*b)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = Tensor::from_parts(
                        g.shape().to_vec(),
                        (0..g.numel()).map(|i| g.data()[i] * bget(tb, i)).collect(),
                    );
                    acc(*a, reduce_to(&ga, ta));
                }
                if needs(*b) {
                    let gb = Tensor::from_parts(
                        g.shape().to_vec(),
                        (0..g.numel()).map(|i| g.data()[i] * bget(ta, i)).collect(),
                    );
                    acc(*b, reduce_to(&gb, tb));
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Unary(a, kind) => {
                let (x, y) = (self.value(*a), &node.value);
                let d: Vec<f64> = (0..g.numel())
                    .map(|i| {
                        let (xv, yv, gv) = (x.data()[i], y.data()[i], g.data()[i]);
                        gv * match kind {
                            Unary::Exp => yv,
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Softplus => ssm::sigmoid(xv),
                            Unary::Silu => {
                                let s = ssm::sigmoid(xv);
                                s * (1.0 + xv * (1.0 - s))
                            }
                            Unary::Clip01 => {
                                if (0.0..=1.0).contains(&xv) {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Abs => {
                                if xv > 0.0 {
                                    1.0
                                } else if xv < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.item())),
            Op::Mean(a) => {
                let t = self.value(*a);
                acc(
                    *a,
                    Tensor::full(t.shape(), g.item() / t.numel().max(1) as f64),
                );
            }
            Op::Reshape(a) => acc(
                *a,
                Tensor::from_parts(self.value(*a).shape().to_vec(), g.data().to_vec()),
            ),
            Op::SliceLast { x, start } => {
                let tx = self.value(*x);
                let (c, len) = (tx.last_dim(), g.last_dim());
                let mut d = vec![0.0; tx.numel()];
                for r in 0..tx.numel() / c.max(1) {
                    d[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let c = tg.numel();
                let rows = rstd.len();
                let gd = g.data();
                if needs(*x) {
                    let mut gx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let gh = gd[r * c + j] * tg.data()[j];
                            m1 += gh;
                            m2 += gh * xhat[r * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gh = gd[r * c + j] * tg.data()[j];
                            gx[r * c + j] = rstd[r] * (gh - m1 - xhat[r * c + j] * m2);
                        }
                    }
                    acc(*x, Tensor::from_parts(self.value(*x).shape().to_vec(), gx));
                }
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += gd[r * c + j] * xhat[r * c + j];
                        gb[j] += gd[r * c + j];
                    }
                }
                acc(*gamma, Tensor::from_parts(tg.shape().to_vec(), gg));
                acc(
                    *beta,
                    Tensor::from_parts(self.value(*beta).shape().to_vec(), gb),
                );
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (cin, cout) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / cin.max(1);
                let gd = g.data();
                if needs(*x) {
                    let mut gx = vec![0.0; tx.numel()];
                    for r in 0..rows {
                        let gr = &gd[r * cout..(r + 1) * cout];
                        for i in 0..cin {
                            gx[r * cin + i] = gr
                                .iter()
                                .zip(&tw.data()[i * cout..(i + 1) * cout])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    acc(*x, Tensor::from_parts(tx.shape().to_vec(), gx));
                }
                if needs(*w) {
                    let mut gw = vec![0.0; cin * cout];
                    for r in 0..rows {
                        let gr = &gd[r * cout..(r + 1) * cout];
                        for (i, &xi) in tx.data()[r * cin..(r + 1) * cin].iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            for (gwj, gj) in gw[i * cout..(i + 1) * cout].iter_mut().zip(gr) {
                                *gwj += xi * gj;
                            }
                        }
                    }
                    acc(*w, Tensor::from_parts(tw.shape().to_vec(), gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; cout];
                    for r in 0..rows {
                        for (a, v) in gb.iter_mut().zip(&gd[r * cout..(r + 1) * cout]) {
                            *a += v;
                        }
                    }
                    acc(*b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
                }
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                mode,
            } => {
                let (gx, gw) = self.conv_backward(*x, *w, geom, *mode, g, needs(*x), needs(*w));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; geom.cout];
                    for p in 0..geom.oh * geom.ow {
                        for (a, v) in gb
                            .iter_mut()
                            .zip(&g.data()[p * geom.cout..(p + 1) * geom.cout])
                        {
                            *a += v;
                        }
                    }
                    acc(*b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
                }
            }
            Op::Gather { x, index } => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let mut d = vec![0.0; tx.numel()];
                for (r, &src) in index.iter().enumerate() {
                    if src == ABSENT {
                        continue;
                    }
                    for (a, v) in d[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g.data()[r * c..(r + 1) * c])
                    {
                        *a += v;
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::Scan {
                inputs,
                dims,
                states,
            } => {
                let sg = ssm::selective_backward(*dims, self.scan_inputs(inputs), states, g.data());
                let parts = [sg.x, sg.delta_raw, sg.b, sg.c, sg.a_log, sg.d];
                for (v, data) in inputs.iter().zip(parts) {
                    acc(
                        *v,
                        Tensor::from_parts(self.value(*v).shape().to_vec(), data),
                    );
                }
            }
            Op::Upsample2(x) => {
                let tx = self.value(*x);
                let (h, w, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let mut d = vec![0.0; tx.numel()];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let dst = ((y / 2) * w + xx / 2) * c;
                        let src = (y * 2 * w + xx) * c;
                        for j in 0..c {
                            d[dst + j] += g.data()[src + j];
                        }
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::BlurDown(x) => {
                let tx = self.value(*x);
                let (h, w, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (oh, ow) = (g.shape()[0], g.shape()[1]);
                let mut d = vec![0.0; tx.numel()];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = &g.data()[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        for (ty, ky) in BLUR_TAPS.iter().enumerate() {
                            let iy = clamp_tap(oy, ty, h);
                            for (tx_, kx) in BLUR_TAPS.iter().enumerate() {
                                let ix = clamp_tap(ox, tx_, w);
                                let k = ky * kx;
                                for (a, v) in d[(iy * w + ix) * c..(iy * w + ix + 1) * c]
                                    .iter_mut()
                                    .zip(go)
                                {
                                    *a += k * v;
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        geom: &ConvGeom,
        mode: ConvMode,
        g: &Tensor,
        want_x: bool,
        want_w: bool,
    ) -> (Option<Tensor>, Option<Tensor>) {
        let gm = geom;
        let (tx, tw) = (self.value(x), self.value(w));
        let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
        let mut gx = if want_x {
            vec![0.0; xd.len()]
        } else {
            Vec::new()
        };
        let mut gw = if want_w {
            vec![0.0; wd.len()]
        } else {
            Vec::new()
        };
        for oy in 0..gm.oh {
            for ky in 0..gm.kh {
                let Some(iy) = gm.src(oy, ky, gm.pad_top, gm.h) else {
                    continue;
                };
                for ox in 0..gm.ow {
                    let go = &gd[(oy * gm.ow + ox) * gm.cout..(oy * gm.ow + ox + 1) * gm.cout];
                    for kx in 0..gm.kw {
                        let Some(ix) = gm.src(ox, kx, gm.pad_left, gm.w) else {
                            continue;
                        };
                        let base = (iy * gm.w + ix) * gm.cin;
                        match mode {
                            ConvMode::Dense => {
                                let tap = (ky * gm.kw + kx) * gm.cin * gm.cout;
                                for ci in 0..gm.cin {
                                    let wr = tap + ci * gm.cout..tap + (ci + 1) * gm.cout;
                                    if want_x {
                                        gx[base + ci] += go
                                            .iter()
                                            .zip(&wd[wr.clone()])
                                            .map(|(a, b)| a * b)
                                            .sum::<f64>();
                                    }
                                    if want_w {
                                        let xv = xd[base + ci];
                                        for (a, v) in gw[wr].iter_mut().zip(go) {
                                            *a += xv * v;
                                        }
                                    }
                                }
                            }
                            ConvMode::Depthwise => {
                                let tap = (ky * gm.kw + kx) * gm.cin;
                                for ci in 0..gm.cin {
                                    if want_x {
                                        gx[base + ci] += go[ci] * wd[tap + ci];
                                    }
                                    if want_w {
                                        gw[tap + ci] += go[ci] * xd[base + ci];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            want_x.then(|| Tensor::from_parts(tx.shape().to_vec(), gx)),
            want_w.then(|| Tensor::from_parts(tw.shape().to_vec(), gw)),
        )
    }
}

/// Index value used by [`Graph::gather_rows`] for a zero (padding) row.
pub const PAD_ROW: usize = ABSENT;

/// `(f(x + step) - f(x - step)) / (2 step)`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<f64> {
    let hi = f(step)?;
    let lo = f(-step)?;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::Evaluation(
            "function is not finite at a perturbed point".into(),
        ));
    }
    Ok((hi - lo) / (2.0 * step))
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function built on a [`Graph`].
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Config(format!(
            "finite-difference step must lie in (0, 1e-2], got {step}"
        )));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, false);
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(val.item())
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Evaluation("function value is not finite".into()));
    }
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let numeric = central_difference(
            |h| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                eval(p)
            },
            step,
        )?;
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
