//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends one node holding its output value and enough
//! context to push gradients back to its inputs. `backward` walks the nodes
//! in exact reverse order of recording and adds into the persistent gradient
//! of each leaf that requires one.

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Epsilon added to each norm in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Receives a gradient contribution for a variable through an accumulate callback.
type GradSink<'a, F> = dyn FnMut(Var, &mut dyn FnMut(&mut [F])) + 'a;

struct ConvCtx<F> {
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    geom: ConvGeom,
    cols: Vec<F>,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Per-axis bilinear taps: (low index, high index, weight of high).
struct ResizePlan {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: F,
    },
    SubScalar {
        x: Var,
        s: Var,
    },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d(Box<ConvCtx<F>>),
    Bilinear {
        x: Var,
        plan: Box<ResizePlan>,
    },
    MaskedSum {
        x: Var,
        mask: Vec<F>,
    },
    Cosine {
        x: Var,
        p: Var,
    },
    Sigmoid {
        x: Var,
        kappa: F,
    },
    Bce {
        pred: Var,
        target: Vec<F>,
        w_fg: F,
        w_bg: F,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::SubScalar { x, s } => self.rg(*x) || self.rg(*s),
            Op::Cosine { x, p } => self.rg(*x) || self.rg(*p),
            Op::Conv2d(c) => self.rg(c.input) || self.rg(c.kernel) || c.bias.is_some_and(|b| self.rg(b)),
            Op::Affine { x, .. }
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Bilinear { x, .. }
            | Op::MaskedSum { x, .. }
            | Op::Sigmoid { x, .. }
            | Op::Bce { pred: x, .. } => self.rg(*x),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "param")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Copy of `v` that no gradient flows through.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads[v.0].as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Number of trainable leaves recorded so far.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .count()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>, name: &'static str) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (F::lit(scale), F::lit(shift));
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| s * e + t).collect())?;
        self.push(out, Op::Affine { x, scale: s }, "affine")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// Subtracts the single-element tensor `s` from every element of `x`.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("sub_scalar: {:?} is not a scalar", self.shape(s))));
        }
        let sv = self.value(s).item();
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| e - sv).collect())?;
        self.push(out, Op::SubScalar { x, s }, "sub_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| e.max(F::zero())).collect())?;
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(F::lit(total)), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total: f64 = v.data().iter().map(|e| e.as_f64()).sum();
        let out = Tensor::scalar(F::lit(total / v.len() as f64));
        self.push(out, Op::Mean(x), "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Cross-correlation of `input` [N, Cin, H, W] with `kernel` [Cout, Cin, kh, kw],
    /// zero padding `pad`, optional per-channel `bias` [Cout].
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d: input {is:?}, kernel {ks:?}, stride {stride}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} for {} outputs",
                    self.shape(b),
                    ks[0]
                )));
            }
        }
        let (hp, wp) = (is[2] + 2 * pad, is[3] + 2 * pad);
        if hp < ks[2] || wp < ks[3] {
            return Err(Error::Shape(format!(
                "conv2d: kernel {ks:?} larger than padded input {is:?}"
            )));
        }
        let geom = ConvGeom {
            n: is[0],
            cin: is[1],
            h: is[2],
            w: is[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            ho: (hp - ks[2]) / stride + 1,
            wo: (wp - ks[3]) / stride + 1,
        };
        let (ckk, plane) = (geom.ckk(), geom.out_plane());
        let mut cols = vec![F::zero(); geom.n * ckk * plane];
        let mut out = vec![F::zero(); geom.n * geom.cout * plane];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for n in 0..geom.n {
                let xn = &x[n * geom.cin * geom.h * geom.w..(n + 1) * geom.cin * geom.h * geom.w];
                let cn = &mut cols[n * ckk * plane..(n + 1) * ckk * plane];
                im2col(xn, &geom, stride, pad, cn);
                let on = &mut out[n * geom.cout * plane..(n + 1) * geom.cout * plane];
                F::gemm(geom.cout, ckk, plane, k, false, cn, false, F::zero(), on);
            }
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = *o + bv[(i / plane) % geom.cout];
                }
            }
        }
        let value = Tensor::new(&[geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let ctx = ConvCtx {
            input,
            kernel,
            bias,
            stride,
            pad,
            geom,
            cols,
        };
        self.push(value, Op::Conv2d(Box::new(ctx)), "conv2d")
    }

    /// Bilinear resize of the last two axes, half-pixel centers
    /// (`src = (i + 0.5) * in / out - 0.5`, clamped to the valid range).
    pub fn bilinear_resize(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || target.0 == 0 || target.1 == 0 {
            return Err(Error::Shape(format!("bilinear_resize: {shape:?} to {target:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let plan = ResizePlan {
            in_hw: (h, w),
            out_hw: target,
            rows: axis_taps(h, target.0),
            cols: axis_taps(w, target.1),
        };
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * target.0 * target.1);
        for p in 0..planes {
            let img = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1, ly) in &plan.rows {
                for &(x0, x1, lx) in &plan.cols {
                    let top = img[y0 * w + x0].as_f64() * (1.0 - lx) + img[y0 * w + x1].as_f64() * lx;
                    let bot = img[y1 * w + x0].as_f64() * (1.0 - lx) + img[y1 * w + x1].as_f64() * lx;
                    out.push(F::lit(top * (1.0 - ly) + bot * ly));
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = target.0;
        out_shape[r - 1] = target.1;
        let value = Tensor::new(&out_shape, out)?;
        self.push(
            value,
            Op::Bilinear {
                x,
                plan: Box::new(plan),
            },
            "bilinear_resize",
        )
    }

    /// Sum of feature vectors over masked positions: [d, H, W] x mask[H*W] -> [d].
    pub fn masked_sum(&mut self, x: Var, mask: &[u8]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] * shape[2] != mask.len() {
            return Err(Error::Shape(format!(
                "masked_sum: features {shape:?}, mask {}",
                mask.len()
            )));
        }
        let plane = mask.len();
        let v = self.value(x).data();
        let out: Vec<F> = (0..shape[0])
            .map(|c| {
                let s: f64 = v[c * plane..(c + 1) * plane]
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m != 0)
                    .map(|(e, _)| e.as_f64())
                    .sum();
                F::lit(s)
            })
            .collect();
        let mask = mask
            .iter()
            .map(|&m| if m != 0 { F::one() } else { F::zero() })
            .collect();
        let value = Tensor::new(&[shape[0]], out)?;
        self.push(value, Op::MaskedSum { x, mask }, "masked_sum")
    }

    /// Per-position cosine between feature vectors of `x` [d, h, w] and `p` [d].
    pub fn cosine_similarity_map(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xs, ps) = (self.shape(x).to_vec(), self.shape(p).to_vec());
        if xs.len() != 3 || ps != [xs[0]] || xs[0] == 0 {
            return Err(Error::Shape(format!("cosine: features {xs:?}, prototype {ps:?}")));
        }
        let pv: Vec<f64> = self.value(p).data().iter().map(|e| e.as_f64()).collect();
        let pn = pv.iter().map(|e| e * e).sum::<f64>().sqrt();
        if pn == 0.0 {
            return Err(Error::ZeroPrototype);
        }
        let (d, plane) = (xs[0], xs[1] * xs[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(plane);
        for j in 0..plane {
            let (mut dot, mut nn) = (0.0, 0.0);
            for c in 0..d {
                let f = xv[c * plane + j].as_f64();
                dot += f * pv[c];
                nn += f * f;
            }
            out.push(F::lit(dot / ((nn.sqrt() + COSINE_EPS) * (pn + COSINE_EPS))));
        }
        let value = Tensor::new(&xs[1..], out)?;
        self.push(value, Op::Cosine { x, p }, "cosine_similarity_map")
    }

    /// Logistic function with steepness: `1 / (1 + exp(-kappa * x))`.
    pub fn sigmoid_kappa(&mut self, x: Var, kappa: f64) -> Result<Var> {
        if !(kappa > 0.0) {
            return Err(Error::Invalid(format!("kappa must be > 0, got {kappa}")));
        }
        let v = self.value(x);
        let out = Tensor::new(
            v.shape(),
            v.data().iter().map(|&e| F::lit(logistic(kappa * e.as_f64()))).collect(),
        )?;
        self.push(
            out,
            Op::Sigmoid {
                x,
                kappa: F::lit(kappa),
            },
            "sigmoid_kappa",
        )
    }

    /// Class-weighted binary cross-entropy of foreground probabilities
    /// against a binary target, averaged over all pixels.
    pub fn weighted_bce(&mut self, pred: Var, target: &[u8], w_fg: f64, w_bg: f64) -> Result<Var> {
        let v = self.value(pred);
        if v.len() != target.len() {
            return Err(Error::Shape(format!(
                "weighted_bce: prediction {:?} vs {} targets",
                v.shape(),
                target.len()
            )));
        }
        let n = target.len() as f64;
        let mut total = 0.0;
        for (&p, &y) in v.data().iter().zip(target) {
            let q = p.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total += if y != 0 { w_fg * q.ln() } else { w_bg * (1.0 - q).ln() };
        }
        let value = Tensor::scalar(F::lit(-total / n));
        let target = target
            .iter()
            .map(|&t| if t != 0 { F::one() } else { F::zero() })
            .collect();
        self.push(
            value,
            Op::Bce {
                pred,
                target,
                w_fg: F::lit(w_fg),
                w_bg: F::lit(w_bg),
            },
            "weighted_bce",
        )
    }

    /// Accumulates d(loss)/d(leaf) into every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self.grads[i].get_or_insert_with(|| vec![F::zero(); g.len()]);
                slot.iter_mut().zip(&g).for_each(|(s, &d)| *s = *s + d);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s = *s - d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for ((s, &d), &o) in s.iter_mut().zip(g).zip(vb) {
                        *s = *s + d * o;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &d), &o) in s.iter_mut().zip(g).zip(va) {
                        *s = *s + d * o;
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + *scale * d)
                });
            }
            Op::SubScalar { x, s: sv } => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d));
                let total: F = g.iter().copied().sum();
                acc(*sv, &mut |s| s[0] = s[0] - total);
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for ((s, &d), &e) in s.iter_mut().zip(g).zip(xv) {
                        if e > F::zero() {
                            *s = *s + d;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s = *s + g[0])),
            Op::Mean(x) => {
                let scale = g[0] / F::lit(nodes[x.0].value.len() as f64);
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s = *s + scale));
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d)),
            Op::Conv2d(ctx) => self.conv_backward(ctx, g, &mut acc),
            Op::Bilinear { x, plan } => {
                let (h, w) = plan.in_hw;
                let (oh, ow) = plan.out_hw;
                let planes = g.len() / (oh * ow);
                acc(*x, &mut |s| {
                    for p in 0..planes {
                        let gi = &g[p * oh * ow..(p + 1) * oh * ow];
                        let si = &mut s[p * h * w..(p + 1) * h * w];
                        for (r, &(y0, y1, ly)) in plan.rows.iter().enumerate() {
                            for (c, &(x0, x1, lx)) in plan.cols.iter().enumerate() {
                                let d = gi[r * ow + c].as_f64();
                                let add = |v: &mut F, wgt: f64| *v = *v + F::lit(d * wgt);
                                add(&mut si[y0 * w + x0], (1.0 - ly) * (1.0 - lx));
                                add(&mut si[y0 * w + x1], (1.0 - ly) * lx);
                                add(&mut si[y1 * w + x0], ly * (1.0 - lx));
                                add(&mut si[y1 * w + x1], ly * lx);
                            }
                        }
                    }
                });
            }
            Op::MaskedSum { x, mask } => {
                let plane = mask.len();
                acc(*x, &mut |s| {
                    for (c, &d) in g.iter().enumerate() {
                        for (e, &m) in s[c * plane..(c + 1) * plane].iter_mut().zip(mask) {
                            *e = *e + d * m;
                        }
                    }
                });
            }
            Op::Cosine { x, p } => self.cosine_backward(*x, *p, g, &mut acc),
            Op::Sigmoid { x, kappa } => {
                let ov = out.data();
                acc(*x, &mut |s| {
                    for ((s, &d), &o) in s.iter_mut().zip(g).zip(ov) {
                        *s = *s + d * *kappa * o * (F::one() - o);
                    }
                });
            }
            Op::Bce {
                pred,
                target,
                w_fg,
                w_bg,
            } => {
                let pv = nodes[pred.0].value.data();
                let n = F::lit(target.len() as f64);
                let (lo, hi) = (F::lit(PROB_CLAMP), F::lit(1.0 - PROB_CLAMP));
                acc(*pred, &mut |s| {
                    for ((s, &q), &y) in s.iter_mut().zip(pv).zip(target) {
                        if q < lo || q > hi {
                            continue;
                        }
                        let dl = -(*w_fg * y / q - *w_bg * (F::one() - y) / (F::one() - q)) / n;
                        *s = *s + g[0] * dl;
                    }
                });
            }
        }
    }

    fn conv_backward(&self, ctx: &ConvCtx<F>, g: &[F], acc: &mut GradSink<'_, F>) {
        let geom = ctx.geom;
        let (ckk, plane) = (geom.ckk(), geom.out_plane());
        let kernel = self.nodes[ctx.kernel.0].value.data();
        acc(ctx.kernel, &mut |s| {
            for n in 0..geom.n {
                let gn = &g[n * geom.cout * plane..(n + 1) * geom.cout * plane];
                let cn = &ctx.cols[n * ckk * plane..(n + 1) * ckk * plane];
                // dK += dOut (cout x plane) * cols^T (plane x ckk)
                F::gemm(geom.cout, plane, ckk, gn, false, cn, true, F::one(), s);
            }
        });
        if let Some(b) = ctx.bias {
            acc(b, &mut |s| {
                for n in 0..geom.n {
                    for (co, sb) in s.iter_mut().enumerate() {
                        let start = (n * geom.cout + co) * plane;
                        *sb = *sb + g[start..start + plane].iter().copied().sum();
                    }
                }
            });
        }
        acc(ctx.input, &mut |s| {
            let mut dcols = vec![F::zero(); ckk * plane];
            let in_size = geom.cin * geom.h * geom.w;
            for n in 0..geom.n {
                let gn = &g[n * geom.cout * plane..(n + 1) * geom.cout * plane];
                // dcols = K^T (ckk x cout) * dOut (cout x plane)
                F::gemm(ckk, geom.cout, plane, kernel, true, gn, false, F::zero(), &mut dcols);
                col2im(
                    &dcols,
                    &geom,
                    ctx.stride,
                    ctx.pad,
                    &mut s[n * in_size..(n + 1) * in_size],
                );
            }
        });
    }

    fn cosine_backward(&self, x: Var, p: Var, g: &[F], acc: &mut GradSink<'_, F>) {
        let xs = self.shape(x);
        let (d, plane) = (xs[0], xs[1] * xs[2]);
        let xv: Vec<f64> = self.value(x).data().iter().map(|e| e.as_f64()).collect();
        let pv: Vec<f64> = self.value(p).data().iter().map(|e| e.as_f64()).collect();
        let pn = pv.iter().map(|e| e * e).sum::<f64>().sqrt();
        let b = pn + COSINE_EPS;
        let mut gx = vec![0.0; d * plane];
        let mut gp = vec![0.0; d];
        for j in 0..plane {
            let gj = g[j].as_f64();
            if gj == 0.0 {
                continue;
            }
            let (mut dot, mut nn) = (0.0, 0.0);
            for c in 0..d {
                let f = xv[c * plane + j];
                dot += f * pv[c];
                nn += f * f;
            }
            let fnorm = nn.sqrt();
            let a = fnorm + COSINE_EPS;
            for c in 0..d {
                let f = xv[c * plane + j];
                let radial = if fnorm > 0.0 {
                    dot / (a * a * b) * f / fnorm
                } else {
                    0.0
                };
                gx[c * plane + j] += gj * (pv[c] / (a * b) - radial);
                gp[c] += gj * (f / (a * b) - dot / (a * b * b) * pv[c] / pn);
            }
        }
        acc(x, &mut |s| {
            s.iter_mut().zip(&gx).for_each(|(s, &d)| *s = *s + F::lit(d))
        });
        acc(p, &mut |s| {
            s.iter_mut().zip(&gp).for_each(|(s, &d)| *s = *s + F::lit(d))
        });
    }
}

pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, stride: usize, pad: usize, cols: &mut [F]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = ((ci * g.kh + a) * g.kw + b) * plane;
                for oy in 0..g.ho {
                    let iy = (oy * stride + a) as isize - pad as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + b) as isize - pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, stride: usize, pad: usize, dx: &mut [F]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = ((ci * g.kh + a) * g.kw + b) * plane;
                for oy in 0..g.ho {
                    let iy = (oy * stride + a) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * stride + b) as isize - pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let t = &mut dx[base + ix as usize];
                            *t = *t + cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
