//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] either records operations (training) or evaluates them eagerly
//! without keeping intermediates alive (inference). Model code is written
//! once against the tape and runs in both modes.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::loss;
use crate::params::ParamStore;
use crate::tensor::{self, gemm, ConvGeom, Layout, Real, Tensor};

/// A value flowing through the tape. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var<T: Real> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Real> Var<T> {
    /// Wraps a value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self { value: Arc::new(value), node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Detaches the value from the tape.
    pub fn detach(&self) -> Self {
        Self { value: self.value.clone(), node: None }
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

/// Floor added to the mean square in [`Tape::channel_norm`]; bounds the gain
/// on pixels where every channel is near zero.
pub const CHANNEL_NORM_EPS: f64 = 1e-2;

enum Op<T: Real> {
    Leaf {
        name: String,
    },
    Conv {
        x: Arc<Tensor<T>>,
        w: Arc<Tensor<T>>,
        px: Option<usize>,
        pw: Option<usize>,
        pb: Option<usize>,
        geom: ConvGeom,
        out_ch: usize,
    },
    Relu {
        out: Arc<Tensor<T>>,
        p: usize,
    },
    Sigmoid {
        out: Arc<Tensor<T>>,
        p: usize,
    },
    ChannelNorm {
        out: Arc<Tensor<T>>,
        inv_rms: Vec<T>,
        p: usize,
    },
    Add {
        pa: Option<usize>,
        pb: Option<usize>,
    },
    Scale {
        p: usize,
        s: T,
    },
    Reshape {
        p: usize,
    },
    Transpose {
        p: usize,
        rows: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
    },
    Column {
        p: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    Resize {
        p: usize,
        c: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    MatMul {
        a: Arc<Tensor<T>>,
        b: Arc<Tensor<T>>,
        pa: Option<usize>,
        pb: Option<usize>,
        m: usize,
        k: usize,
        n: usize,
        b_layout: Layout,
    },
    Softmax {
        out: Arc<Tensor<T>>,
        p: usize,
        rows: usize,
        cols: usize,
    },
    Focal {
        prob: Arc<Tensor<T>>,
        target: Arc<Tensor<T>>,
        p: usize,
        gamma: T,
        alpha: T,
    },
    Mse {
        a: Arc<Tensor<T>>,
        b: Arc<Tensor<T>>,
        pa: Option<usize>,
        pb: Option<usize>,
    },
}

struct Node<T: Real> {
    op: Op<T>,
    shape: Vec<usize>,
}

type TrainableFilter = Box<dyn Fn(&str) -> bool>;

/// Operation recorder.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    trainable: Option<TrainableFilter>,
}

/// Gradients of a scalar with respect to named parameters.
pub type Grads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Real> Tape<T> {
    /// Eager evaluation; nothing is recorded.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), trainable: None }
    }

    /// Records operations; parameters whose name passes `filter` receive gradients.
    pub fn recording(filter: impl Fn(&str) -> bool + 'static) -> Self {
        Self { nodes: RefCell::new(Vec::new()), trainable: Some(Box::new(filter)) }
    }

    pub fn is_recording(&self) -> bool {
        self.trainable.is_some()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, shape: &[usize]) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, shape: shape.to_vec() });
        nodes.len() - 1
    }

    fn wrap(&self, value: Tensor<T>, op: Option<Op<T>>) -> Var<T> {
        let node = op.map(|op| self.push(op, value.shape()));
        Var { value: Arc::new(value), node }
    }

    /// Looks up a parameter block; it becomes a gradient leaf when trainable.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var<T>> {
        let value = store.get(name)?.clone();
        let node = match &self.trainable {
            Some(filter) if filter(name) => {
                Some(self.push(Op::Leaf { name: name.to_string() }, value.shape()))
            }
            _ => None,
        };
        Ok(Var { value, node })
    }

    /// 2-D convolution of a `C x H x W` input with replicate padding.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: &Var<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        let (xs, ws) = (x.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d input {:?} weight {:?}", xs, ws)));
        }
        if ws[1] != xs[0] {
            return Err(Error::Shape(format!(
                "conv2d channels: input has {}, weight expects {}",
                xs[0], ws[1]
            )));
        }
        if bias.value.len() != ws[0] {
            return Err(Error::Shape(format!("conv2d bias len {} for {} outputs", bias.value.len(), ws[0])));
        }
        let geom = ConvGeom { in_channels: xs[0], height: xs[1], width: xs[2], kernel: ws[2], stride, pad };
        if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(Error::Shape(format!("conv2d kernel {} larger than input {:?}", ws[2], xs)));
        }
        let out = tensor::conv2d_forward(x.value.data(), weight.value.data(), bias.value.data(), &geom);
        let out = Tensor::from_vec(&[ws[0], geom.out_height(), geom.out_width()], out)?;
        let op = (x.node.is_some() || weight.node.is_some() || bias.node.is_some()).then(|| Op::Conv {
            x: x.value.clone(),
            w: weight.value.clone(),
            px: x.node,
            pw: weight.node,
            pb: bias.node,
            geom,
            out_ch: ws[0],
        });
        Ok(self.wrap(out, op))
    }

    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        let out = x.value.map(|v| v.max(T::zero()));
        match x.node {
            Some(p) => {
                let out = Arc::new(out);
                let node = self.push(Op::Relu { out: out.clone(), p }, out.shape());
                Var { value: out, node: Some(node) }
            }
            None => Var::constant(out),
        }
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let out = x.value.map(sigmoid);
        match x.node {
            Some(p) => {
                let out = Arc::new(out);
                let node = self.push(Op::Sigmoid { out: out.clone(), p }, out.shape());
                Var { value: out, node: Some(node) }
            }
            None => Var::constant(out),
        }
    }

    /// Divides each pixel of a `C x H x W` map by the root mean square of its
    /// channels (plus `CHANNEL_NORM_EPS`).
    pub fn channel_norm(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("channel_norm expects C x H x W, got {s:?}")));
        }
        let (c, n) = (s[0], s[1] * s[2]);
        let mut out = (*x.value).clone();
        let mut inv_rms = vec![T::zero(); n];
        let d = out.data_mut();
        for (p, inv) in inv_rms.iter_mut().enumerate() {
            let ms = (0..c).map(|ch| d[ch * n + p] * d[ch * n + p]).sum::<T>() / T::c(c as f64);
            *inv = T::one() / (ms + T::c(CHANNEL_NORM_EPS)).sqrt();
            for ch in 0..c {
                d[ch * n + p] = d[ch * n + p] * *inv;
            }
        }
        Ok(match x.node {
            Some(p) => {
                let out = Arc::new(out);
                let node = self.push(Op::ChannelNorm { out: out.clone(), inv_rms, p }, out.shape());
                Var { value: out, node: Some(node) }
            }
            None => Var::constant(out),
        })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", a.shape(), b.shape())));
        }
        let mut out = (*a.value).clone();
        out.add_assign(&b.value);
        let op = (a.node.is_some() || b.node.is_some()).then_some(Op::Add { pa: a.node, pb: b.node });
        Ok(self.wrap(out, op))
    }

    pub fn scale(&self, x: &Var<T>, s: T) -> Var<T> {
        let out = x.value.map(|v| v * s);
        self.wrap(out, x.node.map(|p| Op::Scale { p, s }))
    }

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = (*x.value).clone().reshape(shape)?;
        Ok(self.wrap(out, x.node.map(|p| Op::Reshape { p })))
    }

    /// Transpose of a 2-D value.
    pub fn transpose(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose expects 2-D, got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = Tensor::from_vec(&[cols, rows], transpose(x.value.data(), rows, cols))?;
        Ok(self.wrap(out, x.node.map(|p| Op::Transpose { p, rows, cols })))
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&self, parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.value.len()).sum());
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::Shape(format!("concat {:?} with {:?}", first.shape(), p.shape())));
            }
            lead += p.shape()[0];
            data.extend_from_slice(p.value.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let out = Tensor::from_vec(&shape, data)?;
        let op = parts
            .iter()
            .any(|p| p.node.is_some())
            .then(|| Op::Concat { parts: parts.iter().map(|p| (p.node, p.value.len())).collect() });
        Ok(self.wrap(out, op))
    }

    /// Selects column `col` of a `rows x cols` value as a `rows` vector.
    pub fn column(&self, x: &Var<T>, col: usize) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 2 || col >= s[1] {
            return Err(Error::Shape(format!("column {} of {:?}", col, s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = (0..rows).map(|r| x.value.data()[r * cols + col]).collect();
        let out = Tensor::from_vec(&[rows], data)?;
        Ok(self.wrap(out, x.node.map(|p| Op::Column { p, col, rows, cols })))
    }

    /// Bilinear resize of a `C x H x W` value.
    pub fn resize(&self, x: &Var<T>, oh: usize, ow: usize) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("resize expects C x H x W, got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if (h, w) == (oh, ow) {
            return Ok(x.clone());
        }
        let out = Tensor::from_vec(&[c, oh, ow], tensor::resize_bilinear(x.value.data(), c, h, w, oh, ow))?;
        Ok(self.wrap(out, x.node.map(|p| Op::Resize { p, c, h, w, oh, ow })))
    }

    /// `a (m x k) * b`, where `b` is `k x n` or, with `b_transposed`, `n x k`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>, b_transposed: bool) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_transposed { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimension: lhs {:?}, rhs {:?}{}",
                sa,
                sb,
                if b_transposed { " (transposed)" } else { "" }
            )));
        }
        let b_layout = if b_transposed { Layout::Transposed } else { Layout::Normal };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.value.data(), Layout::Normal, b.value.data(), b_layout, &mut out, false);
        let out = Tensor::from_vec(&[m, n], out)?;
        let op = (a.node.is_some() || b.node.is_some()).then(|| Op::MatMul {
            a: a.value.clone(),
            b: b.value.clone(),
            pa: a.node,
            pb: b.node,
            m,
            k,
            n,
            b_layout,
        });
        Ok(self.wrap(out, op))
    }

    /// Row-wise softmax of a 2-D value.
    pub fn softmax_rows(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("softmax expects 2-D, got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = (*x.value).clone();
        tensor::softmax_rows(out.data_mut(), rows, cols);
        Ok(match x.node {
            Some(p) => {
                let out = Arc::new(out);
                let node = self.push(Op::Softmax { out: out.clone(), p, rows, cols }, out.shape());
                Var { value: out, node: Some(node) }
            }
            None => Var::constant(out),
        })
    }

    /// Mean focal loss of probabilities `prob` against a binary `target`.
    pub fn focal_loss(&self, prob: &Var<T>, target: &Tensor<T>, gamma: T, alpha: T) -> Result<Var<T>> {
        let value = loss::focal_value(prob.value(), target, gamma, alpha)?;
        let op = prob.node.map(|p| Op::Focal {
            prob: prob.value.clone(),
            target: Arc::new(target.clone()),
            p,
            gamma,
            alpha,
        });
        Ok(self.wrap(Tensor::scalar(value), op))
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let value = loss::mse_value(a.value(), b.value())?;
        let op = (a.node.is_some() || b.node.is_some()).then(|| Op::Mse {
            a: a.value.clone(),
            b: b.value.clone(),
            pa: a.node,
            pb: b.node,
        });
        Ok(self.wrap(Tensor::scalar(value), op))
    }

    /// Sum of scalars (or equally shaped values).
    pub fn sum(&self, terms: &[Var<T>]) -> Result<Var<T>> {
        let mut iter = terms.iter();
        let mut acc = iter.next().ok_or_else(|| Error::Shape("sum of nothing".into()))?.clone();
        for t in iter {
            acc = self.add(&acc, t)?;
        }
        Ok(acc)
    }

    /// Gradients of the scalar `output` with respect to every trainable leaf
    /// that contributed to it.
    pub fn backward(&self, output: &Var<T>) -> Result<Grads<T>> {
        if output.value.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", output.shape())));
        }
        let mut result = Grads::new();
        let Some(root) = output.node else {
            return Ok(result);
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf { name } => {
                    let t = Tensor::from_vec(&node.shape, g)?;
                    match result.get_mut(name) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            result.insert(name.clone(), t);
                        }
                    }
                }
                Op::Conv { x, w, px, pw, pb, geom, out_ch } => {
                    let (dx, dw, db) = tensor::conv2d_backward(
                        x.data(),
                        w.data(),
                        &g,
                        geom,
                        *out_ch,
                        px.is_some(),
                        pw.is_some(),
                    );
                    accumulate(&mut grads, *px, dx);
                    accumulate(&mut grads, *pw, dw);
                    accumulate(&mut grads, *pb, Some(db));
                }
                Op::Relu { out, p } => {
                    let d = g
                        .iter()
                        .zip(out.data())
                        .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, Some(*p), Some(d));
                }
                Op::Sigmoid { out, p } => {
                    let d = g.iter().zip(out.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                    accumulate(&mut grads, Some(*p), Some(d));
                }
                Op::ChannelNorm { out, inv_rms, p } => {
                    let n = inv_rms.len();
                    let c = out.len() / n;
                    let y = out.data();
                    let mut d = vec![T::zero(); c * n];
                    for (px, &inv) in inv_rms.iter().enumerate() {
                        let dot = (0..c).map(|ch| g[ch * n + px] * y[ch * n + px]).sum::<T>() / T::c(c as f64);
                        for ch in 0..c {
                            let i = ch * n + px;
                            d[i] = (g[i] - y[i] * dot) * inv;
                        }
                    }
                    accumulate(&mut grads, Some(*p), Some(d));
                }
                Op::Add { pa, pb } => {
                    if pb.is_some() {
                        accumulate(&mut grads, *pb, Some(g.clone()));
                    }
                    accumulate(&mut grads, *pa, Some(g));
                }
                Op::Scale { p, s } => {
                    let d = g.iter().map(|&v| v * *s).collect();
                    accumulate(&mut grads, Some(*p), Some(d));
                }
                Op::Reshape { p } => accumulate(&mut grads, Some(*p), Some(g)),
                Op::Transpose { p, rows, cols } => {
                    accumulate(&mut grads, Some(*p), Some(transpose(&g, *cols, *rows)));
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &(p, len) in parts {
                        if p.is_some() {
                            accumulate(&mut grads, p, Some(g[offset..offset + len].to_vec()));
                        }
                        offset += len;
                    }
                }
                Op::Column { p, col, rows, cols } => {
                    let mut d = vec![T::zero(); rows * cols];
                    for r in 0..*rows {
                        d[r * cols + col] = g[r];
                    }
                    accumulate(&mut grads, Some(*p), Some(d));
                }
                Op::Resize { p, c, h, w, oh, ow } => {
                    let d = tensor::resize_bilinear_backward(&g, *c, *h, *w, *oh, *ow);
                    accumulate(&mut grads, Some(*p), Some(d));
                }
                Op::MatMul { a, b, pa, pb, m, k, n, b_layout } => {
                    if pa.is_some() {
                        // dA = G * op(B)^T
                        let mut da = vec![T::zero(); m * k];
                        let lb = match b_layout {
                            Layout::Normal => Layout::Transposed,
                            Layout::Transposed => Layout::Normal,
                        };
                        gemm(*m, *n, *k, &g, Layout::Normal, b.data(), lb, &mut da, false);
                        accumulate(&mut grads, *pa, Some(da));
                    }
                    if pb.is_some() {
                        let mut db = vec![T::zero(); k * n];
                        match b_layout {
                            // dB = A^T G
                            Layout::Normal => {
                                gemm(*k, *m, *n, a.data(), Layout::Transposed, &g, Layout::Normal, &mut db, false)
                            }
                            // d(B^T) = A^T G, so dB = G^T A
                            Layout::Transposed => {
                                gemm(*n, *m, *k, &g, Layout::Transposed, a.data(), Layout::Normal, &mut db, false)
                            }
                        }
                        accumulate(&mut grads, *pb, Some(db));
                    }
                }
                Op::Softmax { out, p, rows, cols } => {
                    let mut d = vec![T::zero(); rows * cols];
                    for r in 0..*rows {
                        let y = &out.data()[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for c in 0..*cols {
                            d[r * cols + c] = y[c] * (gy[c] - dot);
                        }
                    }
                    accumulate(&mut grads, Some(*p), Some(d));
                }
                Op::Focal { prob, target, p, gamma, alpha } => {
                    let mut d = loss::focal_grad(prob, target, *gamma, *alpha);
                    d.iter_mut().for_each(|v| *v = *v * g[0]);
                    accumulate(&mut grads, Some(*p), Some(d));
                }
                Op::Mse { a, b, pa, pb } => {
                    let scale = T::c(2.0) * g[0] / T::c(a.len() as f64);
                    let diff: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * scale).collect();
                    if pb.is_some() {
                        accumulate(&mut grads, *pb, Some(diff.iter().map(|&v| -v).collect()));
                    }
                    accumulate(&mut grads, *pa, Some(diff));
                }
            }
        }
        Ok(result)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], parent: Option<usize>, g: Option<Vec<T>>) {
    let (Some(p), Some(g)) = (parent, g) else { return };
    match &mut grads[p] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds a small graph touching every op and returns its scalar output.
    fn probe(tape: &Tape<f64>, store: &ParamStore<f64>) -> Var<f64> {
        let x = tape.param(store, "x").unwrap();
        let w = tape.param(store, "w").unwrap();
        let b = tape.param(store, "b").unwrap();
        let y = tape.conv2d(&x, &w, &b, 2, 1).unwrap(); // 3 x 3 x 3
        let y = tape.channel_norm(&tape.relu(&tape.scale(&y, 1.5))).unwrap();
        let up = tape.resize(&y, 5, 4).unwrap(); // 3 x 5 x 4
        let tokens = tape.transpose(&tape.reshape(&up, &[3, 20]).unwrap()).unwrap(); // 20 x 3
        let q = tape.param(store, "q").unwrap(); // 3 x 3
        let qt = tape.matmul(&tokens, &q, false).unwrap();
        let s = tape.matmul(&qt, &tokens, true).unwrap(); // 20 x 20
        let p = tape.softmax_rows(&s).unwrap();
        let m = tape.param(store, "m").unwrap(); // 20 x 2
        let out = tape.matmul(&p, &m, false).unwrap();
        let c0 = tape.column(&out, 0).unwrap();
        let c1 = tape.column(&out, 1).unwrap();
        let cat = tape.concat(&[c0.clone(), c1]).unwrap();
        let sig = tape.sigmoid(&cat);
        let target = Tensor::from_vec(&[40], (0..40).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        let f = tape.focal_loss(&sig, &target, 2.0, 1.0).unwrap();
        let half = Var::constant(Tensor::full(&[20], 0.3));
        let mse = tape.mse(&c0, &half).unwrap();
        let added = tape.add(&f, &mse).unwrap();
        tape.sum(&[added, mse]).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        store.insert("x", rand_tensor(&mut rng, &[2, 5, 6]));
        store.insert("w", rand_tensor(&mut rng, &[3, 2, 3, 3]));
        store.insert("b", rand_tensor(&mut rng, &[3]));
        store.insert("q", rand_tensor(&mut rng, &[3, 3]));
        store.insert("m", rand_tensor(&mut rng, &[20, 2]));
        let tape = Tape::recording(|_| true);
        let out = probe(&tape, &store);
        let grads = tape.backward(&out).unwrap();
        let h = 1e-6;
        for name in ["x", "w", "b", "q", "m"] {
            let analytic = &grads[name];
            for i in 0..analytic.len() {
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= h;
                let t = Tape::inference();
                let fp = probe(&t, &plus).value().data()[0];
                let fm = probe(&t, &minus).value().data()[0];
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(err < 1e-4 || (a - numeric).abs() < 1e-9, "{name}[{i}]: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn channel_norm_matches_per_pixel_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[4, 2, 3]);
        let y = Tape::inference().channel_norm(&Var::constant(x.clone())).unwrap();
        for p in 0..6 {
            let col: Vec<f64> = (0..4).map(|c| x.data()[c * 6 + p]).collect();
            let rms = (col.iter().map(|v| v * v).sum::<f64>() / 4.0 + CHANNEL_NORM_EPS).sqrt();
            for (c, v) in col.iter().enumerate() {
                assert!((y.value().data()[c * 6 + p] - v / rms).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::default();
        store.insert("x", rand_tensor(&mut rng, &[2, 5, 6]));
        store.insert("w", rand_tensor(&mut rng, &[3, 2, 3, 3]));
        store.insert("b", rand_tensor(&mut rng, &[3]));
        store.insert("q", rand_tensor(&mut rng, &[3, 3]));
        store.insert("m", rand_tensor(&mut rng, &[20, 2]));
        let tape = Tape::recording(|n| n == "m");
        let out = probe(&tape, &store);
        let grads = tape.backward(&out).unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["m"]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        store.insert("x", rand_tensor(&mut rng, &[2, 5, 6]));
        store.insert("w", rand_tensor(&mut rng, &[3, 2, 3, 3]));
        store.insert("b", rand_tensor(&mut rng, &[3]));
        store.insert("q", rand_tensor(&mut rng, &[3, 3]));
        store.insert("m", rand_tensor(&mut rng, &[20, 2]));
        let tape = Tape::inference();
        let out = probe(&tape, &store);
        assert!(tape.is_empty());
        assert!(!out.requires_grad());
    }
}
