//! Dense-tensor reverse-mode autodiff, sized for supernet experiments.
//!
//! Define-by-run: a [`Tape`] records every primitive applied through it and
//! replays adjoints in reverse order on [`Tape::backward`]. Tapes are
//! rebuilt every forward pass; parameters live outside the tape as
//! [`Tensor`]s with `requires_grad` set, and keep accumulated grads across
//! tape drops until [`Tensor::zero_grad`].
//!
//! Single-threaded within one tape. Distinct tapes may run on different
//! threads; the numeric kernels parallelize internally over the batch axis
//! in a partition-independent way, so results are bitwise identical for
//! any thread count.

mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::cell::{Ref, RefCell};
use std::rc::Rc;

struct Raw<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Dense n-dimensional tensor, row-major, cheaply clonable handle.
pub struct Tensor<S: Scalar = f64>(Rc<RefCell<Raw<S>>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let r = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &r.shape)
            .field("requires_grad", &r.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor(Rc::new(RefCell::new(Raw {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }))))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![S::zero(); n]).unwrap()
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Tensor::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        Ref::map(self.0.borrow(), |r| &r.data)
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        let r = self.0.borrow();
        assert_eq!(r.data.len(), 1, "item() on non-scalar tensor");
        r.data[0]
    }

    pub fn set_data(&self, data: Vec<S>) {
        let mut r = self.0.borrow_mut();
        assert_eq!(data.len(), r.data.len());
        r.data = data;
    }

    /// Mutate one element in place (finite-difference probes).
    pub fn nudge(&self, idx: usize, delta: S) {
        self.0.borrow_mut().data[idx] += delta;
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.0.borrow_mut().requires_grad = on;
    }

    /// Accumulated gradient, if backward has touched this tensor.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    fn accumulate_grad(&self, g: &[S]) {
        let mut r = self.0.borrow_mut();
        let n = r.data.len();
        let buf = r.grad.get_or_insert_with(|| vec![S::zero(); n]);
        for (a, &b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    // Moving the grad out is safe: nodes replay in reverse record order, so
    // by the time a producer runs every consumer has already accumulated
    // into it. Leaves are never node outputs and keep their grads.
    fn take_grad_for_backward(&self) -> Option<Vec<S>> {
        self.0.borrow_mut().grad.take()
    }
}

type BackFn<S> = Box<dyn Fn(&[S])>;

struct Node<S: Scalar> {
    out: Tensor<S>,
    back: BackFn<S>,
}

/// Records primitives for one forward pass; replayed by [`Tape::backward`].
pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn record(&self, out: Tensor<S>, back: BackFn<S>) {
        self.nodes.borrow_mut().push(Node { out, back });
    }

    /// Replay adjoints in reverse record order, accumulating into every
    /// tensor the graph touched. Repeated calls without `zero_grad`
    /// accumulate.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Input(format!(
                "backward expects a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.accumulate_grad(&[S::one()]);
        for node in self.nodes.borrow().iter().rev() {
            if let Some(g) = node.out.take_grad_for_backward() {
                (node.back)(&g);
            }
        }
        Ok(())
    }

    // ---- primitives ----

    /// 2-D cross-correlation. `x: [N,C,H,W]`, `kernel: [F,C,kh,kw]`.
    pub fn conv2d(
        &self,
        x: &Tensor<S>,
        kernel: &Tensor<S>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<S>> {
        let xs = x.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-d input and kernel, got {:?} and {:?}",
                xs, ks
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input axis 1 = {}, kernel axis 1 = {}",
                xs[1], ks[1]
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "conv2d spatial dims {}x{} too small for kernel {}x{} with padding {}",
                h, w, kh, kw, padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let geo = kernels::ConvGeo { n, c, h, w, f, kh, kw, stride, padding, oh, ow };
        let out_data = kernels::conv2d_forward(&x.data(), &kernel.data(), &geo);
        let out = Tensor::new(&[n, f, oh, ow], out_data)?;
        let (xc, kc, oc) = (x.clone(), kernel.clone(), out.clone());
        self.record(
            out.clone(),
            Box::new(move |g| {
                let dx = kernels::conv2d_backward_input(g, &kc.data(), &geo);
                let dk = kernels::conv2d_backward_kernel(g, &xc.data(), &geo);
                xc.accumulate_grad(&dx);
                kc.accumulate_grad(&dk);
                let _ = &oc;
            }),
        );
        Ok(out)
    }

    /// 3x3 average pooling with padding 1; divisor counts in-bounds cells only.
    pub fn avg_pool3x3(&self, x: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("avg_pool3x3 expects 4-d input, got {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < 1 || w < 1 {
            return Err(Error::Dimension(format!("avg_pool3x3 on empty spatial dims {}x{}", h, w)));
        }
        let oh = (h + 2 - 3) / stride + 1;
        let ow = (w + 2 - 3) / stride + 1;
        let geo = kernels::PoolGeo { n, c, h, w, stride, oh, ow };
        let out_data = kernels::avg_pool3x3_forward(&x.data(), &geo);
        let out = Tensor::new(&[n, c, oh, ow], out_data)?;
        let xc = x.clone();
        self.record(
            out.clone(),
            Box::new(move |g| {
                let dx = kernels::avg_pool3x3_backward(g, &geo);
                xc.accumulate_grad(&dx);
            }),
        );
        Ok(out)
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&self, x: &Tensor<S>) -> Tensor<S> {
        let out_data: Vec<S> =
            x.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let out = Tensor::new(&x.shape(), out_data).unwrap();
        let xc = x.clone();
        self.record(
            out.clone(),
            Box::new(move |g| {
                let xd = xc.data();
                let dx: Vec<S> = xd
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                drop(xd);
                xc.accumulate_grad(&dx);
            }),
        );
        out
    }

    /// `x: [N,D] @ weight: [D,K] + bias: [K]`.
    pub fn linear(&self, x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let xs = x.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != vec![ws[1]] {
            return Err(Error::Dimension(format!(
                "linear shape mismatch: x {:?}, weight {:?}, bias {:?}",
                xs, ws, bs
            )));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let mut out_data = vec![S::zero(); n * k];
        {
            let xd = x.data();
            let wd = weight.data();
            let bd = bias.data();
            for i in 0..n {
                for j in 0..k {
                    let mut acc = bd[j];
                    for t in 0..d {
                        acc += xd[i * d + t] * wd[t * k + j];
                    }
                    out_data[i * k + j] = acc;
                }
            }
        }
        let out = Tensor::new(&[n, k], out_data)?;
        let (xc, wc, bc) = (x.clone(), weight.clone(), bias.clone());
        self.record(
            out.clone(),
            Box::new(move |g| {
                let xd = xc.data();
                let wd = wc.data();
                let mut dx = vec![S::zero(); n * d];
                let mut dw = vec![S::zero(); d * k];
                let mut db = vec![S::zero(); k];
                for i in 0..n {
                    for j in 0..k {
                        let gv = g[i * k + j];
                        db[j] += gv;
                        for t in 0..d {
                            dx[i * d + t] += gv * wd[t * k + j];
                            dw[t * k + j] += gv * xd[i * d + t];
                        }
                    }
                }
                drop(xd);
                drop(wd);
                xc.accumulate_grad(&dx);
                wc.accumulate_grad(&dw);
                bc.accumulate_grad(&db);
            }),
        );
        Ok(out)
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out_data: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(&a.shape(), out_data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(
            out.clone(),
            Box::new(move |g| {
                ac.accumulate_grad(g);
                bc.accumulate_grad(g);
            }),
        );
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "mul shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out_data: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(&a.shape(), out_data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(
            out.clone(),
            Box::new(move |g| {
                let da: Vec<S> = bc.data().iter().zip(g).map(|(&q, &gv)| q * gv).collect();
                let db: Vec<S> = ac.data().iter().zip(g).map(|(&p, &gv)| p * gv).collect();
                ac.accumulate_grad(&da);
                bc.accumulate_grad(&db);
            }),
        );
        Ok(out)
    }

    /// Concatenate `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[Tensor<S>]) -> Result<Tensor<S>> {
        if xs.is_empty() {
            return Err(Error::Input("concat_channels on empty list".into()));
        }
        let s0 = xs[0].shape();
        if s0.len() != 4 {
            return Err(Error::Dimension(format!("concat_channels expects 4-d inputs, got {:?}", s0)));
        }
        let (n, h, w) = (s0[0], s0[2], s0[3]);
        let mut channels = Vec::with_capacity(xs.len());
        for x in xs {
            let s = x.shape();
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Dimension(format!(
                    "concat_channels mismatch on non-channel axes: {:?} vs {:?}",
                    s0, s
                )));
            }
            channels.push(s[1]);
        }
        let ctot: usize = channels.iter().sum();
        let hw = h * w;
        let mut out_data = vec![S::zero(); n * ctot * hw];
        let mut coff = 0usize;
        for (x, &ci) in xs.iter().zip(&channels) {
            let xd = x.data();
            for i in 0..n {
                let src = &xd[i * ci * hw..(i + 1) * ci * hw];
                let dst = &mut out_data[(i * ctot + coff) * hw..(i * ctot + coff + ci) * hw];
                dst.copy_from_slice(src);
            }
            coff += ci;
        }
        let out = Tensor::new(&[n, ctot, h, w], out_data)?;
        let xsc: Vec<Tensor<S>> = xs.to_vec();
        self.record(
            out.clone(),
            Box::new(move |g| {
                let mut coff = 0usize;
                for x in &xsc {
                    let ci = x.shape()[1];
                    let mut dx = vec![S::zero(); n * ci * hw];
                    for i in 0..n {
                        let src = &g[(i * ctot + coff) * hw..(i * ctot + coff + ci) * hw];
                        dx[i * ci * hw..(i + 1) * ci * hw].copy_from_slice(src);
                    }
                    x.accumulate_grad(&dx);
                    coff += ci;
                }
            }),
        );
        Ok(out)
    }

    /// Multiply by a fixed scalar (no gradient wrt the factor).
    pub fn scale_const(&self, x: &Tensor<S>, s: S) -> Tensor<S> {
        let out_data: Vec<S> = x.data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(&x.shape(), out_data).unwrap();
        let xc = x.clone();
        self.record(
            out.clone(),
            Box::new(move |g| {
                let dx: Vec<S> = g.iter().map(|&gv| gv * s).collect();
                xc.accumulate_grad(&dx);
            }),
        );
        out
    }

    /// Multiply `x` by element `idx` of `factors`; gradient flows to both.
    /// This is the mixing-weight hook: `factors` is a per-edge theta vector.
    pub fn scale_by_index(&self, x: &Tensor<S>, factors: &Tensor<S>, idx: usize) -> Result<Tensor<S>> {
        if idx >= factors.numel() {
            return Err(Error::Input(format!(
                "scale_by_index: index {} out of range for factor vector of length {}",
                idx,
                factors.numel()
            )));
        }
        let s = factors.data()[idx];
        let out_data: Vec<S> = x.data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(&x.shape(), out_data)?;
        let (xc, fc) = (x.clone(), factors.clone());
        let flen = factors.numel();
        self.record(
            out.clone(),
            Box::new(move |g| {
                let s = fc.data()[idx];
                let dx: Vec<S> = g.iter().map(|&gv| gv * s).collect();
                let xd = xc.data();
                let ds: S = xd.iter().zip(g).map(|(&v, &gv)| v * gv).sum();
                drop(xd);
                let mut df = vec![S::zero(); flen];
                df[idx] = ds;
                xc.accumulate_grad(&dx);
                fc.accumulate_grad(&df);
            }),
        );
        Ok(out)
    }

    /// `[N,C,H,W] -> [N,C]`, mean over the spatial axes.
    pub fn global_avg_pool(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("global_avg_pool expects 4-d input, got {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let inv = S::one() / S::from_f64(hw as f64);
        let mut out_data = vec![S::zero(); n * c];
        {
            let xd = x.data();
            for i in 0..n * c {
                let mut acc = S::zero();
                for p in 0..hw {
                    acc += xd[i * hw + p];
                }
                out_data[i] = acc * inv;
            }
        }
        let out = Tensor::new(&[n, c], out_data)?;
        let xc = x.clone();
        self.record(
            out.clone(),
            Box::new(move |g| {
                let mut dx = vec![S::zero(); n * c * hw];
                for i in 0..n * c {
                    let gv = g[i] * inv;
                    for p in 0..hw {
                        dx[i * hw + p] = gv;
                    }
                }
                xc.accumulate_grad(&dx);
            }),
        );
        Ok(out)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self, x: &Tensor<S>) -> Tensor<S> {
        let total: S = x.data().iter().copied().sum();
        let out = Tensor::scalar(total);
        let xc = x.clone();
        let n = x.numel();
        self.record(
            out.clone(),
            Box::new(move |g| {
                let dx = vec![g[0]; n];
                xc.accumulate_grad(&dx);
            }),
        );
        out
    }

    /// Mean cross-entropy of softmaxed logits; also returns the (detached)
    /// probability rows, which sum to 1.
    pub fn softmax_cross_entropy(
        &self,
        logits: &Tensor<S>,
        labels: &[usize],
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let ls = logits.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: logits {:?} vs {} labels",
                ls,
                labels.len()
            )));
        }
        let (n, k) = (ls[0], ls[1]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Input(format!(
                    "label {} at row {} out of range for {} classes",
                    y, i, k
                )));
            }
        }
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        {
            let ld = logits.data();
            for i in 0..n {
                let row = &ld[i * k..(i + 1) * k];
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for j in 0..k {
                    let e = (row[j] - m).exp();
                    probs[i * k + j] = e;
                    z += e;
                }
                for j in 0..k {
                    probs[i * k + j] = probs[i * k + j] / z;
                }
                // -log softmax at the label, numerically via the shifted row
                loss += z.ln() - (row[labels[i]] - m);
            }
        }
        let inv_n = S::one() / S::from_f64(n as f64);
        loss = loss * inv_n;
        let loss_t = Tensor::scalar(loss);
        let probs_t = Tensor::new(&[n, k], probs.clone())?;
        let lc = logits.clone();
        let labels: Vec<usize> = labels.to_vec();
        self.record(
            loss_t.clone(),
            Box::new(move |g| {
                let mut dl = vec![S::zero(); n * k];
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if labels[i] == j { S::one() } else { S::zero() };
                        dl[i * k + j] = (probs[i * k + j] - onehot) * inv_n * g[0];
                    }
                }
                lc.accumulate_grad(&dl);
            }),
        );
        Ok((loss_t, probs_t))
    }
}

/// Central finite differences of a scalar-valued function at `x`.
///
/// This is the verification oracle the gradient tests compare against;
/// it never touches the tape.
pub fn finite_diff_grad<S: Scalar>(
    f: &mut dyn FnMut(&Tensor<S>) -> S,
    x: &Tensor<S>,
    h: S,
) -> Tensor<S> {
    let n = x.numel();
    let probe = Tensor::new(&x.shape(), x.to_vec()).unwrap();
    let mut g = vec![S::zero(); n];
    for i in 0..n {
        probe.nudge(i, h);
        let fp = f(&probe);
        probe.nudge(i, -(h + h));
        let fm = f(&probe);
        probe.nudge(i, h);
        g[i] = (fp - fm) / (h + h);
    }
    Tensor::new(&x.shape(), g).unwrap()
}

#[cfg(test)]
mod tests;
