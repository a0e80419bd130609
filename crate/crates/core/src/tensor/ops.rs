//! Forward ops. Each records enough state on the tape for its backward rule
//! in `backward.rs`.

use super::kernels::{self, ConvGeom};
use super::{Graph, Result, TensorError, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    /// tanh approximation
    Gelu,
    Sigmoid,
    Silu,
    Softplus,
    Exp,
    Tanh,
    Square,
    Neg,
}

/// Per-channel statistics of a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, for running-average updates.
    pub var_unbiased: Vec<T>,
}

pub(super) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        groups: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MulBias {
        x: Var,
        scale: Var,
        axis: usize,
    },
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, UnaryKind),
    Softmax(Var),
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    AvgPool2d {
        x: Var,
        k: usize,
        s: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Flip {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: T,
        probs: Vec<T>,
    },
    Focal {
        logits: Var,
        targets: Vec<bool>,
        alpha: T,
        gamma: T,
    },
    L2Dist(Var),
    Scan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        reverse: bool,
        states: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(super) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddBias { x, bias, .. } => vec![*x, *bias],
            MulBias { x, scale, .. } => vec![*x, *scale],
            Scale(x, _) | AddScalar(x) | Unary(x, _) | Softmax(x) | GlobalAvgPool(x)
            | Reshape(x) | Sum(x) | Mean(x) | L2Dist(x) => vec![*x],
            LayerNorm { x, affine, .. } => {
                let mut v = vec![*x];
                if let Some((g, b)) = affine {
                    v.push(*g);
                    v.push(*b);
                }
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            AvgPool2d { x, .. }
            | MaxPool2d { x, .. }
            | Permute { x, .. }
            | Slice { x, .. }
            | Flip { x, .. }
            | Gather { x, .. } => vec![*x],
            Concat { xs, .. } => xs.clone(),
            CrossEntropy { logits, .. } | Focal { logits, .. } => vec![*logits],
            Scan {
                u, delta, a, b, c, d, ..
            } => vec![*u, *delta, *a, *b, *c, *d],
        }
    }
}

/// `(outer, axis_len, inner)` split of `shape` around `axis`.
pub(super) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn unary_forward<T: Scalar>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Gelu => {
            let c = T::lit(0.797_884_560_802_865_4);
            let inner = c * (x + T::lit(0.044715) * x * x * x);
            T::half() * x * (T::one() + inner.tanh())
        }
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Square => x * x,
        UnaryKind::Neg => -x,
    }
}

thread_local! {
    static BACKWARD_FAULT: std::cell::Cell<Option<UnaryKind>> = const { std::cell::Cell::new(None) };
}

/// Doubles the backward rule of `kind` on the current thread (or clears the
/// fault with `None`). Negative control for the gradcheck harness.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<UnaryKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

/// d(out)/d(x) at input `x`.
pub(super) fn unary_derivative<T: Scalar>(kind: UnaryKind, x: T) -> T {
    let d = unary_derivative_exact(kind, x);
    if BACKWARD_FAULT.with(|f| f.get()) == Some(kind) {
        d * T::two()
    } else {
        d
    }
}

fn unary_derivative_exact<T: Scalar>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Gelu => {
            let c = T::lit(0.797_884_560_802_865_4);
            let a = T::lit(0.044715);
            let inner = c * (x + a * x * x * x);
            let t = inner.tanh();
            let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
            T::half() * (T::one() + t) + T::half() * x * (T::one() - t * t) * dinner
        }
        UnaryKind::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Tanh => {
            let t = x.tanh();
            T::one() - t * t
        }
        UnaryKind::Square => T::two() * x,
        UnaryKind::Neg => -T::one(),
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// log σ(x), stable for large |x|.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    -softplus(-x)
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Matrix product. `[m,k]·[k,n]` or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(TensorError::mismatch("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..batch {
                kernels::gemm_nn(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// 2-D convolution, `x: [N,Ci,H,W]`, `w: [Co,Ci/groups,kh,kw]`,
    /// optional `bias: [Co]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let ([n, ci, h, wd], [co, cig, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        };
        let (n, ci, h, wd, co, cig, kh, kw) = (*n, *ci, *h, *wd, *co, *cig, *kh, *kw);
        if groups == 0 || ci % groups != 0 || co % groups != 0 || cig * groups != ci {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(TensorError::mismatch("conv2d bias", self.shape(b), &[co]));
            }
        }
        let geom = ConvGeom::new(cig, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| TensorError::invalid("conv2d", "kernel larger than padded input"))?;
        let cog = co / groups;
        let (oh, ow) = (geom.out_h, geom.out_w);
        let plane = oh * ow;
        let mut out = vec![T::zero(); n * co * plane];
        let mut cols = vec![T::zero(); geom.col_rows() * plane];
        {
            let xd = self.data(x);
            let wdat = self.data(w);
            for ni in 0..n {
                for gi in 0..groups {
                    let img = &xd[(ni * ci + gi * cig) * h * wd..(ni * ci + (gi + 1) * cig) * h * wd];
                    kernels::im2col(&geom, img, &mut cols);
                    let wg = &wdat[gi * cog * geom.col_rows()..(gi + 1) * cog * geom.col_rows()];
                    let o = &mut out[(ni * co + gi * cog) * plane..(ni * co + (gi + 1) * cog) * plane];
                    kernels::gemm_nn(cog, geom.col_rows(), plane, wg, &cols, o);
                }
            }
            if let Some(b) = bias {
                let bd = self.data(b);
                for ni in 0..n {
                    for c in 0..co {
                        for v in &mut out[(ni * co + c) * plane..(ni * co + c + 1) * plane] {
                            *v += bd[c];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![n, co, oh, ow],
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                groups,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds `bias` (length `shape[axis]`) along `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || self.shape(bias) != [s[axis]] {
            return Err(TensorError::mismatch("add_bias", &s, self.shape(bias)));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let mut out = self.data(x).to_vec();
        let bd = self.data(bias);
        for o in 0..outer {
            for c in 0..len {
                let base = (o * len + c) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bd[c];
                }
            }
        }
        Ok(self.push(s, out, Op::AddBias { x, bias, axis }))
    }

    /// Multiplies by `scale` (length `shape[axis]`) along `axis`.
    pub fn mul_bias(&mut self, x: Var, scale: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || self.shape(scale) != [s[axis]] {
            return Err(TensorError::mismatch("mul_bias", &s, self.shape(scale)));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let mut out = self.data(x).to_vec();
        let sd = self.data(scale);
        for o in 0..outer {
            for c in 0..len {
                let base = (o * len + c) * inner;
                for v in &mut out[base..base + inner] {
                    *v *= sd[c];
                }
            }
        }
        Ok(self.push(s, out, Op::MulBias { x, scale, axis }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x).iter().map(|&v| v + c).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x))
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let out = self.data(x).iter().map(|&v| unary_forward(kind, v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Unary(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&d) = s.last() else {
            return Err(TensorError::invalid("softmax", "scalar input"));
        };
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.push(s, out, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with optional `(gamma, beta)`.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&d) = s.last() else {
            return Err(TensorError::invalid("layer_norm", "scalar input"));
        };
        if let Some((g, b)) = affine {
            if self.shape(g) != [d] || self.shape(b) != [d] {
                return Err(TensorError::mismatch("layer_norm", &s, self.shape(g)));
            }
        }
        let rows = self.data(x).len() / d;
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::from_count(d);
        for (r, row) in self.data(x).chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let out = match affine {
            Some((g, b)) => {
                let (gd, bd) = (self.data(g), self.data(b));
                xhat.chunks(d)
                    .flat_map(|row| row.iter().zip(gd).zip(bd).map(|((&v, &gg), &bb)| v * gg + bb))
                    .collect()
            }
            None => xhat.clone(),
        };
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x,
                affine,
                xhat,
                rstd,
            },
        ))
    }

    /// Batch normalization over axis 1 of `[N,C,...]`.
    ///
    /// Training mode normalizes with batch statistics and returns them;
    /// eval mode uses `running = (mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("batch_norm", "need [N,C,...]"));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::mismatch("batch_norm", &s, self.shape(gamma)));
        }
        let n = s[0];
        let inner: usize = s[2..].iter().product();
        let m = n * inner;
        let xd = self.data(x);
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(TensorError::mismatch("batch_norm running", &s, &[rm.len()]));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if m < 2 {
                    return Err(TensorError::invalid(
                        "batch_norm",
                        "training mode needs more than one value per channel",
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ch) * inner;
                        for &v in &xd[base..base + inner] {
                            acc += v;
                        }
                    }
                    let mu = acc / T::from_count(m);
                    let mut sq = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ch) * inner;
                        for &v in &xd[base..base + inner] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / T::from_count(m);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v * T::from_count(m) / T::from_count(m - 1))
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * gd[ch] + bd[ch];
                }
            }
        }
        let train = stats.is_some();
        let v = self.push(
            s,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            },
        );
        Ok((v, stats))
    }

    fn pool_dims(&self, op: &'static str, x: Var, k: usize, s: usize) -> Result<[usize; 6]> {
        let sh = self.shape(x).to_vec();
        let [n, c, h, w] = sh.as_slice() else {
            return Err(TensorError::invalid(op, format!("need [N,C,H,W], got {sh:?}")));
        };
        if k == 0 || s == 0 || *h < k || *w < k {
            return Err(TensorError::invalid(op, "window larger than input"));
        }
        Ok([*n, *c, *h, *w, (h - k) / s + 1, (w - k) / s + 1])
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let [n, c, h, w, oh, ow] = self.pool_dims("avg_pool2d", x, k, s)?;
        let xd = self.data(x);
        let inv = T::one() / T::from_count(k * k);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += plane[(oy * s + ky) * w + ox * s + kx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], out, Op::AvgPool2d { x, k, s }))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let [n, c, h, w, oh, ow] = self.pool_dims("max_pool2d", x, k, s)?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = p * h * w + (oy * s + ky) * w + ox * s + kx;
                            if xd[i] > best {
                                best = xd[i];
                                at = i;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool2d { x, argmax }))
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let [n, c, h, w] = sh.as_slice() else {
            return Err(TensorError::invalid(
                "global_avg_pool",
                format!("need [N,C,H,W], got {sh:?}"),
            ));
        };
        let hw = h * w;
        let inv = T::one() / T::from_count(hw);
        let out = self
            .data(x)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(vec![*n, *c], out, Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.contains(&0) {
            return Err(TensorError::mismatch("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(TensorError::invalid("flatten", "scalar input"));
        }
        let rest = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    /// General axis permutation.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::mismatch("permute", &s, axes));
        }
        let map = kernels::permute_index(&s, axes);
        let xd = self.data(x);
        let out = map.iter().map(|&i| xd[i]).collect();
        let shape = axes.iter().map(|&a| s[a]).collect();
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(TensorError::invalid("concat", "no inputs"));
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::mismatch("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(shape, out, Op::Slice { x, axis, start }))
    }

    /// Reverses element order along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::invalid("flip", "axis out of range"));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len());
        for o in 0..outer {
            for i in (0..len).rev() {
                out.extend_from_slice(&xd[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        Ok(self.push(s, out, Op::Flip { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.data(x).iter().copied().sum();
        self.push(Vec::new(), vec![v], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let v = d.iter().copied().sum::<T>() / T::from_count(d.len());
        self.push(Vec::new(), vec![v], Op::Mean(x))
    }

    /// Picks flat elements `idx` of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(TensorError::invalid("gather", "index out of range or empty"));
        }
        let xd = self.data(x);
        let out = idx.iter().map(|&i| xd[i]).collect();
        Ok(self.push(
            vec![idx.len()],
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of `logits: [N,K]` against class `targets`, with
    /// label smoothing: `(1−ε)·CE(target) + ε·mean_k CE(k)`.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: T,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [n, k] = s.as_slice() else {
            return Err(TensorError::invalid("cross_entropy_logits", "need [N,K] logits"));
        };
        let (n, k) = (*n, *k);
        if targets.len() != n {
            return Err(TensorError::mismatch("cross_entropy_logits", &s, &[targets.len()]));
        }
        if targets.iter().any(|&t| t >= k) {
            return Err(TensorError::invalid("cross_entropy_logits", "target out of range"));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        let kt = T::from_count(k);
        for (i, row) in self.data(logits).chunks(k).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            let mut mean_nll = T::zero();
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = (v - lse).exp();
                mean_nll += lse - v;
            }
            mean_nll /= kt;
            let nll = lse - row[targets[i]];
            total += (T::one() - smoothing) * nll + smoothing * mean_nll;
        }
        let loss = total / T::from_count(n);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
        ))
    }

    /// Mean sigmoid focal loss of `logits` against binary `targets`
    /// (same element count).
    pub fn focal_loss(&mut self, logits: Var, targets: &[bool], alpha: T, gamma: T) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n {
            return Err(TensorError::mismatch(
                "focal_loss",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let mut total = T::zero();
        for (&z, &y) in self.data(logits).iter().zip(targets) {
            let (u, at) = if y { (z, alpha) } else { (-z, T::one() - alpha) };
            let log_pt = log_sigmoid(u);
            let pt = log_pt.exp();
            total += -at * (T::one() - pt).powf(gamma) * log_pt;
        }
        let loss = total / T::from_count(n);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
        ))
    }

    /// Pairwise Euclidean distances between the rows of `x: [N,D]`.
    pub fn l2_distance_matrix(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, d] = s.as_slice() else {
            return Err(TensorError::invalid("l2_distance_matrix", "need [N,D]"));
        };
        let (n, d) = (*n, *d);
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let mut acc = T::zero();
                for (&a, &b) in xd[i * d..(i + 1) * d].iter().zip(&xd[j * d..(j + 1) * d]) {
                    acc += (a - b) * (a - b);
                }
                let dist = acc.sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        Ok(self.push(vec![n, n], out, Op::L2Dist(x)))
    }

    /// Diagonal selective scan, per batch row and channel:
    ///
    /// `h_t = exp(Δ_t·A)⊙h_{t−1} + Δ_t·B_t·u_t`, `y_t = C_t·h_t + D·u_t`.
    ///
    /// Shapes: `u, delta: [B,L,C]`, `a: [C,S]`, `b, c: [B,L,S]`, `d: [C]`.
    /// With `reverse` the recurrence runs from the last token to the first.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        reverse: bool,
    ) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let [bs, l, ch] = su.as_slice() else {
            return Err(TensorError::invalid("selective_scan", "u must be [B,L,C]"));
        };
        let (bs, l, ch) = (*bs, *l, *ch);
        self.same_shape("selective_scan delta", u, delta)?;
        let sa = self.shape(a).to_vec();
        let [ach, st] = sa.as_slice() else {
            return Err(TensorError::mismatch("selective_scan A", &su, &sa));
        };
        let st = *st;
        if *ach != ch {
            return Err(TensorError::mismatch("selective_scan A", &su, &sa));
        }
        for v in [b, c] {
            if self.shape(v) != [bs, l, st] {
                return Err(TensorError::mismatch("selective_scan B/C", &su, self.shape(v)));
            }
        }
        if self.shape(d) != [ch] {
            return Err(TensorError::mismatch("selective_scan D", &su, self.shape(d)));
        }
        let (ud, dd, ad, bd, cd, skip) = (
            self.data(u),
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
        );
        let mut y = vec![T::zero(); bs * l * ch];
        let mut states = vec![T::zero(); bs * l * ch * st];
        let mut h = vec![T::zero(); st];
        for bi in 0..bs {
            for k in 0..ch {
                h.iter_mut().for_each(|v| *v = T::zero());
                for step in 0..l {
                    let t = if reverse { l - 1 - step } else { step };
                    let row = bi * l + t;
                    let x = ud[row * ch + k];
                    let dt = dd[row * ch + k];
                    let mut acc = T::zero();
                    for s in 0..st {
                        let decay = (dt * ad[k * st + s]).exp();
                        h[s] = decay * h[s] + dt * bd[row * st + s] * x;
                        acc += cd[row * st + s] * h[s];
                    }
                    states[(row * ch + k) * st..(row * ch + k + 1) * st].copy_from_slice(&h);
                    y[row * ch + k] = acc + skip[k] * x;
                }
            }
        }
        Ok(self.push(
            su,
            y,
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                d,
                reverse,
                states,
            },
        ))
    }
}
