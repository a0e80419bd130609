//! Parameterized building blocks. Each layer holds parameter ids only; values
//! live in the [`ParamStore`](super::ParamStore).

use crate::scalar::Scalar;
use crate::tensor::Var;

use super::params::{BufferId, Builder, Fwd, Init, ParamId};
use super::{ModelError, Result};

/// `y = x·W + b` over the last axis. `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<T>, din: usize, dout: usize, bias: bool, zero: bool) -> Self {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Normal(1.0 / (din as f64).sqrt())
        };
        let w = b.param("w", &[din, dout], init);
        let bias = bias.then(|| b.param("b", &[dout], Init::Zeros));
        Self {
            w,
            b: bias,
            din,
            dout,
        }
    }

    /// Accepts any rank; the last axis must be `din`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let shape = f.g.shape(x).to_vec();
        if shape.last() != Some(&self.din) {
            return Err(ModelError::Shape(format!(
                "linear expects last axis {}, got {shape:?}",
                self.din
            )));
        }
        let rows = f.g.value(x).numel() / self.din;
        let x2 = f.g.reshape(x, &[rows, self.din])?;
        let w = f.p(self.w);
        let mut y = f.g.matmul(x2, w)?;
        if let Some(b) = self.b {
            let b = f.p(b);
            y = f.g.add_bias(y, b, 1)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.dout;
        Ok(f.g.reshape(y, &out_shape)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w = b.param("w", &[cout, cin, k, k], Init::Normal((2.0 / fan_in).sqrt()));
        let bias = bias.then(|| b.param("b", &[cout], Init::Zeros));
        Self {
            w,
            b: bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        Ok(f.g.conv2d(x, w, b, self.stride, self.pad, 1)?)
    }
}

/// Batch norm over axis 1 with running statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BufferId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, channels: usize, eps: f64) -> Self {
        Self {
            gamma: b.param("gamma", &[channels], Init::Ones),
            beta: b.param("beta", &[channels], Init::Zeros),
            running: b.buffer("running", channels),
            eps,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (f.p(self.gamma), f.p(self.beta));
        let eps = T::lit(self.eps);
        if f.train {
            let (y, stats) = f.g.batch_norm(x, gamma, beta, None, eps)?;
            if let Some(s) = stats {
                f.bn_stats.push((self.running, s));
            }
            Ok(y)
        } else {
            let rs = f.store().buffer(self.running);
            let (mean, var) = (rs.mean.clone(), rs.var.clone());
            Ok(f.g.batch_norm(x, gamma, beta, Some((&mean, &var)), eps)?.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, dim: usize, eps: f64) -> Self {
        Self {
            gamma: b.param("gamma", &[dim], Init::Ones),
            beta: b.param("beta", &[dim], Init::Zeros),
            eps,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        Ok(f.g.layer_norm(x, Some((g, b)), T::lit(self.eps))?)
    }
}

/// Two-layer GELU MLP; the output projection starts at zero.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(b: &mut Builder<T>, dim: usize, ratio: usize) -> Self {
        Self {
            fc1: Linear::new(&mut b.scope("fc1"), dim, dim * ratio, true, false),
            fc2: Linear::new(&mut b.scope("fc2"), dim * ratio, dim, true, true),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.g.gelu(h);
        self.fc2.forward(f, h)
    }
}

/// Multi-head cross-attention. Queries `[N,Lq,C]`, keys/values `[N,Lk,Ckv]`.
/// No positional encoding. The output projection starts at zero.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(ModelError::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut b.scope("q"), dim, dim, true, false),
            k: Linear::new(&mut b.scope("k"), kv_dim, dim, true, false),
            v: Linear::new(&mut b.scope("v"), kv_dim, dim, true, false),
            o: Linear::new(&mut b.scope("o"), dim, dim, true, true),
            heads,
            dim,
        })
    }

    fn split_heads<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, n: usize, l: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = f.g.reshape(x, &[n, l, self.heads, dh])?;
        let x = f.g.permute(x, &[0, 2, 1, 3])?;
        Ok(f.g.reshape(x, &[n * self.heads, l, dh])?)
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, xq: Var, xkv: Var) -> Result<Var> {
        let (sq, skv) = (f.g.shape(xq).to_vec(), f.g.shape(xkv).to_vec());
        let ([n, lq, _], [nk, lk, _]) = (sq.as_slice(), skv.as_slice()) else {
            return Err(ModelError::Shape(format!("attention inputs {sq:?} / {skv:?}")));
        };
        if n != nk {
            return Err(ModelError::Shape(format!("attention batch {n} vs {nk}")));
        }
        let (n, lq, lk) = (*n, *lq, *lk);
        let dh = self.dim / self.heads;
        let q = self.q.forward(f, xq)?;
        let k = self.k.forward(f, xkv)?;
        let v = self.v.forward(f, xkv)?;
        let q = self.split_heads(f, q, n, lq)?;
        let k = self.split_heads(f, k, n, lk)?;
        let v = self.split_heads(f, v, n, lk)?;
        let kt = f.g.transpose(k)?;
        let scores = f.g.matmul(q, kt)?;
        let scores = f.g.scale(scores, T::one() / T::from_count(dh).sqrt());
        let attn = f.g.softmax(scores)?;
        let ctx = f.g.matmul(attn, v)?;
        let ctx = f.g.reshape(ctx, &[n, self.heads, lq, dh])?;
        let ctx = f.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = f.g.reshape(ctx, &[n, lq, self.dim])?;
        self.o.forward(f, ctx)
    }
}

/// `[N,C,H,W]` → `[N,H·W,C]`, raster order.
pub fn to_tokens<T: Scalar>(f: &mut Fwd<T>, x: Var) -> Result<Var> {
    let s = f.g.shape(x).to_vec();
    let [n, c, h, w] = s.as_slice() else {
        return Err(ModelError::Shape(format!("expected [N,C,H,W], got {s:?}")));
    };
    let (n, c, l) = (*n, *c, h * w);
    let t = f.g.permute(x, &[0, 2, 3, 1])?;
    Ok(f.g.reshape(t, &[n, l, c])?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(f: &mut Fwd<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = f.g.shape(t).to_vec();
    let [n, l, c] = s.as_slice() else {
        return Err(ModelError::Shape(format!("expected [N,L,C], got {s:?}")));
    };
    if *l != h * w {
        return Err(ModelError::Shape(format!("{l} tokens for a {h}x{w} map")));
    }
    let x = f.g.reshape(t, &[*n, h, w, *c])?;
    Ok(f.g.permute(x, &[0, 3, 1, 2])?)
}

/// Selects batch rows of `x` (any rank, rows on axis 0), repeats allowed.
pub fn gather_rows<T: Scalar>(f: &mut Fwd<T>, x: Var, rows: &[usize]) -> Result<Var> {
    let mut s = f.g.shape(x).to_vec();
    let per = f.g.value(x).numel() / s[0];
    if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
        return Err(ModelError::Shape(format!("row {bad} out of {}", s[0])));
    }
    let idx: Vec<usize> = rows.iter().flat_map(|&r| r * per..(r + 1) * per).collect();
    let flat = f.g.gather(x, &idx)?;
    s[0] = rows.len();
    Ok(f.g.reshape(flat, &s)?)
}
