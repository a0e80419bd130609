//! Geometric feature injection: a geometric prior is injected into SAR
//! features by cross-attention, then the two streams exchange information.

use crate::scalar::Scalar;
use crate::tensor::Var;

use super::layers::{from_tokens, gather_rows, to_tokens, CrossAttention, LayerNorm, Mlp};
use super::params::{Builder, Fwd};
use super::{ModelError, Result};

/// `X̃_sar = X_sar + CrossAttn(Q = X_sar, K = V = X_geo)` on feature maps.
#[derive(Debug, Clone)]
pub struct GfiInject {
    pub attn: CrossAttention,
}

impl GfiInject {
    pub fn new<T: Scalar>(b: &mut Builder<T>, dim: usize, geo_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: CrossAttention::new(&mut b.scope("attn"), dim, geo_dim, heads)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x_sar: Var, x_geo: Var) -> Result<Var> {
        let (ss, sg) = (f.g.shape(x_sar).to_vec(), f.g.shape(x_geo).to_vec());
        if ss.len() != 4 || sg.len() != 4 || ss[0] != sg[0] || ss[2..] != sg[2..] {
            return Err(ModelError::Shape(format!(
                "geometric prior {sg:?} does not match SAR features {ss:?}"
            )));
        }
        let q = to_tokens(f, x_sar)?;
        let kv = to_tokens(f, x_geo)?;
        let a = self.attn.forward(f, q, kv)?;
        let a = from_tokens(f, a, ss[2], ss[3])?;
        Ok(f.g.add(x_sar, a)?)
    }
}

/// `F_cross(X_q, X_kv) = X_q′ + MLP(LN(X_q′))`, `X_q′ = X_q + MHCA(X_q, X_kv)`.
#[derive(Debug, Clone)]
pub struct GfiCross {
    pub attn: CrossAttention,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl GfiCross {
    pub fn new<T: Scalar>(b: &mut Builder<T>, dim: usize, heads: usize, mlp_ratio: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            attn: CrossAttention::new(&mut b.scope("attn"), dim, dim, heads)?,
            norm: LayerNorm::new(&mut b.scope("norm"), dim, eps),
            mlp: Mlp::new(&mut b.scope("mlp"), dim, mlp_ratio),
        })
    }

    /// Maps in, map out with the shape of `xq`; `xkv` may differ spatially.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, xq: Var, xkv: Var) -> Result<Var> {
        let (sq, skv) = (f.g.shape(xq).to_vec(), f.g.shape(xkv).to_vec());
        if sq.len() != 4 || skv.len() != 4 || sq[1] != skv[1] || sq[0] != skv[0] {
            return Err(ModelError::Shape(format!(
                "cross interaction widths differ: {sq:?} vs {skv:?}"
            )));
        }
        let q = to_tokens(f, xq)?;
        let kv = to_tokens(f, xkv)?;
        let a = self.attn.forward(f, q, kv)?;
        let x1 = f.g.add(q, a)?;
        let h = self.norm.forward(f, x1)?;
        let h = self.mlp.forward(f, h)?;
        let out = f.g.add(x1, h)?;
        from_tokens(f, out, sq[2], sq[3])
    }
}

/// Which sample of the other modality each sample interacts with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pairing {
    /// Every sample attends to its own stream (single-image inference).
    SelfPaired,
    /// `opt_partner[i]` indexes the SAR batch, `sar_partner[j]` the optical
    /// batch.
    Partners {
        opt_partner: Vec<usize>,
        sar_partner: Vec<usize>,
    },
}

/// Injection plus symmetric cross interaction at one stage.
#[derive(Debug, Clone)]
pub struct GfiStage {
    pub inject: GfiInject,
    pub cross: GfiCross,
}

impl GfiStage {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        dim: usize,
        geo_dim: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            inject: GfiInject::new(&mut b.scope("inject"), dim, geo_dim, heads)?,
            cross: GfiCross::new(&mut b.scope("cross"), dim, heads, mlp_ratio, eps)?,
        })
    }

    /// Returns `(X̂_opt, X̂_sar)`. Either stream may be absent, in which case
    /// the other is self-paired.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        x_opt: Option<Var>,
        x_sar: Option<Var>,
        geo: Option<Var>,
        pairing: &Pairing,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let sar_t = match (x_sar, geo) {
            (Some(s), Some(g)) => Some(self.inject.forward(f, s, g)?),
            (Some(_), None) => return Err(ModelError::Input("SAR stream without geometric prior".into())),
            (None, _) => None,
        };
        match (pairing, x_opt, sar_t) {
            (
                Pairing::Partners {
                    opt_partner,
                    sar_partner,
                },
                Some(o),
                Some(s),
            ) => {
                let kv_o = gather_rows(f, s, opt_partner)?;
                let kv_s = gather_rows(f, o, sar_partner)?;
                let o_hat = self.cross.forward(f, o, kv_o)?;
                let s_hat = self.cross.forward(f, s, kv_s)?;
                Ok((Some(o_hat), Some(s_hat)))
            }
            (Pairing::Partners { .. }, _, _) => Err(ModelError::Input(
                "partner pairing needs both modalities".into(),
            )),
            (Pairing::SelfPaired, o, s) => {
                let o_hat = o.map(|o| self.cross.forward(f, o, o)).transpose()?;
                let s_hat = s.map(|s| self.cross.forward(f, s, s)).transpose()?;
                Ok((o_hat, s_hat))
            }
        }
    }
}
