use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

use super::gfi::{GfiStage, Pairing};
use super::layers::{from_tokens, to_tokens, BatchNorm, Conv2d, Linear};
use super::params::{Builder, Fwd, ParamStore};
use super::ssm::SsmBlock;
use super::{BlockKind, Modality, ModelConfig, ModelError, Result};

/// Strided patch/downsampling convolution followed by batch norm.
#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<T: Scalar>(b: &mut Builder<T>, cin: usize, cout: usize, k: usize, s: usize, bias: bool, eps: f64) -> Self {
        Self {
            conv: Conv2d::new(&mut b.scope("conv"), cin, cout, k, s, 0, bias),
            bn: BatchNorm::new(&mut b.scope("bn"), cout, eps),
        }
    }

    fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        self.bn.forward(f, y)
    }
}

/// `gelu(x + BN(conv(gelu(BN(conv(x))))))`, 3×3 convolutions.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl ConvBlock {
    fn new<T: Scalar>(b: &mut Builder<T>, c: usize, eps: f64) -> Self {
        Self {
            conv1: Conv2d::new(&mut b.scope("conv1"), c, c, 3, 1, 1, false),
            bn1: BatchNorm::new(&mut b.scope("bn1"), c, eps),
            conv2: Conv2d::new(&mut b.scope("conv2"), c, c, 3, 1, 1, false),
            bn2: BatchNorm::new(&mut b.scope("bn2"), c, eps),
        }
    }

    fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(f, x)?;
        let h = self.bn1.forward(f, h)?;
        let h = f.g.gelu(h);
        let h = self.conv2.forward(f, h)?;
        let h = self.bn2.forward(f, h)?;
        let y = f.g.add(x, h)?;
        Ok(f.g.gelu(y))
    }
}

#[derive(Debug, Clone)]
enum Blocks {
    Conv(Vec<ConvBlock>),
    Ssm(Vec<SsmBlock>),
}

#[derive(Debug, Clone)]
struct Stage {
    /// `None` for stage 0, whose downsampling is the modality-specific stem.
    down: Option<ConvBn>,
    blocks: Blocks,
}

impl Stage {
    fn forward_blocks<T: Scalar>(&self, f: &mut Fwd<T>, mut x: Var) -> Result<Var> {
        match &self.blocks {
            Blocks::Conv(bs) => {
                for b in bs {
                    x = b.forward(f, x)?;
                }
                Ok(x)
            }
            Blocks::Ssm(bs) => {
                let s = f.g.shape(x).to_vec();
                let mut t = to_tokens(f, x)?;
                for b in bs {
                    t = b.forward(f, t)?;
                }
                from_tokens(f, t, s[2], s[3])
            }
        }
    }
}

/// Strided conv encoder over `[SAR intensity, Harris mask]` producing a
/// geometric prior at each injection stage's resolution.
#[derive(Debug, Clone)]
pub struct AuxEncoder {
    layers: Vec<ConvBn>,
}

impl AuxEncoder {
    /// Prior maps for stages `0..layers.len()`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, geo: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut x = geo;
        for l in &self.layers {
            let y = l.forward(f, x)?;
            x = f.g.gelu(y);
            out.push(x);
        }
        Ok(out)
    }
}

/// 1×1 single-channel mask heads per modality at the shallow and deep stages.
#[derive(Debug, Clone)]
pub struct DsHeads {
    pub opt_shallow: Conv2d,
    pub opt_deep: Conv2d,
    pub sar_shallow: Conv2d,
    pub sar_deep: Conv2d,
}

impl DsHeads {
    pub fn head(&self, m: Modality, deep: bool) -> &Conv2d {
        match (m, deep) {
            (Modality::Opt, false) => &self.opt_shallow,
            (Modality::Opt, true) => &self.opt_deep,
            (Modality::Sar, false) => &self.sar_shallow,
            (Modality::Sar, true) => &self.sar_deep,
        }
    }
}

/// Mask logits `[n,1,h,w]` per modality and depth; absent when the batch has
/// no samples of that modality.
#[derive(Debug, Clone, Default)]
pub struct DsMaps {
    pub opt_shallow: Option<Var>,
    pub opt_deep: Option<Var>,
    pub sar_shallow: Option<Var>,
    pub sar_deep: Option<Var>,
}

/// A batch: optical rows first, then SAR rows, in the output tensors too.
#[derive(Debug, Clone)]
pub struct ModelInput<T> {
    /// `[No, C, H, W]`
    pub opt: Option<Tensor<T>>,
    /// `[Ns, C, H, W]`
    pub sar: Option<Tensor<T>>,
    /// `[Ns, 2, H, W]`: SAR intensity and Harris mask. Needed when injection
    /// is on and SAR samples are present.
    pub sar_geo: Option<Tensor<T>>,
    pub pairing: Pairing,
}

#[derive(Debug, Clone)]
pub struct Outputs {
    pub n_opt: usize,
    pub n_sar: usize,
    /// Stage outputs over the whole batch (after injection where enabled).
    pub stages: Vec<Var>,
    /// Pooled and projected embedding `[N, embed_dim]`.
    pub embedding: Var,
    /// Batch-norm neck output.
    pub neck: Var,
    /// `[N, num_classes]`
    pub logits: Var,
    pub ds: DsMaps,
}

#[derive(Debug, Clone)]
pub struct GeoMamba {
    pub cfg: ModelConfig,
    stem_opt: ConvBn,
    stem_sar: ConvBn,
    stages: Vec<Stage>,
    gfi: Vec<Option<GfiStage>>,
    aux: AuxEncoder,
    pub ds: DsHeads,
    embed: Linear,
    neck: BatchNorm,
    classifier: Linear,
}

impl GeoMamba {
    /// Builds the network and its freshly initialized parameters.
    pub fn new<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let eps = cfg.bn_eps;
        let st = &cfg.stages;
        let (c0, s0) = (st[0].channels, st[0].stride);
        let stem_opt = ConvBn::new(&mut b.scope("stem_opt"), cfg.in_channels, c0, s0, s0, true, eps);
        let stem_sar = ConvBn::new(&mut b.scope("stem_sar"), cfg.in_channels, c0, s0, s0, true, eps);
        let mut stages = Vec::new();
        for (i, s) in st.iter().enumerate() {
            let mut sb = b.scope(&format!("stage{i}"));
            let down = (i > 0).then(|| {
                ConvBn::new(&mut sb.scope("down"), st[i - 1].channels, s.channels, s.stride, s.stride, false, eps)
            });
            let blocks = match s.kind {
                BlockKind::Conv => Blocks::Conv(
                    (0..s.depth)
                        .map(|j| ConvBlock::new(&mut sb.scope(&format!("block{j}")), s.channels, eps))
                        .collect(),
                ),
                BlockKind::SsmMixer => Blocks::Ssm(
                    (0..s.depth)
                        .map(|j| {
                            SsmBlock::new(
                                &mut sb.scope(&format!("block{j}")),
                                s.channels,
                                cfg.state_dim,
                                cfg.mlp_ratio,
                                cfg.ln_eps,
                            )
                        })
                        .collect(),
                ),
            };
            stages.push(Stage { down, blocks });
        }
        // The auxiliary encoder and injection modules always exist so that
        // checkpoints of every ablation variant share one layout.
        let last_gfi = st.iter().rposition(|s| s.gfi);
        let mut aux_layers = Vec::new();
        if let Some(last) = last_gfi {
            let mut ab = b.scope("aux");
            let mut cin = 2;
            for (i, s) in st[..=last].iter().enumerate() {
                aux_layers.push(ConvBn::new(
                    &mut ab.scope(&format!("layer{i}")),
                    cin,
                    s.channels,
                    s.stride,
                    s.stride,
                    true,
                    eps,
                ));
                cin = s.channels;
            }
        }
        let mut gfi = Vec::new();
        for (i, s) in st.iter().enumerate() {
            gfi.push(if s.gfi {
                Some(GfiStage::new(
                    &mut b.scope(&format!("gfi{i}")),
                    s.channels,
                    s.channels,
                    cfg.heads,
                    cfg.mlp_ratio,
                    cfg.ln_eps,
                )?)
            } else {
                None
            });
        }
        let c3 = st[3].channels;
        let dk = cfg.ds_kernel;
        let mut db = b.scope("ds");
        let ds = DsHeads {
            opt_shallow: Conv2d::new(&mut db.scope("opt_shallow"), c0, 1, dk, 1, dk / 2, true),
            opt_deep: Conv2d::new(&mut db.scope("opt_deep"), c3, 1, dk, 1, dk / 2, true),
            sar_shallow: Conv2d::new(&mut db.scope("sar_shallow"), c0, 1, dk, 1, dk / 2, true),
            sar_deep: Conv2d::new(&mut db.scope("sar_deep"), c3, 1, dk, 1, dk / 2, true),
        };
        let embed = Linear::new(&mut b.scope("embed"), c3, cfg.embed_dim, true, false);
        let neck = BatchNorm::new(&mut b.scope("neck"), cfg.embed_dim, eps);
        let classifier = Linear::new(&mut b.scope("classifier"), cfg.embed_dim, cfg.num_classes, false, false);
        if cfg.freeze_aux {
            store.set_trainable("aux.", false);
        }
        Ok((
            Self {
                cfg,
                stem_opt,
                stem_sar,
                stages,
                gfi,
                aux: AuxEncoder { layers: aux_layers },
                ds,
                embed,
                neck,
                classifier,
            },
            store,
        ))
    }

    fn check_images<T: Scalar>(&self, t: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
        let s = t.shape();
        let side = self.cfg.image_size;
        if s.len() != 4 || s[1] != channels || s[2] != side || s[3] != side {
            return Err(ModelError::Input(format!(
                "{what}: expected [N,{channels},{side},{side}], got {s:?}"
            )));
        }
        Ok(())
    }

    pub fn gfi_stage(&self, i: usize) -> Option<&GfiStage> {
        self.gfi.get(i).and_then(|g| g.as_ref())
    }

    /// Stem output before normalization, for inspection.
    pub fn stem_conv<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, m: Modality) -> Result<Var> {
        let stem = match m {
            Modality::Opt => &self.stem_opt,
            Modality::Sar => &self.stem_sar,
        };
        stem.conv.forward(f, x)
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, input: &ModelInput<T>) -> Result<Outputs> {
        let cfg = &self.cfg;
        let gfi_stages = cfg.gfi_stages();
        let n_opt = input.opt.as_ref().map_or(0, |t| t.shape()[0]);
        let n_sar = input.sar.as_ref().map_or(0, |t| t.shape()[0]);
        if n_opt + n_sar == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut parts = Vec::new();
        if let Some(t) = &input.opt {
            self.check_images(t, cfg.in_channels, "optical batch")?;
            let x = f.g.constant(t.clone());
            parts.push(self.stem_opt.forward(f, x)?);
        }
        if let Some(t) = &input.sar {
            self.check_images(t, cfg.in_channels, "SAR batch")?;
            let x = f.g.constant(t.clone());
            parts.push(self.stem_sar.forward(f, x)?);
        }
        let mut x = if parts.len() == 1 {
            parts[0]
        } else {
            f.g.concat(&parts, 0)?
        };

        let priors = if !gfi_stages.is_empty() && n_sar > 0 {
            let geo = input
                .sar_geo
                .as_ref()
                .ok_or_else(|| ModelError::Input("injection enabled but no geometric input".into()))?;
            self.check_images(geo, 2, "geometric input")?;
            if geo.shape()[0] != n_sar {
                return Err(ModelError::Input("geometric input batch differs from SAR batch".into()));
            }
            let gv = f.g.constant(geo.clone());
            self.aux.forward(f, gv)?
        } else {
            Vec::new()
        };

        let mut stage_out = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(d) = &stage.down {
                x = d.forward(f, x)?;
            }
            x = stage.forward_blocks(f, x)?;
            if let (true, Some(gfi)) = (gfi_stages.contains(&i), &self.gfi[i]) {
                x = self.inject(f, gfi, x, n_opt, n_sar, priors.get(i).copied(), &input.pairing)?;
            }
            stage_out.push(x);
        }

        let ds = DsMaps {
            opt_shallow: self.ds_map(f, stage_out[0], Modality::Opt, false, n_opt, n_sar)?,
            opt_deep: self.ds_map(f, stage_out[3], Modality::Opt, true, n_opt, n_sar)?,
            sar_shallow: self.ds_map(f, stage_out[0], Modality::Sar, false, n_opt, n_sar)?,
            sar_deep: self.ds_map(f, stage_out[3], Modality::Sar, true, n_opt, n_sar)?,
        };

        let pooled = f.g.global_avg_pool(stage_out[3])?;
        let embedding = self.embed.forward(f, pooled)?;
        let neck = self.neck.forward(f, embedding)?;
        let logits = self.classifier.forward(f, neck)?;
        Ok(Outputs {
            n_opt,
            n_sar,
            stages: stage_out,
            embedding,
            neck,
            logits,
            ds,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn inject<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        gfi: &GfiStage,
        x: Var,
        n_opt: usize,
        n_sar: usize,
        prior: Option<Var>,
        pairing: &Pairing,
    ) -> Result<Var> {
        let xo = (n_opt > 0).then(|| f.g.slice(x, 0, 0, n_opt)).transpose()?;
        let xs = (n_sar > 0)
            .then(|| f.g.slice(x, 0, n_opt, n_opt + n_sar))
            .transpose()?;
        let (o, s) = gfi.forward(f, xo, xs, prior, pairing)?;
        let parts: Vec<Var> = o.into_iter().chain(s).collect();
        Ok(if parts.len() == 1 {
            parts[0]
        } else {
            f.g.concat(&parts, 0)?
        })
    }

    fn ds_map<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        x: Var,
        m: Modality,
        deep: bool,
        n_opt: usize,
        n_sar: usize,
    ) -> Result<Option<Var>> {
        let (lo, hi) = match m {
            Modality::Opt => (0, n_opt),
            Modality::Sar => (n_opt, n_opt + n_sar),
        };
        if lo == hi {
            return Ok(None);
        }
        let part = if hi - lo == n_opt + n_sar {
            x
        } else {
            f.g.slice(x, 0, lo, hi)?
        };
        Ok(Some(self.ds.head(m, deep).forward(f, part)?))
    }

    /// Eval-mode embeddings for a single-modality batch, self-paired.
    pub fn embed<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: Tensor<T>,
        modality: Modality,
        geo: Option<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let input = match modality {
            Modality::Opt => ModelInput {
                opt: Some(images),
                sar: None,
                sar_geo: None,
                pairing: Pairing::SelfPaired,
            },
            Modality::Sar => ModelInput {
                opt: None,
                sar: Some(images),
                sar_geo: geo,
                pairing: Pairing::SelfPaired,
            },
        };
        let mut f = Fwd::new(store, false);
        let out = self.forward(&mut f, &input)?;
        Ok(f.g.value(out.embedding).clone())
    }
}
