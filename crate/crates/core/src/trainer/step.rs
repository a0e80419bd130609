use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_update, AdamWState};
use super::sampler::{pk_sample, PkBatch, PkPool};
use super::{Result, RunConfig, TrainError};
use crate::imgproc::{downsample_mask, BinaryMask};
use crate::losses::{
    gcc_loss, identity_loss, stack_masks, total_loss, triplet_loss, LossBreakdown, MaskTerm, ModalityMasks,
};
use crate::model::{Fwd, GeoMamba, ModelInput, Pairing, ParamStore};
use crate::synthdata::{augment, geo_tensor, images_tensor, Dataset, Planes};
use crate::tensor::Tensor;

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub id: f64,
    pub triplet: f64,
    pub gcc: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub valid_anchors: usize,
    pub with_replacement: bool,
}

impl StepRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            id: self.id,
            triplet: self.triplet,
            gcc: self.gcc,
            total: self.total,
        }
    }

    pub const CSV_HEADER: &'static str = "step,epoch,lr,id,triplet,gcc,total,grad_norm,valid_anchors,with_replacement";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.id,
            self.triplet,
            self.gcc,
            self.total,
            self.grad_norm,
            self.valid_anchors,
            self.with_replacement
        )
    }
}

/// Model, parameters, optimizer state and the sampling/augmentation stream.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: GeoMamba,
    pub store: ParamStore<f64>,
    pub opt: AdamWState,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    /// Builds the model from `cfg.seed`. With `lambda_gcc = 0` the
    /// deep-supervision heads are frozen.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, mut store) = GeoMamba::new::<f64>(cfg.model_config(), cfg.seed)?;
        if cfg.loss.lambda_gcc == 0.0 {
            store.set_trainable("ds.", false);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let opt = AdamWState::new(store.len());
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            rng,
            step: 0,
        })
    }

    pub fn sample_batch(&mut self, pool: &PkPool) -> Result<PkBatch> {
        pk_sample(pool, self.cfg.p, self.cfg.k, &mut self.rng).map_err(TrainError::Config)
    }

    fn augmented(&mut self, ds: &Dataset, idx: &[usize]) -> Vec<(Planes, BinaryMask)> {
        idx.iter()
            .map(|&i| {
                let s = &ds.samples[i];
                let (img, mask) = augment(&s.image, Some(&s.mask), &self.cfg.augment, &mut self.rng);
                (img, mask.expect("mask passed"))
            })
            .collect()
    }

    /// Forward, composite loss, backward, BN running-stat update and one
    /// AdamW step at learning rate `lr`.
    pub fn train_step(&mut self, ds: &Dataset, batch: &PkBatch, lr: f64, epoch: usize) -> Result<StepRecord> {
        let opt_items = self.augmented(ds, &batch.opt);
        let sar_items = self.augmented(ds, &batch.sar);
        let mcfg = &self.model.cfg;
        let c = mcfg.in_channels;
        let opt_imgs: Vec<&Planes> = opt_items.iter().map(|(p, _)| p).collect();
        let sar_imgs: Vec<&Planes> = sar_items.iter().map(|(p, _)| p).collect();
        let geo = (!mcfg.gfi_stages().is_empty()).then(|| {
            let items: Vec<(&Planes, &BinaryMask)> = sar_items.iter().map(|(p, m)| (p, m)).collect();
            geo_tensor::<f64>(&items)
        });
        let n = batch.opt.len();
        let input = ModelInput {
            opt: Some(images_tensor::<f64>(&opt_imgs, c)),
            sar: Some(images_tensor::<f64>(&sar_imgs, c)),
            sar_geo: geo,
            pairing: Pairing::Partners {
                opt_partner: (0..n).collect(),
                sar_partner: (0..batch.sar.len()).collect(),
            },
        };
        let labels: Vec<usize> = batch.labels.iter().chain(&batch.labels).copied().collect();
        let w = self.cfg.loss.clone();

        let mut f = Fwd::new(&self.store, true);
        let out = self.model.forward(&mut f, &input)?;
        let id = identity_loss(&mut f.g, out.logits, &labels, w.label_smoothing)?;
        let tri = triplet_loss(&mut f.g, out.embedding, &labels, w.margin)?;
        let gcc = if w.lambda_gcc > 0.0 {
            let side = |i: usize| mcfg.stage_side(i);
            let targets = |items: &[(Planes, BinaryMask)], s: usize| -> Result<Vec<bool>> {
                let factor = mcfg.image_size / s;
                let ms = items
                    .iter()
                    .map(|(_, m)| downsample_mask(m, factor))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                Ok(stack_masks(&ms.iter().collect::<Vec<_>>()))
            };
            let last = mcfg.stages.len() - 1;
            let masks = |items, shallow: Option<_>, deep: Option<_>| -> Result<Option<ModalityMasks>> {
                Ok(match (shallow, deep) {
                    (Some(s), Some(d)) => Some(ModalityMasks {
                        deep: MaskTerm {
                            logits: d,
                            target: targets(items, side(last))?,
                        },
                        shallow: MaskTerm {
                            logits: s,
                            target: targets(items, side(0))?,
                        },
                    }),
                    _ => None,
                })
            };
            let om = masks(&opt_items, out.ds.opt_shallow, out.ds.opt_deep)?;
            let sm = masks(&sar_items, out.ds.sar_shallow, out.ds.sar_deep)?;
            gcc_loss(&mut f.g, om.as_ref(), sm.as_ref(), &w)?.loss
        } else {
            f.g.constant(Tensor::scalar(0.0))
        };
        let total = total_loss(&mut f.g, id, tri.loss, gcc, &w)?;
        let value = |v| f.g.value(v).item();
        let (lid, ltri, lgcc, ltot) = (value(id), value(tri.loss), value(gcc), value(total));
        let batch_ids = || {
            batch
                .opt
                .iter()
                .chain(&batch.sar)
                .map(|&i| ds.samples[i].record.id.clone())
                .collect::<Vec<_>>()
        };
        if !ltot.is_finite() {
            return Err(TrainError::NonFinite {
                what: "loss".into(),
                step: self.step,
                ids: batch_ids(),
            });
        }
        f.g.backward(total)?;
        let grads = f.grads();
        let grad_norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                what: "gradient".into(),
                step: self.step,
                ids: batch_ids(),
            });
        }
        let bn_stats = std::mem::take(&mut f.bn_stats);
        drop(f);
        let momentum = self.cfg.model.bn_momentum;
        for (id, st) in &bn_stats {
            self.store.update_running(*id, st, momentum);
        }
        adamw_update(&mut self.store, &grads, &mut self.opt, lr, &self.cfg.optimizer);
        let rec = StepRecord {
            step: self.step,
            epoch,
            lr,
            id: lid,
            triplet: ltri,
            gcc: lgcc,
            total: ltot,
            grad_norm,
            valid_anchors: tri.valid_anchors,
            with_replacement: batch.with_replacement,
        };
        self.step += 1;
        Ok(rec)
    }
}
