//! Retrieval and geometric-supervision objectives.

use serde::{Deserialize, Serialize};

use crate::imgproc::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Result, TensorError, Var};

/// Loss weights and loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_tri: f64,
    pub margin: f64,
    pub lambda_gcc: f64,
    pub lambda_deep: f64,
    pub lambda_shallow: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_tri: 1.0,
            margin: 0.3,
            lambda_gcc: 10.0,
            lambda_deep: 1.0,
            lambda_shallow: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            label_smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let named = [
            ("lambda_tri", self.lambda_tri),
            ("margin", self.margin),
            ("lambda_gcc", self.lambda_gcc),
            ("lambda_deep", self.lambda_deep),
            ("lambda_shallow", self.lambda_shallow),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(format!("focal_alpha must lie in [0,1], got {}", self.focal_alpha));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(format!("label_smoothing must lie in [0,1), got {}", self.label_smoothing));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TripletOutput {
    pub loss: Var,
    pub valid_anchors: usize,
    /// Set when no anchor had both a positive and a negative; `loss` is then
    /// a constant zero.
    pub all_skipped: bool,
}

/// Hardest positive / hardest negative per anchor from a distance matrix.
/// `None` when the anchor lacks a positive (other than itself) or a negative.
pub fn hardest_pairs<T: Scalar>(dist: &[T], labels: &[usize]) -> Vec<Option<(usize, usize)>> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                let d = dist[i * n + j];
                if j != i && labels[j] == labels[i] {
                    if pos.is_none_or(|p| d > dist[i * n + p]) {
                        pos = Some(j);
                    }
                } else if labels[j] != labels[i] && neg.is_none_or(|q| d < dist[i * n + q]) {
                    neg = Some(j);
                }
            }
            pos.zip(neg)
        })
        .collect()
}

/// Batch-hard triplet loss on `emb: [N,D]`: mean over valid anchors of
/// `max(0, d(a,p*) − d(a,n*) + margin)` with Euclidean distances.
pub fn triplet_loss<T: Scalar>(g: &mut Graph<T>, emb: Var, labels: &[usize], margin: T) -> Result<TripletOutput> {
    let s = g.shape(emb).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(TensorError::mismatch("triplet_loss", &s, &[labels.len()]));
    }
    let n = labels.len();
    let dist = g.l2_distance_matrix(emb)?;
    let pairs = hardest_pairs(g.data(dist), labels);
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if let Some((p, q)) = p {
            pos_idx.push(i * n + p);
            neg_idx.push(i * n + q);
        }
    }
    if pos_idx.is_empty() {
        let zero = g.constant(crate::tensor::Tensor::scalar(T::zero()));
        return Ok(TripletOutput {
            loss: zero,
            valid_anchors: 0,
            all_skipped: true,
        });
    }
    let dp = g.gather(dist, &pos_idx)?;
    let dn = g.gather(dist, &neg_idx)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    Ok(TripletOutput {
        loss: g.mean(hinge),
        valid_anchors: pos_idx.len(),
        all_skipped: false,
    })
}

/// Label-smoothed cross-entropy of classifier logits.
pub fn identity_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], smoothing: T) -> Result<Var> {
    g.cross_entropy_logits(logits, labels, smoothing)
}

/// Mean sigmoid focal loss of a mask-logit map against a binary mask with
/// the same number of pixels.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &[bool], alpha: T, gamma: T) -> Result<Var> {
    g.focal_loss(logits, target, alpha, gamma)
}

/// Concatenated pixels of a batch of masks, in batch order.
pub fn stack_masks(masks: &[&BinaryMask]) -> Vec<bool> {
    masks.iter().flat_map(|m| m.data().iter().copied()).collect()
}

/// One predicted mask map and its pseudo-label target.
#[derive(Debug, Clone)]
pub struct MaskTerm {
    pub logits: Var,
    pub target: Vec<bool>,
}

/// Deep and shallow predictions of one modality.
#[derive(Debug, Clone)]
pub struct ModalityMasks {
    pub deep: MaskTerm,
    pub shallow: MaskTerm,
}

#[derive(Debug, Clone, Copy)]
pub struct GccOutput {
    pub loss: Var,
    /// Unweighted focal terms `[opt_deep, opt_shallow, sar_deep, sar_shallow]`
    /// (zero when absent).
    pub terms: [f64; 4],
}

/// `Σ_m λ_deep·focal(M_m^deep, Y_m) + λ_shallow·focal(M_m^shallow, Y_m)` over
/// the modalities present.
pub fn gcc_loss<T: Scalar>(
    g: &mut Graph<T>,
    opt: Option<&ModalityMasks>,
    sar: Option<&ModalityMasks>,
    w: &LossWeights,
) -> Result<GccOutput> {
    let (alpha, gamma) = (T::lit(w.focal_alpha), T::lit(w.focal_gamma));
    let mut acc: Option<Var> = None;
    let mut terms = [0.0; 4];
    for (slot, m) in [(0, opt), (2, sar)] {
        let Some(m) = m else { continue };
        for (k, term, lambda) in [(0, &m.deep, w.lambda_deep), (1, &m.shallow, w.lambda_shallow)] {
            let f = focal_loss(g, term.logits, &term.target, alpha, gamma)?;
            terms[slot + k] = g.value(f).item().to_f64_lossy();
            let weighted = g.scale(f, T::lit(lambda));
            acc = Some(match acc {
                None => weighted,
                Some(a) => g.add(a, weighted)?,
            });
        }
    }
    let loss = match acc {
        Some(v) => v,
        None => g.constant(crate::tensor::Tensor::scalar(T::zero())),
    };
    Ok(GccOutput { loss, terms })
}

/// `L_id + λ_tri·L_tri + λ_GCC·L_GCC`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, id: Var, tri: Var, gcc: Var, w: &LossWeights) -> Result<Var> {
    let t = g.scale(tri, T::lit(w.lambda_tri));
    let c = g.scale(gcc, T::lit(w.lambda_gcc));
    let r = g.add(id, t)?;
    g.add(r, c)
}

/// Loss values of one step, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id: f64,
    pub triplet: f64,
    pub gcc: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total − (L_id + λ_tri·L_tri + λ_GCC·L_GCC)`, recomputed from the parts.
    pub fn residual(&self, w: &LossWeights) -> f64 {
        self.total - (self.id + w.lambda_tri * self.triplet + w.lambda_gcc * self.gcc)
    }
}
