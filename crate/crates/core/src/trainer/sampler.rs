use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::model::Modality;
use crate::synthdata::{Dataset, Split};

/// Training pool grouped by label, per modality.
#[derive(Debug, Clone)]
pub struct PkPool {
    /// `label → (optical indices, SAR indices)`
    pub by_label: BTreeMap<usize, (Vec<usize>, Vec<usize>)>,
}

impl PkPool {
    pub fn from_dataset(ds: &Dataset, split: Split) -> Self {
        let mut by_label: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, s) in ds.samples.iter().enumerate() {
            if s.record.split != split {
                continue;
            }
            let e = by_label.entry(s.record.label).or_default();
            match s.record.modality {
                Modality::Opt => e.0.push(i),
                Modality::Sar => e.1.push(i),
            }
        }
        Self { by_label }
    }

    /// Labels with at least one sample in both modalities.
    pub fn eligible(&self) -> Vec<usize> {
        self.by_label
            .iter()
            .filter(|(_, (o, s))| !o.is_empty() && !s.is_empty())
            .map(|(&l, _)| l)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PkBatch {
    /// `P·K` optical dataset indices, grouped by label.
    pub opt: Vec<usize>,
    /// `P·K` SAR dataset indices, same label order as `opt`.
    pub sar: Vec<usize>,
    /// Label of each row of `opt` (and of `sar`).
    pub labels: Vec<usize>,
    /// Some label had fewer than `K` samples in a modality.
    pub with_replacement: bool,
}

/// Draws `p` distinct labels and `k` samples of each per modality. Labels
/// short of `k` samples in a modality are drawn with replacement.
pub fn pk_sample(pool: &PkPool, p: usize, k: usize, rng: &mut impl Rng) -> Result<PkBatch, String> {
    let eligible = pool.eligible();
    if p == 0 || k == 0 {
        return Err("P and K must be positive".into());
    }
    if eligible.len() < p {
        return Err(format!("need {p} labels with both modalities, have {}", eligible.len()));
    }
    let labels: Vec<usize> = eligible.choose_multiple(rng, p).copied().collect();
    let mut batch = PkBatch {
        opt: Vec::with_capacity(p * k),
        sar: Vec::with_capacity(p * k),
        labels: Vec::with_capacity(p * k),
        with_replacement: false,
    };
    for &l in &labels {
        let (o, s) = &pool.by_label[&l];
        for (src, dst) in [(o, &mut batch.opt), (s, &mut batch.sar)] {
            if src.len() >= k {
                let mut pick: Vec<usize> = src.choose_multiple(rng, k).copied().collect();
                pick.shuffle(rng);
                dst.extend(pick);
            } else {
                batch.with_replacement = true;
                dst.extend((0..k).map(|_| src[rng.random_range(0..src.len())]));
            }
        }
        batch.labels.extend(std::iter::repeat_n(l, k));
    }
    Ok(batch)
}
