//! Retrieval evaluation under the all-to-all, optical-to-SAR and
//! SAR-to-optical protocols: ranking, average precision, mAP and Rank-k.

mod io;

pub use io::{
    read_embeddings, read_metrics_json, write_embeddings, write_metrics_csv, write_metrics_json,
    write_ranked_lists, EvalIoError, SidecarRecord,
};

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::Modality;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
}

/// Row-aligned embeddings with labels, modalities, roles and sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    pub dim: usize,
    pub features: Vec<T>,
    pub labels: Vec<usize>,
    pub modality: Vec<Modality>,
    pub roles: Vec<Role>,
    pub ids: Vec<String>,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn new(
        dim: usize,
        features: Vec<T>,
        labels: Vec<usize>,
        modality: Vec<Modality>,
        roles: Vec<Role>,
        ids: Vec<String>,
    ) -> Result<Self, String> {
        let n = labels.len();
        if dim == 0 || features.len() != n * dim || modality.len() != n || roles.len() != n || ids.len() != n {
            return Err(format!(
                "misaligned embedding set: {} values, dim {dim}, {n} labels, {} modalities, {} roles, {} ids",
                features.len(),
                modality.len(),
                roles.len(),
                ids.len()
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err("embedding set contains non-finite values".into());
        }
        Ok(Self {
            dim,
            features,
            labels,
            modality,
            roles,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows with the given role, in order.
    pub fn with_role(&self, role: Role) -> Self {
        self.select(|i| self.roles[i] == role)
    }

    pub fn select(&self, keep: impl Fn(usize) -> bool) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            dim: self.dim,
            features: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            modality: rows.iter().map(|&i| self.modality[i]).collect(),
            roles: rows.iter().map(|&i| self.roles[i]).collect(),
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Same rows in another order: row `k` of the result is row `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            dim: self.dim,
            features: order.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            modality: order.iter().map(|&i| self.modality[i]).collect(),
            roles: order.iter().map(|&i| self.roles[i]).collect(),
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[serde(alias = "all")]
    AllToAll,
    #[serde(alias = "o2s")]
    OptToSar,
    #[serde(alias = "s2o")]
    SarToOpt,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::AllToAll, Protocol::OptToSar, Protocol::SarToOpt];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::AllToAll => "all_to_all",
            Protocol::OptToSar => "opt_to_sar",
            Protocol::SarToOpt => "sar_to_opt",
        }
    }

    pub fn spec(self) -> ProtocolSpec {
        match self {
            Protocol::AllToAll => ProtocolSpec {
                protocol: self,
                query_modality: None,
                gallery_modality: None,
                exclude_self: true,
            },
            Protocol::OptToSar => ProtocolSpec {
                protocol: self,
                query_modality: Some(Modality::Opt),
                gallery_modality: Some(Modality::Sar),
                exclude_self: true,
            },
            Protocol::SarToOpt => ProtocolSpec {
                protocol: self,
                query_modality: Some(Modality::Sar),
                gallery_modality: Some(Modality::Opt),
                exclude_self: true,
            },
        }
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" | "all_to_all" => Ok(Protocol::AllToAll),
            "o2s" | "opt_to_sar" => Ok(Protocol::OptToSar),
            "s2o" | "sar_to_opt" => Ok(Protocol::SarToOpt),
            other => Err(format!("unknown protocol {other:?} (expected all, o2s or s2o)")),
        }
    }
}

/// Query/gallery modality filters and the self-match rule of a protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub protocol: Protocol,
    pub query_modality: Option<Modality>,
    pub gallery_modality: Option<Modality>,
    /// Drop gallery items whose sample id equals the query's.
    pub exclude_self: bool,
}

impl ProtocolSpec {
    pub fn accepts_query(&self, m: Modality) -> bool {
        self.query_modality.is_none_or(|q| q == m)
    }

    pub fn accepts_gallery(&self, m: Modality) -> bool {
        self.gallery_modality.is_none_or(|g| g == m)
    }
}

pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Admissible gallery indices for a query, ascending by distance; ties go to
/// the smaller sample id.
pub fn rank_gallery<T: Scalar>(
    query: &[T],
    query_id: &str,
    gallery: &EmbeddingSet<T>,
    spec: &ProtocolSpec,
) -> Vec<(usize, f64)> {
    let dists: Vec<f64> = (0..gallery.len()).map(|j| euclidean(query, gallery.row(j))).collect();
    rank_with_distances(&dists, query_id, gallery, spec)
}

fn rank_with_distances<T>(
    dists: &[f64],
    query_id: &str,
    gallery: &EmbeddingSet<T>,
    spec: &ProtocolSpec,
) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = (0..gallery.labels.len())
        .filter(|&j| spec.accepts_gallery(gallery.modality[j]))
        .filter(|&j| !(spec.exclude_self && gallery.ids[j] == query_id))
        .map(|j| (j, dists[j]))
        .collect();
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| gallery.ids[a.0].cmp(&gallery.ids[b.0]))
    });
    ranked
}

/// `AP = (1/R) Σ_{k relevant} precision@k`; `None` without relevant items.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| acc / hits as f64)
}

/// Expected AP of a uniformly random ranking of `n` items, `r` relevant:
/// `(1/n)·[H_n + (r−1)/(n−1)·(n − H_n)]`.
pub fn random_ranking_ap(n: usize, r: usize) -> f64 {
    assert!(r >= 1 && r <= n, "need 1 <= r <= n");
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    if n == 1 {
        return 1.0;
    }
    (h + (r - 1) as f64 / (n - 1) as f64 * (n as f64 - h)) / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub protocol: Protocol,
    pub map: f64,
    pub rank1: f64,
    pub rank3: f64,
    pub rank5: f64,
    /// Queries that entered the averages.
    pub queries: usize,
    /// Queries skipped for having no relevant gallery item.
    pub excluded: usize,
    /// Mean expected AP of a random ranking over the same queries.
    pub random_map: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Query rows per distance block.
    pub block: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { block: 64 }
    }
}

/// mAP and Rank-{1,3,5} of `query` against `gallery`. Relevance is label
/// equality irrespective of modality.
pub fn evaluate<T: Scalar>(
    query: &EmbeddingSet<T>,
    gallery: &EmbeddingSet<T>,
    protocol: Protocol,
    opts: EvalOptions,
) -> Result<Metrics, String> {
    if query.dim != gallery.dim {
        return Err(format!("dimension mismatch: {} vs {}", query.dim, gallery.dim));
    }
    let spec = protocol.spec();
    let qrows: Vec<usize> = (0..query.len()).filter(|&i| spec.accepts_query(query.modality[i])).collect();
    let block = opts.block.max(1);
    let (mut ap_sum, mut r1, mut r3, mut r5, mut rand_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut valid, mut excluded) = (0usize, 0usize);
    let mut dists = vec![0.0; block * gallery.len()];
    for chunk in qrows.chunks(block) {
        for (bi, &qi) in chunk.iter().enumerate() {
            let q = query.row(qi);
            for j in 0..gallery.len() {
                dists[bi * gallery.len() + j] = euclidean(q, gallery.row(j));
            }
        }
        for (bi, &qi) in chunk.iter().enumerate() {
            let row = &dists[bi * gallery.len()..(bi + 1) * gallery.len()];
            let ranked = rank_with_distances(row, &query.ids[qi], gallery, &spec);
            let rel: Vec<bool> = ranked.iter().map(|&(j, _)| gallery.labels[j] == query.labels[qi]).collect();
            let Some(ap) = average_precision(&rel) else {
                excluded += 1;
                continue;
            };
            valid += 1;
            ap_sum += ap;
            let hit = |k: usize| rel.iter().take(k).any(|&r| r);
            r1 += f64::from(u8::from(hit(1)));
            r3 += f64::from(u8::from(hit(3)));
            r5 += f64::from(u8::from(hit(5)));
            rand_sum += random_ranking_ap(rel.len(), rel.iter().filter(|&&r| r).count());
        }
    }
    let denom = valid.max(1) as f64;
    Ok(Metrics {
        protocol,
        map: ap_sum / denom,
        rank1: r1 / denom,
        rank3: r3 / denom,
        rank5: r5 / denom,
        queries: valid,
        excluded,
        random_map: rand_sum / denom,
    })
}

/// Top-`k` ranked gallery entries of one query, for qualitative inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub query_label: usize,
    pub query_modality: Modality,
    pub entries: Vec<RankedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub label: usize,
    pub modality: Modality,
    pub distance: f64,
    pub relevant: bool,
}

pub fn ranked_lists<T: Scalar>(
    query: &EmbeddingSet<T>,
    gallery: &EmbeddingSet<T>,
    protocol: Protocol,
    top_k: usize,
) -> Vec<RankedList> {
    let spec = protocol.spec();
    (0..query.len())
        .filter(|&i| spec.accepts_query(query.modality[i]))
        .map(|i| {
            let ranked = rank_gallery(query.row(i), &query.ids[i], gallery, &spec);
            RankedList {
                query_id: query.ids[i].clone(),
                query_label: query.labels[i],
                query_modality: query.modality[i],
                entries: ranked
                    .into_iter()
                    .take(top_k)
                    .map(|(j, d)| RankedEntry {
                        id: gallery.ids[j].clone(),
                        label: gallery.labels[j],
                        modality: gallery.modality[j],
                        distance: d,
                        relevant: gallery.labels[j] == query.labels[i],
                    })
                    .collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
