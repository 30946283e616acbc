//! Item-kNN over cosine similarity of latent embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    catalog_counts, popularity_ranking, popularity_recommend, Catalog, ItemEmbeddings,
    MfHyperparams, ModelError, ModelMetadata, RecModel,
};
use crate::data::InteractionLog;

/// Exact top-m cosine neighbors per item, descending similarity, ties by
/// ascending item index (= ascending identifier). Items with zero-norm
/// embeddings get empty lists and are flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityIndex {
    neighbors: Vec<Vec<(u32, f64)>>,
    m: usize,
    zero_norm_items: Vec<u32>,
}

impl SimilarityIndex {
    pub fn neighbors(&self, item: u32) -> &[(u32, f64)] {
        &self.neighbors[item as usize]
    }

    pub fn n_items(&self) -> usize {
        self.neighbors.len()
    }

    pub fn truncation(&self) -> usize {
        self.m
    }

    pub fn zero_norm_items(&self) -> &[u32] {
        &self.zero_norm_items
    }
}

/// Brute-force exact index build; no approximate search.
pub fn build_similarity_index(embeddings: &ItemEmbeddings, m: usize) -> SimilarityIndex {
    assert!(m >= 1, "neighbor list size must be >= 1");
    let n = embeddings.n_items();

    let mut zero_norm_items = Vec::new();
    let norms: Vec<f64> = (0..n)
        .map(|item| {
            let v = embeddings.vector(item as u32);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                zero_norm_items.push(item as u32);
            }
            norm
        })
        .collect();

    let neighbors: Vec<Vec<(u32, f64)>> = (0..n as u32)
        .into_par_iter()
        .map(|item| {
            if norms[item as usize] == 0.0 {
                return Vec::new();
            }
            let vi = embeddings.vector(item);
            let mut sims: Vec<(u32, f64)> = (0..n as u32)
                .filter(|&j| j != item && norms[j as usize] > 0.0)
                .map(|j| {
                    let vj = embeddings.vector(j);
                    let dot: f64 = vi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    (j, dot / (norms[item as usize] * norms[j as usize]))
                })
                .collect();
            sims.sort_unstable_by(|(ia, sa), (ib, sb)| {
                sb.partial_cmp(sa).expect("finite cosines").then(ia.cmp(ib))
            });
            sims.truncate(m);
            sims
        })
        .collect();

    SimilarityIndex {
        neighbors,
        m,
        zero_norm_items,
    }
}

/// Scores `score(j) = sum over profile items i of cos(i, j)` using the
/// truncated neighbor lists, ranks by (score desc, index asc), filters the
/// profile, and fills any remaining slots from `fallback` (popularity
/// order). An empty profile is pure fallback.
pub fn knn_recommend(
    index: &SimilarityIndex,
    fallback: &[u32],
    profile: &[u32],
    k: usize,
) -> Vec<u32> {
    if profile.is_empty() {
        return popularity_recommend(fallback, profile, k);
    }
    let n = index.n_items();
    let mut scores = vec![0.0f64; n];
    let mut touched = vec![false; n];
    let mut candidates: Vec<u32> = Vec::new();
    for &item in profile {
        if (item as usize) >= n {
            continue;
        }
        for &(j, sim) in index.neighbors(item) {
            if profile.binary_search(&j).is_ok() {
                continue;
            }
            scores[j as usize] += sim;
            if !touched[j as usize] {
                touched[j as usize] = true;
                candidates.push(j);
            }
        }
    }
    candidates.sort_unstable_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    if candidates.len() < k {
        for &item in fallback {
            if candidates.len() == k {
                break;
            }
            if profile.binary_search(&item).is_err() && !touched[item as usize] {
                candidates.push(item);
                touched[item as usize] = true;
            }
        }
    }
    candidates
}

/// The backbone recommender: item-kNN on implicit-MF embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfKnnModel {
    catalog: Catalog,
    embeddings: ItemEmbeddings,
    index: SimilarityIndex,
    fallback: Vec<u32>,
    metadata: ModelMetadata,
}

impl MfKnnModel {
    pub fn train(
        log: &InteractionLog,
        hyperparams: MfHyperparams,
        neighbors: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if neighbors < 1 {
            return Err(ModelError::InvalidHyperparameter(
                "neighbor list size must be >= 1".to_string(),
            ));
        }
        let output = super::train_implicit_mf(log, &hyperparams, seed)?;
        let index = build_similarity_index(&output.embeddings, neighbors);
        let counts = catalog_counts(log, &output.catalog);
        let fallback = popularity_ranking(&counts);
        let metadata = ModelMetadata {
            kind: "mf-knn".to_string(),
            hyperparameters: hyperparams.describe(&[
                ("neighbors", neighbors.to_string()),
                ("seed", seed.to_string()),
            ]),
            trained_at: log.max_timestamp(),
            filters_seen: true,
        };
        Ok(MfKnnModel {
            catalog: output.catalog,
            embeddings: output.embeddings,
            index,
            fallback,
            metadata,
        })
    }

    pub fn index(&self) -> &SimilarityIndex {
        &self.index
    }

    pub fn embeddings(&self) -> &ItemEmbeddings {
        &self.embeddings
    }
}

impl RecModel for MfKnnModel {
    fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn recommend(&self, profile: &[u32], k: usize) -> Vec<u32> {
        knn_recommend(&self.index, &self.fallback, profile, k)
    }
}
