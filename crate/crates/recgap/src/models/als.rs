//! Implicit-feedback matrix factorization via alternating least squares.
//!
//! The interaction matrix is binarized; repeated interactions only raise the
//! confidence `c_ui = 1 + alpha * count(u, i)`. Each half-step solves its
//! ridge subproblem exactly, so the weighted regularized loss is
//! non-increasing across iterations — [`AlsOutput::loss_trace`] exposes it
//! for verification.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{catalog_counts, log_to_catalog, Catalog, ModelError, ModelMetadata, RecModel};
use crate::data::InteractionLog;
use crate::models::popularity_ranking;
use crate::seeded::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfHyperparams {
    pub factors: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub iterations: usize,
}

impl MfHyperparams {
    fn validate(&self) -> Result<(), ModelError> {
        if self.factors < 1 {
            return Err(ModelError::InvalidHyperparameter(
                "factors must be >= 1".to_string(),
            ));
        }
        if self.iterations < 1 {
            return Err(ModelError::InvalidHyperparameter(
                "iterations must be >= 1".to_string(),
            ));
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 {
            return Err(ModelError::InvalidHyperparameter(
                "lambda must be > 0".to_string(),
            ));
        }
        if self.alpha < 0.0 {
            return Err(ModelError::InvalidHyperparameter(
                "alpha must be >= 0".to_string(),
            ));
        }
        Ok(())
    }

    pub(super) fn describe(&self, extra: &[(&str, String)]) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("factors".to_string(), self.factors.to_string());
        map.insert("lambda".to_string(), self.lambda.to_string());
        map.insert("alpha".to_string(), self.alpha.to_string());
        map.insert("iterations".to_string(), self.iterations.to_string());
        for (key, value) in extra {
            map.insert((*key).to_string(), value.clone());
        }
        map
    }
}

/// Item latent factors in catalog order, row-major `n_items x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddings {
    pub dim: usize,
    pub factors: Vec<f64>,
    pub hyperparams: MfHyperparams,
    pub seed: u64,
}

impl ItemEmbeddings {
    pub fn n_items(&self) -> usize {
        self.factors.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn vector(&self, item: u32) -> &[f64] {
        let start = item as usize * self.dim;
        &self.factors[start..start + self.dim]
    }
}

/// Everything one ALS run produces.
pub struct AlsOutput {
    pub catalog: Catalog,
    pub embeddings: ItemEmbeddings,
    pub user_factors: Vec<f64>,
    /// Loss after each full iteration, preceded by the initial loss.
    pub loss_trace: Vec<f64>,
}

/// Trains item factors by ALS on the binarized log.
pub fn train_implicit_mf(
    log: &InteractionLog,
    hyperparams: &MfHyperparams,
    seed: u64,
) -> Result<AlsOutput, ModelError> {
    hyperparams.validate()?;
    let catalog = Catalog::from_log(log);
    let remap = log_to_catalog(log, &catalog);
    let f = hyperparams.factors;
    let n_users = log.n_users();
    let n_items = catalog.len();

    // Confidence-weighted adjacency, both orientations.
    let mut user_adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_users];
    let mut item_adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_items];
    for user in 0..n_users as u32 {
        let history = log.history(crate::data::UserId(user));
        let mut items: Vec<u32> = history
            .iter()
            .map(|&(i, _)| remap[i.index()].expect("catalog covers the training log"))
            .collect();
        items.sort_unstable();
        let mut idx = 0;
        while idx < items.len() {
            let item = items[idx];
            let mut count = 0usize;
            while idx < items.len() && items[idx] == item {
                count += 1;
                idx += 1;
            }
            let confidence = 1.0 + hyperparams.alpha * count as f64;
            user_adj[user as usize].push((item, confidence));
            item_adj[item as usize].push((user, confidence));
        }
    }

    // Centered init: an all-positive start would push every item into one
    // orthant and wash out the cosine structure the kNN ranker relies on.
    let mut rng = substream(seed, "als-init", 0, 0);
    let scale = 1.0 / (f as f64).sqrt();
    let mut item_factors: Vec<f64> = (0..n_items * f)
        .map(|_| (rng.gen::<f64>() - 0.5) * scale)
        .collect();
    let mut user_factors: Vec<f64> = vec![0.0; n_users * f];

    let mut loss_trace = Vec::with_capacity(hyperparams.iterations + 1);
    loss_trace.push(loss(
        &user_adj,
        &user_factors,
        &item_factors,
        f,
        hyperparams.lambda,
    ));

    for _ in 0..hyperparams.iterations {
        let item_gram = gram(&item_factors, n_items, f);
        solve_side(
            &user_adj,
            &item_factors,
            &mut user_factors,
            &item_gram,
            f,
            hyperparams.lambda,
        )?;
        let user_gram = gram(&user_factors, n_users, f);
        solve_side(
            &item_adj,
            &user_factors,
            &mut item_factors,
            &user_gram,
            f,
            hyperparams.lambda,
        )?;
        loss_trace.push(loss(
            &user_adj,
            &user_factors,
            &item_factors,
            f,
            hyperparams.lambda,
        ));
    }

    if !item_factors.iter().chain(user_factors.iter()).all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite);
    }

    Ok(AlsOutput {
        catalog,
        embeddings: ItemEmbeddings {
            dim: f,
            factors: item_factors,
            hyperparams: hyperparams.clone(),
            seed,
        },
        user_factors,
        loss_trace,
    })
}

fn gram(factors: &[f64], n: usize, f: usize) -> DMatrix<f64> {
    let mat = DMatrix::from_row_slice(n, f, factors);
    mat.tr_mul(&mat)
}

/// Exact ridge solve for one side: for every row, minimize the
/// confidence-weighted squared error given the other side fixed.
fn solve_side(
    adj: &[Vec<(u32, f64)>],
    other: &[f64],
    out: &mut [f64],
    other_gram: &DMatrix<f64>,
    f: usize,
    lambda: f64,
) -> Result<(), ModelError> {
    for (row, entries) in adj.iter().enumerate() {
        let mut a = other_gram.clone();
        for d in 0..f {
            a[(d, d)] += lambda;
        }
        let mut b = DVector::zeros(f);
        for &(j, confidence) in entries {
            let y = &other[j as usize * f..(j as usize + 1) * f];
            let w = confidence - 1.0;
            for r in 0..f {
                b[r] += confidence * y[r];
                for c in 0..f {
                    a[(r, c)] += w * y[r] * y[c];
                }
            }
        }
        let solution = Cholesky::new(a)
            .ok_or(ModelError::SingularSystem)?
            .solve(&b);
        out[row * f..(row + 1) * f].copy_from_slice(solution.as_slice());
    }
    Ok(())
}

/// Full objective: confidence-weighted squared error over every (user, item)
/// cell (unobserved cells have preference 0, confidence 1) plus L2 terms.
fn loss(user_adj: &[Vec<(u32, f64)>], x: &[f64], y: &[f64], f: usize, lambda: f64) -> f64 {
    let n_items = y.len() / f;
    let y_gram = gram(y, n_items, f);
    let mut total = 0.0;
    for (user, entries) in user_adj.iter().enumerate() {
        let xu = &x[user * f..(user + 1) * f];
        // Background term: sum over ALL items of (x.y)^2 with c=1, p=0.
        let mut background = 0.0;
        for r in 0..f {
            for c in 0..f {
                background += xu[r] * y_gram[(r, c)] * xu[c];
            }
        }
        total += background;
        // Observed cells: replace the background contribution with the
        // confidence-weighted error against preference 1.
        for &(item, confidence) in entries {
            let yi = &y[item as usize * f..(item as usize + 1) * f];
            let pred: f64 = xu.iter().zip(yi).map(|(a, b)| a * b).sum();
            total += confidence * (1.0 - pred) * (1.0 - pred) - pred * pred;
        }
    }
    let reg: f64 = x.iter().map(|v| v * v).sum::<f64>() + y.iter().map(|v| v * v).sum::<f64>();
    total + lambda * reg
}

/// MF ranking by on-the-fly user fold-in: solves the user vector from the
/// profile items (each with count 1) and scores the whole catalog. The item
/// Gramian is fixed at training time, so one fold-in costs a rank-|profile|
/// update plus an f x f solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfFoldInModel {
    catalog: Catalog,
    embeddings: ItemEmbeddings,
    gram: Vec<f64>,
    fallback: Vec<u32>,
    metadata: ModelMetadata,
}

impl MfFoldInModel {
    pub fn train(
        log: &InteractionLog,
        hyperparams: MfHyperparams,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let output = train_implicit_mf(log, &hyperparams, seed)?;
        let counts = catalog_counts(log, &output.catalog);
        let fallback = popularity_ranking(&counts);
        let f = hyperparams.factors;
        let gram_mat = gram(&output.embeddings.factors, output.catalog.len(), f);
        let mut gram = vec![0.0; f * f];
        for r in 0..f {
            for c in 0..f {
                gram[r * f + c] = gram_mat[(r, c)];
            }
        }
        let metadata = ModelMetadata {
            kind: "mf-foldin".to_string(),
            hyperparameters: hyperparams.describe(&[("seed", seed.to_string())]),
            trained_at: log.max_timestamp(),
            filters_seen: true,
        };
        Ok(MfFoldInModel {
            catalog: output.catalog,
            embeddings: output.embeddings,
            gram,
            fallback,
            metadata,
        })
    }

    pub fn embeddings(&self) -> &ItemEmbeddings {
        &self.embeddings
    }

    fn fold_in(&self, profile: &[u32]) -> Option<Vec<f64>> {
        let f = self.embeddings.dim;
        let hp = &self.embeddings.hyperparams;
        let confidence = 1.0 + hp.alpha;
        let mut a = DMatrix::from_row_slice(f, f, &self.gram);
        for d in 0..f {
            a[(d, d)] += hp.lambda;
        }
        let mut b = DVector::zeros(f);
        for &item in profile {
            let yi = self.embeddings.vector(item);
            let w = confidence - 1.0;
            for r in 0..f {
                b[r] += confidence * yi[r];
                for c in 0..f {
                    a[(r, c)] += w * yi[r] * yi[c];
                }
            }
        }
        Cholesky::new(a).map(|chol| chol.solve(&b).as_slice().to_vec())
    }
}

impl RecModel for MfFoldInModel {
    fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn recommend(&self, profile: &[u32], k: usize) -> Vec<u32> {
        if profile.is_empty() {
            return super::popularity_recommend(&self.fallback, profile, k);
        }
        let user_vec = match self.fold_in(profile) {
            Some(v) => v,
            None => return super::popularity_recommend(&self.fallback, profile, k),
        };
        let scored: Vec<(f64, u32)> = (0..self.catalog.len() as u32)
            .filter(|item| profile.binary_search(item).is_err())
            .map(|item| {
                let yi = self.embeddings.vector(item);
                let score: f64 = user_vec.iter().zip(yi).map(|(a, b)| a * b).sum();
                (score, item)
            })
            .collect();
        super::top_k_by_score(scored, k)
    }
}
