//! Offline recall under leave-one-out (LOO) and leave-last-one-out (LLOO)
//! splits, with optional popularity penalization.
//!
//! Four metric variants share one engine:
//!
//! * LOO: per user, each relevant item is held out in turn and must be
//!   retrieved from the rest of the profile.
//! * LLOO: time-respecting — each interaction is predicted from the user's
//!   strictly earlier interactions only.
//! * Either split optionally weights every held-out item by `p(i)^(-beta)`,
//!   rewarding retrieval of unpopular items.
//!
//! Per-user weights normalize so they sum to one across users. With that
//! normalization the weighted metric collapses to a ratio of global sums
//!
//! ```text
//! value = sum_u num_u / sum_u den_u,
//! num_u = sum over hit trials of p(i)^(-beta),
//! den_u = sum over evaluated trials of p(i)^(-beta),
//! ```
//!
//! which also makes `beta = 0` reduce to plain recall exactly. The
//! [`oracle`] module re-derives the same quantities by literal naive
//! transcription (explicit weights, per-user ratios, linear-scan profile
//! reconstruction) for cross-checking.

pub mod oracle;

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::data::{InteractionLog, ItemId, PopularityTable, RelevantItems, UserId};
use crate::models::{ModelBinding, RecModel};
use crate::numfmt::round_sig12;

/// Cross-validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validation {
    Loo,
    Lloo,
}

impl Validation {
    pub fn as_str(self) -> &'static str {
        match self {
            Validation::Loo => "loo",
            Validation::Lloo => "lloo",
        }
    }
}

/// What to do with trials whose recommendation profile is empty: a LOO user
/// with a single relevant item, or the first interaction(s) of a user under
/// LLOO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdStartPolicy {
    /// Evaluate against the model's global fallback ranking; the trial
    /// counts in the denominator. Matches live serving, where a cold user
    /// still gets recommendations. Default.
    IncludeWithFallback,
    /// Drop the trial from both numerator and denominator.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub val: Validation,
    pub beta: f64,
    pub k: usize,
    pub cold_start: ColdStartPolicy,
}

impl MetricConfig {
    pub fn new(val: Validation, beta: f64, k: usize) -> Self {
        MetricConfig {
            val,
            beta,
            k,
            cold_start: ColdStartPolicy::IncludeWithFallback,
        }
    }

    fn validate(&self) -> Result<(), MetricError> {
        if self.k < 1 {
            return Err(MetricError::InvalidConfig("k must be >= 1".to_string()));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(MetricError::InvalidConfig(
                "beta must be finite and >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid metric configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown user index {0}")]
    UnknownUser(u32),
    #[error("item `{0}` is missing from the popularity table")]
    UnknownItem(String),
    #[error("instance exceeds the reference-evaluator size guard: {0}")]
    InstanceTooLarge(String),
}

/// One recall evaluation: the value plus per-user numerator/denominator
/// contributions (aligned with [`InteractionLog::users_by_identifier`]).
#[derive(Debug, Clone, PartialEq)]
pub struct RecallResult {
    pub config: MetricConfig,
    pub value: f64,
    pub n_users: usize,
    pub per_user: Vec<(UserId, f64, f64)>,
}

impl RecallResult {
    /// JSON form: `{metric, val, beta, k, value, n_users, per_user?}`.
    /// Floats are rounded to 12 significant digits.
    pub fn to_json(&self, log: &InteractionLog, include_per_user: bool) -> serde_json::Value {
        let mut obj = json!({
            "metric": "recall",
            "val": self.config.val.as_str(),
            "beta": round_sig12(self.config.beta),
            "k": self.config.k,
            "value": round_sig12(self.value),
            "n_users": self.n_users,
        });
        if include_per_user {
            let map: serde_json::Map<String, serde_json::Value> = self
                .per_user
                .iter()
                .map(|&(user, num, den)| {
                    (
                        log.user_identifier(user).to_string(),
                        json!([round_sig12(num), round_sig12(den)]),
                    )
                })
                .collect();
            obj["per_user"] = serde_json::Value::Object(map);
        }
        obj
    }
}

/// Plain recall, LOO split (beta = 0).
pub fn recall_loo(
    log: &InteractionLog,
    model: &dyn RecModel,
    k: usize,
) -> Result<RecallResult, MetricError> {
    evaluate(log, model, &MetricConfig::new(Validation::Loo, 0.0, k), None)
}

/// Plain recall, LLOO split (beta = 0).
pub fn recall_lloo(
    log: &InteractionLog,
    model: &dyn RecModel,
    k: usize,
) -> Result<RecallResult, MetricError> {
    evaluate(log, model, &MetricConfig::new(Validation::Lloo, 0.0, k), None)
}

/// Popularity-penalized recall, LOO split.
pub fn recall_loo_beta(
    log: &InteractionLog,
    model: &dyn RecModel,
    k: usize,
    beta: f64,
    pop: &PopularityTable,
) -> Result<RecallResult, MetricError> {
    evaluate(
        log,
        model,
        &MetricConfig::new(Validation::Loo, beta, k),
        Some(pop),
    )
}

/// Popularity-penalized recall, LLOO split.
pub fn recall_lloo_beta(
    log: &InteractionLog,
    model: &dyn RecModel,
    k: usize,
    beta: f64,
    pop: &PopularityTable,
) -> Result<RecallResult, MetricError> {
    evaluate(
        log,
        model,
        &MetricConfig::new(Validation::Lloo, beta, k),
        Some(pop),
    )
}

/// Evaluates one metric configuration. `pop` is required when
/// `config.beta > 0` and must cover every item of the log.
pub fn evaluate(
    log: &InteractionLog,
    model: &dyn RecModel,
    config: &MetricConfig,
    pop: Option<&PopularityTable>,
) -> Result<RecallResult, MetricError> {
    config.validate()?;
    if config.beta > 0.0 && pop.is_none() {
        return Err(MetricError::InvalidConfig(
            "beta > 0 requires a popularity table".to_string(),
        ));
    }
    if let Some(pop) = pop {
        validate_popularity(log, pop)?;
    }

    let item_weight: Vec<f64> = match pop {
        Some(pop) => (0..log.n_items() as u32)
            .map(|i| pop.get(ItemId(i)).expect("coverage validated").powf(-config.beta))
            .collect(),
        None => vec![1.0; log.n_items()],
    };

    let binding = ModelBinding::new(model, log.item_identifiers());
    let per_user: Vec<(UserId, f64, f64)> = log
        .users_by_identifier()
        .par_iter()
        .map(|&user| {
            let trials = rank_trials(log, &binding, user, config.val, config.cold_start, config.k);
            let mut num = 0.0;
            let mut den = 0.0;
            for (item, rank) in trials {
                let w = item_weight[item.index()];
                den += w;
                if rank.is_some() {
                    num += w;
                }
            }
            (user, num, den)
        })
        .collect();

    // Ordered reduction: users ascend by identifier, so the value is
    // independent of thread count.
    let mut num_total = 0.0;
    let mut den_total = 0.0;
    for &(_, num, den) in &per_user {
        num_total += num;
        den_total += den;
    }
    let value = if den_total > 0.0 {
        num_total / den_total
    } else {
        0.0
    };

    Ok(RecallResult {
        config: config.clone(),
        value,
        n_users: log.n_users(),
        per_user,
    })
}

/// The normalized user weight `w(u) = S_u / sum_v S_v` with
/// `S_u = sum over N_u of p(i)^(-beta)`; weights sum to one across users.
pub fn user_weight(
    user: UserId,
    relevant: &RelevantItems,
    pop: &PopularityTable,
    beta: f64,
) -> Result<f64, MetricError> {
    if user.index() >= relevant.n_users() {
        return Err(MetricError::UnknownUser(user.0));
    }
    let weights = user_weights(relevant, pop, beta)?;
    Ok(weights[user.index()])
}

/// All user weights at once, in user-index order.
pub fn user_weights(
    relevant: &RelevantItems,
    pop: &PopularityTable,
    beta: f64,
) -> Result<Vec<f64>, MetricError> {
    let mut sums = Vec::with_capacity(relevant.n_users());
    for user in 0..relevant.n_users() as u32 {
        let mut sum = 0.0;
        for &item in relevant.set(UserId(user)) {
            let p = pop
                .get(item)
                .ok_or_else(|| MetricError::UnknownItem(format!("#{}", item.0)))?;
            sum += p.powf(-beta);
        }
        sums.push(sum);
    }
    let total: f64 = sums.iter().sum();
    Ok(sums.into_iter().map(|s| s / total).collect())
}

/// A sweep over (k, beta) cells for one split, sharing model queries across
/// cells: every trial is ranked once against the largest k.
#[derive(Debug, Clone)]
pub struct RecallSweep {
    pub k_values: Vec<usize>,
    pub beta_values: Vec<f64>,
    pub cold_start: ColdStartPolicy,
}

/// Sweep results: `value(beta_idx, k_idx)` in [`SweepResult::get`].
#[derive(Debug, Clone)]
pub struct SweepResult {
    n_k: usize,
    values: Vec<f64>,
}

impl SweepResult {
    pub fn get(&self, beta_idx: usize, k_idx: usize) -> f64 {
        self.values[beta_idx * self.n_k + k_idx]
    }
}

/// Evaluates every (beta, k) cell of `sweep` for one split. Equivalent to
/// calling [`evaluate`] per cell; one pass over the trials instead.
pub fn sweep_recall(
    log: &InteractionLog,
    model: &dyn RecModel,
    val: Validation,
    sweep: &RecallSweep,
    pop: &PopularityTable,
) -> Result<SweepResult, MetricError> {
    if sweep.k_values.is_empty() || sweep.beta_values.is_empty() {
        return Err(MetricError::InvalidConfig(
            "sweep needs at least one k and one beta".to_string(),
        ));
    }
    for &k in &sweep.k_values {
        if k < 1 {
            return Err(MetricError::InvalidConfig("k must be >= 1".to_string()));
        }
    }
    for &beta in &sweep.beta_values {
        if !beta.is_finite() || beta < 0.0 {
            return Err(MetricError::InvalidConfig(
                "beta must be finite and >= 0".to_string(),
            ));
        }
    }
    validate_popularity(log, pop)?;

    let k_max = *sweep.k_values.iter().max().expect("non-empty");
    let n_betas = sweep.beta_values.len();
    // item_weight[beta_idx][item]
    let item_weight: Vec<Vec<f64>> = sweep
        .beta_values
        .iter()
        .map(|&beta| {
            (0..log.n_items() as u32)
                .map(|i| pop.get(ItemId(i)).expect("coverage validated").powf(-beta))
                .collect()
        })
        .collect();

    let binding = ModelBinding::new(model, log.item_identifiers());

    struct Partial {
        den: Vec<f64>,        // [beta]
        num_at_rank: Vec<f64>, // [beta][rank]
    }

    // Fixed-size chunks keep the reduction order independent of the rayon
    // thread count.
    const CHUNK: usize = 256;
    let partials: Vec<Partial> = log
        .users_by_identifier()
        .par_chunks(CHUNK)
        .map(|users| {
            let mut partial = Partial {
                den: vec![0.0; n_betas],
                num_at_rank: vec![0.0; n_betas * k_max],
            };
            for &user in users {
                for (item, rank) in
                    rank_trials(log, &binding, user, val, sweep.cold_start, k_max)
                {
                    for (b, weights) in item_weight.iter().enumerate() {
                        let w = weights[item.index()];
                        partial.den[b] += w;
                        if let Some(rank) = rank {
                            partial.num_at_rank[b * k_max + rank] += w;
                        }
                    }
                }
            }
            partial
        })
        .collect();

    let mut den = vec![0.0; n_betas];
    let mut num_at_rank = vec![0.0; n_betas * k_max];
    for partial in &partials {
        for (acc, v) in den.iter_mut().zip(&partial.den) {
            *acc += v;
        }
        for (acc, v) in num_at_rank.iter_mut().zip(&partial.num_at_rank) {
            *acc += v;
        }
    }

    let n_k = sweep.k_values.len();
    let mut values = vec![0.0; n_betas * n_k];
    for b in 0..n_betas {
        // Hits at rank < k accumulate as a prefix sum over ranks.
        let mut prefix = vec![0.0; k_max + 1];
        for r in 0..k_max {
            prefix[r + 1] = prefix[r] + num_at_rank[b * k_max + r];
        }
        for (ki, &k) in sweep.k_values.iter().enumerate() {
            values[b * n_k + ki] = if den[b] > 0.0 {
                prefix[k.min(k_max)] / den[b]
            } else {
                0.0
            };
        }
    }

    Ok(SweepResult { n_k, values })
}

fn validate_popularity(log: &InteractionLog, pop: &PopularityTable) -> Result<(), MetricError> {
    if pop.n_items() < log.n_items() {
        let missing = ItemId(pop.n_items() as u32);
        return Err(MetricError::UnknownItem(
            log.item_identifier(missing).to_string(),
        ));
    }
    for (idx, &p) in pop.values().iter().enumerate().take(log.n_items()) {
        if p.is_nan() || p <= 0.0 || !p.is_finite() {
            return Err(MetricError::InvalidConfig(format!(
                "popularity of `{}` must be positive and finite, got {p}",
                log.item_identifier(ItemId(idx as u32))
            )));
        }
    }
    Ok(())
}

/// The evaluated trials of one user: each held-out item with the rank at
/// which the model retrieved it from the trial's profile (`None` = not in
/// the top `k_max`). Trials dropped by [`ColdStartPolicy::Skip`] are absent.
///
/// LOO iterates the distinct items of the user's history in first-occurrence
/// order; LLOO iterates the same items at their first occurrence, building
/// the profile from strictly earlier interactions (equal-timestamp
/// interactions are mutually invisible).
fn rank_trials(
    log: &InteractionLog,
    binding: &ModelBinding<'_>,
    user: UserId,
    val: Validation,
    cold_start: ColdStartPolicy,
    k_max: usize,
) -> Vec<(ItemId, Option<usize>)> {
    let history = log.history(user);
    let mut trials = Vec::new();
    match val {
        Validation::Loo => {
            let mut firsts: Vec<ItemId> = Vec::new();
            let mut seen: HashSet<ItemId> = HashSet::new();
            for &(item, _) in history {
                if seen.insert(item) {
                    firsts.push(item);
                }
            }
            let translated: Vec<Option<u32>> =
                firsts.iter().map(|&i| binding.to_model(i.0)).collect();
            let mut full_profile: Vec<u32> = translated.iter().filter_map(|&m| m).collect();
            full_profile.sort_unstable();

            let single = firsts.len() == 1;
            for (idx, &item) in firsts.iter().enumerate() {
                if single && cold_start == ColdStartPolicy::Skip {
                    continue;
                }
                let profile: Vec<u32> = match translated[idx] {
                    Some(m) => full_profile
                        .iter()
                        .copied()
                        .filter(|&x| x != m)
                        .collect(),
                    None => full_profile.clone(),
                };
                trials.push((item, target_rank(binding, &profile, translated[idx], k_max)));
            }
        }
        Validation::Lloo => {
            let mut seen: HashSet<ItemId> = HashSet::new();
            let mut profile: Vec<u32> = Vec::new(); // sorted model-space Q
            let mut idx = 0;
            while idx < history.len() {
                let t = history[idx].1;
                let mut end = idx;
                while end < history.len() && history[end].1 == t {
                    end += 1;
                }
                let q_empty = idx == 0;
                for &(item, _) in &history[idx..end] {
                    if !seen.insert(item) {
                        continue; // only the first occurrence is a trial
                    }
                    if q_empty && cold_start == ColdStartPolicy::Skip {
                        continue;
                    }
                    let target = binding.to_model(item.0);
                    trials.push((item, target_rank(binding, &profile, target, k_max)));
                }
                for &(item, _) in &history[idx..end] {
                    if let Some(m) = binding.to_model(item.0) {
                        if let Err(pos) = profile.binary_search(&m) {
                            profile.insert(pos, m);
                        }
                    }
                }
                idx = end;
            }
        }
    }
    trials
}

fn target_rank(
    binding: &ModelBinding<'_>,
    profile: &[u32],
    target: Option<u32>,
    k_max: usize,
) -> Option<usize> {
    let target = target?;
    binding
        .recommend_model_space(profile, k_max)
        .iter()
        .position(|&r| r == target)
}
