//! Naive reference evaluator for the recall metrics.
//!
//! This is a deliberately slow, allocation-heavy transcription of the metric
//! definitions, kept independent of the optimized engine in the parent
//! module: it rebuilds user histories and relevant sets from the raw
//! interaction list, reconstructs every time-respecting profile by linear
//! scan, computes explicit normalized user weights, and aggregates the
//! weighted per-user ratios directly. Use it only in tests; a size guard
//! rejects anything beyond toy scale.

use std::collections::BTreeSet;

use super::{ColdStartPolicy, MetricConfig, MetricError, Validation};
use crate::data::{InteractionLog, PopularityTable, UserId};
use crate::models::{ModelBinding, RecModel};

const MAX_USERS: usize = 16;
const MAX_ITEMS: usize = 16;
const MAX_INTERACTIONS: usize = 64;

/// Reference value of the metric selected by `config`.
pub fn oracle_recall(
    log: &InteractionLog,
    model: &dyn RecModel,
    config: &MetricConfig,
    pop: &PopularityTable,
) -> Result<f64, MetricError> {
    if log.n_users() > MAX_USERS || log.n_items() > MAX_ITEMS
        || log.n_interactions() > MAX_INTERACTIONS
    {
        return Err(MetricError::InstanceTooLarge(format!(
            "{} users, {} items, {} interactions (limits {MAX_USERS}/{MAX_ITEMS}/{MAX_INTERACTIONS})",
            log.n_users(),
            log.n_items(),
            log.n_interactions()
        )));
    }
    if config.k < 1 {
        return Err(MetricError::InvalidConfig("k must be >= 1".to_string()));
    }

    let binding = ModelBinding::new(model, log.item_identifiers());

    // Rebuild each user's event list and relevant set from the raw
    // interaction list, ignoring the log's own indices.
    let mut per_user_events: Vec<Vec<(usize, u32, i64)>> = vec![Vec::new(); log.n_users()];
    for (input_idx, it) in log.interactions().iter().enumerate() {
        per_user_events[it.user.index()].push((input_idx, it.item.0, it.timestamp));
    }
    for events in &mut per_user_events {
        events.sort_by_key(|&(input_idx, _, t)| (t, input_idx));
    }

    let penalty = |item: u32| -> Result<f64, MetricError> {
        let p = pop
            .get(crate::data::ItemId(item))
            .ok_or_else(|| MetricError::UnknownItem(log.item_identifier(crate::data::ItemId(item)).to_string()))?;
        Ok(p.powf(-config.beta))
    };

    // Per user: numerator, denominator (both over evaluated trials only).
    let mut contributions: Vec<(f64, f64)> = Vec::with_capacity(log.n_users());
    for user in 0..log.n_users() as u32 {
        let events = &per_user_events[UserId(user).index()];
        let relevant: BTreeSet<u32> = events.iter().map(|&(_, i, _)| i).collect();

        let mut num = 0.0;
        let mut den = 0.0;
        match config.val {
            Validation::Loo => {
                for &held_out in &relevant {
                    let profile: BTreeSet<u32> =
                        relevant.iter().copied().filter(|&i| i != held_out).collect();
                    if profile.is_empty() && config.cold_start == ColdStartPolicy::Skip {
                        continue;
                    }
                    let w = penalty(held_out)?;
                    den += w;
                    if top_k_contains(&binding, &profile, held_out, config.k) {
                        num += w;
                    }
                }
            }
            Validation::Lloo => {
                for (pos, &(input_idx, item, t)) in events.iter().enumerate() {
                    // Only the first occurrence of each (user, item) pair is
                    // a trial: any earlier event with the same item, or an
                    // equal-timestamp one earlier in input order, disquali-
                    // fies this one.
                    let is_first = !events[..pos].iter().any(|&(earlier_idx, i2, t2)| {
                        i2 == item && (t2 < t || (t2 == t && earlier_idx < input_idx))
                    });
                    if !is_first {
                        continue;
                    }
                    // Q by linear scan: items interacted strictly before t.
                    let profile: BTreeSet<u32> = events
                        .iter()
                        .filter(|&&(_, _, t2)| t2 < t)
                        .map(|&(_, i2, _)| i2)
                        .collect();
                    if profile.is_empty() && config.cold_start == ColdStartPolicy::Skip {
                        continue;
                    }
                    let w = penalty(item)?;
                    den += w;
                    if top_k_contains(&binding, &profile, item, config.k) {
                        num += w;
                    }
                }
            }
        }
        contributions.push((num, den));
    }

    // Literal weighted aggregation: w(u) = den_u / sum_v den_v, value =
    // sum_u w(u) * num_u / den_u, with fully skipped users excluded.
    let total_weight: f64 = contributions.iter().map(|&(_, den)| den).sum();
    if total_weight == 0.0 {
        return Ok(0.0);
    }
    let mut value = 0.0;
    for &(num, den) in &contributions {
        if den > 0.0 {
            let weight = den / total_weight;
            value += weight * (num / den);
        }
    }
    Ok(value)
}

fn top_k_contains(
    binding: &ModelBinding<'_>,
    profile: &BTreeSet<u32>,
    held_out: u32,
    k: usize,
) -> bool {
    let model_profile: Vec<u32> = {
        let mut p: Vec<u32> = profile.iter().filter_map(|&i| binding.to_model(i)).collect();
        p.sort_unstable();
        p.dedup();
        p
    };
    let target = match binding.to_model(held_out) {
        Some(t) => t,
        None => return false,
    };
    binding
        .recommend_model_space(&model_profile, k)
        .contains(&target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_popularity, InteractionLog};
    use crate::models::PopularityModel;
    use crate::offline;

    fn toy_log() -> InteractionLog {
        InteractionLog::from_records(vec![
            ("u1", "a", 1),
            ("u1", "b", 2),
            ("u2", "b", 1),
            ("u2", "c", 2),
            ("u3", "c", 1),
        ])
        .unwrap()
    }

    #[test]
    fn oracle_agrees_with_engine_on_the_toy_log() {
        let log = toy_log();
        let model = PopularityModel::train(&log);
        let pop = compute_popularity(&log);
        for val in [Validation::Loo, Validation::Lloo] {
            for beta in [0.0, 0.5, 1.0] {
                for k in 1..=3 {
                    let config = MetricConfig::new(val, beta, k);
                    let reference = oracle_recall(&log, &model, &config, &pop).unwrap();
                    let engine = offline::evaluate(&log, &model, &config, Some(&pop))
                        .unwrap()
                        .value;
                    assert!(
                        (reference - engine).abs() < 1e-9,
                        "val={val:?} beta={beta} k={k}: oracle {reference} vs engine {engine}"
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_reproduces_plain_loo_at_beta_zero() {
        let log = toy_log();
        let model = PopularityModel::train(&log);
        let pop = compute_popularity(&log);
        let config = MetricConfig::new(Validation::Loo, 0.0, 1);
        let reference = oracle_recall(&log, &model, &config, &pop).unwrap();
        assert!((reference - 0.6).abs() < 1e-12);
    }

    #[test]
    fn oracle_handles_fully_skipped_users() {
        let log = InteractionLog::from_records(vec![("u1", "a", 1)]).unwrap();
        let model = PopularityModel::train(&log);
        let pop = compute_popularity(&log);
        let config = MetricConfig {
            val: Validation::Loo,
            beta: 0.3,
            k: 1,
            cold_start: ColdStartPolicy::Skip,
        };
        assert_eq!(oracle_recall(&log, &model, &config, &pop).unwrap(), 0.0);
    }

    #[test]
    fn oracle_enforces_the_size_guard() {
        let records: Vec<(String, String, i64)> = (0..70)
            .map(|j| (format!("u{}", j % 20), format!("i{}", j % 10), j as i64))
            .collect();
        let borrowed: Vec<(&str, &str, i64)> = records
            .iter()
            .map(|(u, i, t)| (u.as_str(), i.as_str(), *t))
            .collect();
        let log = InteractionLog::from_records(borrowed).unwrap();
        let model = PopularityModel::train(&log);
        let pop = compute_popularity(&log);
        let config = MetricConfig::new(Validation::Loo, 0.0, 1);
        assert!(matches!(
            oracle_recall(&log, &model, &config, &pop),
            Err(MetricError::InstanceTooLarge(_))
        ));
    }
}
