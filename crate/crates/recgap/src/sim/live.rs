//! The serving phase: sticky A/B split, periodic retraining, click feedback.

use serde::{Deserialize, Serialize};

use super::{session_arrivals, SimError, World};
use crate::data::InteractionLog;
use crate::models::{Model, ModelBinding, ModelSpec};
use crate::online::RecommendationEvent;
use crate::seeded::{substream, substream_hash};
use rand::Rng;

/// Sticky assignment: the model index in `[0, l)` serving `user`. A pure
/// function of `(user, seed)`, so the same user always hits the same model,
/// and a strong hash keeps the split balanced.
pub fn assign_model(user: &str, l: usize, seed: u64) -> usize {
    assert!(l >= 1, "need at least one model");
    (substream_hash(seed, "ab-assign", user.as_bytes()) % l as u64) as usize
}

/// A model slot in the serving loop: either a trainable spec or the
/// ground-truth oracle (diagnostics only — it reads hidden preferences).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimModelSpec {
    Trained(ModelSpec),
    Oracle,
}

impl SimModelSpec {
    pub fn parse(text: &str) -> Result<Self, crate::models::ModelError> {
        if text.trim() == "oracle" {
            Ok(SimModelSpec::Oracle)
        } else {
            Ok(SimModelSpec::Trained(ModelSpec::parse(text)?))
        }
    }

    pub fn label(&self) -> String {
        match self {
            SimModelSpec::Trained(spec) => spec.label(),
            SimModelSpec::Oracle => "oracle".to_string(),
        }
    }
}

/// One served recommendation plus the model that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaggedRecommendation {
    pub model: usize,
    pub event: RecommendationEvent,
}

/// One live click: `(user, item, timestamp)` in world identifiers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClickRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Everything a serving run produces.
pub struct LiveOutcome {
    /// Served events in time order, tagged by model index.
    pub recommendations: Vec<TaggedRecommendation>,
    /// Live clicks in event order.
    pub clicks: Vec<ClickRecord>,
    /// The initially trained models (`None` for the oracle slot); these are
    /// the models offline metrics should be computed on.
    pub initial_models: Vec<Option<Model>>,
    pub model_labels: Vec<String>,
    pub retrain_instants: Vec<i64>,
    /// First and one-past-last simulated second of the phase.
    pub span: (i64, i64),
}

impl LiveOutcome {
    /// The live click log, `None` when nothing was clicked.
    pub fn click_log(&self) -> Option<InteractionLog> {
        if self.clicks.is_empty() {
            return None;
        }
        let records: Vec<(&str, &str, i64)> = self
            .clicks
            .iter()
            .map(|c| (c.user.as_str(), c.item.as_str(), c.timestamp))
            .collect();
        Some(InteractionLog::from_records(records).expect("records are non-empty"))
    }

    /// Recommendation events of one model, untagged.
    pub fn events_for_model(&self, model: usize) -> Vec<RecommendationEvent> {
        self.recommendations
            .iter()
            .filter(|r| r.model == model)
            .map(|r| r.event.clone())
            .collect()
    }
}

enum ServingModel {
    Trained(Model),
    Oracle,
}

/// Runs the serving loop over one simulated horizon.
///
/// Sessions arrive on the same Poisson-like clock as history generation but
/// from an independent substream, starting right after the history ends.
/// Each session serves the user's sticky model with the user's current
/// profile (history plus accumulated live clicks) and samples clicks from
/// ground truth with geometric position decay. Every `retrain_every`
/// simulated seconds, each trainable model is refit on history plus the
/// live clicks recorded strictly before the retrain instant.
pub fn run_live_phase(
    world: &World,
    history: &InteractionLog,
    specs: &[SimModelSpec],
    retrain_every: i64,
    k: usize,
) -> Result<LiveOutcome, SimError> {
    if specs.is_empty() {
        return Err(SimError::InvalidConfig("no models to serve".to_string()));
    }
    if retrain_every <= 0 {
        return Err(SimError::InvalidConfig(
            "retrain_every must be > 0".to_string(),
        ));
    }
    if k < 1 {
        return Err(SimError::InvalidConfig("k must be >= 1".to_string()));
    }
    let cfg = world.config();
    let seed = cfg.seed;
    let l = specs.len();

    let train = |spec: &SimModelSpec, log: &InteractionLog, model_idx: usize, round: u64| {
        match spec {
            SimModelSpec::Oracle => Ok(ServingModel::Oracle),
            SimModelSpec::Trained(model_spec) => {
                let train_seed = substream_hash(
                    seed,
                    "train",
                    format!("{model_idx}/{round}").as_bytes(),
                );
                model_spec
                    .train(log, train_seed)
                    .map(ServingModel::Trained)
                    .map_err(|source| SimError::ModelFailure {
                        label: spec.label(),
                        source,
                    })
            }
        }
    };

    let mut models: Vec<ServingModel> = Vec::with_capacity(l);
    for (idx, spec) in specs.iter().enumerate() {
        models.push(train(spec, history, idx, 0)?);
    }
    let initial_models: Vec<Option<Model>> = models
        .iter()
        .map(|m| match m {
            ServingModel::Trained(model) => Some(model.clone()),
            ServingModel::Oracle => None,
        })
        .collect();

    // Sticky assignment, fixed for the whole run.
    let assignment: Vec<usize> = (0..cfg.n_users)
        .map(|u| assign_model(world.user_name(u), l, seed))
        .collect();

    // Current profiles in world item ids, sorted.
    let mut profiles: Vec<Vec<u32>> = vec![Vec::new(); cfg.n_users];
    for user in 0..history.n_users() as u32 {
        let uid = crate::data::UserId(user);
        let world_user = world
            .user_names
            .binary_search(&history.user_identifier(uid).to_string())
            .expect("history users belong to the world");
        let mut items: Vec<u32> = history
            .history(uid)
            .iter()
            .map(|&(item, _)| {
                world
                    .item_names
                    .binary_search(&history.item_identifier(item).to_string())
                    .expect("history items belong to the world") as u32
            })
            .collect();
        items.sort_unstable();
        items.dedup();
        profiles[world_user] = items;
    }

    let t0 = history.max_timestamp();
    let end = t0.saturating_add(cfg.horizon);
    let retrain_instants: Vec<i64> = (1..)
        .map(|j| t0 + j * retrain_every)
        .take_while(|&t| t < end)
        .collect();

    let arrivals: Vec<f64> = session_arrivals(seed, "live-arrivals", cfg, cfg.horizon)
        .map(|t| t + t0 as f64)
        .collect();

    let mut recommendations: Vec<TaggedRecommendation> = Vec::new();
    let mut clicks: Vec<ClickRecord> = Vec::new();
    let mut click_ids: Vec<(u32, u32, i64)> = Vec::new(); // world ids, for retrain snapshots

    let mut cursor = 0usize;
    for segment in 0..=retrain_instants.len() {
        let segment_end = retrain_instants
            .get(segment)
            .copied()
            .unwrap_or(i64::MAX);
        {
            let bindings: Vec<Option<ModelBinding<'_>>> = models
                .iter()
                .map(|m| match m {
                    ServingModel::Trained(model) => {
                        Some(ModelBinding::new(model.as_rec_model(), world.item_names()))
                    }
                    ServingModel::Oracle => None,
                })
                .collect();

            while cursor < arrivals.len() && (arrivals[cursor] as i64) < segment_end {
                let t = arrivals[cursor] as i64;
                let mut rng = substream(seed, "live-session", cursor as u64, 0);
                cursor += 1;
                let user = rng.gen_range(0..cfg.n_users);
                let model_idx = assignment[user];
                let profile = &profiles[user];

                let served: Vec<u32> = match &bindings[model_idx] {
                    Some(binding) => binding.recommend_caller_space(profile, k),
                    None => world.ground_truth.true_top_k(user, profile, k),
                };
                if served.is_empty() {
                    continue;
                }

                recommendations.push(TaggedRecommendation {
                    model: model_idx,
                    event: RecommendationEvent {
                        timestamp: t,
                        user: world.user_name(user).to_string(),
                        items: served
                            .iter()
                            .map(|&i| world.item_name(i as usize).to_string())
                            .collect(),
                    },
                });

                let mut decay = 1.0;
                for (slot, &item) in served.iter().enumerate() {
                    let p = world.click_probability(user, item as usize) * decay;
                    decay *= cfg.position_decay;
                    if rng.gen::<f64>() < p {
                        let at = t + 1 + slot as i64;
                        clicks.push(ClickRecord {
                            user: world.user_name(user).to_string(),
                            item: world.item_name(item as usize).to_string(),
                            timestamp: at,
                        });
                        click_ids.push((user as u32, item, at));
                        let profile = &mut profiles[user];
                        if let Err(pos) = profile.binary_search(&item) {
                            profile.insert(pos, item);
                        }
                    }
                }
            }
        }

        if let Some(&instant) = retrain_instants.get(segment) {
            let snapshot = snapshot_log(world, history, &click_ids, instant);
            for (idx, spec) in specs.iter().enumerate() {
                models[idx] = train(spec, &snapshot, idx, segment as u64 + 1)?;
            }
        }
    }

    Ok(LiveOutcome {
        recommendations,
        clicks,
        initial_models,
        model_labels: specs.iter().map(|s| s.label()).collect(),
        retrain_instants,
        span: (t0, end),
    })
}

/// History plus live clicks strictly before `instant`.
fn snapshot_log(
    world: &World,
    history: &InteractionLog,
    click_ids: &[(u32, u32, i64)],
    instant: i64,
) -> InteractionLog {
    let mut records: Vec<(&str, &str, i64)> = Vec::with_capacity(
        history.n_interactions() + click_ids.len(),
    );
    for it in history.interactions() {
        records.push((
            history.user_identifier(it.user),
            history.item_identifier(it.item),
            it.timestamp,
        ));
    }
    for &(user, item, t) in click_ids {
        if t < instant {
            records.push((
                world.user_name(user as usize),
                world.item_name(item as usize),
                t,
            ));
        }
    }
    InteractionLog::from_records(records).expect("history is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::{WorldConfig, SECONDS_PER_DAY};
    use std::collections::HashMap;

    fn test_world(seed: u64) -> World {
        World::new(WorldConfig {
            n_users: 300,
            n_items: 60,
            latent_dim: 4,
            session_rate: 1.0,
            horizon: 3 * SECONDS_PER_DAY,
            seed,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn specs() -> Vec<SimModelSpec> {
        vec![
            SimModelSpec::parse("popularity").unwrap(),
            SimModelSpec::parse("random").unwrap(),
        ]
    }

    #[test]
    fn assignment_is_sticky_and_covers_range() {
        for l in [1usize, 3, 5] {
            for user in ["u1", "u2", "someone-long"] {
                let a = assign_model(user, l, 9);
                assert_eq!(a, assign_model(user, l, 9));
                assert!(a < l);
            }
        }
        assert_eq!(assign_model("anyone", 1, 123), 0);
    }

    #[test]
    fn live_phase_is_deterministic() {
        let world = test_world(5);
        let history = world.generate_history().unwrap();
        let a = run_live_phase(&world, &history, &specs(), SECONDS_PER_DAY, 5).unwrap();
        let b = run_live_phase(&world, &history, &specs(), SECONDS_PER_DAY, 5).unwrap();
        assert_eq!(a.recommendations, b.recommendations);
        assert_eq!(a.clicks, b.clicks);
        assert_eq!(a.retrain_instants, b.retrain_instants);
    }

    #[test]
    fn zero_horizon_run_is_empty() {
        let mut cfg = test_world(5).config().clone();
        cfg.horizon = 0;
        let world_for_history = test_world(5);
        let history = world_for_history.generate_history().unwrap();
        let world = World::new(cfg).unwrap();
        let out = run_live_phase(&world, &history, &specs(), SECONDS_PER_DAY, 5).unwrap();
        assert!(out.recommendations.is_empty());
        assert!(out.clicks.is_empty());
        assert!(out.retrain_instants.is_empty());
        assert!(out.click_log().is_none());
    }

    #[test]
    fn no_user_sees_two_models() {
        let world = test_world(7);
        let history = world.generate_history().unwrap();
        let out = run_live_phase(&world, &history, &specs(), SECONDS_PER_DAY, 5).unwrap();
        assert!(!out.recommendations.is_empty());
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for rec in &out.recommendations {
            let prev = seen.insert(rec.event.user.as_str(), rec.model);
            if let Some(prev) = prev {
                assert_eq!(prev, rec.model, "user {} mixed models", rec.event.user);
            }
        }
    }

    #[test]
    fn clicks_stay_inside_their_session_and_snapshots_respect_time() {
        let world = test_world(11);
        let history = world.generate_history().unwrap();
        let k = 5;
        let out = run_live_phase(&world, &history, &specs(), SECONDS_PER_DAY, k).unwrap();

        // Every click maps back to a serving event of the same user whose
        // window [t, t+k] contains it.
        for click in &out.clicks {
            let in_session = out.recommendations.iter().any(|rec| {
                rec.event.user == click.user
                    && rec.event.items.contains(&click.item)
                    && click.timestamp >= rec.event.timestamp
                    && click.timestamp <= rec.event.timestamp + k as i64
            });
            assert!(in_session, "orphan click {click:?}");
        }

        // Retrain instants fall inside the live span.
        let (t0, end) = out.span;
        for &instant in &out.retrain_instants {
            assert!(instant > t0 && instant < end);
        }
    }

    #[test]
    fn retraining_changes_served_recommendations_over_time() {
        let world = test_world(13);
        let history = world.generate_history().unwrap();
        // Popularity retrained on live clicks drifts with the feedback loop;
        // compare against a run without any retrain boundary inside the
        // horizon.
        let with = run_live_phase(&world, &history, &specs(), SECONDS_PER_DAY, 5).unwrap();
        let without =
            run_live_phase(&world, &history, &specs(), 100 * SECONDS_PER_DAY, 5).unwrap();
        assert!(!with.retrain_instants.is_empty());
        assert!(without.retrain_instants.is_empty());
        assert_ne!(with.recommendations, without.recommendations);
    }

    #[test]
    fn live_phase_rejects_bad_parameters() {
        let world = test_world(5);
        let history = world.generate_history().unwrap();
        assert!(run_live_phase(&world, &history, &[], SECONDS_PER_DAY, 5).is_err());
        assert!(run_live_phase(&world, &history, &specs(), 0, 5).is_err());
        assert!(run_live_phase(&world, &history, &specs(), SECONDS_PER_DAY, 0).is_err());
    }
}
