//! Recommenders behind a single profile-conditioned top-K contract.
//!
//! All models answer `recommend(profile, k)`: given the set of items a user
//! has interacted with, return a ranked list of at most `k` other items.
//! Guarantees shared by every model here:
//!
//! * output contains no duplicates and (with seen-item filtering on, the
//!   default) no profile items;
//! * output is deterministic for a fixed model state and profile;
//! * an empty profile falls back to the model's global ranking instead of
//!   erroring — training-popularity order for the content models, the fixed
//!   seeded permutation for the random baseline.
//!
//! Models keep their own item vocabulary ([`Catalog`], sorted by identifier,
//! so ascending index equals ascending identifier for tie-breaking). Use
//! [`ModelBinding`] to evaluate a model against a log with a different
//! vocabulary.

mod als;
mod knn;

pub use als::{
    train_implicit_mf, AlsOutput, ItemEmbeddings, MfFoldInModel, MfHyperparams,
};
pub use knn::{build_similarity_index, knn_recommend, MfKnnModel, SimilarityIndex};

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{InteractionLog, ItemId};
use crate::seeded::substream;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("least-squares solve failed (singular system)")]
    SingularSystem,
    #[error("training produced non-finite factors")]
    NonFinite,
    #[error("invalid model spec `{0}`")]
    InvalidSpec(String),
    #[error("model i/o error")]
    Io(#[from] std::io::Error),
    #[error("model file error: {0}")]
    Format(String),
}

/// An item vocabulary sorted by identifier. Index order therefore equals
/// lexicographic identifier order, which is the tie-breaking order used
/// throughout ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Catalog {
    identifiers: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Catalog {
    /// Builds a catalog from the distinct items of a log.
    pub fn from_log(log: &InteractionLog) -> Self {
        let mut identifiers: Vec<String> = log.item_identifiers().to_vec();
        identifiers.sort_unstable();
        Self::from_identifiers(identifiers)
    }

    pub fn from_identifiers(mut identifiers: Vec<String>) -> Self {
        identifiers.sort_unstable();
        identifiers.dedup();
        let lookup = identifiers
            .iter()
            .enumerate()
            .map(|(idx, id)| (id.clone(), idx as u32))
            .collect();
        Catalog {
            identifiers,
            lookup,
        }
    }

    pub fn len(&self) -> usize {
        self.identifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identifiers.is_empty()
    }

    pub fn identifier(&self, index: u32) -> &str {
        &self.identifiers[index as usize]
    }

    pub fn index_of(&self, identifier: &str) -> Option<u32> {
        self.lookup.get(identifier).copied()
    }

    pub fn identifiers(&self) -> &[String] {
        &self.identifiers
    }
}

impl From<Vec<String>> for Catalog {
    fn from(identifiers: Vec<String>) -> Self {
        Catalog::from_identifiers(identifiers)
    }
}

impl From<Catalog> for Vec<String> {
    fn from(catalog: Catalog) -> Self {
        catalog.identifiers
    }
}

/// Model kind, hyperparameters and provenance, carried by every model.
/// `trained_at` is the largest timestamp of the training log, so artifacts
/// stay byte-reproducible across wall-clock reruns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub kind: String,
    pub hyperparameters: BTreeMap<String, String>,
    pub trained_at: i64,
    pub filters_seen: bool,
}

/// The profile-conditioned top-K contract (see module docs).
///
/// `profile` must be strictly ascending model-space item indices.
pub trait RecModel: Send + Sync {
    fn metadata(&self) -> &ModelMetadata;
    fn catalog(&self) -> &Catalog;
    fn recommend(&self, profile: &[u32], k: usize) -> Vec<u32>;
}

/// Top-k of `(score, item)` pairs by (score desc, item asc): a partial
/// selection followed by an exact sort of the prefix, identical to sorting
/// everything and truncating.
pub(crate) fn top_k_by_score(mut scored: Vec<(f64, u32)>, k: usize) -> Vec<u32> {
    let take = k.min(scored.len());
    if take == 0 {
        return Vec::new();
    }
    let by_rank = |a: &(f64, u32), b: &(f64, u32)| {
        b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1))
    };
    if take < scored.len() {
        scored.select_nth_unstable_by(take - 1, by_rank);
        scored.truncate(take);
    }
    scored.sort_unstable_by(by_rank);
    scored.into_iter().map(|(_, item)| item).collect()
}

/// Items of one log in descending interaction count, ties by ascending
/// identifier. This is the shared fallback ranking of the content models.
pub fn popularity_ranking(counts: &[u64]) -> Vec<u32> {
    let mut ranking: Vec<u32> = (0..counts.len() as u32).collect();
    ranking.sort_by(|&a, &b| {
        counts[b as usize]
            .cmp(&counts[a as usize])
            .then(a.cmp(&b))
    });
    ranking
}

/// Top-k of `ranking` with `profile` (ascending indices) filtered out.
pub fn popularity_recommend(ranking: &[u32], profile: &[u32], k: usize) -> Vec<u32> {
    ranking
        .iter()
        .copied()
        .filter(|item| profile.binary_search(item).is_err())
        .take(k)
        .collect()
}

/// Seeded uniform sample of `k` items outside `profile`, without
/// replacement. The ranking is a full permutation keyed by `(seed, profile)`
/// alone, so the same profile always yields the same list and the top-k is
/// a prefix of the top-(k+1): hit sets nest across k like every other
/// deterministic ranker here.
pub fn random_recommend(n_items: usize, seed: u64, profile: &[u32], k: usize) -> Vec<u32> {
    use rand::seq::index::sample;
    let mut profile_hash: u64 = 0x243F6A8885A308D3;
    for &item in profile {
        profile_hash = profile_hash
            .rotate_left(17)
            .wrapping_mul(0x9E3779B97F4A7C15)
            ^ u64::from(item);
    }
    let mut rng = substream(seed, "random-recommend", profile_hash, 0);
    sample(&mut rng, n_items, n_items)
        .into_iter()
        .map(|idx| idx as u32)
        .filter(|item| profile.binary_search(item).is_err())
        .take(k)
        .collect()
}

/// Popularity baseline: ranks by training interaction count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityModel {
    catalog: Catalog,
    ranking: Vec<u32>,
    metadata: ModelMetadata,
}

impl PopularityModel {
    pub fn train(log: &InteractionLog) -> Self {
        let catalog = Catalog::from_log(log);
        let counts = catalog_counts(log, &catalog);
        let ranking = popularity_ranking(&counts);
        let metadata = ModelMetadata {
            kind: "popularity".to_string(),
            hyperparameters: BTreeMap::new(),
            trained_at: log.max_timestamp(),
            filters_seen: true,
        };
        PopularityModel {
            catalog,
            ranking,
            metadata,
        }
    }

    pub fn ranking(&self) -> &[u32] {
        &self.ranking
    }
}

impl RecModel for PopularityModel {
    fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn recommend(&self, profile: &[u32], k: usize) -> Vec<u32> {
        popularity_recommend(&self.ranking, profile, k)
    }
}

/// Random baseline: a seeded uniform sample per profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomModel {
    catalog: Catalog,
    seed: u64,
    metadata: ModelMetadata,
}

impl RandomModel {
    pub fn train(log: &InteractionLog, seed: u64) -> Self {
        let catalog = Catalog::from_log(log);
        let mut hyperparameters = BTreeMap::new();
        hyperparameters.insert("seed".to_string(), seed.to_string());
        let metadata = ModelMetadata {
            kind: "random".to_string(),
            hyperparameters,
            trained_at: log.max_timestamp(),
            filters_seen: true,
        };
        RandomModel {
            catalog,
            seed,
            metadata,
        }
    }
}

impl RecModel for RandomModel {
    fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn recommend(&self, profile: &[u32], k: usize) -> Vec<u32> {
        random_recommend(self.catalog.len(), self.seed, profile, k)
    }
}

pub(crate) fn catalog_counts(log: &InteractionLog, catalog: &Catalog) -> Vec<u64> {
    let mut counts = vec![0u64; catalog.len()];
    for item in 0..log.n_items() as u32 {
        let id = ItemId(item);
        if let Some(idx) = catalog.index_of(log.item_identifier(id)) {
            counts[idx as usize] = log.item_count(id);
        }
    }
    counts
}

/// Remap from log item ids to catalog indices (total when the catalog came
/// from the same log).
pub(crate) fn log_to_catalog(log: &InteractionLog, catalog: &Catalog) -> Vec<Option<u32>> {
    (0..log.n_items() as u32)
        .map(|i| catalog.index_of(log.item_identifier(ItemId(i))))
        .collect()
}

/// An owned model of any kind; the unit of training and persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    MfKnn(MfKnnModel),
    MfFoldIn(MfFoldInModel),
    Popularity(PopularityModel),
    Random(RandomModel),
}

impl Model {
    pub fn as_rec_model(&self) -> &dyn RecModel {
        match self {
            Model::MfKnn(m) => m,
            Model::MfFoldIn(m) => m,
            Model::Popularity(m) => m,
            Model::Random(m) => m,
        }
    }
}

impl RecModel for Model {
    fn metadata(&self) -> &ModelMetadata {
        self.as_rec_model().metadata()
    }

    fn catalog(&self) -> &Catalog {
        self.as_rec_model().catalog()
    }

    fn recommend(&self, profile: &[u32], k: usize) -> Vec<u32> {
        self.as_rec_model().recommend(profile, k)
    }
}

/// What to train. Parsed from compact text form, e.g.
/// `mf-knn f=16 reg=0.05 alpha=10 iters=3 m=100`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    MfKnn {
        hyperparams: MfHyperparams,
        neighbors: usize,
    },
    MfFoldIn {
        hyperparams: MfHyperparams,
    },
    Popularity,
    Random,
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut tokens = text.split_whitespace();
        let kind = tokens
            .next()
            .ok_or_else(|| ModelError::InvalidSpec(text.to_string()))?;
        let allowed: &[&str] = match kind {
            "mf-knn" => &["f", "reg", "alpha", "iters", "m"],
            "mf-foldin" => &["f", "reg", "alpha", "iters"],
            _ => &[],
        };
        let mut params: BTreeMap<&str, &str> = BTreeMap::new();
        for token in tokens {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidSpec(format!("{text}: bad token `{token}`")))?;
            if !allowed.contains(&key) {
                return Err(ModelError::InvalidSpec(format!(
                    "{text}: unknown parameter `{key}`"
                )));
            }
            params.insert(key, value);
        }
        let get_usize = |key: &str, default: usize| -> Result<usize, ModelError> {
            match params.get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| ModelError::InvalidSpec(format!("{text}: bad `{key}`"))),
                None => Ok(default),
            }
        };
        let get_f64 = |key: &str, default: f64| -> Result<f64, ModelError> {
            match params.get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| ModelError::InvalidSpec(format!("{text}: bad `{key}`"))),
                None => Ok(default),
            }
        };
        match kind {
            "mf-knn" => Ok(ModelSpec::MfKnn {
                hyperparams: MfHyperparams {
                    factors: get_usize("f", 16)?,
                    lambda: get_f64("reg", 0.05)?,
                    alpha: get_f64("alpha", 10.0)?,
                    iterations: get_usize("iters", 3)?,
                },
                neighbors: get_usize("m", 100)?,
            }),
            "mf-foldin" => Ok(ModelSpec::MfFoldIn {
                hyperparams: MfHyperparams {
                    factors: get_usize("f", 16)?,
                    lambda: get_f64("reg", 0.05)?,
                    alpha: get_f64("alpha", 10.0)?,
                    iterations: get_usize("iters", 3)?,
                },
            }),
            "popularity" => Ok(ModelSpec::Popularity),
            "random" => Ok(ModelSpec::Random),
            other => Err(ModelError::InvalidSpec(format!(
                "unknown model kind `{other}`"
            ))),
        }
    }

    /// The text form accepted by [`ModelSpec::parse`]; also used as the
    /// model label in result tables (comma-free by construction).
    pub fn to_text(&self) -> String {
        match self {
            ModelSpec::MfKnn {
                hyperparams,
                neighbors,
            } => format!(
                "mf-knn f={} reg={} alpha={} iters={} m={}",
                hyperparams.factors,
                hyperparams.lambda,
                hyperparams.alpha,
                hyperparams.iterations,
                neighbors
            ),
            ModelSpec::MfFoldIn { hyperparams } => format!(
                "mf-foldin f={} reg={} alpha={} iters={}",
                hyperparams.factors, hyperparams.lambda, hyperparams.alpha, hyperparams.iterations
            ),
            ModelSpec::Popularity => "popularity".to_string(),
            ModelSpec::Random => "random".to_string(),
        }
    }

    /// Short label for result tables.
    pub fn label(&self) -> String {
        self.to_text()
    }

    pub fn train(&self, log: &InteractionLog, seed: u64) -> Result<Model, ModelError> {
        match self {
            ModelSpec::MfKnn {
                hyperparams,
                neighbors,
            } => Ok(Model::MfKnn(MfKnnModel::train(
                log,
                hyperparams.clone(),
                *neighbors,
                seed,
            )?)),
            ModelSpec::MfFoldIn { hyperparams } => Ok(Model::MfFoldIn(MfFoldInModel::train(
                log,
                hyperparams.clone(),
                seed,
            )?)),
            ModelSpec::Popularity => Ok(Model::Popularity(PopularityModel::train(log))),
            ModelSpec::Random => Ok(Model::Random(RandomModel::train(log, seed))),
        }
    }
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelContainer {
    format_version: u32,
    model: Model,
}

/// Writes a model as a versioned JSON container. JSON float serialization is
/// shortest-round-trip, so save/load/save reproduces identical bytes.
pub fn save_model<W: Write>(model: &Model, writer: W) -> Result<(), ModelError> {
    let container = ModelContainer {
        format_version: MODEL_FORMAT_VERSION,
        model: model.clone(),
    };
    serde_json::to_writer(writer, &container).map_err(|e| ModelError::Format(e.to_string()))
}

pub fn load_model<R: Read>(reader: R) -> Result<Model, ModelError> {
    let container: ModelContainer =
        serde_json::from_reader(reader).map_err(|e| ModelError::Format(e.to_string()))?;
    if container.format_version != MODEL_FORMAT_VERSION {
        return Err(ModelError::Format(format!(
            "unsupported model format version {}",
            container.format_version
        )));
    }
    Ok(container.model)
}

/// Translates between a caller's item index space (a log or a simulated
/// world) and a model's own catalog, so a model can be evaluated against
/// data it was not trained on.
pub struct ModelBinding<'a> {
    model: &'a dyn RecModel,
    to_model: Vec<Option<u32>>,
    to_caller: Vec<Option<u32>>,
}

impl<'a> ModelBinding<'a> {
    /// `caller_items[i]` is the identifier of caller-space item index `i`.
    pub fn new(model: &'a dyn RecModel, caller_items: &[String]) -> Self {
        let catalog = model.catalog();
        let mut to_model = Vec::with_capacity(caller_items.len());
        let mut to_caller = vec![None; catalog.len()];
        for (caller_idx, identifier) in caller_items.iter().enumerate() {
            let model_idx = catalog.index_of(identifier);
            to_model.push(model_idx);
            if let Some(m) = model_idx {
                to_caller[m as usize] = Some(caller_idx as u32);
            }
        }
        ModelBinding {
            model,
            to_model,
            to_caller,
        }
    }

    pub fn model(&self) -> &dyn RecModel {
        self.model
    }

    /// Caller item index -> model item index, `None` when the model has
    /// never seen the item.
    pub fn to_model(&self, caller_item: u32) -> Option<u32> {
        self.to_model
            .get(caller_item as usize)
            .copied()
            .flatten()
    }

    /// Caller-space profile (any order, duplicates allowed) to a sorted
    /// model-space profile; items unknown to the model are dropped.
    pub fn model_profile(&self, caller_profile: &[u32]) -> Vec<u32> {
        let mut profile: Vec<u32> = caller_profile
            .iter()
            .filter_map(|&i| self.to_model(i))
            .collect();
        profile.sort_unstable();
        profile.dedup();
        profile
    }

    /// Recommends in model space.
    pub fn recommend_model_space(&self, profile: &[u32], k: usize) -> Vec<u32> {
        self.model.recommend(profile, k)
    }

    /// Recommends and maps the list back to caller space. Items outside the
    /// caller's vocabulary are dropped (they can never be interacted with in
    /// the caller's world).
    pub fn recommend_caller_space(&self, caller_profile: &[u32], k: usize) -> Vec<u32> {
        let profile = self.model_profile(caller_profile);
        self.model
            .recommend(&profile, k)
            .into_iter()
            .filter_map(|m| self.to_caller[m as usize])
            .collect()
    }
}
