//! recgap: time-aware, popularity-debiased offline evaluation for
//! recommenders, plus the machinery to test how well those offline metrics
//! pick the model that wins online.
//!
//! The crate is organized around one pipeline:
//!
//! * [`data`] — interaction-log ingestion and indexing;
//! * [`models`] — implicit-MF / item-kNN recommenders and baselines behind a
//!   shared top-K contract;
//! * [`offline`] — recall under leave-one-out and leave-last-one-out splits,
//!   with optional popularity penalization;
//! * [`online`] — implicit click-through rate over recommendation logs;
//! * [`sim`] — a deterministic live-recommender world with sticky A/B
//!   serving and periodic retraining;
//! * [`experiment`] — the (VAL, beta, k) sweep and model-selection-recall
//!   aggregation that ties the offline and online sides together.

pub mod data;
pub mod experiment;
pub mod models;
pub mod numfmt;
pub mod offline;
pub mod online;
pub mod seeded;
pub mod sim;
