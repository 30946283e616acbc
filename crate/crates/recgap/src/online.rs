//! Implicit click-through rate from recommendation logs.
//!
//! A recommendation event is successful if its user interacted with at least
//! one of the recommended items inside the attribution window `[t, t+d]`
//! (both endpoints inclusive). The interaction log itself is the click
//! evidence; there is no explicit attribution channel.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::data::{DataError, InteractionLog, ItemId};
use crate::numfmt::round_sig12;

/// One served recommendation: the list shown to `user` at `timestamp`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecommendationEvent {
    pub timestamp: i64,
    pub user: String,
    pub items: Vec<String>,
}

#[derive(Debug, Error)]
pub enum OnlineError {
    #[error("recommendation log contains no events")]
    EmptyRecommendationLog,
    #[error("negative attribution window {0}")]
    NegativeWindow(i64),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error")]
    Io(#[from] io::Error),
}

/// Implicit CTR over one attribution window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CtrResult {
    pub value: f64,
    pub d: i64,
    pub n_events: usize,
    pub n_hits: usize,
}

impl CtrResult {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "value": round_sig12(self.value),
            "d": self.d,
            "n_events": self.n_events,
            "n_hits": self.n_hits,
        })
    }
}

/// Computes `iCTR(d)`: the fraction of recommendation events followed within
/// `d` seconds by an interaction with any recommended item.
///
/// Events are independent: one interaction may satisfy several overlapping
/// events of the same user, and each still counts. The count reduction is
/// integer arithmetic, so event order and thread count cannot change the
/// result.
pub fn ictr(
    recs: &[RecommendationEvent],
    log: &InteractionLog,
    d: i64,
) -> Result<CtrResult, OnlineError> {
    if recs.is_empty() {
        return Err(OnlineError::EmptyRecommendationLog);
    }
    if d < 0 {
        return Err(OnlineError::NegativeWindow(d));
    }

    let n_hits = recs
        .par_iter()
        .filter(|event| event_hit(event, log, d))
        .count();

    Ok(CtrResult {
        value: n_hits as f64 / recs.len() as f64,
        d,
        n_events: recs.len(),
        n_hits,
    })
}

fn event_hit(event: &RecommendationEvent, log: &InteractionLog, d: i64) -> bool {
    let user = match log.user_id(&event.user) {
        Some(u) => u,
        None => return false, // user never interacted at all
    };
    let mut shown: Vec<ItemId> = event
        .items
        .iter()
        .filter_map(|name| log.item_id(name))
        .collect();
    if shown.is_empty() {
        return false;
    }
    shown.sort_unstable();

    let history = log.history(user);
    // History is sorted by timestamp; scan the closed window [t, t+d].
    let start = history.partition_point(|&(_, t)| t < event.timestamp);
    let end = event.timestamp.saturating_add(d);
    history[start..]
        .iter()
        .take_while(|&&(_, t)| t <= end)
        .any(|&(item, _)| shown.binary_search(&item).is_ok())
}

/// Header of the recommendation-log CSV.
pub const RECOMMENDATION_HEADER: [&str; 3] = ["timestamp", "user_id", "item_ids"];

/// Parses a recommendation-log CSV: `timestamp,user_id,item_ids` with
/// `item_ids` a `|`-separated ordered list. Rejects malformed rows with
/// their line number, like interaction ingestion does.
pub fn read_recommendation_log<R: Read>(source: R) -> Result<Vec<RecommendationEvent>, OnlineError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| malformed(1, format!("unreadable header: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != RECOMMENDATION_HEADER {
        return Err(malformed(
            1,
            format!(
                "expected header `{}`, got `{}`",
                RECOMMENDATION_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut events = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(_) => return Err(malformed(line, "invalid CSV record".to_string())),
        }
        if record.len() != 3 {
            return Err(malformed(
                line,
                format!("expected 3 fields, got {}", record.len()),
            ));
        }
        let timestamp: i64 = record[0]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("timestamp `{}` is not an integer", &record[0])))?;
        if timestamp < 0 {
            return Err(malformed(line, format!("negative timestamp {timestamp}")));
        }
        if record[1].is_empty() {
            return Err(malformed(line, "empty user identifier".to_string()));
        }
        let items: Vec<String> = record[2]
            .split('|')
            .map(|s| s.to_string())
            .collect();
        if items.iter().any(|i| i.is_empty()) {
            return Err(malformed(line, "empty item identifier in list".to_string()));
        }
        let mut dedup = items.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != items.len() {
            return Err(malformed(line, "duplicate items in one event".to_string()));
        }
        events.push(RecommendationEvent {
            timestamp,
            user: record[1].to_string(),
            items,
        });
    }
    if events.is_empty() {
        return Err(OnlineError::EmptyRecommendationLog);
    }
    Ok(events)
}

/// Writes events in the recommendation-log CSV format.
pub fn write_recommendation_log<W: Write>(
    events: &[RecommendationEvent],
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "{}", RECOMMENDATION_HEADER.join(","))?;
    for event in events {
        writeln!(
            out,
            "{},{},{}",
            event.timestamp,
            event.user,
            event.items.join("|")
        )?;
    }
    Ok(())
}

fn malformed(line: u64, reason: String) -> OnlineError {
    OnlineError::Data(DataError::MalformedRow { line, reason })
}
