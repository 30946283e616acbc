//! Interaction logs: parsing, validation and indexing.
//!
//! An [`InteractionLog`] is the immutable, fully indexed form of a stream of
//! `(user, item, timestamp)` events. All other modules consume it read-only,
//! so it is safe to share across threads. Identifiers are interned into dense
//! `u32` indices at construction; the original strings stay available for
//! output and joins with other files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Dense index of a user inside one [`InteractionLog`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(pub u32);

/// Dense index of an item inside one [`InteractionLog`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemId(pub u32);

impl UserId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A single user-item event. Timestamps are integer seconds since epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error")]
    Io(#[from] io::Error),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("log contains no interactions")]
    EmptyLog,
}

/// Expected header of an interaction CSV.
pub const INTERACTION_HEADER: [&str; 3] = ["user_id", "item_id", "timestamp"];

/// An indexed, immutable interaction log.
///
/// Per-user histories are sorted by timestamp; rows with equal timestamps
/// keep their input order. Both guarantees are load-bearing for the
/// time-aware metrics, so they are enforced here and nowhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    users: Vec<String>,
    items: Vec<String>,
    user_lookup: HashMap<String, UserId>,
    item_lookup: HashMap<String, ItemId>,
    interactions: Vec<Interaction>,
    histories: Vec<Vec<(ItemId, i64)>>,
    item_counts: Vec<u64>,
    users_by_identifier: Vec<UserId>,
}

impl InteractionLog {
    /// Builds a log from already-parsed records, in input order.
    ///
    /// Returns [`DataError::EmptyLog`] for an empty iterator and
    /// [`DataError::MalformedRow`] for empty identifiers or negative
    /// timestamps (line numbers count records from 1).
    pub fn from_records<'a, I>(records: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, i64)>,
    {
        let mut builder = LogBuilder::new();
        for (line, (user, item, timestamp)) in records.into_iter().enumerate() {
            builder.push(user, item, timestamp, line as u64 + 1)?;
        }
        builder.finish()
    }

    /// Parses and indexes an interaction CSV (`user_id,item_id,timestamp`,
    /// header required). Malformed rows abort ingestion with their line
    /// number; they are never skipped.
    pub fn ingest<R: Read>(source: R) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(source);

        let headers = reader.map_err_line(|r| r.headers().cloned())?;
        if headers.iter().collect::<Vec<_>>() != INTERACTION_HEADER {
            return Err(DataError::MalformedRow {
                line: 1,
                reason: format!(
                    "expected header `{}`, got `{}`",
                    INTERACTION_HEADER.join(","),
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }

        let mut builder = LogBuilder::new();
        let mut record = csv::StringRecord::new();
        loop {
            let line = reader.position().line();
            match reader.read_record(&mut record) {
                Ok(false) => break,
                Ok(true) => {}
                Err(err) => return Err(csv_error_to_malformed(err, line)),
            }
            if record.len() != 3 {
                return Err(DataError::MalformedRow {
                    line,
                    reason: format!("expected 3 fields, got {}", record.len()),
                });
            }
            let timestamp: i64 =
                record[2]
                    .trim()
                    .parse()
                    .map_err(|_| DataError::MalformedRow {
                        line,
                        reason: format!("timestamp `{}` is not an integer", &record[2]),
                    })?;
            builder.push(&record[0], &record[1], timestamp, line)?;
        }
        builder.finish()
    }

    /// Convenience wrapper over [`InteractionLog::ingest`] for a file path.
    pub fn ingest_path<P: AsRef<Path>>(path: P) -> Result<Self, DataError> {
        Self::ingest(BufReader::new(File::open(path)?))
    }

    /// Writes the log back out in ingestion format, in input order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", INTERACTION_HEADER.join(","))?;
        for it in &self.interactions {
            writeln!(
                out,
                "{},{},{}",
                self.users[it.user.index()],
                self.items[it.item.index()],
                it.timestamp
            )?;
        }
        Ok(())
    }

    /// Total interaction count `p`.
    pub fn n_interactions(&self) -> usize {
        self.interactions.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    /// A user's interactions as `(item, timestamp)`, sorted by timestamp,
    /// ties in input order.
    pub fn history(&self, user: UserId) -> &[(ItemId, i64)] {
        &self.histories[user.index()]
    }

    pub fn item_count(&self, item: ItemId) -> u64 {
        self.item_counts[item.index()]
    }

    pub fn user_identifier(&self, user: UserId) -> &str {
        &self.users[user.index()]
    }

    pub fn item_identifier(&self, item: ItemId) -> &str {
        &self.items[item.index()]
    }

    pub fn user_id(&self, identifier: &str) -> Option<UserId> {
        self.user_lookup.get(identifier).copied()
    }

    pub fn item_id(&self, identifier: &str) -> Option<ItemId> {
        self.item_lookup.get(identifier).copied()
    }

    /// Item identifiers indexed by [`ItemId`].
    pub fn item_identifiers(&self) -> &[String] {
        &self.items
    }

    /// All users, sorted by identifier. Metric reductions iterate this order
    /// so results do not depend on thread count or map iteration order.
    pub fn users_by_identifier(&self) -> &[UserId] {
        &self.users_by_identifier
    }

    /// Largest timestamp in the log.
    pub fn max_timestamp(&self) -> i64 {
        self.interactions
            .iter()
            .map(|it| it.timestamp)
            .max()
            .expect("log is never empty")
    }
}

trait MapErrLine<T> {
    fn map_err_line(&mut self, f: impl FnOnce(&mut Self) -> csv::Result<T>) -> Result<T, DataError>;
}

impl<R: Read> MapErrLine<csv::StringRecord> for csv::Reader<R> {
    fn map_err_line(
        &mut self,
        f: impl FnOnce(&mut Self) -> csv::Result<csv::StringRecord>,
    ) -> Result<csv::StringRecord, DataError> {
        let line = self.position().line();
        f(self).map_err(|err| csv_error_to_malformed(err, line))
    }
}

fn csv_error_to_malformed(err: csv::Error, fallback_line: u64) -> DataError {
    let line = err
        .position()
        .map(|pos| pos.line())
        .unwrap_or(fallback_line);
    if let csv::ErrorKind::Io(io_err) = err.into_kind() {
        return DataError::Io(io_err);
    }
    DataError::MalformedRow {
        line,
        reason: "invalid CSV record".to_string(),
    }
}

struct LogBuilder {
    users: Vec<String>,
    items: Vec<String>,
    user_lookup: HashMap<String, UserId>,
    item_lookup: HashMap<String, ItemId>,
    interactions: Vec<Interaction>,
    histories: Vec<Vec<(ItemId, i64)>>,
    item_counts: Vec<u64>,
}

impl LogBuilder {
    fn new() -> Self {
        LogBuilder {
            users: Vec::new(),
            items: Vec::new(),
            user_lookup: HashMap::new(),
            item_lookup: HashMap::new(),
            interactions: Vec::new(),
            histories: Vec::new(),
            item_counts: Vec::new(),
        }
    }

    fn push(&mut self, user: &str, item: &str, timestamp: i64, line: u64) -> Result<(), DataError> {
        if user.is_empty() {
            return Err(DataError::MalformedRow {
                line,
                reason: "empty user identifier".to_string(),
            });
        }
        if item.is_empty() {
            return Err(DataError::MalformedRow {
                line,
                reason: "empty item identifier".to_string(),
            });
        }
        if timestamp < 0 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("negative timestamp {timestamp}"),
            });
        }

        let user_id = match self.user_lookup.get(user) {
            Some(&id) => id,
            None => {
                let id = UserId(self.users.len() as u32);
                self.users.push(user.to_string());
                self.user_lookup.insert(user.to_string(), id);
                self.histories.push(Vec::new());
                id
            }
        };
        let item_id = match self.item_lookup.get(item) {
            Some(&id) => id,
            None => {
                let id = ItemId(self.items.len() as u32);
                self.items.push(item.to_string());
                self.item_lookup.insert(item.to_string(), id);
                self.item_counts.push(0);
                id
            }
        };

        self.interactions.push(Interaction {
            user: user_id,
            item: item_id,
            timestamp,
        });
        self.histories[user_id.index()].push((item_id, timestamp));
        self.item_counts[item_id.index()] += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<InteractionLog, DataError> {
        if self.interactions.is_empty() {
            return Err(DataError::EmptyLog);
        }
        for history in &mut self.histories {
            // Stable: equal timestamps keep input order.
            history.sort_by_key(|&(_, t)| t);
        }
        let mut users_by_identifier: Vec<UserId> =
            (0..self.users.len() as u32).map(UserId).collect();
        users_by_identifier.sort_by(|a, b| self.users[a.index()].cmp(&self.users[b.index()]));
        Ok(InteractionLog {
            users: self.users,
            items: self.items,
            user_lookup: self.user_lookup,
            item_lookup: self.item_lookup,
            interactions: self.interactions,
            histories: self.histories,
            item_counts: self.item_counts,
            users_by_identifier,
        })
    }
}

/// Per-user sets `N_u` of distinct interacted items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevantItems {
    per_user: Vec<Vec<ItemId>>,
}

impl RelevantItems {
    /// The set for one user, sorted ascending by item index.
    pub fn set(&self, user: UserId) -> &[ItemId] {
        &self.per_user[user.index()]
    }

    pub fn len(&self, user: UserId) -> usize {
        self.per_user[user.index()].len()
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }
}

/// Derives `N_u` for every user: the distinct items of `F_u`.
pub fn relevant_items(log: &InteractionLog) -> RelevantItems {
    let per_user = (0..log.n_users() as u32)
        .map(|u| {
            let mut items: Vec<ItemId> = log.history(UserId(u)).iter().map(|&(i, _)| i).collect();
            items.sort_unstable();
            items.dedup();
            items
        })
        .collect();
    RelevantItems { per_user }
}

/// Relative popularity `p(i) = count(i) / p` per item of one log.
///
/// Every item that appears in the log has `count >= 1`, so `p(i) > 0` and
/// `p(i)^(-beta)` stays finite for any beta. The table sums to one; the
/// debiased metrics are invariant to rescaling it (see [`PopularityTable::scaled`]).
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable {
    values: Vec<f64>,
}

impl PopularityTable {
    pub fn get(&self, item: ItemId) -> Option<f64> {
        self.values.get(item.index()).copied()
    }

    pub fn n_items(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The same table with every entry multiplied by `c > 0`. Only the scale
    /// changes; metric values built from ratios of `p^(-beta)` sums must not.
    pub fn scaled(&self, c: f64) -> PopularityTable {
        assert!(c > 0.0, "popularity scale factor must be positive");
        PopularityTable {
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// Builds a table directly from values; used by model serialization.
    pub fn from_values(values: Vec<f64>) -> PopularityTable {
        PopularityTable { values }
    }
}

/// Computes relative popularity over the full log (training plus evaluation
/// interactions, so every evaluated item has positive mass).
pub fn compute_popularity(log: &InteractionLog) -> PopularityTable {
    let total = log.n_interactions() as f64;
    let values = (0..log.n_items() as u32)
        .map(|i| log.item_count(ItemId(i)) as f64 / total)
        .collect();
    PopularityTable { values }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_csv() -> &'static str {
        "user_id,item_id,timestamp\nu1,a,10\nu2,b,5\nu1,b,3\n"
    }

    #[test]
    fn ingest_indexes_and_sorts_per_user() {
        let log = InteractionLog::ingest(small_csv().as_bytes()).unwrap();
        assert_eq!(log.n_interactions(), 3);
        assert_eq!(log.n_users(), 2);
        let u1 = log.user_id("u1").unwrap();
        let history: Vec<&str> = log
            .history(u1)
            .iter()
            .map(|&(i, _)| log.item_identifier(i))
            .collect();
        assert_eq!(history, ["b", "a"]);
        assert_eq!(log.history(u1)[0].1, 3);
    }

    #[test]
    fn ingest_rejects_non_integer_timestamp_with_line() {
        let csv = "user_id,item_id,timestamp\nu1,a,10\nu1,b,11\nu2,a,oops\n";
        match InteractionLog::ingest(csv.as_bytes()) {
            Err(DataError::MalformedRow { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_bad_header_and_field_counts() {
        let bad_header = "user,item,ts\nu1,a,10\n";
        assert!(matches!(
            InteractionLog::ingest(bad_header.as_bytes()),
            Err(DataError::MalformedRow { line: 1, .. })
        ));
        let bad_fields = "user_id,item_id,timestamp\nu1,a\n";
        assert!(matches!(
            InteractionLog::ingest(bad_fields.as_bytes()),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn ingest_rejects_empty_fields_and_negative_timestamps() {
        let empty_user = "user_id,item_id,timestamp\n,a,10\n";
        assert!(matches!(
            InteractionLog::ingest(empty_user.as_bytes()),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
        let negative = "user_id,item_id,timestamp\nu1,a,-1\n";
        assert!(matches!(
            InteractionLog::ingest(negative.as_bytes()),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn empty_log_is_an_error() {
        let header_only = "user_id,item_id,timestamp\n";
        assert!(matches!(
            InteractionLog::ingest(header_only.as_bytes()),
            Err(DataError::EmptyLog)
        ));
        assert!(matches!(
            InteractionLog::from_records(Vec::new()),
            Err(DataError::EmptyLog)
        ));
    }

    #[test]
    fn ingestion_is_idempotent() {
        let a = InteractionLog::ingest(small_csv().as_bytes()).unwrap();
        let b = InteractionLog::ingest(small_csv().as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equal_timestamp_rows_of_other_users_do_not_disturb_histories() {
        let a = InteractionLog::from_records(vec![
            ("u1", "a", 5),
            ("u2", "x", 5),
            ("u1", "b", 5),
            ("u2", "y", 5),
        ])
        .unwrap();
        let b = InteractionLog::from_records(vec![
            ("u2", "x", 5),
            ("u1", "a", 5),
            ("u2", "y", 5),
            ("u1", "b", 5),
        ])
        .unwrap();
        for (log_a, log_b, user) in [(&a, &b, "u1"), (&a, &b, "u2")] {
            let ha: Vec<&str> = log_a
                .history(log_a.user_id(user).unwrap())
                .iter()
                .map(|&(i, _)| log_a.item_identifier(i))
                .collect();
            let hb: Vec<&str> = log_b
                .history(log_b.user_id(user).unwrap())
                .iter()
                .map(|&(i, _)| log_b.item_identifier(i))
                .collect();
            assert_eq!(ha, hb);
        }
    }

    #[test]
    fn popularity_matches_hand_counts() {
        let log =
            InteractionLog::from_records(vec![("u1", "a", 1), ("u1", "a", 2), ("u2", "a", 3)])
                .unwrap();
        let pop = compute_popularity(&log);
        assert_eq!(pop.get(log.item_id("a").unwrap()), Some(1.0));

        let log = InteractionLog::from_records(vec![
            ("u1", "a", 1),
            ("u1", "a", 2),
            ("u2", "a", 3),
            ("u2", "b", 4),
        ])
        .unwrap();
        let pop = compute_popularity(&log);
        assert_eq!(pop.get(log.item_id("a").unwrap()), Some(0.75));
        assert_eq!(pop.get(log.item_id("b").unwrap()), Some(0.25));
        let sum: f64 = pop.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relevant_items_deduplicates() {
        let log = InteractionLog::from_records(vec![
            ("u1", "a", 1),
            ("u1", "a", 2),
            ("u1", "b", 3),
            ("u2", "c", 1),
        ])
        .unwrap();
        let relevant = relevant_items(&log);
        assert_eq!(relevant.len(log.user_id("u1").unwrap()), 2);
        assert_eq!(relevant.len(log.user_id("u2").unwrap()), 1);
    }

    #[test]
    fn round_trips_through_csv() {
        let log = InteractionLog::ingest(small_csv().as_bytes()).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(buf, small_csv().as_bytes());
        let again = InteractionLog::ingest(buf.as_slice()).unwrap();
        assert_eq!(log, again);
    }
}
