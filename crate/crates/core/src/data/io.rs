//! CSV readers and writers for the session, purchase and item-feature files.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};

use super::{
    DataError, Event, ItemId, Purchase, Purchases, Session, SessionId, SideInfoTable, Timestamp,
};

pub const SESSIONS_HEADER: &str = "session_id,item_id,date";
pub const FEATURES_HEADER: &str = "item_id,feature_category_id,feature_value_id";

const NAIVE_FORMATS: [&str; 2] = ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"];

/// Parses an ISO-8601 timestamp; values without an offset are taken as UTC.
pub fn parse_timestamp(raw: &str) -> Option<Timestamp> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp_millis());
    }
    NAIVE_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|dt| dt.and_utc().timestamp_millis())
}

/// `YYYY-MM-DD HH:MM:SS.mmm` in UTC, the layout of the public dataset.
pub fn format_timestamp(ts: Timestamp) -> String {
    DateTime::<Utc>::from_timestamp_millis(ts)
        .expect("timestamp within chrono range")
        .format("%Y-%m-%d %H:%M:%S%.3f")
        .to_string()
}

fn open_reader(path: &Path, expected: &'static str) -> Result<csv::Reader<File>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| DataError::Malformed {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let found = headers.iter().collect::<Vec<_>>().join(",");
    if found.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    if found != expected {
        return Err(DataError::Header {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(reader)
}

/// Iterates data rows as `(line, fields)` with uniform error reporting.
fn for_each_row<const N: usize>(
    path: &Path,
    expected: &'static str,
    mut f: impl FnMut(u64, [&str; N]) -> Result<(), DataError>,
) -> Result<usize, DataError> {
    let mut reader = open_reader(path, expected)?;
    let mut record = csv::StringRecord::new();
    let mut rows = 0;
    loop {
        let line = reader.position().line() + 1;
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                return Err(DataError::Malformed {
                    path: path.to_path_buf(),
                    line: e.position().map_or(line, |p| p.line()),
                    message: e.to_string(),
                })
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        if record.len() != N {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line,
                message: format!("expected {N} fields, found {}", record.len()),
            });
        }
        let mut fields = [""; N];
        for (slot, value) in fields.iter_mut().zip(record.iter()) {
            *slot = value;
        }
        f(line, fields)?;
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    Ok(rows)
}

fn parse_id(path: &Path, line: u64, name: &str, raw: &str) -> Result<u64, DataError> {
    match raw.parse::<u64>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(DataError::Malformed {
            path: path.to_path_buf(),
            line,
            message: format!("{name} must be a positive integer, found `{raw}`"),
        }),
    }
}

fn parse_date(path: &Path, line: u64, raw: &str) -> Result<Timestamp, DataError> {
    parse_timestamp(raw).ok_or_else(|| DataError::Malformed {
        path: path.to_path_buf(),
        line,
        message: format!("unparseable date `{raw}`"),
    })
}

/// Reads `session_id,item_id,date` rows into sessions ordered by end time
/// (ties by session id). Events within a session are time-sorted; equal
/// timestamps keep file order.
pub fn load_sessions(path: impl AsRef<Path>) -> Result<Vec<Session>, DataError> {
    let path = path.as_ref();
    let mut groups: HashMap<SessionId, Vec<Event>> = HashMap::new();
    for_each_row(path, SESSIONS_HEADER, |line, [sid, item, date]| {
        let sid = parse_id(path, line, "session_id", sid)?;
        let item = parse_id(path, line, "item_id", item)?;
        let timestamp = parse_date(path, line, date)?;
        groups
            .entry(sid)
            .or_default()
            .push(Event { item, timestamp });
        Ok(())
    })?;
    let mut sessions: Vec<Session> = groups
        .into_iter()
        .filter_map(|(sid, events)| Session::new(sid, events))
        .collect();
    sessions.sort_by_key(|s| (s.end_time, s.session_id));
    Ok(sessions)
}

/// Reads `session_id,item_id,date` purchase rows; at most one per session.
pub fn load_purchases(path: impl AsRef<Path>) -> Result<Purchases, DataError> {
    let path = path.as_ref();
    let mut purchases = Purchases::new();
    for_each_row(path, SESSIONS_HEADER, |line, [sid, item, date]| {
        let session = parse_id(path, line, "session_id", sid)?;
        let item = parse_id(path, line, "item_id", item)?;
        let timestamp = parse_date(path, line, date)?;
        if purchases
            .insert(session, Purchase { item, timestamp })
            .is_some()
        {
            return Err(DataError::DuplicatePurchase {
                path: path.to_path_buf(),
                line,
                session,
            });
        }
        Ok(())
    })?;
    Ok(purchases)
}

/// Reads `item_id,feature_category_id,feature_value_id` rows.
/// Identical triples are collapsed.
pub fn load_item_features(path: impl AsRef<Path>) -> Result<SideInfoTable, DataError> {
    let path = path.as_ref();
    let mut triples = Vec::new();
    for_each_row(path, FEATURES_HEADER, |line, [item, cat, val]| {
        let item = parse_id(path, line, "item_id", item)?;
        let cat = parse_id(path, line, "feature_category_id", cat)?;
        let val = parse_id(path, line, "feature_value_id", val)?;
        triples.push((item, cat, val));
        Ok(())
    })?;
    Ok(SideInfoTable::from_triples(triples))
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>, DataError> {
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes sessions in the given order, events in session order.
pub fn write_sessions(path: impl AsRef<Path>, sessions: &[Session]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = create(path)?;
    writeln!(out, "{SESSIONS_HEADER}").map_err(io_err(path))?;
    for s in sessions {
        for e in &s.events {
            writeln!(
                out,
                "{},{},{}",
                s.session_id,
                e.item,
                format_timestamp(e.timestamp)
            )
            .map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

pub fn write_purchases(
    path: impl AsRef<Path>,
    purchases: &[(SessionId, Purchase)],
) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = create(path)?;
    writeln!(out, "{SESSIONS_HEADER}").map_err(io_err(path))?;
    for (sid, p) in purchases {
        writeln!(out, "{},{},{}", sid, p.item, format_timestamp(p.timestamp))
            .map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn write_item_features(
    path: impl AsRef<Path>,
    triples: &[(ItemId, u64, u64)],
) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = create(path)?;
    writeln!(out, "{FEATURES_HEADER}").map_err(io_err(path))?;
    for (item, cat, val) in triples {
        writeln!(out, "{item},{cat},{val}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}
