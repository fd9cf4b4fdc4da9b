use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 3] = ["user_id", "item_id", "timestamp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user_id: u64, item_id: u64, timestamp: i64) -> Self {
        Interaction {
            user_id,
            item_id,
            timestamp,
        }
    }

    fn sort_key(&self) -> (i64, u64, u64) {
        (self.timestamp, self.user_id, self.item_id)
    }
}

/// Stable chronological order with `(timestamp, user_id, item_id)` tiebreak.
pub fn sort_chronologically(rows: &mut [Interaction]) {
    rows.sort_by_key(Interaction::sort_key);
}

/// Reads a `user_id,item_id,timestamp` file and returns it sorted.
pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_err(1, format!("expected header {:?}, found {:?}", HEADER.join(","), header)));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let field = |i: usize| &rec[i];
        let user_id = field(0)
            .parse()
            .map_err(|_| parse_err(line, format!("user_id {:?} is not an unsigned integer", field(0))))?;
        let item_id = field(1)
            .parse()
            .map_err(|_| parse_err(line, format!("item_id {:?} is not an unsigned integer", field(1))))?;
        let timestamp = field(2)
            .parse()
            .map_err(|_| parse_err(line, format!("timestamp {:?} is not an integer", field(2))))?;
        rows.push(Interaction {
            user_id,
            item_id,
            timestamp,
        });
    }
    sort_chronologically(&mut rows);
    Ok(rows)
}

pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(HEADER).map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.write_record([r.user_id.to_string(), r.item_id.to_string(), r.timestamp.to_string()])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "user_id,item_id,timestamp\n1,5,30\n2,6,10\n1,7,20\n").unwrap();
        let rows = load_interactions(&p).unwrap();
        assert_eq!(
            rows,
            vec![Interaction::new(2, 6, 10), Interaction::new(1, 7, 20), Interaction::new(1, 5, 30)]
        );
    }

    #[test]
    fn bad_timestamp_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "user_id,item_id,timestamp\n1,5,30\n2,6,soon\n").unwrap();
        match load_interactions(&p).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("timestamp"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_header_rejected_and_duplicates_kept() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "user,item,ts\n1,5,30\n").unwrap();
        assert!(load_interactions(&p).is_err());
        std::fs::write(&p, "user_id,item_id,timestamp\n1,5,30\n1,5,30\n").unwrap();
        assert_eq!(load_interactions(&p).unwrap().len(), 2);
    }
}
