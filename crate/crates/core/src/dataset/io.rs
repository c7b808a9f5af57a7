//! CSV persistence: `milk.csv`, `cows.csv`, `events.csv`, `body.csv`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use super::{CowRecord, Herd, InfectionEvent, MilkRecording};

pub const MILK_FILE: &str = "milk.csv";
pub const COWS_FILE: &str = "cows.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const BODY_FILE: &str = "body.csv";

const MILK_COLUMNS: [&str; 9] =
    ["cow_id", "date", "yield_am", "yield_pm", "fat_pct", "protein_pct", "lactose_pct", "scc", "urea"];
const COWS_COLUMNS: [&str; 5] = ["cow_id", "farm_id", "parity", "calving_date", "genetic_merit"];
const EVENTS_COLUMNS: [&str; 3] = ["cow_id", "onset_date", "end_date"];
const BODY_COLUMNS: [&str; 4] = ["cow_id", "date", "weight", "bcs"];

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("{file}: missing required column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("{file}, row {row}: {message}")]
    Row { file: String, row: u64, message: String },
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct CowRow {
    cow_id: String,
    farm_id: String,
    parity: u32,
    calving_date: NaiveDate,
    genetic_merit: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    cow_id: String,
    onset_date: NaiveDate,
    end_date: NaiveDate,
}

#[derive(Debug, Serialize, Deserialize)]
struct BodyRow {
    cow_id: String,
    date: NaiveDate,
    weight: Option<f64>,
    bcs: Option<f64>,
}

fn csv_err(file: &str) -> impl Fn(csv::Error) -> CsvError + '_ {
    move |source| CsvError::Csv { file: file.to_string(), source }
}

fn write_rows<T: Serialize>(dir: &Path, file: &str, rows: impl IntoIterator<Item = T>) -> Result<(), CsvError> {
    let path = dir.join(file);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(file))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(file))?;
    }
    w.flush().map_err(|source| CsvError::Io { path, source })
}

/// Writes the four herd files into `dir`, creating it if needed.
pub fn save_csv(herd: &Herd, dir: impl AsRef<Path>) -> Result<(), CsvError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| CsvError::Io { path: dir.to_path_buf(), source })?;

    write_rows(dir, MILK_FILE, &herd.milk)?;
    write_rows(
        dir,
        COWS_FILE,
        herd.cows.iter().map(|c| CowRow {
            cow_id: c.cow_id.clone(),
            farm_id: c.farm_id.clone(),
            parity: c.parity,
            calving_date: c.calving_date,
            genetic_merit: c.genetic_merit,
        }),
    )?;
    write_rows(
        dir,
        EVENTS_FILE,
        herd.cows.iter().flat_map(|c| {
            c.infection_events.iter().map(|e| EventRow {
                cow_id: c.cow_id.clone(),
                onset_date: e.onset,
                end_date: e.end,
            })
        }),
    )?;
    let mut body_rows = Vec::new();
    for c in &herd.cows {
        let mut by_date: BTreeMap<NaiveDate, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for (d, w) in &c.weight_series {
            by_date.entry(*d).or_default().0 = Some(*w);
        }
        for (d, b) in &c.bcs_series {
            by_date.entry(*d).or_default().1 = Some(*b);
        }
        body_rows.extend(by_date.into_iter().map(|(date, (weight, bcs))| BodyRow {
            cow_id: c.cow_id.clone(),
            date,
            weight,
            bcs,
        }));
    }
    write_rows(dir, BODY_FILE, body_rows)
}

fn read_rows<T: DeserializeOwned>(dir: &Path, file: &str, required: &[&str]) -> Result<Vec<(u64, T)>, CsvError> {
    let path = dir.join(file);
    let mut r = csv::Reader::from_path(&path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => CsvError::Io {
            path: path.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        },
        _ => CsvError::Csv { file: file.to_string(), source: e },
    })?;
    let headers = r.headers().map_err(csv_err(file))?.clone();
    for col in required {
        if !headers.iter().any(|h| h.trim() == *col) {
            return Err(CsvError::MissingColumn { file: file.to_string(), column: col.to_string() });
        }
    }
    let mut out = Vec::new();
    for record in r.deserialize::<T>() {
        match record {
            Ok(row) => out.push((out.len() as u64 + 2, row)),
            Err(e) => {
                let row = e.position().map(|p| p.line()).unwrap_or(out.len() as u64 + 2);
                return Err(CsvError::Row { file: file.to_string(), row, message: e.to_string() });
            }
        }
    }
    Ok(out)
}

/// Reads a herd from the four CSV files in `dir`, validating every row.
pub fn load_csv(dir: impl AsRef<Path>) -> Result<Herd, CsvError> {
    let dir = dir.as_ref();
    let row_err = |file: &str, row: u64, message: String| CsvError::Row { file: file.to_string(), row, message };

    let cow_rows: Vec<(u64, CowRow)> = read_rows(dir, COWS_FILE, &COWS_COLUMNS)?;
    let mut cows: Vec<CowRecord> = Vec::with_capacity(cow_rows.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    for (row, c) in cow_rows {
        if c.parity < 1 {
            return Err(row_err(COWS_FILE, row, "parity must be at least 1".into()));
        }
        if !c.genetic_merit.is_finite() {
            return Err(row_err(COWS_FILE, row, "genetic_merit must be finite".into()));
        }
        if index.insert(c.cow_id.clone(), cows.len()).is_some() {
            return Err(row_err(COWS_FILE, row, format!("duplicate cow_id `{}`", c.cow_id)));
        }
        cows.push(CowRecord {
            cow_id: c.cow_id,
            farm_id: c.farm_id,
            parity: c.parity,
            calving_date: c.calving_date,
            genetic_merit: c.genetic_merit,
            weight_series: Vec::new(),
            bcs_series: Vec::new(),
            infection_events: Vec::new(),
        });
    }
    let lookup = |file: &str, row: u64, id: &str| -> Result<usize, CsvError> {
        index.get(id).copied().ok_or_else(|| row_err(file, row, format!("unknown cow_id `{id}`")))
    };

    let milk_rows: Vec<(u64, MilkRecording)> = read_rows(dir, MILK_FILE, &MILK_COLUMNS)?;
    let mut milk = Vec::with_capacity(milk_rows.len());
    for (row, m) in milk_rows {
        lookup(MILK_FILE, row, &m.cow_id)?;
        for (name, v) in [("yield_am", m.yield_am), ("yield_pm", m.yield_pm)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(row_err(MILK_FILE, row, format!("{name} must be a non-negative number, got {v}")));
            }
        }
        for (name, v) in [("fat_pct", m.fat_pct), ("protein_pct", m.protein_pct), ("lactose_pct", m.lactose_pct)] {
            if let Some(v) = v {
                if !(0.0..=15.0).contains(&v) {
                    return Err(row_err(MILK_FILE, row, format!("{name} must be within [0, 15], got {v}")));
                }
            }
        }
        for (name, v) in [("scc", m.scc), ("urea", m.urea)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(row_err(MILK_FILE, row, format!("{name} must be non-negative, got {v}")));
                }
            }
        }
        milk.push(m);
    }

    let event_rows: Vec<(u64, EventRow)> = read_rows(dir, EVENTS_FILE, &EVENTS_COLUMNS)?;
    for (row, e) in event_rows {
        let i = lookup(EVENTS_FILE, row, &e.cow_id)?;
        if e.end_date < e.onset_date {
            return Err(row_err(EVENTS_FILE, row, "end_date precedes onset_date".into()));
        }
        cows[i].infection_events.push(InfectionEvent { onset: e.onset_date, end: e.end_date });
    }

    let body_rows: Vec<(u64, BodyRow)> = read_rows(dir, BODY_FILE, &BODY_COLUMNS)?;
    for (row, b) in body_rows {
        let i = lookup(BODY_FILE, row, &b.cow_id)?;
        if let Some(w) = b.weight {
            if !(w.is_finite() && w > 0.0) {
                return Err(row_err(BODY_FILE, row, format!("weight must be positive, got {w}")));
            }
            cows[i].weight_series.push((b.date, w));
        }
        if let Some(s) = b.bcs {
            if !(1.0..=5.0).contains(&s) {
                return Err(row_err(BODY_FILE, row, format!("bcs must be within [1, 5], got {s}")));
            }
            cows[i].bcs_series.push((b.date, s));
        }
    }
    for c in &mut cows {
        c.infection_events.sort();
        c.weight_series.sort_by_key(|p| p.0);
        c.bcs_series.sort_by_key(|p| p.0);
    }
    Ok(Herd { cows, milk })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_herd, SynthConfig};

    fn small_herd() -> Herd {
        generate_herd(&SynthConfig { n_cows: 15, n_days: 150, ..SynthConfig::default() }, 1).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let herd = small_herd();
        save_csv(&herd, dir.path()).unwrap();
        let back = load_csv(dir.path()).unwrap();
        assert_eq!(back, herd);
    }

    #[test]
    fn missing_date_column() {
        let dir = tempfile::tempdir().unwrap();
        save_csv(&small_herd(), dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MILK_FILE)).unwrap();
        let mangled = text.replacen("cow_id,date,", "cow_id,day,", 1);
        std::fs::write(dir.path().join(MILK_FILE), mangled).unwrap();
        match load_csv(dir.path()) {
            Err(CsvError::MissingColumn { file, column }) => {
                assert_eq!(file, MILK_FILE);
                assert_eq!(column, "date");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_yield_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        save_csv(&small_herd(), dir.path()).unwrap();
        let path = dir.path().join(MILK_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut cells: Vec<String> = lines[3].split(',').map(String::from).collect();
        cells[2] = "-4.0".into();
        lines[3] = cells.join(",");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = load_csv(dir.path()).unwrap_err();
        match &err {
            CsvError::Row { file, row, message } => {
                assert_eq!(file, MILK_FILE);
                assert_eq!(*row, 4);
                assert!(message.contains("yield_am"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
