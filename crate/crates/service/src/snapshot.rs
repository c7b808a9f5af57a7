use std::collections::{BTreeMap, HashMap};

use chrono::{Duration, NaiveDate};
use mastitis_core::dataset::{engineer_features, FeatureVector, Herd, HerdContext, MilkRecording};
use mastitis_core::featcat::{FeatureCatalog, SKEW_SERIES};
use serde::{Deserialize, Serialize};

/// Days of raw history returned per cow.
pub const HISTORY_DAYS: i64 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub dates: Vec<NaiveDate>,
    /// One entry per date; `None` where nothing was recorded.
    pub series: BTreeMap<String, Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CowSnapshot {
    pub vector: FeatureVector,
    pub history: History,
}

/// Latest feature vector and recent history of every cow with recordings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    pub date: Option<NaiveDate>,
    pub cows: BTreeMap<String, CowSnapshot>,
}

fn history(milk: &[MilkRecording], as_of: NaiveDate) -> History {
    let by_date: HashMap<NaiveDate, &MilkRecording> = milk.iter().map(|m| (m.date, m)).collect();
    let dates: Vec<NaiveDate> = (0..HISTORY_DAYS).rev().map(|k| as_of - Duration::days(k)).collect();
    let series = SKEW_SERIES
        .iter()
        .map(|name| {
            let values = dates.iter().map(|d| by_date.get(d).and_then(|m| m.series_value(name))).collect();
            (name.to_string(), values)
        })
        .collect();
    History { dates, series }
}

impl Snapshot {
    /// Each cow is described as of its own last recording.
    pub fn from_herd(herd: &Herd, catalog: &FeatureCatalog) -> Self {
        let ctx = HerdContext::from_herd(herd);
        let mut milk: HashMap<&str, Vec<MilkRecording>> = HashMap::new();
        for m in &herd.milk {
            milk.entry(m.cow_id.as_str()).or_default().push(m.clone());
        }
        let mut cows = BTreeMap::new();
        for cow in &herd.cows {
            let Some(records) = milk.get_mut(cow.cow_id.as_str()) else { continue };
            records.sort_by_key(|m| m.date);
            let as_of = records.last().expect("non-empty").date;
            let Ok(vector) = engineer_features(cow, records, as_of, catalog, &ctx) else { continue };
            cows.insert(cow.cow_id.clone(), CowSnapshot { vector, history: history(records, as_of) });
        }
        Snapshot { date: herd.last_date(), cows }
    }

    pub fn from_vectors(vectors: Vec<FeatureVector>) -> Self {
        let date = vectors.iter().map(|v| v.as_of).max();
        let cows = vectors
            .into_iter()
            .map(|v| {
                let history = history(&[], v.as_of);
                (v.cow_id.clone(), CowSnapshot { vector: v, history })
            })
            .collect();
        Snapshot { date, cows }
    }
}
