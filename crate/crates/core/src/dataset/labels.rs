use chrono::{Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{cow_vectors, group_milk};
use super::{CowRecord, DatasetError, FeatureVector, Herd, HerdContext, MAX_HORIZON_DAYS};
use crate::featcat::FeatureCatalog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    /// Positive class: onset of sub-clinical mastitis within the horizon.
    Sick,
    Healthy,
}

impl Label {
    pub fn is_sick(self) -> bool {
        self == Label::Sick
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub x: FeatureVector,
    pub label: Label,
    pub horizon_days: u8,
}

/// Label of `cow` on `day` at the given horizon, or `None` when the day is
/// excluded (active infection or its post-infection window).
pub fn label_for(cow: &CowRecord, day: NaiveDate, horizon_days: u8) -> Option<Label> {
    if cow.in_exclusion_window(day) {
        return None;
    }
    let until = day + Duration::days(horizon_days as i64);
    let sick = cow.infection_events.iter().any(|e| e.onset > day && e.onset <= until);
    Some(if sick { Label::Sick } else { Label::Healthy })
}

/// One labelled instance per cow-day with enough history. Days whose
/// horizon window runs past the cow's last recording are dropped, since an
/// onset there would be unobserved.
pub fn label_instances(
    herd: &Herd,
    horizon_days: u8,
    catalog: &FeatureCatalog,
) -> Result<Vec<LabeledInstance>, DatasetError> {
    if horizon_days == 0 || horizon_days > MAX_HORIZON_DAYS {
        return Err(DatasetError::InvalidHorizon(horizon_days));
    }
    if herd.cows.is_empty() || herd.milk.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let ctx = HerdContext::from_herd(herd);
    let groups = group_milk(herd);
    let per_cow: Vec<Vec<LabeledInstance>> = herd
        .cows
        .par_iter()
        .zip(groups.par_iter())
        .map(|(cow, milk)| {
            let Some(last) = milk.last().map(|m| m.date) else {
                return Vec::new();
            };
            cow_vectors(cow, milk, catalog, &ctx)
                .into_iter()
                .filter(|x| x.as_of + Duration::days(horizon_days as i64) <= last)
                .filter_map(|x| {
                    label_for(cow, x.as_of, horizon_days).map(|label| LabeledInstance { x, label, horizon_days })
                })
                .collect()
        })
        .collect();
    Ok(per_cow.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::super::{InfectionEvent, MilkRecording};
    use super::*;
    use crate::featcat::default_catalog;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn cow(events: Vec<InfectionEvent>) -> CowRecord {
        CowRecord {
            cow_id: "c".into(),
            farm_id: "f".into(),
            parity: 1,
            calving_date: d("2018-01-01"),
            genetic_merit: 0.0,
            weight_series: vec![],
            bcs_series: vec![],
            infection_events: events,
        }
    }

    #[test]
    fn window_membership() {
        let day = d("2018-03-01");
        let c = cow(vec![InfectionEvent { onset: d("2018-03-04"), end: d("2018-03-20") }]);
        assert_eq!(label_for(&c, day, 7), Some(Label::Sick));
        assert_eq!(label_for(&c, day, 3), Some(Label::Sick));
        assert_eq!(label_for(&c, day, 2), Some(Label::Healthy));
        // active episode and the week after it are excluded
        assert_eq!(label_for(&c, d("2018-03-04"), 7), None);
        assert_eq!(label_for(&c, d("2018-03-27"), 7), None);
        assert_eq!(label_for(&c, d("2018-03-28"), 7), Some(Label::Healthy));
    }

    #[test]
    fn labels_are_monotone_in_horizon() {
        let c = cow(vec![InfectionEvent { onset: d("2018-03-10"), end: d("2018-03-20") }]);
        for offset in 0..20 {
            let day = d("2018-02-25") + Duration::days(offset);
            for h in 1..7u8 {
                if label_for(&c, day, h) == Some(Label::Sick) {
                    assert_eq!(label_for(&c, day, h + 1), Some(Label::Sick));
                }
            }
        }
    }

    fn flat_milk(start: NaiveDate, days: i64) -> Vec<MilkRecording> {
        (0..days)
            .map(|i| MilkRecording {
                cow_id: "c".into(),
                date: start + Duration::days(i),
                yield_am: 10.0,
                yield_pm: 9.0,
                fat_pct: Some(4.0),
                protein_pct: Some(3.3),
                lactose_pct: Some(4.7),
                scc: Some(70.0),
                urea: Some(25.0),
            })
            .collect()
    }

    #[test]
    fn no_infections_all_healthy() {
        let herd = Herd { cows: vec![cow(vec![])], milk: flat_milk(d("2018-01-02"), 60) };
        let inst = label_instances(&herd, 7, &default_catalog()).unwrap();
        assert_eq!(inst.len(), 60 - 7);
        assert!(inst.iter().all(|i| i.label == Label::Healthy));
    }

    #[test]
    fn errors() {
        let herd = Herd::default();
        assert_eq!(label_instances(&herd, 7, &default_catalog()), Err(DatasetError::EmptyInput));
        let herd = Herd { cows: vec![cow(vec![])], milk: flat_milk(d("2018-01-02"), 10) };
        assert_eq!(label_instances(&herd, 0, &default_catalog()), Err(DatasetError::InvalidHorizon(0)));
        assert_eq!(label_instances(&herd, 8, &default_catalog()), Err(DatasetError::InvalidHorizon(8)));
    }
}
