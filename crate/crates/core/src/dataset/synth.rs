//! Synthetic herds with a planted infection signal.
//!
//! Each cow follows a lactation curve. A latent inflammation level `u` in
//! `[0, 1]` rises during sub-clinical challenges; it lifts SCC (kept below
//! the infection threshold until infection), depresses yield and lactose,
//! and drives the daily infection hazard. Challenges are more frequent for
//! cows in low body condition and during winter housing. Once infected, SCC
//! stays above 200 until recovery, so the two-consecutive-test rule used to
//! record onsets sees the episode.

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CowRecord, DatasetError, Herd, InfectionEvent, MilkRecording, SCC_INFECTION_THRESHOLD};

/// Healthy and challenged SCC never reaches the infection threshold.
const SUBCLINICAL_SCC_CAP: f64 = 195.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cows: usize,
    pub n_farms: usize,
    pub n_days: i64,
    pub start_date: NaiveDate,
    /// Daily infection hazard at full latent inflammation.
    pub infection_rate: f64,
    /// Baseline daily probability that a sub-clinical challenge starts.
    pub challenge_rate: f64,
    /// Scales how strongly latent inflammation shows in SCC and yield.
    pub signal_strength: f64,
    pub lactation_days: i64,
    /// Days between composition/SCC tests.
    pub test_interval_days: i64,
    /// Days between weight and BCS measurements.
    pub body_interval_days: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cows: 300,
            n_farms: 7,
            n_days: 730,
            start_date: NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date"),
            infection_rate: 0.35,
            challenge_rate: 0.006,
            signal_strength: 1.0,
            lactation_days: 305,
            test_interval_days: 7,
            body_interval_days: 14,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let err = |m: String| Err(DatasetError::InvalidConfig(m));
        if self.n_cows < 1 {
            return err("n_cows must be at least 1".into());
        }
        if self.n_days < 60 {
            return err(format!("n_days must be at least 60, got {}", self.n_days));
        }
        if self.n_farms < 1 {
            return err("n_farms must be at least 1".into());
        }
        for (name, v) in [("infection_rate", self.infection_rate), ("challenge_rate", self.challenge_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must be within [0, 1], got {v}"));
            }
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return err("signal_strength must be non-negative".into());
        }
        if self.lactation_days < 30 {
            return err("lactation_days must be at least 30".into());
        }
        if self.test_interval_days < 1 || self.body_interval_days < 1 {
            return err("sampling intervals must be positive".into());
        }
        Ok(())
    }

    pub fn end_date(&self) -> NaiveDate {
        self.start_date + Duration::days(self.n_days - 1)
    }
}

#[derive(Debug, Clone, Copy)]
enum Udder {
    Healthy { refractory: i64 },
    Challenge { day: i64, ramp: i64, plateau: i64 },
    Infected { remaining: i64 },
    Resolving,
}

/// Generates a herd; identical `(config, seed)` give identical output.
pub fn generate_herd(config: &SynthConfig, seed: u64) -> Result<Herd, DatasetError> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut herd = Herd::default();
    for i in 0..config.n_cows {
        let cow_seed: u64 = master.random();
        let (cow, milk) = simulate_cow(config, i, cow_seed);
        herd.cows.push(cow);
        herd.milk.extend(milk);
    }
    Ok(herd)
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).expect("finite parameters").sample(rng)
}

/// Wood lactation curve scaled so `scale` is roughly the day-1 level.
fn wood(scale: f64, dim: i64) -> f64 {
    let t = dim.max(1) as f64;
    scale * t.powf(0.2) * (-0.003 * t).exp()
}

/// Early-lactation body condition dip, 0 at calving, peaking at 1 near day 60.
fn body_dip(dim: i64) -> f64 {
    let r = dim.max(0) as f64 / 60.0;
    r * (1.0 - r).exp()
}

fn simulate_cow(config: &SynthConfig, index: usize, seed: u64) -> (CowRecord, Vec<MilkRecording>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cow_id = format!("C{:04}", index + 1);
    let farm_id = format!("F{}", index % config.n_farms + 1);
    let parity = {
        let r: f64 = rng.random();
        let cum = [0.3, 0.55, 0.75, 0.87, 0.95, 1.0];
        cum.iter().position(|c| r < *c).unwrap_or(5) as u32 + 1
    };
    let offset = rng.random_range(-200..=(config.n_days - 90).max(-199));
    let calving_date = config.start_date + Duration::days(offset);
    let genetic_merit = normal(&mut rng, 100.0, 60.0).clamp(-400.0, 400.0);

    let p = parity.min(4) as f64;
    let base_scc = normal(&mut rng, 55f64.ln() + 0.08 * (p - 1.0), 0.25).exp();
    let base_bcs = normal(&mut rng, 3.1, 0.3);
    let base_weight = normal(&mut rng, 520.0 + 20.0 * p, 40.0);
    let yield_scale = normal(&mut rng, 14.0 + 1.5 * p, 2.0).max(6.0);
    let fat_base = normal(&mut rng, 4.1, 0.25);
    let protein_base = normal(&mut rng, 3.4, 0.15);
    let lactose_base = normal(&mut rng, 4.75, 0.08);
    let urea_base = normal(&mut rng, 26.0, 5.0);
    let test_offset = rng.random_range(0..config.test_interval_days);
    let body_offset = rng.random_range(0..config.body_interval_days);

    let s = config.signal_strength;
    let start = config.start_date;
    let end = config.end_date();

    let mut state = Udder::Healthy { refractory: 0 };
    let mut u = 0.0_f64;
    let mut milk = Vec::new();
    let mut weight_series = Vec::new();
    let mut bcs_series = Vec::new();
    let mut scc_tests: Vec<(NaiveDate, f64)> = Vec::new();

    for dim in 1..=config.lactation_days {
        let date = calving_date + Duration::days(dim);
        if date > end {
            break;
        }
        let bcs_true = (base_bcs - 0.5 * body_dip(dim)).clamp(1.0, 5.0);
        let housing = matches!(date.month(), 11 | 12 | 1 | 2);

        // latent udder dynamics
        state = match state {
            Udder::Healthy { refractory } => {
                u *= 0.7;
                let low_bcs = ((3.0 - bcs_true) / 0.5).max(0.0);
                let p_challenge = config.challenge_rate
                    * (1.0 + 1.5 * low_bcs)
                    * if housing { 1.5 } else { 1.0 }
                    * (1.0 + 0.15 * (parity as f64 - 1.0));
                if refractory <= 0 && rng.random::<f64>() < p_challenge {
                    Udder::Challenge { day: 0, ramp: rng.random_range(8..=16), plateau: rng.random_range(2..=6) }
                } else {
                    Udder::Healthy { refractory: refractory - 1 }
                }
            }
            Udder::Challenge { day, ramp, plateau } => {
                let day = day + 1;
                u = (day as f64 / ramp as f64).min(1.0);
                let hazard = config.infection_rate * u.powi(3) * (1.0 + ((2.75 - bcs_true) / 0.5).max(0.0));
                if rng.random::<f64>() < hazard.min(1.0) {
                    Udder::Infected { remaining: rng.random_range(18..=45) }
                } else if day >= ramp + plateau {
                    Udder::Resolving
                } else {
                    Udder::Challenge { day, ramp, plateau }
                }
            }
            Udder::Infected { remaining } => {
                u = 1.0;
                if remaining <= 1 {
                    Udder::Resolving
                } else {
                    Udder::Infected { remaining: remaining - 1 }
                }
            }
            Udder::Resolving => {
                u *= 0.75;
                if u < 0.05 {
                    Udder::Healthy { refractory: 21 }
                } else {
                    Udder::Resolving
                }
            }
        };
        let infected = matches!(state, Udder::Infected { .. });

        // draw every day so the random stream does not depend on the window
        let yield_noise = normal(&mut rng, 0.0, 0.04);
        let am_share = normal(&mut rng, 0.55, 0.01);
        let scc_noise = normal(&mut rng, 0.0, 0.15);
        let infected_scc = normal(&mut rng, 300f64.ln(), 0.5).exp();
        let comp = [normal(&mut rng, 0.0, 1.0), normal(&mut rng, 0.0, 1.0), normal(&mut rng, 0.0, 1.0), normal(&mut rng, 0.0, 1.0)];
        let body_noise = (normal(&mut rng, 0.0, 0.1), normal(&mut rng, 0.0, 6.0));

        if date < start {
            continue;
        }

        let depression = 0.10 * s * u + if infected { 0.12 * s } else { 0.0 };
        let daily = (wood(yield_scale, dim) * (1.0 - depression).max(0.2) * yield_noise.exp()).max(0.0);
        let yield_am = round_to(daily * am_share, 0.1);
        let yield_pm = round_to((daily - yield_am).max(0.0), 0.1);

        let test_day = (dim - test_offset).rem_euclid(config.test_interval_days) == 0;
        let mut rec = MilkRecording {
            cow_id: cow_id.clone(),
            date,
            yield_am,
            yield_pm,
            fat_pct: None,
            protein_pct: None,
            lactose_pct: None,
            scc: None,
            urea: None,
        };
        if test_day {
            let scc = if infected {
                SCC_INFECTION_THRESHOLD + 10.0 + infected_scc
            } else {
                (base_scc * (1.0 + 2.0 * s * u) * scc_noise.exp()).min(SUBCLINICAL_SCC_CAP)
            };
            let early = (-(dim as f64) / 40.0).exp();
            rec.scc = Some(scc.round());
            rec.fat_pct = Some(round_to(fat_base + 0.4 * early + 0.15 * comp[0], 0.01));
            rec.protein_pct = Some(round_to(protein_base - 0.2 * early + 0.1 * comp[1], 0.01));
            rec.lactose_pct = Some(round_to(
                lactose_base - 0.15 * s * u - if infected { 0.25 } else { 0.0 } + 0.05 * comp[2],
                0.01,
            ));
            rec.urea = Some(round_to((urea_base + 4.0 * comp[3]).max(5.0), 0.1));
            scc_tests.push((date, rec.scc.unwrap_or_default()));
        }
        milk.push(rec);

        if (dim - body_offset).rem_euclid(config.body_interval_days) == 0 {
            bcs_series.push((date, round_to((bcs_true + body_noise.0).clamp(1.0, 5.0), 0.25)));
            weight_series.push((date, round_to(base_weight - 40.0 * body_dip(dim) + body_noise.1, 1.0)));
        }
    }

    let infection_events = detect_onsets(&scc_tests);
    let cow = CowRecord {
        cow_id,
        farm_id,
        parity,
        calving_date,
        genetic_merit: round_to(genetic_merit, 0.1),
        weight_series,
        bcs_series,
        infection_events,
    };
    (cow, milk)
}

fn round_to(v: f64, step: f64) -> f64 {
    let r = (v / step).round() * step;
    // trim representation noise, e.g. 3.0000000000000004
    (r * 1e6).round() / 1e6
}

/// Onset = first of two consecutive tests above the threshold; the episode
/// ends the day before the next test back at or below it (or at the last
/// test if it never recovers).
fn detect_onsets(tests: &[(NaiveDate, f64)]) -> Vec<InfectionEvent> {
    let mut events = Vec::new();
    let mut i = 0;
    while i + 1 < tests.len() {
        if tests[i].1 > SCC_INFECTION_THRESHOLD && tests[i + 1].1 > SCC_INFECTION_THRESHOLD {
            let onset = tests[i].0;
            let mut j = i + 1;
            while j < tests.len() && tests[j].1 > SCC_INFECTION_THRESHOLD {
                j += 1;
            }
            let end = if j < tests.len() { tests[j].0 - Duration::days(1) } else { tests[j - 1].0 };
            events.push(InfectionEvent { onset, end });
            i = j;
        } else {
            i += 1;
        }
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_cows: 20, n_days: 120, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate_herd(&small(), 1).unwrap();
        let b = generate_herd(&small(), 1).unwrap();
        assert_eq!(a, b);
        let c = generate_herd(&small(), 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_rate_means_no_infections() {
        let cfg = SynthConfig { infection_rate: 0.0, n_cows: 60, ..SynthConfig::default() };
        let herd = generate_herd(&cfg, 3).unwrap();
        assert!(herd.cows.iter().all(|c| c.infection_events.is_empty()));
        assert!(herd.milk.iter().filter_map(|m| m.scc).all(|s| s <= SCC_INFECTION_THRESHOLD));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { n_cows: 0, ..SynthConfig::default() },
            SynthConfig { n_days: 10, ..SynthConfig::default() },
            SynthConfig { infection_rate: 1.5, ..SynthConfig::default() },
        ] {
            assert!(matches!(generate_herd(&cfg, 1), Err(DatasetError::InvalidConfig(_))));
        }
    }

    #[test]
    fn records_are_well_formed() {
        let herd = generate_herd(&small(), 5).unwrap();
        let end = small().end_date();
        for m in &herd.milk {
            assert!(m.yield_am >= 0.0 && m.yield_pm >= 0.0);
            assert!(m.date >= small().start_date && m.date <= end);
            for p in [m.fat_pct, m.protein_pct, m.lactose_pct].into_iter().flatten() {
                assert!((0.0..=15.0).contains(&p));
            }
        }
        for c in &herd.cows {
            assert!(c.infection_events.windows(2).all(|w| w[0].onset < w[1].onset));
            assert!(c.bcs_series.iter().all(|(_, b)| (1.0..=5.0).contains(b)));
        }
    }

    #[test]
    fn onset_rule() {
        let d = |k: i64| NaiveDate::from_ymd_opt(2018, 1, 1).unwrap() + Duration::days(7 * k);
        let tests = vec![(d(0), 80.0), (d(1), 250.0), (d(2), 90.0), (d(3), 300.0), (d(4), 260.0), (d(5), 100.0)];
        let ev = detect_onsets(&tests);
        assert_eq!(ev, vec![InfectionEvent { onset: d(3), end: d(5) - Duration::days(1) }]);
    }
}
