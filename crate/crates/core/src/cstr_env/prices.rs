use std::f64::consts::PI;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hourly electricity prices, one value per control step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub prices: Vec<f64>,
}

impl PriceSeries {
    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Prices `[start, start + n)`, padded with the last available value past the end.
    pub fn window(&self, start: usize, n: usize) -> Vec<f64> {
        let last = *self.prices.last().unwrap_or(&0.0);
        (start..start + n)
            .map(|i| self.prices.get(i).copied().unwrap_or(last))
            .collect()
    }

    pub fn slice(&self, start: usize, end: usize) -> PriceSeries {
        PriceSeries {
            timestamps: self.timestamps[start..end].to_vec(),
            prices: self.prices[start..end].to_vec(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.prices.iter().sum::<f64>() / self.prices.len().max(1) as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.prices.iter().map(|p| (p - m).powi(2)).sum::<f64>() / self.prices.len().max(1) as f64)
            .sqrt()
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Parses `timestamp,price` rows (an optional header line is skipped). Rows
/// must be strictly hourly; gaps, duplicates and out-of-order rows are
/// reported with their timestamps.
pub fn parse_prices(text: &str) -> Result<PriceSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut timestamps = Vec::new();
    let mut prices = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::Prices(format!("line {}: expected timestamp,price", line + 1)));
        }
        let Some(ts) = parse_timestamp(&record[0]) else {
            if line == 0 {
                continue; // header
            }
            return Err(Error::Prices(format!(
                "line {}: bad timestamp `{}`",
                line + 1,
                &record[0]
            )));
        };
        let price: f64 = record[1].parse().map_err(|_| {
            Error::Prices(format!("line {}: bad price `{}`", line + 1, &record[1]))
        })?;
        if !price.is_finite() {
            return Err(Error::Prices(format!("line {}: non-finite price", line + 1)));
        }
        timestamps.push(ts);
        prices.push(price);
    }
    if prices.is_empty() {
        return Err(Error::Prices("no rows".into()));
    }
    let mut offending = Vec::new();
    for w in timestamps.windows(2) {
        if w[1] - w[0] != Duration::hours(1) {
            offending.push(format!("{} -> {}", w[0], w[1]));
        }
    }
    if !offending.is_empty() {
        return Err(Error::Prices(format!(
            "rows are not consecutive hours: {}",
            offending.join(", ")
        )));
    }
    Ok(PriceSeries { timestamps, prices })
}

pub fn load_prices(path: &Path) -> Result<PriceSeries> {
    parse_prices(&std::fs::read_to_string(path)?)
}

/// Shape of the synthetic price generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthPriceConfig {
    pub base: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub noise_std: f64,
    /// Noise is clipped to ±`noise_clip`·`noise_std`.
    pub noise_clip: f64,
}

impl Default for SynthPriceConfig {
    fn default() -> Self {
        Self {
            base: 35.0,
            daily_amplitude: 12.0,
            weekly_amplitude: 5.0,
            noise_std: 4.0,
            noise_clip: 2.5,
        }
    }
}

/// Daily plus weekly sinusoids with clipped Gaussian noise, floored at zero.
/// Hourly timestamps start at 2018-03-26T00:00.
pub fn synth_prices(n_hours: usize, cfg: &SynthPriceConfig, rng: &mut impl Rng) -> PriceSeries {
    let start = NaiveDate::from_ymd_opt(2018, 3, 26)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("std > 0");
    let daily_phase = rng.random_range(0.0..2.0 * PI);
    let weekly_phase = rng.random_range(0.0..2.0 * PI);
    let clip = cfg.noise_clip * cfg.noise_std;
    let mut timestamps = Vec::with_capacity(n_hours);
    let mut prices = Vec::with_capacity(n_hours);
    for h in 0..n_hours {
        let t = h as f64;
        let eps: f64 = noise.sample(rng);
        let p = cfg.base
            + cfg.daily_amplitude * (2.0 * PI * t / 24.0 + daily_phase).sin()
            + cfg.weekly_amplitude * (2.0 * PI * t / 168.0 + weekly_phase).sin()
            + eps.clamp(-clip, clip);
        timestamps.push(start + Duration::hours(h as i64));
        prices.push(p.max(0.0));
    }
    PriceSeries { timestamps, prices }
}
