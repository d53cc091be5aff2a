//! Scenario inputs: electricity-price and arrival series, their CSV
//! schemas, and seeded synthetic generators.
//!
//! Price CSV: header `timestamp,price_cny_per_kwh`, one row per source
//! interval (hourly by default), expanded to slot resolution by repetition.
//! The timestamp column is carried but not interpreted.
//!
//! Arrival CSV: header with an `arrivals` column (non-negative integer),
//! optionally `slot` (slot index; row order otherwise) and `type` (user-type
//! name or index). With a `type` column the series carries per-type counts.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, ScenarioConfig, Station, UserType};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    /// CNY/kWh per slot.
    pub prices: Vec<f64>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSeries {
    pub counts: Vec<u32>,
    /// `per_type[slot][type]`, summing to `counts[slot]` when present.
    pub per_type: Option<Vec<Vec<u32>>>,
}

impl ArrivalSeries {
    pub fn zeros(len: usize) -> Self {
        Self {
            counts: vec![0; len],
            per_type: None,
        }
    }
}

/// Everything needed to replay one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBundle {
    pub config: ScenarioConfig,
    pub prices: PriceSeries,
    pub arrivals: ArrivalSeries,
    pub seed: u64,
}

impl ScenarioBundle {
    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        Ok(serde_json::from_str(s)?)
    }
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn column(headers: &csv::StringRecord, name: &'static str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

pub fn load_price_csv(path: &Path, slots_per_row: usize) -> Result<PriceSeries, DataError> {
    let mut series = read_price_csv(open(path)?, slots_per_row)?;
    series.source = path.display().to_string();
    Ok(series)
}

/// Parses the price schema from any reader; each row is repeated
/// `slots_per_row` times.
pub fn read_price_csv<R: Read>(reader: R, slots_per_row: usize) -> Result<PriceSeries, DataError> {
    if slots_per_row == 0 {
        return Err(DataError::Invalid("slots_per_row must be >= 1".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    column(&headers, "timestamp").ok_or(DataError::MissingColumn("timestamp"))?;
    let price_col = column(&headers, "price_cny_per_kwh").ok_or(DataError::MissingColumn("price_cny_per_kwh"))?;
    let mut prices = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let raw = record.get(price_col).ok_or_else(|| DataError::Malformed {
            line,
            message: "missing price field".into(),
        })?;
        let price: f64 = raw.parse().map_err(|_| DataError::Malformed {
            line,
            message: format!("price {raw:?} is not a number"),
        })?;
        if !price.is_finite() || price < 0.0 {
            return Err(DataError::Malformed {
                line,
                message: format!("price {price} must be finite and >= 0"),
            });
        }
        prices.extend(std::iter::repeat(price).take(slots_per_row));
    }
    Ok(PriceSeries {
        prices,
        source: "csv".into(),
    })
}

/// Writes one row per slot; reload with `slots_per_row = 1`.
pub fn write_price_csv<W: Write>(series: &PriceSeries, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "price_cny_per_kwh"])?;
    for (t, p) in series.prices.iter().enumerate() {
        w.write_record([t.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn load_arrivals_csv(path: &Path, user_types: &[UserType]) -> Result<ArrivalSeries, DataError> {
    read_arrivals_csv(open(path)?, user_types)
}

pub fn read_arrivals_csv<R: Read>(reader: R, user_types: &[UserType]) -> Result<ArrivalSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let count_col = column(&headers, "arrivals").ok_or(DataError::MissingColumn("arrivals"))?;
    let slot_col = column(&headers, "slot");
    let type_col = column(&headers, "type");

    let mut counts: Vec<u32> = Vec::new();
    let mut per_type: Vec<Vec<u32>> = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let line = line_of(&record);
        let field = |col: usize, what: &str| {
            record.get(col).ok_or_else(|| DataError::Malformed {
                line,
                message: format!("missing {what} field"),
            })
        };
        let raw = field(count_col, "arrivals")?;
        let count: u32 = raw.parse().map_err(|_| DataError::Malformed {
            line,
            message: format!("arrival count {raw:?} is not a non-negative integer"),
        })?;
        let slot = match slot_col {
            Some(c) => {
                let raw = field(c, "slot")?;
                raw.parse::<usize>().map_err(|_| DataError::Malformed {
                    line,
                    message: format!("slot {raw:?} is not a non-negative integer"),
                })?
            }
            None => row,
        };
        if counts.len() <= slot {
            counts.resize(slot + 1, 0);
            per_type.resize(slot + 1, vec![0; user_types.len()]);
        }
        counts[slot] += count;
        if let Some(c) = type_col {
            let raw = field(c, "type")?;
            let k = user_types
                .iter()
                .position(|t| t.name == raw)
                .or_else(|| raw.parse::<usize>().ok().filter(|k| *k < user_types.len()))
                .ok_or_else(|| DataError::Malformed {
                    line,
                    message: format!("unknown user type {raw:?}"),
                })?;
            per_type[slot][k] += count;
        }
    }
    Ok(ArrivalSeries {
        counts,
        per_type: type_col.map(|_| per_type),
    })
}

/// Multiplies every price by `factor` (> 0).
pub fn scale_prices(series: &PriceSeries, factor: f64) -> Result<PriceSeries, DataError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(DataError::Invalid(format!("price factor must be positive, got {factor}")));
    }
    Ok(PriceSeries {
        prices: series.prices.iter().map(|p| p * factor).collect(),
        source: format!("{} x{factor}", series.source),
    })
}

/// Parameters of the synthetic price and arrival generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Daily mean electricity price, CNY/kWh.
    pub base_price: f64,
    pub price_amplitude: f64,
    /// Hour of day at which the sinusoid peaks.
    pub price_peak_hour: f64,
    /// Standard deviation of the per-hour price noise.
    pub price_noise: f64,
    /// Multiplier applied to the generated prices.
    pub price_factor: f64,
    /// Mean arrivals per slot over a day.
    pub mean_arrival_rate: f64,
    /// Relative height of the morning and evening arrival peaks.
    pub peak_strength: f64,
    pub morning_peak_hour: f64,
    pub evening_peak_hour: f64,
    pub peak_width_hours: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base_price: 0.65,
            price_amplitude: 0.25,
            price_peak_hour: 15.0,
            price_noise: 0.04,
            price_factor: 1.0,
            mean_arrival_rate: 0.6,
            peak_strength: 1.5,
            morning_peak_hour: 8.5,
            evening_peak_hour: 18.0,
            peak_width_hours: 1.5,
        }
    }
}

impl SynthConfig {
    fn hour_of(&self, config: &ScenarioConfig, slot: usize) -> f64 {
        (slot as f64 * config.slot_minutes / 60.0) % 24.0
    }

    fn shape(&self, hour: f64) -> f64 {
        let bump = |centre: f64| {
            // circular distance on the 24 h clock
            let d = (hour - centre).abs();
            let d = d.min(24.0 - d);
            (-0.5 * (d / self.peak_width_hours).powi(2)).exp()
        };
        1.0 + self.peak_strength * (bump(self.morning_peak_hour) + bump(self.evening_peak_hour))
    }

    /// Poisson intensity (arrivals per slot) at `slot`; averages to
    /// `mean_arrival_rate` over each whole day.
    pub fn arrival_rate(&self, config: &ScenarioConfig, slot: usize) -> f64 {
        let per_day = (24.0 * 60.0 / config.slot_minutes).round().max(1.0) as usize;
        let mean_shape =
            (0..per_day).map(|s| self.shape(self.hour_of(config, s))).sum::<f64>() / per_day as f64;
        self.mean_arrival_rate * self.shape(self.hour_of(config, slot)) / mean_shape
    }

    /// Noise-free price curve at `slot`.
    pub fn price_curve(&self, config: &ScenarioConfig, slot: usize) -> f64 {
        let hour = self.hour_of(config, slot);
        let phase = 2.0 * std::f64::consts::PI * (hour - self.price_peak_hour) / 24.0;
        self.base_price + self.price_amplitude * phase.cos()
    }
}

/// Seeded synthetic scenario over `config.horizon_slots` slots.
///
/// Prices follow a daily sinusoid plus one Gaussian noise draw per hour,
/// clipped at zero. Arrivals are an inhomogeneous Poisson process with
/// morning and evening peaks.
pub fn synthesize(config: &ScenarioConfig, synth: &SynthConfig, seed: u64) -> ScenarioBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.horizon_slots;
    let per_hour = config.slots_per_hour();
    let hours = n.div_ceil(per_hour);
    let noise: Vec<f64> = if synth.price_noise > 0.0 {
        let normal = Normal::new(0.0, synth.price_noise).expect("positive std");
        (0..hours).map(|_| rng.sample(normal)).collect()
    } else {
        vec![0.0; hours]
    };
    let prices = (0..n)
        .map(|t| ((synth.price_curve(config, t) + noise[t / per_hour]) * synth.price_factor).max(0.0))
        .collect();
    let counts = (0..n)
        .map(|t| {
            let rate = synth.arrival_rate(config, t);
            if rate <= 0.0 {
                0
            } else {
                rng.sample(Poisson::new(rate).expect("positive rate")) as u32
            }
        })
        .collect();
    ScenarioBundle {
        config: config.clone(),
        prices: PriceSeries {
            prices,
            source: format!("synthetic seed={seed}"),
        },
        arrivals: ArrivalSeries {
            counts,
            per_type: None,
        },
        seed,
    }
}

/// Mixes a run seed and an episode index into one well-spread seed.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    let mut z = seed ^ (episode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Where episodes come from: one replayed bundle, or a fresh synthetic day
/// per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioSource {
    Fixed(ScenarioBundle),
    Synthetic { config: ScenarioConfig, synth: SynthConfig },
}

impl ScenarioSource {
    pub fn scenario(&self) -> &ScenarioConfig {
        match self {
            Self::Fixed(b) => &b.config,
            Self::Synthetic { config, .. } => config,
        }
    }

    /// Bundle for `episode` of a run seeded with `seed`.
    pub fn bundle(&self, seed: u64, episode: usize) -> ScenarioBundle {
        match self {
            Self::Fixed(b) => b.clone(),
            Self::Synthetic { config, synth } => synthesize(config, synth, episode_seed(seed, episode)),
        }
    }

    /// A station for `episode` plus the seed to reset it with.
    pub fn station(&self, seed: u64, episode: usize) -> Result<(Station, u64), EnvError> {
        let bundle = self.bundle(seed, episode);
        Ok((Station::from_bundle(&bundle)?, episode_seed(seed ^ 0x5EED, episode)))
    }
}
