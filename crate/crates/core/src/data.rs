//! Observed survival data: validation, log-time handling and CSV ingestion.
//!
//! Every [`Dataset`] stores the observed outcome on the log-time scale. Raw
//! times are transformed once, at the CSV boundary.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Candidate instruments.
    pub z: Vec<f64>,
    /// Exposure level.
    pub d: f64,
    /// Observed log-time `min(T, C)`.
    pub y: f64,
    /// `true` when the failure was observed (`T <= C`).
    pub delta: bool,
}

impl Observation {
    pub fn new(z: Vec<f64>, d: f64, y: f64, delta: bool) -> Self {
        Self { z, d, y, delta }
    }

    fn check(&self, row: usize, p: usize) -> Result<()> {
        if self.z.len() != p {
            return Err(Error::Value {
                row,
                message: format!("expected {p} instruments, found {}", self.z.len()),
            });
        }
        if !self.y.is_finite() || !self.d.is_finite() || self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value {
                row,
                message: "non-finite value".into(),
            });
        }
        Ok(())
    }
}

/// An immutable, validated sample of observations sharing one instrument dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
    p: usize,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        if observations.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 observations, got {}",
                observations.len()
            )));
        }
        let p = observations[0].z.len();
        if p == 0 {
            return Err(Error::InvalidDataset("no instruments".into()));
        }
        for (i, obs) in observations.iter().enumerate() {
            obs.check(i + 1, p)?;
        }
        if !observations.iter().any(|o| o.delta) {
            return Err(Error::InvalidDataset("no observed failures (all delta = 0)".into()));
        }
        Ok(Self { observations, p })
    }

    /// Build from column vectors. `z` is row-major: one `Vec` per observation.
    pub fn from_columns(y: &[f64], delta: &[bool], d: &[f64], z: Vec<Vec<f64>>) -> Result<Self> {
        let n = y.len();
        if delta.len() != n || d.len() != n || z.len() != n {
            return Err(Error::InvalidDataset("column lengths differ".into()));
        }
        let obs = z
            .into_iter()
            .enumerate()
            .map(|(i, zi)| Observation::new(zi, d[i], y[i], delta[i]))
            .collect();
        Self::new(obs)
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn get(&self, i: usize) -> &Observation {
        &self.observations[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Observation> {
        self.observations.iter()
    }

    /// Sub-sample by row indices, preserving the given order.
    ///
    /// Unlike [`Dataset::new`] this does not require an observed failure in the
    /// subset, since a cross-fitting fold may legitimately contain none.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidDataset("empty subset".into()));
        }
        Ok(Self {
            observations: rows.iter().map(|&i| self.observations[i].clone()).collect(),
            p: self.p,
        })
    }

    pub fn censoring_rate(&self) -> f64 {
        let censored = self.observations.iter().filter(|o| !o.delta).count();
        censored as f64 / self.n() as f64
    }

    pub fn instrument_column(&self, j: usize) -> Vec<f64> {
        self.observations.iter().map(|o| o.z[j]).collect()
    }

    pub fn exposure(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.d).collect()
    }

    pub fn outcome(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.y).collect()
    }

    pub fn with_outcome(&self, y: &[f64]) -> Result<Self> {
        let obs = self
            .observations
            .iter()
            .zip(y)
            .map(|(o, &yi)| Observation { y: yi, ..o.clone() })
            .collect();
        Self::new(obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeScale {
    /// Times on their natural scale; the log is taken on ingestion.
    Raw,
    /// Times already log-transformed.
    #[default]
    Log,
}

impl std::str::FromStr for TimeScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(TimeScale::Raw),
            "log" => Ok(TimeScale::Log),
            other => Err(Error::domain(format!("unknown time scale `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnConfig {
    pub time: String,
    pub status: String,
    pub exposure: String,
    pub instruments: Vec<String>,
    #[serde(default)]
    pub time_scale: TimeScale,
}

impl ColumnConfig {
    /// Column names used by [`write_csv`] when exporting simulated data.
    pub fn default_for(p: usize) -> Self {
        Self {
            time: "time".into(),
            status: "status".into(),
            exposure: "exposure".into(),
            instruments: (1..=p).map(|j| format!("z{j}")).collect(),
            time_scale: TimeScale::Log,
        }
    }
}

/// Result of reading a CSV: the dataset plus the 1-based data rows that were
/// dropped because a required field was missing.
#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub dataset: Dataset,
    pub rejected_rows: Vec<usize>,
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan")
}

fn parse_field(field: &str, row: usize, column: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Value {
        row,
        message: format!("column `{column}`: cannot parse `{field}` as a number"),
    })
}

pub fn load_csv(path: impl AsRef<Path>, config: &ColumnConfig) -> Result<Dataset> {
    Ok(read_csv(path, config)?.dataset)
}

pub fn read_csv(path: impl AsRef<Path>, config: &ColumnConfig) -> Result<CsvLoad> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv_from(file, config)
}

pub fn read_csv_from<R: std::io::Read>(reader: R, config: &ColumnConfig) -> Result<CsvLoad> {
    if config.instruments.is_empty() {
        return Err(Error::domain("at least one instrument column is required"));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let col = |name: &str| -> Result<usize> {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let time_col = col(&config.time)?;
    let status_col = col(&config.status)?;
    let exposure_col = col(&config.exposure)?;
    let z_cols = config
        .instruments
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    let mut rejected = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let required = std::iter::once(time_col)
            .chain([status_col, exposure_col])
            .chain(z_cols.iter().copied());
        if required.clone().any(|c| is_missing(field(c))) {
            rejected.push(row);
            continue;
        }
        let t = parse_field(field(time_col), row, &config.time)?;
        let y = match config.time_scale {
            TimeScale::Log => t,
            TimeScale::Raw => {
                if t <= 0.0 {
                    return Err(Error::Value {
                        row,
                        message: format!("nonpositive raw time {t}"),
                    });
                }
                t.ln()
            }
        };
        let status = parse_field(field(status_col), row, &config.status)?;
        let delta = if status == 1.0 {
            true
        } else if status == 0.0 {
            false
        } else {
            return Err(Error::Value {
                row,
                message: format!("event indicator must be 0 or 1, found {status}"),
            });
        };
        let d = parse_field(field(exposure_col), row, &config.exposure)?;
        let z = z_cols
            .iter()
            .zip(&config.instruments)
            .map(|(&c, name)| parse_field(field(c), row, name))
            .collect::<Result<Vec<_>>>()?;
        let obs = Observation::new(z, d, y, delta);
        obs.check(row, config.instruments.len())?;
        observations.push(obs);
    }
    Ok(CsvLoad {
        dataset: Dataset::new(observations)?,
        rejected_rows: rejected,
    })
}

/// Write a dataset using `config`'s column names. Floats use Rust's shortest
/// round-trip formatting, so [`load_csv`] on a log-scale export reproduces the
/// numeric payload exactly.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>, config: &ColumnConfig) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(dataset, file, config)
}

pub fn write_csv_to<W: std::io::Write>(dataset: &Dataset, writer: W, config: &ColumnConfig) -> Result<()> {
    if config.instruments.len() != dataset.p() {
        return Err(Error::domain(format!(
            "config names {} instruments but dataset has {}",
            config.instruments.len(),
            dataset.p()
        )));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![config.time.clone(), config.status.clone(), config.exposure.clone()];
    header.extend(config.instruments.iter().cloned());
    wtr.write_record(&header)?;
    for obs in dataset.iter() {
        let t = match config.time_scale {
            TimeScale::Log => obs.y,
            TimeScale::Raw => obs.y.exp(),
        };
        let mut rec = vec![
            format!("{t:?}"),
            if obs.delta { "1".into() } else { "0".into() },
            format!("{:?}", obs.d),
        ];
        rec.extend(obs.z.iter().map(|v| format!("{v:?}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    CensoringRate { rate: f64 },
    ConstantColumn { column: String },
    DuplicateEventTimes { tied_events: usize },
    InstrumentCorrelation { first: usize, second: usize, correlation: f64 },
}

/// Pairwise instrument correlations above this magnitude are reported.
pub const CORRELATION_WARNING: f64 = 0.2;

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Advisory data report. Instrument pairs are 1-based.
pub fn validate(dataset: &Dataset) -> Vec<Finding> {
    let mut findings = vec![Finding::CensoringRate {
        rate: dataset.censoring_rate(),
    }];

    let mut columns: Vec<(String, Vec<f64>)> = vec![
        ("y".into(), dataset.outcome()),
        ("d".into(), dataset.exposure()),
    ];
    for j in 0..dataset.p() {
        columns.push((format!("z{}", j + 1), dataset.instrument_column(j)));
    }
    let stats: Vec<(f64, f64)> = columns.iter().map(|(_, v)| mean_sd(v)).collect();
    for ((name, _), &(_, sd)) in columns.iter().zip(&stats) {
        if sd == 0.0 {
            findings.push(Finding::ConstantColumn { column: name.clone() });
        }
    }

    let mut events: Vec<f64> = dataset.iter().filter(|o| o.delta).map(|o| o.y).collect();
    events.sort_by(|a, b| a.total_cmp(b));
    let tied = events.windows(2).filter(|w| w[0] == w[1]).count();
    if tied > 0 {
        findings.push(Finding::DuplicateEventTimes { tied_events: tied });
    }

    let p = dataset.p();
    let n = dataset.n() as f64;
    for a in 0..p {
        for b in (a + 1)..p {
            let (ma, sa) = stats[a + 2];
            let (mb, sb) = stats[b + 2];
            if sa == 0.0 || sb == 0.0 {
                continue;
            }
            let cov = columns[a + 2]
                .1
                .iter()
                .zip(&columns[b + 2].1)
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / n;
            let r = cov / (sa * sb);
            if r.abs() > CORRELATION_WARNING {
                findings.push(Finding::InstrumentCorrelation {
                    first: a + 1,
                    second: b + 1,
                    correlation: r,
                });
            }
        }
    }
    findings
}
