//! Return series, CSV ingestion and descriptive statistics.

use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{chi2_sf, mean, quantile_sorted, sample_std};

/// Ordered observations with optional date labels and an optional exogenous
/// threshold variable aligned with the returns.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub values: Vec<f64>,
    pub dates: Option<Vec<String>>,
    pub exogenous: Option<Vec<f64>>,
}

impl ReturnSeries {
    pub fn new(values: Vec<f64>) -> Self {
        ReturnSeries {
            values,
            dates: None,
            exogenous: None,
        }
    }

    pub fn with_dates(mut self, dates: Vec<String>) -> Result<Self> {
        if dates.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                left: self.values.len(),
                right: dates.len(),
            });
        }
        self.dates = Some(dates);
        Ok(self)
    }

    pub fn with_exogenous(mut self, z: Vec<f64>) -> Result<Self> {
        if z.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                left: self.values.len(),
                right: z.len(),
            });
        }
        self.exogenous = Some(z);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn date(&self, i: usize) -> Option<&str> {
        self.dates.as_ref().map(|d| d[i].as_str())
    }

    pub fn split_at(&self, n: usize) -> Result<(ReturnSeries, ReturnSeries)> {
        if n > self.len() {
            return Err(Error::invalid(format!("split index {n} beyond series length {}", self.len())));
        }
        let cut = |v: &Option<Vec<String>>| v.as_ref().map(|d| (d[..n].to_vec(), d[n..].to_vec()));
        let (d0, d1) = cut(&self.dates).map_or((None, None), |(a, b)| (Some(a), Some(b)));
        let (z0, z1) = self
            .exogenous
            .as_ref()
            .map_or((None, None), |z| (Some(z[..n].to_vec()), Some(z[n..].to_vec())));
        Ok((
            ReturnSeries {
                values: self.values[..n].to_vec(),
                dates: d0,
                exogenous: z0,
            },
            ReturnSeries {
                values: self.values[n..].to_vec(),
                dates: d1,
                exogenous: z1,
            },
        ))
    }

    pub fn concat(&self, other: &ReturnSeries) -> Result<ReturnSeries> {
        let join_f = |a: &Option<Vec<f64>>, b: &Option<Vec<f64>>| -> Result<Option<Vec<f64>>> {
            match (a, b) {
                (Some(a), Some(b)) => Ok(Some([a.as_slice(), b.as_slice()].concat())),
                (None, None) => Ok(None),
                _ => Err(Error::invalid("cannot concatenate series with and without exogenous data")),
            }
        };
        let dates = match (&self.dates, &other.dates) {
            (Some(a), Some(b)) => Some([a.as_slice(), b.as_slice()].concat()),
            _ => None,
        };
        Ok(ReturnSeries {
            values: [self.values.as_slice(), other.values.as_slice()].concat(),
            dates,
            exogenous: join_f(&self.exogenous, &other.exogenous)?,
        })
    }

    /// Index of the first observation dated on or after `date`.
    pub fn index_of_date(&self, date: &str, format: &str) -> Result<usize> {
        let dates = self
            .dates
            .as_ref()
            .ok_or_else(|| Error::Config("series has no dates; split by index instead".into()))?;
        let target = parse_date(date, format).ok_or_else(|| Error::Config(format!("cannot parse split date `{date}`")))?;
        for (i, d) in dates.iter().enumerate() {
            if let Some(dt) = parse_date(d, format) {
                if dt >= target {
                    return Ok(i);
                }
            }
        }
        Ok(dates.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Column holds prices; returns are `100·(log P_t - log P_{t-1})`.
    Price,
    /// Column already holds returns.
    Return,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadConfig {
    pub mode: InputMode,
    /// Date column name; when absent from the header the series has no dates.
    pub date_column: String,
    pub date_format: String,
    /// Value column; defaults to the first non-date column.
    pub value_column: Option<String>,
    pub exogenous_column: Option<String>,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            mode: InputMode::Price,
            date_column: "date".into(),
            date_format: "%Y-%m-%d".into(),
            value_column: None,
            exogenous_column: None,
        }
    }
}

fn parse_date(s: &str, format: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, format)
        .ok()
        .or_else(|| NaiveDate::parse_from_str(s, format).ok().map(|d| d.and_hms_opt(0, 0, 0).unwrap()))
}

fn parse_value(raw: &str, row: usize, what: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() {
        return Err(Error::Parse {
            row,
            msg: format!("missing {what}"),
        });
    }
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        row,
        msg: format!("cannot parse {what} `{s}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            msg: format!("non-finite {what}"),
        });
    }
    Ok(v)
}

/// Read a CSV file with a header row. Data rows are numbered from 1 in errors.
pub fn load_returns(path: impl AsRef<Path>, config: &LoadConfig) -> Result<ReturnSeries> {
    let file = std::fs::File::open(path.as_ref())?;
    read_returns(file, config)
}

pub fn read_returns<R: std::io::Read>(reader: R, config: &LoadConfig) -> Result<ReturnSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let date_idx = find(&config.date_column);
    let value_idx = match &config.value_column {
        Some(name) => find(name).ok_or_else(|| Error::Config(format!("no column named `{name}`")))?,
        None => (0..headers.len())
            .find(|&i| Some(i) != date_idx)
            .ok_or_else(|| Error::Config("no value column in header".into()))?,
    };
    let exog_idx = match &config.exogenous_column {
        Some(name) => Some(find(name).ok_or_else(|| Error::Config(format!("no column named `{name}`")))?),
        None => None,
    };

    let what = match config.mode {
        InputMode::Price => "price",
        InputMode::Return => "return",
    };
    let mut values = Vec::new();
    let mut dates = Vec::new();
    let mut exog = Vec::new();
    let mut last_date: Option<NaiveDateTime> = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let v = parse_value(rec.get(value_idx).unwrap_or(""), row, what)?;
        if config.mode == InputMode::Price && v <= 0.0 {
            return Err(Error::Parse {
                row,
                msg: format!("non-positive price {v}"),
            });
        }
        if let Some(di) = date_idx {
            let raw = rec.get(di).unwrap_or("").trim().to_string();
            let dt = parse_date(&raw, &config.date_format).ok_or_else(|| Error::Parse {
                row,
                msg: format!("cannot parse date `{raw}` with format `{}`", config.date_format),
            })?;
            if let Some(prev) = last_date {
                if dt <= prev {
                    return Err(Error::NonMonotoneDates { row });
                }
            }
            last_date = Some(dt);
            dates.push(raw);
        }
        if let Some(zi) = exog_idx {
            exog.push(parse_value(rec.get(zi).unwrap_or(""), row, "exogenous value")?);
        }
        values.push(v);
    }

    let (values, dates, exog) = match config.mode {
        InputMode::Return => (values, dates, exog),
        InputMode::Price => {
            let r: Vec<f64> = values.windows(2).map(|w| (w[1].ln() - w[0].ln()) * 100.0).collect();
            let d = if dates.is_empty() { dates } else { dates[1..].to_vec() };
            let z = if exog.is_empty() { exog } else { exog[1..].to_vec() };
            (r, d, z)
        }
    };
    let mut series = ReturnSeries::new(values);
    if date_idx.is_some() {
        series = series.with_dates(dates)?;
    }
    if exog_idx.is_some() {
        series = series.with_exogenous(exog)?;
    }
    Ok(series)
}

/// Descriptive statistics of a return series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub q3: f64,
    pub skewness: f64,
    /// Raw (non-excess) moment kurtosis.
    pub kurtosis: f64,
    pub jarque_bera: f64,
    pub jb_p_value: f64,
    /// Zero dispersion; moment statistics are reported as zero and the
    /// normality p-value as 1.
    pub degenerate: bool,
}

pub fn summary_stats(y: &[f64]) -> Result<SummaryStats> {
    let n = y.len();
    if n < 8 {
        return Err(Error::InsufficientData(format!("summary statistics need at least 8 observations, got {n}")));
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = mean(y);
    let nf = n as f64;
    let m2 = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf;
    let m3 = y.iter().map(|v| (v - m).powi(3)).sum::<f64>() / nf;
    let m4 = y.iter().map(|v| (v - m).powi(4)).sum::<f64>() / nf;
    let degenerate = m2 <= 0.0;
    let (skewness, kurtosis, jb, p) = if degenerate {
        (0.0, 0.0, 0.0, 1.0)
    } else {
        let s = m3 / m2.powf(1.5);
        let k = m4 / (m2 * m2);
        let jb = nf / 6.0 * (s * s + 0.25 * (k - 3.0).powi(2));
        (s, k, jb, chi2_sf(jb, 2.0))
    };
    Ok(SummaryStats {
        n,
        mean: m,
        median: quantile_sorted(&sorted, 0.5),
        std: sample_std(y),
        min: sorted[0],
        max: sorted[n - 1],
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
        skewness,
        kurtosis,
        jarque_bera: jb,
        jb_p_value: p,
        degenerate,
    })
}
