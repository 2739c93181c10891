//! End-to-end run: load, split, estimate, forecast, backtest, export.
//!
//! Configuration files are flat `key = value` lines. Blank lines and lines
//! starting with `#` are ignored; keys are the long CLI flag names without
//! the leading dashes (`tau = 0.05`, `model = spline`). Command-line flags
//! are applied after the file and win.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backtest::{backtest, BacktestOptions, BacktestReport, DEFAULT_BOOTSTRAP, DEFAULT_DQ_LAGS};
use crate::carm::{forecast_path, ModelSpec, ParamVector};
use crate::data::{load_returns, summary_stats, InputMode, LoadConfig, ReturnSeries, SummaryStats};
use crate::error::{Error, Result};
use crate::nic::{
    linspace, nic_band, NicBandRow, NicSpec, SplineBasis, ThresholdVariable, DEFAULT_SPLINE_DEGREE,
    DEFAULT_SPLINE_INTERVALS,
};
use crate::risk::{calibrate_nu, extract_var, CalibrationPoint, RiskSeries, SearchMode};
use crate::sampler::{derive_seed, run_chains, AcceptanceRates, ParamSummary, PosteriorDraws, PriorSpec, SamplerConfig};
use crate::sep::Measure;

pub const MIN_IN_SAMPLE: usize = 500;

pub const FORECAST_COLUMNS: [&str; 6] = ["t", "date", "return", "var", "es", "hit"];
pub const NIC_COLUMNS: [&str; 4] = ["y", "mean", "hpd_low", "hpd_high"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sav,
    As,
    Threshold,
    Ig,
    Spline,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "sav" => ModelKind::Sav,
            "as" => ModelKind::As,
            "threshold" | "tcav" => ModelKind::Threshold,
            "ig" | "indirect-garch" => ModelKind::Ig,
            "spline" | "bnl" => ModelKind::Spline,
            other => return Err(Error::Config(format!("unknown model `{other}`"))),
        })
    }
}

/// Where the in-sample period ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSpec {
    /// Number of in-sample returns.
    Index(usize),
    /// First out-of-sample date.
    Date(String),
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s.parse::<usize>() {
            Ok(n) => SplitSpec::Index(n),
            Err(_) => SplitSpec::Date(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub load: LoadConfig,
    pub split: Option<SplitSpec>,
    pub model: ModelKind,
    pub alpha: u32,
    pub tau: f64,
    pub threshold: f64,
    pub knots: usize,
    pub degree: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
    /// Chain length per candidate during expectile-level calibration.
    pub calib_iterations: usize,
    pub calib_burn_in: usize,
    /// 0 for warm-started bisection, otherwise concurrent cold-start chains.
    pub calib_threads: usize,
    /// Refit on the expanding window every this many forecast days.
    pub refit_every: Option<usize>,
    pub dq_lags: usize,
    pub bootstrap: usize,
    pub nic_points: usize,
    pub hpd_mass: f64,
    pub out: PathBuf,
    pub prior: PriorSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            load: LoadConfig::default(),
            split: None,
            model: ModelKind::Sav,
            alpha: 1,
            tau: 0.05,
            threshold: 0.0,
            knots: DEFAULT_SPLINE_INTERVALS,
            degree: DEFAULT_SPLINE_DEGREE,
            iterations: 50_000,
            burn_in: 20_000,
            thin: 10,
            seed: 1,
            chains: 1,
            calib_iterations: 10_000,
            calib_burn_in: 5_000,
            calib_threads: 0,
            refit_every: None,
            dq_lags: DEFAULT_DQ_LAGS,
            bootstrap: DEFAULT_BOOTSTRAP,
            nic_points: 200,
            hpd_mass: 0.95,
            out: PathBuf::from("carm-out"),
            prior: PriorSpec::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Set one option by its key name.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "input" => self.input = Some(PathBuf::from(v)),
            "mode" => {
                self.load.mode = match v {
                    "price" => InputMode::Price,
                    "return" => InputMode::Return,
                    _ => return Err(Error::Config(format!("mode must be `price` or `return`, got `{v}`"))),
                }
            }
            "date-column" => self.load.date_column = v.to_string(),
            "date-format" => self.load.date_format = v.to_string(),
            "value-column" => self.load.value_column = Some(v.to_string()),
            "exogenous-column" => self.load.exogenous_column = Some(v.to_string()),
            "split" => self.split = Some(v.parse()?),
            "model" => self.model = v.parse()?,
            "alpha" => self.alpha = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "knots" => self.knots = parse(key, v)?,
            "degree" => self.degree = parse(key, v)?,
            "iters" => self.iterations = parse(key, v)?,
            "burnin" => self.burn_in = parse(key, v)?,
            "thin" => self.thin = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "chains" => self.chains = parse(key, v)?,
            "calib-iters" => self.calib_iterations = parse(key, v)?,
            "calib-burnin" => self.calib_burn_in = parse(key, v)?,
            "calib-threads" => self.calib_threads = parse(key, v)?,
            "refit-every" => {
                let n: usize = parse(key, v)?;
                self.refit_every = (n > 0).then_some(n);
            }
            "dq-lags" => self.dq_lags = parse(key, v)?,
            "bootstrap" => self.bootstrap = parse(key, v)?,
            "nic-points" => self.nic_points = parse(key, v)?,
            "hpd-mass" => self.hpd_mass = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "prior-omega-var" => self.prior.omega_var = parse(key, v)?,
            "prior-gamma-var" => self.prior.gamma_var = parse(key, v)?,
            "prior-beta-var" => self.prior.beta_var = parse(key, v)?,
            "prior-sigma-shape" => self.prior.sigma_shape = parse(key, v)?,
            "prior-sigma-scale" => self.prior.sigma_scale = parse(key, v)?,
            "prior-phi-shape" => self.prior.phi_shape = parse(key, v)?,
            "prior-phi-scale" => self.prior.phi_scale = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines.
    pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn from_kv_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in Self::parse_kv(&std::fs::read_to_string(path)?)? {
            cfg.apply(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn measure(&self) -> Result<Measure> {
        Measure::from_alpha(self.alpha)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
            ..SamplerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.measure()?;
        if !(self.tau > 0.0 && self.tau < 0.5) {
            return Err(Error::Config(format!("tau must lie in (0, 0.5), got {}", self.tau)));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        if !(self.hpd_mass > 0.0 && self.hpd_mass < 1.0) {
            return Err(Error::Config("hpd-mass must lie in (0,1)".into()));
        }
        self.sampler().validate()?;
        if self.alpha == 2 && self.calib_iterations <= self.calib_burn_in {
            return Err(Error::Config("calib-iters must exceed calib-burnin".into()));
        }
        self.prior.validate()
    }

    /// Model specification with the spline range fitted to the in-sample data.
    pub fn model_spec(&self, y_in: &ReturnSeries) -> Result<ModelSpec> {
        let nic = match self.model {
            ModelKind::Sav => NicSpec::Sav,
            ModelKind::As => NicSpec::AsymmetricSlope,
            ModelKind::Threshold => NicSpec::Threshold {
                threshold: self.threshold,
                variable: if y_in.exogenous.is_some() {
                    ThresholdVariable::Exogenous
                } else {
                    ThresholdVariable::Own
                },
            },
            ModelKind::Ig => NicSpec::IndirectGarch,
            ModelKind::Spline => NicSpec::Spline(SplineBasis::from_data(&y_in.values, self.degree, self.knots)?),
        };
        ModelSpec::new(nic, self.measure()?, self.tau)
    }
}

/// Split point as an in-sample length, checked against the size limits.
pub fn split_index(series: &ReturnSeries, split: &SplitSpec, date_format: &str) -> Result<usize> {
    let n = match split {
        SplitSpec::Index(n) => *n,
        SplitSpec::Date(d) => series.index_of_date(d, date_format)?,
    };
    if n < MIN_IN_SAMPLE {
        return Err(Error::Config(format!("in-sample period has {n} observations, need at least {MIN_IN_SAMPLE}")));
    }
    if n >= series.len() {
        return Err(Error::Config(format!(
            "split at {n} leaves no out-of-sample observations (series has {})",
            series.len()
        )));
    }
    Ok(n)
}

/// Posterior fit on the in-sample period.
#[derive(Debug, Clone)]
pub struct Fit {
    pub spec: ModelSpec,
    pub draws: PosteriorDraws,
    pub mean_params: ParamVector,
    pub calibration: Option<Vec<CalibrationPoint>>,
}

/// Estimate the model; the expectile level is calibrated first for `α = 2`.
pub fn estimate(config: &RunConfig, y_in: &ReturnSeries) -> Result<Fit> {
    let base = config.model_spec(y_in)?;
    let sampler = config.sampler();
    let (spec, calibration) = match base.measure {
        Measure::Quantile => (base, None),
        Measure::Expectile => {
            let mut short = sampler.clone();
            short.iterations = config.calib_iterations;
            short.burn_in = config.calib_burn_in;
            let mode = if config.calib_threads == 0 {
                SearchMode::WarmStart
            } else {
                SearchMode::ParallelColdStart {
                    threads: config.calib_threads,
                }
            };
            let cal = calibrate_nu(&base, &config.prior, &short, y_in, config.tau, mode).map_err(|e| e.at_stage("calibrate"))?;
            (base.with_tau(cal.nu)?, Some(cal.trace))
        }
    };
    let draws = run_chains(&spec, &config.prior, &sampler, y_in, config.chains)?;
    let mean_params = draws.mean_params();
    Ok(Fit {
        spec,
        draws,
        mean_params,
        calibration,
    })
}

/// One-step-ahead levels over `y_out`; with `refit_every`, parameters are
/// re-estimated on the expanding window before each block.
pub fn forecast(config: &RunConfig, fit: &Fit, y_in: &ReturnSeries, y_out: &ReturnSeries) -> Result<Vec<f64>> {
    let Some(every) = config.refit_every else {
        return forecast_path(&fit.spec, &fit.mean_params, y_in, y_out);
    };
    let full = y_in.concat(y_out)?;
    let n = y_in.len();
    let mut g = Vec::with_capacity(y_out.len());
    let mut params = fit.mean_params.clone();
    let mut start = 0;
    let mut block = 0u64;
    while start < y_out.len() {
        let end = (start + every).min(y_out.len());
        let (window, rest) = full.split_at(n + start)?;
        if start > 0 {
            block += 1;
            let mut cfg = config.sampler();
            cfg.seed = derive_seed(config.seed, 1_000 + block);
            params = run_chains(&fit.spec, &config.prior, &cfg, &window, config.chains)?.mean_params();
        }
        let (chunk, _) = rest.split_at(end - start)?;
        g.extend(forecast_path(&fit.spec, &params, &window, &chunk)?);
        start = end;
    }
    Ok(g)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub model: String,
    pub alpha: u32,
    pub tau: f64,
    pub nu: Option<f64>,
    pub n_in_sample: usize,
    pub n_out_of_sample: usize,
    pub summary_in_sample: SummaryStats,
    pub summary_out_of_sample: Option<SummaryStats>,
    pub posterior: Vec<ParamSummary>,
    pub acceptance: AcceptanceRates,
    pub backtest: BacktestReport,
}

#[derive(Debug, Clone, Serialize)]
struct Diagnostics<'a> {
    acceptance: AcceptanceRates,
    step_schedule: &'a [(usize, f64)],
    draws: usize,
    chains: usize,
    calibration: Option<&'a [CalibrationPoint]>,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a RunConfig,
    artifacts: BTreeMap<&'static str, Vec<String>>,
}

/// Paths and results of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub report: RunReport,
    pub risk: RiskSeries,
    pub nic: Vec<NicBandRow>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        e => e.at_stage(name),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_forecast_csv<W: Write>(w: W, y_out: &ReturnSeries, risk: &RiskSeries) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(FORECAST_COLUMNS)?;
    for (i, (&y, &v)) in y_out.values.iter().zip(&risk.var).enumerate() {
        let es = risk.es.as_ref().map(|e| e[i].to_string()).unwrap_or_default();
        wtr.write_record([
            (i + 1).to_string(),
            y_out.date(i).unwrap_or("").to_string(),
            y.to_string(),
            v.to_string(),
            es,
            u8::from(y < -v).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_nic_csv<W: Write>(w: W, rows: &[NicBandRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(NIC_COLUMNS)?;
    for r in rows {
        wtr.write_record([r.y.to_string(), r.mean.to_string(), r.hpd_low.to_string(), r.hpd_high.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Run every stage on an already loaded series and write the artifacts.
pub fn run_on_series(config: &RunConfig, series: &ReturnSeries) -> Result<RunOutput> {
    stage("config", config.validate())?;
    let split = config
        .split
        .as_ref()
        .ok_or_else(|| Error::Config("a split index or date is required".into()));
    let n_in = stage("split", split.and_then(|s| split_index(series, s, &config.load.date_format)))?;
    let (y_in, y_out) = stage("split", series.split_at(n_in))?;
    let summary_in = stage("summary", summary_stats(&y_in.values))?;
    let summary_out = summary_stats(&y_out.values).ok();

    let fit = stage("estimate", estimate(config, &y_in))?;
    let g_out = stage("forecast", forecast(config, &fit, &y_in, &y_out))?;

    let mean_in = crate::stats::mean(&y_in.values);
    let risk = stage(
        "risk",
        extract_var(&fit.spec, &g_out, config.tau).and_then(|r| match fit.spec.measure {
            Measure::Expectile => r.with_es(mean_in),
            Measure::Quantile => Ok(r),
        }),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
    let opts = BacktestOptions {
        dq_lags: config.dq_lags,
        bootstrap: config.bootstrap,
    };
    let report_bt = stage("backtest", backtest(&y_out.values, &risk, &opts, &mut rng))?;

    let (lo, hi) = match fit.spec.nic.spline() {
        Some(b) => b.range(),
        None => (summary_in.min, summary_in.max),
    };
    let grid = linspace(lo, hi, config.nic_points.max(2));
    let nic = stage("nic", nic_band(&fit.spec.nic, &fit.draws.betas(), &grid, config.hpd_mass))?;

    let report = RunReport {
        model: fit.spec.nic.name().to_string(),
        alpha: config.alpha,
        tau: config.tau,
        nu: risk.nu,
        n_in_sample: y_in.len(),
        n_out_of_sample: y_out.len(),
        summary_in_sample: summary_in,
        summary_out_of_sample: summary_out,
        posterior: fit.draws.summary(),
        acceptance: fit.draws.acceptance,
        backtest: report_bt,
    };

    stage("export", export(config, &fit, &y_out, &risk, &nic, &report))?;
    Ok(RunOutput {
        out_dir: config.out.clone(),
        report,
        risk,
        nic,
    })
}

fn export(config: &RunConfig, fit: &Fit, y_out: &ReturnSeries, risk: &RiskSeries, nic: &[NicBandRow], report: &RunReport) -> Result<()> {
    let dir = &config.out;
    std::fs::create_dir_all(dir)?;
    fit.draws.write_csv(create(&dir.join("draws.csv"))?)?;
    write_forecast_csv(create(&dir.join("forecast.csv"))?, y_out, risk)?;
    write_nic_csv(create(&dir.join("nic.csv"))?, nic)?;
    write_json(&dir.join("report.json"), report)?;
    write_json(
        &dir.join("diagnostics.json"),
        &Diagnostics {
            acceptance: fit.draws.acceptance,
            step_schedule: &fit.draws.step_schedule,
            draws: fit.draws.len(),
            chains: config.chains,
            calibration: fit.calibration.as_deref(),
        },
    )?;
    let mut draw_cols = vec!["draw".to_string()];
    draw_cols.extend(fit.draws.names.iter().cloned());
    draw_cols.push("log_post".into());
    let mut artifacts = BTreeMap::new();
    artifacts.insert("draws.csv", draw_cols);
    artifacts.insert("forecast.csv", FORECAST_COLUMNS.iter().map(|s| s.to_string()).collect());
    artifacts.insert("nic.csv", NIC_COLUMNS.iter().map(|s| s.to_string()).collect());
    artifacts.insert("report.json", vec![]);
    artifacts.insert("diagnostics.json", vec![]);
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config,
            artifacts,
        },
    )
}

/// Load the configured input and run the pipeline.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutput> {
    let input = config
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("no input file given".into()).at_stage("load"))?;
    let series = stage("load", load_returns(input, &config.load))?;
    run_on_series(config, &series)
}

/// Run several inputs concurrently. Series `k` uses seed
/// `derive_seed(config.seed, k)` and writes to `out/<file stem>`.
pub fn run_batch(config: &RunConfig, inputs: &[PathBuf]) -> Vec<Result<RunOutput>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(k, path)| {
                let mut cfg = config.clone();
                cfg.input = Some(path.clone());
                cfg.seed = derive_seed(config.seed, k as u64);
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("series{k}"));
                cfg.out = config.out.join(stem);
                s.spawn(move || run_pipeline(&cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("batch thread panicked")).collect()
    })
}
