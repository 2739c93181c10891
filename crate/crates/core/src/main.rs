use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use carm::data::{load_returns, summary_stats};
use carm::pipeline::{run_batch, run_pipeline, RunConfig, RunOutput};

/// Bayesian CAViaR/CARE estimation, forecasting and backtesting.
#[derive(Debug, Parser)]
#[command(name = "carm", version)]
struct Cli {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV file with a header row.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Run each of these inputs concurrently, writing to `<out>/<file stem>`.
    #[arg(long, num_args = 1.., conflicts_with = "input")]
    batch: Vec<PathBuf>,
    /// `price` (log-differenced ×100) or `return`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    date_column: Option<String>,
    /// chrono format string for the date column.
    #[arg(long)]
    date_format: Option<String>,
    #[arg(long)]
    value_column: Option<String>,
    /// Exogenous threshold variable for the threshold model.
    #[arg(long)]
    exogenous_column: Option<String>,
    /// In-sample length or first out-of-sample date.
    #[arg(long)]
    split: Option<String>,
    /// sav, as, threshold, ig or spline.
    #[arg(long)]
    model: Option<String>,
    /// 1 for quantiles (CAViaR), 2 for expectiles (CARE).
    #[arg(long)]
    alpha: Option<u32>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    /// Number of equal knot intervals of the spline.
    #[arg(long)]
    knots: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    dq_lags: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    calib_iters: Option<usize>,
    #[arg(long)]
    calib_burnin: Option<usize>,
    /// 0 for warm-started bisection, otherwise parallel cold starts.
    #[arg(long)]
    calib_threads: Option<usize>,
    /// Re-estimate on the expanding window every N forecast days (0 = never).
    #[arg(long)]
    refit_every: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print summary statistics of the input returns as JSON and exit.
    #[arg(long)]
    summary_only: bool,
}

impl Cli {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut kv = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k, v));
            }
        };
        let s = |v: &Option<String>| v.clone();
        let n = |v: Option<usize>| v.map(|x| x.to_string());
        push("input", self.input.as_ref().map(|p| p.display().to_string()));
        push("mode", s(&self.mode));
        push("date-column", s(&self.date_column));
        push("date-format", s(&self.date_format));
        push("value-column", s(&self.value_column));
        push("exogenous-column", s(&self.exogenous_column));
        push("split", s(&self.split));
        push("model", s(&self.model));
        push("alpha", self.alpha.map(|x| x.to_string()));
        push("tau", self.tau.map(|x| x.to_string()));
        push("threshold", self.threshold.map(|x| x.to_string()));
        push("iters", n(self.iters));
        push("burnin", n(self.burnin));
        push("thin", n(self.thin));
        push("seed", self.seed.map(|x| x.to_string()));
        push("chains", n(self.chains));
        push("knots", n(self.knots));
        push("degree", n(self.degree));
        push("dq-lags", n(self.dq_lags));
        push("bootstrap", n(self.bootstrap));
        push("calib-iters", n(self.calib_iters));
        push("calib-burnin", n(self.calib_burnin));
        push("calib-threads", n(self.calib_threads));
        push("refit-every", n(self.refit_every));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        kv
    }
}

fn print_result(out: &RunOutput) {
    let bt = &out.report.backtest;
    println!(
        "{}: {} forecasts, {} violations, A/E {:.4}, LR_uc p {:.4}, LR_cc p {:.4}, zone {:?}",
        out.out_dir.display(),
        bt.m,
        bt.violations,
        bt.actual_over_expected,
        bt.lr_uc.p_value,
        bt.lr_cc.p_value,
        bt.zone
    );
}

fn run(cli: &Cli) -> carm::Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_kv_file(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in cli.overrides() {
        cfg.apply(k, &v)?;
    }
    if cli.summary_only {
        let input = cfg
            .input
            .as_ref()
            .ok_or_else(|| carm::Error::Config("no input file given".into()))?;
        let y = load_returns(input, &cfg.load)?;
        println!("{}", serde_json::to_string_pretty(&summary_stats(&y.values)?)?);
        return Ok(true);
    }
    if cli.batch.is_empty() {
        print_result(&run_pipeline(&cfg)?);
        return Ok(true);
    }
    let mut ok = true;
    for (path, r) in cli.batch.iter().zip(run_batch(&cfg, &cli.batch)) {
        match r {
            Ok(out) => print_result(&out),
            Err(e) => {
                ok = false;
                eprintln!("{}: {e}", path.display());
            }
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
