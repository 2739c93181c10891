//! Adaptive independent Metropolis-within-Gibbs sampler for `(ω, γ, β, σ, φ²)`.
//!
//! Each of the β, ω, γ and log σ blocks is updated with an independence
//! proposal whose mean and (co)variance track the chain with a diminishing
//! step `ς_i = 1/(C√i)`. The spline smoothing variance φ² has a conjugate
//! inverse-gamma full conditional.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::carm::{ModelSpec, ParamVector, PathEvaluator, Recursion};
use crate::data::ReturnSeries;
use crate::error::{Error, Result};
use crate::nic::{second_difference_ss, PenaltyMatrix};
use crate::stats::{self, inv_gamma_log_pdf, normal_log_pdf};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const COV_JITTER: f64 = 1e-8;
const VAR_FLOOR: f64 = 1e-300;

/// Hyperparameters of the prior hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub omega_var: f64,
    pub gamma_var: f64,
    /// Variance of the independent normal prior on parametric NIC coefficients.
    pub beta_var: f64,
    pub sigma_shape: f64,
    pub sigma_scale: f64,
    pub phi_shape: f64,
    pub phi_scale: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            omega_var: 100.0,
            gamma_var: 100.0,
            beta_var: 100.0,
            sigma_shape: 0.001,
            sigma_scale: 0.001,
            phi_shape: 0.001,
            phi_scale: 0.001,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.omega_var,
            self.gamma_var,
            self.beta_var,
            self.sigma_shape,
            self.sigma_scale,
            self.phi_shape,
            self.phi_scale,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("prior hyperparameters must be positive and finite"))
        }
    }
}

/// Means and (co)variances of the independence proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalState {
    pub beta_mean: Vec<f64>,
    /// Row-major `n×n` covariance of the β proposal.
    pub beta_cov: Vec<f64>,
    pub omega: (f64, f64),
    pub gamma: (f64, f64),
    /// Proposal for `log σ`.
    pub log_sigma: (f64, f64),
    /// Number of adaptation steps applied so far.
    pub step: usize,
    pub tuning: f64,
}

impl ProposalState {
    pub fn initial(n_beta: usize, sample_std: f64, beta_var: f64, scalar_var: f64, tuning: f64) -> Self {
        let mut cov = vec![0.0; n_beta * n_beta];
        for i in 0..n_beta {
            cov[i * n_beta + i] = beta_var;
        }
        let s = if sample_std > 0.0 { sample_std } else { 1.0 };
        ProposalState {
            beta_mean: vec![0.0; n_beta],
            beta_cov: cov,
            omega: (0.0, scalar_var),
            gamma: (0.0, scalar_var),
            log_sigma: ((s / 2.0).ln(), scalar_var),
            step: 0,
            tuning,
        }
    }

    pub fn beta_cov_matrix(&self) -> DMatrix<f64> {
        let n = self.beta_mean.len();
        DMatrix::from_row_slice(n, n, &self.beta_cov)
    }
}

/// Adaptation step size `ς_i = 1/(C·√i)`.
pub fn adaptation_step(i: usize, tuning: f64) -> f64 {
    1.0 / (tuning * (i as f64).sqrt())
}

/// Norms describing one adaptation step, for checking diminishing adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptRecord {
    pub iteration: usize,
    pub step: f64,
    /// `‖Σ_new − Σ_old‖_F` over the block-diagonal proposal covariance.
    pub delta_norm: f64,
    pub outer_norm: f64,
    pub prev_norm: f64,
    pub jittered: bool,
}

/// Blocks held at fixed values instead of being sampled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixedBlocks {
    pub omega: Option<f64>,
    pub gamma: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub fixed: FixedBlocks,
    /// Drop the likelihood and sample the prior.
    pub prior_only: bool,
    /// Starting parameters; derived from the data when absent.
    pub init: Option<ParamVector>,
    /// Starting proposal state; diffuse defaults when absent.
    pub proposal: Option<ProposalState>,
    pub initial_beta_var: f64,
    pub initial_scalar_var: f64,
    pub tuning: f64,
    pub trace_adaptation: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 50_000,
            burn_in: 20_000,
            thin: 10,
            seed: 0,
            fixed: FixedBlocks::default(),
            prior_only: false,
            init: None,
            proposal: None,
            initial_beta_var: 0.1,
            initial_scalar_var: 0.1,
            tuning: 10.0,
            trace_adaptation: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Config(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if !(self.tuning > 0.0 && self.initial_beta_var > 0.0 && self.initial_scalar_var > 0.0) {
            return Err(Error::Config("proposal scales and tuning constant must be positive".into()));
        }
        Ok(())
    }
}

/// Acceptance flags of one retained draw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BlockFlags {
    pub beta: bool,
    pub omega: bool,
    pub gamma: bool,
    pub sigma: bool,
}

/// Acceptance rate per block over all iterations; `None` for fixed blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AcceptanceRates {
    pub beta: Option<f64>,
    pub omega: Option<f64>,
    pub gamma: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PosteriorDraws {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    /// One row per retained draw, columns in the order of `names`.
    pub draws: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    pub accepted: Vec<BlockFlags>,
    pub acceptance: AcceptanceRates,
    /// `(iteration, ς)` at powers of ten and at the last iteration.
    pub step_schedule: Vec<(usize, f64)>,
    pub final_proposal: ProposalState,
    pub adaptation_trace: Option<Vec<AdaptRecord>>,
    pub initial_level: f64,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.draws.iter().map(|r| r[j]).collect())
    }

    pub fn param(&self, i: usize) -> ParamVector {
        unflatten(&self.spec, &self.draws[i])
    }

    pub fn betas(&self) -> Vec<Vec<f64>> {
        let n = self.spec.nic.n_coef();
        self.draws.iter().map(|r| r[2..2 + n].to_vec()).collect()
    }

    /// Posterior mean of every parameter.
    pub fn mean_params(&self) -> ParamVector {
        let k = self.names.len();
        let mut m = vec![0.0; k];
        for row in &self.draws {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = self.draws.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        unflatten(&self.spec, &m)
    }

    pub fn summary(&self) -> Vec<ParamSummary> {
        self.names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let mut col: Vec<f64> = self.draws.iter().map(|r| r[j]).collect();
                col.sort_by(f64::total_cmp);
                ParamSummary {
                    name: name.clone(),
                    mean: stats::mean(&col),
                    sd: stats::sample_std(&col),
                    q025: stats::quantile_sorted(&col, 0.025),
                    q975: stats::quantile_sorted(&col, 0.975),
                }
            })
            .collect()
    }

    /// Pool chains of the same model. Acceptance rates are averaged.
    pub fn merge(chains: Vec<PosteriorDraws>) -> Result<PosteriorDraws> {
        let mut it = chains.into_iter();
        let mut out = it.next().ok_or_else(|| Error::invalid("no chains to merge"))?;
        let mut count = 1.0;
        let mut rates = [out.acceptance.beta, out.acceptance.omega, out.acceptance.gamma, out.acceptance.sigma];
        for c in it {
            if c.names != out.names {
                return Err(Error::invalid("cannot merge chains of different models"));
            }
            out.draws.extend(c.draws);
            out.log_post.extend(c.log_post);
            out.accepted.extend(c.accepted);
            let other = [c.acceptance.beta, c.acceptance.omega, c.acceptance.gamma, c.acceptance.sigma];
            for (r, o) in rates.iter_mut().zip(other) {
                *r = r.zip(o).map(|(a, b)| a + b);
            }
            count += 1.0;
        }
        let avg = |r: Option<f64>| r.map(|v| v / count);
        out.acceptance = AcceptanceRates {
            beta: avg(rates[0]),
            omega: avg(rates[1]),
            gamma: avg(rates[2]),
            sigma: avg(rates[3]),
        };
        Ok(out)
    }

    /// Draws as CSV: one column per parameter plus `log_post`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["draw".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("log_post".into());
        wtr.write_record(&header)?;
        for (i, (row, lp)) in self.draws.iter().zip(&self.log_post).enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(lp.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn unflatten(spec: &ModelSpec, v: &[f64]) -> ParamVector {
    let n = spec.nic.n_coef();
    ParamVector {
        omega: v[0],
        gamma: v[1],
        beta: v[2..2 + n].to_vec(),
        sigma: v[2 + n],
        phi2: if spec.is_spline() { Some(v[3 + n]) } else { None },
    }
}

/// Log prior density of a parameter vector under `prior`.
pub fn log_prior(spec: &ModelSpec, prior: &PriorSpec, p: &ParamVector) -> f64 {
    let mut lp = normal_log_pdf(p.omega, 0.0, prior.omega_var)
        + normal_log_pdf(p.gamma, 0.0, prior.gamma_var)
        + inv_gamma_log_pdf(p.sigma, prior.sigma_shape, prior.sigma_scale);
    match (spec.is_spline(), p.phi2) {
        (true, Some(phi2)) if phi2 > 0.0 => {
            let rank = (p.beta.len() - 2) as f64;
            lp += -second_difference_ss(&p.beta) / (2.0 * phi2) - 0.5 * rank * phi2.ln()
                + inv_gamma_log_pdf(phi2, prior.phi_shape, prior.phi_scale);
        }
        (true, _) => return f64::NEG_INFINITY,
        (false, _) => {
            lp += p.beta.iter().map(|b| normal_log_pdf(*b, 0.0, prior.beta_var)).sum::<f64>();
        }
    }
    lp
}

/// Unnormalized log posterior; `-∞` outside the support or for explosive paths.
pub fn log_posterior(spec: &ModelSpec, prior: &PriorSpec, params: &ParamVector, y: &ReturnSeries) -> Result<f64> {
    params.check(spec)?;
    let ev = PathEvaluator::new(spec, y)?;
    let mut g = Vec::new();
    let ll = match ev.path_into(params.omega, params.gamma, &params.beta, &mut g) {
        Ok(()) => ev.log_likelihood_from_sums(ev.residual_sums(&g), params.sigma),
        Err(Error::NonFinite { .. }) => f64::NEG_INFINITY,
        Err(e) => return Err(e),
    };
    Ok(ll + log_prior(spec, prior, params))
}

/// Independence-sampler acceptance probability.
pub fn mh_accept_prob(log_post_new: f64, log_post_old: f64, log_q_at_old: f64, log_q_at_new: f64) -> f64 {
    if log_post_new == f64::NEG_INFINITY || log_post_new.is_nan() {
        return 0.0;
    }
    let r = log_post_new - log_post_old + log_q_at_old - log_q_at_new;
    if r >= 0.0 {
        1.0
    } else {
        r.exp()
    }
}

/// `(shape, scale)` of the inverse-gamma full conditional of φ².
pub fn phi2_conditional(beta: &[f64], k: &PenaltyMatrix, prior: &PriorSpec) -> Result<(f64, f64)> {
    let q = k.quadform(beta)?;
    Ok((prior.phi_shape + 0.5 * k.rank() as f64, prior.phi_scale + 0.5 * q))
}

pub fn gibbs_update_phi2<R: Rng + ?Sized>(beta: &[f64], k: &PenaltyMatrix, prior: &PriorSpec, rng: &mut R) -> Result<f64> {
    let (shape, scale) = phi2_conditional(beta, k, prior)?;
    Ok(draw_inv_gamma(shape, scale, rng))
}

pub(crate) fn draw_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("positive gamma parameters");
    1.0 / g.sample(rng)
}

/// Current values of the adapted blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptTarget<'a> {
    pub beta: &'a [f64],
    pub omega: f64,
    pub gamma: f64,
    pub log_sigma: f64,
}

/// One diminishing-adaptation update. Increments the step counter and uses
/// `ς` of the new count. Returns norms of the covariance change.
pub fn adapt(state: &mut ProposalState, x: &AdaptTarget<'_>) -> AdaptRecord {
    state.step += 1;
    let i = state.step;
    let s = adaptation_step(i, state.tuning);
    let n = state.beta_mean.len();
    let mut delta_sq = 0.0;
    let mut outer_sq = 0.0;
    let mut prev_sq = 0.0;

    let diff: Vec<f64> = x.beta.iter().zip(&state.beta_mean).map(|(a, m)| a - m).collect();
    for r in 0..n {
        for c in 0..n {
            let o = diff[r] * diff[c];
            let old = state.beta_cov[r * n + c];
            let d = s * (o - old);
            state.beta_cov[r * n + c] = old + d;
            delta_sq += d * d;
            outer_sq += o * o;
            prev_sq += old * old;
        }
    }
    for (m, d) in state.beta_mean.iter_mut().zip(&diff) {
        *m += s * d;
    }
    for (block, v) in [
        (&mut state.omega, x.omega),
        (&mut state.gamma, x.gamma),
        (&mut state.log_sigma, x.log_sigma),
    ] {
        let d = v - block.0;
        let o = d * d;
        let delta = s * (o - block.1);
        delta_sq += delta * delta;
        outer_sq += o * o;
        prev_sq += block.1 * block.1;
        block.0 += s * d;
        block.1 = (block.1 + delta).max(VAR_FLOOR);
    }
    AdaptRecord {
        iteration: i,
        step: s,
        delta_norm: delta_sq.sqrt(),
        outer_norm: outer_sq.sqrt(),
        prev_norm: prev_sq.sqrt(),
        jittered: false,
    }
}

/// Cholesky factor of a covariance, adding diagonal jitter until it succeeds.
fn robust_cholesky(cov: &DMatrix<f64>) -> (Cholesky<f64, Dyn>, bool) {
    if let Some(c) = Cholesky::new(cov.clone()) {
        return (c, false);
    }
    let n = cov.nrows();
    let mut jitter = COV_JITTER;
    loop {
        let m = cov + DMatrix::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(m) {
            return (c, true);
        }
        jitter *= 10.0;
    }
}

struct MvnProposal {
    mean: DVector<f64>,
    l: DMatrix<f64>,
    log_det_half: f64,
}

impl MvnProposal {
    fn new(state: &ProposalState) -> (Self, bool) {
        let (chol, jittered) = robust_cholesky(&state.beta_cov_matrix());
        let l = chol.l();
        let log_det_half = l.diagonal().iter().map(|d| d.ln()).sum();
        (
            MvnProposal {
                mean: DVector::from_column_slice(&state.beta_mean),
                l,
                log_det_half,
            },
            jittered,
        )
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.mean.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.mean + &self.l * z).as_slice().to_vec()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let n = self.mean.len();
        let d = DVector::from_column_slice(x) - &self.mean;
        let z = self.l.solve_lower_triangular(&d).expect("non-singular Cholesky factor");
        -0.5 * (n as f64 * LN_2PI + z.norm_squared()) - self.log_det_half
    }
}

fn draw_normal<R: Rng + ?Sized>(rng: &mut R, (m, v): (f64, f64)) -> f64 {
    m + v.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

/// Chain state with the cached pieces of the log posterior.
struct State {
    p: ParamVector,
    sums: (f64, f64),
    log_lik: f64,
    log_prior: f64,
}

impl State {
    fn log_post(&self) -> f64 {
        self.log_lik + self.log_prior
    }
}

struct Target<'a> {
    spec: &'a ModelSpec,
    prior: &'a PriorSpec,
    ev: PathEvaluator<'a>,
    prior_only: bool,
    g: Vec<f64>,
}

impl Target<'_> {
    /// Residual sums of the path for `(ω, γ, β)`, `None` when it explodes.
    fn sums(&mut self, omega: f64, gamma: f64, beta: &[f64]) -> Result<Option<(f64, f64)>> {
        if self.prior_only {
            return Ok(Some((0.0, 0.0)));
        }
        match self.ev.path_into(omega, gamma, beta, &mut self.g) {
            Ok(()) => Ok(Some(self.ev.residual_sums(&self.g))),
            Err(Error::NonFinite { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn log_lik(&self, sums: Option<(f64, f64)>, sigma: f64) -> f64 {
        match sums {
            None => f64::NEG_INFINITY,
            Some(_) if self.prior_only => {
                if sigma > 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Some(s) => self.ev.log_likelihood_from_sums(s, sigma),
        }
    }

    fn state(&mut self, p: ParamVector) -> Result<State> {
        let sums = self.sums(p.omega, p.gamma, &p.beta)?;
        let log_lik = self.log_lik(sums, p.sigma);
        let log_prior = log_prior(self.spec, self.prior, &p);
        Ok(State {
            p,
            sums: sums.unwrap_or((f64::INFINITY, f64::INFINITY)),
            log_lik,
            log_prior,
        })
    }

    /// Metropolis step on a candidate that changes the path.
    fn try_path_move<R: Rng + ?Sized>(&mut self, cur: &mut State, cand: ParamVector, log_q_old: f64, log_q_new: f64, rng: &mut R) -> Result<bool> {
        let sums = self.sums(cand.omega, cand.gamma, &cand.beta)?;
        let ll = self.log_lik(sums, cand.sigma);
        let lpr = log_prior(self.spec, self.prior, &cand);
        let a = mh_accept_prob(ll + lpr, cur.log_post(), log_q_old, log_q_new);
        if a > 0.0 && rng.random::<f64>() < a {
            *cur = State {
                p: cand,
                sums: sums.expect("finite path for accepted move"),
                log_lik: ll,
                log_prior: lpr,
            };
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

fn default_init(spec: &ModelSpec, y: &[f64], fixed: &FixedBlocks) -> Result<ParamVector> {
    let level = spec.initial_level(y)?;
    let gamma = fixed.gamma.unwrap_or(0.8);
    let n = spec.nic.n_coef();
    let (omega, beta) = if spec.is_spline() {
        (0.0, vec![(1.0 - gamma) * level; n])
    } else if spec.recursion() == Recursion::IndirectGarch {
        ((1.0 - gamma) * level * level, vec![0.0; n])
    } else {
        ((1.0 - gamma) * level, vec![0.0; n])
    };
    let sd = stats::sample_std(y);
    Ok(ParamVector {
        omega: fixed.omega.unwrap_or(omega),
        gamma,
        beta: fixed.beta.clone().unwrap_or(beta),
        sigma: fixed.sigma.unwrap_or(if sd > 0.0 { sd } else { 1.0 }),
        phi2: spec.is_spline().then_some(1.0),
    })
}

/// Effective fixed blocks: spline models pin ω at 0 because the spline
/// constant already plays the intercept role.
fn effective_fixed(spec: &ModelSpec, fixed: &FixedBlocks) -> FixedBlocks {
    let mut f = fixed.clone();
    if spec.is_spline() && f.omega.is_none() {
        f.omega = Some(0.0);
    }
    f
}

fn record_schedule(i: usize, n: usize) -> bool {
    if i == n {
        return true;
    }
    let mut p = 1;
    while p < i {
        p *= 10;
    }
    p == i
}

/// Run one chain. Deterministic given `config.seed`.
pub fn run_chain(spec: &ModelSpec, prior: &PriorSpec, config: &SamplerConfig, y: &ReturnSeries) -> Result<PosteriorDraws> {
    spec.validate()?;
    prior.validate()?;
    config.validate()?;
    let fixed = effective_fixed(spec, &config.fixed);
    let n_beta = spec.nic.n_coef();
    if let Some(b) = &fixed.beta {
        if b.len() != n_beta {
            return Err(Error::DimensionMismatch {
                expected: n_beta,
                got: b.len(),
            });
        }
    }
    let penalty = if spec.is_spline() {
        Some(PenaltyMatrix::second_order(n_beta)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ev = PathEvaluator::new(spec, y)?;
    let initial_level = ev.initial_level();
    let mut target = Target {
        spec,
        prior,
        ev,
        prior_only: config.prior_only,
        g: Vec::with_capacity(y.len()),
    };

    // starting point, halving γ and β until the posterior is finite
    let mut start = match &config.init {
        Some(p) => p.clone(),
        None => default_init(spec, &y.values, &fixed)?,
    };
    if let Some(v) = fixed.omega {
        start.omega = v;
    }
    if let Some(v) = fixed.gamma {
        start.gamma = v;
    }
    if let Some(v) = &fixed.beta {
        start.beta = v.clone();
    }
    if let Some(v) = fixed.sigma {
        start.sigma = v;
    }
    start.check(spec)?;
    let mut cur = target.state(start.clone())?;
    let mut tries = 0;
    while !cur.log_post().is_finite() {
        tries += 1;
        if tries > 10 {
            return Err(Error::Initialization(
                "log posterior is -inf at the starting point after 10 retries".into(),
            ));
        }
        let mut p = cur.p.clone();
        if fixed.gamma.is_none() {
            p.gamma *= 0.5;
        }
        if fixed.beta.is_none() {
            p.beta.iter_mut().for_each(|b| *b *= 0.5);
        }
        cur = target.state(p)?;
    }

    let mut prop = match &config.proposal {
        Some(s) => {
            if s.beta_mean.len() != n_beta || s.beta_cov.len() != n_beta * n_beta {
                return Err(Error::DimensionMismatch {
                    expected: n_beta,
                    got: s.beta_mean.len(),
                });
            }
            s.clone()
        }
        None => ProposalState::initial(
            n_beta,
            stats::sample_std(&y.values),
            config.initial_beta_var,
            config.initial_scalar_var,
            config.tuning,
        ),
    };
    let (mut mvn, _) = MvnProposal::new(&prop);

    let kept = (config.iterations - config.burn_in) / config.thin;
    let mut draws = Vec::with_capacity(kept);
    let mut log_post = Vec::with_capacity(kept);
    let mut accepted = Vec::with_capacity(kept);
    let mut counts = [0usize; 4];
    let mut schedule = Vec::new();
    let mut trace = config.trace_adaptation.then(Vec::new);

    for iter in 1..=config.iterations {
        let mut flags = BlockFlags::default();

        if fixed.beta.is_none() {
            let cand_beta = mvn.draw(&mut rng);
            let lq_new = mvn.log_density(&cand_beta);
            let lq_old = mvn.log_density(&cur.p.beta);
            let mut cand = cur.p.clone();
            cand.beta = cand_beta;
            flags.beta = target.try_path_move(&mut cur, cand, lq_old, lq_new, &mut rng)?;
        }
        if fixed.omega.is_none() {
            let w = draw_normal(&mut rng, prop.omega);
            let lq_new = normal_log_pdf(w, prop.omega.0, prop.omega.1);
            let lq_old = normal_log_pdf(cur.p.omega, prop.omega.0, prop.omega.1);
            let mut cand = cur.p.clone();
            cand.omega = w;
            flags.omega = target.try_path_move(&mut cur, cand, lq_old, lq_new, &mut rng)?;
        }
        if fixed.gamma.is_none() {
            let gm = draw_normal(&mut rng, prop.gamma);
            let lq_new = normal_log_pdf(gm, prop.gamma.0, prop.gamma.1);
            let lq_old = normal_log_pdf(cur.p.gamma, prop.gamma.0, prop.gamma.1);
            let mut cand = cur.p.clone();
            cand.gamma = gm;
            flags.gamma = target.try_path_move(&mut cur, cand, lq_old, lq_new, &mut rng)?;
        }
        if fixed.sigma.is_none() {
            // target on the log scale carries the Jacobian term log σ
            let s_new = draw_normal(&mut rng, prop.log_sigma);
            let s_old = cur.p.sigma.ln();
            let lq_new = normal_log_pdf(s_new, prop.log_sigma.0, prop.log_sigma.1);
            let lq_old = normal_log_pdf(s_old, prop.log_sigma.0, prop.log_sigma.1);
            let sigma = s_new.exp();
            let mut cand = cur.p.clone();
            cand.sigma = sigma;
            let ll = target.log_lik(Some(cur.sums), sigma);
            let lpr = log_prior(spec, prior, &cand);
            let a = mh_accept_prob(ll + lpr + s_new, cur.log_post() + s_old, lq_old, lq_new);
            if a > 0.0 && rng.random::<f64>() < a {
                cur.p = cand;
                cur.log_lik = ll;
                cur.log_prior = lpr;
                flags.sigma = true;
            }
        }
        if let Some(k) = &penalty {
            let phi2 = gibbs_update_phi2(&cur.p.beta, k, prior, &mut rng)?;
            cur.p.phi2 = Some(phi2);
            cur.log_prior = log_prior(spec, prior, &cur.p);
        }

        for (c, f) in counts.iter_mut().zip([flags.beta, flags.omega, flags.gamma, flags.sigma]) {
            *c += f as usize;
        }

        let mut rec = adapt(
            &mut prop,
            &AdaptTarget {
                beta: &cur.p.beta,
                omega: cur.p.omega,
                gamma: cur.p.gamma,
                log_sigma: cur.p.sigma.ln(),
            },
        );
        if fixed.beta.is_none() {
            let (m, jittered) = MvnProposal::new(&prop);
            mvn = m;
            rec.jittered = jittered;
        }
        if let Some(t) = trace.as_mut() {
            t.push(rec);
        }
        if record_schedule(iter, config.iterations) {
            schedule.push((iter, rec.step));
        }

        if iter > config.burn_in && (iter - config.burn_in).is_multiple_of(config.thin) {
            draws.push(cur.p.flatten());
            log_post.push(cur.log_post());
            accepted.push(flags);
        }
    }

    let n = config.iterations as f64;
    let rate = |c: usize, free: bool| free.then(|| c as f64 / n);
    Ok(PosteriorDraws {
        spec: spec.clone(),
        names: ParamVector::names(spec),
        draws,
        log_post,
        accepted,
        acceptance: AcceptanceRates {
            beta: rate(counts[0], fixed.beta.is_none()),
            omega: rate(counts[1], fixed.omega.is_none()),
            gamma: rate(counts[2], fixed.gamma.is_none()),
            sigma: rate(counts[3], fixed.sigma.is_none()),
        },
        step_schedule: schedule,
        final_proposal: prop,
        adaptation_trace: trace,
        initial_level,
    })
}

/// SplitMix64 output for `master + k·φ`; used to give chains and series
/// independent seed streams.
pub fn derive_seed(master: u64, k: u64) -> u64 {
    let mut z = master.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run `n_chains` independent chains concurrently with seeds derived from
/// `config.seed` and pool their draws.
pub fn run_chains(
    spec: &ModelSpec,
    prior: &PriorSpec,
    config: &SamplerConfig,
    y: &ReturnSeries,
    n_chains: usize,
) -> Result<PosteriorDraws> {
    if n_chains <= 1 {
        return run_chain(spec, prior, config, y);
    }
    let results: Vec<Result<PosteriorDraws>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n_chains)
            .map(|k| {
                let mut cfg = config.clone();
                cfg.seed = derive_seed(config.seed, k as u64);
                s.spawn(move || run_chain(spec, prior, &cfg, y))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    PosteriorDraws::merge(results.into_iter().collect::<Result<Vec<_>>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nic::{NicSpec, SplineBasis};
    use crate::sep::Measure;

    fn sav(tau: f64) -> ModelSpec {
        ModelSpec::new(NicSpec::Sav, Measure::Quantile, tau).unwrap()
    }

    fn noise(n: usize, seed: u64) -> ReturnSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ReturnSeries::new((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    }

    #[test]
    fn accept_prob_examples() {
        assert_eq!(mh_accept_prob(-3.0, -3.0, -1.2, -1.2), 1.0);
        assert_eq!(mh_accept_prob(f64::NEG_INFINITY, -3.0, 0.0, 0.0), 0.0);
        // Δpost = -1, log q_old - log q_new = +0.3
        let a = mh_accept_prob(-2.0, -1.0, 0.5, 0.2);
        assert!((a - (-0.7f64).exp()).abs() < 1e-15);
        assert!((a - 0.496_585_303_791_409_5).abs() < 1e-12);
    }

    #[test]
    fn step_schedule_values() {
        assert!((adaptation_step(1, 10.0) - 0.1).abs() < 1e-15);
        assert!((adaptation_step(100, 10.0) - 0.01).abs() < 1e-15);
        assert!((adaptation_step(10_000, 10.0) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn first_adaptation_moves_mean_by_a_tenth() {
        let mut s = ProposalState::initial(1, 2.0, 0.1, 0.1, 10.0);
        let rec = adapt(
            &mut s,
            &AdaptTarget {
                beta: &[1.0],
                omega: 1.0,
                gamma: 0.0,
                log_sigma: 0.0,
            },
        );
        assert_eq!(rec.step, 0.1);
        assert!((s.beta_mean[0] - 0.1).abs() < 1e-15);
        assert!((s.omega.0 - 0.1).abs() < 1e-15);
        // Σ ← Σ + ς((x-μ)² - Σ) = 0.1 + 0.1·(1 - 0.1)
        assert!((s.beta_cov[0] - 0.19).abs() < 1e-15);
        // x = μ leaves the mean and shrinks the variance
        assert_eq!(s.gamma.0, 0.0);
        assert!(s.gamma.1 < 0.1);
    }

    #[test]
    fn phi2_conditional_examples() {
        let k = PenaltyMatrix::second_order(23).unwrap();
        let prior = PriorSpec::default();
        let lin: Vec<f64> = (0..23).map(|i| 0.3 - 0.1 * i as f64).collect();
        let (shape, scale) = phi2_conditional(&lin, &k, &prior).unwrap();
        assert!((shape - 10.501).abs() < 1e-12);
        assert!((scale - 0.001).abs() < 1e-12);
    }

    #[test]
    fn phi2_draws_match_inverse_gamma_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (shape, scale) = (10.5, 2.0);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| draw_inv_gamma(shape, scale, &mut rng)).collect();
        let m = stats::mean(&xs);
        let mean = scale / (shape - 1.0);
        let sd = mean / (shape - 2.0).sqrt();
        assert!((m - mean).abs() < 3.0 * sd / (n as f64).sqrt(), "{m} vs {mean}");
    }

    #[test]
    fn log_posterior_is_sum_of_terms() {
        let spec = sav(0.05);
        let prior = PriorSpec::default();
        let y = noise(60, 3);
        let p = ParamVector {
            omega: -0.1,
            gamma: 0.7,
            beta: vec![-0.2],
            sigma: 0.8,
            phi2: None,
        };
        let ll = crate::carm::log_likelihood(&spec, &p, &y).unwrap();
        let norm = |x: f64, v: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - x * x / (2.0 * v);
        let ig = |x: f64, a: f64, b: f64| a * b.ln() - statrs::function::gamma::ln_gamma(a) - (a + 1.0) * x.ln() - b / x;
        let oracle = ll + norm(-0.1, 100.0) + norm(0.7, 100.0) + norm(-0.2, 100.0) + ig(0.8, 0.001, 0.001);
        let got = log_posterior(&spec, &prior, &p, &y).unwrap();
        assert!((got - oracle).abs() < 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn spline_penalty_vanishes_for_linear_beta() {
        let basis = SplineBasis::new(3, 5, -3.0, 3.0).unwrap();
        let spec = ModelSpec::new(NicSpec::Spline(basis), Measure::Expectile, 0.05).unwrap();
        let prior = PriorSpec::default();
        let lin: Vec<f64> = (0..8).map(|i| 0.05 * i as f64).collect();
        let p = ParamVector {
            omega: 0.0,
            gamma: 0.5,
            beta: lin,
            sigma: 1.0,
            phi2: Some(2.0),
        };
        let rank_term = -0.5 * 6.0 * 2.0f64.ln();
        let expected = normal_log_pdf(0.0, 0.0, 100.0)
            + normal_log_pdf(0.5, 0.0, 100.0)
            + inv_gamma_log_pdf(1.0, 0.001, 0.001)
            + rank_term
            + inv_gamma_log_pdf(2.0, 0.001, 0.001);
        assert!((log_prior(&spec, &prior, &p) - expected).abs() < 1e-12);
    }

    #[test]
    fn diffuse_priors_leave_constant_gap() {
        let spec = sav(0.1);
        let prior = PriorSpec {
            omega_var: 1e12,
            gamma_var: 1e12,
            beta_var: 1e12,
            ..PriorSpec::default()
        };
        let y = noise(50, 9);
        let base = ParamVector {
            omega: 0.0,
            gamma: 0.5,
            beta: vec![0.1],
            sigma: 1.0,
            phi2: None,
        };
        let gap = |p: &ParamVector| {
            log_posterior(&spec, &prior, p, &y).unwrap() - crate::carm::log_likelihood(&spec, p, &y).unwrap()
        };
        let g0 = gap(&base);
        let mut p = base.clone();
        p.omega = 1.3;
        p.gamma = -0.4;
        p.beta = vec![2.0];
        assert!((gap(&p) - g0).abs() < 1e-10);
    }

    fn short(seed: u64) -> SamplerConfig {
        SamplerConfig {
            iterations: 3000,
            burn_in: 1000,
            thin: 2,
            seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let spec = sav(0.05);
        let y = noise(300, 1);
        let a = run_chain(&spec, &PriorSpec::default(), &short(11), &y).unwrap();
        let b = run_chain(&spec, &PriorSpec::default(), &short(11), &y).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.log_post, b.log_post);
        let c = run_chain(&spec, &PriorSpec::default(), &short(12), &y).unwrap();
        assert_ne!(a.draws, c.draws);
        assert_eq!(a.len(), 1000);
    }

    #[test]
    fn constant_level_model_recovers_omega() {
        // γ = β = 0 fixed: g_t = ω, so ω is a location for the AL errors
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tau: f64 = 0.5;
        let truth = 0.7;
        let y: Vec<f64> = (0..800)
            .map(|_| {
                let u: f64 = rng.random();
                let e = if u < tau {
                    (1.0 / (1.0 - tau)) * (u / tau).ln()
                } else {
                    -(1.0 / tau) * ((1.0 - u) / (1.0 - tau)).ln()
                };
                truth + e
            })
            .collect();
        let spec = sav(tau).with_init(crate::carm::InitPolicy::Fixed(truth));
        let cfg = SamplerConfig {
            iterations: 6000,
            burn_in: 2000,
            thin: 2,
            seed: 3,
            fixed: FixedBlocks {
                gamma: Some(0.0),
                beta: Some(vec![0.0]),
                ..FixedBlocks::default()
            },
            ..SamplerConfig::default()
        };
        let d = run_chain(&spec, &PriorSpec::default(), &cfg, &ReturnSeries::new(y)).unwrap();
        let w = d.column("omega").unwrap();
        let (m, sd) = (stats::mean(&w), stats::sample_std(&w));
        assert!((m - truth).abs() < 2.0 * sd + 1e-9, "mean {m} sd {sd}");
        assert!(d.acceptance.gamma.is_none() && d.acceptance.beta.is_none());
        assert!(d.column("gamma").unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn rejects_bad_config() {
        let spec = sav(0.05);
        let y = noise(200, 1);
        let mut cfg = short(1);
        cfg.burn_in = cfg.iterations;
        assert!(run_chain(&spec, &PriorSpec::default(), &cfg, &y).is_err());
        let mut cfg = short(1);
        cfg.thin = 0;
        assert!(run_chain(&spec, &PriorSpec::default(), &cfg, &y).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..8).map(|k| derive_seed(42, k)).collect();
        for i in 0..s.len() {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn schedule_marks_powers_of_ten() {
        let marks: Vec<usize> = (1..=2500).filter(|&i| record_schedule(i, 2500)).collect();
        assert_eq!(marks, vec![1, 10, 100, 1000, 2500]);
    }
}
