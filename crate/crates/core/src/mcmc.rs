//! Adaptive random-walk Metropolis for small, smooth posteriors.
//!
//! Each chain runs three phases:
//!
//! 1. the first quarter of burn-in updates one coordinate at a time, tuning a
//!    per-coordinate proposal scale toward the target acceptance rate;
//! 2. the rest of burn-in proposes jointly from a Gaussian whose covariance is
//!    the running covariance of the chain, with a global scale tuned toward
//!    the target acceptance rate, mixed with occasional proposals shrunk by up to 100×;
//! 3. after burn-in the proposal is frozen and every state is retained.
//!
//! Chains use independent ChaCha8 streams of one seed, so results do not depend
//! on how many threads run them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Adaptation window length in iterations.
const WINDOW: usize = 50;

/// Probability that a joint proposal is shrunk by a log-uniform factor in
/// `[10^-SHRINK_DECADES, 1]`.
const SHRINK_PROB: f64 = 0.1;
const SHRINK_DECADES: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Iterations per chain, burn-in included.
    pub n_iter: usize,
    /// Iterations discarded per chain.
    pub n_burnin: usize,
    pub target_acceptance: f64,
    /// Set per analysis from the run's master seed, never from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 4,
            n_iter: 10_000,
            n_burnin: 5_000,
            target_acceptance: 0.3,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        SamplerConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return domain("n_chains must be positive");
        }
        if self.n_burnin >= self.n_iter {
            return domain(format!(
                "n_burnin ({}) must be smaller than n_iter ({})",
                self.n_burnin, self.n_iter
            ));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return domain("target_acceptance must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum SamplerWarning {
    /// Every proposal in a burn-in window was rejected.
    StuckChain { chain: usize, window: usize },
}

/// Retained post-burn-in draws, stored row-major per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    n_params: usize,
    chains: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate of each chain.
    pub acceptance: Vec<f64>,
    pub warnings: Vec<SamplerWarning>,
}

impl Draws {
    /// Wrap externally produced chains. Every chain must hold a whole number
    /// of `n_params`-wide rows and all chains must have equal length.
    pub fn from_chains(n_params: usize, chains: Vec<Vec<f64>>) -> Result<Self> {
        if n_params == 0 {
            return domain("draws need at least one parameter");
        }
        let len = chains.first().map_or(0, Vec::len);
        if chains.iter().any(|c| c.len() != len || c.len() % n_params != 0) {
            return domain("chains must be equal length multiples of n_params");
        }
        Ok(Draws {
            n_params,
            acceptance: vec![f64::NAN; chains.len()],
            chains,
            warnings: Vec::new(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.len() / self.n_params)
    }

    /// Draws of parameter `j`, one vector per chain.
    pub fn param(&self, j: usize) -> Vec<Vec<f64>> {
        self.map_param(j, |x| x)
    }

    /// `f` applied to the draws of parameter `j`, one vector per chain.
    pub fn map_param(&self, j: usize, f: impl Fn(f64) -> f64) -> Vec<Vec<f64>> {
        assert!(j < self.n_params);
        self.chains
            .iter()
            .map(|c| c.iter().skip(j).step_by(self.n_params).map(|&x| f(x)).collect())
            .collect()
    }
}

/// Sample from `log_density` (up to a constant) starting every chain at `init`.
pub fn sample<F>(log_density: F, init: &[f64], config: &SamplerConfig) -> Result<Draws>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    if init.is_empty() {
        return domain("empty parameter vector");
    }
    let lp0 = log_density(init);
    if !lp0.is_finite() {
        return Err(Error::SamplerInit(format!("log density at init is {lp0}")));
    }

    let runs: Vec<ChainRun> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(&log_density, init, lp0, config, c))
        .collect();

    let mut draws = Draws {
        n_params: init.len(),
        chains: Vec::with_capacity(runs.len()),
        acceptance: Vec::with_capacity(runs.len()),
        warnings: Vec::new(),
    };
    for (c, run) in runs.into_iter().enumerate() {
        draws.chains.push(run.draws);
        draws.acceptance.push(run.acceptance);
        draws.warnings.extend(
            run.stuck_windows
                .into_iter()
                .map(|window| SamplerWarning::StuckChain { chain: c, window }),
        );
    }
    Ok(draws)
}

struct ChainRun {
    draws: Vec<f64>,
    acceptance: f64,
    stuck_windows: Vec<usize>,
}

fn run_chain<F>(f: &F, init: &[f64], lp0: f64, config: &SamplerConfig, chain: usize) -> ChainRun
where
    F: Fn(&[f64]) -> f64,
{
    let d = init.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);

    let burnin = config.n_burnin;
    let target = config.target_acceptance;
    let coordinatewise_end = (burnin / 4 / WINDOW) * WINDOW;
    let welford_start = coordinatewise_end / 2;

    let mut x = init.to_vec();
    let mut lp = lp0;
    let mut prop = vec![0.0; d];
    let mut z = vec![0.0; d];

    let mut coord_scale = vec![0.1; d];
    let mut coord_acc = vec![0usize; d];
    let mut log_lambda = 0.0_f64;
    let mut chol: Option<Vec<f64>> = None;
    let mut cov = Welford::new(d);

    let mut window_acc = 0usize;
    let mut stuck_windows = Vec::new();
    let mut kept_acc = 0usize;
    let n_keep = config.n_iter - burnin;
    let mut draws = Vec::with_capacity(n_keep * d);

    let accept = |rng: &mut ChaCha8Rng, lp_new: f64, lp_old: f64| -> bool {
        if lp_new.is_nan() {
            return false;
        }
        let u: f64 = rng.random();
        u.ln() < lp_new - lp_old
    };

    for it in 0..config.n_iter {
        if it < coordinatewise_end {
            for j in 0..d {
                prop.copy_from_slice(&x);
                let step: f64 = rng.sample(StandardNormal);
                prop[j] += coord_scale[j] * step;
                let lp_new = f(&prop);
                if accept(&mut rng, lp_new, lp) {
                    x[j] = prop[j];
                    lp = lp_new;
                    coord_acc[j] += 1;
                    window_acc += 1;
                }
            }
        } else {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            // A fraction of proposals are shrunk so the chain keeps moving
            // through narrow regions the global covariance overshoots.
            let (pick, depth): (f64, f64) = (rng.random(), rng.random());
            let shrink = if pick < SHRINK_PROB {
                10f64.powf(-SHRINK_DECADES * depth)
            } else {
                1.0
            };
            let lambda = log_lambda.exp() * shrink;
            match &chol {
                Some(l) => {
                    let factor = lambda * 2.38 / (d as f64).sqrt();
                    for r in 0..d {
                        let s: f64 = (0..=r).map(|c| l[r * d + c] * z[c]).sum();
                        prop[r] = x[r] + factor * s;
                    }
                }
                None => {
                    for r in 0..d {
                        prop[r] = x[r] + lambda * coord_scale[r] * z[r];
                    }
                }
            }
            let lp_new = f(&prop);
            if accept(&mut rng, lp_new, lp) {
                x.copy_from_slice(&prop);
                lp = lp_new;
                window_acc += 1;
                if it >= burnin {
                    kept_acc += 1;
                }
            }
        }

        if it < burnin {
            if it >= welford_start {
                cov.push(&x);
            }
            if (it + 1) % WINDOW == 0 {
                let k = (it + 1) / WINDOW;
                let gain = (1.0 / (k as f64).sqrt()).max(0.2);
                if window_acc == 0 {
                    stuck_windows.push(k - 1);
                }
                if it < coordinatewise_end {
                    for j in 0..d {
                        let rate = coord_acc[j] as f64 / WINDOW as f64;
                        coord_scale[j] *= (2.0 * gain * (rate - target)).exp();
                        coord_acc[j] = 0;
                    }
                } else {
                    let rate = window_acc as f64 / WINDOW as f64;
                    log_lambda += 2.0 * gain * (rate - target);
                }
                if it + 1 >= coordinatewise_end && cov.count > 2 * d + 2 {
                    if let Some(l) = cholesky(&cov.covariance(), d) {
                        chol = Some(l);
                    }
                }
                window_acc = 0;
            }
        } else {
            draws.extend_from_slice(&x);
        }
    }

    ChainRun {
        draws,
        acceptance: kept_acc as f64 / n_keep as f64,
        stuck_windows,
    }
}

/// Running mean and covariance.
struct Welford {
    d: usize,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford {
            d,
            count: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d * d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for r in 0..self.d {
            let after = x[r] - self.mean[r];
            for c in 0..self.d {
                self.m2[r * self.d + c] += delta[c] * after;
            }
        }
    }

    fn covariance(&self) -> Vec<f64> {
        let n = (self.count - 1) as f64;
        let mut cov: Vec<f64> = self.m2.iter().map(|v| v / n).collect();
        for r in 0..self.d {
            cov[r * self.d + r] += 1e-10;
        }
        cov
    }
}

/// Lower Cholesky factor of a symmetric positive definite `d × d` matrix.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..=r {
            let s: f64 = (0..c).map(|k| l[r * d + k] * l[c * d + k]).sum();
            if r == c {
                let v = a[r * d + r] - s;
                if !(v > 0.0) || !v.is_finite() {
                    return None;
                }
                l[r * d + c] = v.sqrt();
            } else {
                l[r * d + c] = (a[r * d + c] - s) / l[c * d + c];
            }
        }
    }
    Some(l)
}

/// Posterior summary of a single parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub mean: f64,
    pub variance: f64,
    /// Split-R̂; `None` when undefined (constant draws or chains too short).
    pub split_rhat: Option<f64>,
    /// Batch-means Monte Carlo standard error of the mean.
    pub mcse_mean: Option<f64>,
    sorted: Vec<f64>,
}

impl ParamSummary {
    pub fn from_chains(chains: &[Vec<f64>]) -> Result<Self> {
        let mut sorted: Vec<f64> = chains.iter().flatten().copied().collect();
        if sorted.is_empty() {
            return domain("no draws to summarize");
        }
        let (mean, variance) = mean_var(&sorted);
        sorted.sort_by(f64::total_cmp);
        Ok(ParamSummary {
            mean,
            variance,
            split_rhat: split_rhat(chains),
            mcse_mean: mcse_batch_means(chains),
            sorted,
        })
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Empirical quantile with linear interpolation between order statistics.
    pub fn quantile(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        let h = (self.sorted.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        self.sorted[lo] + (h - lo as f64) * (self.sorted[hi] - self.sorted[lo])
    }

    pub fn n_draws(&self) -> usize {
        self.sorted.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub params: Vec<ParamSummary>,
    pub n_chains: usize,
    pub draws_per_chain: usize,
    /// Post-burn-in acceptance rate of each chain.
    pub acceptance: Vec<f64>,
    pub warnings: Vec<SamplerWarning>,
}

impl PosteriorSummary {
    pub fn param(&self, j: usize) -> &ParamSummary {
        &self.params[j]
    }

    /// Largest split-R̂ across parameters, ignoring undefined ones.
    pub fn max_split_rhat(&self) -> Option<f64> {
        self.params
            .iter()
            .filter_map(|p| p.split_rhat)
            .max_by(f64::total_cmp)
    }

    pub fn min_acceptance(&self) -> f64 {
        self.acceptance.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn summarize(draws: &Draws) -> Result<PosteriorSummary> {
    if draws.draws_per_chain() == 0 {
        return domain("no draws to summarize");
    }
    let params = (0..draws.n_params())
        .map(|j| ParamSummary::from_chains(&draws.param(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSummary {
        params,
        n_chains: draws.n_chains(),
        draws_per_chain: draws.draws_per_chain(),
        acceptance: draws.acceptance.clone(),
        warnings: draws.warnings.clone(),
    })
}

/// Mean and (n − 1)-denominator variance.
fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Split-R̂: each chain is halved and the potential scale reduction is
/// computed over the halves.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains.iter().map(Vec::len).min()? / 2;
    if n < 2 {
        return None;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[n..2 * n]])
        .collect();
    let m = halves.len() as f64;
    let stats: Vec<(f64, f64)> = halves.iter().map(|h| mean_var(h)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    if !(w > 0.0) {
        return None;
    }
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m;
    let nf = n as f64;
    let b = nf / (m - 1.0) * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>();
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Some((var_plus / w).sqrt())
}

/// Batch-means Monte Carlo standard error of the overall mean, with batches
/// of `⌊√n⌋` consecutive draws inside each chain.
pub fn mcse_batch_means(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains.iter().map(Vec::len).min()?;
    let m = (n as f64).sqrt().floor() as usize;
    if m == 0 || n / m < 2 {
        return None;
    }
    let per_chain = n / m;
    let means: Vec<f64> = chains
        .iter()
        .flat_map(|c| {
            (0..per_chain).map(move |b| c[b * m..(b + 1) * m].iter().sum::<f64>() / m as f64)
        })
        .collect();
    let (_, var_batch) = mean_var(&means);
    Some((var_batch / means.len() as f64).sqrt())
}
