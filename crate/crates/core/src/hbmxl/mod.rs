//! Hierarchical Bayes mixed logit: hybrid Gibbs sampler with a random-walk
//! Metropolis step for the individual part-worths.
//!
//! Per iteration: (a) every `β_i` gets one Metropolis proposal
//! `β_i + τ·chol(Σ)·z`; (b) `β̄ | β, Σ` is drawn from its conjugate normal;
//! (c) `Σ | β, β̄` from its conjugate inverse Wishart.

mod checkpoint;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::ChoiceDesign;
use crate::error::{Error, Result};
use crate::respsim::ChoiceData;
use crate::rng::{rng_at, stage, StageRng};

pub use checkpoint::CHECKPOINT_MAGIC;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub mu: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub nu: f64,
    pub psi: DMatrix<f64>,
}

impl HyperPriors {
    /// `μ = 0`, `Ω = 100 I`, `ν = o + 3`, `Ψ = ν I`.
    pub fn default_for(o: usize) -> Self {
        let nu = o as f64 + 3.0;
        Self {
            mu: DVector::zeros(o),
            omega: DMatrix::identity(o, o) * 100.0,
            nu,
            psi: DMatrix::identity(o, o) * nu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = self.mu.len();
        if self.omega.shape() != (o, o) || self.psi.shape() != (o, o) {
            return Err(Error::dim("hyperprior matrices must be o x o"));
        }
        if self.nu < o as f64 {
            return Err(Error::param(format!("nu = {} must be >= o = {o}", self.nu)));
        }
        for (name, m) in [("omega", &self.omega), ("psi", &self.psi)] {
            if (m - m.transpose()).amax() > 1e-12 || m.clone().cholesky().is_none() {
                return Err(Error::param(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub burn_in: usize,
    pub keep: usize,
    /// Individual draws are stored every `beta_stride` iterations.
    pub beta_stride: usize,
    /// Burn-in window (iterations) between step-size updates.
    pub adapt_interval: usize,
    pub target_acceptance: f64,
    /// Initial step `τ`; `2.93 / √o` when absent.
    pub initial_step: Option<f64>,
}

impl McmcSettings {
    pub fn new(burn_in: usize, keep: usize, beta_stride: usize) -> Self {
        Self { burn_in, keep, beta_stride, adapt_interval: 50, target_acceptance: 0.3, initial_step: None }
    }

    pub fn total(&self) -> usize {
        self.burn_in + self.keep
    }
}

/// Design and choices in the compact form the sampler uses.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimationData {
    pub n_respondents: usize,
    pub n_sets: usize,
    pub n_alternatives: usize,
    pub n_features: usize,
    pub n_params: usize,
    /// `sets x alternatives x features` parameter column, `u32::MAX` for reference levels.
    pub cols: Vec<u32>,
    /// Chosen alternative per (respondent, set).
    pub choices: Vec<u8>,
    /// RNG stream per respondent; defaults to the respondent index.
    pub stream_ids: Vec<u64>,
}

const REFERENCE: u32 = u32::MAX;

impl EstimationData {
    pub fn new(design: &ChoiceDesign, data: &ChoiceData) -> Result<Self> {
        if design.n_sets() != data.n_sets || design.n_alternatives != data.n_alternatives {
            return Err(Error::dim(format!(
                "design {}x{} vs choices {}x{}",
                design.n_sets(),
                design.n_alternatives,
                data.n_sets,
                data.n_alternatives
            )));
        }
        let m1 = design.n_levels - 1;
        let cols = design
            .levels
            .chunks(design.n_features)
            .flat_map(|alt| {
                alt.iter()
                    .enumerate()
                    .map(move |(f, &lv)| if lv == 0 { REFERENCE } else { (f * m1 + lv as usize - 1) as u32 })
            })
            .collect();
        Ok(Self {
            n_respondents: data.n_respondents,
            n_sets: data.n_sets,
            n_alternatives: data.n_alternatives,
            n_features: design.n_features,
            n_params: design.n_params(),
            cols,
            choices: data.choices.clone(),
            stream_ids: (0..data.n_respondents as u64).collect(),
        })
    }

    /// Respondents reordered as `order`, each keeping its own RNG stream.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        out.choices.clear();
        out.stream_ids.clear();
        for &i in order {
            out.choices.extend_from_slice(&self.choices[i * self.n_sets..(i + 1) * self.n_sets]);
            out.stream_ids.push(self.stream_ids[i]);
        }
        out
    }

    fn utility(&self, beta: &[f64], set: usize, alt: usize) -> f64 {
        let start = (set * self.n_alternatives + alt) * self.n_features;
        self.cols[start..start + self.n_features]
            .iter()
            .filter(|&&c| c != REFERENCE)
            .map(|&c| beta[c as usize])
            .sum()
    }

    /// `Σ_k ln η_{i,chosen,k}(β)`.
    pub fn log_likelihood(&self, respondent: usize, beta: &[f64]) -> f64 {
        let mut ll = 0.0;
        let mut u = vec![0.0; self.n_alternatives];
        for k in 0..self.n_sets {
            for (j, slot) in u.iter_mut().enumerate() {
                *slot = self.utility(beta, k, j);
            }
            let chosen = self.choices[respondent * self.n_sets + k] as usize;
            ll += u[chosen] - log_sum_exp(&u);
        }
        ll
    }

    /// Digest of design and choices, stored in checkpoints.
    fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in [self.n_respondents, self.n_sets, self.n_alternatives, self.n_features, self.n_params] {
            h.update((v as u64).to_le_bytes());
        }
        for c in &self.cols {
            h.update(c.to_le_bytes());
        }
        h.update(&self.choices);
        for s in &self.stream_ids {
            h.update(s.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn log_sum_exp(u: &[f64]) -> f64 {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + u.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Conditional logit probabilities of the given utilities (max-shifted).
pub fn logit_from_utilities(u: &[f64]) -> Vec<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Choice probabilities of one set given as a `J x o` dummy matrix.
pub fn logit_prob(beta: &[f64], set: &DMatrix<f64>) -> Vec<f64> {
    let b = DVector::from_column_slice(beta);
    let u = set * b;
    logit_from_utilities(u.as_slice())
}

/// `Σ_k Σ_j f_ijk ln η_ijk(β)` for one respondent over dummy-coded sets.
pub fn log_likelihood(beta: &[f64], choices: &[usize], sets: &[DMatrix<f64>]) -> f64 {
    sets.iter()
        .zip(choices)
        .map(|(x, &c)| {
            let b = DVector::from_column_slice(beta);
            let u = x * b;
            u[c] - log_sum_exp(u.as_slice())
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    pub n_respondents: usize,
    pub n_params: usize,
    pub settings: McmcSettings,
    /// Iterations actually run (burn-in included).
    pub iterations: usize,
    /// 1-based iteration numbers of the stored individual draws.
    pub beta_iterations: Vec<usize>,
    /// `stored x respondents x o`.
    pub beta_draws: Vec<f64>,
    /// `iterations x o`.
    pub betabar_draws: Vec<f64>,
    /// `iterations x o x o` (column-major per draw).
    pub sigma_draws: Vec<f64>,
    /// Acceptance rate over the kept iterations.
    pub acceptance_rate: f64,
    /// Frozen step size `τ`.
    pub step: f64,
    pub seed: u64,
}

impl McmcChain {
    pub fn beta_draw(&self, stored: usize, respondent: usize) -> &[f64] {
        let o = self.n_params;
        let start = (stored * self.n_respondents + respondent) * o;
        &self.beta_draws[start..start + o]
    }

    pub fn betabar(&self, iteration: usize) -> &[f64] {
        &self.betabar_draws[iteration * self.n_params..(iteration + 1) * self.n_params]
    }

    pub fn sigma(&self, iteration: usize) -> DMatrix<f64> {
        let o2 = self.n_params * self.n_params;
        DMatrix::from_column_slice(self.n_params, self.n_params, &self.sigma_draws[iteration * o2..(iteration + 1) * o2])
    }

    /// Stored draw indices after burn-in.
    pub fn kept_stored(&self) -> std::ops::Range<usize> {
        let first = self.beta_iterations.partition_point(|&t| t <= self.settings.burn_in);
        first..self.beta_iterations.len()
    }

    /// Posterior means of the individual part-worths over the kept stored draws
    /// (`respondents x o`).
    pub fn posterior_means(&self) -> DMatrix<f64> {
        let range = self.kept_stored();
        let n = range.len().max(1) as f64;
        let mut out = DMatrix::zeros(self.n_respondents, self.n_params);
        for s in range {
            for i in 0..self.n_respondents {
                for (p, v) in self.beta_draw(s, i).iter().enumerate() {
                    out[(i, p)] += v / n;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Respondent {
    beta: Vec<f64>,
    ll: f64,
}

/// Incremental sampler; chains can be advanced, checkpointed and resumed.
pub struct ChainRunner {
    data: EstimationData,
    priors: HyperPriors,
    settings: McmcSettings,
    seed: u64,
    t: usize,
    resp: Vec<Respondent>,
    betabar: DVector<f64>,
    sigma: DMatrix<f64>,
    step: f64,
    window_accepts: u64,
    kept_accepts: u64,
    kept_proposals: u64,
    beta_iterations: Vec<usize>,
    beta_draws: Vec<f64>,
    betabar_draws: Vec<f64>,
    sigma_draws: Vec<f64>,
}

fn numerical(iteration: usize, what: &str) -> Error {
    Error::NumericalFailure { iteration, what: what.to_string() }
}

fn spd_inverse(m: &DMatrix<f64>, iteration: usize, what: &str) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or_else(|| numerical(iteration, what))?;
    let inv = chol.inverse();
    Ok(0.5 * (&inv + inv.transpose()))
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// `W⁻¹` for `W ~ Wishart(df, S⁻¹)` via the Bartlett decomposition.
fn inverse_wishart<R: Rng + ?Sized>(df: f64, scale: &DMatrix<f64>, iteration: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let o = scale.nrows();
    let scale_inv = spd_inverse(scale, iteration, "inverse-Wishart scale is not positive definite")?;
    let l = scale_inv.cholesky().ok_or_else(|| numerical(iteration, "Wishart scale factor"))?.l();
    let mut a = DMatrix::zeros(o, o);
    for i in 0..o {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| numerical(iteration, &e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    spd_inverse(&w, iteration, "Wishart draw is not positive definite")
}

impl ChainRunner {
    pub fn new(data: EstimationData, priors: HyperPriors, settings: McmcSettings, seed: u64) -> Result<Self> {
        priors.validate()?;
        let o = data.n_params;
        if priors.mu.len() != o {
            return Err(Error::dim(format!("priors have {} parameters, data {o}", priors.mu.len())));
        }
        if settings.beta_stride == 0 || settings.adapt_interval == 0 {
            return Err(Error::param("beta_stride and adapt_interval must be positive"));
        }
        let zero = vec![0.0; o];
        let resp = (0..data.n_respondents)
            .map(|i| Respondent { ll: data.log_likelihood(i, &zero), beta: zero.clone() })
            .collect();
        let step = settings.initial_step.unwrap_or(2.93 / (o as f64).sqrt());
        Ok(Self {
            data,
            priors,
            settings,
            seed,
            t: 0,
            resp,
            betabar: DVector::zeros(o),
            sigma: DMatrix::identity(o, o),
            step,
            window_accepts: 0,
            kept_accepts: 0,
            kept_proposals: 0,
            beta_iterations: Vec::new(),
            beta_draws: Vec::new(),
            betabar_draws: Vec::new(),
            sigma_draws: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn settings(&self) -> &McmcSettings {
        &self.settings
    }

    pub fn is_finished(&self) -> bool {
        self.t >= self.settings.total()
    }

    /// Lengthens the kept part of the chain by `extra` iterations.
    pub fn extend(&mut self, extra: usize) {
        self.settings.keep += extra;
    }

    /// Runs up to `n` more iterations (never past burn-in + keep).
    pub fn advance(&mut self, n: usize) -> Result<()> {
        let end = (self.t + n).min(self.settings.total());
        while self.t < end {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        self.advance(self.settings.total() - self.t.min(self.settings.total()))
    }

    fn step_once(&mut self) -> Result<()> {
        let t = self.t + 1;
        let o = self.data.n_params;
        let sigma_chol = self
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| numerical(t, "Sigma is not positive definite"))?;
        let root = sigma_chol.l();
        let prec = sigma_chol.inverse();
        let betabar = self.betabar.clone();
        let log_prior = |b: &[f64]| {
            let d = DVector::from_column_slice(b) - &betabar;
            -0.5 * (d.transpose() * &prec * &d)[(0, 0)]
        };
        let (data, seed, step) = (&self.data, self.seed, self.step);
        let accepts: u64 = self
            .resp
            .par_iter_mut()
            .enumerate()
            .map(|(i, r)| {
                let mut rng = rng_at(seed, &[1, t as u64, data.stream_ids[i]]);
                let z = normal_vec(o, &mut rng);
                let prop = DVector::from_column_slice(&r.beta) + step * (&root * z);
                let ll_new = data.log_likelihood(i, prop.as_slice());
                let delta = ll_new + log_prior(prop.as_slice()) - r.ll - log_prior(&r.beta);
                let u: f64 = rng.random();
                if delta >= 0.0 || u.ln() < delta {
                    r.beta.copy_from_slice(prop.as_slice());
                    r.ll = ll_new;
                    1
                } else {
                    0
                }
            })
            .sum();

        let mut rng: StageRng = rng_at(seed, &[2, t as u64]);
        let n = self.resp.len() as f64;
        let mut sum = DVector::zeros(o);
        for r in &self.resp {
            sum += DVector::from_column_slice(&r.beta);
        }
        let omega_inv = spd_inverse(&self.priors.omega, t, "Omega is not positive definite")?;
        let post_prec = &omega_inv + &prec * n;
        let post_cov = spd_inverse(&post_prec, t, "beta-bar posterior precision")?;
        let mean = &post_cov * (&omega_inv * &self.priors.mu + &prec * sum);
        let cov_root = post_cov.cholesky().ok_or_else(|| numerical(t, "beta-bar posterior covariance"))?.l();
        self.betabar = mean + cov_root * normal_vec(o, &mut rng);

        let mut scatter = self.priors.psi.clone();
        for r in &self.resp {
            let d = DVector::from_column_slice(&r.beta) - &self.betabar;
            scatter += &d * d.transpose();
        }
        self.sigma = inverse_wishart(self.priors.nu + n, &scatter, t, &mut rng)?;

        self.t = t;
        if t <= self.settings.burn_in {
            self.window_accepts += accepts;
            if t % self.settings.adapt_interval == 0 {
                let rate = self.window_accepts as f64 / (self.settings.adapt_interval as f64 * n);
                self.step *= (rate - self.settings.target_acceptance).exp();
                self.window_accepts = 0;
            }
        } else {
            self.kept_accepts += accepts;
            self.kept_proposals += self.resp.len() as u64;
        }
        self.betabar_draws.extend_from_slice(self.betabar.as_slice());
        self.sigma_draws.extend_from_slice(self.sigma.as_slice());
        if t % self.settings.beta_stride == 0 {
            self.beta_iterations.push(t);
            for r in &self.resp {
                self.beta_draws.extend_from_slice(&r.beta);
            }
        }
        Ok(())
    }

    /// Snapshot of the chain so far.
    pub fn snapshot(&self) -> McmcChain {
        McmcChain {
            n_respondents: self.data.n_respondents,
            n_params: self.data.n_params,
            settings: self.settings.clone(),
            iterations: self.t,
            beta_iterations: self.beta_iterations.clone(),
            beta_draws: self.beta_draws.clone(),
            betabar_draws: self.betabar_draws.clone(),
            sigma_draws: self.sigma_draws.clone(),
            acceptance_rate: if self.kept_proposals == 0 {
                0.0
            } else {
                self.kept_accepts as f64 / self.kept_proposals as f64
            },
            step: self.step,
            seed: self.seed,
        }
    }

    pub fn finish(self) -> McmcChain {
        self.snapshot()
    }
}

pub fn run_chain(
    data: &EstimationData,
    priors: &HyperPriors,
    settings: &McmcSettings,
    seed: u64,
) -> Result<McmcChain> {
    let mut runner = ChainRunner::new(data.clone(), priors.clone(), settings.clone(), seed)?;
    runner.run_to_end()?;
    Ok(runner.finish())
}

/// Primary and secondary chains, run concurrently with stage-derived seeds.
pub fn run_two_chains(
    data: &EstimationData,
    priors: &HyperPriors,
    settings: &McmcSettings,
    master_seed: u64,
) -> Result<(McmcChain, McmcChain)> {
    let (a, b) = rayon::join(
        || run_chain(data, priors, settings, crate::rng::derive_seed(master_seed, &[stage::CHAIN_PRIMARY])),
        || run_chain(data, priors, settings, crate::rng::derive_seed(master_seed, &[stage::CHAIN_SECONDARY])),
    );
    Ok((a?, b?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{generate_design, DesignSpec};
    use crate::prefgen::{generate_preferences, PreferenceSpec, VarianceProfile};
    use crate::respsim::{simulate_responses, TuningSettings};

    fn toy_data(n_resp: usize, target: f64, seed: u64) -> (EstimationData, DMatrix<f64>) {
        let prefs = generate_preferences(&PreferenceSpec {
            n_features: 2,
            n_levels: 5,
            n_respondents: n_resp,
            variance_profile: VarianceProfile::Homogeneous,
            monotone_features: vec![0],
            seed,
        })
        .unwrap();
        let (train, holdout) = generate_design(&DesignSpec {
            n_features: 2,
            n_levels: 5,
            n_alternatives: 5,
            n_train_sets: 15,
            n_holdout_sets: 5,
            n_random_starts: 2,
            seed,
            max_passes: 20,
        })
        .unwrap();
        let (_, data, _) =
            simulate_responses(&prefs.b, &train, &holdout, target, TuningSettings::default(), seed).unwrap();
        (EstimationData::new(&train, &data).unwrap(), prefs.b)
    }

    #[test]
    fn logit_symmetry_and_closed_form() {
        let set = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        for p in logit_prob(&[0.7, -0.2], &set) {
            assert!((p - 0.2).abs() < 1e-15);
        }
        let p = logit_from_utilities(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let q = logit_from_utilities(&[2f64.ln() + 50.0, 50.0]);
        assert!((p[0] - q[0]).abs() < 1e-15);
        assert!((logit_from_utilities(&[1.0, 2.0, 3.0]).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn likelihood_at_zero_and_in_the_limit() {
        let (data, _) = toy_data(3, 0.5, 1);
        let zero = vec![0.0; 8];
        assert!((data.log_likelihood(0, &zero) - 15.0 * (0.2f64).ln()).abs() < 1e-12);

        let x = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let weak = log_likelihood(&[1.0], &[0], std::slice::from_ref(&x));
        let strong = log_likelihood(&[40.0], &[0], &[x]);
        assert!(weak < strong && strong <= 0.0 && strong > -1e-15);
    }

    #[test]
    fn likelihood_matches_direct_product() {
        let x1 = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let x2 = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let beta = [0.3, -1.1];
        let p1 = logit_prob(&beta, &x1)[2];
        let p2 = logit_prob(&beta, &x2)[1];
        let ll = log_likelihood(&beta, &[2, 1], &[x1, x2]);
        assert!((ll - (p1 * p2).ln()).abs() < 1e-14);
    }

    #[test]
    fn deterministic_and_positive_definite() {
        let (data, _) = toy_data(20, 0.5, 2);
        let priors = HyperPriors::default_for(8);
        let s = McmcSettings::new(60, 40, 5);
        let a = run_chain(&data, &priors, &s, 9).unwrap();
        let b = run_chain(&data, &priors, &s, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iterations, 100);
        assert_eq!(a.beta_iterations.len(), 20);
        for t in 0..a.iterations {
            let sig = a.sigma(t);
            assert!((&sig - sig.transpose()).amax() < 1e-12);
            assert!(sig.cholesky().is_some());
        }
    }

    #[test]
    fn resume_is_bit_exact() {
        let (data, _) = toy_data(10, 0.5, 3);
        let priors = HyperPriors::default_for(8);
        let s = McmcSettings::new(50, 50, 10);
        let full = run_chain(&data, &priors, &s, 4).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.bin");
        let mut r = ChainRunner::new(data.clone(), priors.clone(), s.clone(), 4).unwrap();
        r.advance(37).unwrap();
        r.save(&path).unwrap();
        drop(r);
        let mut r = ChainRunner::from_checkpoint(&path, data.clone(), priors).unwrap();
        assert_eq!(r.iteration(), 37);
        r.run_to_end().unwrap();
        assert_eq!(r.finish(), full);
    }

    #[test]
    fn checkpoint_rejects_other_data() {
        let (data, _) = toy_data(10, 0.5, 3);
        let (other, _) = toy_data(10, 0.5, 4);
        let priors = HyperPriors::default_for(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.bin");
        let mut r = ChainRunner::new(data, priors.clone(), McmcSettings::new(5, 5, 1), 1).unwrap();
        r.advance(3).unwrap();
        r.save(&path).unwrap();
        assert!(matches!(
            ChainRunner::from_checkpoint(&path, other, priors),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn exchangeable_under_respondent_permutation() {
        let (data, _) = toy_data(12, 0.5, 5);
        let priors = HyperPriors::default_for(8);
        let s = McmcSettings::new(20, 10, 1);
        let a = run_chain(&data, &priors, &s, 8).unwrap();
        let order: Vec<usize> = (0..12).rev().collect();
        let b = run_chain(&data.permuted(&order), &priors, &s, 8).unwrap();
        for (x, y) in a.betabar_draws.iter().zip(&b.betabar_draws) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.sigma_draws.iter().zip(&b.sigma_draws) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_low_noise_preferences() {
        let (data, truth) = toy_data(200, 0.01, 6);
        let priors = HyperPriors::default_for(8);
        let chain = run_chain(&data, &priors, &McmcSettings::new(1500, 1500, 10), 3).unwrap();
        let est = chain.posterior_means();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..200 {
            let a: Vec<f64> = truth.row(i).iter().copied().collect();
            let b: Vec<f64> = est.row(i).iter().copied().collect();
            if let Some(r) = crate::diagnostics::pearson(&a, &b) {
                total += r;
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(mean >= 0.8, "mean correlation {mean}");
        assert!(chain.acceptance_rate > 0.05 && chain.acceptance_rate < 0.6, "{}", chain.acceptance_rate);
    }
}
