//! D-efficient choice designs built by a modified Fedorov exchange over the
//! full factorial, with duplicate-free sets and exact level balance.
//!
//! Alternatives are stored as level tuples (0-based) and converted to dummy
//! rows on demand. The information matrix at zero priors is
//! `Σ_k (1/J) Σ_j (x_kj - x̄_k)(x_kj - x̄_k)ᵀ` and the D-error is
//! `det(I)^(-1/o)`.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{binomial, ProductCodec};
use crate::error::{Error, Result};
use crate::rng::{rng_at, stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub n_features: usize,
    pub n_levels: usize,
    pub n_alternatives: usize,
    pub n_train_sets: usize,
    pub n_holdout_sets: usize,
    pub n_random_starts: usize,
    pub seed: u64,
    /// Upper bound on improvement passes per restart.
    #[serde(default = "default_max_passes")]
    pub max_passes: usize,
}

fn default_max_passes() -> usize {
    50
}

impl DesignSpec {
    pub fn n_params(&self) -> usize {
        self.n_features * (self.n_levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_levels < 2 {
            return Err(Error::dim("design needs >= 1 feature and >= 2 levels"));
        }
        if self.n_alternatives != self.n_levels {
            return Err(Error::param(format!(
                "alternatives ({}) must equal levels ({})",
                self.n_alternatives, self.n_levels
            )));
        }
        if self.n_train_sets == 0 || self.n_train_sets % self.n_levels != 0 {
            return Err(Error::param(format!(
                "training sets ({}) must be a positive multiple of the levels ({})",
                self.n_train_sets, self.n_levels
            )));
        }
        if self.n_random_starts == 0 {
            return Err(Error::param("need at least one random start"));
        }
        let tau = self.n_levels.pow(self.n_features as u32);
        if tau < self.n_alternatives {
            return Err(Error::Infeasible(format!(
                "{tau} candidate alternatives cannot fill {} per set",
                self.n_alternatives
            )));
        }
        let distinct = binomial((tau + self.n_alternatives - 1) as u64, self.n_alternatives as u64)
            .unwrap_or(u128::MAX);
        let needed = (self.n_train_sets + self.n_holdout_sets) as u128;
        if distinct < needed {
            return Err(Error::Infeasible(format!(
                "only {distinct} distinct sets exist but {needed} are required"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignRole {
    Train,
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDesign {
    pub n_features: usize,
    pub n_levels: usize,
    pub n_alternatives: usize,
    /// `sets x alternatives x features` level indices.
    pub levels: Vec<u8>,
    pub role: DesignRole,
    pub d_error: f64,
    /// Percent of the analytic optimum for symmetric designs (J = m).
    pub d_efficiency: f64,
    /// Percent of the best design found across restarts.
    pub relative_to_best_restart: f64,
}

impl ChoiceDesign {
    pub fn from_levels(
        n_features: usize,
        n_levels: usize,
        n_alternatives: usize,
        levels: Vec<u8>,
        role: DesignRole,
    ) -> Result<Self> {
        let row = n_features * n_alternatives;
        if row == 0 || levels.len() % row != 0 {
            return Err(Error::dim(format!("level buffer of {} is not a multiple of {row}", levels.len())));
        }
        if levels.iter().any(|&lv| lv as usize >= n_levels) {
            return Err(Error::dim("level index out of range"));
        }
        let mut d = Self {
            n_features,
            n_levels,
            n_alternatives,
            levels,
            role,
            d_error: f64::NAN,
            d_efficiency: f64::NAN,
            relative_to_best_restart: f64::NAN,
        };
        if let Ok(e) = d_error(&d) {
            d.d_error = e;
            d.d_efficiency = relative_efficiency(&d, e).unwrap_or(f64::NAN);
            d.relative_to_best_restart = 100.0;
        }
        Ok(d)
    }

    pub fn n_sets(&self) -> usize {
        self.levels.len() / (self.n_features * self.n_alternatives)
    }

    pub fn n_params(&self) -> usize {
        self.n_features * (self.n_levels - 1)
    }

    pub fn alternative(&self, set: usize, alt: usize) -> &[u8] {
        let start = (set * self.n_alternatives + alt) * self.n_features;
        &self.levels[start..start + self.n_features]
    }

    pub fn set(&self, set: usize) -> &[u8] {
        let width = self.n_alternatives * self.n_features;
        &self.levels[set * width..(set + 1) * width]
    }

    /// Dummy tensor, `sets x alternatives x o`, reference level 0 coded as all zeros.
    pub fn to_dummy(&self) -> Vec<f64> {
        let o = self.n_params();
        let m1 = self.n_levels - 1;
        let mut out = vec![0.0; self.n_sets() * self.n_alternatives * o];
        for (row, alt) in self.levels.chunks(self.n_features).enumerate() {
            for (f, &lv) in alt.iter().enumerate() {
                if lv > 0 {
                    out[row * o + f * m1 + lv as usize - 1] = 1.0;
                }
            }
        }
        out
    }

    pub fn from_dummy(
        n_features: usize,
        n_levels: usize,
        n_alternatives: usize,
        dummy: &[f64],
        role: DesignRole,
    ) -> Result<Self> {
        let m1 = n_levels - 1;
        let o = n_features * m1;
        if dummy.len() % (o * n_alternatives) != 0 {
            return Err(Error::dim("dummy tensor has the wrong length"));
        }
        let mut levels = Vec::with_capacity(dummy.len() / o * n_features);
        for row in dummy.chunks(o) {
            for f in 0..n_features {
                let block = &row[f * m1..(f + 1) * m1];
                let ones: Vec<usize> = (0..m1).filter(|&k| block[k] == 1.0).collect();
                if ones.len() > 1 || block.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::dim("dummy row does not encode exactly one level per feature"));
                }
                levels.push(ones.first().map_or(0, |&k| k as u8 + 1));
            }
        }
        Self::from_levels(n_features, n_levels, n_alternatives, levels, role)
    }

    /// Sets as sorted product-rank tuples, used for duplicate detection.
    fn canonical_sets(&self, codec: &ProductCodec) -> Vec<Vec<usize>> {
        (0..self.n_sets()).map(|k| canonical_set(self.set(k), self.n_features, codec)).collect()
    }
}

fn canonical_set(set: &[u8], n_features: usize, codec: &ProductCodec) -> Vec<usize> {
    let mut ranks: Vec<usize> = set
        .chunks(n_features)
        .map(|alt| alt.iter().fold(0, |acc, &lv| acc * codec.n_levels + lv as usize))
        .collect();
    ranks.sort_unstable();
    ranks
}

/// Contribution of one set to the information matrix at zero priors.
fn set_information(set: &[u8], n_features: usize, n_levels: usize, out: &mut DMatrix<f64>) {
    let m1 = n_levels - 1;
    let o = n_features * m1;
    let n_alt = set.len() / n_features;
    out.fill(0.0);
    let mut mean = vec![0.0; o];
    for alt in set.chunks(n_features) {
        for (f, &lv) in alt.iter().enumerate() {
            if lv > 0 {
                mean[f * m1 + lv as usize - 1] += 1.0 / n_alt as f64;
            }
        }
    }
    let mut centered = vec![0.0; o];
    for alt in set.chunks(n_features) {
        for (c, m) in centered.iter_mut().zip(&mean) {
            *c = -m;
        }
        for (f, &lv) in alt.iter().enumerate() {
            if lv > 0 {
                centered[f * m1 + lv as usize - 1] += 1.0;
            }
        }
        for r in 0..o {
            let cr = centered[r];
            if cr == 0.0 {
                continue;
            }
            for c in 0..o {
                out[(r, c)] += cr * centered[c] / n_alt as f64;
            }
        }
    }
}

pub fn information_matrix(design: &ChoiceDesign) -> DMatrix<f64> {
    let o = design.n_params();
    let mut total = DMatrix::zeros(o, o);
    let mut buf = DMatrix::zeros(o, o);
    for k in 0..design.n_sets() {
        set_information(design.set(k), design.n_features, design.n_levels, &mut buf);
        total += &buf;
    }
    total
}

/// `ln det`, or `None` when the matrix is (numerically) singular.
fn log_det(info: &DMatrix<f64>) -> Option<f64> {
    let scale = info.diagonal().max();
    if scale <= 0.0 {
        return None;
    }
    let chol = info.clone().cholesky()?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..info.nrows() {
        let p = l[(i, i)];
        if !(p * p > 1e-10 * scale) {
            return None;
        }
        acc += 2.0 * p.ln();
    }
    Some(acc)
}

pub fn d_error(design: &ChoiceDesign) -> Result<f64> {
    let info = information_matrix(design);
    let ld = log_det(&info).ok_or(Error::DegenerateDesign)?;
    Ok((-ld / design.n_params() as f64).exp())
}

/// D-error of a symmetric design (J = m) in which every set shows each level of
/// every feature once and all feature pairs co-occur uniformly. No design with
/// the same dimensions can go below it.
pub fn optimal_d_error(n_features: usize, n_levels: usize, n_alternatives: usize, n_sets: usize) -> Option<f64> {
    if n_alternatives != n_levels || n_sets == 0 {
        return None;
    }
    let o = (n_features * (n_levels - 1)) as f64;
    Some(n_alternatives as f64 / n_sets as f64 * (n_levels as f64).powf(n_features as f64 / o))
}

fn relative_efficiency(design: &ChoiceDesign, derr: f64) -> Option<f64> {
    optimal_d_error(design.n_features, design.n_levels, design.n_alternatives, design.n_sets())
        .map(|opt| 100.0 * opt / derr)
}

/// Outcome of one restart.
#[derive(Clone, Debug)]
pub struct ExchangeRun {
    pub levels: Vec<u8>,
    pub d_error: f64,
    pub start_d_error: f64,
    /// D-error after every accepted move.
    pub trajectory: Vec<f64>,
    pub passes: usize,
}

struct ExchangeState<'a> {
    n_features: usize,
    n_levels: usize,
    n_alt: usize,
    n_sets: usize,
    codec: ProductCodec,
    levels: Vec<u8>,
    contrib: Vec<DMatrix<f64>>,
    info: DMatrix<f64>,
    log_det: f64,
    canon: Vec<Vec<usize>>,
    forbidden: &'a HashSet<Vec<usize>>,
    counts: Vec<Vec<usize>>,
    window: (usize, usize),
}

impl<'a> ExchangeState<'a> {
    fn new(
        n_features: usize,
        n_levels: usize,
        n_alt: usize,
        levels: Vec<u8>,
        forbidden: &'a HashSet<Vec<usize>>,
    ) -> Self {
        let codec = ProductCodec { n_features, n_levels };
        let n_sets = levels.len() / (n_features * n_alt);
        let o = n_features * (n_levels - 1);
        let width = n_alt * n_features;
        let contrib: Vec<DMatrix<f64>> = (0..n_sets)
            .map(|k| {
                let mut m = DMatrix::zeros(o, o);
                set_information(&levels[k * width..(k + 1) * width], n_features, n_levels, &mut m);
                m
            })
            .collect();
        let info = contrib.iter().fold(DMatrix::zeros(o, o), |acc, c| acc + c);
        let log_det = log_det(&info).unwrap_or(f64::NEG_INFINITY);
        let canon = (0..n_sets)
            .map(|k| canonical_set(&levels[k * width..(k + 1) * width], n_features, &codec))
            .collect();
        let mut counts = vec![vec![0usize; n_levels]; n_features];
        for alt in levels.chunks(n_features) {
            for (f, &lv) in alt.iter().enumerate() {
                counts[f][lv as usize] += 1;
            }
        }
        let total = n_sets * n_alt;
        let window = (total / n_levels, total.div_ceil(n_levels));
        Self {
            n_features,
            n_levels,
            n_alt,
            n_sets,
            codec,
            levels,
            contrib,
            info,
            log_det,
            canon,
            forbidden,
            counts,
            window,
        }
    }

    fn width(&self) -> usize {
        self.n_alt * self.n_features
    }

    fn set_slice(&self, k: usize) -> &[u8] {
        &self.levels[k * self.width()..(k + 1) * self.width()]
    }

    fn d_error(&self) -> f64 {
        (-self.log_det / (self.n_features * (self.n_levels - 1)) as f64).exp()
    }

    fn set_is_unique(&self, canon: &[usize], skip: &[usize]) -> bool {
        !self.forbidden.contains(canon)
            && self
                .canon
                .iter()
                .enumerate()
                .all(|(k, c)| skip.contains(&k) || c.as_slice() != canon)
    }

    /// Evaluates replacing the given sets' contents; returns the new log-det
    /// together with the per-set contributions and canonical forms.
    fn evaluate(&self, replaced: &[(usize, Vec<u8>)]) -> Option<(f64, Vec<DMatrix<f64>>, Vec<Vec<usize>>)> {
        let skip: Vec<usize> = replaced.iter().map(|(k, _)| *k).collect();
        let mut canons = Vec::with_capacity(replaced.len());
        for (_, set) in replaced {
            let c = canonical_set(set, self.n_features, &self.codec);
            if !self.set_is_unique(&c, &skip) || canons.contains(&c) {
                return None;
            }
            canons.push(c);
        }
        let o = self.info.nrows();
        let mut info = self.info.clone();
        let mut mats = Vec::with_capacity(replaced.len());
        for (k, set) in replaced {
            let mut m = DMatrix::zeros(o, o);
            set_information(set, self.n_features, self.n_levels, &mut m);
            info -= &self.contrib[*k];
            info += &m;
            mats.push(m);
        }
        let ld = log_det(&info)?;
        Some((ld, mats, canons))
    }

    fn commit(&mut self, replaced: Vec<(usize, Vec<u8>)>, ld: f64, mats: Vec<DMatrix<f64>>, canons: Vec<Vec<usize>>) {
        let width = self.width();
        for (((k, set), m), c) in replaced.into_iter().zip(mats).zip(canons) {
            for alt in self.levels[k * width..(k + 1) * width].chunks(self.n_features) {
                for (f, &lv) in alt.iter().enumerate() {
                    self.counts[f][lv as usize] -= 1;
                }
            }
            for alt in set.chunks(self.n_features) {
                for (f, &lv) in alt.iter().enumerate() {
                    self.counts[f][lv as usize] += 1;
                }
            }
            self.levels[k * width..(k + 1) * width].copy_from_slice(&set);
            self.info -= &self.contrib[k];
            self.info += &m;
            self.contrib[k] = m;
            self.canon[k] = c;
        }
        // refresh from scratch to keep rounding drift out of the running sum
        let o = self.info.nrows();
        self.info = self.contrib.iter().fold(DMatrix::zeros(o, o), |acc, c| acc + c);
        self.log_det = log_det(&self.info).unwrap_or(ld);
    }

    fn improves(&self, ld: f64) -> bool {
        ld > self.log_det + 1e-10 * self.log_det.abs().max(1.0)
    }

    /// Replace one alternative with the best full-factorial candidate that keeps
    /// every level count inside the balance window.
    fn alternative_exchange_pass(&mut self, trajectory: &mut Vec<f64>) -> bool {
        let mut improved = false;
        let tau = self.codec.n_products();
        let mut cand = vec![0usize; self.n_features];
        for k in 0..self.n_sets {
            for j in 0..self.n_alt {
                let mut best: Option<(f64, Vec<u8>, Vec<DMatrix<f64>>, Vec<Vec<usize>>)> = None;
                for p in 0..tau {
                    self.codec.decode_into(p, &mut cand);
                    let current = &self.set_slice(k)[j * self.n_features..(j + 1) * self.n_features];
                    if current.iter().zip(&cand).all(|(&a, &b)| a as usize == b) {
                        continue;
                    }
                    let balanced = current.iter().zip(&cand).enumerate().all(|(f, (&old, &new))| {
                        old as usize == new
                            || (self.counts[f][old as usize] > self.window.0
                                && self.counts[f][new] < self.window.1)
                    });
                    if !balanced {
                        continue;
                    }
                    let mut set = self.set_slice(k).to_vec();
                    for (f, &lv) in cand.iter().enumerate() {
                        set[j * self.n_features + f] = lv as u8;
                    }
                    if let Some((ld, mats, canons)) = self.evaluate(&[(k, set.clone())]) {
                        if self.improves(ld) && best.as_ref().is_none_or(|b| ld > b.0) {
                            best = Some((ld, set, mats, canons));
                        }
                    }
                }
                if let Some((ld, set, mats, canons)) = best {
                    self.commit(vec![(k, set)], ld, mats, canons);
                    trajectory.push(self.d_error());
                    improved = true;
                }
            }
        }
        improved
    }

    /// Exchange two alternatives for two other full-factorial profiles that
    /// carry the same levels between them (swapping a subset of features).
    /// Level counts are untouched, so balance is preserved exactly.
    fn paired_exchange_pass(&mut self, trajectory: &mut Vec<f64>) -> bool {
        let mut improved = false;
        let n_pos = self.n_sets * self.n_alt;
        let nf = self.n_features;
        let subsets = (1u32 << nf) - 1;
        for p1 in 0..n_pos {
            for p2 in p1 + 1..n_pos {
                let (k1, j1) = (p1 / self.n_alt, p1 % self.n_alt);
                let (k2, j2) = (p2 / self.n_alt, p2 % self.n_alt);
                let a1 = self.levels[p1 * nf..(p1 + 1) * nf].to_vec();
                let a2 = self.levels[p2 * nf..(p2 + 1) * nf].to_vec();
                let mut best: Option<(f64, Vec<(usize, Vec<u8>)>, Vec<DMatrix<f64>>, Vec<Vec<usize>>)> = None;
                for mask in 1..=subsets {
                    if k1 == k2 && mask == subsets {
                        continue;
                    }
                    if (0..nf).all(|f| mask & (1 << f) == 0 || a1[f] == a2[f]) {
                        continue;
                    }
                    let mut n1 = a1.clone();
                    let mut n2 = a2.clone();
                    for f in 0..nf {
                        if mask & (1 << f) != 0 {
                            n1[f] = a2[f];
                            n2[f] = a1[f];
                        }
                    }
                    let replaced = if k1 == k2 {
                        let mut set = self.set_slice(k1).to_vec();
                        set[j1 * nf..(j1 + 1) * nf].copy_from_slice(&n1);
                        set[j2 * nf..(j2 + 1) * nf].copy_from_slice(&n2);
                        vec![(k1, set)]
                    } else {
                        let mut s1 = self.set_slice(k1).to_vec();
                        let mut s2 = self.set_slice(k2).to_vec();
                        s1[j1 * nf..(j1 + 1) * nf].copy_from_slice(&n1);
                        s2[j2 * nf..(j2 + 1) * nf].copy_from_slice(&n2);
                        vec![(k1, s1), (k2, s2)]
                    };
                    if let Some((ld, mats, canons)) = self.evaluate(&replaced) {
                        if self.improves(ld) && best.as_ref().is_none_or(|b| ld > b.0) {
                            best = Some((ld, replaced, mats, canons));
                        }
                    }
                }
                if let Some((ld, replaced, mats, canons)) = best {
                    self.commit(replaced, ld, mats, canons);
                    trajectory.push(self.d_error());
                    improved = true;
                }
            }
        }
        improved
    }

    fn has_duplicates(&self) -> bool {
        let mut seen = HashSet::new();
        self.canon.iter().any(|c| self.forbidden.contains(c) || !seen.insert(c.clone()))
    }
}

/// Balanced random start: each feature's column is a shuffled multiset in
/// which every level appears `⌊N/m⌋` or `⌈N/m⌉` times.
fn balanced_start<R: Rng + ?Sized>(n_features: usize, n_levels: usize, n_rows: usize, rng: &mut R) -> Vec<u8> {
    let mut levels = vec![0u8; n_rows * n_features];
    for f in 0..n_features {
        let mut extra: Vec<usize> = (0..n_levels).collect();
        extra.shuffle(rng);
        let mut column: Vec<u8> = (0..n_rows).map(|r| (r % n_levels) as u8).collect();
        // remainder rows get a random subset of levels
        let rem = n_rows % n_levels;
        for (slot, &lv) in column[n_rows - rem..].iter_mut().zip(&extra) {
            *slot = lv as u8;
        }
        column.shuffle(rng);
        for (r, lv) in column.into_iter().enumerate() {
            levels[r * n_features + f] = lv;
        }
    }
    levels
}

/// Forced exchanges (single-feature swaps between random positions) until no
/// set duplicates another or a forbidden set.
fn repair_duplicates<R: Rng + ?Sized>(state: &mut ExchangeState<'_>, rng: &mut R) -> Result<()> {
    let nf = state.n_features;
    let n_pos = state.n_sets * state.n_alt;
    for _ in 0..10_000 {
        if !state.has_duplicates() {
            return Ok(());
        }
        let mut seen = HashSet::new();
        let dup = (0..state.n_sets)
            .find(|&k| state.forbidden.contains(&state.canon[k]) || !seen.insert(state.canon[k].clone()))
            .expect("a duplicate exists");
        let p1 = dup * state.n_alt + rng.random_range(0..state.n_alt);
        let p2 = rng.random_range(0..n_pos);
        let f = rng.random_range(0..nf);
        state.levels.swap(p1 * nf + f, p2 * nf + f);
        let fresh = ExchangeState::new(nf, state.n_levels, state.n_alt, std::mem::take(&mut state.levels), state.forbidden);
        *state = fresh;
    }
    Err(Error::Infeasible("could not repair duplicate sets".into()))
}

pub fn fedorov_restart<R: Rng + ?Sized>(
    n_features: usize,
    n_levels: usize,
    n_alt: usize,
    n_sets: usize,
    max_passes: usize,
    forbidden: &HashSet<Vec<usize>>,
    rng: &mut R,
) -> Result<ExchangeRun> {
    let start = balanced_start(n_features, n_levels, n_sets * n_alt, rng);
    let mut state = ExchangeState::new(n_features, n_levels, n_alt, start, forbidden);
    repair_duplicates(&mut state, rng)?;
    let start_d_error = state.d_error();
    let mut trajectory = vec![start_d_error];
    let mut passes = 0;
    while passes < max_passes {
        passes += 1;
        let a = state.alternative_exchange_pass(&mut trajectory);
        let b = state.paired_exchange_pass(&mut trajectory);
        if !a && !b {
            break;
        }
    }
    if !state.log_det.is_finite() {
        return Err(Error::DegenerateDesign);
    }
    Ok(ExchangeRun { d_error: state.d_error(), levels: state.levels, start_d_error, trajectory, passes })
}

fn best_of_restarts(
    spec: &DesignSpec,
    n_sets: usize,
    role: DesignRole,
    forbidden: &HashSet<Vec<usize>>,
) -> Result<ChoiceDesign> {
    let role_tag = match role {
        DesignRole::Train => 0,
        DesignRole::Holdout => 1,
    };
    let runs: Vec<Result<ExchangeRun>> = (0..spec.n_random_starts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_at(spec.seed, &[stage::DESIGN, role_tag, r as u64]);
            fedorov_restart(
                spec.n_features,
                spec.n_levels,
                spec.n_alternatives,
                n_sets,
                spec.max_passes,
                forbidden,
                &mut rng,
            )
        })
        .collect();
    let mut best: Option<ExchangeRun> = None;
    let mut last_err = None;
    for run in runs {
        match run {
            Ok(run) => {
                if best.as_ref().is_none_or(|b| run.d_error < b.d_error) {
                    best = Some(run);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let best = best.ok_or_else(|| last_err.unwrap_or(Error::DegenerateDesign))?;
    let mut design =
        ChoiceDesign::from_levels(spec.n_features, spec.n_levels, spec.n_alternatives, best.levels, role)?;
    design.relative_to_best_restart = 100.0 * best.d_error / design.d_error;
    Ok(design)
}

/// Training design, then a hold-out design unique against it.
pub fn generate_design(spec: &DesignSpec) -> Result<(ChoiceDesign, ChoiceDesign)> {
    spec.validate()?;
    let none = HashSet::new();
    let train = best_of_restarts(spec, spec.n_train_sets, DesignRole::Train, &none)?;
    if spec.n_holdout_sets == 0 {
        let empty = ChoiceDesign {
            levels: Vec::new(),
            role: DesignRole::Holdout,
            d_error: f64::NAN,
            d_efficiency: f64::NAN,
            relative_to_best_restart: f64::NAN,
            ..train.clone()
        };
        return Ok((train, empty));
    }
    let codec = ProductCodec { n_features: spec.n_features, n_levels: spec.n_levels };
    let forbidden: HashSet<Vec<usize>> = train.canonical_sets(&codec).into_iter().collect();
    let holdout = best_of_restarts(spec, spec.n_holdout_sets, DesignRole::Holdout, &forbidden)?;
    Ok((train, holdout))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignAssessment {
    pub role: DesignRole,
    pub n_sets: usize,
    /// `features x levels`.
    pub level_counts: Vec<Vec<usize>>,
    /// Largest distance of any level count outside `[⌊N/m⌋, ⌈N/m⌉]`.
    pub max_balance_deviation: usize,
    /// Per set: Σ_features (alternatives − distinct levels).
    pub overlap: Vec<usize>,
    pub duplicate_alternative: Vec<bool>,
    /// Largest |n_ab − n_a n_b / N| over all feature pairs and level pairs.
    pub max_cooccurrence_deviation: f64,
    pub d_error: Option<f64>,
    pub d_efficiency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub train: DesignAssessment,
    pub holdout: DesignAssessment,
    pub duplicate_sets_within_train: usize,
    pub duplicate_sets_within_holdout: usize,
    pub duplicate_sets_across: usize,
}

impl DesignReport {
    pub fn minimal_overlap(&self) -> bool {
        self.train.overlap.iter().chain(&self.holdout.overlap).all(|&o| o == 0)
    }

    pub fn duplicate_free(&self) -> bool {
        self.duplicate_sets_within_train == 0
            && self.duplicate_sets_within_holdout == 0
            && self.duplicate_sets_across == 0
    }
}

fn assess_one(d: &ChoiceDesign) -> DesignAssessment {
    let nf = d.n_features;
    let n_rows = d.n_sets() * d.n_alternatives;
    let mut level_counts = vec![vec![0usize; d.n_levels]; nf];
    for alt in d.levels.chunks(nf) {
        for (f, &lv) in alt.iter().enumerate() {
            level_counts[f][lv as usize] += 1;
        }
    }
    let (lo, hi) = (n_rows / d.n_levels, n_rows.div_ceil(d.n_levels));
    let max_balance_deviation = level_counts
        .iter()
        .flatten()
        .map(|&c| lo.saturating_sub(c).max(c.saturating_sub(hi)))
        .max()
        .unwrap_or(0);

    let mut overlap = Vec::with_capacity(d.n_sets());
    let mut duplicate_alternative = Vec::with_capacity(d.n_sets());
    for k in 0..d.n_sets() {
        let set = d.set(k);
        let mut total = 0;
        for f in 0..nf {
            let distinct: HashSet<u8> = set.chunks(nf).map(|a| a[f]).collect();
            total += d.n_alternatives - distinct.len();
        }
        overlap.push(total);
        let alts: HashSet<&[u8]> = set.chunks(nf).collect();
        duplicate_alternative.push(alts.len() < d.n_alternatives);
    }

    let mut max_dev: f64 = 0.0;
    for f1 in 0..nf {
        for f2 in f1 + 1..nf {
            let mut joint = vec![vec![0usize; d.n_levels]; d.n_levels];
            for alt in d.levels.chunks(nf) {
                joint[alt[f1] as usize][alt[f2] as usize] += 1;
            }
            for a in 0..d.n_levels {
                for b in 0..d.n_levels {
                    let expected = (level_counts[f1][a] * level_counts[f2][b]) as f64 / n_rows as f64;
                    max_dev = max_dev.max((joint[a][b] as f64 - expected).abs());
                }
            }
        }
    }

    let derr = d_error(d).ok();
    DesignAssessment {
        role: d.role,
        n_sets: d.n_sets(),
        level_counts,
        max_balance_deviation,
        overlap,
        duplicate_alternative,
        max_cooccurrence_deviation: max_dev,
        d_error: derr,
        d_efficiency: derr.and_then(|e| relative_efficiency(d, e)),
    }
}

fn count_duplicates(sets: &[Vec<usize>]) -> usize {
    let mut seen = HashSet::new();
    sets.iter().filter(|s| !seen.insert(s.to_vec())).count()
}

pub fn assess_design(train: &ChoiceDesign, holdout: &ChoiceDesign) -> DesignReport {
    let codec = ProductCodec { n_features: train.n_features, n_levels: train.n_levels };
    let tc = train.canonical_sets(&codec);
    let hc = holdout.canonical_sets(&codec);
    let train_set: HashSet<&Vec<usize>> = tc.iter().collect();
    DesignReport {
        train: assess_one(train),
        holdout: assess_one(holdout),
        duplicate_sets_within_train: count_duplicates(&tc),
        duplicate_sets_within_holdout: count_duplicates(&hc),
        duplicate_sets_across: hc.iter().filter(|s| train_set.contains(s)).count(),
    }
}

impl fmt::Display for DesignAssessment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "  {:?}: {} sets", self.role, self.n_sets)?;
        match (self.d_error, self.d_efficiency) {
            (Some(e), Some(eff)) => writeln!(f, "    D-error {e:.6}, D-efficiency {eff:.2}%")?,
            (Some(e), None) => writeln!(f, "    D-error {e:.6}")?,
            _ => writeln!(f, "    D-error undefined (singular information matrix)")?,
        }
        writeln!(f, "    max balance deviation {}", self.max_balance_deviation)?;
        for (feat, counts) in self.level_counts.iter().enumerate() {
            writeln!(f, "    feature {feat} level counts {counts:?}")?;
        }
        writeln!(f, "    total overlap {}", self.overlap.iter().sum::<usize>())?;
        writeln!(
            f,
            "    sets with duplicate alternatives {}",
            self.duplicate_alternative.iter().filter(|&&d| d).count()
        )?;
        writeln!(f, "    max co-occurrence deviation {:.3}", self.max_cooccurrence_deviation)
    }
}

impl fmt::Display for DesignReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "design assessment")?;
        write!(f, "{}", self.train)?;
        write!(f, "{}", self.holdout)?;
        writeln!(
            f,
            "  duplicate sets: train {}, holdout {}, across {}",
            self.duplicate_sets_within_train, self.duplicate_sets_within_holdout, self.duplicate_sets_across
        )
    }
}

/// `role,set,alternative,feature,level` rows (all indices 0-based).
pub fn write_design_csv<W: std::io::Write>(designs: &[&ChoiceDesign], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["role", "set", "alternative", "feature", "level"])?;
    for d in designs {
        let role = match d.role {
            DesignRole::Train => "train",
            DesignRole::Holdout => "holdout",
        };
        for k in 0..d.n_sets() {
            for j in 0..d.n_alternatives {
                for (f, lv) in d.alternative(k, j).iter().enumerate() {
                    w.write_record([role.to_string(), k.to_string(), j.to_string(), f.to_string(), lv.to_string()])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_design_csv<R: std::io::Read>(
    input: R,
    n_levels: usize,
) -> Result<(ChoiceDesign, ChoiceDesign)> {
    let mut rows: Vec<(DesignRole, usize, usize, usize, u8)> = Vec::new();
    let mut rdr = csv::Reader::from_reader(input);
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<usize> {
            rec.get(i)
                .ok_or_else(|| Error::Parse("short design row".into()))?
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("design csv: {e}")))
        };
        let role = match rec.get(0).map(str::trim) {
            Some("train") => DesignRole::Train,
            Some("holdout") => DesignRole::Holdout,
            other => return Err(Error::Parse(format!("unknown design role {other:?}"))),
        };
        rows.push((role, parse(1)?, parse(2)?, parse(3)?, parse(4)? as u8));
    }
    let build = |role: DesignRole| -> Result<ChoiceDesign> {
        let sub: Vec<_> = rows.iter().filter(|r| r.0 == role).collect();
        let n_sets = sub.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let n_alt = sub.iter().map(|r| r.2 + 1).max().unwrap_or(0);
        let nf = sub.iter().map(|r| r.3 + 1).max().unwrap_or(0);
        if sub.len() != n_sets * n_alt * nf {
            return Err(Error::Parse("design csv is not a complete grid".into()));
        }
        let mut levels = vec![0u8; sub.len()];
        for r in sub {
            levels[(r.1 * n_alt + r.2) * nf + r.3] = r.4;
        }
        ChoiceDesign::from_levels(nf, n_levels, n_alt.max(1), levels, role)
    };
    Ok((build(DesignRole::Train)?, build(DesignRole::Holdout)?))
}
