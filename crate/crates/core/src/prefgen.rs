//! Synthetic individual part-worths with empirically motivated means and
//! variances, and optional per-feature monotonicity.
//!
//! Parameters are dummy coded relative to level 0 of every feature. Parameter
//! `o` of feature `l`, level `lv >= 1` sits at column `l * (m - 1) + lv - 1`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stage, stage_rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceProfileParams {
    pub kappa: f64,
    pub theta: f64,
    pub zeta1: f64,
    pub xi1: f64,
    pub zeta2: f64,
    pub xi2: f64,
}

impl VarianceProfileParams {
    pub const HOMOGENEOUS: Self =
        Self { kappa: 0.7, theta: 1.5, zeta1: 0.08, xi1: 0.4, zeta2: 9.0, xi2: 11.0 };
    pub const HETEROGENEOUS: Self =
        Self { kappa: 0.7, theta: 4.5, zeta1: 0.2, xi1: 2.0, zeta2: 13.0, xi2: 18.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = self.kappa > 0.0
            && self.theta > 0.0
            && self.zeta1 <= self.xi1
            && self.zeta2 <= self.xi2
            && self.zeta1 <= self.zeta2
            && self.zeta1 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid variance profile {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceProfile {
    Homogeneous,
    Heterogeneous,
}

impl VarianceProfile {
    pub fn params(self) -> VarianceProfileParams {
        match self {
            VarianceProfile::Homogeneous => VarianceProfileParams::HOMOGENEOUS,
            VarianceProfile::Heterogeneous => VarianceProfileParams::HETEROGENEOUS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSpec {
    pub n_features: usize,
    pub n_levels: usize,
    pub n_respondents: usize,
    pub variance_profile: VarianceProfile,
    /// 0-based feature indices whose part-worths must be non-increasing in level.
    pub monotone_features: Vec<usize>,
    pub seed: u64,
}

impl PreferenceSpec {
    pub fn n_params(&self) -> usize {
        self.n_features * (self.n_levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_levels < 2 || self.n_respondents == 0 {
            return Err(Error::dim(format!(
                "need l >= 1, m >= 2, i >= 1; got l={}, m={}, i={}",
                self.n_features, self.n_levels, self.n_respondents
            )));
        }
        if let Some(&bad) = self.monotone_features.iter().find(|&&f| f >= self.n_features) {
            return Err(Error::param(format!("monotone feature {bad} out of range")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSet {
    /// Respondents x parameters.
    pub b: DMatrix<f64>,
    /// Generating mean of every slot in slot order (see [`PreferenceSet::slot_feature`]).
    pub hypermeans: Vec<f64>,
    /// Generating variance of every slot in slot order.
    pub variances: Vec<f64>,
    /// Feature owning each slot. Monotone features own `m` slots, others `m - 1`.
    pub slot_feature: Vec<usize>,
    pub n_params: usize,
    pub monotone_features: Vec<usize>,
    pub spec: PreferenceSpec,
}

impl PreferenceSet {
    pub fn n_respondents(&self) -> usize {
        self.b.nrows()
    }

    /// Generating slot of a parameter column, if the column is a direct draw
    /// (i.e. not part of a monotone block).
    pub fn param_slot(&self, param: usize) -> Option<usize> {
        let m1 = self.spec.n_levels - 1;
        let feature = param / m1;
        if self.monotone_features.contains(&feature) {
            return None;
        }
        let first = self.slot_feature.iter().position(|&f| f == feature)?;
        Some(first + param % m1)
    }

    /// Whether every respondent satisfies the monotone constraint.
    pub fn satisfies_monotonicity(&self) -> bool {
        let m1 = self.spec.n_levels - 1;
        (0..self.b.nrows()).all(|i| {
            let row: Vec<f64> = self.b.row(i).iter().copied().collect();
            self.monotone_features
                .iter()
                .all(|&f| is_monotone_block(&row[f * m1..(f + 1) * m1]))
        })
    }
}

/// Non-positive and non-increasing in level index.
pub fn is_monotone_block(block: &[f64]) -> bool {
    block.first().is_none_or(|&v| v <= 0.0) && block.windows(2).all(|w| w[1] <= w[0])
}

/// `⌊x⌉` with ties to even.
pub fn round_half_even(x: f64) -> i64 {
    x.round_ties_even() as i64
}

/// Counts drawn from `U(-5,-2)`, `U(-2,2)` and `U(2,5)`.
pub fn hypermean_counts(o: usize) -> Result<(usize, usize, usize)> {
    let tail = round_half_even(0.1 * o as f64);
    let mid = o as i64 - 2 * tail;
    if o == 0 || mid < 0 {
        return Err(Error::dim(format!("cannot split {o} hypermeans")));
    }
    Ok((tail as usize, mid as usize, tail as usize))
}

pub fn sample_hypermeans<R: Rng + ?Sized>(o: usize, rng: &mut R) -> Result<Vec<f64>> {
    let (low, mid, high) = hypermean_counts(o)?;
    let mut out = Vec::with_capacity(o);
    for (count, lo, hi) in [(low, -5.0, -2.0), (mid, -2.0, 2.0), (high, 2.0, 5.0)] {
        let dist = Uniform::new(lo, hi).expect("static bounds");
        out.extend((0..count).map(|_| dist.sample(rng)));
    }
    Ok(out)
}

/// Realizations of `min(Y + Z1, Z2)` with `Y ~ Γ(κ, θ)`, `Z1 ~ U(ζ1, ξ1)`, `Z2 ~ U(ζ2, ξ2)`.
pub fn sample_variances<R: Rng + ?Sized>(
    o: usize,
    profile: &VarianceProfileParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    profile.validate()?;
    let gamma = Gamma::new(profile.kappa, profile.theta).map_err(|e| Error::param(e.to_string()))?;
    let z1 = uniform_or_const(profile.zeta1, profile.xi1);
    let z2 = uniform_or_const(profile.zeta2, profile.xi2);
    Ok((0..o)
        .map(|_| {
            let y = gamma.sample(rng);
            let lower = z1(rng);
            let upper = z2(rng);
            (y + lower).min(upper)
        })
        .collect())
}

fn uniform_or_const<R: Rng + ?Sized>(lo: f64, hi: f64) -> impl Fn(&mut R) -> f64 {
    let dist = (lo < hi).then(|| Uniform::new(lo, hi).expect("checked bounds"));
    move |rng: &mut R| dist.map_or(lo, |d| d.sample(rng))
}

pub fn generate_preferences(spec: &PreferenceSpec) -> Result<PreferenceSet> {
    generate_with_profile(spec, &spec.variance_profile.params())
}

pub fn generate_with_profile(
    spec: &PreferenceSpec,
    profile: &VarianceProfileParams,
) -> Result<PreferenceSet> {
    spec.validate()?;
    let mut rng = stage_rng(spec.seed, stage::PREFERENCES);
    let (l, m, n_resp) = (spec.n_features, spec.n_levels, spec.n_respondents);
    let o = spec.n_params();

    let mut monotone = spec.monotone_features.clone();
    monotone.sort_unstable();
    monotone.dedup();

    let slot_feature: Vec<usize> = (0..l)
        .flat_map(|f| {
            let width = if monotone.contains(&f) { m } else { m - 1 };
            std::iter::repeat_n(f, width)
        })
        .collect();
    let n_slots = slot_feature.len();

    let means = sample_hypermeans(n_slots, &mut rng)?;
    let vars = sample_variances(n_slots, profile, &mut rng)?;
    let mut order: Vec<usize> = (0..n_slots).collect();
    order.shuffle(&mut rng);
    let hypermeans: Vec<f64> = order.iter().map(|&k| means[k]).collect();
    let variances: Vec<f64> = order.iter().map(|&k| vars[k]).collect();

    // slot-major draws: columns[s][i]
    let columns: Vec<Vec<f64>> = (0..n_slots)
        .map(|s| {
            let normal = Normal::new(hypermeans[s], variances[s].sqrt())
                .map_err(|e| Error::param(e.to_string()))?;
            Ok((0..n_resp).map(|_| normal.sample(&mut rng)).collect())
        })
        .collect::<Result<_>>()?;

    let mut b = DMatrix::<f64>::zeros(n_resp, o);
    let mut slot = 0;
    let mut block = vec![0.0; m];
    for f in 0..l {
        let base = f * (m - 1);
        if monotone.contains(&f) {
            for i in 0..n_resp {
                for (k, v) in block.iter_mut().enumerate() {
                    *v = columns[slot + k][i];
                }
                block.sort_unstable_by(|a, b| b.total_cmp(a));
                let reference = block[0];
                for k in 1..m {
                    b[(i, base + k - 1)] = block[k] - reference;
                }
            }
            slot += m;
        } else {
            for k in 0..m - 1 {
                for i in 0..n_resp {
                    b[(i, base + k)] = columns[slot + k][i];
                }
            }
            slot += m - 1;
        }
    }

    Ok(PreferenceSet {
        b,
        hypermeans,
        variances,
        slot_feature,
        n_params: o,
        monotone_features: monotone,
        spec: spec.clone(),
    })
}

/// `respondent,parameter,value` rows.
pub fn write_preferences_csv<W: std::io::Write>(prefs: &PreferenceSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["respondent", "parameter", "value"])?;
    for i in 0..prefs.b.nrows() {
        for p in 0..prefs.b.ncols() {
            w.write_record([i.to_string(), p.to_string(), prefs.b[(i, p)].to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
