//! Gumbel error calibration to a target median relative error (MRGE) and
//! first-choice response simulation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::design::ChoiceDesign;
use crate::error::{Error, Result};
use crate::rng::{rng_at, stage};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningSettings {
    /// Learning rate `d`.
    pub learning_rate: f64,
    /// Tolerance `t` on |achieved - target|.
    pub tolerance: f64,
    /// Iteration cap `r_max`.
    pub max_iter: usize,
}

impl Default for TuningSettings {
    fn default() -> Self {
        Self { learning_rate: 0.5, tolerance: 1e-5, max_iter: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCalibration {
    pub target_mrge: f64,
    pub learning_rate: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub achieved_mrge: f64,
    /// Gumbel scale `s = σ√6/π`.
    pub scale: f64,
    /// Gumbel location `λ = -sγ`.
    pub location: f64,
    pub sigma: f64,
    pub iterations_used: usize,
    pub seed: u64,
}

/// Utilities over a stack of designs (sets of every design in order).
#[derive(Clone, Debug, PartialEq)]
pub struct Utilities {
    pub n_respondents: usize,
    pub n_sets: usize,
    pub n_alternatives: usize,
    /// `respondents x sets x alternatives`.
    pub raw: Vec<f64>,
    /// `raw` minus each respondent's mean over all of its cells.
    pub centered: Vec<f64>,
}

impl Utilities {
    pub fn abs_centered(&self) -> Vec<f64> {
        self.centered.iter().map(|v| v.abs()).collect()
    }
}

fn check_design(b: &DMatrix<f64>, designs: &[&ChoiceDesign]) -> Result<(usize, usize)> {
    let first = designs.first().ok_or_else(|| Error::dim("no design given"))?;
    for d in designs {
        if d.n_params() != b.ncols() || d.n_alternatives != first.n_alternatives {
            return Err(Error::dim(format!(
                "design has {} parameters / {} alternatives, preferences have {} columns",
                d.n_params(),
                d.n_alternatives,
                b.ncols()
            )));
        }
    }
    Ok((designs.iter().map(|d| d.n_sets()).sum(), first.n_alternatives))
}

/// `v_ijk = β_i · x_jk` under dummy coding, for the sets of every design in order.
pub fn deterministic_utilities(b: &DMatrix<f64>, designs: &[&ChoiceDesign]) -> Result<Utilities> {
    let (n_sets, n_alt) = check_design(b, designs)?;
    let n_resp = b.nrows();
    let m1 = designs[0].n_levels - 1;
    let mut raw = Vec::with_capacity(n_resp * n_sets * n_alt);
    for i in 0..n_resp {
        for d in designs {
            for alt in d.levels.chunks(d.n_features) {
                let mut v = 0.0;
                for (f, &lv) in alt.iter().enumerate() {
                    if lv > 0 {
                        v += b[(i, f * m1 + lv as usize - 1)];
                    }
                }
                raw.push(v);
            }
        }
    }
    let cells = n_sets * n_alt;
    let mut centered = raw.clone();
    for row in centered.chunks_mut(cells) {
        let mean = row.iter().sum::<f64>() / cells as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(Utilities { n_respondents: n_resp, n_sets, n_alternatives: n_alt, raw, centered })
}

/// Median; the mean of the two middle values for an even count.
pub fn median(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let (_, &mut upper, _) = values.select_nth_unstable_by(n / 2, cmp);
    if n % 2 == 1 {
        return Some(upper);
    }
    let lower = values[..n / 2].iter().copied().max_by(cmp).expect("non-empty lower half");
    Some(0.5 * (lower + upper))
}

/// `med(|ε| ⊘ v_abs)` over cells with `v_abs != 0`.
pub fn mrge(errors: &[f64], v_abs: &[f64]) -> Option<f64> {
    let mut q: Vec<f64> =
        errors.iter().zip(v_abs).filter(|(_, &v)| v != 0.0).map(|(e, v)| e.abs() / v).collect();
    median(&mut q)
}

pub fn gumbel_scale(sigma: f64) -> f64 {
    sigma * 6f64.sqrt() / std::f64::consts::PI
}

/// Scales a zero-mean Gumbel error until its MRGE against `v_abs` is within
/// tolerance of `target`. Returns the calibration and the accepted errors.
pub fn tune_mrge<R: Rng + ?Sized>(
    v_abs: &[f64],
    target: f64,
    settings: TuningSettings,
    rng: &mut R,
) -> Result<(ErrorCalibration, Vec<f64>)> {
    if v_abs.is_empty() {
        return Err(Error::dim("no utilities to calibrate against"));
    }
    if !(target > 0.0) {
        return Err(Error::param(format!("MRGE target must be positive, got {target}")));
    }
    let mean_abs = v_abs.iter().sum::<f64>() / v_abs.len() as f64;
    if !(mean_abs > 0.0) {
        return Err(Error::param("all deterministic utilities are zero"));
    }
    let mut h = target;
    let mut trajectory = Vec::new();
    let mut eps = vec![0.0; v_abs.len()];
    let mut r = 0;
    loop {
        r += 1;
        if r > settings.max_iter {
            return Err(Error::CalibrationFailure {
                iterations: settings.max_iter,
                target,
                last_mrge: trajectory.last().copied().unwrap_or(f64::NAN),
                trajectory,
            });
        }
        let sigma = h * mean_abs;
        let scale = gumbel_scale(sigma);
        let location = -scale * EULER_GAMMA;
        let dist = Gumbel::new(location, scale).map_err(|e| Error::param(e.to_string()))?;
        for e in eps.iter_mut() {
            *e = dist.sample(rng);
        }
        let actual = mrge(&eps, v_abs).ok_or_else(|| Error::param("every utility is exactly zero"))?;
        trajectory.push(actual);
        if (actual - target).abs() <= settings.tolerance {
            let cal = ErrorCalibration {
                target_mrge: target,
                learning_rate: settings.learning_rate,
                tolerance: settings.tolerance,
                max_iter: settings.max_iter,
                achieved_mrge: actual,
                scale,
                location,
                sigma,
                iterations_used: r,
                seed: 0,
            };
            return Ok((cal, eps));
        }
        h += (target - actual) * settings.learning_rate;
        if h < 0.0 {
            h = rng.random::<f64>();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceData {
    pub n_respondents: usize,
    pub n_sets: usize,
    pub n_alternatives: usize,
    /// Chosen alternative per (respondent, set).
    pub choices: Vec<u8>,
    /// `respondents x sets x alternatives`.
    pub errors: Vec<f64>,
    pub total_utilities: Vec<f64>,
}

impl ChoiceData {
    pub fn chosen(&self, respondent: usize, set: usize) -> usize {
        self.choices[respondent * self.n_sets + set] as usize
    }

    /// First-choice indicator `f_ijk`.
    pub fn f(&self, respondent: usize, set: usize, alt: usize) -> u8 {
        u8::from(self.chosen(respondent, set) == alt)
    }

    /// Sub-range of sets (e.g. the hold-out part of a stacked simulation).
    pub fn slice_sets(&self, start: usize, len: usize) -> ChoiceData {
        let j = self.n_alternatives;
        let mut out = ChoiceData {
            n_respondents: self.n_respondents,
            n_sets: len,
            n_alternatives: j,
            choices: Vec::with_capacity(self.n_respondents * len),
            errors: Vec::with_capacity(self.n_respondents * len * j),
            total_utilities: Vec::with_capacity(self.n_respondents * len * j),
        };
        for i in 0..self.n_respondents {
            let c0 = i * self.n_sets + start;
            out.choices.extend_from_slice(&self.choices[c0..c0 + len]);
            out.errors.extend_from_slice(&self.errors[c0 * j..(c0 + len) * j]);
            out.total_utilities.extend_from_slice(&self.total_utilities[c0 * j..(c0 + len) * j]);
        }
        out
    }
}

/// First choices `argmax_j (v_ijk + ε_ijk)`; exact ties are an error.
pub fn simulate_choices(utilities: &Utilities, errors: &[f64]) -> Result<ChoiceData> {
    if errors.len() != utilities.raw.len() {
        return Err(Error::dim(format!(
            "{} errors for {} utility cells",
            errors.len(),
            utilities.raw.len()
        )));
    }
    let j = utilities.n_alternatives;
    let total: Vec<f64> = utilities.raw.iter().zip(errors).map(|(v, e)| v + e).collect();
    let mut choices = Vec::with_capacity(total.len() / j);
    for (cell, set) in total.chunks(j).enumerate() {
        let mut best = 0;
        let mut tie = false;
        for (a, &u) in set.iter().enumerate().skip(1) {
            if u > set[best] {
                best = a;
                tie = false;
            } else if u == set[best] {
                tie = true;
            }
        }
        if tie {
            return Err(Error::ResponseTie {
                respondent: cell / utilities.n_sets,
                set: cell % utilities.n_sets,
            });
        }
        choices.push(best as u8);
    }
    Ok(ChoiceData {
        n_respondents: utilities.n_respondents,
        n_sets: utilities.n_sets,
        n_alternatives: j,
        choices,
        errors: errors.to_vec(),
        total_utilities: total,
    })
}

/// Calibrates on training and hold-out cells together, then simulates both.
pub fn simulate_responses(
    b: &DMatrix<f64>,
    train: &ChoiceDesign,
    holdout: &ChoiceDesign,
    target: f64,
    settings: TuningSettings,
    seed: u64,
) -> Result<(ErrorCalibration, ChoiceData, ChoiceData)> {
    let designs: Vec<&ChoiceDesign> =
        if holdout.n_sets() > 0 { vec![train, holdout] } else { vec![train] };
    let utilities = deterministic_utilities(b, &designs)?;
    let mut rng = rng_at(seed, &[stage::ERRORS]);
    let (mut cal, eps) = tune_mrge(&utilities.abs_centered(), target, settings, &mut rng)?;
    cal.seed = seed;
    let all = simulate_choices(&utilities, &eps)?;
    let train_data = all.slice_sets(0, train.n_sets());
    let holdout_data = all.slice_sets(train.n_sets(), holdout.n_sets());
    Ok((cal, train_data, holdout_data))
}

/// `respondent,set,alternative,chosen,total_utility` rows.
pub fn write_choices_csv<W: std::io::Write>(data: &ChoiceData, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["respondent", "set", "alternative", "chosen", "total_utility"])?;
    for i in 0..data.n_respondents {
        for k in 0..data.n_sets {
            for j in 0..data.n_alternatives {
                let u = data.total_utilities[(i * data.n_sets + k) * data.n_alternatives + j];
                w.write_record([
                    i.to_string(),
                    k.to_string(),
                    j.to_string(),
                    data.f(i, k, j).to_string(),
                    format!("{u:?}"),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignRole;
    use crate::rng::StageRng;
    use rand::SeedableRng;

    fn one_set_design() -> ChoiceDesign {
        // 2 features, 5 levels, alternatives (j, (j + 2) % 5)
        let levels = (0..5).flat_map(|j| [j as u8, ((j + 2) % 5) as u8]).collect();
        ChoiceDesign::from_levels(2, 5, 5, levels, DesignRole::Train).unwrap()
    }

    #[test]
    fn zero_preferences_give_zero_utility() {
        let b = DMatrix::zeros(3, 8);
        let u = deterministic_utilities(&b, &[&one_set_design()]).unwrap();
        assert!(u.raw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn utilities_match_manual_sum() {
        let b = DMatrix::from_row_slice(1, 8, &[-1.0, -2.0, -3.0, -4.0, 0.5, 1.5, 2.5, 3.5]);
        let u = deterministic_utilities(&b, &[&one_set_design()]).unwrap();
        // alternative 0 = levels (0, 2): 0 + b[4 + 1] = 1.5
        // alternative 3 = levels (3, 0): b[2] + 0 = -3
        // alternative 4 = levels (4, 1): b[3] + b[4] = -3.5
        assert_eq!(u.raw, vec![1.5, -1.0 + 2.5, -2.0 + 3.5, -3.0, -4.0 + 0.5]);
        let mean = u.raw.iter().sum::<f64>() / 5.0;
        assert!((u.centered[0] - (1.5 - mean)).abs() < 1e-15);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn mrge_drops_undefined_quotients() {
        let e = [1.0, -2.0, 100.0];
        let v = [1.0, 1.0, 0.0];
        assert_eq!(mrge(&e, &v), Some(1.5));
    }

    #[test]
    fn tuning_hits_targets() {
        let mut rng = StageRng::seed_from_u64(1);
        let v: Vec<f64> = (0..5000).map(|_| rng.random::<f64>() * 4.0).collect();
        for target in [0.125, 0.5] {
            let (cal, eps) = tune_mrge(&v, target, TuningSettings::default(), &mut rng).unwrap();
            assert!((cal.achieved_mrge - target).abs() <= 1e-5);
            assert_eq!(mrge(&eps, &v), Some(cal.achieved_mrge));
            assert_eq!(cal.scale, gumbel_scale(cal.sigma));
            assert_eq!(cal.location, -cal.scale * EULER_GAMMA);
        }
    }

    #[test]
    fn constant_utilities_match_folded_gumbel_median() {
        let c = 2.0;
        let v = vec![c; 20_001];
        let mut rng = StageRng::seed_from_u64(7);
        let (cal, _) = tune_mrge(&v, 0.3, TuningSettings::default(), &mut rng).unwrap();
        // Monte Carlo oracle for med|ε| under Gumbel(-sγ, s)
        let dist = Gumbel::new(cal.location, cal.scale).unwrap();
        let mut abs: Vec<f64> = (0..1_000_000).map(|_| dist.sample(&mut rng).abs()).collect();
        let med = median(&mut abs).unwrap();
        assert!(((med / c) - cal.achieved_mrge).abs() / cal.achieved_mrge < 0.01);
    }

    #[test]
    fn failure_carries_trajectory() {
        let v = vec![1.0; 100];
        let mut rng = StageRng::seed_from_u64(3);
        let s = TuningSettings { learning_rate: 0.5, tolerance: 1e-15, max_iter: 5 };
        match tune_mrge(&v, 0.2, s, &mut rng) {
            Err(Error::CalibrationFailure { trajectory, iterations, .. }) => {
                assert_eq!(iterations, 5);
                assert_eq!(trajectory.len(), 5);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    fn toy_utilities(raw: Vec<f64>, n_resp: usize, n_sets: usize, n_alt: usize) -> Utilities {
        Utilities { n_respondents: n_resp, n_sets, n_alternatives: n_alt, centered: raw.clone(), raw }
    }

    #[test]
    fn hand_argmax() {
        // 3 respondents x 2 sets x 3 alternatives
        let raw = vec![
            1.0, 2.0, 0.0, /**/ 0.0, 0.0, 5.0, //
            3.0, 1.0, 1.0, /**/ -1.0, 0.0, -2.0, //
            0.0, 0.1, 0.2, /**/ 4.0, 4.5, 1.0,
        ];
        let eps = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0];
        let data = simulate_choices(&toy_utilities(raw, 3, 2, 3), &eps).unwrap();
        assert_eq!(data.choices, vec![1, 2, 0, 1, 0, 1]);
        for i in 0..3 {
            for k in 0..2 {
                assert_eq!((0..3).map(|j| data.f(i, k, j) as usize).sum::<usize>(), 1);
            }
        }
    }

    #[test]
    fn constant_shift_keeps_choices() {
        let mut rng = StageRng::seed_from_u64(5);
        let raw: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let eps = vec![0.0; 60];
        let a = simulate_choices(&toy_utilities(raw.clone(), 4, 3, 5), &eps).unwrap();
        let shifted: Vec<f64> = raw.iter().map(|v| v + 3.0).collect();
        let b = simulate_choices(&toy_utilities(shifted, 4, 3, 5), &eps).unwrap();
        assert_eq!(a.choices, b.choices);
    }

    #[test]
    fn exact_tie_is_reported() {
        let raw = vec![1.0, 1.0, 0.0];
        let err = simulate_choices(&toy_utilities(raw, 1, 1, 3), &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::ResponseTie { respondent: 0, set: 0 }));
    }

    #[test]
    fn errors_are_zero_centred() {
        let mut rng = StageRng::seed_from_u64(11);
        let v: Vec<f64> = (0..50_000).map(|_| rng.random::<f64>() + 0.5).collect();
        let (cal, eps) = tune_mrge(&v, 0.5, TuningSettings::default(), &mut rng).unwrap();
        let mean = eps.iter().sum::<f64>() / eps.len() as f64;
        assert!(mean.abs() <= 4.0 * cal.sigma / (eps.len() as f64).sqrt());
    }
}
