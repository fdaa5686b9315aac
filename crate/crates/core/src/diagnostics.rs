//! Convergence (PSRF), monotone draw filtering with thinning, interpolated
//! credible intervals, and recovery / predictive accuracy measures.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::design::ChoiceDesign;
use crate::error::{Error, Result};
use crate::hbmxl::{logit_from_utilities, McmcChain};
use crate::market::ChoiceRule;
use crate::prefgen::is_monotone_block;
use crate::respsim::ChoiceData;

/// Individual draws, laid out `draws x respondents x o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawTensor {
    pub n_respondents: usize,
    pub n_params: usize,
    pub n_draws: usize,
    pub draws: Vec<f64>,
    pub thinning_factor: usize,
    /// Iterations of the source chain (burn-in included).
    pub source_chain_length: usize,
}

impl DrawTensor {
    /// A single "draw" holding a point estimate (`respondents x o`).
    pub fn from_matrix(b: &DMatrix<f64>) -> Self {
        let mut draws = Vec::with_capacity(b.len());
        for i in 0..b.nrows() {
            draws.extend(b.row(i).iter());
        }
        Self {
            n_respondents: b.nrows(),
            n_params: b.ncols(),
            n_draws: 1,
            draws,
            thinning_factor: 1,
            source_chain_length: 0,
        }
    }

    pub fn draw(&self, n: usize, respondent: usize) -> &[f64] {
        let start = (n * self.n_respondents + respondent) * self.n_params;
        &self.draws[start..start + self.n_params]
    }

    /// Mean over draws (`respondents x o`).
    pub fn mean(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_respondents, self.n_params);
        for n in 0..self.n_draws {
            for i in 0..self.n_respondents {
                for (p, v) in self.draw(n, i).iter().enumerate() {
                    out[(i, p)] += v;
                }
            }
        }
        out / self.n_draws as f64
    }
}

/// `R̂ = √(((n−1)/n·W + B/n) / W)` over equally long sequences.
pub fn psrf_univariate(seqs: &[&[f64]]) -> Result<f64> {
    let m = seqs.len();
    let n = seqs.first().map_or(0, |s| s.len());
    if m < 2 || n < 2 || seqs.iter().any(|s| s.len() != n) {
        return Err(Error::dim("PSRF needs >= 2 equally long sequences of length >= 2"));
    }
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / n as f64).collect();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if !(w > 0.0) {
        return Err(Error::UndefinedVariance("within-sequence variance is zero".into()));
    }
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    let nf = n as f64;
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

/// Multivariate PSRF, `√((n−1)/n + (m+1)/m · λ_max(W⁻¹B/n))`.
/// `seqs[j]` holds sequence `j` as `n` vectors of dimension `p`.
pub fn psrf_multivariate(seqs: &[Vec<Vec<f64>>]) -> Result<f64> {
    let m = seqs.len();
    let n = seqs.first().map_or(0, |s| s.len());
    let p = seqs.first().and_then(|s| s.first()).map_or(0, |v| v.len());
    if m < 2 || n < 2 || p == 0 || seqs.iter().any(|s| s.len() != n) {
        return Err(Error::dim("multivariate PSRF needs >= 2 equally long sequences"));
    }
    let mut w = DMatrix::<f64>::zeros(p, p);
    let mut means = Vec::with_capacity(m);
    for s in seqs {
        let mut mu = vec![0.0; p];
        for v in s {
            for (a, b) in mu.iter_mut().zip(v) {
                *a += b / n as f64;
            }
        }
        for v in s {
            for r in 0..p {
                for c in 0..p {
                    w[(r, c)] += (v[r] - mu[r]) * (v[c] - mu[c]) / ((n - 1) * m) as f64;
                }
            }
        }
        means.push(mu);
    }
    let mut grand = vec![0.0; p];
    for mu in &means {
        for (g, v) in grand.iter_mut().zip(mu) {
            *g += v / m as f64;
        }
    }
    let mut b_over_n = DMatrix::<f64>::zeros(p, p);
    for mu in &means {
        for r in 0..p {
            for c in 0..p {
                b_over_n[(r, c)] += (mu[r] - grand[r]) * (mu[c] - grand[c]) / (m - 1) as f64;
            }
        }
    }
    let chol = w
        .cholesky()
        .ok_or_else(|| Error::UndefinedVariance("within-sequence covariance is singular".into()))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::UndefinedVariance("within-sequence covariance is singular".into()))?;
    let sym: DMatrix<f64> = &l_inv * b_over_n * l_inv.transpose();
    let sym = (&sym + sym.transpose()) * 0.5;
    let lambda = SymmetricEigen::new(sym).eigenvalues.max();
    let nf = n as f64;
    let mf = m as f64;
    Ok(((nf - 1.0) / nf + (mf + 1.0) / mf * lambda).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsrfReport {
    /// Parameter labels (`betabar[p]`, `sigma[p,p]`).
    pub labels: Vec<String>,
    pub univariate: Vec<f64>,
    pub multivariate: f64,
}

impl PsrfReport {
    pub fn share_at_most(&self, threshold: f64) -> f64 {
        self.univariate.iter().filter(|&&r| r <= threshold).count() as f64 / self.univariate.len() as f64
    }
}

/// Splits both chains after burn-in into halves and compares the four
/// sequences for `β̄` and the diagonal of `Σ`.
pub fn psrf(chain_a: &McmcChain, chain_b: &McmcChain, burn_in: usize) -> Result<PsrfReport> {
    if chain_a.iterations != chain_b.iterations || chain_a.n_params != chain_b.n_params {
        return Err(Error::dim("chains differ in length or dimension"));
    }
    let kept = chain_a.iterations.saturating_sub(burn_in);
    let half = kept / 2;
    if half < 2 {
        return Err(Error::dim(format!("{kept} post burn-in iterations are too few for PSRF")));
    }
    let o = chain_a.n_params;
    // the first post burn-in iteration is dropped when the count is odd
    let start = chain_a.iterations - 2 * half;
    let param = |c: &McmcChain, t: usize, p: usize| -> f64 {
        if p < o {
            c.betabar(t)[p]
        } else {
            let d = p - o;
            c.sigma_draws[t * o * o + d * o + d]
        }
    };
    let n_par = 2 * o;
    let ranges = [(chain_a, start), (chain_a, start + half), (chain_b, start), (chain_b, start + half)];
    let seqs: Vec<Vec<Vec<f64>>> = ranges
        .iter()
        .map(|&(c, s)| (s..s + half).map(|t| (0..n_par).map(|p| param(c, t, p)).collect()).collect())
        .collect();
    let mut univariate = Vec::with_capacity(n_par);
    let mut labels = Vec::with_capacity(n_par);
    for p in 0..n_par {
        let cols: Vec<Vec<f64>> = seqs.iter().map(|s| s.iter().map(|v| v[p]).collect()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        univariate.push(psrf_univariate(&refs)?);
        labels.push(if p < o { format!("betabar[{p}]") } else { format!("sigma[{0},{0}]", p - o) });
    }
    Ok(PsrfReport { labels, univariate, multivariate: psrf_multivariate(&seqs)? })
}

/// Thins the primary chain from its last kept iteration, then collects for
/// every respondent the `required_n` latest draws that satisfy monotonicity on
/// the flagged features. `thinning` must be a multiple of the chain's stride.
pub fn filter_monotone_draws(
    chain: &McmcChain,
    n_levels: usize,
    monotone_features: &[usize],
    required_n: usize,
    thinning: usize,
) -> Result<DrawTensor> {
    let stride = chain.settings.beta_stride;
    if thinning == 0 || thinning % stride != 0 {
        return Err(Error::param(format!("thinning {thinning} is not a multiple of the stored stride {stride}")));
    }
    if required_n == 0 {
        return Err(Error::param("required_n must be positive"));
    }
    let step = thinning / stride;
    let kept = chain.kept_stored();
    let thinned: Vec<usize> = kept.clone().rev().step_by(step).collect();
    let m1 = n_levels - 1;
    let o = chain.n_params;
    let n_resp = chain.n_respondents;
    let mut per_resp: Vec<Vec<usize>> = Vec::with_capacity(n_resp);
    let mut worst: Option<(usize, usize, f64)> = None;
    for i in 0..n_resp {
        let mut picked = Vec::with_capacity(required_n);
        let mut passing = 0usize;
        for &s in &thinned {
            let d = chain.beta_draw(s, i);
            if monotone_features.iter().all(|&f| is_monotone_block(&d[f * m1..(f + 1) * m1])) {
                passing += 1;
                if picked.len() < required_n {
                    picked.push(s);
                }
            }
        }
        if picked.len() < required_n {
            let frac = passing as f64 / thinned.len().max(1) as f64;
            if worst.is_none_or(|w| frac < w.2) {
                worst = Some((i, picked.len(), frac));
            }
        }
        picked.reverse();
        per_resp.push(picked);
    }
    if let Some((respondent, found, frac)) = worst {
        let estimated_length = (frac > 0.0).then(|| (required_n as f64 * thinning as f64 / frac).ceil() as usize);
        return Err(Error::NeedsLongerChain {
            respondent,
            found,
            required: required_n,
            acceptance_fraction: frac,
            estimated_length,
        });
    }
    let mut draws = Vec::with_capacity(required_n * n_resp * o);
    for n in 0..required_n {
        for (i, picked) in per_resp.iter().enumerate() {
            draws.extend_from_slice(chain.beta_draw(picked[n], i));
        }
    }
    Ok(DrawTensor {
        n_respondents: n_resp,
        n_params: o,
        n_draws: required_n,
        draws,
        thinning_factor: thinning,
        source_chain_length: chain.iterations,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiWeighting {
    /// Weight `(α/2·n) mod 1` on the lower and its complement on the upper order statistic.
    #[default]
    Literal,
    /// Linear interpolation between the two order statistics.
    Linear,
}

/// Fractional 1-based index split into (floor, fraction), rounded to 1e-9 so
/// that products like `0.025 · 500` land on their exact decimal value.
fn split_index(h: f64) -> (usize, f64) {
    let h = (h * 1e9).round() / 1e9;
    let lo = h.floor();
    (lo as usize, h - lo)
}

fn interpolate(sorted: &[f64], h: f64, weighting: CiWeighting) -> f64 {
    let n = sorted.len();
    let (k, frac) = split_index(h);
    let at = |idx: usize| sorted[idx.clamp(1, n) - 1];
    if frac == 0.0 || at(k) == at(k + 1) {
        return at(k);
    }
    match weighting {
        CiWeighting::Literal => frac * at(k) + (1.0 - frac) * at(k + 1),
        CiWeighting::Linear => (1.0 - frac) * at(k) + frac * at(k + 1),
    }
}

/// `(1 − α)` interval from order statistics at `α/2·n` and `(1 − α/2)·n`.
pub fn credible_interval(values: &[f64], alpha: f64, weighting: CiWeighting) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::dim("credible interval needs at least two values"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok((
        interpolate(&sorted, alpha / 2.0 * n, weighting),
        interpolate(&sorted, (1.0 - alpha / 2.0) * n, weighting),
    ))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMeasures {
    pub rmse: Vec<f64>,
    pub corr: Vec<f64>,
    /// Respondents with an undefined correlation, per draw.
    pub excluded: Vec<usize>,
}

/// RMSE of `s·β̂` against the truth and mean per-respondent Pearson r, per draw.
pub fn recovery_measures(draws: &DrawTensor, truth: &DMatrix<f64>, s: f64) -> Result<RecoveryMeasures> {
    if truth.shape() != (draws.n_respondents, draws.n_params) {
        return Err(Error::dim("draws and truth differ in shape"));
    }
    if !(s > 0.0) {
        return Err(Error::param("scale must be positive"));
    }
    let mut out = RecoveryMeasures { rmse: Vec::new(), corr: Vec::new(), excluded: Vec::new() };
    let cells = (draws.n_respondents * draws.n_params) as f64;
    for n in 0..draws.n_draws {
        let mut sq = 0.0;
        let mut corr_sum = 0.0;
        let mut defined = 0;
        for i in 0..draws.n_respondents {
            let est = draws.draw(n, i);
            let tru: Vec<f64> = truth.row(i).iter().copied().collect();
            for (e, t) in est.iter().zip(&tru) {
                sq += (s * e - t).powi(2);
            }
            if let Some(r) = pearson(est, &tru) {
                corr_sum += r;
                defined += 1;
            }
        }
        out.rmse.push((sq / cells).sqrt());
        out.corr.push(if defined > 0 { corr_sum / defined as f64 } else { f64::NAN });
        out.excluded.push(draws.n_respondents - defined);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMeasures {
    pub hitrate: Vec<f64>,
    pub rmse_soc: Vec<f64>,
}

fn dummy_utility(beta: &[f64], alt: &[u8], m1: usize) -> f64 {
    alt.iter()
        .enumerate()
        .filter(|(_, &lv)| lv > 0)
        .map(|(f, &lv)| beta[f * m1 + lv as usize - 1])
        .sum()
}

/// Hit rate (first-choice predictions, `1/|S|` credit on ties) and share of
/// choice RMSE under `rule`, per draw.
pub fn predictive_measures(
    draws: &DrawTensor,
    holdout: &ChoiceDesign,
    choices: &ChoiceData,
    rule: ChoiceRule,
) -> Result<PredictiveMeasures> {
    let (k_sets, j_alt) = (holdout.n_sets(), holdout.n_alternatives);
    if choices.n_sets != k_sets || choices.n_alternatives != j_alt || choices.n_respondents != draws.n_respondents {
        return Err(Error::dim("hold-out design, choices and draws disagree"));
    }
    if k_sets == 0 {
        return Err(Error::dim("no hold-out sets"));
    }
    let m1 = holdout.n_levels - 1;
    let n_resp = draws.n_respondents as f64;
    let mut observed = vec![0.0; k_sets * j_alt];
    for i in 0..draws.n_respondents {
        for k in 0..k_sets {
            observed[k * j_alt + choices.chosen(i, k)] += 1.0 / n_resp;
        }
    }
    let mut out = PredictiveMeasures { hitrate: Vec::new(), rmse_soc: Vec::new() };
    let mut u = vec![0.0; j_alt];
    for n in 0..draws.n_draws {
        let mut hits = 0.0;
        let mut predicted = vec![0.0; k_sets * j_alt];
        for i in 0..draws.n_respondents {
            let beta = draws.draw(n, i);
            let mut hits_i = 0.0;
            for k in 0..k_sets {
                for (j, slot) in u.iter_mut().enumerate() {
                    *slot = dummy_utility(beta, holdout.alternative(k, j), m1);
                }
                let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let winners = u.iter().filter(|&&v| v == max).count() as f64;
                if u[choices.chosen(i, k)] == max {
                    hits_i += 1.0 / winners;
                }
                match rule {
                    ChoiceRule::First => {
                        for (j, &v) in u.iter().enumerate() {
                            if v == max {
                                predicted[k * j_alt + j] += 1.0 / winners / n_resp;
                            }
                        }
                    }
                    ChoiceRule::Logit => {
                        for (j, p) in logit_from_utilities(&u).into_iter().enumerate() {
                            predicted[k * j_alt + j] += p / n_resp;
                        }
                    }
                }
            }
            hits += hits_i / k_sets as f64;
        }
        out.hitrate.push(hits / n_resp);
        let mse = predicted.iter().zip(&observed).map(|(p, o)| (p - o).powi(2)).sum::<f64>()
            / (k_sets * j_alt) as f64;
        out.rmse_soc.push(mse.sqrt());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub per_draw: Vec<f64>,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl MeasureSummary {
    pub fn new(per_draw: Vec<f64>, alpha: f64, weighting: CiWeighting) -> Result<Self> {
        let finite: Vec<f64> = per_draw.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        let (lower, upper) = if finite.len() >= 2 {
            credible_interval(&finite, alpha, weighting)?
        } else {
            (mean, mean)
        };
        Ok(Self { per_draw, mean, lower, upper })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub rmse_rec: MeasureSummary,
    pub corr: MeasureSummary,
    pub hitrate: MeasureSummary,
    pub rmse_soc_first: MeasureSummary,
    pub rmse_soc_logit: MeasureSummary,
    pub psrf: Option<PsrfReport>,
    pub alpha: f64,
}

pub fn assess(
    draws: &DrawTensor,
    truth: &DMatrix<f64>,
    scale: f64,
    holdout: &ChoiceDesign,
    holdout_choices: &ChoiceData,
    psrf: Option<PsrfReport>,
    alpha: f64,
    weighting: CiWeighting,
) -> Result<AssessmentReport> {
    let rec = recovery_measures(draws, truth, scale)?;
    let first = predictive_measures(draws, holdout, holdout_choices, ChoiceRule::First)?;
    let logit = predictive_measures(draws, holdout, holdout_choices, ChoiceRule::Logit)?;
    Ok(AssessmentReport {
        rmse_rec: MeasureSummary::new(rec.rmse, alpha, weighting)?,
        corr: MeasureSummary::new(rec.corr, alpha, weighting)?,
        hitrate: MeasureSummary::new(first.hitrate, alpha, weighting)?,
        rmse_soc_first: MeasureSummary::new(first.rmse_soc, alpha, weighting)?,
        rmse_soc_logit: MeasureSummary::new(logit.rmse_soc, alpha, weighting)?,
        psrf,
        alpha,
    })
}

/// `measure,index,value` rows; `index` is a draw number, `mean`, `lower` or `upper`.
pub fn write_assessment_csv<W: std::io::Write>(report: &AssessmentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["measure", "index", "value"])?;
    let measures = [
        ("rmse_rec", &report.rmse_rec),
        ("corr", &report.corr),
        ("hitrate", &report.hitrate),
        ("rmse_soc_first", &report.rmse_soc_first),
        ("rmse_soc_logit", &report.rmse_soc_logit),
    ];
    for (name, m) in measures {
        for (n, v) in m.per_draw.iter().enumerate() {
            w.write_record([name, &n.to_string(), &format!("{v:?}")])?;
        }
        for (idx, v) in [("mean", m.mean), ("lower", m.lower), ("upper", m.upper)] {
            w.write_record([name, idx, &format!("{v:?}")])?;
        }
    }
    if let Some(p) = &report.psrf {
        for (label, v) in p.labels.iter().zip(&p.univariate) {
            w.write_record(["psrf", label, &format!("{v:?}")])?;
        }
        w.write_record(["psrf", "multivariate", &format!("{:?}", p.multivariate)])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignRole;
    use crate::hbmxl::McmcSettings;
    use crate::rng::StageRng;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn normal_seq(n: usize, shift: f64, rng: &mut StageRng) -> Vec<f64> {
        let d = Normal::new(shift, 1.0).unwrap();
        (0..n).map(|_| d.sample(rng)).collect()
    }

    #[test]
    fn psrf_near_one_for_iid() {
        let mut rng = StageRng::seed_from_u64(1);
        let seqs: Vec<Vec<f64>> = (0..4).map(|_| normal_seq(2000, 0.0, &mut rng)).collect();
        let refs: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
        let r = psrf_univariate(&refs).unwrap();
        assert!((0.99..=1.05).contains(&r), "{r}");
    }

    #[test]
    fn psrf_flags_shifted_chain() {
        let mut rng = StageRng::seed_from_u64(2);
        let seqs = [
            normal_seq(2000, 0.0, &mut rng),
            normal_seq(2000, 0.0, &mut rng),
            normal_seq(2000, 10.0, &mut rng),
            normal_seq(2000, 10.0, &mut rng),
        ];
        let refs: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
        assert!(psrf_univariate(&refs).unwrap() > 1.5);
    }

    #[test]
    fn psrf_constant_is_undefined() {
        let c = vec![1.0; 10];
        assert!(matches!(psrf_univariate(&[&c, &c, &c, &c]), Err(Error::UndefinedVariance(_))));
    }

    #[test]
    fn multivariate_psrf_matches_univariate_scale() {
        let mut rng = StageRng::seed_from_u64(3);
        let seqs: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| (0..1000).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect())
            .collect();
        let r = psrf_multivariate(&seqs).unwrap();
        assert!((0.99..1.05).contains(&r), "{r}");
        let mut shifted = seqs.clone();
        for s in shifted.iter_mut().skip(2) {
            for v in s.iter_mut() {
                v[1] += 5.0;
            }
        }
        assert!(psrf_multivariate(&shifted).unwrap() > 1.5);
    }

    fn fake_chain(draws: Vec<Vec<f64>>, n_resp: usize, stride: usize, burn_in: usize) -> McmcChain {
        let o = draws[0].len() / n_resp;
        let stored = draws.len();
        McmcChain {
            n_respondents: n_resp,
            n_params: o,
            settings: McmcSettings::new(burn_in, stored * stride - burn_in, stride),
            iterations: stored * stride,
            beta_iterations: (1..=stored).map(|s| s * stride).collect(),
            beta_draws: draws.concat(),
            betabar_draws: Vec::new(),
            sigma_draws: Vec::new(),
            acceptance_rate: 0.0,
            step: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn filter_without_constraints_keeps_latest_thinned() {
        // one respondent, o = 2 (one feature, m = 3), stride 1, 20 iterations, burn-in 4
        let draws: Vec<Vec<f64>> = (0..20).map(|t| vec![t as f64, t as f64]).collect();
        let chain = fake_chain(draws, 1, 1, 4);
        let out = filter_monotone_draws(&chain, 3, &[], 3, 2).unwrap();
        assert_eq!(out.draws, vec![15.0, 15.0, 17.0, 17.0, 19.0, 19.0]);
    }

    #[test]
    fn filter_keeps_only_monotone_and_reports_shortfall() {
        let draws: Vec<Vec<f64>> = (0..40)
            .map(|t| if t % 4 == 3 { vec![-1.0, -2.0] } else { vec![1.0, -2.0] })
            .collect();
        let chain = fake_chain(draws, 1, 1, 0);
        let out = filter_monotone_draws(&chain, 3, &[0], 5, 2).unwrap();
        assert_eq!(out.n_draws, 5);
        assert!(out.draws.chunks(2).all(is_monotone_block));
        // thinning 10 visits stored draws 39, 29, 19, 9; two of them pass
        match filter_monotone_draws(&chain, 3, &[0], 500, 10) {
            Err(Error::NeedsLongerChain { found, estimated_length, acceptance_fraction, .. }) => {
                assert_eq!(found, 2);
                assert_eq!(acceptance_fraction, 0.5);
                assert_eq!(estimated_length, Some(10_000));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extrapolation_arithmetic() {
        // a quarter of thinned draws pass
        let draws: Vec<Vec<f64>> = (0..400)
            .map(|t| if (t / 10) % 4 == 0 { vec![-1.0, -2.0] } else { vec![1.0, 0.0] })
            .collect();
        let chain = fake_chain(draws, 1, 1, 0);
        match filter_monotone_draws(&chain, 3, &[0], 500, 10) {
            Err(Error::NeedsLongerChain { estimated_length, acceptance_fraction, .. }) => {
                assert_eq!(acceptance_fraction, 0.25);
                assert_eq!(estimated_length, Some(20_000));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_violating_respondent_needs_longer_chain() {
        let draws: Vec<Vec<f64>> = (0..10).map(|_| vec![-1.0, -2.0, 1.0, 2.0]).collect();
        let chain = fake_chain(draws, 2, 1, 0);
        let err = filter_monotone_draws(&chain, 3, &[0], 2, 1).unwrap_err();
        assert!(matches!(err, Error::NeedsLongerChain { respondent: 1, .. }));
    }

    #[test]
    fn ci_half_weights_at_12_5() {
        let values: Vec<f64> = (1..=500).map(|v| (v * v) as f64).collect();
        for w in [CiWeighting::Literal, CiWeighting::Linear] {
            let (lo, hi) = credible_interval(&values, 0.05, w).unwrap();
            assert_eq!(lo, 0.5 * 144.0 + 0.5 * 169.0);
            assert_eq!(hi, 0.5 * (487.0f64 * 487.0) + 0.5 * (488.0f64 * 488.0));
        }
        let (lo, _) = credible_interval(&values, 0.1, CiWeighting::Literal).unwrap();
        assert_eq!(lo, 625.0);
        assert_eq!(credible_interval(&[3.0; 7], 0.05, CiWeighting::Literal).unwrap(), (3.0, 3.0));
    }

    #[test]
    fn literal_weights_reverse_linear_interpolation() {
        // n = 40, α = 0.0625: lower index 1.25
        let v40: Vec<f64> = (1..=40).map(|v| v as f64).collect();
        let (lo_lit, _) = credible_interval(&v40, 0.0625, CiWeighting::Literal).unwrap();
        let (lo_lin, _) = credible_interval(&v40, 0.0625, CiWeighting::Linear).unwrap();
        assert_eq!(lo_lit, 0.25 * 1.0 + 0.75 * 2.0);
        assert_eq!(lo_lin, 0.75 * 1.0 + 0.25 * 2.0);
    }

    proptest! {
        #[test]
        fn ci_monotone_in_alpha(
            values in prop::collection::vec(-100.0f64..100.0, 10..200),
            a1 in 0.01f64..0.5,
            a2 in 0.01f64..0.5,
        ) {
            let (a1, a2) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let (l1, h1) = credible_interval(&values, a1, CiWeighting::Linear).unwrap();
            let (l2, h2) = credible_interval(&values, a2, CiWeighting::Linear).unwrap();
            prop_assert!(l1 <= l2 + 1e-12 && h1 >= h2 - 1e-12);
        }

        #[test]
        fn literal_ci_monotone_on_half_grid(
            values in prop::collection::vec(-100.0f64..100.0, 100..101),
            k1 in 1usize..40,
            k2 in 1usize..40,
        ) {
            // α/2·n on the half-integer grid: α = k / n
            let (k1, k2) = if k1 < k2 { (k1, k2) } else { (k2, k1) };
            let n = values.len() as f64;
            let (l1, h1) = credible_interval(&values, k1 as f64 / n, CiWeighting::Literal).unwrap();
            let (l2, h2) = credible_interval(&values, k2 as f64 / n, CiWeighting::Literal).unwrap();
            prop_assert!(l1 <= l2 + 1e-12 && h1 >= h2 - 1e-12);
        }

        #[test]
        fn rmse_invariant_under_rescaling(c in 0.1f64..10.0, s in 0.1f64..5.0, seed in 0u64..1000) {
            let mut rng = StageRng::seed_from_u64(seed);
            let truth = DMatrix::from_fn(4, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let est = DMatrix::from_fn(4, 3, |_, _| rng.random::<f64>());
            let d1 = DrawTensor::from_matrix(&est);
            let d2 = DrawTensor::from_matrix(&(est / c));
            let a = recovery_measures(&d1, &truth, s).unwrap().rmse[0];
            let b = recovery_measures(&d2, &truth, s * c).unwrap().rmse[0];
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn recovery_of_exact_and_shifted_estimates() {
        let truth = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        let s = 2.0;
        let exact = DrawTensor::from_matrix(&(&truth / s));
        let r = recovery_measures(&exact, &truth, s).unwrap();
        assert_eq!((r.rmse[0], r.corr[0]), (0.0, 1.0));
        let shifted = DrawTensor::from_matrix(&truth.map(|v| v / s + 0.25));
        let r = recovery_measures(&shifted, &truth, s).unwrap();
        assert!((r.rmse[0] - 0.5).abs() < 1e-15);
        assert!((r.corr[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovery_hand_case() {
        let truth = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 0.0, 1.0]);
        let est = DMatrix::from_row_slice(2, 3, &[1.0, 3.0, 2.0, 2.0, 2.0, 2.0]);
        let r = recovery_measures(&DrawTensor::from_matrix(&est), &truth, 1.0).unwrap();
        // squared errors: 0,1,1,1,4,1 -> 8/6
        assert!((r.rmse[0] - (8.0f64 / 6.0).sqrt()).abs() < 1e-15);
        // respondent 0: r = 0.5; respondent 1 has a constant estimate and is excluded
        assert!((r.corr[0] - 0.5).abs() < 1e-15);
        assert_eq!(r.excluded[0], 1);
    }

    fn holdout_case() -> (ChoiceDesign, ChoiceData) {
        // one set, 5 alternatives on one feature with levels 0..5 (o = 4)
        let design = ChoiceDesign::from_levels(1, 5, 5, vec![0, 1, 2, 3, 4], DesignRole::Holdout).unwrap();
        let data = ChoiceData {
            n_respondents: 2,
            n_sets: 1,
            n_alternatives: 5,
            choices: vec![2, 0],
            errors: vec![0.0; 10],
            total_utilities: vec![0.0; 10],
        };
        (design, data)
    }

    #[test]
    fn perfect_predictions() {
        let (design, data) = holdout_case();
        let est = DMatrix::from_row_slice(2, 4, &[-1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0]);
        let p = predictive_measures(&DrawTensor::from_matrix(&est), &design, &data, ChoiceRule::First).unwrap();
        assert_eq!(p.hitrate, vec![1.0]);
        assert_eq!(p.rmse_soc, vec![0.0]);
    }

    #[test]
    fn zero_beta_logit_shares_and_tie_credit() {
        let (design, data) = holdout_case();
        let zero = DrawTensor::from_matrix(&DMatrix::zeros(2, 4));
        let p = predictive_measures(&zero, &design, &data, ChoiceRule::Logit).unwrap();
        // observed shares (0.5, 0, 0.5, 0, 0), predicted 0.2 each
        let expected = ((0.3f64.powi(2) * 2.0 + 0.2f64.powi(2) * 3.0) / 5.0).sqrt();
        assert!((p.rmse_soc[0] - expected).abs() < 1e-15);
        // all five alternatives tie: each respondent gets 1/5 credit
        assert!((p.hitrate[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn hit_rate_invariant_to_relabelling() {
        let (design, data) = holdout_case();
        let mut rng = StageRng::seed_from_u64(9);
        let est = DMatrix::from_fn(2, 4, |_, _| rng.random::<f64>());
        let d = DrawTensor::from_matrix(&est);
        let a = predictive_measures(&d, &design, &data, ChoiceRule::First).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let levels: Vec<u8> = perm.iter().map(|&j| design.levels[j]).collect();
        let design2 = ChoiceDesign::from_levels(1, 5, 5, levels, DesignRole::Holdout).unwrap();
        let mut data2 = data.clone();
        for c in data2.choices.iter_mut() {
            *c = perm.iter().position(|&j| j == *c as usize).unwrap() as u8;
        }
        let b = predictive_measures(&d, &design2, &data2, ChoiceRule::First).unwrap();
        assert_eq!(a.hitrate, b.hitrate);
    }

    #[test]
    fn random_predictions_near_chance() {
        let mut rng = StageRng::seed_from_u64(10);
        let n_resp = 400;
        let levels: Vec<u8> = (0..20).flat_map(|_| [0u8, 1, 2, 3, 4]).collect();
        let design = ChoiceDesign::from_levels(1, 5, 5, levels, DesignRole::Holdout).unwrap();
        let data = ChoiceData {
            n_respondents: n_resp,
            n_sets: 20,
            n_alternatives: 5,
            choices: (0..n_resp * 20).map(|_| rng.random_range(0..5u8)).collect(),
            errors: Vec::new(),
            total_utilities: Vec::new(),
        };
        let est = DMatrix::from_fn(n_resp, 4, |_, _| rng.random::<f64>() - 0.5);
        let p = predictive_measures(&DrawTensor::from_matrix(&est), &design, &data, ChoiceRule::First).unwrap();
        assert!((p.hitrate[0] - 0.2).abs() < 0.03, "{}", p.hitrate[0]);
    }
}
