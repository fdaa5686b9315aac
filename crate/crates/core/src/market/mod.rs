//! Product and line enumeration, demand and contribution margins under the
//! first-choice and logit rules, and the pre-computed scenario tables.
//!
//! Demand is accumulated in exact integer units per (draw, respondent):
//! `lcm(1..=J)` units for the first rule, so `1/|S|` splits are exact, and
//! `2^52` fixed-point units per logit probability. Margins are integer cents
//! times units, reduced to lowest terms before conversion to `f64`, so equal
//! rationals always map to equal floats.

mod io;
mod tables;

use serde::{Deserialize, Serialize};

use crate::codec::{LineCodec, ProductCodec, ScenarioCodec};
use crate::diagnostics::DrawTensor;
use crate::error::{Error, Result};

pub use io::{load_tables, save_tables, table_digest, TABLE_MAGIC};
pub use tables::{BestResponseTable, ScenarioTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChoiceRule {
    First,
    Logit,
}

impl ChoiceRule {
    pub const ALL: [ChoiceRule; 2] = [ChoiceRule::First, ChoiceRule::Logit];

    pub fn name(self) -> &'static str {
        match self {
            ChoiceRule::First => "first",
            ChoiceRule::Logit => "logit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Draws,
    Point,
    True,
}

impl ParamKind {
    pub const ALL: [ParamKind; 3] = [ParamKind::Draws, ParamKind::Point, ParamKind::True];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Draws => "draws",
            ParamKind::Point => "point",
            ParamKind::True => "true",
        }
    }
}

/// Demand-side parameters: dummy-coded part-worths `draws x respondents x o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub kind: ParamKind,
    pub rule: ChoiceRule,
    pub part_worths: DrawTensor,
}

impl ParamSet {
    pub fn draws(part_worths: DrawTensor, rule: ChoiceRule) -> Self {
        Self { kind: ParamKind::Draws, rule, part_worths }
    }

    pub fn point(means: &nalgebra::DMatrix<f64>, rule: ChoiceRule) -> Self {
        Self { kind: ParamKind::Point, rule, part_worths: DrawTensor::from_matrix(means) }
    }

    /// True preferences divided by the Gumbel scale `s`, so that logit
    /// probabilities equal the simulated choice probabilities.
    pub fn truth(b: &nalgebra::DMatrix<f64>, scale: f64, rule: ChoiceRule) -> Self {
        Self { kind: ParamKind::True, rule, part_worths: DrawTensor::from_matrix(&(b / scale)) }
    }

    /// Part-worth of `(feature, level)` with the reference level re-inserted as 0.
    pub fn extended(&self, n: usize, respondent: usize, feature: usize, level: usize, n_levels: usize) -> f64 {
        if level == 0 {
            0.0
        } else {
            self.part_worths.draw(n, respondent)[feature * (n_levels - 1) + level - 1]
        }
    }
}

/// Market structure; all money amounts in integer cents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub n_features: usize,
    pub n_levels: usize,
    /// Price per level of feature 0.
    pub prices: Vec<i64>,
    /// Cost per level of features 1..l, feature-major (`m (l - 1)` entries).
    pub costs: Vec<i64>,
    /// Base cost plus costs of fixed excluded-feature levels.
    pub delta: i64,
    pub n_firms: usize,
    pub line_size: usize,
    #[serde(default)]
    pub feature_names: Vec<String>,
}

impl MarketSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_firms < 2 || self.line_size == 0 {
            return Err(Error::param(format!(
                "need >= 2 firms and line size >= 1, got {} and {}",
                self.n_firms, self.line_size
            )));
        }
        if self.n_features == 0 || self.n_levels < 2 {
            return Err(Error::dim("need >= 1 feature and >= 2 levels"));
        }
        if self.prices.len() != self.n_levels || self.costs.len() != self.n_levels * (self.n_features - 1) {
            return Err(Error::dim(format!(
                "{} prices and {} costs for l={}, m={}",
                self.prices.len(),
                self.costs.len(),
                self.n_features,
                self.n_levels
            )));
        }
        if self.costs.iter().any(|&c| c < 0) || self.delta < 0 {
            return Err(Error::param("costs must be non-negative"));
        }
        if self.prices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("prices must be strictly increasing"));
        }
        Ok(())
    }

    pub fn n_products(&self) -> usize {
        self.n_levels.pow(self.n_features as u32)
    }
}

/// Every product with its unit contribution margin `p·x_p − c·x_c − δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductTable {
    pub codec: ProductCodec,
    /// `τ x l` level indices.
    pub levels: Vec<u8>,
    pub unit_margin: Vec<i64>,
}

impl ProductTable {
    pub fn levels_of(&self, product: usize) -> &[u8] {
        let l = self.codec.n_features;
        &self.levels[product * l..(product + 1) * l]
    }
}

pub fn enumerate_products(spec: &MarketSpec) -> Result<ProductTable> {
    spec.validate()?;
    let codec = ProductCodec::new(spec.n_features, spec.n_levels)?;
    let tau = codec.n_products();
    let mut levels = Vec::with_capacity(tau * spec.n_features);
    let mut unit_margin = Vec::with_capacity(tau);
    let mut buf = vec![0usize; spec.n_features];
    for p in 0..tau {
        codec.decode_into(p, &mut buf);
        let cost: i64 = buf[1..].iter().enumerate().map(|(f, &lv)| spec.costs[f * spec.n_levels + lv]).sum();
        unit_margin.push(spec.prices[buf[0]] - cost - spec.delta);
        levels.extend(buf.iter().map(|&lv| lv as u8));
    }
    Ok(ProductTable { codec, levels, unit_margin })
}

pub fn enumerate_lines(tau: usize, line_size: usize) -> Result<LineCodec> {
    LineCodec::new(tau, line_size)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact `num / den` reduced to lowest terms, then converted to `f64`.
pub fn rational_to_f64(num: i128, den: u128) -> f64 {
    debug_assert!(den > 0);
    let g = gcd(num.unsigned_abs(), den);
    let (n, d) = (num.unsigned_abs() / g, den / g);
    let value = (n / d) as f64 + (n % d) as f64 / d as f64;
    if num < 0 {
        -value
    } else {
        value
    }
}

fn lcm_upto(n: usize) -> u64 {
    (1..=n as u64).fold(1, |acc, k| acc / gcd(acc as u128, k as u128) as u64 * k)
}

fn slot_order(products: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..products.len()).collect();
    order.sort_by_key(|&j| products[j]);
    order
}

/// Codecs of one market size, without any demand data.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketLayout {
    pub products: ProductCodec,
    pub lines: LineCodec,
    pub scenarios: ScenarioCodec,
}

impl MarketLayout {
    pub fn new(n_features: usize, n_levels: usize, line_size: usize, n_firms: usize) -> Result<Self> {
        let products = ProductCodec::new(n_features, n_levels)?;
        let lines = LineCodec::new(products.n_products(), line_size)?;
        let scenarios = ScenarioCodec::new(lines.n_lines(), n_firms)?;
        Ok(Self { products, lines, scenarios })
    }

    /// Level tuples of every product held in scenario `rank`, firm-major.
    pub fn scenario_levels(&self, rank: usize) -> Vec<Vec<usize>> {
        self.scenarios
            .decode(rank)
            .into_iter()
            .flat_map(|a| self.lines.decode(a))
            .map(|p| self.products.decode(p))
            .collect()
    }
}

/// Fixed-point resolution of logit probabilities.
const LOGIT_UNITS: f64 = (1u64 << 52) as f64;

/// Market ready for demand queries: products, lines and per-(product, draw,
/// respondent) utilities of one parameter set.
pub struct Market {
    pub spec: MarketSpec,
    pub rule: ChoiceRule,
    pub products: ProductTable,
    pub lines: LineCodec,
    pub scenarios: ScenarioCodec,
    /// `a x q` product ranks of every line.
    line_table: Vec<u32>,
    n_cells: usize,
    n_draws: usize,
    /// `τ x cells` utilities, cell = draw * respondents + respondent.
    utility: Vec<f64>,
    /// `τ x cells` `exp(u − max over all products)`, logit rule only.
    shifted_exp: Vec<f64>,
    units: u64,
}

/// Default cap on `τ x draws x respondents` utility cells.
pub const DEFAULT_MAX_UTILITY_CELLS: usize = 1 << 28;

impl Market {
    pub fn new(spec: &MarketSpec, params: &ParamSet) -> Result<Self> {
        Self::with_capacity(spec, params, DEFAULT_MAX_UTILITY_CELLS)
    }

    pub fn with_capacity(spec: &MarketSpec, params: &ParamSet, max_utility_cells: usize) -> Result<Self> {
        let products = enumerate_products(spec)?;
        let pw = &params.part_worths;
        if pw.n_params != spec.n_features * (spec.n_levels - 1) {
            return Err(Error::dim(format!("parameter set has {} columns", pw.n_params)));
        }
        let tau = products.codec.n_products();
        let lines = enumerate_lines(tau, spec.line_size)?;
        let scenarios = ScenarioCodec::new(lines.n_lines(), spec.n_firms)?;
        let n_cells = pw.n_draws * pw.n_respondents;
        let total = (tau as u128) * (n_cells as u128);
        if total > max_utility_cells as u128 {
            return Err(Error::Capacity {
                what: "utility look-up cells".into(),
                value: total,
                limit: max_utility_cells as u128,
            });
        }
        let m1 = spec.n_levels - 1;
        let mut utility = vec![0.0; tau * n_cells];
        for p in 0..tau {
            let lv = products.levels_of(p);
            let row = &mut utility[p * n_cells..(p + 1) * n_cells];
            for (c, slot) in row.iter_mut().enumerate() {
                let beta = &pw.draws[c * pw.n_params..(c + 1) * pw.n_params];
                *slot = lv
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l > 0)
                    .map(|(f, &l)| beta[f * m1 + l as usize - 1])
                    .sum();
            }
        }
        let shifted_exp = match params.rule {
            ChoiceRule::First => Vec::new(),
            ChoiceRule::Logit => {
                let mut max = vec![f64::NEG_INFINITY; n_cells];
                for p in 0..tau {
                    for (m, &u) in max.iter_mut().zip(&utility[p * n_cells..(p + 1) * n_cells]) {
                        *m = m.max(u);
                    }
                }
                let mut e = vec![0.0; tau * n_cells];
                for p in 0..tau {
                    for c in 0..n_cells {
                        e[p * n_cells + c] = (utility[p * n_cells + c] - max[c]).exp();
                    }
                }
                e
            }
        };
        let n_slots = spec.n_firms * spec.line_size;
        let units = match params.rule {
            ChoiceRule::First => lcm_upto(n_slots),
            ChoiceRule::Logit => LOGIT_UNITS as u64,
        };
        Ok(Self {
            spec: spec.clone(),
            rule: params.rule,
            line_table: lines.table(),
            products,
            lines,
            scenarios,
            n_cells,
            n_draws: pw.n_draws,
            utility,
            shifted_exp,
            units,
        })
    }

    pub fn layout(&self) -> MarketLayout {
        MarketLayout { products: self.products.codec, lines: self.lines.clone(), scenarios: self.scenarios }
    }

    pub fn n_lines(&self) -> usize {
        self.lines.n_lines()
    }

    pub fn line_products(&self, line: usize) -> &[u32] {
        let q = self.spec.line_size;
        &self.line_table[line * q..(line + 1) * q]
    }

    /// Products of a scenario, firm-major.
    fn scenario_products(&self, lines: &[usize], out: &mut Vec<usize>) {
        out.clear();
        for &a in lines {
            out.extend(self.line_products(a).iter().map(|&p| p as usize));
        }
    }

    /// Integer demand units of every product slot in cell `c`, written to `out`.
    /// `order` sorts the slots by product rank, so the logit denominator does
    /// not depend on which firm holds which product.
    fn cell_units(&self, products: &[usize], order: &[usize], c: usize, out: &mut [u64], scratch: &mut [f64]) {
        let n = self.n_cells;
        match self.rule {
            ChoiceRule::First => {
                let mut max = f64::NEG_INFINITY;
                let mut count = 0u64;
                for &p in products {
                    let u = self.utility[p * n + c];
                    if u > max {
                        max = u;
                        count = 1;
                    } else if u == max {
                        count += 1;
                    }
                }
                let share = self.units / count;
                for (slot, &p) in out.iter_mut().zip(products) {
                    *slot = if self.utility[p * n + c] == max { share } else { 0 };
                }
            }
            ChoiceRule::Logit => {
                for (s, &p) in scratch.iter_mut().zip(products) {
                    *s = self.shifted_exp[p * n + c];
                }
                let mut den: f64 = order.iter().map(|&j| scratch[j]).sum();
                if !(den > f64::MIN_POSITIVE * 1e20) {
                    // every product far below the global best; shift locally
                    let max = products.iter().map(|&p| self.utility[p * n + c]).fold(f64::NEG_INFINITY, f64::max);
                    for (s, &p) in scratch.iter_mut().zip(products) {
                        *s = (self.utility[p * n + c] - max).exp();
                    }
                    den = order.iter().map(|&j| scratch[j]).sum();
                }
                for (slot, s) in out.iter_mut().zip(scratch.iter()) {
                    *slot = (s / den * LOGIT_UNITS).round() as u64;
                }
            }
        }
    }

    /// Exact firm-0 margin numerator over all cells, in cents x units.
    fn first_firm_numerator(&self, products: &[usize]) -> i128 {
        let q = self.spec.line_size;
        let mut units = vec![0u64; products.len()];
        let mut scratch = vec![0.0; products.len()];
        let margins: Vec<i128> = products[..q].iter().map(|&p| self.products.unit_margin[p] as i128).collect();
        let order = slot_order(products);
        let mut num: i128 = 0;
        for c in 0..self.n_cells {
            self.cell_units(products, &order, c, &mut units, &mut scratch);
            for (u, m) in units[..q].iter().zip(&margins) {
                num += *u as i128 * m;
            }
        }
        num
    }

    fn denominator(&self) -> u128 {
        self.units as u128 * self.n_draws as u128
    }

    /// Expected demand of every product slot (firm-major), in respondents.
    pub fn demand(&self, lines: &[usize]) -> Vec<f64> {
        let mut products = Vec::new();
        self.scenario_products(lines, &mut products);
        let mut units = vec![0u64; products.len()];
        let mut scratch = vec![0.0; products.len()];
        let mut acc = vec![0u128; products.len()];
        let order = slot_order(&products);
        for c in 0..self.n_cells {
            self.cell_units(&products, &order, c, &mut units, &mut scratch);
            for (a, u) in acc.iter_mut().zip(&units) {
                *a += *u as u128;
            }
        }
        acc.into_iter().map(|a| rational_to_f64(a as i128, self.denominator())).collect()
    }

    /// Total contribution margin of `firm` in the complete scenario `lines`, in cents.
    pub fn firm_margin(&self, lines: &[usize], firm: usize) -> f64 {
        let mut ordered = Vec::with_capacity(lines.len());
        ordered.push(lines[firm]);
        ordered.extend(lines.iter().enumerate().filter(|&(w, _)| w != firm).map(|(_, &a)| a));
        let mut products = Vec::new();
        self.scenario_products(&ordered, &mut products);
        rational_to_f64(self.first_firm_numerator(&products), self.denominator())
    }

    /// Firm-0 margin of a complete scenario rank.
    pub fn scenario_margin(&self, rank: usize) -> f64 {
        let lines = self.scenarios.decode(rank);
        let mut products = Vec::new();
        self.scenario_products(&lines, &mut products);
        rational_to_f64(self.first_firm_numerator(&products), self.denominator())
    }
}
