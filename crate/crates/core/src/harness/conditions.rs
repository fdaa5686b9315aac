//! Base conditions, the notebook cost table and the market built from them.

use std::io::Read;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{binomial, checked_pow};
use crate::error::{Error, Result};
use crate::market::MarketSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseCondition {
    pub row: usize,
    pub n_features: usize,
    pub line_size: usize,
    pub n_firms: usize,
    pub n_products: u64,
    pub n_lines: u64,
    pub n_scenarios: u64,
}

const fn row(
    row: usize,
    n_features: usize,
    line_size: usize,
    n_firms: usize,
    n_products: u64,
    n_lines: u64,
    n_scenarios: u64,
) -> BaseCondition {
    BaseCondition { row, n_features, line_size, n_firms, n_products, n_lines, n_scenarios }
}

/// The sixteen base conditions with their published counts (five levels per feature).
pub const BASE_CONDITIONS: [BaseCondition; 16] = [
    row(1, 2, 1, 2, 25, 25, 625),
    row(2, 3, 1, 2, 125, 125, 15_625),
    row(3, 2, 1, 3, 25, 25, 15_625),
    row(4, 2, 2, 2, 25, 300, 90_000),
    row(5, 4, 1, 2, 625, 625, 390_625),
    row(6, 2, 1, 4, 25, 25, 390_625),
    row(7, 3, 1, 3, 125, 125, 1_953_125),
    row(8, 2, 3, 2, 25, 2_300, 5_290_000),
    row(9, 5, 1, 2, 3_125, 3_125, 9_765_625),
    row(10, 2, 1, 5, 25, 25, 9_765_625),
    row(11, 2, 2, 3, 25, 300, 27_000_000),
    row(12, 3, 2, 2, 125, 7_750, 60_062_500),
    row(13, 2, 4, 2, 25, 12_650, 160_022_500),
    row(14, 6, 1, 2, 15_625, 15_625, 244_140_625),
    row(15, 4, 1, 3, 625, 625, 244_140_625),
    row(16, 3, 1, 4, 125, 125, 244_140_625),
];

pub fn base_condition(row: usize) -> Option<BaseCondition> {
    BASE_CONDITIONS.iter().find(|c| c.row == row).copied()
}

/// Recomputed counts of one market size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Combinatorics {
    pub n_features: usize,
    pub n_levels: usize,
    pub line_size: usize,
    pub n_firms: usize,
    pub n_products: u128,
    pub n_lines: u128,
    pub n_scenarios: u128,
    pub n_partial: u128,
    /// Matching base-condition row, if the size is one of them.
    pub row: Option<usize>,
}

pub fn combinatorics(n_features: usize, n_levels: usize, line_size: usize, n_firms: usize) -> Result<Combinatorics> {
    let overflow = |what: &str| Error::Capacity { what: what.into(), value: u128::MAX, limit: u128::MAX };
    let tau = checked_pow(n_levels as u128, n_features as u32).ok_or_else(|| overflow("product configurations"))?;
    let a = binomial(tau as u64, line_size as u64).ok_or_else(|| overflow("line configurations"))?;
    let k = checked_pow(a, n_firms as u32).ok_or_else(|| overflow("competitive scenarios"))?;
    let kp = checked_pow(a, n_firms as u32 - 1).ok_or_else(|| overflow("partial scenarios"))?;
    let row = (n_levels == 5)
        .then(|| {
            BASE_CONDITIONS
                .iter()
                .find(|c| (c.n_features, c.line_size, c.n_firms) == (n_features, line_size, n_firms))
                .map(|c| c.row)
        })
        .flatten();
    Ok(Combinatorics {
        n_features,
        n_levels,
        line_size,
        n_firms,
        n_products: tau,
        n_lines: a,
        n_scenarios: k,
        n_partial: kp,
        row,
    })
}

/// Recomputes the counts and cross-checks them against the embedded row.
pub fn check_condition(n_features: usize, n_levels: usize, line_size: usize, n_firms: usize) -> Result<Combinatorics> {
    let c = combinatorics(n_features, n_levels, line_size, n_firms)?;
    if let Some(r) = c.row.and_then(base_condition) {
        let expected = (r.n_products as u128, r.n_lines as u128, r.n_scenarios as u128);
        if (c.n_products, c.n_lines, c.n_scenarios) != expected {
            return Err(Error::ConfigIntegrity(format!(
                "row {}: computed (τ, a, k) = ({}, {}, {}), table says {:?}",
                r.row, c.n_products, c.n_lines, c.n_scenarios, expected
            )));
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostLevel {
    pub label: String,
    /// Integer cents.
    pub cost: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostFeature {
    pub name: String,
    pub levels: Vec<CostLevel>,
}

/// Price levels, per-feature level costs and the base cost, all in cents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCostTable {
    pub prices: Vec<CostLevel>,
    /// Non-price features in inclusion order.
    pub features: Vec<CostFeature>,
    pub base_cost: i64,
}

fn levels(labels: [&str; 5], euros: [i64; 5]) -> Vec<CostLevel> {
    labels.iter().zip(euros).map(|(l, c)| CostLevel { label: l.to_string(), cost: c * 100 }).collect()
}

impl FeatureCostTable {
    /// The notebook market: price plus five design features.
    pub fn notebook() -> Self {
        let feature = |name: &str, labels, euros| CostFeature { name: name.into(), levels: levels(labels, euros) };
        Self {
            prices: levels(["299", "599", "899", "1199", "1499"], [299, 599, 899, 1199, 1499]),
            features: vec![
                feature("display", ["13in", "14in", "15in", "16in", "17in"], [25, 30, 33, 44, 54]),
                feature("cpu", ["i3", "Ryzen 5", "i5", "Ryzen 7", "i7"], [10, 11, 12, 65, 79]),
                feature("ssd", ["125GB", "250GB", "500GB", "1000GB", "2000GB"], [11, 11, 11, 23, 31]),
                feature("battery", ["5h", "7h", "9h", "11h", "13h"], [8, 8, 10, 10, 12]),
                feature("ram", ["4GB", "8GB", "16GB", "32GB", "64GB"], [6, 6, 9, 19, 38]),
            ],
            base_cost: 9_400,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.prices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.prices.len();
        if m < 2 {
            return Err(Error::ConfigIntegrity("cost table needs at least two price levels".into()));
        }
        if let Some(f) = self.features.iter().find(|f| f.levels.len() != m) {
            return Err(Error::ConfigIntegrity(format!("feature {} has {} levels, price has {m}", f.name, f.levels.len())));
        }
        let negative = self.base_cost < 0 || self.features.iter().flat_map(|f| &f.levels).any(|l| l.cost < 0);
        if negative {
            return Err(Error::ConfigIntegrity("costs must be non-negative".into()));
        }
        Ok(())
    }

    /// Reads `feature,level_index,label,cost` rows. Feature `price` gives the
    /// prices and feature `base` the base cost; level indices are 1-based and
    /// amounts are in currency units.
    pub fn from_csv(input: impl Read) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            feature: String,
            level_index: Option<usize>,
            #[serde(default)]
            label: String,
            cost: f64,
        }
        let mut prices: Vec<(usize, CostLevel)> = Vec::new();
        let mut features: Vec<(String, Vec<(usize, CostLevel)>)> = Vec::new();
        let mut base = None;
        for row in csv::Reader::from_reader(input).deserialize::<Row>() {
            let row = row?;
            let cents = (row.cost * 100.0).round() as i64;
            let level = || {
                row.level_index
                    .filter(|&l| l >= 1)
                    .ok_or_else(|| Error::Parse(format!("feature {} row lacks a 1-based level index", row.feature)))
            };
            match row.feature.as_str() {
                "base" => base = Some(cents),
                "price" => prices.push((level()?, CostLevel { label: row.label.clone(), cost: cents })),
                name => {
                    let idx = match features.iter().position(|(n, _)| n == name) {
                        Some(i) => i,
                        None => {
                            features.push((name.to_string(), Vec::new()));
                            features.len() - 1
                        }
                    };
                    features[idx].1.push((level()?, CostLevel { label: row.label.clone(), cost: cents }));
                }
            }
        }
        let ordered = |mut v: Vec<(usize, CostLevel)>, what: &str| -> Result<Vec<CostLevel>> {
            v.sort_by_key(|(l, _)| *l);
            if v.iter().enumerate().any(|(i, (l, _))| *l != i + 1) {
                return Err(Error::Parse(format!("{what} levels are not 1..m")));
            }
            Ok(v.into_iter().map(|(_, c)| c).collect())
        };
        let table = Self {
            prices: ordered(prices, "price")?,
            features: features
                .into_iter()
                .map(|(name, v)| Ok(CostFeature { levels: ordered(v, &name)?, name }))
                .collect::<Result<_>>()?,
            base_cost: base.ok_or_else(|| Error::Parse("cost table has no base row".into()))?,
        };
        table.validate()?;
        Ok(table)
    }
}

/// Base cost plus one uniformly drawn level cost per excluded feature.
/// Returns `δ` in cents and the chosen level (0-based) of every excluded feature.
pub fn resolve_delta<R: Rng + ?Sized>(
    table: &FeatureCostTable,
    n_included: usize,
    rng: &mut R,
) -> Result<(i64, Vec<usize>)> {
    if n_included > table.features.len() {
        return Err(Error::ConfigIntegrity(format!(
            "{n_included} design features requested, cost table has {}",
            table.features.len()
        )));
    }
    let mut delta = table.base_cost;
    let mut chosen = Vec::new();
    for f in &table.features[n_included..] {
        let lv = rng.random_range(0..f.levels.len());
        delta += f.levels[lv].cost;
        chosen.push(lv);
    }
    Ok((delta, chosen))
}

/// Market with price plus the first `n_features - 1` design features.
pub fn market_spec(
    table: &FeatureCostTable,
    n_features: usize,
    delta: i64,
    n_firms: usize,
    line_size: usize,
) -> Result<MarketSpec> {
    table.validate()?;
    if n_features == 0 || n_features > table.features.len() + 1 {
        return Err(Error::ConfigIntegrity(format!("{n_features} features requested from the cost table")));
    }
    let design = &table.features[..n_features - 1];
    let spec = MarketSpec {
        n_features,
        n_levels: table.n_levels(),
        prices: table.prices.iter().map(|p| p.cost).collect(),
        costs: design.iter().flat_map(|f| f.levels.iter().map(|l| l.cost)).collect(),
        delta,
        n_firms,
        line_size,
        feature_names: std::iter::once("price".to_string()).chain(design.iter().map(|f| f.name.clone())).collect(),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::enumerate_products;
    use crate::rng::StageRng;
    use rand::SeedableRng;

    #[test]
    fn every_row_recomputes() {
        for c in BASE_CONDITIONS {
            let r = check_condition(c.n_features, 5, c.line_size, c.n_firms).unwrap();
            assert_eq!(r.row, Some(c.row));
            assert_eq!(r.n_scenarios, c.n_scenarios as u128);
            assert_eq!(r.n_partial * r.n_lines, r.n_scenarios);
        }
        let q1 = combinatorics(3, 5, 1, 2).unwrap();
        assert_eq!(q1.n_scenarios, q1.n_products * q1.n_products);
        assert_eq!(combinatorics(7, 5, 1, 2).unwrap().row, None);
    }

    #[test]
    fn full_notebook_margin() {
        let spec = market_spec(&FeatureCostTable::notebook(), 6, 9_400, 2, 1).unwrap();
        let products = enumerate_products(&spec).unwrap();
        let independent = 29_900 - (9_400 + 2_500 + 1_000 + 1_100 + 800 + 600);
        assert_eq!(products.unit_margin[0], independent);
        assert_eq!(independent, 14_500);
    }

    #[test]
    fn delta_bounds() {
        let table = FeatureCostTable::notebook();
        let mut rng = StageRng::seed_from_u64(1);
        assert_eq!(resolve_delta(&table, 5, &mut rng).unwrap().0, 9_400);
        let level_one: i64 = table.features[1..].iter().map(|f| f.levels[0].cost).sum();
        assert_eq!(table.base_cost + level_one, 12_900);
        for _ in 0..500 {
            let (d, chosen) = resolve_delta(&table, 1, &mut rng).unwrap();
            assert_eq!(chosen.len(), 4);
            assert!((12_900..=25_400).contains(&d), "{d}");
        }
    }

    #[test]
    fn csv_ingestion_matches_builtin() {
        let mut text = String::from("feature,level_index,label,cost\nbase,,,94\n");
        let t = FeatureCostTable::notebook();
        for (i, p) in t.prices.iter().enumerate() {
            text += &format!("price,{},{},{}\n", i + 1, p.label, p.cost as f64 / 100.0);
        }
        for f in &t.features {
            for (i, l) in f.levels.iter().enumerate().rev() {
                text += &format!("{},{},{},{}\n", f.name, i + 1, l.label, l.cost as f64 / 100.0);
            }
        }
        assert_eq!(FeatureCostTable::from_csv(text.as_bytes()).unwrap(), t);
        let broken = "feature,level_index,label,cost\nprice,1,a,1\nprice,2,b,2\ndisplay,1,x,1\n";
        assert!(FeatureCostTable::from_csv(broken.as_bytes()).is_err());
    }
}
