use rayon::prelude::*;

use super::{rational_to_f64, Market};
use crate::codec::ScenarioCodec;
use crate::error::{Error, Result};

/// Firm-0 contribution margin of every complete scenario, indexed by scenario rank.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTable {
    pub codec: ScenarioCodec,
    pub margins: Vec<f64>,
}

impl ScenarioTable {
    /// Table from an arbitrary margin function of the firm lines; for toy games.
    pub fn from_fn(n_lines: usize, n_firms: usize, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let codec = ScenarioCodec::new(n_lines, n_firms)?;
        let margins = (0..codec.n_scenarios()).map(|r| f(&codec.decode(r))).collect();
        Ok(Self { codec, margins })
    }

    pub fn n_rows(&self) -> usize {
        self.margins.len()
    }

    pub fn margin(&self, lines: &[usize]) -> f64 {
        self.margins[self.codec.encode(lines)]
    }

    /// Margin of `firm` in `lines`, read through the firm-0 viewpoint.
    pub fn firm_margin(&self, lines: &[usize], firm: usize) -> f64 {
        let partial = self.codec.partial_of(lines, firm);
        self.margins[self.codec.complete_from_first(lines[firm], partial)]
    }
}

/// Best response of firm 0 to every partial scenario. Ties go to the lowest line rank.
#[derive(Clone, Debug, PartialEq)]
pub struct BestResponseTable {
    pub codec: ScenarioCodec,
    pub best_line: Vec<u32>,
    pub best_margin: Vec<f64>,
}

impl BestResponseTable {
    pub fn from_scenarios(table: &ScenarioTable) -> Self {
        let codec = table.codec;
        let (a, kp) = (codec.n_lines, codec.n_partial());
        let (best_line, best_margin) = (0..kp)
            .into_par_iter()
            .map(|partial| {
                let mut best = (0u32, table.margins[partial]);
                for line in 1..a {
                    let m = table.margins[line * kp + partial];
                    if m > best.1 {
                        best = (line as u32, m);
                    }
                }
                best
            })
            .unzip();
        Self { codec, best_line, best_margin }
    }

    pub fn n_rows(&self) -> usize {
        self.best_line.len()
    }

    /// Best line of `firm` against the other firms' lines in `lines`.
    pub fn respond(&self, lines: &[usize], firm: usize) -> usize {
        self.best_line[self.codec.partial_of(lines, firm)] as usize
    }
}

impl Market {
    /// Fills the scenario table in parallel and derives the best responses.
    pub fn precompute(&self, max_scenarios: usize) -> Result<(ScenarioTable, BestResponseTable)> {
        let k = self.scenarios.n_scenarios();
        if k > max_scenarios {
            return Err(Error::Capacity {
                what: "competitive scenarios".into(),
                value: k as u128,
                limit: max_scenarios as u128,
            });
        }
        let n_slots = self.spec.n_firms * self.spec.line_size;
        let den = self.denominator();
        let margins = (0..k)
            .into_par_iter()
            .map_init(
                || (vec![0usize; self.spec.n_firms], Vec::with_capacity(n_slots)),
                |(lines, products), rank| {
                    self.scenarios.decode_into(rank, lines);
                    self.scenario_products(lines, products);
                    rational_to_f64(self.first_firm_numerator(products), den)
                },
            )
            .collect();
        let table = ScenarioTable { codec: self.scenarios, margins };
        let best = BestResponseTable::from_scenarios(&table);
        Ok((table, best))
    }
}
