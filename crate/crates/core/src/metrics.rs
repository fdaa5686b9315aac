//! Per-run equilibrium measures and their CSV exports.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codec::ScenarioCodec;
use crate::error::{Error, Result};
use crate::market::{MarketLayout, ScenarioTable};
use crate::nash::{GameResult, GameSummary};

/// Distinct equilibria with flips (scenario ranks) and without (sorted line multisets).
pub fn dedup_and_flips(codec: ScenarioCodec, equilibria: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let with_flip: BTreeSet<usize> = equilibria.iter().copied().collect();
    let no_flip: BTreeSet<Vec<usize>> = with_flip
        .iter()
        .map(|&k| {
            let mut lines = codec.decode(k);
            lines.sort_unstable();
            lines
        })
        .collect();
    (no_flip.into_iter().collect(), with_flip.into_iter().collect())
}

/// Share of no-flip equilibria in which at least two firms hold different lines.
pub fn differentiation_share(no_flip: &[Vec<usize>]) -> Option<f64> {
    if no_flip.is_empty() {
        return None;
    }
    let differentiated = no_flip.iter().filter(|lines| lines.iter().any(|&a| a != lines[0])).count();
    Some(differentiated as f64 / no_flip.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Equality {
    Total,
    Partial,
    Neither,
}

impl Equality {
    pub fn name(self) -> &'static str {
        match self {
            Equality::Total => "total",
            Equality::Partial => "partial",
            Equality::Neither => "neither",
        }
    }

    /// Total equality also counts as partial.
    pub fn is_partial(self) -> bool {
        self != Equality::Neither
    }
}

/// Compares found equilibria against reference ones, flips included.
pub fn equality_class(found: &[usize], truth: &[usize]) -> Equality {
    let found: BTreeSet<_> = found.iter().collect();
    let truth: BTreeSet<_> = truth.iter().collect();
    if found == truth {
        Equality::Total
    } else if found.is_superset(&truth) {
        Equality::Partial
    } else {
        Equality::Neither
    }
}

/// Relative frequency of each level of each feature, `l x m`, feature-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelFrequencies {
    pub n_features: usize,
    pub n_levels: usize,
    pub freq: Vec<f64>,
}

impl LevelFrequencies {
    pub fn get(&self, feature: usize, level: usize) -> f64 {
        self.freq[feature * self.n_levels + level]
    }
}

/// Counts levels over every product of every firm in every equilibrium.
pub fn level_frequencies(layout: &MarketLayout, equilibria: &[usize]) -> Option<LevelFrequencies> {
    if equilibria.is_empty() {
        return None;
    }
    let (l, m) = (layout.products.n_features, layout.products.n_levels);
    let mut counts = vec![0u64; l * m];
    let mut products = 0u64;
    for &k in equilibria {
        for levels in layout.scenario_levels(k) {
            products += 1;
            for (f, &lv) in levels.iter().enumerate() {
                counts[f * m + lv] += 1;
            }
        }
    }
    Some(LevelFrequencies {
        n_features: l,
        n_levels: m,
        freq: counts.into_iter().map(|c| c as f64 / products as f64).collect(),
    })
}

/// Mean absolute difference over all levels of `features`.
pub fn level_freq_mae(a: &LevelFrequencies, b: &LevelFrequencies, features: &[usize]) -> Result<f64> {
    if a.n_features != b.n_features || a.n_levels != b.n_levels {
        return Err(Error::DomainMismatch(format!(
            "{}x{} vs {}x{} level tables",
            a.n_features, a.n_levels, b.n_features, b.n_levels
        )));
    }
    if features.is_empty() {
        return Err(Error::DomainMismatch("empty feature subset".into()));
    }
    if let Some(&f) = features.iter().find(|&&f| f >= a.n_features) {
        return Err(Error::DomainMismatch(format!("feature {f} outside {} features", a.n_features)));
    }
    let mut total = 0.0;
    for &f in features {
        for lv in 0..a.n_levels {
            total += (a.get(f, lv) - b.get(f, lv)).abs();
        }
    }
    Ok(total / (features.len() * a.n_levels) as f64)
}

/// Smallest and largest firm-0 margin over the equilibrium scenarios.
pub fn margin_bounds(equilibria: &[usize], m: &ScenarioTable) -> Option<(f64, f64)> {
    equilibria.iter().map(|&k| m.margins[k]).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeasures {
    pub n_games: usize,
    pub n_equilibria_noflip: usize,
    pub n_equilibria_flip: usize,
    /// Mean rounds of the games that ended in an equilibrium.
    pub avg_rounds: Option<f64>,
    pub pct_equilibrium_games: f64,
    pub pct_two_round_cycles: f64,
    pub pct_unknown_cycles: f64,
    pub differentiation_share: Option<f64>,
    pub equality: Option<Equality>,
    pub margin_bounds: Option<(f64, f64)>,
    pub level_frequencies: Option<LevelFrequencies>,
}

/// All measures of one run; `truth` holds the reference equilibria, if any.
pub fn measures(summary: &GameSummary, m: &ScenarioTable, layout: &MarketLayout, truth: Option<&[usize]>) -> RunMeasures {
    let eq = &summary.equilibria.scenarios;
    let (no_flip, with_flip) = dedup_and_flips(m.codec, eq);
    let games = summary.outcomes.len();
    let rounds: Vec<usize> = summary
        .outcomes
        .iter()
        .filter(|o| matches!(o.result, GameResult::Equilibrium(_)))
        .map(|o| o.rounds_played)
        .collect();
    let frac = |c: usize| if games == 0 { 0.0 } else { c as f64 / games as f64 };
    RunMeasures {
        n_games: games,
        n_equilibria_noflip: no_flip.len(),
        n_equilibria_flip: with_flip.len(),
        avg_rounds: (!rounds.is_empty()).then(|| rounds.iter().sum::<usize>() as f64 / rounds.len() as f64),
        pct_equilibrium_games: frac(summary.n_equilibrium_games),
        pct_two_round_cycles: frac(summary.n_two_round_cycles),
        pct_unknown_cycles: frac(summary.n_unknown),
        differentiation_share: differentiation_share(&no_flip),
        equality: truth.map(|t| equality_class(&with_flip, t)),
        margin_bounds: margin_bounds(&with_flip, m),
        level_frequencies: level_frequencies(layout, &with_flip),
    }
}

/// Identifies one run in the exported tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunKey {
    pub condition: String,
    pub replication: usize,
    pub rule: String,
    pub paramset: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `measures.csv`: one row per run; absent measures are empty fields.
pub fn write_measures_csv(out: impl Write, rows: &[(RunKey, RunMeasures)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "condition",
        "replication",
        "rule",
        "paramset",
        "games",
        "n_equilibria_noflip",
        "n_equilibria_flip",
        "avg_rounds",
        "pct_equilibrium",
        "pct_two_round_cycles",
        "pct_unknown_cycles",
        "differentiation_share",
        "equality",
        "margin_min",
        "margin_max",
    ])?;
    for (key, r) in rows {
        w.write_record([
            key.condition.clone(),
            key.replication.to_string(),
            key.rule.clone(),
            key.paramset.clone(),
            r.n_games.to_string(),
            r.n_equilibria_noflip.to_string(),
            r.n_equilibria_flip.to_string(),
            opt(r.avg_rounds),
            r.pct_equilibrium_games.to_string(),
            r.pct_two_round_cycles.to_string(),
            r.pct_unknown_cycles.to_string(),
            opt(r.differentiation_share),
            r.equality.map(|e| e.name().to_string()).unwrap_or_default(),
            opt(r.margin_bounds.map(|b| b.0)),
            opt(r.margin_bounds.map(|b| b.1)),
        ])?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))
}

/// `levelfreq.csv`: `condition,replication,rule,paramset,feature,level,frequency`.
pub fn write_levelfreq_csv(out: impl Write, rows: &[(RunKey, RunMeasures)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["condition", "replication", "rule", "paramset", "feature", "level", "frequency"])?;
    for (key, r) in rows {
        let Some(lf) = &r.level_frequencies else { continue };
        for f in 0..lf.n_features {
            for lv in 0..lf.n_levels {
                w.write_record([
                    key.condition.clone(),
                    key.replication.to_string(),
                    key.rule.clone(),
                    key.paramset.clone(),
                    f.to_string(),
                    lv.to_string(),
                    lf.get(f, lv).to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))
}
