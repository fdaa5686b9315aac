//! Sequential myopic best-response games over pre-computed best responses.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::market::{BestResponseTable, ScenarioTable};

/// Round cap used when none is configured.
pub const DEFAULT_MAX_ROUNDS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "scenario")]
pub enum GameResult {
    Equilibrium(usize),
    TwoRoundCycle,
    Unknown,
}

impl GameResult {
    pub fn label(&self) -> &'static str {
        match self {
            GameResult::Equilibrium(_) => "equilibrium",
            GameResult::TwoRoundCycle => "two_round_cycle",
            GameResult::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameOutcome {
    /// Partial scenario of firms `1..W` before firm 0's first move.
    pub initial_state: usize,
    pub result: GameResult,
    pub rounds_played: usize,
    /// Complete scenario after the last round played.
    pub final_scenario: usize,
}

/// Plays one game: each round every firm, firm 0 first, switches to its best
/// response. Stops when a round leaves the scenario unchanged.
pub fn play_game(initial_state: usize, mopt: &BestResponseTable, max_rounds: usize) -> GameOutcome {
    assert!(max_rounds >= 2, "a game needs at least two rounds");
    let codec = mopt.codec;
    let mut lines = vec![0usize; codec.n_firms];
    lines[1..].copy_from_slice(&codec.decode_partial(initial_state));
    let mut history: Vec<usize> = Vec::with_capacity(max_rounds);
    for round in 1..=max_rounds {
        for w in 0..codec.n_firms {
            lines[w] = mopt.respond(&lines, w);
        }
        let k = codec.encode(&lines);
        if round >= 2 && history[round - 2] == k {
            return GameOutcome {
                initial_state,
                result: GameResult::Equilibrium(k),
                rounds_played: round,
                final_scenario: k,
            };
        }
        history.push(k);
    }
    let last = history[max_rounds - 1];
    let result = if max_rounds >= 3 && history[max_rounds - 3] == last {
        GameResult::TwoRoundCycle
    } else {
        GameResult::Unknown
    };
    GameOutcome { initial_state, result, rounds_played: max_rounds, final_scenario: last }
}

/// Equilibria holding the same multiset of lines.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipGroup {
    /// Sorted line ranks.
    pub lines: Vec<usize>,
    /// Ascending scenario ranks.
    pub scenarios: Vec<usize>,
}

/// Distinct equilibria of a run, grouped into flips.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSet {
    /// Ascending distinct scenario ranks.
    pub scenarios: Vec<usize>,
    /// Flip groups, ordered by their line multiset.
    pub flip_groups: Vec<FlipGroup>,
    /// Initial states whose game ended in each equilibrium.
    pub provenance: BTreeMap<usize, Vec<usize>>,
}

impl EquilibriumSet {
    pub fn from_scenarios(codec: crate::codec::ScenarioCodec, scenarios: impl IntoIterator<Item = usize>) -> Self {
        let mut set = Self::default();
        for k in scenarios {
            set.insert(codec, k, None);
        }
        set
    }

    fn insert(&mut self, codec: crate::codec::ScenarioCodec, k: usize, from: Option<usize>) {
        let prov = self.provenance.entry(k).or_default();
        if let Some(s) = from {
            prov.push(s);
        }
        if let Err(pos) = self.scenarios.binary_search(&k) {
            self.scenarios.insert(pos, k);
            let mut key = codec.decode(k);
            key.sort_unstable();
            match self.flip_groups.binary_search_by(|g| g.lines.cmp(&key)) {
                Ok(g) => {
                    let group = &mut self.flip_groups[g].scenarios;
                    let at = group.binary_search(&k).unwrap_err();
                    group.insert(at, k);
                }
                Err(g) => self.flip_groups.insert(g, FlipGroup { lines: key, scenarios: vec![k] }),
            }
        }
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSummary {
    /// One outcome per initial state, in initial-state order.
    pub outcomes: Vec<GameOutcome>,
    pub equilibria: EquilibriumSet,
    pub n_equilibrium_games: usize,
    pub n_two_round_cycles: usize,
    pub n_unknown: usize,
}

/// Plays a game from every partial scenario.
pub fn find_all_equilibria(mopt: &BestResponseTable, max_rounds: usize) -> GameSummary {
    let outcomes: Vec<GameOutcome> =
        (0..mopt.codec.n_partial()).into_par_iter().map(|s| play_game(s, mopt, max_rounds)).collect();
    let mut equilibria = EquilibriumSet::default();
    let (mut eq, mut two, mut unknown) = (0, 0, 0);
    for o in &outcomes {
        match o.result {
            GameResult::Equilibrium(k) => {
                eq += 1;
                equilibria.insert(mopt.codec, k, Some(o.initial_state));
            }
            GameResult::TwoRoundCycle => two += 1,
            GameResult::Unknown => unknown += 1,
        }
    }
    GameSummary { outcomes, equilibria, n_equilibrium_games: eq, n_two_round_cycles: two, n_unknown: unknown }
}

/// Every complete scenario in which each firm's line is its own best response.
pub fn fixed_point_scan(m: &ScenarioTable, mopt: &BestResponseTable) -> Vec<usize> {
    let codec = m.codec;
    (0..codec.n_scenarios())
        .into_par_iter()
        .filter(|&k| {
            let lines = codec.decode(k);
            (0..codec.n_firms).all(|w| mopt.respond(&lines, w) == lines[w])
        })
        .collect()
}

/// Outcome log: `initial_state,result,rounds,scenario_rank,lines`, lines `;`-separated.
pub fn write_outcomes_csv(out: impl Write, summary: &GameSummary, codec: crate::codec::ScenarioCodec) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["initial_state", "result", "rounds", "scenario_rank", "lines"])?;
    for o in &summary.outcomes {
        let lines: Vec<String> = codec.decode(o.final_scenario).iter().map(|a| a.to_string()).collect();
        w.write_record([
            o.initial_state.to_string(),
            o.result.label().to_string(),
            o.rounds_played.to_string(),
            o.final_scenario.to_string(),
            lines.join(";"),
        ])?;
    }
    w.flush().map_err(|e| crate::Error::Parse(e.to_string()))?;
    Ok(())
}
