//! Experiment configuration and the staged, resumable pipeline.
//!
//! A run directory holds `manifest.json`, the aggregated `measures.csv` and
//! `levelfreq.csv`, and one `rep<r>` directory per replication with a
//! checkpoint per stage. Existing checkpoints are loaded instead of recomputed.

mod conditions;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CODEC_VERSION;
use crate::design::{generate_design, write_design_csv, ChoiceDesign, DesignSpec};
use crate::diagnostics::{
    assess, filter_monotone_draws, psrf, write_assessment_csv, AssessmentReport, CiWeighting, DrawTensor, PsrfReport,
};
use crate::error::{Error, Result};
use crate::hbmxl::{ChainRunner, EstimationData, HyperPriors, McmcSettings};
use crate::market::{
    load_tables, save_tables, table_digest, ChoiceRule, Market, MarketSpec, ParamKind, ParamSet,
    DEFAULT_MAX_UTILITY_CELLS,
};
use crate::metrics::{measures, write_levelfreq_csv, write_measures_csv, RunKey, RunMeasures};
use crate::nash::{find_all_equilibria, write_outcomes_csv, GameSummary, DEFAULT_MAX_ROUNDS};
use crate::prefgen::{generate_preferences, write_preferences_csv, PreferenceSet, PreferenceSpec, VarianceProfile};
use crate::respsim::{simulate_responses, write_choices_csv, ChoiceData, ErrorCalibration, TuningSettings};
use crate::rng::{derive_seed, rng_at, stage};

pub use conditions::{
    base_condition, check_condition, combinatorics, market_spec, resolve_delta, BaseCondition, Combinatorics,
    CostFeature, CostLevel, FeatureCostTable, BASE_CONDITIONS,
};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "EQUISIM_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub keep: usize,
    pub thinning: usize,
    /// Draws kept after filtering and thinning.
    pub n_draws: usize,
    /// Attempts to lengthen the primary chain when the monotone filter falls short.
    pub max_extensions: usize,
    /// Upper bound on the primary chain's kept iterations.
    pub max_keep: usize,
    /// Iterations between chain checkpoints.
    pub checkpoint_every: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            burn_in: 10_000,
            keep: 30_000,
            thinning: 10,
            n_draws: 500,
            max_extensions: 4,
            max_keep: 1_000_000,
            checkpoint_every: 5_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityConfig {
    pub max_scenarios: usize,
    pub max_utility_cells: usize,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self { max_scenarios: 100_000_000, max_utility_cells: DEFAULT_MAX_UTILITY_CELLS }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomCondition {
    pub n_features: usize,
    pub line_size: usize,
    pub n_firms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed; replication seeds are derived from it and the condition.
    pub seed: u64,
    pub replications: usize,
    /// Row of the base-condition table.
    pub base_condition: Option<usize>,
    /// Market size outside the table; excludes `base_condition`.
    pub custom: Option<CustomCondition>,
    pub n_levels: usize,
    pub n_respondents: usize,
    pub n_alternatives: usize,
    pub n_train_sets: usize,
    pub n_holdout_sets: usize,
    pub design_restarts: usize,
    pub design_max_passes: usize,
    pub variance_profile: VarianceProfile,
    pub mrge_target: f64,
    /// 0-based; feature 0 is price.
    pub monotone_features: Vec<usize>,
    pub rules: Vec<ChoiceRule>,
    pub paramsets: Vec<ParamKind>,
    pub mcmc: McmcConfig,
    pub tuning: TuningSettings,
    pub max_rounds: usize,
    pub capacity: CapacityConfig,
    pub alpha: f64,
    pub ci_weighting: CiWeighting,
    /// CSV cost table; the built-in notebook table when absent.
    pub cost_table: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 1,
            replications: 1,
            base_condition: Some(1),
            custom: None,
            n_levels: 5,
            n_respondents: 500,
            n_alternatives: 5,
            n_train_sets: 15,
            n_holdout_sets: 5,
            design_restarts: 50,
            design_max_passes: 50,
            variance_profile: VarianceProfile::Homogeneous,
            mrge_target: 0.125,
            monotone_features: vec![0],
            rules: ChoiceRule::ALL.to_vec(),
            paramsets: ParamKind::ALL.to_vec(),
            mcmc: McmcConfig::default(),
            tuning: TuningSettings::default(),
            max_rounds: DEFAULT_MAX_ROUNDS,
            capacity: CapacityConfig::default(),
            alpha: 0.05,
            ci_weighting: CiWeighting::default(),
            cost_table: None,
        }
    }
}

/// Market size a config resolves to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedCondition {
    pub label: usize,
    pub n_features: usize,
    pub line_size: usize,
    pub n_firms: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Custom sizes are labelled 0.
    pub fn condition(&self) -> Result<ResolvedCondition> {
        match (self.base_condition, self.custom) {
            (Some(_), Some(_)) => {
                Err(Error::ConfigIntegrity("set either base_condition or custom, not both".into()))
            }
            (None, None) => Err(Error::ConfigIntegrity("no condition configured".into())),
            (Some(row), None) => {
                let c = base_condition(row)
                    .ok_or_else(|| Error::ConfigIntegrity(format!("no base condition {row}")))?;
                Ok(ResolvedCondition { label: row, n_features: c.n_features, line_size: c.line_size, n_firms: c.n_firms })
            }
            (None, Some(c)) => Ok(ResolvedCondition {
                label: 0,
                n_features: c.n_features,
                line_size: c.line_size,
                n_firms: c.n_firms,
            }),
        }
    }

    pub fn cost_table(&self) -> Result<FeatureCostTable> {
        match &self.cost_table {
            None => Ok(FeatureCostTable::notebook()),
            Some(p) => FeatureCostTable::from_csv(fs::File::open(p).map_err(|e| Error::io(p, e))?),
        }
    }

    /// Seed of one replication; distinct conditions get distinct streams.
    pub fn replication_seed(&self, replication: usize) -> Result<u64> {
        let c = self.condition()?;
        Ok(derive_seed(self.seed, &[c.n_features as u64, c.line_size as u64, c.n_firms as u64, replication as u64]))
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Checks everything that can be checked before any stage runs,
    /// including the capacity limits.
    pub fn validate(&self) -> Result<Combinatorics> {
        let report = validate_condition_table(self)?;
        let c = self.condition()?;
        let integrity = |msg: String| Err(Error::ConfigIntegrity(msg));
        if self.n_levels != self.n_alternatives {
            return integrity(format!("{} levels but {} alternatives", self.n_levels, self.n_alternatives));
        }
        if self.replications == 0 || self.rules.is_empty() || self.paramsets.is_empty() {
            return integrity("need at least one replication, rule and parameter set".into());
        }
        if let Some(&f) = self.monotone_features.iter().find(|&&f| f >= c.n_features) {
            return integrity(format!("monotone feature {f} outside {} features", c.n_features));
        }
        let m = &self.mcmc;
        if m.thinning == 0 || m.n_draws == 0 || m.keep / m.thinning.max(1) < m.n_draws {
            return integrity(format!(
                "keep {} with thinning {} cannot supply {} draws",
                m.keep, m.thinning, m.n_draws
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || self.max_rounds < 2 {
            return integrity("alpha must lie in (0, 1) and max_rounds must be >= 2".into());
        }
        let table = self.cost_table()?;
        if table.n_levels() != self.n_levels {
            return integrity(format!("cost table has {} levels, config {}", table.n_levels(), self.n_levels));
        }
        if report.n_scenarios > self.capacity.max_scenarios as u128 {
            return Err(Error::Capacity {
                what: format!("competitive scenarios (k) of condition {}", c.label),
                value: report.n_scenarios,
                limit: self.capacity.max_scenarios as u128,
            });
        }
        let cells = report.n_products * (m.n_draws * self.n_respondents) as u128;
        if cells > self.capacity.max_utility_cells as u128 {
            return Err(Error::Capacity {
                what: "utility look-up cells".into(),
                value: cells,
                limit: self.capacity.max_utility_cells as u128,
            });
        }
        Ok(report)
    }
}

/// Recomputes τ, a, k and k⁻ for the configured condition and cross-checks
/// them against the base-condition table.
pub fn validate_condition_table(config: &ExperimentConfig) -> Result<Combinatorics> {
    let c = config.condition()?;
    let report = check_condition(c.n_features, config.n_levels, c.line_size, c.n_firms)?;
    if c.label != 0 && config.n_levels != 5 {
        return Err(Error::ConfigIntegrity(format!(
            "base condition {} assumes 5 levels, config has {}",
            c.label, config.n_levels
        )));
    }
    Ok(report)
}

/// Runs `f` on a pool of `workers` threads (all cores when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::param(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Worker count from the environment, if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| (n > 0).then_some(n))
            .map_err(|_| Error::param(format!("{WORKERS_ENV}={v} is not a worker count"))),
    }
}

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineStage {
    Preferences,
    Design,
    Responses,
    Estimation,
    Diagnostics,
    Tables,
    Nash,
    Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Computed,
    Loaded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvent {
    pub replication: usize,
    pub stage: String,
    pub status: StageStatus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub crate_version: String,
    pub codec_version: u32,
    pub condition: ResolvedCondition,
    pub replication_seeds: Vec<u64>,
    pub seed_derivation: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub combinatorics: Combinatorics,
    pub rows: Vec<(RunKey, RunMeasures)>,
    pub stages: Vec<StageEvent>,
}

impl ExperimentReport {
    pub fn computed(&self, stage: &str) -> bool {
        self.stages.iter().any(|e| e.stage == stage && e.status == StageStatus::Computed)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

fn wrap(name: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage: name.to_string(), source: Box::new(e) },
    }
}

struct Replication<'a> {
    config: &'a ExperimentConfig,
    until: PipelineStage,
    condition: ResolvedCondition,
    index: usize,
    seed: u64,
    dir: PathBuf,
    events: Vec<StageEvent>,
}

impl Replication<'_> {
    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn log(&mut self, stage: &str, status: StageStatus) {
        self.events.push(StageEvent { replication: self.index, stage: stage.to_string(), status });
    }

    /// Loads `<name>.json` when present, otherwise computes, exports and stores it.
    fn stage<T: Serialize + DeserializeOwned>(
        &mut self,
        name: &str,
        compute: impl FnOnce(&mut Self) -> Result<T>,
        export: impl FnOnce(&Self, &T) -> Result<()>,
    ) -> Result<T> {
        let path = self.path(&format!("{name}.json"));
        if path.exists() {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let value = serde_json::from_slice(&bytes).map_err(|e| wrap(name)(e.into()))?;
            self.log(name, StageStatus::Loaded);
            return Ok(value);
        }
        let value = compute(self).map_err(wrap(name))?;
        export(self, &value).map_err(wrap(name))?;
        write_atomic(&path, &serde_json::to_vec(&value)?)?;
        self.log(name, StageStatus::Computed);
        Ok(value)
    }
}

#[derive(Serialize, Deserialize)]
struct Responses {
    calibration: ErrorCalibration,
    train: ChoiceData,
    holdout: ChoiceData,
}

#[derive(Serialize, Deserialize)]
struct MarketStage {
    spec: MarketSpec,
    /// Levels drawn for the features left out of the market.
    excluded_levels: Vec<usize>,
}

/// Runs a chain to its configured end, checkpointing along the way.
fn run_checkpointed(runner: &mut ChainRunner, path: &Path, every: usize) -> Result<()> {
    while !runner.is_finished() {
        runner.advance(every.max(1))?;
        runner.save(path)?;
    }
    if !path.exists() {
        runner.save(path)?;
    }
    Ok(())
}

fn open_chain(
    path: &Path,
    data: &EstimationData,
    priors: &HyperPriors,
    settings: &McmcSettings,
    seed: u64,
) -> Result<ChainRunner> {
    if path.exists() {
        ChainRunner::from_checkpoint(path, data.clone(), priors.clone())
    } else {
        ChainRunner::new(data.clone(), priors.clone(), settings.clone(), seed)
    }
}

fn run_replication(rep: &mut Replication<'_>) -> Result<Vec<(RunKey, RunMeasures)>> {
    let config = rep.config;
    let cond = rep.condition;
    let seed = rep.seed;

    let prefs: PreferenceSet = rep.stage(
        "preferences",
        |_| {
            generate_preferences(&PreferenceSpec {
                n_features: cond.n_features,
                n_levels: config.n_levels,
                n_respondents: config.n_respondents,
                variance_profile: config.variance_profile,
                monotone_features: config.monotone_features.clone(),
                seed,
            })
        },
        |r, p| write_with(&r.path("preferences.csv"), |buf| write_preferences_csv(p, buf)),
    )?;

    if rep.until == PipelineStage::Preferences {
        return Ok(Vec::new());
    }
    let (train, holdout): (ChoiceDesign, ChoiceDesign) = rep.stage(
        "design",
        |_| {
            generate_design(&DesignSpec {
                n_features: cond.n_features,
                n_levels: config.n_levels,
                n_alternatives: config.n_alternatives,
                n_train_sets: config.n_train_sets,
                n_holdout_sets: config.n_holdout_sets,
                n_random_starts: config.design_restarts,
                seed,
                max_passes: config.design_max_passes,
            })
        },
        |r, (t, h)| write_with(&r.path("design.csv"), |buf| write_design_csv(&[t, h], buf)),
    )?;

    if rep.until == PipelineStage::Design {
        return Ok(Vec::new());
    }
    let responses: Responses = rep.stage(
        "responses",
        |_| {
            let (calibration, train_data, holdout_data) =
                simulate_responses(&prefs.b, &train, &holdout, config.mrge_target, config.tuning, seed)?;
            Ok(Responses { calibration, train: train_data, holdout: holdout_data })
        },
        |r, v| write_with(&r.path("choices.csv"), |buf| write_choices_csv(&v.train, buf)),
    )?;

    if rep.until == PipelineStage::Responses {
        return Ok(Vec::new());
    }
    let data = EstimationData::new(&train, &responses.train).map_err(wrap("estimation"))?;
    let priors = HyperPriors::default_for(data.n_params);
    let m = &config.mcmc;
    let settings = McmcSettings::new(m.burn_in, m.keep, m.thinning);
    let (primary_path, secondary_path) = (rep.path("chain_primary.bin"), rep.path("chain_secondary.bin"));

    let psrf_report: PsrfReport = rep.stage(
        "psrf",
        |_| {
            let run = |path: &Path, tag: u64| -> Result<crate::hbmxl::McmcChain> {
                let mut runner = open_chain(path, &data, &priors, &settings, derive_seed(seed, &[tag]))?;
                run_checkpointed(&mut runner, path, m.checkpoint_every)?;
                Ok(runner.snapshot())
            };
            let (a, b) = rayon::join(
                || run(&primary_path, stage::CHAIN_PRIMARY),
                || run(&secondary_path, stage::CHAIN_SECONDARY),
            );
            psrf(&a?, &b?, m.burn_in)
        },
        |_, _| Ok(()),
    )?;

    let draws: DrawTensor = rep.stage(
        "draws",
        |_| {
            let mut runner =
                open_chain(&primary_path, &data, &priors, &settings, derive_seed(seed, &[stage::CHAIN_PRIMARY]))?;
            run_checkpointed(&mut runner, &primary_path, m.checkpoint_every)?;
            let mut extensions = 0;
            loop {
                let chain = runner.snapshot();
                match filter_monotone_draws(&chain, config.n_levels, &config.monotone_features, m.n_draws, m.thinning) {
                    Err(Error::NeedsLongerChain { estimated_length: Some(needed), .. })
                        if extensions < m.max_extensions && runner.settings().keep < m.max_keep =>
                    {
                        let keep = runner.settings().keep;
                        let target = (needed + needed / 10).clamp(keep + m.thinning, m.max_keep);
                        runner.extend(target - keep);
                        run_checkpointed(&mut runner, &primary_path, m.checkpoint_every)?;
                        extensions += 1;
                    }
                    other => return other,
                }
            }
        },
        |_, _| Ok(()),
    )?;

    if rep.until == PipelineStage::Estimation {
        return Ok(Vec::new());
    }
    let truth = &prefs.b;
    let scale = responses.calibration.scale;
    let _assessment: AssessmentReport = rep.stage(
        "assessment",
        |_| {
            assess(
                &draws,
                truth,
                scale,
                &holdout,
                &responses.holdout,
                Some(psrf_report.clone()),
                config.alpha,
                config.ci_weighting,
            )
        },
        |r, a| write_with(&r.path("assessment.csv"), |buf| write_assessment_csv(a, buf)),
    )?;

    if rep.until == PipelineStage::Diagnostics {
        return Ok(Vec::new());
    }
    let market: MarketStage = rep.stage(
        "market",
        |_| {
            let table = config.cost_table()?;
            let mut rng = rng_at(seed, &[stage::DELTA]);
            let (delta, excluded_levels) = resolve_delta(&table, cond.n_features - 1, &mut rng)?;
            let spec = market_spec(&table, cond.n_features, delta, cond.n_firms, cond.line_size)?;
            Ok(MarketStage { spec, excluded_levels })
        },
        |_, _| Ok(()),
    )?;

    let point = draws.mean();
    let mut kinds = config.paramsets.clone();
    // reference equilibria come from the true parameters, so evaluate them first
    kinds.sort_by_key(|k| *k != ParamKind::True);
    let mut rows: BTreeMap<(usize, usize), (RunKey, RunMeasures)> = BTreeMap::new();
    for (ri, &rule) in config.rules.iter().enumerate() {
        let mut reference: Option<Vec<usize>> = None;
        for &kind in &kinds {
            let params = match kind {
                ParamKind::Draws => ParamSet::draws(draws.clone(), rule),
                ParamKind::Point => ParamSet::point(&point, rule),
                ParamKind::True => ParamSet::truth(truth, scale, rule),
            };
            let tag = format!("{}_{}", rule.name(), kind.name());
            let tables_path = rep.path(&format!("tables_{tag}.bin"));
            let digest = table_digest(&market.spec, &params);
            let layout;
            let (mt, mopt) = if tables_path.exists() {
                layout = crate::market::MarketLayout::new(
                    market.spec.n_features,
                    market.spec.n_levels,
                    market.spec.line_size,
                    market.spec.n_firms,
                )?;
                rep.log(&format!("tables_{tag}"), StageStatus::Loaded);
                load_tables(&tables_path, &digest).map_err(wrap("tables"))?
            } else {
                let mk = Market::with_capacity(&market.spec, &params, config.capacity.max_utility_cells)
                    .map_err(wrap("tables"))?;
                layout = mk.layout();
                let t = mk.precompute(config.capacity.max_scenarios).map_err(wrap("tables"))?;
                save_tables(&tables_path, &digest, &t.0, &t.1)?;
                rep.log(&format!("tables_{tag}"), StageStatus::Computed);
                t
            };
            if rep.until == PipelineStage::Tables {
                continue;
            }
            let summary: GameSummary = rep.stage(
                &format!("nash_{tag}"),
                |_| Ok(find_all_equilibria(&mopt, config.max_rounds)),
                |r, s| {
                    write_with(&r.path(&format!("outcomes_{tag}.csv")), |buf| write_outcomes_csv(buf, s, mopt.codec))
                },
            )?;
            if kind == ParamKind::True {
                reference = Some(summary.equilibria.scenarios.clone());
            }
            let measured = measures(&summary, &mt, &layout, reference.as_deref());
            let ki = config.paramsets.iter().position(|&k| k == kind).unwrap();
            let key = RunKey {
                condition: cond.label.to_string(),
                replication: rep.index,
                rule: rule.name().into(),
                paramset: kind.name().into(),
            };
            rows.insert((ri, ki), (key, measured));
        }
    }
    Ok(rows.into_values().collect())
}

/// Runs (or resumes) every replication of `config` under `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<ExperimentReport> {
    run_until(config, dir, PipelineStage::Metrics)
}

/// Runs the pipeline through `until`; measures are written only by the last stage.
pub fn run_until(config: &ExperimentConfig, dir: &Path, until: PipelineStage) -> Result<ExperimentReport> {
    let combinatorics = config.validate()?;
    let condition = config.condition()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seeds = (0..config.replications).map(|r| config.replication_seed(r)).collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        config_hash: config.hash(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        codec_version: CODEC_VERSION,
        condition,
        replication_seeds: seeds.clone(),
        seed_derivation: "splitmix64 fold of (master seed, n_features, line_size, n_firms, replication); \
                          stages fold in tags preferences=1 design=2 errors=3 chains=4/5 delta=6"
            .into(),
    };
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let old: Manifest = serde_json::from_slice(&fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?)?;
        if old.config_hash != manifest.config_hash {
            return Err(Error::CheckpointMismatch(format!(
                "{} belongs to a different configuration",
                dir.display()
            )));
        }
    }
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;

    let mut rows = Vec::new();
    let mut stages = Vec::new();
    for (index, &seed) in seeds.iter().enumerate() {
        let rep_dir = dir.join(format!("rep{index}"));
        fs::create_dir_all(&rep_dir).map_err(|e| Error::io(&rep_dir, e))?;
        let mut rep = Replication { config, until, condition, index, seed, dir: rep_dir, events: Vec::new() };
        let result = run_replication(&mut rep);
        stages.append(&mut rep.events);
        rows.extend(result?);
    }
    if until == PipelineStage::Metrics {
        write_with(&dir.join("measures.csv"), |buf| write_measures_csv(buf, &rows))?;
        write_with(&dir.join("levelfreq.csv"), |buf| write_levelfreq_csv(buf, &rows))?;
    }
    Ok(ExperimentReport { dir: dir.to_path_buf(), combinatorics, rows, stages })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            seed: 7,
            n_respondents: 24,
            n_train_sets: 10,
            n_holdout_sets: 5,
            design_restarts: 2,
            design_max_passes: 5,
            mcmc: McmcConfig {
                burn_in: 200,
                keep: 400,
                thinning: 4,
                n_draws: 20,
                max_extensions: 3,
                max_keep: 20_000,
                checkpoint_every: 250,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
            name = "desk"
            seed = 3
            base_condition = 4
            rules = ["first"]
            paramsets = ["true", "point"]
            [mcmc]
            burn_in = 100
            keep = 200
            thinning = 2
            n_draws = 50
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.condition().unwrap().line_size, 2);
        assert_eq!(c.mcmc.max_extensions, 4);
        assert_eq!(c.paramsets, vec![ParamKind::True, ParamKind::Point]);
        assert_eq!(ExperimentConfig::from_toml(&toml::to_string(&c).unwrap()).unwrap(), c);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn validation_guards() {
        let mut c = ExperimentConfig { base_condition: Some(8), ..ExperimentConfig::default() };
        let report = validate_condition_table(&c).unwrap();
        assert_eq!((report.n_lines, report.n_scenarios), (2_300, 5_290_000));
        c.capacity.max_scenarios = 1_000_000;
        assert!(matches!(c.validate(), Err(Error::Capacity { value: 5_290_000, .. })));
        c.custom = Some(CustomCondition { n_features: 2, line_size: 1, n_firms: 2 });
        assert!(matches!(c.condition(), Err(Error::ConfigIntegrity(_))));
        let c = ExperimentConfig { base_condition: Some(17), ..ExperimentConfig::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { monotone_features: vec![2], ..ExperimentConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeds_differ_by_condition_and_replication() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { base_condition: Some(2), ..ExperimentConfig::default() };
        assert_ne!(a.replication_seed(0).unwrap(), a.replication_seed(1).unwrap());
        assert_ne!(a.replication_seed(0).unwrap(), b.replication_seed(0).unwrap());
    }

    #[test]
    fn pipeline_resumes_from_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let first = run_experiment(&config, dir.path()).unwrap();
        assert_eq!(first.rows.len(), 6);
        assert!(first.computed("psrf"));
        let rep = dir.path().join("rep0");
        for entry in fs::read_dir(&rep).unwrap() {
            let p = entry.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            if name.starts_with("nash_") || name.starts_with("outcomes_") {
                fs::remove_file(p).unwrap();
            }
        }
        let measures = fs::read(dir.path().join("measures.csv")).unwrap();
        let second = run_experiment(&config, dir.path()).unwrap();
        assert!(!second.computed("psrf") && !second.computed("draws") && !second.computed("preferences"));
        assert!(second.computed("nash_first_draws"));
        assert_eq!(fs::read(dir.path().join("measures.csv")).unwrap(), measures);
        let outcome_logs = fs::read_dir(&rep)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("outcomes_"))
            .count();
        assert_eq!(outcome_logs, 6);

        let staged = tempfile::tempdir().unwrap();
        let partial = run_until(&config, staged.path(), PipelineStage::Design).unwrap();
        assert!(partial.rows.is_empty() && !partial.computed("responses"));
        assert!(staged.path().join("rep0/design.csv").exists());

        let other = ExperimentConfig { seed: 8, ..config };
        assert!(matches!(run_experiment(&other, dir.path()), Err(Error::CheckpointMismatch(_))));
    }
}
