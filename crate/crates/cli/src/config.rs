//! Declarative run configuration read from TOML. Command-line flags are
//! applied on top by `main`.

use std::path::{Path, PathBuf};

use assist_core::analysis::names;
use assist_core::engine::{EngineConfig, SearchLimit, DEFAULT_ELO_RANGE};
use assist_core::orchestrator::MatchConfig;
use assist_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where artifacts are written and, unless overridden, read from.
    pub out_dir: PathBuf,
    pub engine: EngineSection,
    #[serde(rename = "match")]
    pub matches: MatchSection,
    pub calibration: CalibrationSection,
    pub predictors: PredictorSection,
    pub policy: PolicySection,
    pub uplift: UpliftSection,
    pub simulate: SimulateSection,
    pub optimize: OptimizeSection,
    pub gap_grid: GapGridSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            engine: EngineSection::default(),
            matches: MatchSection::default(),
            calibration: CalibrationSection::default(),
            predictors: PredictorSection::default(),
            policy: PolicySection::default(),
            uplift: UpliftSection::default(),
            simulate: SimulateSection::default(),
            optimize: OptimizeSection::default(),
            gap_grid: GapGridSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    /// UCI executable. `ASSIST_ENGINE` fills it in when unset.
    pub path: Option<PathBuf>,
    pub args: Vec<String>,
    /// Use the built-in toy engine instead of a process.
    pub fake: bool,
    pub weak_move_ms: u64,
    pub strong_move_ms: u64,
    /// Fixed search depth; overrides the move times.
    pub depth: Option<u32>,
    pub handshake_timeout_ms: u64,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            path: None,
            args: Vec::new(),
            fake: false,
            weak_move_ms: 100,
            strong_move_ms: 200,
            depth: None,
            handshake_timeout_ms: 10_000,
        }
    }
}

impl EngineSection {
    fn limit(&self, ms: u64) -> SearchLimit {
        match self.depth {
            Some(d) => SearchLimit::Depth(d),
            None => SearchLimit::MoveTimeMs(ms),
        }
    }

    /// Weak and strong templates for a process engine.
    pub fn templates(&self, path: &Path) -> (EngineConfig, EngineConfig) {
        let mut weak = EngineConfig::weak(path, DEFAULT_ELO_RANGE.0).with_args(self.args.clone());
        weak.search_limit = self.limit(self.weak_move_ms);
        weak.handshake_timeout_ms = self.handshake_timeout_ms;
        let mut strong = EngineConfig::strong(path).with_args(self.args.clone());
        strong.search_limit = self.limit(self.strong_move_ms);
        strong.handshake_timeout_ms = self.handshake_timeout_ms;
        (weak, strong)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchSection {
    pub weak_elo: u32,
    pub strong_elo: u32,
    pub samples_per_decision: usize,
    pub horizon: u32,
    pub games: usize,
    pub workers: usize,
    /// Reduced samples per decision.
    pub fast: bool,
}

impl Default for MatchSection {
    fn default() -> Self {
        let m = MatchConfig::default();
        MatchSection {
            weak_elo: m.weak_elo,
            strong_elo: m.strong_elo,
            samples_per_decision: m.samples_per_decision,
            horizon: m.horizon,
            games: 300,
            workers: 1,
            fast: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMethod {
    Isotonic,
    MonotoneNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub method: CalibrationMethod,
    pub bucket_width: u32,
    pub min_samples: usize,
    /// Write calibrated values back into the datasets.
    pub apply: bool,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            method: CalibrationMethod::Isotonic,
            bucket_width: 5,
            min_samples: 30,
            apply: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub family: String,
    pub budget: u32,
}

impl Default for PredictorSection {
    fn default() -> Self {
        PredictorSection {
            family: "linear".into(),
            budget: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Never,
    Always,
    Random,
    Threshold,
    Maxdelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    /// One dataset is played per budget.
    pub budgets: Vec<u32>,
    pub thresholds: Vec<f64>,
    pub slacks: Vec<f64>,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            kind: PolicyKind::Random,
            budgets: vec![1],
            thresholds: Vec::new(),
            slacks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpliftSection {
    pub bin_width: u32,
    pub grid_size: usize,
}

impl Default for UpliftSection {
    fn default() -> Self {
        UpliftSection {
            bin_width: 10,
            grid_size: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub thresholds: Vec<f64>,
    pub runs: u64,
    pub uplift_scales: Vec<f64>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            thresholds: Vec::new(),
            runs: 100_000,
            uplift_scales: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    Simfree,
    Engine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    pub backend: BackendChoice,
    pub k: usize,
    pub init_points: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub candidates: usize,
    pub lower: f64,
    pub upper: f64,
    pub ordered: bool,
    pub games_per_eval: usize,
    pub runs_per_eval: u64,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        let b = assist_core::optimize::BoConfig::default();
        OptimizeSection {
            backend: BackendChoice::Simfree,
            k: 2,
            init_points: b.init_points,
            iterations: b.iterations,
            batch_size: b.batch_size,
            candidates: b.candidates,
            lower: 0.0,
            upper: 0.6,
            ordered: false,
            games_per_eval: 100,
            runs_per_eval: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapGridSection {
    pub n_values: Vec<u32>,
    pub alpha_values: Vec<f64>,
    pub min_cell: usize,
    pub min_elo: Option<u32>,
    pub max_elo: Option<u32>,
}

impl Default for GapGridSection {
    fn default() -> Self {
        GapGridSection {
            n_values: vec![10, 20, 30, 40],
            alpha_values: vec![0.6, 0.7, 0.8, 0.9],
            min_cell: assist_core::analysis::DEFAULT_MIN_CELL,
            min_elo: None,
            max_elo: None,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("{name}: {msg}"))
}

fn unit_interval(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(field(name, format!("{v} is outside [0, 1]"))),
        None => Ok(()),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Config file, then `ASSIST_ENGINE`/`ASSIST_ENGINE_ARGS`, then global flags.
    pub fn resolve(g: &crate::Global) -> Result<Self> {
        let mut cfg = match &g.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if cfg.engine.path.is_none() {
            if let Ok(path) = std::env::var("ASSIST_ENGINE") {
                cfg.engine.path = Some(path.into());
                if cfg.engine.args.is_empty() {
                    if let Ok(args) = std::env::var("ASSIST_ENGINE_ARGS") {
                        cfg.engine.args = args.split_whitespace().map(String::from).collect();
                    }
                }
            }
        }
        if let Some(o) = &g.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        if let Some(e) = &g.engine {
            cfg.engine.path = Some(e.clone());
        }
        if !g.engine_args.is_empty() {
            cfg.engine.args = g.engine_args.clone();
        }
        if let Some(w) = g.workers {
            cfg.matches.workers = w;
        }
        cfg.engine.fake |= g.fake_engine;
        cfg.matches.fast |= g.fast;
        Ok(cfg)
    }

    /// Field-level checks shared by every subcommand.
    pub fn validate(&self) -> Result<()> {
        let m = &self.matches;
        if m.horizon < 1 {
            return Err(field("match.horizon", "must be at least 1"));
        }
        if m.samples_per_decision < 1 {
            return Err(field("match.samples_per_decision", "must be at least 1"));
        }
        if m.workers < 1 {
            return Err(field("match.workers", "must be at least 1"));
        }
        if m.strong_elo < m.weak_elo {
            return Err(field("match.strong_elo", format!("{} is below match.weak_elo {}", m.strong_elo, m.weak_elo)));
        }
        let (lo, hi) = DEFAULT_ELO_RANGE;
        if !(lo..=hi).contains(&m.weak_elo) {
            return Err(field("match.weak_elo", format!("must lie in [{lo}, {hi}]")));
        }
        let e = &self.engine;
        if e.depth == Some(0) {
            return Err(field("engine.depth", "must be positive"));
        }
        if e.weak_move_ms == 0 || e.strong_move_ms == 0 {
            return Err(field("engine.weak_move_ms/strong_move_ms", "must be positive"));
        }
        if self.calibration.bucket_width < 1 {
            return Err(field("calibration.bucket_width", "must be at least 1"));
        }
        unit_interval("policy.thresholds", &self.policy.thresholds)?;
        unit_interval("simulate.thresholds", &self.simulate.thresholds)?;
        if self.simulate.runs < 1 {
            return Err(field("simulate.runs", "must be at least 1"));
        }
        if self.simulate.uplift_scales.iter().any(|l| !(*l >= 0.0)) {
            return Err(field("simulate.uplift_scales", "must be nonnegative"));
        }
        if self.uplift.bin_width < 1 {
            return Err(field("uplift.bin_width", "must be at least 1"));
        }
        if self.uplift.grid_size < 2 {
            return Err(field("uplift.grid_size", "must be at least 2"));
        }
        let o = &self.optimize;
        if o.k < 1 {
            return Err(field("optimize.k", "must be at least 1"));
        }
        if o.iterations < 1 {
            return Err(field("optimize.iterations", "must be at least 1"));
        }
        if o.batch_size < 1 {
            return Err(field("optimize.batch_size", "must be at least 1"));
        }
        if !(o.lower.is_finite() && o.upper.is_finite() && o.lower < o.upper) {
            return Err(field("optimize.lower/upper", "need finite bounds with lower < upper"));
        }
        unit_interval("gap_grid.alpha_values", &self.gap_grid.alpha_values)?;
        if self.gap_grid.n_values.iter().any(|&n| n < 1) {
            return Err(field("gap_grid.n_values", "move numbers start at 1"));
        }
        Ok(())
    }

    pub fn match_config(&self) -> MatchConfig {
        let m = &self.matches;
        let cfg = MatchConfig {
            weak_elo: m.weak_elo,
            strong_elo: m.strong_elo,
            budget: 0,
            samples_per_decision: m.samples_per_decision,
            horizon: m.horizon,
            seed: self.seed,
            games: m.games,
            workers: m.workers,
        };
        if m.fast {
            cfg.fast()
        } else {
            cfg
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn default_input(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.artifact(name))
    }

    pub fn d0_path(&self) -> PathBuf {
        self.artifact(names::D0)
    }
}

/// Fails with one message naming every input that does not exist.
pub fn require_inputs(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!("missing input artifact(s): {}", missing.join(", "))))
    }
}
