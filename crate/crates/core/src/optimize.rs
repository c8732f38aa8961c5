//! Bayesian optimization of threshold and slack vectors: a Gaussian-process
//! surrogate with expected improvement over a quasi-random candidate set.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_json_doc, write_json_doc, Provenance};
use crate::calibration::CalibrationBank;
use crate::error::{Error, Result};
use crate::orchestrator::{play_match, GameStatus, MatchConfig, SessionSource};
use crate::policies::{GapScale, Policy, ThresholdPolicy};
use crate::simfree::{avg_score, MoveBank, SimConfig, UpliftTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Sort every proposal so that `x_1 <= ... <= x_K`.
    #[serde(default)]
    pub ordered: bool,
}

impl SearchSpace {
    /// `k` thresholds in `[0, 0.6]`.
    pub fn thresholds(k: usize) -> Self {
        SearchSpace {
            lower: vec![0.0; k],
            upper: vec![0.6; k],
            ordered: false,
        }
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>, ordered: bool) -> Result<Self> {
        let s = SearchSpace { lower, upper, ordered };
        s.validate()?;
        Ok(s)
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::config("search space needs matching, nonempty bounds"));
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::config(format!("bad bounds [{lo}, {hi}]")));
            }
        }
        if self.ordered {
            // Sorting a vector must keep every coordinate inside its own bounds.
            let same = self.lower.windows(2).all(|w| w[0] == w[1])
                && self.upper.windows(2).all(|w| w[0] == w[1]);
            if !same {
                return Err(Error::config("ordered search needs identical bounds per dimension"));
            }
        }
        Ok(())
    }

    fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = u
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(u, (lo, hi))| (lo + u * (hi - lo)).clamp(*lo, *hi))
            .collect();
        if self.ordered {
            x.sort_by(f64::total_cmp);
        }
        x
    }

    fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (lo, hi))| (x - lo) / (hi - lo))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Engine,
    Simfree,
    /// A closed-form test function.
    Analytic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub value: f64,
    /// Standard error of `value`.
    pub noise: f64,
}

pub trait Objective: Sync {
    fn evaluate(&self, params: &[f64]) -> Result<Evaluation>;
    fn backend(&self) -> Backend;
}

/// Wraps a deterministic function with zero reported noise.
pub struct FnObjective<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for FnObjective<F> {
    fn evaluate(&self, params: &[f64]) -> Result<Evaluation> {
        Ok(Evaluation {
            value: (self.0)(params),
            noise: 0.0,
        })
    }

    fn backend(&self) -> Backend {
        Backend::Analytic
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Proposal {
    Initial,
    ExpectedImprovement,
    /// The surrogate was degenerate (too few or constant observations).
    RandomFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Vec<f64>,
    pub value: Option<f64>,
    pub noise_estimate: Option<f64>,
    pub backend: Backend,
    pub proposal: Proposal,
    /// Wall-clock seconds spent in the objective.
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub init_points: usize,
    pub iterations: usize,
    pub candidates: usize,
    /// Points evaluated in parallel per surrogate update.
    pub batch_size: usize,
    /// Exploration margin in standardized units.
    pub xi: f64,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            init_points: 8,
            iterations: 25,
            candidates: 4096,
            batch_size: 1,
            xi: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoResult {
    pub best_params: Vec<f64>,
    pub best_value: f64,
    pub trials: Vec<Trial>,
}

const LENGTH_GRID: [f64; 8] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0];
const NOISE_GRID: [f64; 6] = [1e-6, 1e-4, 1e-3, 1e-2, 0.05, 0.2];
const JITTER: f64 = 1e-9;

/// Squared-exponential GP on unit-cube inputs and standardized outputs.
struct Gp {
    xs: Vec<Vec<f64>>,
    lengths: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn kernel(a: &[f64], b: &[f64], lengths: &[f64]) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(lengths)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    (-0.5 * r2).exp()
}

impl Gp {
    fn fit_with(xs: &[Vec<f64>], ys: &DVector<f64>, lengths: &[f64], noise: f64) -> Option<(Gp, f64)> {
        let n = xs.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel(&xs[i], &xs[j], lengths) + if i == j { noise + JITTER } else { 0.0 }
        });
        let chol = k.cholesky()?;
        let alpha = chol.solve(ys);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let lml = -0.5 * ys.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * PI).ln();
        Some((
            Gp {
                xs: xs.to_vec(),
                lengths: lengths.to_vec(),
                chol,
                alpha,
            },
            lml,
        ))
    }

    /// Isotropic grid search over length scale and noise, then one
    /// coordinate sweep over per-dimension length scales.
    fn fit(xs: &[Vec<f64>], ys: &DVector<f64>, noise_floor: f64) -> Option<Gp> {
        let dims = xs[0].len();
        let noises: Vec<f64> = NOISE_GRID.iter().map(|n| n.max(noise_floor)).collect();
        let mut best: Option<(Gp, f64, f64)> = None;
        let consider = |lengths: &[f64], noise: f64, best: &mut Option<(Gp, f64, f64)>| {
            if let Some((gp, lml)) = Gp::fit_with(xs, ys, lengths, noise) {
                if best.as_ref().is_none_or(|(_, b, _)| lml > *b) {
                    *best = Some((gp, lml, noise));
                }
            }
        };
        for &l in &LENGTH_GRID {
            for &noise in &noises {
                consider(&vec![l; dims], noise, &mut best);
            }
        }
        if dims > 1 {
            for d in 0..dims {
                let (lengths, noise) = {
                    let (gp, _, noise) = best.as_ref()?;
                    (gp.lengths.clone(), *noise)
                };
                for &l in &LENGTH_GRID {
                    let mut trial = lengths.clone();
                    trial[d] = l;
                    consider(&trial, noise, &mut best);
                }
            }
        }
        best.map(|(gp, _, _)| gp)
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| kernel(xi, x, &self.lengths)),
        );
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .unwrap_or_else(|| DVector::zeros(self.xs.len()));
        let var = (1.0 - v.dot(&v)).max(1e-12);
        (mean, var.sqrt())
    }
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mean: f64, sd: f64, best: f64, xi: f64) -> f64 {
    if sd <= 0.0 {
        return (mean - best - xi).max(0.0);
    }
    let z = (mean - best - xi) / sd;
    (mean - best - xi) * norm_cdf(z) + sd * norm_pdf(z)
}

/// Halton points in the unit cube, shifted by a random offset modulo 1.
fn halton_candidates(dims: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    const PRIMES: [u8; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
    let columns: Vec<Vec<f64>> = (0..dims)
        .map(|d| {
            let shift: f64 = rng.random();
            halton::Sequence::new(PRIMES[d % PRIMES.len()])
                .take(count)
                .map(|u| (u + shift).fract())
                .collect()
        })
        .collect();
    (0..count).map(|i| columns.iter().map(|c| c[i]).collect()).collect()
}

fn uniform_point(dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dims).map(|_| rng.random()).collect()
}

/// Proposes the next batch from the successful trials so far.
fn propose(
    space: &SearchSpace,
    trials: &[Trial],
    cfg: &BoConfig,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Proposal) {
    let ok: Vec<&Trial> = trials.iter().filter(|t| t.value.is_some()).collect();
    let ys: Vec<f64> = ok.iter().filter_map(|t| t.value).collect();
    let n = ys.len();
    let mean = ys.iter().sum::<f64>() / n.max(1) as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    let random = |rng: &mut ChaCha8Rng| {
        let pts = (0..batch)
            .map(|_| space.from_unit(&uniform_point(space.dims(), rng)))
            .collect();
        (pts, Proposal::RandomFallback)
    };
    if n < 2 || var <= 1e-24 {
        return random(rng);
    }
    let sd = var.sqrt();
    let xs: Vec<Vec<f64>> = ok.iter().map(|t| space.to_unit(&t.params)).collect();
    let yv = DVector::from_iterator(n, ys.iter().map(|y| (y - mean) / sd));
    let noise_floor = ok
        .iter()
        .map(|t| t.noise_estimate.unwrap_or(0.0).powi(2))
        .sum::<f64>()
        / n as f64
        / var;
    let Some(gp) = Gp::fit(&xs, &yv, noise_floor) else {
        return random(rng);
    };
    let best = yv.max();
    let candidates: Vec<Vec<f64>> = halton_candidates(space.dims(), cfg.candidates, rng)
        .into_iter()
        .map(|u| space.to_unit(&space.from_unit(&u)))
        .collect();
    let mut scored: Vec<(f64, usize)> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let (m, s) = gp.predict(u);
            (expected_improvement(m, s, best, cfg.xi), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let pts = scored
        .iter()
        .take(batch)
        .map(|&(_, i)| space.from_unit(&candidates[i]))
        .collect();
    (pts, Proposal::ExpectedImprovement)
}

/// Maximizes `objective` over `space`: `init_points` uniform draws, then
/// `iterations` GP-guided proposals. Failed evaluations are recorded and
/// skipped. `on_trial` sees every trial as it completes.
pub fn bayes_opt(
    objective: &dyn Objective,
    space: &SearchSpace,
    cfg: &BoConfig,
    on_trial: &mut dyn FnMut(&Trial) -> Result<()>,
) -> Result<BoResult> {
    space.validate()?;
    if cfg.iterations < 1 {
        return Err(Error::config("need at least one iteration"));
    }
    if cfg.candidates < 1 || cfg.batch_size < 1 {
        return Err(Error::config("candidate count and batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials: Vec<Trial> = Vec::new();
    let total = cfg.init_points + cfg.iterations;
    while trials.len() < total {
        let batch = cfg.batch_size.min(total - trials.len());
        let (points, proposal) = if trials.len() < cfg.init_points {
            let b = batch.min(cfg.init_points - trials.len());
            let pts = (0..b)
                .map(|_| space.from_unit(&uniform_point(space.dims(), &mut rng)))
                .collect();
            (pts, Proposal::Initial)
        } else {
            propose(space, &trials, cfg, batch, &mut rng)
        };
        let results: Vec<(Result<Evaluation>, f64)> = points
            .par_iter()
            .map(|p| {
                let start = Instant::now();
                let r = objective.evaluate(p);
                (r, start.elapsed().as_secs_f64())
            })
            .collect();
        for (params, (r, cost)) in points.into_iter().zip(results) {
            let (value, noise_estimate, error) = match r {
                Ok(e) if e.value.is_finite() && (0.0..=1.0).contains(&e.value) => {
                    (Some(e.value), Some(e.noise), None)
                }
                Ok(e) => (None, None, Some(format!("objective value {} outside [0, 1]", e.value))),
                Err(e) => (None, None, Some(e.to_string())),
            };
            let trial = Trial {
                index: trials.len(),
                params,
                value,
                noise_estimate,
                backend: objective.backend(),
                proposal,
                cost,
                error,
            };
            on_trial(&trial)?;
            trials.push(trial);
        }
    }
    incumbent(trials)
}

/// Best successful trial; ties keep the earliest.
fn incumbent(trials: Vec<Trial>) -> Result<BoResult> {
    let best = trials
        .iter()
        .filter(|t| t.value.is_some())
        .fold(None::<&Trial>, |b, t| match b {
            Some(b) if b.value >= t.value => Some(b),
            _ => Some(t),
        })
        .ok_or_else(|| Error::data("every objective evaluation failed"))?;
    Ok(BoResult {
        best_params: best.params.clone(),
        best_value: best.value.unwrap_or_default(),
        trials,
    })
}

/// Pure random search with the same evaluation count and bounds.
pub fn random_search(objective: &dyn Objective, space: &SearchSpace, evaluations: usize, seed: u64) -> Result<BoResult> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(evaluations);
    for index in 0..evaluations {
        let params = space.from_unit(&uniform_point(space.dims(), &mut rng));
        let start = Instant::now();
        let r = objective.evaluate(&params);
        let (value, noise_estimate, error) = match r {
            Ok(e) => (Some(e.value), Some(e.noise), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        trials.push(Trial {
            index,
            params,
            value,
            noise_estimate,
            backend: objective.backend(),
            proposal: Proposal::RandomFallback,
            cost: start.elapsed().as_secs_f64(),
            error,
        });
    }
    incumbent(trials)
}

/// Engine-free objective: `avg_score` of the threshold vector.
pub struct SimfreeObjective {
    pub bank: MoveBank,
    pub uplift: UpliftTable,
    pub sim: SimConfig,
}

pub fn make_simfree_objective(bank: MoveBank, uplift: UpliftTable, sim: SimConfig) -> SimfreeObjective {
    SimfreeObjective { bank, uplift, sim }
}

impl Objective for SimfreeObjective {
    fn evaluate(&self, params: &[f64]) -> Result<Evaluation> {
        let r = avg_score(&self.bank, &self.uplift, params, &self.sim)?;
        Ok(Evaluation {
            value: r.avg_score,
            noise: r.std_error,
        })
    }

    fn backend(&self) -> Backend {
        Backend::Simfree
    }
}

/// Engine objective: mean result of `games_per_eval` fresh threshold-policy
/// games. Each evaluation draws a new seed block.
pub struct EngineObjective {
    pub config: MatchConfig,
    pub source: Box<dyn SessionSource + Send>,
    pub bank: Option<CalibrationBank>,
    pub scale: GapScale,
    pub games_per_eval: usize,
    evaluations: AtomicU64,
}

pub fn make_engine_objective(
    config: MatchConfig,
    source: Box<dyn SessionSource + Send>,
    bank: Option<CalibrationBank>,
    games_per_eval: usize,
) -> EngineObjective {
    EngineObjective {
        scale: if bank.is_some() { GapScale::Calibrated } else { GapScale::Raw },
        config,
        source,
        bank,
        games_per_eval,
        evaluations: AtomicU64::new(0),
    }
}

impl Objective for EngineObjective {
    fn evaluate(&self, params: &[f64]) -> Result<Evaluation> {
        let n = self.evaluations.fetch_add(1, Ordering::SeqCst);
        let cfg = MatchConfig {
            budget: params.len() as u32,
            games: self.games_per_eval,
            seed: self.config.seed.wrapping_add(n.wrapping_mul(1_000_003)),
            ..self.config.clone()
        };
        let mut policy = ThresholdPolicy::new(params.to_vec())?;
        policy.scale = self.scale;
        let make = |_: &mut ChaCha8Rng| Ok(Policy::Threshold(policy.clone()));
        let quiet = |_: &GameStatus| {};
        let (records, _) = play_match(&cfg, self.source.as_ref(), self.bank.as_ref(), &make, &quiet)?;
        if records.is_empty() {
            return Err(Error::data("every game of the evaluation aborted"));
        }
        let m = records.len() as f64;
        let mean = records.iter().map(|r| r.result).sum::<f64>() / m;
        Ok(Evaluation {
            value: mean,
            noise: (mean * (1.0 - mean) / m).sqrt(),
        })
    }

    fn backend(&self) -> Backend {
        Backend::Engine
    }
}

/// Appends trials to a JSONL log, one object per line, after a header line
/// holding the schema version and provenance. The log grows under a
/// `.partial` name and takes its final name on [`TrialLog::finish`].
pub struct TrialLog {
    file: std::io::BufWriter<std::fs::File>,
    partial: std::path::PathBuf,
    path: std::path::PathBuf,
}

impl TrialLog {
    pub fn create(path: &Path, provenance: Option<&Provenance>) -> Result<Self> {
        let mut name = path.as_os_str().to_owned();
        name.push(".partial");
        let partial = std::path::PathBuf::from(name);
        let file = std::fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        let mut log = TrialLog {
            file: std::io::BufWriter::new(file),
            partial,
            path: path.to_path_buf(),
        };
        let mut header = serde_json::json!({ "schema_version": crate::game::SCHEMA_VERSION });
        if let Some(p) = provenance {
            header["provenance"] = serde_json::to_value(p)?;
        }
        log.line(&header.to_string())?;
        Ok(log)
    }

    fn line(&mut self, line: &str) -> Result<()> {
        use std::io::Write;
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.partial, e))
    }

    pub fn append(&mut self, trial: &Trial) -> Result<()> {
        let line = serde_json::to_string(trial)?;
        self.line(&line)
    }

    pub fn finish(self) -> Result<()> {
        let TrialLog { file, partial, path } = self;
        let file = file.into_inner().map_err(|e| Error::io(&partial, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&partial, e))?;
        std::fs::rename(&partial, &path).map_err(|e| Error::io(&path, e))
    }
}

pub fn write_result(path: &Path, result: &BoResult, provenance: Option<&Provenance>) -> Result<()> {
    write_json_doc(path, "result", result, provenance)
}

pub fn read_result(path: &Path) -> Result<BoResult> {
    read_json_doc(path, "result")
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = crate::artifact::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.contains("\"schema_version\"") => {
            let header: serde_json::Value = serde_json::from_str(l)?;
            if header["schema_version"].as_u64() != Some(u64::from(crate::game::SCHEMA_VERSION)) {
                return Err(Error::data(format!("{}: unsupported schema version", path.display())));
            }
        }
        _ => return Err(Error::data(format!("{}: missing trial log header", path.display()))),
    }
    lines
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
