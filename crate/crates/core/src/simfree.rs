//! Engine-free game simulator: per-move banks of calibrated pairs from
//! no-intervention games, an uplift table learned from single-intervention
//! games, and Monte Carlo scoring of threshold vectors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_json_doc, write_json_doc, Provenance};
use crate::calibration::{fit_isotonic, CalibrationPair, IsotonicCurve};
use crate::error::{Error, Result};
use crate::game::{gap, Dataset, DatasetKind};

/// `banks[t - 1]` holds the `(p_w, p_s)` pairs seen at White move `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveBank {
    pub horizon: u32,
    pub banks: Vec<Vec<(f64, f64)>>,
    pub baseline_mean: f64,
}

impl MoveBank {
    pub fn at(&self, move_number: u32) -> &[(f64, f64)] {
        self.banks
            .get(move_number as usize - 1)
            .map_or(&[], Vec::as_slice)
    }

    pub fn total_pairs(&self) -> usize {
        self.banks.iter().map(Vec::len).sum()
    }
}

pub fn build_banks(d0: &Dataset, horizon: u32) -> Result<MoveBank> {
    if horizon < 1 {
        return Err(Error::config("horizon must be at least 1"));
    }
    let baseline_mean = d0
        .mean_result()
        .ok_or_else(|| Error::data("cannot build banks from an empty dataset"))?;
    let mut banks = vec![Vec::new(); horizon as usize];
    for r in &d0.records {
        for p in &r.points {
            if p.move_number == 0 || p.move_number > horizon {
                continue;
            }
            let pair = p
                .calibrated()
                .ok_or_else(|| Error::data(format!("game {} is not calibrated", r.game_id)))?;
            banks[p.move_number as usize - 1].push(pair);
        }
    }
    Ok(MoveBank {
        horizon,
        banks,
        baseline_mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftBin {
    pub first_move: u32,
    pub last_move: u32,
    pub mu1: Option<IsotonicCurve>,
    pub mu0: Option<IsotonicCurve>,
    /// No usable intervention data; `delta` is identically zero.
    pub empty: bool,
    /// `Delta` at the grid nodes `i / (len - 1)`.
    pub delta: Vec<f64>,
    /// Intervention samples whose gap rounds to each node.
    pub support_treated: Vec<u32>,
    /// No-intervention samples whose gap rounds to each node.
    pub support_control: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftTable {
    pub bin_width: u32,
    pub grid_size: usize,
    pub bins: Vec<UpliftBin>,
}

impl UpliftTable {
    pub fn bin_of(&self, move_number: u32) -> usize {
        ((move_number.max(1) - 1) / self.bin_width) as usize
    }

    pub fn bin_for(&self, move_number: u32) -> &UpliftBin {
        &self.bins[self.bin_of(move_number).min(self.bins.len() - 1)]
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 / (self.grid_size - 1) as f64
    }

    /// Linear interpolation between grid nodes, clamped to `[-1, 1]`.
    pub fn lookup(&self, move_number: u32, d: f64) -> f64 {
        let delta = &self.bin_for(move_number).delta;
        let x = d.clamp(0.0, 1.0) * (self.grid_size - 1) as f64;
        let i = (x.floor() as usize).min(self.grid_size - 2);
        let f = x - i as f64;
        (delta[i] * (1.0 - f) + delta[i + 1] * f).clamp(-1.0, 1.0)
    }

    /// `(bin, node)` cells where gaps were observed near the node in both
    /// logs and the isotonic steps of `mu_1` and `mu_0` at the node each pool
    /// at least `min_support` samples.
    pub fn populated_cells(&self, min_support: u32) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (b, bin) in self.bins.iter().enumerate() {
            let (Some(mu1), Some(mu0)) = (&bin.mu1, &bin.mu0) else {
                continue;
            };
            for i in 0..self.grid_size {
                let d = self.node(i);
                if bin.support_treated[i] > 0
                    && bin.support_control[i] > 0
                    && mu1.support_at(d) >= min_support
                    && mu0.support_at(d) >= min_support
                {
                    out.push((b, i));
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, None)
    }

    pub fn save_with(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        write_json_doc(path, "uplift", self, provenance)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json_doc(path, "uplift")
    }
}

impl MoveBank {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, None)
    }

    pub fn save_with(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        write_json_doc(path, "banks", self, provenance)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json_doc(path, "banks")
    }
}

fn node_index(d: f64, grid_size: usize) -> usize {
    ((d.clamp(0.0, 1.0) * (grid_size - 1) as f64).round() as usize).min(grid_size - 1)
}

/// Per move bin, `mu_1(d)` from intervened games (gap at `t*`, result) and
/// `mu_0(d)` from every no-intervention point (gap at `t`, result), both
/// isotonic in `d`.
pub fn fit_uplift(d0: &Dataset, di: &Dataset, bin_width: u32, grid_size: usize) -> Result<UpliftTable> {
    if bin_width < 1 {
        return Err(Error::config("bin width must be at least 1"));
    }
    if grid_size < 2 {
        return Err(Error::config("d-grid needs at least 2 nodes"));
    }
    if d0.records.is_empty() {
        return Err(Error::data("no-intervention dataset is empty"));
    }
    if di.kind != DatasetKind::DI {
        return Err(Error::data("uplift needs a single-intervention dataset"));
    }
    let bin = |t: u32| ((t.max(1) - 1) / bin_width) as usize;

    let mut treated: Vec<Vec<CalibrationPair>> = Vec::new();
    let mut control: Vec<Vec<CalibrationPair>> = Vec::new();
    let grow = |v: &mut Vec<Vec<CalibrationPair>>, b: usize| {
        if v.len() <= b {
            v.resize(b + 1, Vec::new());
        }
    };
    for r in &d0.records {
        for p in &r.points {
            let (w, s) = p
                .calibrated()
                .ok_or_else(|| Error::data(format!("game {} is not calibrated", r.game_id)))?;
            let b = bin(p.move_number);
            grow(&mut control, b);
            control[b].push(CalibrationPair { alpha: gap(w, s), score: r.result });
        }
    }
    for r in &di.records {
        let Some(ev) = r.fired().next() else { continue };
        let p = r
            .point(ev.move_number)
            .ok_or_else(|| Error::data(format!("game {} has no point at t*", r.game_id)))?;
        let (w, s) = p
            .calibrated()
            .ok_or_else(|| Error::data(format!("game {} is not calibrated", r.game_id)))?;
        let b = bin(ev.move_number);
        grow(&mut treated, b);
        treated[b].push(CalibrationPair { alpha: gap(w, s), score: r.result });
    }
    let n_bins = control.len().max(treated.len());
    control.resize(n_bins, Vec::new());
    treated.resize(n_bins, Vec::new());

    let bins = (0..n_bins)
        .into_par_iter()
        .map(|b| {
            let support = |ps: &[CalibrationPair]| {
                let mut s = vec![0u32; grid_size];
                for p in ps {
                    s[node_index(p.alpha, grid_size)] += 1;
                }
                s
            };
            let fit = |ps: &[CalibrationPair]| {
                if ps.len() >= 2 {
                    fit_isotonic(ps).map(Some)
                } else {
                    Ok(None)
                }
            };
            let mu1 = fit(&treated[b])?;
            let mu0 = fit(&control[b])?;
            let empty = mu1.is_none() || mu0.is_none();
            let delta = (0..grid_size)
                .map(|i| match (&mu1, &mu0) {
                    (Some(m1), Some(m0)) => {
                        let d = i as f64 / (grid_size - 1) as f64;
                        (m1.eval(d) - m0.eval(d)).clamp(-1.0, 1.0)
                    }
                    _ => 0.0,
                })
                .collect();
            Ok(UpliftBin {
                first_move: b as u32 * bin_width + 1,
                last_move: (b as u32 + 1) * bin_width,
                mu1,
                mu0,
                empty,
                delta,
                support_treated: support(&treated[b]),
                support_control: support(&control[b]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UpliftTable {
        bin_width,
        grid_size,
        bins,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub horizon: u32,
    /// `lambda_k` per assist; missing entries default to 1.
    pub uplift_scales: Vec<f64>,
    pub runs: u64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 200,
            uplift_scales: Vec::new(),
            runs: 100_000,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.runs < 1 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.uplift_scales.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::config("uplift scales must be nonnegative"));
        }
        Ok(())
    }

    pub fn scale(&self, k: usize) -> f64 {
        self.uplift_scales.get(k).copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimEvent {
    /// 1-based assist ordinal.
    pub k: u32,
    pub move_number: u32,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimGame {
    pub v: f64,
    pub events: Vec<SimEvent>,
}

pub fn simulate_game<R: Rng + ?Sized>(
    bank: &MoveBank,
    uplift: &UpliftTable,
    thresholds: &[f64],
    cfg: &SimConfig,
    rng: &mut R,
) -> SimGame {
    let mut events = Vec::new();
    let horizon = cfg.horizon.min(bank.horizon);
    for t in 1..=horizon {
        if events.len() == thresholds.len() {
            break;
        }
        let pairs = bank.at(t);
        if pairs.is_empty() {
            break;
        }
        let (w, s) = pairs[rng.random_range(0..pairs.len())];
        let d = gap(w, s);
        if d >= thresholds[events.len()] {
            events.push(SimEvent {
                k: events.len() as u32 + 1,
                move_number: t,
                gap: d,
            });
        }
    }
    let mut v = bank.baseline_mean;
    for e in &events {
        v = (v + cfg.scale(e.k as usize - 1) * uplift.lookup(e.move_number, e.gap)).clamp(0.0, 1.0);
    }
    SimGame { v, events }
}

/// RNG for Monte Carlo run `index`, independent of scheduling.
pub fn run_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub avg_score: f64,
    /// Standard error of `avg_score` across runs.
    pub std_error: f64,
    pub frac_fired: Vec<f64>,
    /// Mean move number of assist `k` over runs where it fired.
    pub avg_move: Vec<Option<f64>>,
    pub runs: u64,
}

#[derive(Clone, Default)]
struct Partial {
    sum: f64,
    sum_sq: f64,
    fired: Vec<u64>,
    move_sum: Vec<u64>,
}

const CHUNK: u64 = 4096;

pub fn avg_score(bank: &MoveBank, uplift: &UpliftTable, thresholds: &[f64], cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let k = thresholds.len();
    let chunks = cfg.runs.div_ceil(CHUNK);
    // Fixed chunk boundaries and an in-order reduction keep the result
    // independent of thread scheduling.
    let partials: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut p = Partial {
                fired: vec![0; k],
                move_sum: vec![0; k],
                ..Partial::default()
            };
            for i in c * CHUNK..((c + 1) * CHUNK).min(cfg.runs) {
                let g = simulate_game(bank, uplift, thresholds, cfg, &mut run_rng(cfg.seed, i));
                p.sum += g.v;
                p.sum_sq += g.v * g.v;
                for e in &g.events {
                    p.fired[e.k as usize - 1] += 1;
                    p.move_sum[e.k as usize - 1] += u64::from(e.move_number);
                }
            }
            p
        })
        .collect();
    let mut total = Partial {
        fired: vec![0; k],
        move_sum: vec![0; k],
        ..Partial::default()
    };
    for p in &partials {
        total.sum += p.sum;
        total.sum_sq += p.sum_sq;
        for j in 0..k {
            total.fired[j] += p.fired[j];
            total.move_sum[j] += p.move_sum[j];
        }
    }
    let n = cfg.runs as f64;
    let mean = total.sum / n;
    let var = if cfg.runs > 1 {
        ((total.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(SimReport {
        avg_score: mean,
        std_error: (var / n).sqrt(),
        frac_fired: total.fired.iter().map(|&f| f as f64 / n).collect(),
        avg_move: total
            .fired
            .iter()
            .zip(&total.move_sum)
            .map(|(&f, &m)| (f > 0).then(|| m as f64 / f as f64))
            .collect(),
        runs: cfg.runs,
    })
}

/// Calibrated synthetic logs for checking the uplift fit. Each game has a
/// latent expected score `q ~ U(0.1, 0.6)`, gaps roughly `U(0, 0.4)` and a
/// 0/1 result drawn from `q` (from `q + effect` in the intervention log,
/// where one uniform `t*` per game is marked as fired).
pub fn synthetic_logs(games: usize, horizon: u32, effect: f64, seed: u64) -> (Dataset, Dataset) {
    use crate::game::{GameRecord, InterventionEvent, MovePoint, Termination, RANDOM_SINGLE_TAG};
    let mut rng = run_rng(seed, 0);
    let game = |id: String, shift: f64, rng: &mut ChaCha8Rng| {
        let q: f64 = rng.random_range(0.1..0.6);
        let points: Vec<MovePoint> = (1..=horizon)
            .map(|t| {
                let w: f64 = rng.random_range(0.0..0.6);
                let s = (w + rng.random_range(0.0..0.4)).min(1.0);
                let mut p = MovePoint::with_raw(t, w, s);
                p.set_calibrated(w, s);
                p
            })
            .collect();
        let y = if rng.random::<f64>() < (q + shift).min(1.0) { 1.0 } else { 0.0 };
        GameRecord {
            game_id: id,
            white_elo: None,
            black_elo: None,
            oracle_elo: None,
            budget: 0,
            moves: Vec::new(),
            points,
            interventions: Vec::new(),
            result: y,
            termination: Termination::Horizon,
        }
    };
    let mut d0 = Dataset::new(DatasetKind::D0);
    for g in 0..games {
        d0.records.push(game(format!("syn0-{g}"), 0.0, &mut rng));
    }
    let mut di = Dataset::new(DatasetKind::DI);
    for g in 0..games {
        let mut r = game(format!("syn1-{g}"), effect, &mut rng);
        let t = rng.random_range(1..=horizon);
        r.budget = 1;
        r.interventions.push(InterventionEvent {
            ordinal: 1,
            move_number: t,
            gap_at_decision: r.points[t as usize - 1].gap.unwrap_or(0.0),
            policy_tag: RANDOM_SINGLE_TAG.into(),
            fired: true,
        });
        di.records.push(r);
    }
    (d0, di)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_table(delta: f64) -> UpliftTable {
        UpliftTable {
            bin_width: 10,
            grid_size: 3,
            bins: vec![UpliftBin {
                first_move: 1,
                last_move: 10,
                mu1: None,
                mu0: None,
                empty: false,
                delta: vec![delta; 3],
                support_treated: vec![0; 3],
                support_control: vec![0; 3],
            }],
        }
    }

    #[test]
    fn single_hit_is_clipped() {
        let bank = MoveBank {
            horizon: 1,
            banks: vec![vec![(0.2, 0.9)]],
            baseline_mean: 0.51,
        };
        let cfg = SimConfig { horizon: 1, ..SimConfig::default() };
        let g = simulate_game(&bank, &flat_table(0.6), &[0.1], &cfg, &mut run_rng(0, 0));
        assert_eq!(g.v, 1.0);
        assert_eq!(g.events.len(), 1);
    }

    #[test]
    fn no_thresholds_returns_baseline() {
        let bank = MoveBank {
            horizon: 2,
            banks: vec![vec![(0.2, 0.9)], vec![(0.1, 0.8)]],
            baseline_mean: 0.37,
        };
        let g = simulate_game(&bank, &flat_table(0.6), &[], &SimConfig::default(), &mut run_rng(0, 0));
        assert_eq!(g.v, 0.37);
    }

    #[test]
    fn lookup_interpolates_and_clamps() {
        let mut t = flat_table(0.0);
        t.bins[0].delta = vec![0.0, 0.5, 2.0];
        assert_eq!(t.lookup(3, 0.25), 0.25);
        assert_eq!(t.lookup(3, 0.5), 0.5);
        assert_eq!(t.lookup(3, 1.0), 1.0);
        assert_eq!(t.lookup(99, 0.0), 0.0);
    }
}
