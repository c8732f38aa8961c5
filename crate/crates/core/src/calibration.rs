//! Monotone maps from raw engine scores to empirical expected result.
//!
//! Curves are fitted per move-number bucket on `(pw_raw, result)` pairs
//! drawn from no-intervention games, either by isotonic regression (pool
//! adjacent violators) or by a small neural network whose weights are kept
//! nonnegative.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{atomic_write, read_to_string, Provenance};
use crate::error::{Error, Result};
use crate::game::Dataset;
use crate::nn::{self, Activation, Mlp, OutputTransform, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationPair {
    pub alpha: f64,
    pub score: f64,
}

impl CalibrationPair {
    pub fn new(alpha: f64, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::data(format!("alpha {alpha} outside [0, 1]")));
        }
        if ![0.0, 0.5, 1.0].contains(&score) {
            return Err(Error::data(format!("score {score} not in {{0, 0.5, 1}}")));
        }
        Ok(CalibrationPair { alpha, score })
    }
}

/// Right-continuous step function on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotonicCurve {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    pub bucket: u32,
    /// Training samples pooled into each step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub counts: Vec<u32>,
    /// All training alphas were identical, so the curve is the constant mean.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl IsotonicCurve {
    pub fn eval(&self, x: f64) -> f64 {
        let i = self.breakpoints.partition_point(|&b| b <= x);
        self.values[i.saturating_sub(1)].clamp(0.0, 1.0)
    }

    /// Number of training samples behind the value returned at `x`.
    pub fn support_at(&self, x: f64) -> u32 {
        let i = self.breakpoints.partition_point(|&b| b <= x);
        self.counts.get(i.saturating_sub(1)).copied().unwrap_or(0)
    }
}

/// Pool-adjacent-violators fit. Tied alphas are averaged first and enter
/// with their multiplicity as weight.
pub fn fit_isotonic(pairs: &[CalibrationPair]) -> Result<IsotonicCurve> {
    if pairs.len() < 2 {
        return Err(Error::data(format!(
            "isotonic fit needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let mut sorted: Vec<(f64, f64)> = pairs.iter().map(|p| (p.alpha, p.score)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    // (alpha, sum, weight) per distinct alpha.
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for (a, s) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == a => {
                g.1 += s;
                g.2 += 1.0;
            }
            _ => groups.push((a, s, 1.0)),
        }
    }
    let degenerate = groups.len() == 1;

    // Blocks: (first group index, sum, weight).
    let mut blocks: Vec<(usize, f64, f64)> = Vec::with_capacity(groups.len());
    for (i, &(_, s, w)) in groups.iter().enumerate() {
        blocks.push((i, s, w));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (_, s1, w1) = blocks[n - 1];
            let (_, s0, w0) = blocks[n - 2];
            if s0 / w0 <= s1 / w1 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().expect("two blocks");
            last.1 += s1;
            last.2 += w1;
        }
    }
    let mut breakpoints = Vec::with_capacity(blocks.len());
    let mut values: Vec<f64> = Vec::with_capacity(blocks.len());
    let mut counts: Vec<u32> = Vec::with_capacity(blocks.len());
    for (start, s, w) in blocks {
        let v = (s / w).clamp(0.0, 1.0);
        // Adjacent blocks never share a mean after pooling, but merge
        // defensively so breakpoints stay meaningful.
        if values.last() == Some(&v) {
            *counts.last_mut().expect("parallel") += w as u32;
            continue;
        }
        breakpoints.push(groups[start].0);
        values.push(v);
        counts.push(w as u32);
    }
    Ok(IsotonicCurve {
        breakpoints,
        values,
        bucket: 0,
        counts,
        degenerate,
    })
}

pub fn eval_curve(curve: &Curve, x: f64) -> f64 {
    curve.eval(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![16, 16],
            epochs: 2000,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// `sigmoid(g(x))` where `g` has softplus hidden units and nonnegative
/// weights, hence is nondecreasing in `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneNet {
    pub net: Mlp,
    pub bucket: u32,
}

impl MonotoneNet {
    pub fn eval(&self, x: f64) -> f64 {
        self.net.predict(&[x.clamp(0.0, 1.0)])
    }
}

pub fn fit_monotone_net(pairs: &[CalibrationPair], cfg: &NetConfig) -> Result<MonotoneNet> {
    if pairs.len() < 10 {
        return Err(Error::data(format!(
            "monotone net needs at least 10 pairs, got {}",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::init(
        1,
        &cfg.hidden,
        Activation::Softplus,
        OutputTransform::Sigmoid,
        true,
        &mut rng,
    );
    let xs: Vec<Vec<f64>> = pairs.iter().map(|p| vec![p.alpha]).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    nn::train(
        &mut net,
        &xs,
        &ys,
        &TrainConfig {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            nonnegative: true,
            weight_decay: 0.0,
        },
    )?;
    Ok(MonotoneNet { net, bucket: 0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Curve {
    Isotonic(IsotonicCurve),
    MonotoneNet(MonotoneNet),
}

impl Curve {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Curve::Isotonic(c) => c.eval(x),
            Curve::MonotoneNet(n) => n.eval(x),
        }
    }

    pub fn bucket(&self) -> u32 {
        match self {
            Curve::Isotonic(c) => c.bucket,
            Curve::MonotoneNet(n) => n.bucket,
        }
    }

    fn set_bucket(&mut self, bucket: u32) {
        match self {
            Curve::Isotonic(c) => c.bucket = bucket,
            Curve::MonotoneNet(n) => n.bucket = bucket,
        }
    }

    pub fn is_isotonic(&self) -> bool {
        matches!(self, Curve::Isotonic(_))
    }
}

pub fn mse(pairs: &[CalibrationPair], f: impl Fn(f64) -> f64) -> f64 {
    pairs.iter().map(|p| (f(p.alpha) - p.score).powi(2)).sum::<f64>() / pairs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Winner {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseComparison {
    pub mse_a: f64,
    pub mse_b: f64,
    pub winner: Winner,
}

/// Holdout MSE of two curves. Exact ties go to the isotonic curve (A when
/// both or neither are isotonic).
pub fn compare_mse(holdout: &[CalibrationPair], a: &Curve, b: &Curve) -> Result<MseComparison> {
    if holdout.is_empty() {
        return Err(Error::data("empty holdout"));
    }
    let mse_a = mse(holdout, |x| a.eval(x));
    let mse_b = mse(holdout, |x| b.eval(x));
    let winner = if mse_a < mse_b {
        Winner::A
    } else if mse_b < mse_a || (b.is_isotonic() && !a.is_isotonic()) {
        Winner::B
    } else {
        Winner::A
    };
    Ok(MseComparison {
        mse_a,
        mse_b,
        winner,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Isotonic,
    MonotoneNet(NetConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankConfig {
    pub method: Method,
    pub bucket_width: u32,
    /// Last move number covered; defaults to the longest game in the data.
    pub horizon: Option<u32>,
    pub min_samples: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            method: Method::Isotonic,
            bucket_width: 5,
            horizon: None,
            min_samples: 30,
        }
    }
}

/// One curve per bucket of `bucket_width` consecutive White move numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBank {
    pub bucket_width: u32,
    pub horizon: u32,
    pub curves: Vec<Curve>,
    /// `Some(b)` when the bucket was too sparse and reuses bucket `b`'s curve.
    pub borrowed_from: Vec<Option<u32>>,
}

impl CalibrationBank {
    pub fn bucket_of(&self, move_number: u32) -> usize {
        bucket_index(move_number, self.bucket_width).min(self.curves.len() - 1)
    }

    pub fn curve(&self, move_number: u32) -> &Curve {
        &self.curves[self.bucket_of(move_number)]
    }

    pub fn calibrate(&self, move_number: u32, raw: f64) -> f64 {
        self.curve(move_number).eval(raw)
    }

    /// Fills `pw`/`ps` (and `gap`) for every point that has raw scores.
    pub fn apply(&self, dataset: &mut Dataset) {
        for r in &mut dataset.records {
            for p in &mut r.points {
                if let (Some(w), Some(s)) = (p.pw_raw, p.ps_raw) {
                    let t = p.move_number;
                    p.set_calibrated(self.calibrate(t, w), self.calibrate(t, s));
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, None)
    }

    /// JSONL sidecar: a header line, then one curve per bucket.
    pub fn save_with(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        let mut header = serde_json::json!({
            "schema_version": crate::game::SCHEMA_VERSION,
            "bucket_width": self.bucket_width,
            "horizon": self.horizon,
        });
        if let Some(p) = provenance {
            header["provenance"] = serde_json::to_value(p)?;
        }
        let mut lines = vec![serde_json::to_string(&header)?];
        for (curve, borrowed) in self.curves.iter().zip(&self.borrowed_from) {
            let line = SidecarLine {
                curve: curve.clone(),
                borrowed_from: *borrowed,
            };
            lines.push(serde_json::to_string(&line)?);
        }
        atomic_write(path, |w| {
            for l in &lines {
                writeln!(w, "{l}")?;
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let rec_err = |line: usize, message: String| Error::Record {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines
            .next()
            .ok_or_else(|| rec_err(1, "empty calibration file".into()))?;
        #[derive(Deserialize)]
        struct Header {
            bucket_width: u32,
            horizon: u32,
        }
        let header: Header =
            serde_json::from_str(head).map_err(|e| rec_err(1, e.to_string()))?;
        let mut curves = Vec::new();
        let mut borrowed_from = Vec::new();
        for (i, l) in lines {
            let line: SidecarLine =
                serde_json::from_str(l).map_err(|e| rec_err(i + 1, e.to_string()))?;
            if line.curve.bucket() as usize != curves.len() {
                return Err(rec_err(i + 1, "buckets out of order".into()));
            }
            curves.push(line.curve);
            borrowed_from.push(line.borrowed_from);
        }
        if curves.is_empty() || header.bucket_width == 0 {
            return Err(rec_err(1, "calibration file has no curves".into()));
        }
        Ok(CalibrationBank {
            bucket_width: header.bucket_width,
            horizon: header.horizon,
            curves,
            borrowed_from,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarLine {
    #[serde(flatten)]
    curve: Curve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    borrowed_from: Option<u32>,
}

fn bucket_index(move_number: u32, width: u32) -> usize {
    (move_number.max(1) - 1) as usize / width as usize
}

/// `(pw_raw, result)` pairs grouped by bucket.
pub fn bucket_pairs(dataset: &Dataset, bucket_width: u32, horizon: u32) -> Result<Vec<Vec<CalibrationPair>>> {
    let n = bucket_index(horizon, bucket_width) + 1;
    let mut out = vec![Vec::new(); n];
    for r in &dataset.records {
        for p in &r.points {
            if p.move_number > horizon {
                continue;
            }
            if let Some(a) = p.pw_raw {
                out[bucket_index(p.move_number, bucket_width)].push(CalibrationPair::new(a, r.result)?);
            }
        }
    }
    Ok(out)
}

pub fn build_bank(dataset: &Dataset, cfg: &BankConfig) -> Result<CalibrationBank> {
    if cfg.bucket_width == 0 {
        return Err(Error::config("bucket_width must be positive"));
    }
    if dataset.records.is_empty() {
        return Err(Error::data("cannot calibrate on an empty dataset"));
    }
    let horizon = match cfg.horizon {
        Some(h) if h > 0 => h,
        Some(_) => return Err(Error::config("horizon must be positive")),
        None => dataset
            .records
            .iter()
            .flat_map(|r| r.points.iter().map(|p| p.move_number))
            .max()
            .ok_or_else(|| Error::data("dataset has no move points"))?,
    };
    let pairs = bucket_pairs(dataset, cfg.bucket_width, horizon)?;
    let min = cfg.min_samples.max(2);
    let fitted: Vec<Option<Curve>> = pairs
        .par_iter()
        .enumerate()
        .map(|(b, ps)| {
            if ps.len() < min {
                return Ok(None);
            }
            let mut curve = match &cfg.method {
                Method::Isotonic => Curve::Isotonic(fit_isotonic(ps)?),
                Method::MonotoneNet(nc) => Curve::MonotoneNet(fit_monotone_net(ps, nc)?),
            };
            curve.set_bucket(b as u32);
            Ok(Some(curve))
        })
        .collect::<Result<_>>()?;
    let populated: Vec<usize> = (0..fitted.len()).filter(|&b| fitted[b].is_some()).collect();
    if populated.is_empty() {
        return Err(Error::data(format!(
            "no bucket has at least {min} calibration pairs"
        )));
    }
    let mut curves = Vec::with_capacity(fitted.len());
    let mut borrowed_from = Vec::with_capacity(fitted.len());
    for (b, f) in fitted.iter().enumerate() {
        match f {
            Some(c) => {
                curves.push(c.clone());
                borrowed_from.push(None);
            }
            None => {
                // Nearest populated bucket, earlier one on ties.
                let src = *populated
                    .iter()
                    .min_by_key(|&&p| (p.abs_diff(b), p))
                    .expect("nonempty");
                let mut c = fitted[src].clone().expect("populated");
                c.set_bucket(b as u32);
                curves.push(c);
                borrowed_from.push(Some(src as u32));
            }
        }
    }
    Ok(CalibrationBank {
        bucket_width: cfg.bucket_width,
        horizon,
        curves,
        borrowed_from,
    })
}
