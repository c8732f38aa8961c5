//! Regressors for `G_t^(k)`, the sum of the `k` largest clipped deltas in a
//! game's suffix after move `t`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{atomic_write_str, read_to_string, sha256_hex, Provenance};
use crate::error::{Error, Result};
use crate::game::Dataset;
use crate::nn::{self, Activation, Mlp, OutputTransform, TrainConfig};

pub const FEATURE_DIM: usize = 7;
pub const ARTIFACT_VERSION: u32 = 1;

pub type Features = [f64; FEATURE_DIM];

/// Which probability the features are built from: the weak move's (before
/// deciding) or the strong move's (after an intervention).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    #[serde(rename = "w-conditioned")]
    Weak,
    #[serde(rename = "s-conditioned")]
    Strong,
}

/// Running statistics of the gaps seen before the current move.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrefixStats {
    pub sum: f64,
    pub max: f64,
    pub count: u32,
}

impl PrefixStats {
    pub fn push(&mut self, gap: f64) {
        self.sum += gap;
        self.max = if self.count == 0 { gap } else { self.max.max(gap) };
        self.count += 1;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / f64::from(self.count)
        }
    }
}

/// `[t, p_w, p_s, delta, mean past gap, max past gap, past moves]`. The
/// strong side substitutes `p_s` for `p_w` (the position after the strong
/// move), which zeroes `delta`.
pub fn feature_vector(side: Side, move_number: u32, pw: f64, ps: f64, prefix: &PrefixStats) -> Features {
    let base = match side {
        Side::Weak => pw,
        Side::Strong => ps,
    };
    [
        f64::from(move_number),
        base,
        ps,
        ps - base,
        prefix.mean(),
        prefix.max,
        f64::from(prefix.count),
    ]
}

pub fn top_k_delta_sum(deltas: &[f64], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::config("k must be at least 1"));
    }
    let mut clipped: Vec<f64> = deltas.iter().map(|d| d.max(0.0)).collect();
    clipped.sort_by(|a, b| b.total_cmp(a));
    Ok(clipped.iter().take(k).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub game: usize,
    pub move_number: u32,
    pub features: Features,
    pub target: f64,
}

/// One example per `(game, t)` with a nonempty suffix; the target is the
/// top-`k` sum over moves strictly after `t`.
pub fn build_training_set(dataset: &Dataset, k: usize, side: Side) -> Result<Vec<Example>> {
    if k < 1 {
        return Err(Error::config("k must be at least 1"));
    }
    if dataset.records.is_empty() {
        return Err(Error::data("cannot build a training set from an empty dataset"));
    }
    let mut out = Vec::new();
    for (g, r) in dataset.records.iter().enumerate() {
        let cal: Vec<(u32, f64, f64)> = r
            .points
            .iter()
            .map(|p| {
                p.calibrated()
                    .map(|(w, s)| (p.move_number, w, s))
                    .ok_or_else(|| Error::data(format!("game {} is not calibrated", r.game_id)))
            })
            .collect::<Result<_>>()?;
        let n = cal.len();
        if n < 2 {
            continue;
        }
        // Top-k of the suffix, maintained while walking backwards.
        let mut targets = vec![0.0; n];
        let mut top: Vec<f64> = Vec::with_capacity(k + 1);
        for i in (0..n - 1).rev() {
            let d = (cal[i + 1].2 - cal[i + 1].1).max(0.0);
            let pos = top.partition_point(|&v| v >= d);
            top.insert(pos, d);
            top.truncate(k);
            targets[i] = top.iter().sum();
        }
        let mut prefix = PrefixStats::default();
        for (i, &(t, w, s)) in cal.iter().enumerate().take(n - 1) {
            out.push(Example {
                game: g,
                move_number: t,
                features: feature_vector(side, t, w, s, &prefix),
                target: targets[i],
            });
            prefix.push((s - w).max(0.0));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    #[serde(rename = "linear-l2")]
    Linear { ridge: f64 },
    RandomForest {
        trees: usize,
        max_depth: usize,
        min_leaf: usize,
        bootstrap: bool,
        /// Features tried per split; `None` means a third of them.
        max_features: Option<usize>,
    },
    Mlp {
        hidden: Vec<usize>,
        epochs: usize,
        learning_rate: f64,
        weight_decay: f64,
    },
}

impl Family {
    pub fn linear() -> Self {
        Family::Linear { ridge: 1e-3 }
    }

    pub fn forest() -> Self {
        Family::RandomForest {
            trees: 200,
            max_depth: 12,
            min_leaf: 5,
            bootstrap: true,
            max_features: None,
        }
    }

    pub fn mlp() -> Self {
        Family::Mlp {
            hidden: vec![32, 32],
            epochs: 500,
            learning_rate: 0.01,
            weight_decay: 1e-4,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "linear" | "linear-l2" => Ok(Family::linear()),
            "forest" | "random-forest" => Ok(Family::forest()),
            "mlp" => Ok(Family::mlp()),
            other => Err(Error::config(format!(
                "unknown predictor family `{other}` (expected linear, forest or mlp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum TreeNode {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct TreeBuilder<'a> {
    xs: &'a [Features],
    ys: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    max_features: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        let mean = idx.iter().map(|&i| self.ys[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(TreeNode::Leaf { value: mean });
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(idx, rng) else {
            return id;
        };
        let mut split = 0;
        for j in 0..idx.len() {
            if self.xs[idx[j]][feature] <= threshold {
                idx.swap(split, j);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[id] = TreeNode::Split { feature, threshold, left, right };
        id
    }

    /// Largest reduction in squared error over a random feature subset.
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.ys[i]).sum();
        let parent = total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = idx.to_vec();
        for feature in sample(rng, FEATURE_DIM, self.max_features).into_iter() {
            order.sort_by(|&a, &b| self.xs[a][feature].total_cmp(&self.xs[b][feature]));
            let mut left_sum = 0.0;
            for j in 0..n - 1 {
                left_sum += self.ys[order[j]];
                let nl = j + 1;
                let (xa, xb) = (self.xs[order[j]][feature], self.xs[order[j + 1]][feature]);
                if nl < self.min_leaf || n - nl < self.min_leaf || xa == xb {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / nl as f64
                    + right_sum * right_sum / (n - nl) as f64
                    - parent;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, feature, 0.5 * (xa + xb)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn fit_forest(
    xs: &[Features],
    ys: &[f64],
    trees: usize,
    max_depth: usize,
    min_leaf: usize,
    bootstrap: bool,
    max_features: Option<usize>,
    seed: u64,
) -> Vec<RegressionTree> {
    let mtry = max_features.unwrap_or(FEATURE_DIM / 3).clamp(1, FEATURE_DIM);
    (0..trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            let n = xs.len();
            let mut idx: Vec<usize> = if bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut b = TreeBuilder {
                xs,
                ys,
                max_depth,
                min_leaf: min_leaf.max(1),
                max_features: mtry,
                nodes: Vec::new(),
            };
            b.build(&mut idx, 0, &mut rng);
            RegressionTree { nodes: b.nodes }
        })
        .collect()
}

/// Ridge regression with an unpenalized intercept, solved in closed form on
/// centered data.
fn fit_linear(xs: &[Features], ys: &[f64], ridge: f64) -> Result<(Vec<f64>, f64)> {
    let n = xs.len();
    let mut mean_x = [0.0; FEATURE_DIM];
    for x in xs {
        for (m, v) in mean_x.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, FEATURE_DIM, |i, j| xs[i][j] - mean_x[j]);
    let y = DVector::from_iterator(n, ys.iter().map(|v| v - mean_y));
    let mut gram = x.transpose() * &x;
    for j in 0..FEATURE_DIM {
        gram[(j, j)] += ridge;
    }
    let rhs = x.transpose() * y;
    if ridge == 0.0 {
        let eig = gram.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if hi <= 0.0 || lo <= hi * 1e-12 {
            return Err(Error::data("singular design matrix (set ridge > 0)"));
        }
    }
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::data("normal equations are not positive definite"))?
        .solve(&rhs);
    let coef: Vec<f64> = coef.iter().copied().collect();
    let intercept = mean_y - coef.iter().zip(&mean_x).map(|(c, m)| c * m).sum::<f64>();
    Ok((coef, intercept))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum FittedParams {
    #[serde(rename = "linear-l2")]
    Linear { coefficients: Vec<f64>, intercept: f64 },
    RandomForest { trees: Vec<RegressionTree> },
    Mlp { net: Mlp, mean: Vec<f64>, scale: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub k: u32,
    pub side: Side,
    pub params: FittedParams,
}

impl PredictorModel {
    pub fn family_name(&self) -> &'static str {
        match self.params {
            FittedParams::Linear { .. } => "linear-l2",
            FittedParams::RandomForest { .. } => "random-forest",
            FittedParams::Mlp { .. } => "mlp",
        }
    }

    /// Raw model output clipped to `[0, k]`.
    pub fn predict(&self, x: &Features) -> f64 {
        let raw = match &self.params {
            FittedParams::Linear { coefficients, intercept } => {
                intercept + coefficients.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }
            FittedParams::RandomForest { trees } => {
                trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64
            }
            FittedParams::Mlp { net, mean, scale } => {
                let z: Vec<f64> = x
                    .iter()
                    .zip(mean.iter().zip(scale))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect();
                net.predict(&z)
            }
        };
        if raw.is_nan() {
            0.0
        } else {
            raw.clamp(0.0, f64::from(self.k))
        }
    }

    pub fn mse(&self, examples: &[Example]) -> f64 {
        examples
            .iter()
            .map(|e| (self.predict(&e.features) - e.target).powi(2))
            .sum::<f64>()
            / examples.len() as f64
    }
}

pub fn fit(family: &Family, examples: &[Example], k: u32, side: Side, seed: u64) -> Result<PredictorModel> {
    if examples.is_empty() {
        return Err(Error::data("empty training set"));
    }
    if k < 1 {
        return Err(Error::config("k must be at least 1"));
    }
    let xs: Vec<Features> = examples.iter().map(|e| e.features).collect();
    let ys: Vec<f64> = examples.iter().map(|e| e.target).collect();
    let params = match family {
        Family::Linear { ridge } => {
            if *ridge < 0.0 {
                return Err(Error::config("ridge must be nonnegative"));
            }
            let (coefficients, intercept) = fit_linear(&xs, &ys, *ridge)?;
            FittedParams::Linear { coefficients, intercept }
        }
        Family::RandomForest { trees, max_depth, min_leaf, bootstrap, max_features } => {
            if *trees == 0 {
                return Err(Error::config("forest needs at least one tree"));
            }
            FittedParams::RandomForest {
                trees: fit_forest(&xs, &ys, *trees, *max_depth, *min_leaf, *bootstrap, *max_features, seed),
            }
        }
        Family::Mlp { hidden, epochs, learning_rate, weight_decay } => {
            let n = xs.len() as f64;
            let mut mean = vec![0.0; FEATURE_DIM];
            let mut scale = vec![0.0; FEATURE_DIM];
            for x in &xs {
                for j in 0..FEATURE_DIM {
                    mean[j] += x[j] / n;
                }
            }
            for x in &xs {
                for j in 0..FEATURE_DIM {
                    scale[j] += (x[j] - mean[j]).powi(2) / n;
                }
            }
            for s in &mut scale {
                *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
            }
            let zs: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| (0..FEATURE_DIM).map(|j| (x[j] - mean[j]) / scale[j]).collect())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Mlp::init(
                FEATURE_DIM,
                hidden,
                Activation::Relu,
                OutputTransform::Linear,
                false,
                &mut rng,
            );
            nn::train(
                &mut net,
                &zs,
                &ys,
                &TrainConfig {
                    epochs: *epochs,
                    learning_rate: *learning_rate,
                    nonnegative: false,
                    weight_decay: *weight_decay,
                },
            )?;
            FittedParams::Mlp { net, mean, scale }
        }
    };
    Ok(PredictorModel { k, side, params })
}

/// The predictors a budget-`K` maximal-delta policy needs: `S^W_1..S^W_K`
/// and `S^S_1..S^S_{K-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSet {
    pub budget: u32,
    pub weak: Vec<PredictorModel>,
    pub strong: Vec<PredictorModel>,
}

impl PredictorSet {
    pub fn train(dataset: &Dataset, budget: u32, family: &Family, seed: u64) -> Result<Self> {
        if budget < 1 {
            return Err(Error::config("predictor budget must be at least 1"));
        }
        let mut weak = Vec::new();
        let mut strong = Vec::new();
        for k in 1..=budget {
            let ex = build_training_set(dataset, k as usize, Side::Weak)?;
            weak.push(fit(family, &ex, k, Side::Weak, seed.wrapping_add(u64::from(k)))?);
            if k < budget {
                let ex = build_training_set(dataset, k as usize, Side::Strong)?;
                strong.push(fit(family, &ex, k, Side::Strong, seed.wrapping_add(1000 + u64::from(k)))?);
            }
        }
        Ok(PredictorSet { budget, weak, strong })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weak.len() == self.budget as usize
            && self.strong.len() + 1 == self.budget as usize
            && self.weak.iter().enumerate().all(|(i, m)| m.k as usize == i + 1 && m.side == Side::Weak)
            && self.strong.iter().enumerate().all(|(i, m)| m.k as usize == i + 1 && m.side == Side::Strong);
        if ok {
            Ok(())
        } else {
            Err(Error::data("predictor set does not cover k = 1..K (weak) and 1..K-1 (strong)"))
        }
    }

    /// `S_j` with `S_0 = 0`, made nondecreasing in `j` by a running maximum.
    pub fn top_sum(&self, side: Side, j: u32, x: &Features) -> f64 {
        let models = match side {
            Side::Weak => &self.weak,
            Side::Strong => &self.strong,
        };
        models
            .iter()
            .take(j as usize)
            .map(|m| m.predict(x))
            .fold(0.0, f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, None)
    }

    pub fn save_with(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        let body = serde_json::to_value(self)?;
        let mut doc = serde_json::json!({
            "version": ARTIFACT_VERSION,
            "sha256": sha256_hex(serde_json::to_string(&body)?.as_bytes()),
            "body": body,
        });
        if let Some(p) = provenance {
            doc["provenance"] = serde_json::to_value(p)?;
        }
        atomic_write_str(path, &serde_json::to_string(&doc)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            version: u32,
            sha256: String,
            body: serde_json::Value,
        }
        let doc: Doc = serde_json::from_str(&read_to_string(path)?)?;
        if doc.version != ARTIFACT_VERSION {
            return Err(Error::data(format!(
                "{}: unsupported predictor artifact version {}",
                path.display(),
                doc.version
            )));
        }
        if sha256_hex(serde_json::to_string(&doc.body)?.as_bytes()) != doc.sha256 {
            return Err(Error::data(format!("{}: checksum mismatch", path.display())));
        }
        let set: PredictorSet = serde_json::from_value(doc.body)?;
        set.validate()?;
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        assert!((top_k_delta_sum(&[0.1, 0.3, 0.2], 2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(top_k_delta_sum(&[-0.2, 0.1], 2).unwrap(), 0.1);
        assert_eq!(top_k_delta_sum(&[], 3).unwrap(), 0.0);
        assert!(top_k_delta_sum(&[0.1], 0).is_err());
    }

    #[test]
    fn prefix_stats_track_mean_and_max() {
        let mut p = PrefixStats::default();
        assert_eq!(p.mean(), 0.0);
        p.push(0.2);
        p.push(0.0);
        assert_eq!(p.max, 0.2);
        assert!((p.mean() - 0.1).abs() < 1e-15);
        assert_eq!(p.count, 2);
    }

    #[test]
    fn strong_side_features_zero_delta() {
        let p = PrefixStats::default();
        let w = feature_vector(Side::Weak, 3, 0.4, 0.6, &p);
        let s = feature_vector(Side::Strong, 3, 0.4, 0.6, &p);
        assert!((w[3] - 0.2).abs() < 1e-15);
        assert_eq!(s[1], 0.6);
        assert_eq!(s[3], 0.0);
    }
}
