//! Intervention rules deciding, before each White move, whether the strong
//! engine's move replaces the weak one.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::gap;
use crate::predictors::{feature_vector, PredictorSet, PrefixStats, Side};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Intervene,
    Pass,
}

impl Decision {
    pub fn fires(self) -> bool {
        self == Decision::Intervene
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecisionContext {
    pub move_number: u32,
    pub pw: f64,
    pub ps: f64,
    pub delta: f64,
    pub gap: f64,
    pub assists_used: u32,
    pub last_intervention_move: Option<u32>,
    /// Gaps at this game's earlier White moves.
    pub prefix: PrefixStats,
}

impl DecisionContext {
    pub fn new(move_number: u32, pw: f64, ps: f64) -> Self {
        DecisionContext {
            move_number,
            pw,
            ps,
            delta: ps - pw,
            gap: gap(pw, ps),
            assists_used: 0,
            last_intervention_move: None,
            prefix: PrefixStats::default(),
        }
    }

    pub fn with_assists(mut self, used: u32, last: Option<u32>) -> Self {
        self.assists_used = used;
        self.last_intervention_move = last;
        self
    }

    pub fn with_prefix(mut self, prefix: PrefixStats) -> Self {
        self.prefix = prefix;
        self
    }

    fn after_last(&self) -> bool {
        self.last_intervention_move.is_none_or(|m| self.move_number > m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomPolicy {
    pub planned_moves: BTreeSet<u32>,
}

/// `k` distinct move numbers drawn uniformly from `1..=horizon`.
pub fn draw_random_plan<R: Rng + ?Sized>(k: u32, horizon: u32, rng: &mut R) -> Result<RandomPolicy> {
    if k > horizon {
        return Err(Error::config(format!(
            "cannot plan {k} interventions within {horizon} moves"
        )));
    }
    let planned_moves = sample(rng, horizon as usize, k as usize)
        .into_iter()
        .map(|i| i as u32 + 1)
        .collect();
    Ok(RandomPolicy { planned_moves })
}

pub fn decide_random(policy: &RandomPolicy, ctx: &DecisionContext) -> Decision {
    if ctx.assists_used < policy.planned_moves.len() as u32
        && policy.planned_moves.contains(&ctx.move_number)
    {
        Decision::Intervene
    } else {
        Decision::Pass
    }
}

/// Which probabilities threshold gaps are measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapScale {
    #[default]
    Calibrated,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub scale: GapScale,
}

impl ThresholdPolicy {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::config(format!("threshold {t} outside [0, 1]")));
        }
        Ok(ThresholdPolicy {
            thresholds,
            scale: GapScale::Calibrated,
        })
    }
}

/// Assist `k` fires when the gap reaches `T_k` (inclusive).
pub fn decide_threshold(policy: &ThresholdPolicy, ctx: &DecisionContext) -> Decision {
    match policy.thresholds.get(ctx.assists_used as usize) {
        Some(&t) if ctx.after_last() && ctx.gap >= t => Decision::Intervene,
        _ => Decision::Pass,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxDeltaPolicy {
    pub predictors: PredictorSet,
    /// `eps_1..eps_K`, indexed by assist ordinal.
    pub slacks: Vec<f64>,
}

impl MaxDeltaPolicy {
    pub fn new(predictors: PredictorSet, slacks: Vec<f64>) -> Result<Self> {
        predictors.validate()?;
        if slacks.len() != predictors.budget as usize {
            return Err(Error::config(format!(
                "expected {} slacks, got {}",
                predictors.budget,
                slacks.len()
            )));
        }
        Ok(MaxDeltaPolicy { predictors, slacks })
    }

    pub fn budget(&self) -> u32 {
        self.predictors.budget
    }
}

/// With `r` assists left, intervene iff
/// `delta + S^S_{r-1}(m, p_s) + eps_{K-r+1} >= S^W_r(m, p_w)`.
pub fn decide_maxdelta(policy: &MaxDeltaPolicy, ctx: &DecisionContext) -> Decision {
    let k = policy.budget();
    if ctx.assists_used >= k || !ctx.after_last() {
        return Decision::Pass;
    }
    let r = k - ctx.assists_used;
    let m = ctx.move_number;
    let xw = feature_vector(Side::Weak, m, ctx.pw, ctx.ps, &ctx.prefix);
    let xs = feature_vector(Side::Strong, m, ctx.pw, ctx.ps, &ctx.prefix);
    let wait = policy.predictors.top_sum(Side::Weak, r, &xw);
    let take = ctx.delta
        + policy.predictors.top_sum(Side::Strong, r - 1, &xs)
        + policy.slacks[(k - r) as usize];
    if take >= wait {
        Decision::Intervene
    } else {
        Decision::Pass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum Policy {
    /// Plays weak moves throughout.
    Never,
    /// Intervenes at the first `budget` White moves.
    Always { budget: u32 },
    /// Intervenes at exactly this move number (oracle replays, D_I).
    ForcedAt { move_number: u32 },
    Random(RandomPolicy),
    Threshold(ThresholdPolicy),
    MaxDelta(MaxDeltaPolicy),
}

impl Policy {
    pub fn budget(&self) -> u32 {
        match self {
            Policy::Never => 0,
            Policy::Always { budget } => *budget,
            Policy::ForcedAt { .. } => 1,
            Policy::Random(p) => p.planned_moves.len() as u32,
            Policy::Threshold(p) => p.thresholds.len() as u32,
            Policy::MaxDelta(p) => p.budget(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Policy::Never => "never",
            Policy::Always { .. } => "always",
            Policy::ForcedAt { .. } => crate::game::RANDOM_SINGLE_TAG,
            Policy::Random(_) => "random",
            Policy::Threshold(_) => "threshold",
            Policy::MaxDelta(_) => "maxdelta",
        }
    }

    pub fn gap_scale(&self) -> GapScale {
        match self {
            Policy::Threshold(p) => p.scale,
            _ => GapScale::Calibrated,
        }
    }

    pub fn decide(&self, ctx: &DecisionContext) -> Decision {
        let budget_left = ctx.assists_used < self.budget();
        match self {
            Policy::Never => Decision::Pass,
            Policy::Always { .. } if budget_left && ctx.after_last() => Decision::Intervene,
            Policy::ForcedAt { move_number } if budget_left && ctx.move_number == *move_number => {
                Decision::Intervene
            }
            Policy::Always { .. } | Policy::ForcedAt { .. } => Decision::Pass,
            Policy::Random(p) => decide_random(p, ctx),
            Policy::Threshold(p) => decide_threshold(p, ctx),
            Policy::MaxDelta(p) => decide_maxdelta(p, ctx),
        }
    }
}
