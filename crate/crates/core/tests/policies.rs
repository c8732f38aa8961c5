use assist_core::policies::{
    decide_maxdelta, decide_threshold, draw_random_plan, Decision, DecisionContext, MaxDeltaPolicy,
    Policy, ThresholdPolicy,
};
use assist_core::predictors::{FittedParams, PredictorModel, PredictorSet, Side};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `a + b*m + c*p`, where `p` is the side's own probability.
fn lin(k: u32, side: Side, a: f64, b: f64, c: f64) -> PredictorModel {
    PredictorModel {
        k,
        side,
        params: FittedParams::Linear {
            coefficients: vec![b, c, 0.0, 0.0, 0.0, 0.0, 0.0],
            intercept: a,
        },
    }
}

type Coef = (f64, f64, f64);

fn set(weak: &[Coef], strong: &[Coef]) -> PredictorSet {
    PredictorSet {
        budget: weak.len() as u32,
        weak: weak
            .iter()
            .enumerate()
            .map(|(i, &(a, b, c))| lin(i as u32 + 1, Side::Weak, a, b, c))
            .collect(),
        strong: strong
            .iter()
            .enumerate()
            .map(|(i, &(a, b, c))| lin(i as u32 + 1, Side::Strong, a, b, c))
            .collect(),
    }
}

fn eval(c: Coef, k: u32, m: u32, p: f64) -> f64 {
    (c.0 + c.1 * f64::from(m) + c.2 * p).clamp(0.0, f64::from(k))
}

/// Transcription of the budget-3 maximal-delta-sum rule with its
/// Cheat/FirstMove/SecondMove state, run over a whole game.
fn algorithm_one(w: &[Coef; 3], s: &[Coef; 2], eps: [f64; 3], game: &[(f64, f64)]) -> Vec<bool> {
    let (mut cheat1, mut cheat2, mut cheat3) = (true, true, true);
    let (mut first, mut second) = (0u32, 0u32);
    let mut out = Vec::new();
    for (i, &(pw, ps)) in game.iter().enumerate() {
        let m = i as u32 + 1;
        let delta = ps - pw;
        let fire = if cheat1 && delta + eval(s[1], 2, m, ps) + eps[0] >= eval(w[2], 3, m, pw) {
            cheat1 = false;
            first = m;
            true
        } else if !cheat1
            && cheat2
            && m > first
            && delta + eval(s[0], 1, m, ps) + eps[1] >= eval(w[1], 2, m, pw)
        {
            cheat2 = false;
            second = m;
            true
        } else if !cheat1 && !cheat2 && cheat3 && m > second && delta + eps[2] >= eval(w[0], 1, m, pw) {
            cheat3 = false;
            true
        } else {
            false
        };
        out.push(fire);
    }
    out
}

fn run_policy(policy: &Policy, game: &[(f64, f64)]) -> Vec<bool> {
    let mut used = 0;
    let mut last = None;
    game.iter()
        .enumerate()
        .map(|(i, &(pw, ps))| {
            let m = i as u32 + 1;
            let ctx = DecisionContext::new(m, pw, ps).with_assists(used, last);
            let fire = policy.decide(&ctx).fires();
            if fire {
                used += 1;
                last = Some(m);
            }
            fire
        })
        .collect()
}

#[test]
fn hand_traced_budget_two_game() {
    // S^W_1(m) = 0.4 - 0.1m, S^W_2(m) = 0.65 - 0.15m, S^S_1(m) = 0.35 - 0.1m.
    let preds = set(&[(0.4, -0.1, 0.0), (0.65, -0.15, 0.0)], &[(0.35, -0.1, 0.0)]);
    let policy = Policy::MaxDelta(MaxDeltaPolicy::new(preds, vec![0.0, 0.0]).unwrap());
    // m=1: 0.3 + 0.25 = 0.55 >= 0.5 fire; m=2: 0.1 + 0 < 0.2 pass;
    // m=3: 0.15 >= 0.1 fire.
    assert_eq!(
        run_policy(&policy, &[(0.4, 0.7), (0.5, 0.6), (0.3, 0.45)]),
        [true, false, true]
    );
    // m=1: 0.2 + 0.25 < 0.5; m=2: 0.1 + 0.15 < 0.35; m=3: 0.17 + 0.05 >= 0.2.
    assert_eq!(
        run_policy(&policy, &[(0.4, 0.6), (0.5, 0.6), (0.3, 0.47)]),
        [false, false, true]
    );
}

fn coef() -> impl Strategy<Value = Coef> {
    (0.0f64..0.5, -0.02f64..0.02, -0.3f64..0.3)
}

proptest! {
    #[test]
    fn maxdelta_matches_budget_three_transcription(
        base_w in coef(),
        base_s in coef(),
        steps in proptest::collection::vec(0.0f64..0.3, 3),
        eps in proptest::array::uniform3(-0.05f64..0.05),
        game in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30),
    ) {
        // Intercepts rise with j so raw predictions are already ordered in j.
        let w = [
            base_w,
            (base_w.0 + steps[0], base_w.1, base_w.2),
            (base_w.0 + steps[0] + steps[1], base_w.1, base_w.2),
        ];
        let s = [base_s, (base_s.0 + steps[2], base_s.1, base_s.2)];
        let policy = Policy::MaxDelta(MaxDeltaPolicy::new(set(&w, &s), eps.to_vec()).unwrap());
        prop_assert_eq!(run_policy(&policy, &game), algorithm_one(&w, &s, eps, &game));
    }

    #[test]
    fn threshold_is_monotone_in_gap(
        t in 0.0f64..=1.0, g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0, used in 0u32..3,
    ) {
        let p = ThresholdPolicy::new(vec![t, t, t]).unwrap();
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let at = |g: f64| {
            let ctx = DecisionContext { gap: g, ..DecisionContext::new(10, 0.3, 0.3 + g) }
                .with_assists(used, if used > 0 { Some(5) } else { None });
            decide_threshold(&p, &ctx)
        };
        if at(hi) == Decision::Pass {
            prop_assert_eq!(at(lo), Decision::Pass);
        }
        prop_assert_eq!(at(hi), at(hi));
    }

    #[test]
    fn zero_predictors_fire_exactly_on_nonnegative_delta(
        pw in 0.0f64..=1.0, ps in 0.0f64..=1.0, k in 1u32..5, m in 1u32..80,
    ) {
        let w: Vec<Coef> = vec![(0.0, 0.0, 0.0); k as usize];
        let s: Vec<Coef> = vec![(0.0, 0.0, 0.0); k as usize - 1];
        let p = MaxDeltaPolicy::new(set(&w, &s), vec![0.0; k as usize]).unwrap();
        let d = decide_maxdelta(&p, &DecisionContext::new(m, pw, ps));
        prop_assert_eq!(d.fires(), ps - pw >= 0.0);
    }
}

#[test]
fn nothing_left_to_wait_for_means_intervene() {
    let p = MaxDeltaPolicy::new(set(&[(0.0, 0.0, 0.0)], &[]), vec![0.0]).unwrap();
    assert!(decide_maxdelta(&p, &DecisionContext::new(40, 0.3, 0.35)).fires());
    // Never twice on the same move, never beyond budget.
    let again = DecisionContext::new(40, 0.3, 0.35).with_assists(0, Some(40));
    assert!(!decide_maxdelta(&p, &again).fires());
    let spent = DecisionContext::new(41, 0.3, 0.35).with_assists(1, Some(40));
    assert!(!decide_maxdelta(&p, &spent).fires());
    assert!(MaxDeltaPolicy::new(set(&[(0.0, 0.0, 0.0)], &[]), vec![]).is_err());
}

#[test]
fn random_plan_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all = draw_random_plan(6, 6, &mut rng).unwrap();
    assert_eq!(all.planned_moves.into_iter().collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
    let none = Policy::Random(draw_random_plan(0, 6, &mut rng).unwrap());
    assert!(run_policy(&none, &[(0.5, 0.9); 6]).iter().all(|f| !f));
    assert!(draw_random_plan(7, 6, &mut rng).is_err());
}

/// Each move is planned with probability K/H; Pearson chi-square over the
/// H cells against 19 degrees of freedom at the 0.1% level (43.82).
#[test]
fn random_plan_is_uniform() {
    let (k, h, draws) = (3u32, 20u32, 20_000);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0u32; h as usize];
    for _ in 0..draws {
        let p = draw_random_plan(k, h, &mut rng).unwrap();
        assert_eq!(p.planned_moves.len(), k as usize);
        for m in p.planned_moves {
            assert!((1..=h).contains(&m));
            counts[m as usize - 1] += 1;
        }
    }
    let expected = f64::from(draws) * f64::from(k) / f64::from(h);
    let chi2: f64 = counts
        .iter()
        .map(|&c| (f64::from(c) - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < 43.82, "chi2 = {chi2}");
}
