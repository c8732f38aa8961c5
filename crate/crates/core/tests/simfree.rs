use assist_core::game::{Dataset, DatasetKind, GameRecord, MovePoint, Termination};
use assist_core::simfree::{
    avg_score, build_banks, fit_uplift, run_rng, simulate_game, synthetic_logs, MoveBank, SimConfig,
    UpliftBin, UpliftTable,
};
use proptest::prelude::*;

fn record(id: &str, pairs: &[(f64, f64)], result: f64) -> GameRecord {
    GameRecord {
        game_id: id.into(),
        white_elo: None,
        black_elo: None,
        oracle_elo: None,
        budget: 0,
        moves: Vec::new(),
        points: pairs
            .iter()
            .enumerate()
            .map(|(i, &(w, s))| {
                let mut p = MovePoint::with_raw(i as u32 + 1, w, s);
                p.set_calibrated(w, s);
                p
            })
            .collect(),
        interventions: Vec::new(),
        result,
        termination: Termination::Horizon,
    }
}

/// One bin, two grid nodes: `Delta(d) = a + (b - a) d`.
fn linear_table(a: f64, b: f64) -> UpliftTable {
    UpliftTable {
        bin_width: 1000,
        grid_size: 2,
        bins: vec![UpliftBin {
            first_move: 1,
            last_move: 1000,
            mu1: None,
            mu0: None,
            empty: false,
            delta: vec![a, b],
            support_treated: vec![0; 2],
            support_control: vec![0; 2],
        }],
    }
}

#[test]
fn banks_from_small_logs() {
    let mut ds = Dataset::new(DatasetKind::D0);
    ds.records.push(record("a", &[(0.5, 0.6), (0.4, 0.7), (0.3, 0.3)], 1.0));
    let b = build_banks(&ds, 3).unwrap();
    assert_eq!(b.banks, vec![vec![(0.5, 0.6)], vec![(0.4, 0.7)], vec![(0.3, 0.3)]]);
    assert_eq!(b.baseline_mean, 1.0);

    ds.records.push(record("b", &[(0.2, 0.2), (0.1, 0.5)], 0.0));
    let b = build_banks(&ds, 3).unwrap();
    assert_eq!(b.baseline_mean, 0.5);
    assert_eq!(b.total_pairs(), 5);
    assert_eq!(b.at(3).len(), 1);

    assert!(build_banks(&Dataset::new(DatasetKind::D0), 3).is_err());
    let mut raw = Dataset::new(DatasetKind::D0);
    raw.records.push(record("c", &[(0.5, 0.6)], 0.5));
    raw.records[0].points[0].pw = None;
    assert!(build_banks(&raw, 3).is_err());
}

fn two_move_bank() -> MoveBank {
    MoveBank {
        horizon: 2,
        banks: vec![
            vec![(0.5, 0.55), (0.2, 0.6), (0.1, 0.9)],
            vec![(0.3, 0.4), (0.6, 0.5), (0.0, 0.7), (0.25, 0.5)],
        ],
        baseline_mean: 0.45,
    }
}

/// Exact expectation over every `(pair_1, pair_2)` draw.
fn enumerate(bank: &MoveBank, a: f64, b: f64, t: &[f64]) -> f64 {
    let delta = |d: f64| (a + (b - a) * d).clamp(-1.0, 1.0);
    let (b1, b2) = (&bank.banks[0], &bank.banks[1]);
    let mut total = 0.0;
    for &(w1, s1) in b1 {
        for &(w2, s2) in b2 {
            let gaps = [(s1 - w1).max(0.0), (s2 - w2).max(0.0)];
            let mut used = 0;
            let mut v = bank.baseline_mean;
            for g in gaps {
                if used < t.len() && g >= t[used] {
                    v = (v + delta(g)).clamp(0.0, 1.0);
                    used += 1;
                }
            }
            total += v;
        }
    }
    total / (b1.len() * b2.len()) as f64
}

#[test]
fn two_move_bank_matches_enumeration() {
    let bank = two_move_bank();
    let cfg = SimConfig {
        horizon: 2,
        runs: 1_000_000,
        seed: 11,
        ..SimConfig::default()
    };
    for (a, b, t) in [
        (0.2, 0.2, vec![0.1, 0.1]),
        (0.1, 0.6, vec![0.3, 0.2]),
        (-0.3, 0.9, vec![0.0]),
    ] {
        let exact = enumerate(&bank, a, b, &t);
        let r = avg_score(&bank, &linear_table(a, b), &t, &cfg).unwrap();
        assert!(
            (r.avg_score - exact).abs() <= 3.0 * r.std_error,
            "{} vs {exact} (se {})",
            r.avg_score,
            r.std_error
        );
    }
}

#[test]
fn baseline_cases() {
    let bank = two_move_bank();
    let cfg = SimConfig { horizon: 2, runs: 500, seed: 3, ..SimConfig::default() };
    let table = linear_table(0.3, 0.3);
    let none = avg_score(&bank, &table, &[], &cfg).unwrap();
    assert!((none.avg_score - 0.45).abs() < 1e-12);
    assert!(none.frac_fired.is_empty());

    let unreachable = avg_score(&bank, &table, &[1.0, 1.0], &cfg).unwrap();
    assert!((unreachable.avg_score - 0.45).abs() < 1e-12);
    assert_eq!(unreachable.frac_fired, vec![0.0, 0.0]);
    assert_eq!(unreachable.avg_move, vec![None, None]);

    let off = SimConfig { uplift_scales: vec![0.0, 0.0], ..cfg.clone() };
    assert!((avg_score(&bank, &table, &[0.0, 0.0], &off).unwrap().avg_score - 0.45).abs() < 1e-12);

    // Threshold 0 fires at every move.
    let always = avg_score(&bank, &table, &[0.0, 0.0], &cfg).unwrap();
    assert_eq!(always.frac_fired, vec![1.0, 1.0]);
    assert_eq!(always.avg_move, vec![Some(1.0), Some(2.0)]);
    assert!((always.avg_score - 1.0).abs() < 1e-12);
}

#[test]
fn empty_bank_stops_the_game() {
    let bank = MoveBank {
        horizon: 3,
        banks: vec![vec![(0.5, 0.5)], vec![], vec![(0.0, 1.0)]],
        baseline_mean: 0.5,
    };
    let cfg = SimConfig { horizon: 3, ..SimConfig::default() };
    let g = simulate_game(&bank, &linear_table(0.2, 0.2), &[0.5], &cfg, &mut run_rng(0, 0));
    assert!(g.events.is_empty());
    assert_eq!(g.v, 0.5);
}

#[test]
fn seeded_runs_are_reproducible_and_order_free() {
    let (d0, di) = synthetic_logs(400, 12, 0.1, 5);
    let bank = build_banks(&d0, 12).unwrap();
    let table = fit_uplift(&d0, &di, 4, 21).unwrap();
    let cfg = SimConfig { horizon: 12, runs: 10_000, seed: 77, ..SimConfig::default() };
    let t = [0.2, 0.3];
    let a = avg_score(&bank, &table, &t, &cfg).unwrap();
    let b = avg_score(&bank, &table, &t, &cfg).unwrap();
    assert_eq!(a.avg_score.to_bits(), b.avg_score.to_bits());
    assert_eq!(a, b);

    // Each run owns its stream, so replaying them backwards gives the same set.
    let backwards: f64 = (0..cfg.runs)
        .rev()
        .map(|i| simulate_game(&bank, &table, &t, &cfg, &mut run_rng(cfg.seed, i)).v)
        .sum::<f64>()
        / cfg.runs as f64;
    assert!((backwards - a.avg_score).abs() < 1e-12);

    let other = SimConfig { seed: 78, ..cfg };
    assert_ne!(avg_score(&bank, &table, &t, &other).unwrap().avg_score, a.avg_score);
}

#[test]
fn bad_configs_are_rejected() {
    let bank = two_move_bank();
    let t = linear_table(0.1, 0.1);
    for cfg in [
        SimConfig { runs: 0, ..SimConfig::default() },
        SimConfig { horizon: 0, ..SimConfig::default() },
        SimConfig { uplift_scales: vec![-1.0], ..SimConfig::default() },
    ] {
        assert!(avg_score(&bank, &t, &[0.1], &cfg).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Under a nonnegative constant uplift with one assist, lowering the
    /// threshold can only move the firing earlier on the same draws.
    #[test]
    fn lower_single_threshold_never_scores_less(
        lo in 0.0f64..0.5, extra in 0.0f64..0.5, delta in 0.0f64..0.5, seed in any::<u64>(),
    ) {
        let bank = two_move_bank();
        let table = linear_table(delta, delta);
        let cfg = SimConfig { horizon: 2, ..SimConfig::default() };
        for i in 0..50 {
            let a = simulate_game(&bank, &table, &[lo], &cfg, &mut run_rng(seed, i));
            let b = simulate_game(&bank, &table, &[lo + extra], &cfg, &mut run_rng(seed, i));
            prop_assert!(a.v >= b.v);
            if let (Some(ea), Some(eb)) = (a.events.first(), b.events.first()) {
                prop_assert!(ea.move_number <= eb.move_number);
            }
        }
    }

    /// Events are chronological, one per move, with ordinals 1, 2, ...
    /// and gaps that clear their thresholds.
    #[test]
    fn events_respect_thresholds(t in proptest::collection::vec(0.0f64..0.5, 0..4), seed in any::<u64>()) {
        let (d0, _) = synthetic_logs(30, 15, 0.0, 9);
        let bank = build_banks(&d0, 15).unwrap();
        let cfg = SimConfig { horizon: 15, ..SimConfig::default() };
        let g = simulate_game(&bank, &linear_table(0.1, 0.4), &t, &cfg, &mut run_rng(seed, 0));
        prop_assert!(g.events.len() <= t.len());
        for (j, e) in g.events.iter().enumerate() {
            prop_assert_eq!(e.k as usize, j + 1);
            prop_assert!(e.gap >= t[j]);
            if j > 0 {
                prop_assert!(e.move_number > g.events[j - 1].move_number);
            }
        }
        prop_assert!((0.0..=1.0).contains(&g.v));
    }
}

/// Block support needed before a grid cell counts as populated in the
/// synthetic uplift checks.
const MIN_BLOCK: u32 = 1000;

fn populated_deltas(effect: f64, seed: u64) -> Vec<f64> {
    let (d0, di) = synthetic_logs(10_000, 20, effect, seed);
    let t = fit_uplift(&d0, &di, 10, 101).unwrap();
    for b in &t.bins {
        for mu in [&b.mu1, &b.mu0] {
            let mu = mu.as_ref().unwrap();
            let grid: Vec<f64> = (0..=100).map(|i| mu.eval(i as f64 / 100.0)).collect();
            assert!(grid.windows(2).all(|w| w[0] <= w[1]));
        }
    }
    let cells = t.populated_cells(MIN_BLOCK);
    assert!(cells.len() >= 20, "only {} populated cells", cells.len());
    cells.iter().map(|&(b, i)| t.bins[b].delta[i]).collect()
}

#[test]
fn null_effect_gives_near_zero_uplift() {
    let d = populated_deltas(0.0, 100);
    let mean_abs = d.iter().map(|x| x.abs()).sum::<f64>() / d.len() as f64;
    assert!(mean_abs < 0.02, "mean |delta| = {mean_abs}");
}

#[test]
fn additive_effect_is_recovered() {
    for x in populated_deltas(0.2, 101) {
        assert!((0.17..=0.23).contains(&x), "delta = {x}");
    }
}

#[test]
fn bins_without_interventions_are_flagged() {
    let (d0, mut di) = synthetic_logs(200, 20, 0.1, 4);
    for r in &mut di.records {
        r.interventions[0].move_number = r.interventions[0].move_number.min(10);
    }
    let t = fit_uplift(&d0, &di, 10, 11).unwrap();
    assert_eq!(t.bins.len(), 2);
    assert!(!t.bins[0].empty);
    assert!(t.bins[1].empty);
    assert!(t.bins[1].delta.iter().all(|&d| d == 0.0));
    assert_eq!(t.lookup(15, 0.3), 0.0);

    assert!(fit_uplift(&d0, &d0, 10, 11).is_err());
    assert!(fit_uplift(&d0, &di, 0, 11).is_err());
    assert!(fit_uplift(&d0, &di, 10, 1).is_err());
}

#[test]
fn tables_and_banks_round_trip() {
    let (d0, di) = synthetic_logs(300, 10, 0.1, 6);
    let bank = build_banks(&d0, 10).unwrap();
    let table = fit_uplift(&d0, &di, 5, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (bp, tp) = (dir.path().join("banks.json"), dir.path().join("uplift.json"));
    bank.save(&bp).unwrap();
    table.save(&tp).unwrap();
    assert_eq!(MoveBank::load(&bp).unwrap(), bank);
    assert_eq!(UpliftTable::load(&tp).unwrap(), table);

    let text = std::fs::read_to_string(&tp).unwrap();
    std::fs::write(&tp, text.replacen("\"schema_version\":1", "\"schema_version\":99", 1)).unwrap();
    assert!(UpliftTable::load(&tp).is_err());
}
