use assist_core::artifact::Provenance;
use assist_core::optimize::{
    bayes_opt, expected_improvement, make_engine_objective, make_simfree_objective, random_search,
    read_trials, BoConfig, Evaluation, FnObjective, Objective, Backend, Proposal, SearchSpace, Trial,
    TrialLog, read_result, write_result,
};
use assist_core::orchestrator::{FakeSource, MatchConfig};
use assist_core::simfree::{build_banks, fit_uplift, synthetic_logs, SimConfig};
use assist_core::Error;

fn run(obj: &dyn Objective, space: &SearchSpace, cfg: &BoConfig) -> assist_core::optimize::BoResult {
    bayes_opt(obj, space, cfg, &mut |_| Ok(())).unwrap()
}

fn unit(k: usize) -> SearchSpace {
    SearchSpace::new(vec![0.0; k], vec![1.0; k], false).unwrap()
}

#[test]
fn finds_the_analytic_optimum_on_every_seed() {
    let f = FnObjective(|x: &[f64]| 1.0 - (x[0] - 0.3).powi(2));
    for seed in 0..10 {
        let cfg = BoConfig { seed, ..BoConfig::default() };
        let r = run(&f, &unit(1), &cfg);
        assert_eq!(r.trials.len(), 33);
        assert!((r.best_params[0] - 0.3).abs() < 0.05, "seed {seed}: {:?}", r.best_params);
    }
}

#[test]
fn constant_objective_falls_back_to_random_search() {
    let f = FnObjective(|_: &[f64]| 0.42);
    let cfg = BoConfig { init_points: 3, iterations: 5, ..BoConfig::default() };
    let r = run(&f, &unit(2), &cfg);
    assert_eq!(r.best_value, 0.42);
    assert!(r.trials[3..].iter().all(|t| t.proposal == Proposal::RandomFallback));
    assert!(r.trials[..3].iter().all(|t| t.proposal == Proposal::Initial));
}

#[test]
fn incumbent_is_the_best_recorded_trial() {
    let f = FnObjective(|x: &[f64]| (x[0] * 7.0).sin().abs() * 0.5 + x[1] * 0.4);
    for seed in 0..5 {
        let cfg = BoConfig { init_points: 4, iterations: 8, seed, ..BoConfig::default() };
        let r = run(&f, &unit(2), &cfg);
        let best = r.trials.iter().filter_map(|t| t.value).fold(f64::MIN, f64::max);
        assert_eq!(r.best_value, best);
        let t = r.trials.iter().find(|t| t.value == Some(best)).unwrap();
        assert_eq!(t.params, r.best_params);
    }
}

#[test]
fn proposals_respect_bounds_and_ordering() {
    let space = SearchSpace { ordered: true, ..SearchSpace::thresholds(3) };
    let f = FnObjective(|x: &[f64]| 0.5 + 0.1 * x[0] - 0.2 * (x[2] - 0.4).powi(2));
    let cfg = BoConfig { init_points: 5, iterations: 10, candidates: 512, ..BoConfig::default() };
    let r = run(&f, &space, &cfg);
    for t in &r.trials {
        assert!(t.params.windows(2).all(|w| w[0] <= w[1]), "{:?}", t.params);
        assert!(t.params.iter().all(|x| (0.0..=0.6).contains(x)));
    }

    let skew = SearchSpace::new(vec![0.2, -1.0], vec![0.7, 3.0], false).unwrap();
    let r = run(&FnObjective(|x: &[f64]| 0.5 + 0.01 * x[1]), &skew, &cfg);
    for t in &r.trials {
        assert!((0.2..=0.7).contains(&t.params[0]) && (-1.0..=3.0).contains(&t.params[1]));
    }

    assert!(SearchSpace::new(vec![0.5], vec![0.5], false).is_err());
    assert!(SearchSpace::new(vec![0.0, 0.1], vec![1.0, 1.0], true).is_err());
    assert!(SearchSpace::new(vec![f64::NAN], vec![1.0], false).is_err());
}

struct Flaky;

impl Objective for Flaky {
    fn evaluate(&self, x: &[f64]) -> assist_core::Result<Evaluation> {
        if x[0] < 0.5 {
            Err(Error::data("boom"))
        } else {
            Ok(Evaluation { value: x[0] - 0.5, noise: 0.0 })
        }
    }

    fn backend(&self) -> Backend {
        Backend::Analytic
    }
}

#[test]
fn failed_trials_are_recorded_and_skipped() {
    let cfg = BoConfig { init_points: 6, iterations: 6, seed: 3, ..BoConfig::default() };
    let r = run(&Flaky, &unit(1), &cfg);
    assert_eq!(r.trials.len(), 12);
    assert!(r.trials.iter().any(|t| t.error.is_some() && t.value.is_none()));
    assert!(r.best_params[0] >= 0.5);

    let always_fail = FnObjective(|_: &[f64]| f64::NAN);
    assert!(bayes_opt(&always_fail, &unit(1), &cfg, &mut |_| Ok(())).is_err());
    let bad = BoConfig { iterations: 0, ..BoConfig::default() };
    assert!(bayes_opt(&Flaky, &unit(1), &bad, &mut |_| Ok(())).is_err());
}

fn strip_cost(trials: &[Trial]) -> Vec<Trial> {
    trials.iter().map(|t| Trial { cost: 0.0, ..t.clone() }).collect()
}

#[test]
fn trial_sequence_is_seeded() {
    let f = FnObjective(|x: &[f64]| 1.0 - (x[0] - 0.6).powi(2) - (x[1] - 0.2).powi(2));
    let cfg = BoConfig { init_points: 4, iterations: 6, seed: 9, ..BoConfig::default() };
    let a = run(&f, &unit(2), &cfg);
    let b = run(&f, &unit(2), &cfg);
    assert_eq!(strip_cost(&a.trials), strip_cost(&b.trials));
    let c = run(&f, &unit(2), &BoConfig { seed: 10, ..cfg.clone() });
    assert_ne!(strip_cost(&a.trials), strip_cost(&c.trials));

    let batched = run(&f, &unit(2), &BoConfig { batch_size: 3, ..cfg });
    assert_eq!(batched.trials.len(), 10);
}

/// On a noiseless unimodal 1-D objective, summed final regret over 20 seeds
/// is no worse than random search with the same budget.
#[test]
fn beats_random_search_in_aggregate() {
    let f = FnObjective(|x: &[f64]| 1.0 - (x[0] - 0.73).powi(2));
    let (mut bo, mut rs) = (0.0, 0.0);
    for seed in 0..20 {
        let cfg = BoConfig { init_points: 4, iterations: 8, seed, ..BoConfig::default() };
        bo += 1.0 - run(&f, &unit(1), &cfg).best_value;
        rs += 1.0 - random_search(&f, &unit(1), 12, seed).unwrap().best_value;
    }
    assert!(bo <= rs, "bo regret {bo}, random regret {rs}");
}

#[test]
fn expected_improvement_shape() {
    assert_eq!(expected_improvement(0.5, 0.0, 0.2, 0.0), 0.3);
    assert_eq!(expected_improvement(0.1, 0.0, 0.2, 0.0), 0.0);
    let lo = expected_improvement(0.0, 1.0, 0.5, 0.0);
    let hi = expected_improvement(0.2, 1.0, 0.5, 0.0);
    assert!(lo > 0.0 && hi > lo);
    assert!(expected_improvement(0.0, 2.0, 0.5, 0.0) > lo);
    // At mean = best, EI = sd * phi(0).
    let at = expected_improvement(0.5, 1.0, 0.5, 0.0);
    assert!((at - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
}

#[test]
fn simfree_objective_is_deterministic() {
    let (d0, di) = synthetic_logs(300, 10, 0.1, 2);
    let bank = build_banks(&d0, 10).unwrap();
    let uplift = fit_uplift(&d0, &di, 5, 11).unwrap();
    let baseline = bank.baseline_mean;
    let sim = SimConfig { horizon: 10, runs: 2000, seed: 4, ..SimConfig::default() };
    let obj = make_simfree_objective(bank, uplift, sim);
    let unreachable = obj.evaluate(&[1.0, 1.0]).unwrap();
    assert!((unreachable.value - baseline).abs() < 1e-12);
    let a = obj.evaluate(&[0.1, 0.2]).unwrap();
    assert_eq!(a, obj.evaluate(&[0.1, 0.2]).unwrap());
    assert_eq!(obj.backend(), Backend::Simfree);
}

#[test]
fn engine_objective_plays_threshold_games() {
    let cfg = MatchConfig { horizon: 5, samples_per_decision: 1, seed: 3, ..MatchConfig::default() };
    let obj = make_engine_objective(cfg, Box::new(FakeSource { seed: 1 }), None, 3);
    let e = obj.evaluate(&[0.05, 0.1]).unwrap();
    assert!((0.0..=1.0).contains(&e.value));
    assert!((e.noise - (e.value * (1.0 - e.value) / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(obj.backend(), Backend::Engine);
}

#[test]
fn trial_log_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trials.jsonl");
    let prov = Provenance::of(&"cfg", 3).unwrap();
    let mut log = TrialLog::create(&path, Some(&prov)).unwrap();
    let f = FnObjective(|x: &[f64]| x[0] * 0.5);
    let cfg = BoConfig { init_points: 2, iterations: 2, ..BoConfig::default() };
    let r = bayes_opt(&f, &unit(1), &cfg, &mut |t| log.append(t)).unwrap();
    assert!(!path.exists(), "log must stay under its partial name until finished");
    log.finish().unwrap();
    assert_eq!(read_trials(&path).unwrap(), r.trials);
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.lines().next().unwrap().contains(&prov.config_hash));

    let best = dir.path().join("best.json");
    write_result(&best, &r, Some(&prov)).unwrap();
    assert_eq!(read_result(&best).unwrap(), r);
}
