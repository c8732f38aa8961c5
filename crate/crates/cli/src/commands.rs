use std::path::{Path, PathBuf};

use assist_core::analysis::{gap_grid, names, report, EloFilter};
use assist_core::artifact::{write_json_doc, Provenance};
use assist_core::calibration::{build_bank, BankConfig, CalibrationBank, Method, NetConfig};
use assist_core::engine::mock::fake_session;
use assist_core::engine::{EngineConfig, EngineSession};
use assist_core::game::{annotate_from, parse_pgn, read_jsonl, write_jsonl, Dataset, DatasetKind, PgnFilter};
use assist_core::optimize::{
    bayes_opt, make_engine_objective, make_simfree_objective, BoConfig, Objective, SearchSpace, TrialLog,
};
use assist_core::orchestrator::{
    generate_d0, generate_di, play_match, FakeSource, GameStatus, MatchConfig, ProcessSource, RunTally,
    SessionSource,
};
use assist_core::policies::{draw_random_plan, GapScale, MaxDeltaPolicy, Policy, ThresholdPolicy};
use assist_core::predictors::{Family, PredictorSet};
use assist_core::simfree::{avg_score, build_banks, fit_uplift, MoveBank, SimConfig, UpliftTable};
use assist_core::{Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{require_inputs, BackendChoice, CalibrationMethod, PolicyKind, RunConfig};
use crate::{Command, DataKind, MatchArgs};

/// One JSON object per line on stderr.
pub fn status(event: &str, fields: Value) {
    let mut v = json!({ "event": event });
    if let (Some(m), Value::Object(f)) = (v.as_object_mut(), fields) {
        m.extend(f);
    }
    eprintln!("{v}");
}

fn game_status(s: &GameStatus) {
    status("game", serde_json::to_value(s).unwrap_or_default());
}

fn wrote(path: &Path) {
    status("artifact", json!({ "path": path.display().to_string() }));
}

fn provenance(cfg: &RunConfig) -> Result<Provenance> {
    // The output location does not change what is computed.
    let mut view = cfg.clone();
    view.out_dir = PathBuf::new();
    Provenance::of(&view, cfg.seed)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn apply_match(cfg: &mut RunConfig, m: &MatchArgs) {
    let s = &mut cfg.matches;
    if let Some(v) = m.games {
        s.games = v;
    }
    if let Some(v) = m.horizon {
        s.horizon = v;
    }
    if let Some(v) = m.weak_elo {
        s.weak_elo = v;
    }
    if let Some(v) = m.strong_elo {
        s.strong_elo = v;
    }
    if let Some(v) = m.samples {
        s.samples_per_decision = v;
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn source(cfg: &RunConfig) -> Result<Box<dyn SessionSource + Send>> {
    if cfg.engine.fake {
        return Ok(Box::new(FakeSource { seed: cfg.seed }));
    }
    let path = cfg.engine.path.clone().ok_or_else(|| {
        Error::config("engine.path: not set (use --engine, ASSIST_ENGINE or --fake-engine)")
    })?;
    let (weak, strong) = cfg.engine.templates(&path);
    weak.validate()?;
    strong.validate()?;
    Ok(Box::new(ProcessSource { weak, strong }))
}

fn with_meta(ds: &mut Dataset, prov: &Provenance, tally: Option<&RunTally>) -> Result<()> {
    ds.source_meta.insert("provenance".into(), serde_json::to_value(prov)?);
    if let Some(t) = tally {
        ds.source_meta.insert("stopped".into(), t.stopped.into());
    }
    Ok(())
}

/// Every game aborted: an engine problem rather than an empty experiment.
fn check_tally(tally: &RunTally, games: usize) -> Result<()> {
    if games > 0 && tally.completed == 0 && tally.aborted > 0 {
        let reasons: Vec<&str> = tally.abort_reasons.keys().map(String::as_str).collect();
        return Err(Error::SessionDead(format!(
            "all {} games aborted: {}",
            tally.aborted,
            reasons.join("; ")
        )));
    }
    Ok(())
}

fn load_calibrated(path: &Path) -> Result<Dataset> {
    let ds = read_jsonl(path)?;
    if !ds.is_calibrated() {
        return Err(Error::data(format!(
            "{} is not calibrated; run `assist calibrate` first",
            path.display()
        )));
    }
    Ok(ds)
}

fn optional_bank(path: &Path) -> Result<Option<CalibrationBank>> {
    if path.exists() {
        CalibrationBank::load(path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn run(mut cfg: RunConfig, command: Command) -> Result<()> {
    match command {
        Command::GenData { kind, m } => {
            apply_match(&mut cfg, &m);
            cfg.validate()?;
            gen_data(&cfg, kind)
        }
        Command::Ingest { pgn, output, min_elo, max_elo } => {
            cfg.validate()?;
            require_inputs(&[&pgn])?;
            ensure_out_dir(&cfg)?;
            let filter = PgnFilter { min_elo, max_elo, ..PgnFilter::default() };
            let (mut ds, stats) = parse_pgn(&pgn, &filter)?;
            with_meta(&mut ds, &provenance(&cfg)?, None)?;
            ds.source_meta.insert("pgn".into(), pgn.display().to_string().into());
            let out = output.unwrap_or_else(|| cfg.artifact("human.jsonl"));
            write_jsonl(&ds, &out)?;
            wrote(&out);
            println!("{}", serde_json::to_string(&stats)?);
            Ok(())
        }
        Command::Annotate { input, output, samples, resume } => {
            set(&mut cfg.matches.samples_per_decision, samples);
            cfg.validate()?;
            require_inputs(&[&input])?;
            annotate_cmd(&cfg, &input, output.as_deref().unwrap_or(&input), resume)
        }
        Command::Calibrate { d0, method, bucket_width, min_samples, no_apply, apply_to } => {
            set(&mut cfg.calibration.method, method);
            set(&mut cfg.calibration.bucket_width, bucket_width);
            set(&mut cfg.calibration.min_samples, min_samples);
            cfg.calibration.apply &= !no_apply;
            cfg.validate()?;
            calibrate(&cfg, d0.unwrap_or_else(|| cfg.d0_path()), &apply_to)
        }
        Command::TrainPredictors { d0, budget, family } => {
            set(&mut cfg.predictors.budget, budget);
            set(&mut cfg.predictors.family, family);
            cfg.validate()?;
            let d0 = d0.unwrap_or_else(|| cfg.d0_path());
            require_inputs(&[&d0])?;
            let family = Family::by_name(&cfg.predictors.family)?;
            let ds = load_calibrated(&d0)?;
            let set = PredictorSet::train(&ds, cfg.predictors.budget, &family, cfg.seed)?;
            ensure_out_dir(&cfg)?;
            let out = cfg.artifact(names::PREDICTORS);
            set.save_with(&out, Some(&provenance(&cfg)?))?;
            wrote(&out);
            Ok(())
        }
        Command::Play { policy, budget, thresholds, slack, calibration, predictors, m } => {
            apply_match(&mut cfg, &m);
            set(&mut cfg.policy.kind, policy);
            set(&mut cfg.policy.thresholds, thresholds);
            set(&mut cfg.policy.slacks, slack);
            let explicit_budget = budget.is_some();
            set(&mut cfg.policy.budgets, budget);
            cfg.validate()?;
            let cal = cfg.default_input(&calibration, names::CALIBRATION);
            let pred = cfg.default_input(&predictors, names::PREDICTORS);
            play(&mut cfg, explicit_budget, &cal, &pred)
        }
        Command::FitUplift { d0, di, horizon, bin_width, grid_size } => {
            set(&mut cfg.matches.horizon, horizon);
            set(&mut cfg.uplift.bin_width, bin_width);
            set(&mut cfg.uplift.grid_size, grid_size);
            cfg.validate()?;
            let d0 = d0.unwrap_or_else(|| cfg.d0_path());
            let di = di.unwrap_or_else(|| cfg.artifact(names::DI));
            require_inputs(&[&d0, &di])?;
            let (d0, di) = (load_calibrated(&d0)?, load_calibrated(&di)?);
            let banks = build_banks(&d0, cfg.matches.horizon)?;
            let table = fit_uplift(&d0, &di, cfg.uplift.bin_width, cfg.uplift.grid_size)?;
            ensure_out_dir(&cfg)?;
            let prov = provenance(&cfg)?;
            let (bp, up) = (cfg.artifact(names::BANKS), cfg.artifact(names::UPLIFT));
            banks.save_with(&bp, Some(&prov))?;
            table.save_with(&up, Some(&prov))?;
            wrote(&bp);
            wrote(&up);
            let empty = table.bins.iter().filter(|b| b.empty).count();
            println!(
                "{}",
                json!({ "bins": table.bins.len(), "empty_bins": empty, "bank_pairs": banks.total_pairs() })
            );
            Ok(())
        }
        Command::Simulate { thresholds, runs, lambda, horizon, banks, uplift } => {
            set(&mut cfg.simulate.thresholds, thresholds);
            set(&mut cfg.simulate.runs, runs);
            set(&mut cfg.simulate.uplift_scales, lambda);
            set(&mut cfg.matches.horizon, horizon);
            cfg.validate()?;
            let bp = cfg.default_input(&banks, names::BANKS);
            let up = cfg.default_input(&uplift, names::UPLIFT);
            require_inputs(&[&bp, &up])?;
            let (bank, table) = (MoveBank::load(&bp)?, UpliftTable::load(&up)?);
            let report = avg_score(&bank, &table, &cfg.simulate.thresholds, &sim_config(&cfg, cfg.simulate.runs))?;
            ensure_out_dir(&cfg)?;
            let out = cfg.artifact(names::SIMULATION);
            write_json_doc(&out, "report", &report, Some(&provenance(&cfg)?))?;
            wrote(&out);
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Optimize {
            backend,
            k,
            init_points,
            iterations,
            batch_size,
            lower,
            upper,
            ordered,
            games_per_eval,
            runs_per_eval,
            banks,
            uplift,
            calibration,
            m,
        } => {
            apply_match(&mut cfg, &m);
            let o = &mut cfg.optimize;
            set(&mut o.backend, backend);
            set(&mut o.k, k);
            set(&mut o.init_points, init_points);
            set(&mut o.iterations, iterations);
            set(&mut o.batch_size, batch_size);
            set(&mut o.lower, lower);
            set(&mut o.upper, upper);
            set(&mut o.games_per_eval, games_per_eval);
            set(&mut o.runs_per_eval, runs_per_eval);
            o.ordered |= ordered;
            cfg.validate()?;
            let inputs = (
                cfg.default_input(&banks, names::BANKS),
                cfg.default_input(&uplift, names::UPLIFT),
                cfg.default_input(&calibration, names::CALIBRATION),
            );
            optimize(&cfg, inputs)
        }
        Command::GapGrid { engine_data, human, n_values, alpha_values, min_cell, min_elo, max_elo } => {
            let g = &mut cfg.gap_grid;
            set(&mut g.n_values, n_values);
            set(&mut g.alpha_values, alpha_values);
            set(&mut g.min_cell, min_cell);
            g.min_elo = min_elo.or(g.min_elo);
            g.max_elo = max_elo.or(g.max_elo);
            cfg.validate()?;
            let engine = engine_data.unwrap_or_else(|| cfg.d0_path());
            require_inputs(&[&engine, &human])?;
            let g = &cfg.gap_grid;
            let grid = gap_grid(
                &load_calibrated(&engine)?,
                &load_calibrated(&human)?,
                &g.n_values,
                &g.alpha_values,
                g.min_cell,
                EloFilter { min: g.min_elo, max: g.max_elo },
            )?;
            ensure_out_dir(&cfg)?;
            let out = cfg.artifact(names::GAP_GRID);
            write_json_doc(&out, "gap_grid", &grid, Some(&provenance(&cfg)?))?;
            wrote(&out);
            println!("{}", json!({ "mean_delta": grid.mean_delta }));
            Ok(())
        }
        Command::Report { run_dir, report_dir } => {
            cfg.validate()?;
            let run_dir = run_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let out = report_dir.unwrap_or_else(|| run_dir.join("report"));
            for p in report(&run_dir, &out, &provenance(&cfg)?)? {
                wrote(&p);
            }
            Ok(())
        }
    }
}

fn sim_config(cfg: &RunConfig, runs: u64) -> SimConfig {
    SimConfig {
        horizon: cfg.matches.horizon,
        uplift_scales: cfg.simulate.uplift_scales.clone(),
        runs,
        seed: cfg.seed,
    }
}

fn gen_data(cfg: &RunConfig, kind: DataKind) -> Result<()> {
    let src = source(cfg)?;
    ensure_out_dir(cfg)?;
    let prov = provenance(cfg)?;
    let base = cfg.match_config();
    let jobs: Vec<(&str, MatchConfig)> = match kind {
        DataKind::D0 => vec![(names::D0, base)],
        DataKind::Di => vec![(names::DI, base)],
        DataKind::Both => vec![
            (names::D0, base.clone()),
            // A separate seed block keeps the two logs independent.
            (names::DI, MatchConfig { seed: base.seed.wrapping_add(1), ..base }),
        ],
    };
    for (name, mcfg) in jobs {
        let (mut ds, tally) = if name == names::D0 {
            generate_d0(&mcfg, src.as_ref(), &game_status)?
        } else {
            generate_di(&mcfg, src.as_ref(), &game_status)?
        };
        check_tally(&tally, mcfg.games)?;
        with_meta(&mut ds, &prov, Some(&tally))?;
        let out = cfg.artifact(name);
        write_jsonl(&ds, &out)?;
        wrote(&out);
        if tally.stopped {
            break;
        }
    }
    Ok(())
}

fn open_pair(cfg: &RunConfig) -> Result<(EngineSession, EngineSession)> {
    let m = cfg.match_config();
    if cfg.engine.fake {
        let weak = EngineConfig::weak("fake", m.weak_elo);
        let strong = EngineConfig::strong("fake");
        return Ok((fake_session(weak, cfg.seed)?.0, fake_session(strong, cfg.seed ^ 1)?.0));
    }
    let path = cfg
        .engine
        .path
        .clone()
        .ok_or_else(|| Error::config("engine.path: not set (use --engine, ASSIST_ENGINE or --fake-engine)"))?;
    let (mut weak, strong) = cfg.engine.templates(&path);
    weak.elo = m.weak_elo;
    Ok((EngineSession::start(weak)?, EngineSession::start(strong)?))
}

const CURSOR_KEY: &str = "annotate_cursor";

fn annotate_cmd(cfg: &RunConfig, input: &Path, output: &Path, resume: bool) -> Result<()> {
    let ds = read_jsonl(input)?;
    let cursor = if resume {
        ds.source_meta.get(CURSOR_KEY).and_then(Value::as_u64).unwrap_or(0) as usize
    } else {
        0
    };
    let (mut weak, mut strong) = open_pair(cfg)?;
    let samples = cfg.match_config().samples_per_decision;
    let done = annotate_from(ds, cursor, &mut weak, &mut strong, samples);
    weak.shutdown();
    strong.shutdown();
    let mut ds = done.dataset;
    with_meta(&mut ds, &provenance(cfg)?, None)?;
    match done.error {
        None => {
            ds.source_meta.remove(CURSOR_KEY);
            write_jsonl(&ds, output)?;
            wrote(output);
            Ok(())
        }
        Some(e) => {
            // Keep progress so `--resume` can pick up from the failing game.
            ds.source_meta.insert(CURSOR_KEY.into(), done.cursor.into());
            write_jsonl(&ds, output)?;
            status("annotate-partial", json!({ "cursor": done.cursor, "path": output.display().to_string() }));
            Err(e)
        }
    }
}

fn calibrate(cfg: &RunConfig, d0: PathBuf, apply_to: &[PathBuf]) -> Result<()> {
    require_inputs(&[&d0])?;
    let c = &cfg.calibration;
    let method = match c.method {
        CalibrationMethod::Isotonic => Method::Isotonic,
        CalibrationMethod::MonotoneNet => Method::MonotoneNet(NetConfig { seed: cfg.seed, ..NetConfig::default() }),
    };
    let data = read_jsonl(&d0)?;
    let bank = build_bank(
        &data,
        &BankConfig { method, bucket_width: c.bucket_width, horizon: None, min_samples: c.min_samples },
    )?;
    ensure_out_dir(cfg)?;
    let prov = provenance(cfg)?;
    let out = cfg.artifact(names::CALIBRATION);
    bank.save_with(&out, Some(&prov))?;
    wrote(&out);
    if c.apply {
        let mut targets = vec![d0.clone()];
        let di = cfg.artifact(names::DI);
        if di.exists() && di != d0 {
            targets.push(di);
        }
        targets.extend(apply_to.iter().cloned());
        for path in targets {
            let mut ds = if path == d0 { data.clone() } else { read_jsonl(&path)? };
            bank.apply(&mut ds);
            ds.source_meta.insert("calibration".into(), serde_json::to_value(&prov)?);
            write_jsonl(&ds, &path)?;
            wrote(&path);
        }
    }
    let borrowed = bank.borrowed_from.iter().filter(|b| b.is_some()).count();
    println!("{}", json!({ "buckets": bank.curves.len(), "borrowed": borrowed }));
    Ok(())
}

fn play(cfg: &mut RunConfig, explicit_budget: bool, cal: &Path, pred: &Path) -> Result<()> {
    let kind = cfg.policy.kind;
    let bank = optional_bank(cal)?;
    let predictors = if kind == PolicyKind::Maxdelta {
        require_inputs(&[pred, cal])?;
        Some(PredictorSet::load(pred)?)
    } else {
        None
    };
    if !explicit_budget {
        match kind {
            PolicyKind::Threshold => cfg.policy.budgets = vec![cfg.policy.thresholds.len() as u32],
            PolicyKind::Maxdelta => cfg.policy.budgets = vec![predictors.as_ref().map_or(0, |p| p.budget)],
            PolicyKind::Never => cfg.policy.budgets = vec![0],
            _ => {}
        }
    }
    let budgets = cfg.policy.budgets.clone();
    if budgets.is_empty() {
        return Err(Error::config("policy.budgets: need at least one budget"));
    }
    let src = source(cfg)?;
    ensure_out_dir(cfg)?;
    let prov = provenance(cfg)?;
    let horizon = cfg.matches.horizon;
    for k in budgets {
        let policy: Option<Policy> = match kind {
            PolicyKind::Never => Some(Policy::Never),
            PolicyKind::Always => Some(Policy::Always { budget: k }),
            PolicyKind::Random => {
                if k > horizon {
                    return Err(Error::config(format!("policy.budgets: {k} exceeds match.horizon {horizon}")));
                }
                None
            }
            PolicyKind::Threshold => {
                let t = &cfg.policy.thresholds;
                if t.len() != k as usize {
                    return Err(Error::config(format!(
                        "policy.thresholds: budget {k} needs {k} thresholds, got {}",
                        t.len()
                    )));
                }
                let mut p = ThresholdPolicy::new(t.clone())?;
                if bank.is_none() {
                    p.scale = GapScale::Raw;
                    status("warning", json!({ "message": format!("{} not found; thresholds apply to raw engine scores", cal.display()) }));
                }
                Some(Policy::Threshold(p))
            }
            PolicyKind::Maxdelta => {
                let set = predictors.clone().expect("loaded above");
                if set.budget != k {
                    return Err(Error::config(format!(
                        "policy.budgets: predictors were trained for budget {}, not {k}",
                        set.budget
                    )));
                }
                let slacks = if cfg.policy.slacks.is_empty() {
                    vec![0.0; k as usize]
                } else {
                    cfg.policy.slacks.clone()
                };
                Some(Policy::MaxDelta(MaxDeltaPolicy::new(set, slacks)?))
            }
        };
        let mcfg = MatchConfig { budget: k, ..cfg.match_config() };
        let make = |rng: &mut ChaCha8Rng| -> Result<Policy> {
            match &policy {
                Some(p) => Ok(p.clone()),
                None => Ok(Policy::Random(draw_random_plan(k, horizon, rng)?)),
            }
        };
        let (records, tally) = play_match(&mcfg, src.as_ref(), bank.as_ref(), &make, &game_status)?;
        check_tally(&tally, mcfg.games)?;
        let mut ds = Dataset::new(DatasetKind::Play);
        ds.records = records;
        ds.source_meta.insert("policy".into(), policy_name(kind).into());
        ds.source_meta.insert("budget".into(), k.into());
        ds.source_meta.insert("match".into(), serde_json::to_value(&mcfg)?);
        ds.source_meta.insert("aborted".into(), tally.aborted.into());
        with_meta(&mut ds, &prov, Some(&tally))?;
        let out = cfg.artifact(&format!("{}{}-k{k}.jsonl", names::PLAY_PREFIX, policy_name(kind)));
        write_jsonl(&ds, &out)?;
        wrote(&out);
        println!(
            "{}",
            json!({ "policy": policy_name(kind), "budget": k, "games": ds.records.len(), "mean_score": ds.mean_result() })
        );
        if tally.stopped {
            break;
        }
    }
    Ok(())
}

fn policy_name(kind: PolicyKind) -> &'static str {
    match kind {
        PolicyKind::Never => "never",
        PolicyKind::Always => "always",
        PolicyKind::Random => "random",
        PolicyKind::Threshold => "threshold",
        PolicyKind::Maxdelta => "maxdelta",
    }
}

/// Best parameters without wall-clock fields, so reruns compare bit-exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct Best {
    pub best_params: Vec<f64>,
    pub best_value: f64,
    pub backend: BackendChoice,
    pub evaluations: usize,
}

fn optimize(cfg: &RunConfig, (banks, uplift, cal): (PathBuf, PathBuf, PathBuf)) -> Result<()> {
    let o = &cfg.optimize;
    let space = SearchSpace::new(vec![o.lower; o.k], vec![o.upper; o.k], o.ordered)?;
    let objective: Box<dyn Objective> = match o.backend {
        BackendChoice::Simfree => {
            require_inputs(&[&banks, &uplift])?;
            let sim = sim_config(cfg, o.runs_per_eval);
            Box::new(make_simfree_objective(MoveBank::load(&banks)?, UpliftTable::load(&uplift)?, sim))
        }
        BackendChoice::Engine => {
            if o.games_per_eval < 1 {
                return Err(Error::config("optimize.games_per_eval: must be at least 1"));
            }
            Box::new(make_engine_objective(cfg.match_config(), source(cfg)?, optional_bank(&cal)?, o.games_per_eval))
        }
    };
    let bo = BoConfig {
        init_points: o.init_points,
        iterations: o.iterations,
        candidates: o.candidates,
        batch_size: o.batch_size,
        seed: cfg.seed,
        ..BoConfig::default()
    };
    ensure_out_dir(cfg)?;
    let prov = provenance(cfg)?;
    let trials_path = cfg.artifact(names::TRIALS);
    let mut log = TrialLog::create(&trials_path, Some(&prov))?;
    let result = bayes_opt(objective.as_ref(), &space, &bo, &mut |t| {
        status("trial", serde_json::to_value(t).unwrap_or_default());
        log.append(t)
    })?;
    log.finish()?;
    wrote(&trials_path);
    let best = Best {
        best_params: result.best_params,
        best_value: result.best_value,
        backend: o.backend,
        evaluations: result.trials.len(),
    };
    let out = cfg.artifact(names::BEST);
    write_json_doc(&out, "best", &best, Some(&prov))?;
    wrote(&out);
    println!("{}", serde_json::to_string(&best)?);
    Ok(())
}
