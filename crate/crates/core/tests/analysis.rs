use assist_core::analysis::{gap_grid, names, report, score_table, EloFilter, GapGrid};
use assist_core::artifact::{write_json_doc, Provenance};
use assist_core::game::{write_jsonl, Dataset, DatasetKind, GameRecord, MovePoint, Termination};
use assist_core::simfree::SimReport;
use proptest::prelude::*;

fn game(id: usize, pw: &[f64], result: f64, elo: Option<u32>) -> GameRecord {
    GameRecord {
        game_id: format!("g{id}"),
        white_elo: elo,
        black_elo: elo,
        oracle_elo: None,
        budget: 0,
        moves: Vec::new(),
        points: pw
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mut p = MovePoint::with_raw(i as u32 + 1, w, w);
                p.set_calibrated(w, w);
                p
            })
            .collect(),
        interventions: Vec::new(),
        result,
        termination: Termination::Horizon,
    }
}

fn dataset(kind: DatasetKind, games: Vec<GameRecord>) -> Dataset {
    let mut d = Dataset::new(kind);
    d.records = games;
    d
}

/// `wins` games scoring 1 and `draws` scoring 0.5, all with `pw` at every move.
fn block(start: usize, pw: f64, wins: usize, draws: usize, elo: Option<u32>) -> Vec<GameRecord> {
    (0..wins + draws)
        .map(|i| game(start + i, &[pw; 12], if i < wins { 1.0 } else { 0.5 }, elo))
        .collect()
}

#[test]
fn hand_computed_cell() {
    let engine = dataset(DatasetKind::D0, block(0, 0.8, 36, 4, None));
    let mut h = block(100, 0.8, 20, 20, Some(2000));
    h.extend(block(200, 0.3, 0, 40, Some(2000)));
    let human = dataset(DatasetKind::HumanPgn, h);
    let g = gap_grid(&engine, &human, &[10], &[0.7, 0.9], 30, EloFilter::default()).unwrap();
    assert!((g.c_engine[0][0].unwrap() - 0.95).abs() < 1e-12);
    assert!((g.c_human[0][0].unwrap() - 0.75).abs() < 1e-12);
    assert!((g.delta[0][0].unwrap() - 0.2).abs() < 1e-12);
    assert_eq!(g.human_counts[0], vec![40, 0]);
    assert_eq!(g.delta[0][1], None);
    assert!((g.mean_delta - 0.2).abs() < 1e-12);
}

#[test]
fn self_comparison_is_zero() {
    let mut games = block(0, 0.9, 30, 10, None);
    games.extend(block(50, 0.6, 10, 30, None));
    let d = dataset(DatasetKind::D0, games);
    let g = gap_grid(&d, &d, &[1, 5, 10], &[0.5, 0.7, 0.85], 30, EloFilter::default()).unwrap();
    for v in g.delta.iter().flatten().flatten() {
        assert_eq!(*v, 0.0);
    }
    assert_eq!(g.mean_delta, 0.0);
}

#[test]
fn thin_cell_is_undefined() {
    let mut e = block(0, 0.95, 5, 0, None);
    e.extend(block(10, 0.6, 20, 20, None));
    let engine = dataset(DatasetKind::D0, e);
    let human = dataset(DatasetKind::HumanPgn, block(100, 0.95, 20, 20, None));
    let g = gap_grid(&engine, &human, &[3], &[0.5, 0.9], 30, EloFilter::default()).unwrap();
    assert_eq!(g.engine_counts[0][1], 5);
    assert_eq!(g.c_engine[0][1], None);
    assert_eq!(g.delta[0][1], None);
    assert!(g.delta[0][0].is_some());
}

#[test]
fn elo_filter_restricts_human_games() {
    let engine = dataset(DatasetKind::D0, block(0, 0.8, 40, 0, None));
    let mut h = block(100, 0.8, 0, 40, Some(1200));
    h.extend(block(200, 0.8, 40, 0, Some(2400)));
    let human = dataset(DatasetKind::HumanPgn, h);
    let strong = EloFilter { min: Some(2000), max: None };
    let g = gap_grid(&engine, &human, &[5], &[0.7], 30, strong).unwrap();
    assert_eq!(g.human_counts[0][0], 40);
    assert_eq!(g.delta[0][0], Some(0.0));
    let weak = EloFilter { min: None, max: Some(1500) };
    let g = gap_grid(&engine, &human, &[5], &[0.7], 30, weak).unwrap();
    assert_eq!(g.delta[0][0], Some(0.5));
}

#[test]
fn bad_inputs_are_rejected() {
    let d = dataset(DatasetKind::D0, block(0, 0.8, 40, 0, None));
    let empty = Dataset::new(DatasetKind::HumanPgn);
    assert!(gap_grid(&d, &empty, &[5], &[0.7], 30, EloFilter::default()).is_err());
    assert!(gap_grid(&d, &d, &[5], &[0.9], 30, EloFilter::default()).is_err());
    assert!(gap_grid(&d, &d, &[5], &[1.5], 30, EloFilter::default()).is_err());
    let mut raw = d.clone();
    raw.records[0].points[4].pw = None;
    assert!(gap_grid(&raw, &d, &[5], &[0.7], 30, EloFilter::default()).is_err());
}

fn prov() -> Provenance {
    Provenance::of(&serde_json::json!({"seed": 7}), 7).unwrap()
}

#[test]
fn empty_run_dir_names_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let err = report(dir.path(), dir.path(), &prov()).unwrap_err().to_string();
    assert!(err.contains(names::CALIBRATION) && err.contains(names::SIMULATION), "{err}");
}

#[test]
fn report_writes_tables_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    for k in 1..=5u32 {
        let mut d = dataset(DatasetKind::D0, block(0, 0.6, k as usize, 10 - k as usize, None));
        for r in &mut d.records {
            r.budget = k;
        }
        d.source_meta.insert("policy".into(), "random".into());
        write_jsonl(&d, &run.join(format!("{}random-k{k}.jsonl", names::PLAY_PREFIX))).unwrap();
    }
    let sim = SimReport {
        avg_score: 0.61,
        std_error: 0.01,
        frac_fired: vec![0.9, 0.4],
        avg_move: vec![Some(12.0), None],
        runs: 1000,
    };
    write_json_doc(&run.join(names::SIMULATION), "report", &sim, None).unwrap();
    let d = dataset(DatasetKind::D0, block(0, 0.8, 36, 4, None));
    let g: GapGrid = gap_grid(&d, &d, &[5, 10], &[0.6, 0.7], 30, EloFilter::default()).unwrap();
    write_json_doc(&run.join(names::GAP_GRID), "gap_grid", &g, None).unwrap();

    let out = run.join("report");
    let p = prov();
    let files = report(run, &out, &p).unwrap();
    let listed: Vec<String> = files
        .iter()
        .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(listed, ["scores.csv", "simulation.csv", "gap_grid.csv", "gap_grid.svg"]);

    let scores = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    let lines: Vec<&str> = scores.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].ends_with("config_hash,seed"));
    assert!(lines[1..].iter().all(|l| l.ends_with(&format!("{},7", p.config_hash))));
    assert!(lines[3].contains(",random,3,10,0.650000,"), "{}", lines[3]);

    let sim_csv = std::fs::read_to_string(out.join("simulation.csv")).unwrap();
    assert!(sim_csv.lines().nth(2).unwrap().starts_with("2,0.400000,,"));
    let svg = std::fs::read_to_string(out.join("gap_grid.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn score_table_orders_rows() {
    let mk = |policy: &str, k: u32| {
        let mut d = dataset(DatasetKind::D0, block(0, 0.5, 1, 1, None));
        for r in &mut d.records {
            r.budget = k;
        }
        d.source_meta.insert("policy".into(), policy.into());
        (format!("{policy}{k}"), d)
    };
    let rows = score_table(&[mk("random", 2), mk("always", 1), mk("random", 1)]);
    let keys: Vec<(String, u32)> = rows.iter().map(|r| (r.policy.clone(), r.budget)).collect();
    assert_eq!(
        keys,
        [("always".into(), 1), ("random".into(), 1), ("random".into(), 2)]
    );
    assert!((rows[0].mean_score - 0.75).abs() < 1e-12);
    assert!((rows[0].std_error - 0.25).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swap_negates_delta_and_counts_shrink_with_alpha(
        a in prop::collection::vec((0.0f64..1.0, 0u8..3), 40..80),
        b in prop::collection::vec((0.0f64..1.0, 0u8..3), 40..80),
    ) {
        let mk = |v: &[(f64, u8)]| dataset(
            DatasetKind::D0,
            v.iter().enumerate().map(|(i, &(pw, r))| game(i, &[pw; 4], f64::from(r) / 2.0, None)).collect(),
        );
        let (da, db) = (mk(&a), mk(&b));
        let alphas = [0.0, 0.2, 0.4, 0.6, 0.8];
        let f = EloFilter::default();
        let (Ok(g1), Ok(g2)) = (gap_grid(&da, &db, &[2], &alphas, 5, f), gap_grid(&db, &da, &[2], &alphas, 5, f)) else {
            return Ok(());
        };
        for j in 0..alphas.len() {
            match (g1.delta[0][j], g2.delta[0][j]) {
                (Some(x), Some(y)) => prop_assert!((x + y).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "definedness differs"),
            }
            if j > 0 {
                prop_assert!(g1.engine_counts[0][j] <= g1.engine_counts[0][j - 1]);
            }
        }
        prop_assert_eq!(g1.engine_counts[0][0], a.len());
    }
}
