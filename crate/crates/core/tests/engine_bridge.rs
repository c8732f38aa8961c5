use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::time::{Duration, Instant};

use assist_core::engine::mock::{fake_session, ScriptedTransport};
use assist_core::engine::{EngineConfig, EngineSession, SearchLimit};
use assist_core::Error;

fn moves(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn handshake_lines() -> Vec<&'static str> {
    vec![
        "id name Scripted",
        "option name Threads type spin default 1 min 1 max 8",
        "option name UCI_LimitStrength type check default false",
        "option name UCI_Elo type spin default 1320 min 1320 max 3190",
        "option name UCI_ShowWDL type check default false",
        "uciok",
    ]
}

/// Engine that always reports the same side-to-move WDL.
fn constant_wdl_session(wdl: &'static str) -> EngineSession {
    let mut handshake = Some(handshake_lines());
    let (transport, _) = ScriptedTransport::new(Box::new(move |cmd| {
        let out: Vec<String> = match cmd.split_whitespace().next() {
            Some("uci") => handshake.take().unwrap_or_default().into_iter().map(String::from).collect(),
            Some("isready") => vec!["readyok".into()],
            Some("go") => vec![
                "info depth 1 score cp 10 wdl 100 800 100 pv a2a3".into(),
                format!("info depth 2 score cp 12 wdl {wdl} pv a2a3"),
                "bestmove a2a3".into(),
            ],
            _ => Vec::new(),
        };
        out
    }));
    EngineSession::with_transport(EngineConfig::weak("mock", 1500), Box::new(transport)).unwrap()
}

#[test]
fn handshake_applies_strength_options() {
    let (session, transcript) = fake_session(EngineConfig::weak("mock", 1500), 1).unwrap();
    assert!(session.is_alive());
    assert_eq!(session.elo_bounds(), Some((1320, 3190)));
    let cmds = transcript.commands();
    assert_eq!(cmds[0], "uci");
    assert!(cmds.contains(&"setoption name UCI_LimitStrength value true".to_string()));
    assert!(cmds.contains(&"setoption name UCI_Elo value 1500".to_string()));
    assert!(cmds.contains(&"setoption name UCI_ShowWDL value true".to_string()));
    assert!(cmds.contains(&"setoption name Threads value 1".to_string()));
    assert_eq!(cmds.last().unwrap(), "isready");
}

#[test]
fn full_strength_session_disables_limit() {
    let (_session, transcript) = fake_session(EngineConfig::strong("mock"), 1).unwrap();
    let cmds = transcript.commands();
    assert!(cmds.contains(&"setoption name UCI_LimitStrength value false".to_string()));
    assert!(!cmds.iter().any(|c| c.starts_with("setoption name UCI_Elo")));
}

#[test]
fn elo_outside_advertised_range_is_rejected() {
    let err = fake_session(EngineConfig::weak("mock", 1000), 1).unwrap_err();
    assert!(matches!(err, Error::OptionRejected { ref name, .. } if name == "UCI_Elo"));
}

#[test]
fn option_rejected_by_engine_is_reported() {
    let mut handshake = Some(handshake_lines());
    let (transport, _) = ScriptedTransport::new(Box::new(move |cmd| {
        match cmd.split_whitespace().next() {
            Some("uci") => handshake.take().unwrap_or_default().into_iter().map(String::from).collect(),
            Some("setoption") if cmd.contains("Threads") => vec!["No such option: Threads".into()],
            Some("isready") => vec!["readyok".into()],
            _ => Vec::new(),
        }
    }));
    let err = EngineSession::with_transport(EngineConfig::weak("mock", 1500), Box::new(transport))
        .unwrap_err();
    assert!(matches!(err, Error::OptionRejected { .. }), "{err}");
}

#[test]
fn handshake_timeout_when_engine_is_silent() {
    let (transport, _) = ScriptedTransport::new(Box::new(|_| Vec::new()));
    let err = EngineSession::with_transport(EngineConfig::weak("mock", 1500), Box::new(transport))
        .unwrap_err();
    assert!(matches!(err, Error::Timeout { ref waiting_for, .. } if waiting_for == "uciok"));
}

#[test]
fn missing_binary_is_a_spawn_error() {
    let err = EngineSession::start(EngineConfig::weak("/nonexistent/engine-binary", 1500)).unwrap_err();
    assert!(matches!(err, Error::Spawn { .. }));
}

#[test]
fn checkmate_by_white_scores_one() {
    let (mut s, _) = fake_session(EngineConfig::strong("mock"), 3).unwrap();
    // Scholar's mate.
    let sample = s
        .evaluate(&moves("e2e4 e7e5 f1c4 b8c6 d1h5 g8f6 h5f7"))
        .unwrap();
    assert_eq!(sample.score_raw, 1.0);
    assert_eq!(sample.move_uci, "(none)");
}

#[test]
fn stalemate_scores_one_half() {
    let (mut s, _) = fake_session(EngineConfig::strong("mock"), 3).unwrap();
    // Shortest known stalemate (Sam Loyd, 10 moves).
    let line = "e2e3 a7a5 d1h5 a8a6 h5a5 h7h5 h2h4 a6h6 a5c7 f7f6 c7d7 e8f7 d7b7 d8d3 b7b8 d3h7 b8c8 f7g6 c8e6";
    let sample = s.evaluate(&moves(line)).unwrap();
    assert_eq!(sample.score_raw, 0.5);
}

#[test]
fn deepest_wdl_wins_and_is_normalized_to_white() {
    // White to move: taken as is.
    let mut s = constant_wdl_session("600 300 100");
    let a = s.evaluate(&[]).unwrap();
    assert_eq!(a.score_raw, 0.75);
    // Black to move: flipped.
    let b = s.evaluate(&moves("g1f3")).unwrap();
    assert_eq!(b.score_raw, 0.25);
}

#[test]
fn symmetric_positions_flip_to_complementary_scores() {
    // After 1.Nf3 Nf6 2.Ng1 Ng8 the start position recurs with White to move;
    // after 1.Nf3 Nf6 2.Ng1 Ng8 3.Nf3 Nf6 4.Ng1 it is the mirror with Black to
    // move except for the knight. Any engine that scores symmetric positions
    // identically for the side to move yields complementary White scores.
    let mut s = constant_wdl_session("420 380 200");
    let white_view = s.evaluate(&moves("g1f3 g8f6 f3g1 f6g8")).unwrap();
    let black_view = s.evaluate(&moves("g1f3 g8f6 f3g1")).unwrap();
    assert!((white_view.score_raw + black_view.score_raw - 1.0).abs() < 1e-12);
}

#[test]
fn sample_moves_issues_exactly_n_searches() {
    let (mut s, transcript) = fake_session(EngineConfig::weak("mock", 1500), 5).unwrap();
    let samples = s.sample_moves(&moves("e2e4 e7e5"), 10).unwrap();
    assert_eq!(samples.len(), 10);
    assert_eq!(transcript.count_prefix("go "), 10);
    assert_eq!(s.go_count(), 10);
    for sm in &samples {
        assert_eq!(sm.score_raw, sm.wdl.score());
    }

    let single = s.sample_moves(&moves("e2e4"), 1).unwrap();
    assert_eq!(single.len(), 1);
    assert!(s.sample_moves(&[], 0).is_err());
}

#[test]
fn forced_move_gives_identical_samples() {
    let (mut s, _) = fake_session(EngineConfig::weak("mock", 1500), 9).unwrap();
    // 1.e4 f5 2.Qh5+ leaves g7-g6 as Black's only legal reply.
    let samples = s.sample_moves(&moves("e2e4 f7f5 d1h5"), 10).unwrap();
    assert!(samples.iter().all(|m| m.move_uci == "g7g6"));
}

#[test]
fn illegal_move_list_is_rejected_without_killing_session() {
    let (mut s, transcript) = fake_session(EngineConfig::weak("mock", 1500), 1).unwrap();
    let err = s.evaluate(&moves("e2e5")).unwrap_err();
    assert!(matches!(err, Error::IllegalMove { ply: 0, .. }));
    assert_eq!(transcript.count_prefix("go"), 0);
    assert!(s.is_alive());
}

#[test]
fn crash_mid_search_marks_session_dead() {
    let mut handshake = Some(handshake_lines());
    let (transport, _) = ScriptedTransport::new(Box::new(move |cmd| {
        match cmd.split_whitespace().next() {
            Some("uci") => handshake.take().unwrap_or_default().into_iter().map(String::from).collect(),
            Some("isready") => vec!["readyok".into()],
            Some("go") => vec!["info depth 1 wdl 10 980 10".into(), "<eof>".into()],
            _ => Vec::new(),
        }
    }));
    let mut s =
        EngineSession::with_transport(EngineConfig::weak("mock", 1500), Box::new(transport)).unwrap();
    let err = s.evaluate(&[]).unwrap_err();
    assert!(matches!(err, Error::SessionDead(_)));
    assert!(!s.is_alive());
    let first = s.evaluate(&[]).unwrap_err().to_string();
    let second = s.sample_moves(&[], 2).unwrap_err().to_string();
    assert_eq!(first, second);
}

#[test]
fn missing_wdl_is_an_error() {
    let mut handshake = Some(handshake_lines());
    let (transport, _) = ScriptedTransport::new(Box::new(move |cmd| {
        match cmd.split_whitespace().next() {
            Some("uci") => handshake.take().unwrap_or_default().into_iter().map(String::from).collect(),
            Some("isready") => vec!["readyok".into()],
            Some("go") => vec!["info depth 1 score cp 20".into(), "bestmove e2e4".into()],
            _ => Vec::new(),
        }
    }));
    let mut s =
        EngineSession::with_transport(EngineConfig::weak("mock", 1500), Box::new(transport)).unwrap();
    assert!(matches!(s.evaluate(&[]).unwrap_err(), Error::MissingWdl));
}

#[test]
fn shutdown_is_idempotent() {
    let (mut s, transcript) = fake_session(EngineConfig::weak("mock", 1500), 1).unwrap();
    s.shutdown();
    assert!(!s.is_alive());
    s.shutdown();
    assert_eq!(transcript.count_prefix("quit"), 1);
}

fn write_script(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
    let path = dir.path().join("engine.sh");
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

const SH_ENGINE_HEAD: &str = "#!/bin/sh\n\
while read line; do\n\
  case \"$line\" in\n\
    uci) echo 'option name Threads type spin default 1 min 1 max 8'; \
         echo 'option name UCI_LimitStrength type check default false'; \
         echo 'option name UCI_Elo type spin default 1320 min 1320 max 3190'; \
         echo 'option name UCI_ShowWDL type check default false'; echo uciok ;;\n\
    isready) echo readyok ;;\n\
    go*) echo 'info depth 3 score cp 30 wdl 200 700 100 pv e2e4'; echo 'bestmove e2e4' ;;\n";

#[test]
fn process_engine_round_trip_and_clean_exit() {
    let dir = tempfile::tempdir().unwrap();
    let script = format!("{SH_ENGINE_HEAD}    quit) exit 0 ;;\n  esac\ndone\n");
    let path = write_script(&dir, &script);
    let mut config = EngineConfig::weak(&path, 1500);
    config.search_limit = SearchLimit::Depth(3);
    let mut s = EngineSession::start(config).unwrap();
    let sample = s.evaluate(&[]).unwrap();
    assert_eq!(sample.move_uci, "e2e4");
    assert_eq!(sample.score_raw, 0.55);
    let t = Instant::now();
    s.shutdown();
    assert!(t.elapsed() < Duration::from_secs(2));
}

#[test]
fn hung_engine_is_killed_after_grace_period() {
    let dir = tempfile::tempdir().unwrap();
    // Ignores `quit` and keeps running after stdin closes.
    let script = format!("{SH_ENGINE_HEAD}  esac\ndone\nsleep 30\n");
    let path = write_script(&dir, &script);
    let mut s = EngineSession::start(EngineConfig::weak(&path, 1500)).unwrap();
    let t = Instant::now();
    s.shutdown();
    let waited = t.elapsed();
    assert!(waited >= Duration::from_millis(1900), "{waited:?}");
    assert!(waited < Duration::from_secs(10), "{waited:?}");
}

/// Talks to a real engine named by `ASSIST_ENGINE` (plus optional
/// whitespace-separated `ASSIST_ENGINE_ARGS`).
#[test]
#[ignore = "requires a UCI engine binary in ASSIST_ENGINE"]
fn real_engine_start_position_is_slightly_white_favoured() {
    let path = std::env::var("ASSIST_ENGINE").expect("ASSIST_ENGINE");
    let args = std::env::var("ASSIST_ENGINE_ARGS")
        .map(|a| a.split_whitespace().map(String::from).collect())
        .unwrap_or_default();
    let mut s = EngineSession::start(EngineConfig::strong(path).with_args(args)).unwrap();
    let sample = s.evaluate(&[]).unwrap();
    assert!(sample.score_raw >= 0.5 && sample.score_raw < 0.6, "{sample:?}");
    let mated = s.evaluate(&moves("e2e4 e7e5 f1c4 b8c6 d1h5 g8f6 h5f7")).unwrap();
    assert_eq!(mated.score_raw, 1.0);
}
