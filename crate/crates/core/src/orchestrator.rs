//! Engine-vs-engine play with an intervention policy in the loop, dataset
//! generation, the post-hoc oracle bound and hindsight branching.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::board::{BoardOutcome, GameBoard};
use crate::calibration::CalibrationBank;
use crate::engine::mock::fake_session;
use crate::engine::{assess, EngineConfig, EngineSession, DEFAULT_ELO_RANGE};
use crate::error::{Error, Result};
use crate::game::{
    Dataset, DatasetKind, GameRecord, InterventionEvent, MovePoint, Termination, RANDOM_SINGLE_TAG,
};
use crate::policies::{DecisionContext, GapScale, Policy};
use crate::predictors::PrefixStats;

/// Samples per decision in the reduced-fidelity `--fast` mode.
pub const FAST_SAMPLES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// ELO of both the White and Black players.
    pub weak_elo: u32,
    /// ELO of the assisting engine; at or above the engine maximum it plays unlimited.
    pub strong_elo: u32,
    pub budget: u32,
    #[serde(default = "default_samples")]
    pub samples_per_decision: usize,
    pub horizon: u32,
    pub seed: u64,
    pub games: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_samples() -> usize {
    10
}

fn default_workers() -> usize {
    1
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            weak_elo: 1500,
            strong_elo: DEFAULT_ELO_RANGE.1,
            budget: 0,
            samples_per_decision: default_samples(),
            horizon: 200,
            seed: 0,
            games: 1,
            workers: 1,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strong_elo < self.weak_elo {
            return Err(Error::config(format!(
                "strong ELO {} is below weak ELO {}",
                self.strong_elo, self.weak_elo
            )));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.samples_per_decision < 1 {
            return Err(Error::config("samples per decision must be at least 1"));
        }
        if self.workers < 1 {
            return Err(Error::config("need at least one worker"));
        }
        Ok(())
    }

    /// Fewer samples per decision; a fidelity reduction for quick runs.
    pub fn fast(mut self) -> Self {
        self.samples_per_decision = FAST_SAMPLES;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    White,
    Black,
    Strong,
}

/// Opens engine sessions for the workers.
pub trait SessionSource: Sync {
    /// `stream` distinguishes sessions so randomized engines differ per worker.
    fn open(&self, role: Role, cfg: &MatchConfig, stream: u64) -> Result<EngineSession>;
}

/// Sessions on an external UCI engine built from two config templates.
#[derive(Clone, Debug)]
pub struct ProcessSource {
    pub weak: EngineConfig,
    pub strong: EngineConfig,
}

impl SessionSource for ProcessSource {
    fn open(&self, role: Role, cfg: &MatchConfig, _stream: u64) -> Result<EngineSession> {
        EngineSession::start(role_config(&self.weak, &self.strong, role, cfg))
    }
}

/// Sessions on the in-process toy engine; for tests and dry runs.
#[derive(Clone, Debug)]
pub struct FakeSource {
    pub seed: u64,
}

impl SessionSource for FakeSource {
    fn open(&self, role: Role, cfg: &MatchConfig, stream: u64) -> Result<EngineSession> {
        let weak = EngineConfig::weak("fake", cfg.weak_elo);
        let strong = EngineConfig::strong("fake");
        let seed = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(stream * 3 + role as u64);
        fake_session(role_config(&weak, &strong, role, cfg), seed).map(|(s, _)| s)
    }
}

fn role_config(weak: &EngineConfig, strong: &EngineConfig, role: Role, cfg: &MatchConfig) -> EngineConfig {
    match role {
        Role::White | Role::Black => EngineConfig {
            elo: cfg.weak_elo,
            limit_strength: true,
            ..weak.clone()
        },
        Role::Strong => EngineConfig {
            elo: cfg.strong_elo,
            limit_strength: cfg.strong_elo < DEFAULT_ELO_RANGE.1,
            ..strong.clone()
        },
    }
}

/// The three engines of one game: White and Black at the weak ELO, and the
/// strong assistant that also scores candidate moves.
pub struct Sessions {
    pub white: EngineSession,
    pub black: EngineSession,
    pub strong: EngineSession,
}

impl Sessions {
    pub fn open(source: &dyn SessionSource, cfg: &MatchConfig, stream: u64) -> Result<Self> {
        Ok(Sessions {
            white: source.open(Role::White, cfg, stream)?,
            black: source.open(Role::Black, cfg, stream)?,
            strong: source.open(Role::Strong, cfg, stream)?,
        })
    }

    fn new_game(&mut self) -> Result<()> {
        self.white.new_game()?;
        self.black.new_game()?;
        self.strong.new_game()
    }

    fn alive(&self) -> bool {
        self.white.is_alive() && self.black.is_alive() && self.strong.is_alive()
    }
}

/// Moves already fixed before play resumes: the ply list (ending with Black
/// to move or White to move) and the evaluation points of its White moves.
#[derive(Clone, Debug, Default)]
pub struct Prefix {
    pub moves: Vec<String>,
    pub points: Vec<MovePoint>,
    pub interventions: Vec<InterventionEvent>,
}

impl Prefix {
    /// The first `t - 1` White moves of `record` and the Black replies to them.
    pub fn before_move(record: &GameRecord, t: u32) -> Self {
        let plies = (2 * (t.max(1) as usize - 1)).min(record.moves.len());
        Prefix {
            moves: record.moves[..plies].to_vec(),
            points: record.points.iter().filter(|p| p.move_number < t).cloned().collect(),
            interventions: record
                .interventions
                .iter()
                .filter(|e| e.move_number < t)
                .cloned()
                .collect(),
        }
    }
}

/// Final score for a game stopped at the horizon: White's last calibrated
/// (else raw) weak-move probability rounded to the nearest of 0, 1/2, 1.
pub fn horizon_result(points: &[MovePoint]) -> f64 {
    let p = points
        .last()
        .and_then(|p| p.pw.or(p.pw_raw))
        .unwrap_or(0.5);
    ((2.0 * p).round() / 2.0).clamp(0.0, 1.0)
}

fn needs_calibration(policy: &Policy) -> bool {
    matches!(policy, Policy::MaxDelta(_))
        || matches!(policy, Policy::Threshold(t) if t.scale == GapScale::Calibrated)
}

/// Plays one game from the start position.
pub fn play_game(
    cfg: &MatchConfig,
    policy: &Policy,
    bank: Option<&CalibrationBank>,
    sessions: &mut Sessions,
    game_id: &str,
) -> Result<GameRecord> {
    play_from(cfg, policy, bank, sessions, game_id, &Prefix::default())
}

/// Replays `prefix` and continues under `policy`. Before each White move the
/// weak and strong engines are each sampled `samples_per_decision` times;
/// on intervention the strong sample with the best score is played, otherwise
/// the first weak sample. Black always plays its own engine move.
pub fn play_from(
    cfg: &MatchConfig,
    policy: &Policy,
    bank: Option<&CalibrationBank>,
    sessions: &mut Sessions,
    game_id: &str,
    prefix: &Prefix,
) -> Result<GameRecord> {
    cfg.validate()?;
    if policy.budget() > cfg.budget {
        return Err(Error::config("policy budget exceeds the match budget"));
    }
    if bank.is_none() && needs_calibration(policy) {
        return Err(Error::config(format!(
            "policy `{}` needs a calibration bank",
            policy.tag()
        )));
    }
    sessions.new_game()?;
    let mut board = GameBoard::from_moves(&prefix.moves)?;
    let mut points = prefix.points.clone();
    let mut interventions = prefix.interventions.clone();
    let mut past = PrefixStats::default();
    for p in &points {
        if let Some(g) = p.gap {
            past.push(g);
        } else if let (Some(w), Some(s)) = (p.pw_raw, p.ps_raw) {
            past.push((s - w).max(0.0));
        }
    }

    let (termination, result) = loop {
        if let Some(outcome) = board.outcome() {
            break match outcome {
                BoardOutcome::Checkmate { .. } => (Termination::Checkmate, outcome.white_score()),
                _ => (Termination::DrawRule, 0.5),
            };
        }
        if !board.white_to_move() {
            let reply = sessions.black.evaluate(board.moves())?;
            board.play(&reply.move_uci)?;
            continue;
        }
        let t = board.white_moves_played() + 1;
        if t > cfg.horizon {
            break (Termination::Horizon, horizon_result(&points));
        }
        let a = assess(
            &mut sessions.white,
            &mut sessions.strong,
            board.moves(),
            cfg.samples_per_decision,
        )?;
        let mut point = MovePoint::with_raw(t, a.weak_mean(), a.strong_mean());
        let (pw, ps) = match bank {
            Some(b) => {
                let (w, s) = (b.calibrate(t, a.weak_mean()), b.calibrate(t, a.strong_mean()));
                point.set_calibrated(w, s);
                (w, s)
            }
            None => (a.weak_mean(), a.strong_mean()),
        };
        let (dw, ds) = match policy.gap_scale() {
            GapScale::Calibrated => (pw, ps),
            GapScale::Raw => (a.weak_mean(), a.strong_mean()),
        };
        let ctx = DecisionContext::new(t, dw, ds)
            .with_assists(
                interventions.len() as u32,
                interventions.last().map(|e| e.move_number),
            )
            .with_prefix(past);
        let weak_move = a.weak[0].move_uci.clone();
        let strong_move = a.best_strong().move_uci.clone();
        let fire = interventions.len() < cfg.budget as usize && policy.decide(&ctx).fires();
        if fire {
            interventions.push(InterventionEvent {
                ordinal: interventions.len() as u32 + 1,
                move_number: t,
                gap_at_decision: ctx.gap,
                policy_tag: policy.tag().into(),
                fired: true,
            });
        }
        board.play(if fire { &strong_move } else { &weak_move })?;
        point.weak_move = Some(weak_move);
        point.strong_move = Some(strong_move);
        past.push((ps - pw).max(0.0));
        points.push(point);
    };

    Ok(GameRecord {
        game_id: game_id.to_string(),
        white_elo: Some(cfg.weak_elo),
        black_elo: Some(cfg.weak_elo),
        oracle_elo: Some(cfg.strong_elo),
        budget: cfg.budget,
        moves: board.moves().to_vec(),
        points,
        interventions,
        result,
        termination,
    })
}

/// Per-game RNG derived from `(seed, game index)`.
pub fn game_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn game_id(prefix: &str, seed: u64, index: usize) -> String {
    format!("{prefix}-{seed}-{index:06}")
}

/// One line of the status stream, emitted per finished game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameStatus {
    pub index: usize,
    pub game_id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<f64>,
    pub interventions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub completed: usize,
    pub aborted: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTally {
    pub completed: usize,
    pub aborted: usize,
    /// Abort counts keyed by error message.
    pub abort_reasons: BTreeMap<String, usize>,
    /// Set when a stop request cut the run short.
    #[serde(default)]
    pub stopped: bool,
}

static STOP: AtomicBool = AtomicBool::new(false);

/// Asks running matches to finish their in-flight games and start no more.
pub fn request_stop() {
    STOP.store(true, Ordering::SeqCst);
}

pub fn stop_requested() -> bool {
    STOP.load(Ordering::SeqCst)
}

pub type StatusSink<'a> = &'a (dyn Fn(&GameStatus) + Sync);

/// Plays `cfg.games` games on `cfg.workers` threads. `job(index, rng,
/// sessions)` plays one game; engine failures abort that game only, and the
/// worker reopens its sessions. Records come back in index order.
pub fn run_games<F>(
    cfg: &MatchConfig,
    source: &dyn SessionSource,
    status: StatusSink<'_>,
    job: F,
) -> Result<(Vec<GameRecord>, RunTally)>
where
    F: Fn(usize, &mut ChaCha8Rng, &mut Sessions) -> Result<GameRecord> + Sync,
{
    cfg.validate()?;
    let next = AtomicUsize::new(0);
    let tally = Mutex::new(RunTally::default());
    let (tx, rx) = mpsc::channel::<(usize, GameRecord)>();
    let fatal: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for worker in 0..cfg.workers.min(cfg.games.max(1)) {
            let tx = tx.clone();
            let (next, tally, fatal, job) = (&next, &tally, &fatal, &job);
            scope.spawn(move || {
                let mut sessions: Option<Sessions> = None;
                let mut opened = 0u64;
                loop {
                    let index = next.fetch_add(1, Ordering::SeqCst);
                    if index >= cfg.games || stop_requested() || fatal.lock().unwrap().is_some() {
                        break;
                    }
                    if sessions.as_ref().is_none_or(|s| !s.alive()) {
                        let stream = (worker as u64) << 32 | opened;
                        opened += 1;
                        match Sessions::open(source, cfg, stream) {
                            Ok(s) => sessions = Some(s),
                            Err(e) => {
                                *fatal.lock().unwrap() = Some(e);
                                break;
                            }
                        }
                    }
                    let s = sessions.as_mut().expect("sessions open");
                    let mut rng = game_rng(cfg.seed, index as u64);
                    let outcome = job(index, &mut rng, s);
                    let mut t = tally.lock().unwrap();
                    let line = match outcome {
                        Ok(record) => {
                            t.completed += 1;
                            let line = GameStatus {
                                index,
                                game_id: record.game_id.clone(),
                                ok: true,
                                result: Some(record.result),
                                interventions: record.fired().count(),
                                error: None,
                                completed: t.completed,
                                aborted: t.aborted,
                            };
                            let _ = tx.send((index, record));
                            line
                        }
                        Err(e) if e.is_engine_failure() => {
                            t.aborted += 1;
                            *t.abort_reasons.entry(e.to_string()).or_default() += 1;
                            sessions = None;
                            GameStatus {
                                index,
                                game_id: String::new(),
                                ok: false,
                                result: None,
                                interventions: 0,
                                error: Some(e.to_string()),
                                completed: t.completed,
                                aborted: t.aborted,
                            }
                        }
                        Err(e) => {
                            *fatal.lock().unwrap() = Some(e);
                            break;
                        }
                    };
                    status(&line);
                }
            });
        }
    });
    drop(tx);
    if let Some(e) = fatal.into_inner().unwrap() {
        return Err(e);
    }
    let mut records: Vec<(usize, GameRecord)> = rx.into_iter().collect();
    records.sort_by_key(|(i, _)| *i);
    let mut tally = tally.into_inner().unwrap();
    tally.stopped = tally.completed + tally.aborted < cfg.games;
    Ok((records.into_iter().map(|(_, r)| r).collect(), tally))
}

/// Plays `games` games of `policy` (fresh per game from `make_policy`).
pub fn play_match(
    cfg: &MatchConfig,
    source: &dyn SessionSource,
    bank: Option<&CalibrationBank>,
    make_policy: &(dyn Fn(&mut ChaCha8Rng) -> Result<Policy> + Sync),
    status: StatusSink<'_>,
) -> Result<(Vec<GameRecord>, RunTally)> {
    run_games(cfg, source, status, |i, rng, s| {
        let policy = make_policy(rng)?;
        play_game(cfg, &policy, bank, s, &game_id(policy.tag(), cfg.seed, i))
    })
}

/// No-intervention games with full evaluation logging.
pub fn generate_d0(
    cfg: &MatchConfig,
    source: &dyn SessionSource,
    status: StatusSink<'_>,
) -> Result<(Dataset, RunTally)> {
    let cfg = MatchConfig { budget: 0, ..cfg.clone() };
    let (records, tally) = run_games(&cfg, source, status, |i, _, s| {
        play_game(&cfg, &Policy::Never, None, s, &game_id("d0", cfg.seed, i))
    })?;
    let mut ds = Dataset::new(DatasetKind::D0);
    ds.records = records;
    ds.source_meta = meta(&cfg, &tally);
    Ok((ds, tally))
}

/// Games with one strong move forced at `t* ~ U{1..H}`. A game that ends
/// before `t*` keeps its planned event with `fired = false`.
pub fn generate_di(
    cfg: &MatchConfig,
    source: &dyn SessionSource,
    status: StatusSink<'_>,
) -> Result<(Dataset, RunTally)> {
    let cfg = MatchConfig { budget: 1, ..cfg.clone() };
    let (records, tally) = run_games(&cfg, source, status, |i, rng, s| {
        let t_star = rng.random_range(1..=cfg.horizon);
        let policy = Policy::ForcedAt { move_number: t_star };
        let mut r = play_game(&cfg, &policy, None, s, &game_id("di", cfg.seed, i))?;
        if r.interventions.is_empty() {
            r.interventions.push(InterventionEvent {
                ordinal: 1,
                move_number: t_star,
                gap_at_decision: 0.0,
                policy_tag: RANDOM_SINGLE_TAG.into(),
                fired: false,
            });
        }
        Ok(r)
    })?;
    let mut ds = Dataset::new(DatasetKind::DI);
    ds.records = records;
    ds.source_meta = meta(&cfg, &tally);
    Ok((ds, tally))
}

fn meta(cfg: &MatchConfig, tally: &RunTally) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("match".into(), serde_json::to_value(cfg).unwrap_or_default());
    m.insert("aborted".into(), tally.aborted.into());
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleBound {
    pub base_game_id: String,
    pub base_result: f64,
    /// Result of the replay forcing the strong move at White move `t`, for
    /// `t = 1..` over the base game's White moves.
    pub per_move_scores: Vec<f64>,
    /// Best of the base game and every replay.
    pub best_score: f64,
}

/// For a base game without interventions, replays the game once per White
/// move with the strong move forced there and keeps the best result.
pub fn oracle_upper_bound(
    cfg: &MatchConfig,
    base: &GameRecord,
    bank: Option<&CalibrationBank>,
    sessions: &mut Sessions,
) -> Result<OracleBound> {
    let cfg = MatchConfig { budget: 1, ..cfg.clone() };
    let mut per_move_scores = Vec::with_capacity(base.points.len());
    for p in &base.points {
        let t = p.move_number;
        let policy = Policy::ForcedAt { move_number: t };
        let id = format!("{}-oracle-{t}", base.game_id);
        let r = play_from(&cfg, &policy, bank, sessions, &id, &Prefix::before_move(base, t))?;
        per_move_scores.push(r.result);
    }
    let best_score = per_move_scores.iter().copied().fold(base.result, f64::max);
    Ok(OracleBound {
        base_game_id: base.game_id.clone(),
        base_result: base.result,
        per_move_scores,
        best_score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HindsightOutcome {
    pub game_id: String,
    /// Move of the first trigger, if any fired.
    pub first_trigger: Option<u32>,
    pub committed_result: f64,
    pub deferred_result: f64,
    pub max_result: f64,
}

/// Plays a budget-1 game; at the first trigger a second branch replays the
/// game up to that move, plays the weak move there instead, and continues
/// with the policy so it intervenes at the next trigger (or never).
pub fn hindsight_play(
    cfg: &MatchConfig,
    policy: &Policy,
    bank: Option<&CalibrationBank>,
    sessions: &mut Sessions,
    game_id: &str,
) -> Result<HindsightOutcome> {
    if policy.budget() != 1 {
        return Err(Error::config("hindsight branching needs a budget-1 policy"));
    }
    let cfg = MatchConfig { budget: 1, ..cfg.clone() };
    let committed = play_game(&cfg, policy, bank, sessions, game_id)?;
    let Some(first) = committed.fired().next().map(|e| e.move_number) else {
        return Ok(HindsightOutcome {
            game_id: game_id.to_string(),
            first_trigger: None,
            committed_result: committed.result,
            deferred_result: committed.result,
            max_result: committed.result,
        });
    };
    let mut prefix = Prefix::before_move(&committed, first);
    let point = committed
        .point(first)
        .cloned()
        .ok_or_else(|| Error::data("committed branch lost its trigger point"))?;
    let weak_move = point
        .weak_move
        .clone()
        .ok_or_else(|| Error::data("trigger point has no weak move"))?;
    prefix.moves.push(weak_move);
    prefix.points.push(point);
    let deferred = play_from(&cfg, policy, bank, sessions, &format!("{game_id}-deferred"), &prefix)?;
    Ok(HindsightOutcome {
        game_id: game_id.to_string(),
        first_trigger: Some(first),
        committed_result: committed.result,
        deferred_result: deferred.result,
        max_result: committed.result.max(deferred.result),
    })
}
