//! UCI engine sessions: spawning, strength limiting, best-move queries and
//! WDL evaluations normalized to White's point of view.
//!
//! A session speaks to its engine through a [`UciTransport`]; the default is a
//! child process, and [`mock`] provides an in-process scripted engine so the
//! protocol handling can be exercised without a real binary.

pub mod mock;
mod transport;

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::board::{BoardOutcome, GameBoard};
use crate::error::{Error, Result};

pub use transport::{ProcessTransport, Recv, UciTransport};

/// Lowest and highest `UCI_Elo` values accepted by current Stockfish releases.
pub const DEFAULT_ELO_RANGE: (u32, u32) = (1320, 3190);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchLimit {
    Depth(u32),
    MoveTimeMs(u64),
}

impl SearchLimit {
    fn go_command(self) -> String {
        match self {
            SearchLimit::Depth(d) => format!("go depth {d}"),
            SearchLimit::MoveTimeMs(ms) => format!("go movetime {ms}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub executable_path: PathBuf,
    /// Extra arguments, e.g. the script path when the engine runs under `node`.
    #[serde(default)]
    pub args: Vec<String>,
    pub elo: u32,
    pub limit_strength: bool,
    #[serde(default = "default_true")]
    pub show_wdl: bool,
    pub search_limit: SearchLimit,
    #[serde(default = "default_threads")]
    pub threads: u32,
    #[serde(default = "default_handshake_ms")]
    pub handshake_timeout_ms: u64,
}

fn default_true() -> bool {
    true
}

fn default_threads() -> u32 {
    1
}

fn default_handshake_ms() -> u64 {
    10_000
}

impl EngineConfig {
    /// An ELO-limited engine searching 100 ms per move.
    pub fn weak(executable_path: impl Into<PathBuf>, elo: u32) -> Self {
        EngineConfig {
            executable_path: executable_path.into(),
            args: Vec::new(),
            elo,
            limit_strength: true,
            show_wdl: true,
            search_limit: SearchLimit::MoveTimeMs(100),
            threads: 1,
            handshake_timeout_ms: default_handshake_ms(),
        }
    }

    /// A full-strength engine searching 200 ms per move.
    pub fn strong(executable_path: impl Into<PathBuf>) -> Self {
        EngineConfig {
            elo: DEFAULT_ELO_RANGE.1,
            limit_strength: false,
            search_limit: SearchLimit::MoveTimeMs(200),
            ..EngineConfig::weak(executable_path, DEFAULT_ELO_RANGE.1)
        }
    }

    pub fn with_args(mut self, args: Vec<String>) -> Self {
        self.args = args;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads must be positive"));
        }
        match self.search_limit {
            SearchLimit::Depth(0) => Err(Error::config("search depth must be positive")),
            SearchLimit::MoveTimeMs(0) => Err(Error::config("move time must be positive")),
            _ => Ok(()),
        }
    }

    fn search_timeout(&self) -> Duration {
        let base = match self.search_limit {
            SearchLimit::MoveTimeMs(ms) => Duration::from_millis(ms),
            SearchLimit::Depth(_) => Duration::from_secs(60),
        };
        base + Duration::from_millis(self.handshake_timeout_ms)
    }
}

/// Engine win/draw/loss estimate in per-mille.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[i64; 3]", into = "[i64; 3]")]
pub struct WdlTriple {
    win: u16,
    draw: u16,
    lose: u16,
}

impl WdlTriple {
    pub fn new(win: i64, draw: i64, lose: i64) -> Result<Self> {
        let in_range = |v: i64| (0..=1000).contains(&v);
        if !(in_range(win) && in_range(draw) && in_range(lose)) || win + draw + lose != 1000 {
            return Err(Error::InvalidWdl { win, draw, lose });
        }
        Ok(WdlTriple {
            win: win as u16,
            draw: draw as u16,
            lose: lose as u16,
        })
    }

    pub const WHITE_WINS: WdlTriple = WdlTriple {
        win: 1000,
        draw: 0,
        lose: 0,
    };
    pub const BLACK_WINS: WdlTriple = WdlTriple {
        win: 0,
        draw: 0,
        lose: 1000,
    };
    pub const DRAWN: WdlTriple = WdlTriple {
        win: 0,
        draw: 1000,
        lose: 0,
    };

    pub fn win(self) -> u16 {
        self.win
    }

    pub fn draw(self) -> u16 {
        self.draw
    }

    pub fn lose(self) -> u16 {
        self.lose
    }

    /// Expected score `(win + draw / 2) / 1000`.
    pub fn score(self) -> f64 {
        (f64::from(self.win) + 0.5 * f64::from(self.draw)) / 1000.0
    }

    /// The same estimate from the other side's point of view.
    pub fn flipped(self) -> Self {
        WdlTriple {
            win: self.lose,
            draw: self.draw,
            lose: self.win,
        }
    }

    fn from_outcome(outcome: BoardOutcome) -> Self {
        match outcome {
            BoardOutcome::Checkmate { white_won: true } => Self::WHITE_WINS,
            BoardOutcome::Checkmate { white_won: false } => Self::BLACK_WINS,
            _ => Self::DRAWN,
        }
    }
}

impl TryFrom<[i64; 3]> for WdlTriple {
    type Error = Error;

    fn try_from(v: [i64; 3]) -> Result<Self> {
        WdlTriple::new(v[0], v[1], v[2])
    }
}

impl From<WdlTriple> for [i64; 3] {
    fn from(w: WdlTriple) -> Self {
        [w.win.into(), w.draw.into(), w.lose.into()]
    }
}

/// One best-move answer with its evaluation, always from White's side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveSample {
    pub move_uci: String,
    pub wdl: WdlTriple,
    pub score_raw: f64,
}

impl MoveSample {
    pub fn new(move_uci: impl Into<String>, wdl: WdlTriple) -> Self {
        MoveSample {
            move_uci: move_uci.into(),
            wdl,
            score_raw: wdl.score(),
        }
    }
}

/// Fields of one `info` line relevant to evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct InfoLine {
    wdl: Option<WdlTriple>,
    mate: Option<i64>,
}

fn parse_info(line: &str) -> Result<InfoLine> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let mut info = InfoLine::default();
    let mut i = 1;
    while i < tokens.len() {
        match tokens[i] {
            "wdl" => {
                let nums: Vec<i64> = tokens
                    .get(i + 1..i + 4)
                    .ok_or_else(|| Error::Protocol(line.to_string()))?
                    .iter()
                    .map(|t| t.parse::<i64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Protocol(line.to_string()))?;
                info.wdl = Some(WdlTriple::new(nums[0], nums[1], nums[2])?);
                i += 4;
            }
            "score" if tokens.get(i + 1) == Some(&"mate") => {
                info.mate = tokens.get(i + 2).and_then(|t| t.parse().ok());
                i += 3;
            }
            // The pv runs to the end of the line.
            "pv" | "string" => break,
            _ => i += 1,
        }
    }
    Ok(info)
}

/// Bounds advertised through `option name UCI_Elo type spin ... min A max B`.
fn parse_elo_bounds(line: &str) -> Option<(u32, u32)> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let value_after = |key: &str| {
        tokens
            .iter()
            .position(|t| *t == key)
            .and_then(|i| tokens.get(i + 1))
            .and_then(|v| v.parse::<u32>().ok())
    };
    Some((value_after("min")?, value_after("max")?))
}

fn option_name(line: &str) -> Option<String> {
    let rest = line.strip_prefix("option name ")?;
    let end = rest.find(" type ").unwrap_or(rest.len());
    Some(rest[..end].trim().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SessionState {
    Ready,
    Dead(String),
}

/// A live conversation with one engine process. Commands are strictly
/// serialized; a session may move between threads but is never shared.
pub struct EngineSession {
    transport: Box<dyn UciTransport>,
    config: EngineConfig,
    state: SessionState,
    elo_bounds: Option<(u32, u32)>,
    go_commands: u64,
}

impl std::fmt::Debug for EngineSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EngineSession")
            .field("config", &self.config)
            .field("state", &self.state)
            .field("elo_bounds", &self.elo_bounds)
            .finish()
    }
}

impl EngineSession {
    /// Spawns the configured executable and completes the UCI handshake.
    pub fn start(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let transport = ProcessTransport::spawn(&config.executable_path, &config.args)?;
        Self::with_transport(config, Box::new(transport))
    }

    /// Runs the handshake over an already-connected transport.
    pub fn with_transport(config: EngineConfig, transport: Box<dyn UciTransport>) -> Result<Self> {
        config.validate()?;
        let mut session = EngineSession {
            transport,
            config,
            state: SessionState::Ready,
            elo_bounds: None,
            go_commands: 0,
        };
        match session.handshake() {
            Ok(()) => Ok(session),
            Err(e) => {
                session.shutdown();
                Err(e)
            }
        }
    }

    fn handshake(&mut self) -> Result<()> {
        let timeout = Duration::from_millis(self.config.handshake_timeout_ms);
        self.send("uci")?;
        let mut options = HashSet::new();
        for line in self.read_until("uciok", timeout)? {
            if let Some(name) = option_name(&line) {
                if name == "UCI_Elo" {
                    self.elo_bounds = parse_elo_bounds(&line);
                }
                options.insert(name);
            }
        }

        let mut settings = vec![("Threads", self.config.threads.to_string())];
        if self.config.limit_strength {
            let (lo, hi) = self.elo_bounds.ok_or_else(|| Error::OptionRejected {
                name: "UCI_Elo".into(),
                message: "engine does not advertise a strength limit".into(),
            })?;
            if !(lo..=hi).contains(&self.config.elo) {
                return Err(Error::OptionRejected {
                    name: "UCI_Elo".into(),
                    message: format!("{} outside engine range [{lo}, {hi}]", self.config.elo),
                });
            }
            settings.push(("UCI_LimitStrength", "true".into()));
            settings.push(("UCI_Elo", self.config.elo.to_string()));
        } else if options.contains("UCI_LimitStrength") {
            settings.push(("UCI_LimitStrength", "false".into()));
        }
        if self.config.show_wdl {
            settings.push(("UCI_ShowWDL", "true".into()));
        }
        for (name, value) in &settings {
            if !options.contains(*name) {
                return Err(Error::OptionRejected {
                    name: name.to_string(),
                    message: "option not advertised by engine".into(),
                });
            }
            self.send(&format!("setoption name {name} value {value}"))?;
        }
        self.send("isready")?;
        for line in self.read_until("readyok", timeout)? {
            let lower = line.to_ascii_lowercase();
            if lower.starts_with("no such option") || lower.starts_with("unknown option") {
                return Err(Error::OptionRejected {
                    name: line.rsplit(':').next().unwrap_or("").trim().to_string(),
                    message: line,
                });
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// `(min, max)` advertised for `UCI_Elo`, when the engine supports it.
    pub fn elo_bounds(&self) -> Option<(u32, u32)> {
        self.elo_bounds
    }

    pub fn is_alive(&self) -> bool {
        self.state == SessionState::Ready
    }

    /// Number of `go` commands issued so far.
    pub fn go_count(&self) -> u64 {
        self.go_commands
    }

    fn ensure_alive(&self) -> Result<()> {
        match &self.state {
            SessionState::Ready => Ok(()),
            SessionState::Dead(reason) => Err(Error::SessionDead(reason.clone())),
        }
    }

    fn kill(&mut self, reason: &str) {
        if self.is_alive() {
            self.transport.terminate(Duration::from_millis(200));
            self.state = SessionState::Dead(reason.to_string());
        }
    }

    fn send(&mut self, line: &str) -> Result<()> {
        self.ensure_alive()?;
        if let Err(e) = self.transport.send(line) {
            self.kill(&format!("write failed: {e}"));
            return Err(Error::SessionDead(format!("write failed: {e}")));
        }
        Ok(())
    }

    /// Collects lines up to (not including) the first line starting with `token`;
    /// returns them together with the terminating line last.
    fn read_until(&mut self, token: &str, timeout: Duration) -> Result<Vec<String>> {
        self.ensure_alive()?;
        let deadline = Instant::now() + timeout;
        let mut lines = Vec::new();
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.transport.recv(remaining) {
                Recv::Line(line) => {
                    let done = line.split_whitespace().next() == Some(token);
                    lines.push(line);
                    if done {
                        return Ok(lines);
                    }
                }
                Recv::TimedOut => {
                    self.kill(&format!("timed out waiting for {token}"));
                    return Err(Error::Timeout {
                        waiting_for: token.to_string(),
                        timeout_ms: timeout.as_millis(),
                    });
                }
                Recv::Closed => {
                    self.kill("engine exited");
                    return Err(Error::SessionDead(format!(
                        "engine exited while waiting for {token}"
                    )));
                }
            }
        }
    }

    /// Resets engine state between games.
    pub fn new_game(&mut self) -> Result<()> {
        self.send("ucinewgame")?;
        self.send("isready")?;
        let timeout = Duration::from_millis(self.config.handshake_timeout_ms);
        self.read_until("readyok", timeout).map(|_| ())
    }

    fn search(&mut self, moves: &[String], board: &GameBoard) -> Result<MoveSample> {
        let position = if moves.is_empty() {
            "position startpos".to_string()
        } else {
            format!("position startpos moves {}", moves.join(" "))
        };
        self.send(&position)?;
        self.send(&self.config.search_limit.go_command())?;
        self.go_commands += 1;
        let lines = self.read_until("bestmove", self.config.search_timeout())?;

        // The deepest (last) reported WDL is authoritative.
        let mut last = InfoLine::default();
        for line in &lines {
            if line.starts_with("info ") {
                let info = parse_info(line)?;
                if info.wdl.is_some() {
                    last.wdl = info.wdl;
                }
                if info.mate.is_some() {
                    last.mate = info.mate;
                }
            }
        }
        let best = lines
            .last()
            .and_then(|l| l.split_whitespace().nth(1))
            .ok_or_else(|| Error::Protocol(lines.last().cloned().unwrap_or_default()))?
            .to_string();

        let wdl_white = match (last.wdl, board.outcome()) {
            (_, Some(outcome @ (BoardOutcome::Checkmate { .. } | BoardOutcome::Stalemate))) => {
                WdlTriple::from_outcome(outcome)
            }
            (Some(wdl), _) if board.white_to_move() => wdl,
            (Some(wdl), _) => wdl.flipped(),
            (None, _) => return Err(Error::MissingWdl),
        };
        Ok(MoveSample::new(best, wdl_white))
    }

    /// Best move and final WDL for the position reached by `moves`.
    pub fn evaluate(&mut self, moves: &[String]) -> Result<MoveSample> {
        self.ensure_alive()?;
        let board = GameBoard::from_moves(moves)?;
        self.search(moves, &board)
    }

    /// `count` independent best-move queries on the same position, in order.
    pub fn sample_moves(&mut self, moves: &[String], count: usize) -> Result<Vec<MoveSample>> {
        if count == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        self.ensure_alive()?;
        let board = GameBoard::from_moves(moves)?;
        (0..count).map(|_| self.search(moves, &board)).collect()
    }

    /// Sends `quit` and reaps the process; a no-op on dead sessions.
    pub fn shutdown(&mut self) {
        if self.is_alive() {
            self.transport.terminate(Duration::from_secs(2));
            self.state = SessionState::Dead("shut down".into());
        }
    }
}

impl Drop for EngineSession {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// A sampled candidate move scored by the evaluator on the position it leads to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMove {
    pub move_uci: String,
    /// White's expected score after the move, from the evaluator session.
    pub score_raw: f64,
}

/// Weak and strong candidate moves at one decision point, with their mean scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub weak: Vec<ScoredMove>,
    pub strong: Vec<ScoredMove>,
}

impl Assessment {
    pub fn weak_mean(&self) -> f64 {
        mean_score(&self.weak)
    }

    pub fn strong_mean(&self) -> f64 {
        mean_score(&self.strong)
    }

    /// The strong candidate with the highest score; ties keep the earliest sample.
    pub fn best_strong(&self) -> &ScoredMove {
        self.strong
            .iter()
            .fold(None::<&ScoredMove>, |best, m| match best {
                Some(b) if b.score_raw >= m.score_raw => Some(b),
                _ => Some(m),
            })
            .expect("at least one strong sample")
    }
}

fn mean_score(moves: &[ScoredMove]) -> f64 {
    moves.iter().map(|m| m.score_raw).sum::<f64>() / moves.len() as f64
}

/// Samples `samples` moves from each of `weak` and `strong` at the position
/// reached by `moves`, then scores every distinct candidate by evaluating the
/// resulting position with `strong`.
///
/// A strength-limited engine reports the WDL of its principal variation rather
/// than of the move it actually plays, so each candidate is re-evaluated.
pub fn assess(
    weak: &mut EngineSession,
    strong: &mut EngineSession,
    moves: &[String],
    samples: usize,
) -> Result<Assessment> {
    let weak_moves = weak.sample_moves(moves, samples)?;
    let strong_moves = strong.sample_moves(moves, samples)?;
    let mut cache: std::collections::HashMap<String, f64> = std::collections::HashMap::new();
    let mut line = moves.to_vec();
    let mut score = |mv: &str, strong: &mut EngineSession| -> Result<f64> {
        if let Some(s) = cache.get(mv) {
            return Ok(*s);
        }
        line.push(mv.to_string());
        let s = strong.evaluate(&line);
        line.pop();
        let s = s?.score_raw;
        cache.insert(mv.to_string(), s);
        Ok(s)
    };
    let mut scored = |samples: Vec<MoveSample>, strong: &mut EngineSession| {
        samples
            .into_iter()
            .map(|m| {
                Ok(ScoredMove {
                    score_raw: score(&m.move_uci, strong)?,
                    move_uci: m.move_uci,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    let weak = scored(weak_moves, strong)?;
    let strong = scored(strong_moves, strong)?;
    Ok(Assessment { weak, strong })
}
