//! In-process UCI engines for tests and dry runs.
//!
//! [`ScriptedTransport`] answers each command through a user closure and keeps
//! a transcript of everything sent. [`FakeEngine`] is a responder that plays
//! legal chess with a material-only evaluation whose noise shrinks as the
//! configured ELO rises, which is enough to exercise the orchestration loop.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shakmaty::{Color, Position, Role};

use super::{EngineConfig, EngineSession, Recv, UciTransport};
use crate::board::{BoardOutcome, GameBoard};
use crate::error::Result;

pub type Responder = Box<dyn FnMut(&str) -> Vec<String> + Send>;

/// Shared, append-only log of the commands a scripted engine received.
#[derive(Debug, Clone, Default)]
pub struct Transcript(Arc<Mutex<Vec<String>>>);

impl Transcript {
    pub fn commands(&self) -> Vec<String> {
        self.0.lock().expect("transcript lock").clone()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.commands()
            .iter()
            .filter(|c| c.starts_with(prefix))
            .count()
    }
}

pub struct ScriptedTransport {
    responder: Responder,
    pending: VecDeque<String>,
    transcript: Transcript,
    closed: bool,
}

impl ScriptedTransport {
    pub fn new(responder: Responder) -> (Self, Transcript) {
        let transcript = Transcript::default();
        (
            ScriptedTransport {
                responder,
                pending: VecDeque::new(),
                transcript: transcript.clone(),
                closed: false,
            },
            transcript,
        )
    }

    /// Replays a fixed transcript: each command maps to the listed output lines.
    pub fn from_script(script: Vec<(&'static str, Vec<&'static str>)>) -> (Self, Transcript) {
        let mut script: VecDeque<_> = script.into();
        Self::new(Box::new(move |cmd| {
            match script.front() {
                Some((expect, _)) if cmd.starts_with(expect) => script
                    .pop_front()
                    .map(|(_, out)| out.into_iter().map(String::from).collect())
                    .unwrap_or_default(),
                _ => Vec::new(),
            }
        }))
    }
}

impl UciTransport for ScriptedTransport {
    fn send(&mut self, line: &str) -> std::io::Result<()> {
        if self.closed {
            return Err(std::io::Error::new(
                std::io::ErrorKind::BrokenPipe,
                "scripted engine closed",
            ));
        }
        self.transcript
            .0
            .lock()
            .expect("transcript lock")
            .push(line.to_string());
        let out = (self.responder)(line);
        // A responder may signal a crash by answering with the sentinel "<eof>".
        for l in out {
            if l == "<eof>" {
                self.closed = true;
                break;
            }
            self.pending.push_back(l);
        }
        Ok(())
    }

    fn recv(&mut self, _timeout: Duration) -> Recv {
        match self.pending.pop_front() {
            Some(line) => Recv::Line(line),
            None if self.closed => Recv::Closed,
            None => Recv::TimedOut,
        }
    }

    fn terminate(&mut self, _grace: Duration) {
        if !self.closed {
            let _ = self.send("quit");
            self.closed = true;
        }
    }
}

fn piece_value(role: Role) -> f64 {
    match role {
        Role::Pawn => 1.0,
        Role::Knight | Role::Bishop => 3.0,
        Role::Rook => 5.0,
        Role::Queen => 9.0,
        Role::King => 0.0,
    }
}

/// Material balance in pawns from White's side.
fn material_white(board: &GameBoard) -> f64 {
    let pos = board.position().board();
    let mut total = 0.0;
    for (_, piece) in pos.iter() {
        let v = piece_value(piece.role);
        total += if piece.color == Color::White { v } else { -v };
    }
    total
}

/// Logistic map from a material edge (side to move) to a per-mille WDL triple.
fn wdl_from_edge(edge: f64) -> [i64; 3] {
    let p = 1.0 / (1.0 + (-edge / 2.5).exp());
    let draw = (400.0 * (1.0 - (2.0 * p - 1.0).abs())).round() as i64;
    let win = ((1000 - draw) as f64 * p).round() as i64;
    [win, draw, 1000 - draw - win]
}

/// A toy engine: one-ply material search plus ELO-scaled noise.
pub struct FakeEngine {
    elo: u32,
    limit_strength: bool,
    board: GameBoard,
    rng: ChaCha8Rng,
    show_wdl: bool,
}

impl FakeEngine {
    pub fn new(seed: u64) -> Self {
        FakeEngine {
            elo: 3190,
            limit_strength: false,
            board: GameBoard::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            show_wdl: false,
        }
    }

    fn noise_scale(&self) -> f64 {
        if self.limit_strength {
            0.3 + 4.0 * f64::from(3190u32.saturating_sub(self.elo)) / 1870.0
        } else {
            0.3
        }
    }

    fn handle(&mut self, cmd: &str) -> Vec<String> {
        let mut words = cmd.split_whitespace();
        match words.next() {
            Some("uci") => vec![
                "id name FakeEngine".into(),
                "option name Threads type spin default 1 min 1 max 512".into(),
                "option name UCI_LimitStrength type check default false".into(),
                "option name UCI_Elo type spin default 1320 min 1320 max 3190".into(),
                "option name UCI_ShowWDL type check default false".into(),
                "uciok".into(),
            ],
            Some("isready") => vec!["readyok".into()],
            Some("setoption") => {
                let parts: Vec<&str> = cmd.split_whitespace().collect();
                let name = parts.get(2).copied().unwrap_or("");
                let value = parts.get(4).copied().unwrap_or("");
                match name {
                    "UCI_Elo" => self.elo = value.parse().unwrap_or(self.elo),
                    "UCI_LimitStrength" => self.limit_strength = value == "true",
                    "UCI_ShowWDL" => self.show_wdl = value == "true",
                    "Threads" => {}
                    other => return vec![format!("No such option: {other}")],
                }
                Vec::new()
            }
            Some("position") => {
                let moves: Vec<&str> = cmd.split_whitespace().skip(3).collect();
                self.board = GameBoard::from_moves(&moves).unwrap_or_default();
                Vec::new()
            }
            Some("go") => self.go(),
            Some("quit") => vec!["<eof>".into()],
            _ => Vec::new(),
        }
    }

    fn go(&mut self) -> Vec<String> {
        match self.board.outcome() {
            Some(BoardOutcome::Checkmate { .. }) => {
                return vec!["info depth 0 score mate 0".into(), "bestmove (none)".into()]
            }
            Some(BoardOutcome::Stalemate) => {
                return vec!["info depth 0 score cp 0".into(), "bestmove (none)".into()]
            }
            _ => {}
        }
        let stm_sign = if self.board.white_to_move() { 1.0 } else { -1.0 };
        let scale = self.noise_scale();
        let mut best: Option<(f64, f64, String)> = None;
        for mv in self.board.legal_moves_uci() {
            let mut next = self.board.clone();
            next.play(&mv).expect("legal move");
            let mut value = stm_sign * material_white(&next);
            if let Some(BoardOutcome::Checkmate { .. }) = next.outcome() {
                value += 100.0;
            }
            let noisy = value + scale * (self.rng.random::<f64>() - 0.5) * 2.0;
            if best.as_ref().is_none_or(|(b, _, _)| noisy > *b) {
                best = Some((noisy, value, mv));
            }
        }
        let (_, value, mv) = best.expect("non-terminal position has moves");
        let mut out = Vec::new();
        if self.show_wdl {
            let [w, d, l] = wdl_from_edge(value);
            out.push(format!("info depth 1 score cp {} wdl {w} {d} {l} pv {mv}", (value * 100.0) as i64));
        }
        out.push(format!("bestmove {mv}"));
        out
    }
}

/// Opens a session on a [`FakeEngine`], returning the command transcript too.
pub fn fake_session(config: EngineConfig, seed: u64) -> Result<(EngineSession, Transcript)> {
    let mut engine = FakeEngine::new(seed);
    let (transport, transcript) = ScriptedTransport::new(Box::new(move |cmd| engine.handle(cmd)));
    let session = EngineSession::with_transport(config, Box::new(transport))?;
    Ok((session, transcript))
}
