//! Thin layer over `shakmaty` for replaying coordinate-notation move lists and
//! adjudicating finished games locally.

use std::collections::HashMap;

use shakmaty::uci::UciMove;
use shakmaty::zobrist::Zobrist64;
use shakmaty::{CastlingMode, Chess, Color, EnPassantMode, Position};

use crate::error::{Error, Result};

/// How a finished game ended, as seen from the board alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoardOutcome {
    /// The side to move is mated; `white_won` is true when White delivered mate.
    Checkmate { white_won: bool },
    Stalemate,
    InsufficientMaterial,
    ThreefoldRepetition,
    FiftyMoveRule,
}

impl BoardOutcome {
    /// Final score from White's point of view.
    pub fn white_score(self) -> f64 {
        match self {
            BoardOutcome::Checkmate { white_won: true } => 1.0,
            BoardOutcome::Checkmate { white_won: false } => 0.0,
            _ => 0.5,
        }
    }
}

/// A position reached by playing a move list from the start position, with the
/// repetition history needed for threefold adjudication.
#[derive(Debug, Clone)]
pub struct GameBoard {
    pos: Chess,
    moves: Vec<String>,
    seen: HashMap<u64, u32>,
}

impl Default for GameBoard {
    fn default() -> Self {
        GameBoard::new()
    }
}

impl GameBoard {
    pub fn new() -> Self {
        let mut board = GameBoard {
            pos: Chess::default(),
            moves: Vec::new(),
            seen: HashMap::new(),
        };
        board.record_position();
        board
    }

    /// Replays `moves` from the start position, rejecting the first illegal one.
    pub fn from_moves<S: AsRef<str>>(moves: &[S]) -> Result<Self> {
        let mut board = GameBoard::new();
        for mv in moves {
            board.play(mv.as_ref())?;
        }
        Ok(board)
    }

    fn record_position(&mut self) {
        let key: Zobrist64 = self.pos.zobrist_hash(EnPassantMode::Legal);
        *self.seen.entry(key.0).or_insert(0) += 1;
    }

    pub fn play(&mut self, uci: &str) -> Result<()> {
        let ply = self.moves.len();
        let illegal = || Error::IllegalMove {
            mv: uci.to_string(),
            ply,
        };
        let parsed: UciMove = uci.parse().map_err(|_| illegal())?;
        let m = parsed.to_move(&self.pos).map_err(|_| illegal())?;
        self.pos.play_unchecked(m);
        // Canonicalize (e.g. castling written as king-takes-rook).
        self.moves
            .push(UciMove::from_move(m, CastlingMode::Standard).to_string());
        self.record_position();
        Ok(())
    }

    pub fn moves(&self) -> &[String] {
        &self.moves
    }

    pub fn position(&self) -> &Chess {
        &self.pos
    }

    pub fn white_to_move(&self) -> bool {
        self.pos.turn() == Color::White
    }

    /// Number of White moves already played.
    pub fn white_moves_played(&self) -> u32 {
        self.moves.len().div_ceil(2) as u32
    }

    pub fn legal_moves_uci(&self) -> Vec<String> {
        self.pos
            .legal_moves()
            .iter()
            .map(|m| UciMove::from_move(*m, CastlingMode::Standard).to_string())
            .collect()
    }

    /// Board-level adjudication: mate, stalemate, dead position, threefold
    /// repetition and the fifty-move rule.
    pub fn outcome(&self) -> Option<BoardOutcome> {
        if self.pos.legal_moves().is_empty() {
            return Some(if self.pos.is_check() {
                BoardOutcome::Checkmate {
                    white_won: self.pos.turn() == Color::Black,
                }
            } else {
                BoardOutcome::Stalemate
            });
        }
        if self.pos.is_insufficient_material() {
            return Some(BoardOutcome::InsufficientMaterial);
        }
        let key: Zobrist64 = self.pos.zobrist_hash(EnPassantMode::Legal);
        if self.seen.get(&key.0).copied().unwrap_or(0) >= 3 {
            return Some(BoardOutcome::ThreefoldRepetition);
        }
        if self.pos.halfmoves() >= 100 {
            return Some(BoardOutcome::FiftyMoveRule);
        }
        None
    }
}
