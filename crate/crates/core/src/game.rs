//! Game records, datasets and their persistence.
//!
//! A dataset file is JSON Lines: a header object (`schema_version`, `kind`,
//! `source_meta`) followed by one [`GameRecord`] per line. Every record line
//! repeats `schema_version` so lines can be read in isolation.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::ops::ControlFlow;
use std::path::Path;

use pgn_reader::{KnownOutcome, Outcome, RawTag, Reader, SanPlus, Skip, Visitor};
use serde::{Deserialize, Serialize};
use shakmaty::san::San;
use shakmaty::uci::UciMove;
use shakmaty::{CastlingMode, Chess, Color, Position};

use crate::artifact::atomic_write;
use crate::board::{BoardOutcome, GameBoard};
use crate::engine::{assess, EngineSession};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Tag used for the single intervention of a randomized-intervention game.
pub const RANDOM_SINGLE_TAG: &str = "random-single";

/// Evaluation of White's `t`-th move decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovePoint {
    #[serde(rename = "t")]
    pub move_number: u32,
    pub pw_raw: Option<f64>,
    pub ps_raw: Option<f64>,
    pub pw: Option<f64>,
    pub ps: Option<f64>,
    pub gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_move: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_move: Option<String>,
}

impl MovePoint {
    pub fn new(move_number: u32) -> Self {
        MovePoint {
            move_number,
            pw_raw: None,
            ps_raw: None,
            pw: None,
            ps: None,
            gap: None,
            weak_move: None,
            strong_move: None,
        }
    }

    pub fn with_raw(move_number: u32, pw_raw: f64, ps_raw: f64) -> Self {
        MovePoint {
            pw_raw: Some(pw_raw),
            ps_raw: Some(ps_raw),
            ..MovePoint::new(move_number)
        }
    }

    /// Stores calibrated values and the derived gap `max(0, ps - pw)`.
    pub fn set_calibrated(&mut self, pw: f64, ps: f64) {
        self.pw = Some(pw);
        self.ps = Some(ps);
        self.gap = Some(gap(pw, ps));
    }

    pub fn is_calibrated(&self) -> bool {
        self.pw.is_some() && self.ps.is_some() && self.gap.is_some()
    }

    /// Calibrated `(pw, ps)`.
    pub fn calibrated(&self) -> Option<(f64, f64)> {
        Some((self.pw?, self.ps?))
    }

    /// Signed calibrated difference `ps - pw`.
    pub fn delta(&self) -> Option<f64> {
        Some(self.ps? - self.pw?)
    }
}

pub fn gap(pw: f64, ps: f64) -> f64 {
    (ps - pw).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionEvent {
    /// 1-based index of the assist within the game.
    #[serde(rename = "k")]
    pub ordinal: u32,
    #[serde(rename = "t")]
    pub move_number: u32,
    #[serde(rename = "d")]
    pub gap_at_decision: f64,
    pub policy_tag: String,
    /// False for a planned intervention the game ended before reaching.
    #[serde(default = "fired_default")]
    pub fired: bool,
}

fn fired_default() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Checkmate,
    DrawRule,
    ResignationProxy,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub game_id: String,
    pub white_elo: Option<u32>,
    pub black_elo: Option<u32>,
    pub oracle_elo: Option<u32>,
    #[serde(default)]
    pub budget: u32,
    /// Every ply in coordinate notation, both colours.
    pub moves: Vec<String>,
    pub points: Vec<MovePoint>,
    pub interventions: Vec<InterventionEvent>,
    pub result: f64,
    pub termination: Termination,
}

impl GameRecord {
    /// Interventions that were actually played.
    pub fn fired(&self) -> impl Iterator<Item = &InterventionEvent> {
        self.interventions.iter().filter(|e| e.fired)
    }

    pub fn point(&self, move_number: u32) -> Option<&MovePoint> {
        self.points
            .binary_search_by_key(&move_number, |p| p.move_number)
            .ok()
            .map(|i| &self.points[i])
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if ![0.0, 0.5, 1.0].contains(&self.result) {
            return Err(format!("result {} is not one of 0, 0.5, 1", self.result));
        }
        match self.termination {
            Termination::Checkmate if self.result == 0.5 => {
                return Err("checkmate cannot end in a draw".into())
            }
            Termination::DrawRule if self.result != 0.5 => {
                return Err("draw-rule termination requires result 0.5".into())
            }
            _ => {}
        }
        let unit = |v: Option<f64>| v.is_none_or(|v| (0.0..=1.0).contains(&v));
        let mut prev_t = 0;
        for p in &self.points {
            if p.move_number <= prev_t {
                return Err(format!("move numbers not strictly increasing at t={}", p.move_number));
            }
            prev_t = p.move_number;
            if ![p.pw_raw, p.ps_raw, p.pw, p.ps, p.gap].into_iter().all(unit) {
                return Err(format!("probability outside [0, 1] at t={}", p.move_number));
            }
            match (p.pw, p.ps, p.gap) {
                (Some(pw), Some(ps), Some(g)) if g != gap(pw, ps) => {
                    return Err(format!("gap inconsistent with pw/ps at t={}", p.move_number))
                }
                (Some(_), Some(_), Some(_)) | (None, None, None) => {}
                _ => return Err(format!("partially calibrated point at t={}", p.move_number)),
            }
        }
        if self.interventions.len() > self.budget as usize {
            return Err(format!(
                "{} interventions exceed budget {}",
                self.interventions.len(),
                self.budget
            ));
        }
        for (i, e) in self.interventions.iter().enumerate() {
            if e.ordinal != i as u32 + 1 {
                return Err(format!("intervention ordinals must run 1..n, found {}", e.ordinal));
            }
            if i > 0 && e.move_number <= self.interventions[i - 1].move_number {
                return Err("interventions not strictly increasing in move number".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// No interventions.
    D0,
    /// One uniformly placed intervention per game.
    DI,
    #[serde(rename = "human-pgn")]
    HumanPgn,
    /// Games played under an assistance policy.
    #[serde(rename = "play")]
    Play,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub records: Vec<GameRecord>,
    #[serde(default)]
    pub source_meta: BTreeMap<String, serde_json::Value>,
}

impl Dataset {
    pub fn new(kind: DatasetKind) -> Self {
        Dataset {
            kind,
            records: Vec::new(),
            source_meta: BTreeMap::new(),
        }
    }

    /// Kind-specific invariants for one record.
    pub fn validate_record(kind: DatasetKind, r: &GameRecord) -> std::result::Result<(), String> {
        r.validate()?;
        match kind {
            DatasetKind::D0 if !r.interventions.is_empty() => {
                Err("no-intervention dataset record has interventions".into())
            }
            DatasetKind::DI if r.interventions.len() != 1 => Err(format!(
                "single-intervention record has {} interventions",
                r.interventions.len()
            )),
            DatasetKind::DI if r.interventions[0].policy_tag != RANDOM_SINGLE_TAG => Err(format!(
                "single-intervention record tagged `{}`",
                r.interventions[0].policy_tag
            )),
            _ => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            Self::validate_record(self.kind, r)
                .map_err(|m| Error::data(format!("record {i} ({}): {m}", r.game_id)))?;
        }
        Ok(())
    }

    pub fn mean_result(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        Some(self.records.iter().map(|r| r.result).sum::<f64>() / self.records.len() as f64)
    }

    pub fn is_calibrated(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.points.iter().all(MovePoint::is_calibrated))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    kind: DatasetKind,
    #[serde(default)]
    source_meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct RecordLineOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a GameRecord,
}

#[derive(Deserialize)]
struct RecordLineIn {
    schema_version: u32,
    #[serde(flatten)]
    record: GameRecord,
}

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        kind: dataset.kind,
        source_meta: dataset.source_meta.clone(),
    };
    let header = serde_json::to_string(&header)?;
    let lines = dataset
        .records
        .iter()
        .map(|record| {
            serde_json::to_string(&RecordLineOut {
                schema_version: SCHEMA_VERSION,
                record,
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    atomic_write(path, |w| {
        writeln!(w, "{header}")?;
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })
}

pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let record_err = |line: usize, message: String| Error::Record {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| record_err(1, "missing header line".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| record_err(1, format!("bad header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(record_err(
            1,
            format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                header.schema_version
            ),
        ));
    }
    let mut dataset = Dataset {
        kind: header.kind,
        records: Vec::new(),
        source_meta: header.source_meta,
    };
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLineIn =
            serde_json::from_str(&line).map_err(|e| record_err(line_no, e.to_string()))?;
        if parsed.schema_version != SCHEMA_VERSION {
            return Err(record_err(
                line_no,
                format!("schema version {}", parsed.schema_version),
            ));
        }
        Dataset::validate_record(dataset.kind, &parsed.record)
            .map_err(|m| record_err(line_no, m))?;
        dataset.records.push(parsed.record);
    }
    Ok(dataset)
}

/// Acceptance rules for PGN import.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgnFilter {
    pub min_elo: Option<u32>,
    pub max_elo: Option<u32>,
    pub result_required: bool,
}

impl Default for PgnFilter {
    fn default() -> Self {
        PgnFilter {
            min_elo: None,
            max_elo: None,
            result_required: true,
        }
    }
}

/// Why games were dropped during PGN import.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PgnStats {
    pub accepted: usize,
    pub unparseable: usize,
    pub missing_result: usize,
    pub illegal_move: usize,
    pub elo_filtered: usize,
    pub non_standard_start: usize,
}

#[derive(Default)]
struct PgnTags {
    result: Option<String>,
    white_elo: Option<u32>,
    black_elo: Option<u32>,
    fen: bool,
}

struct PgnMovetext {
    tags: PgnTags,
    sans: Vec<SanPlus>,
    outcome: Option<Outcome>,
}

struct PgnCollector;

impl Visitor for PgnCollector {
    type Tags = PgnTags;
    type Movetext = PgnMovetext;
    type Output = PgnMovetext;

    fn begin_tags(&mut self) -> ControlFlow<Self::Output, Self::Tags> {
        ControlFlow::Continue(PgnTags::default())
    }

    fn tag(
        &mut self,
        tags: &mut Self::Tags,
        name: &[u8],
        value: RawTag<'_>,
    ) -> ControlFlow<Self::Output> {
        let text = value.decode_utf8_lossy().into_owned();
        match name {
            b"Result" => tags.result = Some(text),
            b"WhiteElo" => tags.white_elo = text.parse().ok(),
            b"BlackElo" => tags.black_elo = text.parse().ok(),
            b"FEN" => tags.fen = true,
            _ => {}
        }
        ControlFlow::Continue(())
    }

    fn begin_movetext(&mut self, tags: Self::Tags) -> ControlFlow<Self::Output, Self::Movetext> {
        ControlFlow::Continue(PgnMovetext {
            tags,
            sans: Vec::new(),
            outcome: None,
        })
    }

    fn san(&mut self, movetext: &mut Self::Movetext, san: SanPlus) -> ControlFlow<Self::Output> {
        movetext.sans.push(san);
        ControlFlow::Continue(())
    }

    fn begin_variation(
        &mut self,
        _movetext: &mut Self::Movetext,
    ) -> ControlFlow<Self::Output, Skip> {
        ControlFlow::Continue(Skip(true))
    }

    fn outcome(
        &mut self,
        movetext: &mut Self::Movetext,
        outcome: Outcome,
    ) -> ControlFlow<Self::Output> {
        movetext.outcome = Some(outcome);
        ControlFlow::Continue(())
    }

    fn end_game(&mut self, movetext: Self::Movetext) -> Self::Output {
        movetext
    }
}

fn result_from_tag(tag: &str) -> Option<f64> {
    match tag.trim() {
        "1-0" => Some(1.0),
        "0-1" => Some(0.0),
        "1/2-1/2" => Some(0.5),
        _ => None,
    }
}

fn result_from_outcome(outcome: Option<Outcome>) -> Option<f64> {
    match outcome? {
        Outcome::Known(KnownOutcome::Decisive { winner }) => {
            Some(if winner == Color::White { 1.0 } else { 0.0 })
        }
        Outcome::Known(KnownOutcome::Draw) => Some(0.5),
        Outcome::Unknown => None,
    }
}

enum Converted {
    Game(Vec<String>, GameBoard),
    Illegal,
}

fn convert_sans(sans: &[SanPlus]) -> Converted {
    let mut pos = Chess::default();
    let mut ucis = Vec::with_capacity(sans.len());
    for sp in sans {
        let san: &San = &sp.san;
        let Ok(m) = san.to_move(&pos) else {
            return Converted::Illegal;
        };
        ucis.push(UciMove::from_move(m, CastlingMode::Standard).to_string());
        pos.play_unchecked(m);
    }
    match GameBoard::from_moves(&ucis) {
        Ok(board) => Converted::Game(ucis, board),
        Err(_) => Converted::Illegal,
    }
}

/// Imports every acceptable game in a (possibly multi-game) PGN file.
///
/// Moves are converted to coordinate notation; one [`MovePoint`] without
/// evaluations is emitted per White move.
pub fn parse_pgn(path: &Path, filter: &PgnFilter) -> Result<(Dataset, PgnStats)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = Reader::new(file);
    let mut collector = PgnCollector;
    let mut stats = PgnStats::default();
    let mut dataset = Dataset::new(DatasetKind::HumanPgn);
    dataset.source_meta.insert(
        "source".into(),
        serde_json::Value::String(path.display().to_string()),
    );
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pgn".into());
    let mut index = 0usize;
    loop {
        let game = match reader.read_game(&mut collector) {
            Ok(Some(g)) => g,
            Ok(None) => break,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                stats.unparseable += 1;
                continue;
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        index += 1;
        if game.tags.fen {
            stats.non_standard_start += 1;
            continue;
        }
        let elo_ok = |elo: Option<u32>| match elo {
            Some(e) => {
                filter.min_elo.is_none_or(|lo| e >= lo) && filter.max_elo.is_none_or(|hi| e <= hi)
            }
            None => filter.min_elo.is_none() && filter.max_elo.is_none(),
        };
        if !(elo_ok(game.tags.white_elo) && elo_ok(game.tags.black_elo)) {
            stats.elo_filtered += 1;
            continue;
        }
        let (moves, board) = match convert_sans(&game.sans) {
            Converted::Game(m, b) => (m, b),
            Converted::Illegal => {
                stats.illegal_move += 1;
                continue;
            }
        };
        let board_outcome = board.outcome();
        let tagged = game
            .tags
            .result
            .as_deref()
            .and_then(result_from_tag)
            .or_else(|| result_from_outcome(game.outcome));
        let result = match (tagged, board_outcome) {
            (Some(r), _) => r,
            (None, Some(o)) if !filter.result_required => o.white_score(),
            _ => {
                stats.missing_result += 1;
                continue;
            }
        };
        let termination = match board_outcome {
            Some(BoardOutcome::Checkmate { .. }) => Termination::Checkmate,
            Some(_) => Termination::DrawRule,
            None if result == 0.5 => Termination::DrawRule,
            None => Termination::ResignationProxy,
        };
        let record = GameRecord {
            game_id: format!("{stem}-{index}"),
            white_elo: game.tags.white_elo,
            black_elo: game.tags.black_elo,
            oracle_elo: None,
            budget: 0,
            points: moves
                .iter()
                .step_by(2)
                .enumerate()
                .map(|(i, mv)| MovePoint {
                    weak_move: Some(mv.clone()),
                    ..MovePoint::new(i as u32 + 1)
                })
                .collect(),
            moves,
            interventions: Vec::new(),
            result,
            termination,
        };
        if record.validate().is_err() {
            stats.unparseable += 1;
            continue;
        }
        stats.accepted += 1;
        dataset.records.push(record);
    }
    Ok((dataset, stats))
}

/// Result of an annotation pass; `cursor` is the index of the first record that
/// still needs annotation (equal to the record count when complete).
#[derive(Debug)]
pub struct Annotated {
    pub dataset: Dataset,
    pub cursor: usize,
    pub error: Option<Error>,
}

/// Fills `pw_raw`/`ps_raw` for every White move from engine samples taken at
/// the position before the move. Existing values are overwritten.
pub fn annotate(
    dataset: Dataset,
    weak: &mut EngineSession,
    strong: &mut EngineSession,
    samples_per_move: usize,
) -> Annotated {
    annotate_from(dataset, 0, weak, strong, samples_per_move)
}

pub fn annotate_from(
    mut dataset: Dataset,
    cursor: usize,
    weak: &mut EngineSession,
    strong: &mut EngineSession,
    samples_per_move: usize,
) -> Annotated {
    for idx in cursor..dataset.records.len() {
        let record = &mut dataset.records[idx];
        let outcome = (|| -> Result<()> {
            weak.new_game()?;
            strong.new_game()?;
            for point in record.points.iter_mut() {
                let ply = 2 * (point.move_number as usize - 1);
                let prefix = &record.moves[..ply.min(record.moves.len())];
                let a = assess(weak, strong, prefix, samples_per_move)?;
                point.pw_raw = Some(a.weak_mean());
                point.ps_raw = Some(a.strong_mean());
                point.pw = None;
                point.ps = None;
                point.gap = None;
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            return Annotated {
                dataset,
                cursor: idx,
                error: Some(e),
            };
        }
    }
    let cursor = dataset.records.len();
    Annotated {
        dataset,
        cursor,
        error: None,
    }
}
