//! Engine-vs-human conversion gap over `(n, alpha)` slices, and run reports
//! (CSV tables with SVG companions).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::{atomic_write_str, read_json_doc, Provenance};
use crate::calibration::CalibrationBank;
use crate::error::{Error, Result};
use crate::game::{read_jsonl, Dataset, GameRecord};
use crate::simfree::SimReport;

pub const DEFAULT_MIN_CELL: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapGrid {
    pub n_values: Vec<u32>,
    pub alpha_values: Vec<f64>,
    pub min_cell: usize,
    /// `[n][alpha]` conditional mean score; `None` when the cell is undefined.
    pub c_engine: Vec<Vec<Option<f64>>>,
    pub c_human: Vec<Vec<Option<f64>>>,
    pub delta: Vec<Vec<Option<f64>>>,
    pub engine_counts: Vec<Vec<usize>>,
    pub human_counts: Vec<Vec<usize>>,
    /// Mean of `delta` over defined cells.
    pub mean_delta: f64,
}

/// Optional rating window applied to both players of a human game.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EloFilter {
    pub min: Option<u32>,
    pub max: Option<u32>,
}

impl EloFilter {
    fn admits(&self, r: &GameRecord) -> bool {
        let ok = |elo: Option<u32>| match elo {
            Some(e) => self.min.is_none_or(|m| e >= m) && self.max.is_none_or(|m| e <= m),
            None => self.min.is_none() && self.max.is_none(),
        };
        ok(r.white_elo) && ok(r.black_elo)
    }
}

/// Sums and counts of final scores over games whose calibrated `p_w` at
/// White move `n` is at least `alpha`.
fn slice_means(ds: &Dataset, n_values: &[u32], alphas: &[f64], filter: &EloFilter) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    let mut sums = vec![vec![0.0; alphas.len()]; n_values.len()];
    let mut counts = vec![vec![0usize; alphas.len()]; n_values.len()];
    for r in ds.records.iter().filter(|r| filter.admits(r)) {
        for (i, &n) in n_values.iter().enumerate() {
            let Some(p) = r.point(n) else { continue };
            let pw = p.pw.ok_or_else(|| {
                Error::data(format!("game {} is not calibrated at move {n}", r.game_id))
            })?;
            for (j, &a) in alphas.iter().enumerate() {
                if pw >= a {
                    sums[i][j] += r.result;
                    counts[i][j] += 1;
                }
            }
        }
    }
    Ok((sums, counts))
}

pub fn gap_grid(
    engine: &Dataset,
    human: &Dataset,
    n_values: &[u32],
    alpha_values: &[f64],
    min_cell: usize,
    human_elo: EloFilter,
) -> Result<GapGrid> {
    if engine.records.is_empty() || human.records.is_empty() {
        return Err(Error::data("gap grid needs nonempty engine and human datasets"));
    }
    if n_values.is_empty() || alpha_values.is_empty() {
        return Err(Error::config("gap grid needs at least one n and one alpha"));
    }
    if let Some(a) = alpha_values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::config(format!("alpha {a} outside [0, 1]")));
    }
    let (es, ec) = slice_means(engine, n_values, alpha_values, &EloFilter::default())?;
    let (hs, hc) = slice_means(human, n_values, alpha_values, &human_elo)?;
    let mean = |s: &Vec<Vec<f64>>, c: &Vec<Vec<usize>>| -> Vec<Vec<Option<f64>>> {
        s.iter()
            .zip(c)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(s, &c)| (c >= min_cell.max(1)).then(|| s / c as f64))
                    .collect()
            })
            .collect()
    };
    let c_engine = mean(&es, &ec);
    let c_human = mean(&hs, &hc);
    let delta: Vec<Vec<Option<f64>>> = c_engine
        .iter()
        .zip(&c_human)
        .map(|(e, h)| {
            e.iter()
                .zip(h)
                .map(|(e, h)| Some((*e)? - (*h)?))
                .collect()
        })
        .collect();
    let defined: Vec<f64> = delta.iter().flatten().filter_map(|d| *d).collect();
    if defined.is_empty() {
        return Err(Error::data(format!(
            "no gap-grid cell has at least {min_cell} games in both datasets"
        )));
    }
    Ok(GapGrid {
        n_values: n_values.to_vec(),
        alpha_values: alpha_values.to_vec(),
        min_cell,
        mean_delta: defined.iter().sum::<f64>() / defined.len() as f64,
        c_engine,
        c_human,
        delta,
        engine_counts: ec,
        human_counts: hc,
    })
}

/// Artifact names inside a run directory.
pub mod names {
    pub const D0: &str = "d0.jsonl";
    pub const DI: &str = "di.jsonl";
    pub const CALIBRATION: &str = "calibration.jsonl";
    pub const PREDICTORS: &str = "predictors.json";
    pub const BANKS: &str = "banks.json";
    pub const UPLIFT: &str = "uplift.json";
    pub const SIMULATION: &str = "simulate.json";
    pub const TRIALS: &str = "trials.jsonl";
    pub const BEST: &str = "best.json";
    pub const GAP_GRID: &str = "gap_grid.json";
    /// Prefix of datasets written by `play`.
    pub const PLAY_PREFIX: &str = "play-";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub source: String,
    pub policy: String,
    pub budget: u32,
    pub games: usize,
    pub mean_score: f64,
    pub std_error: f64,
    pub mean_fired: f64,
}

/// Mean result per `play` dataset, sorted by policy then budget.
pub fn score_table(datasets: &[(String, Dataset)]) -> Vec<ScoreRow> {
    let mut rows: Vec<ScoreRow> = datasets
        .iter()
        .filter(|(_, d)| !d.records.is_empty())
        .map(|(name, d)| {
            let n = d.records.len() as f64;
            let mean = d.records.iter().map(|r| r.result).sum::<f64>() / n;
            let var = if d.records.len() > 1 {
                d.records.iter().map(|r| (r.result - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let policy = d
                .source_meta
                .get("policy")
                .and_then(|v| v.as_str())
                .unwrap_or("unknown")
                .to_string();
            ScoreRow {
                source: name.clone(),
                policy,
                budget: d.records[0].budget,
                games: d.records.len(),
                mean_score: mean,
                std_error: (var / n).sqrt(),
                mean_fired: d.records.iter().map(|r| r.fired().count() as f64).sum::<f64>() / n,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.policy.cmp(&b.policy).then(a.budget.cmp(&b.budget)));
    rows
}

fn csv_text(header: &[&str], rows: &[Vec<String>], prov: &Provenance) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head: Vec<&str> = header.to_vec();
    head.extend(["config_hash", "seed"]);
    w.write_record(&head).map_err(csv_err)?;
    for r in rows {
        let mut r = r.clone();
        r.push(prov.config_hash.clone());
        r.push(prov.seed.to_string());
        w.write_record(&r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(format!("csv: {e}"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart on fixed `[x0, x1] x [y0, y1]` axes.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    let _ = writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for i in 0..=5 {
        let f = f64::from(i) / 5.0;
        let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            sx(x),
            H - PAD + 16.0,
            trim(x)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            PAD - 6.0,
            sy(y) + 4.0,
            trim(y)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y.clamp(y0, y1))))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = PAD + 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{}\" y=\"{}\">{}</text>",
            PAD + 10.0,
            PAD + 30.0,
            PAD + 36.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Diverging heatmap of `values[row][col]`; `None` cells are hatched grey.
pub fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<Option<f64>>]) -> String {
    let mut s = svg_open(title);
    let (nr, nc) = (rows.len().max(1) as f64, cols.len().max(1) as f64);
    let (cw, ch) = ((W - 2.0 * PAD) / nc, (H - 2.0 * PAD) / nr);
    let scale = values
        .iter()
        .flatten()
        .filter_map(|v| *v)
        .fold(1e-9f64, |m, v| m.max(v.abs()));
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let fill = match v {
                Some(v) => {
                    let t = (v / scale).clamp(-1.0, 1.0);
                    let (r, g, b) = if t >= 0.0 {
                        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
                    } else {
                        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
                    };
                    format!("rgb({},{},{})", r as u8, g as u8, b as u8)
                }
                None => "#cccccc".into(),
            };
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cw:.1}\" height=\"{ch:.1}\" fill=\"{fill}\" stroke=\"white\"/>",
                PAD + j as f64 * cw,
                PAD + i as f64 * ch
            );
            if let Some(v) = v {
                let _ = writeln!(
                    s,
                    "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{v:.3}</text>",
                    PAD + (j as f64 + 0.5) * cw,
                    PAD + (i as f64 + 0.5) * ch + 3.0
                );
            }
        }
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            PAD - 6.0,
            PAD + (i as f64 + 0.5) * ch + 4.0,
            escape(r)
        );
    }
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            PAD + (j as f64 + 0.5) * cw,
            H - PAD + 16.0,
            escape(c)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn trim(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Move numbers whose calibration buckets are drawn in the calibration plot.
pub const PLOTTED_MOVES: [u32; 2] = [5, 30];

/// Reads whatever known artifacts `run_dir` holds and writes tables and
/// plots into `out_dir`. Fails, naming the expected files, when none exist.
pub fn report(run_dir: &Path, out_dir: &Path, prov: &Provenance) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<()> {
        let path = out_dir.join(name);
        atomic_write_str(&path, &text)?;
        written.push(path);
        Ok(())
    };

    let mut plays = Vec::new();
    if run_dir.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(run_dir)
            .map_err(|e| Error::io(run_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(names::PLAY_PREFIX) && n.ends_with(".jsonl"))
            })
            .collect();
        entries.sort();
        for p in entries {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            plays.push((name, read_jsonl(&p)?));
        }
    }
    if !plays.is_empty() {
        let rows: Vec<Vec<String>> = score_table(&plays)
            .into_iter()
            .map(|r| {
                vec![
                    r.source,
                    r.policy,
                    r.budget.to_string(),
                    r.games.to_string(),
                    format!("{:.6}", r.mean_score),
                    format!("{:.6}", r.std_error),
                    format!("{:.4}", r.mean_fired),
                ]
            })
            .collect();
        emit(
            "scores.csv",
            csv_text(
                &["source", "policy", "budget", "games", "mean_score", "std_error", "mean_fired"],
                &rows,
                prov,
            )?,
        )?;
    }

    let cal_path = run_dir.join(names::CALIBRATION);
    if cal_path.exists() {
        let bank = CalibrationBank::load(&cal_path)?;
        let grid: Vec<f64> = (0..=100).map(|i| f64::from(i) / 100.0).collect();
        let mut rows = Vec::new();
        for (b, curve) in bank.curves.iter().enumerate() {
            for &x in &grid {
                rows.push(vec![b.to_string(), format!("{x:.2}"), format!("{:.6}", curve.eval(x))]);
            }
        }
        emit("calibration.csv", csv_text(&["bucket", "raw_score", "calibrated"], &rows, prov)?)?;
        let series: Vec<(String, Vec<(f64, f64)>)> = PLOTTED_MOVES
            .iter()
            .map(|&t| {
                let b = bank.bucket_of(t);
                let first = b as u32 * bank.bucket_width + 1;
                let name = format!("moves {}-{}", first, first + bank.bucket_width - 1);
                (name, grid.iter().map(|&x| (x, bank.calibrate(t, x))).collect())
            })
            .collect();
        emit(
            "calibration.svg",
            line_plot(
                "Calibrated win probability vs engine score",
                "engine WDL score",
                "calibrated probability",
                (0.0, 1.0),
                (0.0, 1.0),
                &series,
            ),
        )?;
    }

    let sim_path = run_dir.join(names::SIMULATION);
    if sim_path.exists() {
        let r: SimReport = read_json_doc(&sim_path, "report")?;
        let rows: Vec<Vec<String>> = r
            .frac_fired
            .iter()
            .zip(&r.avg_move)
            .enumerate()
            .map(|(k, (f, m))| {
                vec![
                    (k + 1).to_string(),
                    format!("{f:.6}"),
                    opt(*m),
                    format!("{:.6}", r.avg_score),
                    r.runs.to_string(),
                ]
            })
            .collect();
        emit(
            "simulation.csv",
            csv_text(&["k", "frac_fired", "avg_move", "avg_score", "runs"], &rows, prov)?,
        )?;
    }

    let grid_path = run_dir.join(names::GAP_GRID);
    if grid_path.exists() {
        let g: GapGrid = read_json_doc(&grid_path, "gap_grid")?;
        let mut rows = Vec::new();
        for (i, n) in g.n_values.iter().enumerate() {
            for (j, a) in g.alpha_values.iter().enumerate() {
                rows.push(vec![
                    n.to_string(),
                    format!("{a}"),
                    opt(g.c_engine[i][j]),
                    opt(g.c_human[i][j]),
                    opt(g.delta[i][j]),
                    g.engine_counts[i][j].to_string(),
                    g.human_counts[i][j].to_string(),
                ]);
            }
        }
        emit(
            "gap_grid.csv",
            csv_text(
                &["n", "alpha", "c_engine", "c_human", "delta", "engine_count", "human_count"],
                &rows,
                prov,
            )?,
        )?;
        let rl: Vec<String> = g.n_values.iter().map(|n| format!("n={n}")).collect();
        let cl: Vec<String> = g.alpha_values.iter().map(|a| format!("{a}")).collect();
        emit(
            "gap_grid.svg",
            heatmap(
                &format!("Engine minus human conversion (mean {:.3})", g.mean_delta),
                &rl,
                &cl,
                &g.delta,
            ),
        )?;
    }

    if written.is_empty() {
        return Err(Error::data(format!(
            "{} holds no reportable artifacts; expected any of {}*.jsonl, {}, {}, {}",
            run_dir.display(),
            names::PLAY_PREFIX,
            names::CALIBRATION,
            names::SIMULATION,
            names::GAP_GRID
        )));
    }
    Ok(written)
}
