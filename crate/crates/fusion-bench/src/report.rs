//! Report emission: CSV (the machine contract), rendered text tables,
//! the per-emotion breakdown, and the comparison against reported
//! reference systems.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueBatch, EmotionLabel, N_CLASSES};
use crate::error::{Error, Result};
use crate::grid::{write_epoch_log, GridOutcome, GridReport};
use crate::metrics::{significance_test, ConfusionAccumulator, EvalReport};
use crate::model::{predictions, FusionLayer, FusionMethod, LossMode, Model};

/// Reference WA(%) constants bundled with the tool.
pub const BUILTIN_REFERENCES: &str = include_str!("../data/reference_methods.csv");

// ---------------------------------------------------------------------------
// grid report rendering

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(v) => format!("{v:.prec$}"),
        None => String::new(),
    }
}

/// CSV body for a grid report: header plus one row per cell, WA in
/// percent with four decimals. Contains no timestamp, so reruns of the
/// same configuration are byte-identical.
pub fn render_grid_csv(report: &GridReport) -> String {
    let mut out = String::from("fusion_layer,fusion_method,loss_mode,mean_wa,std_wa,n_runs,failed_runs\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.fusion_layer.name(),
            r.fusion_method.name(),
            r.loss_mode.name(),
            fmt_opt(r.mean_wa, 4),
            fmt_opt(r.std_wa, 4),
            r.n_runs,
            r.failed_runs
        );
    }
    out
}

fn cell_text(report: &GridReport, layer: FusionLayer, method: FusionMethod, loss: LossMode) -> String {
    match report
        .rows
        .iter()
        .find(|r| r.fusion_layer == layer && r.fusion_method == method && r.loss_mode == loss)
    {
        None => "-".to_string(),
        Some(r) => match (r.mean_wa, r.std_wa) {
            (Some(mean), Some(std)) => {
                if r.failed_runs > 0 {
                    format!("{mean:.2}±{std:.2} ({} failed)", r.failed_runs)
                } else {
                    format!("{mean:.2}±{std:.2}")
                }
            }
            _ => format!("failed ({}/{})", r.failed_runs, r.n_runs + r.failed_runs),
        },
    }
}

fn ordered_unique<T: Copy + PartialEq>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

/// Plain-text table grouped per loss mode: methods as rows, layers as
/// columns, mean±std WA(%) in each cell. The timestamp appears on its
/// own metadata line; everything else is deterministic.
pub fn render_grid_text(report: &GridReport) -> String {
    let layers = ordered_unique(report.rows.iter().map(|r| r.fusion_layer));
    let methods = ordered_unique(report.rows.iter().map(|r| r.fusion_method));
    let losses = ordered_unique(report.rows.iter().map(|r| r.loss_mode));

    let mut out = String::from("WA(%), mean±std over repeated runs\n");
    for &loss in &losses {
        let _ = write!(out, "\n[{} loss]\n{:<12}", loss.name(), "method");
        for &layer in &layers {
            let _ = write!(out, "{:<22}", layer.name().to_uppercase());
        }
        out.push('\n');
        for &method in &methods {
            let _ = write!(out, "{:<12}", method.name());
            for &layer in &layers {
                let _ = write!(out, "{:<22}", cell_text(report, layer, method, loss));
            }
            out.push('\n');
        }
    }
    let m = &report.metadata;
    let _ = write!(
        out,
        "\ncorpus_id={}\nconfig_hash={}\ntool_version={}\ntimestamp={}\n",
        m.corpus_id, m.config_hash, m.tool_version, m.timestamp
    );
    out
}

// ---------------------------------------------------------------------------
// per-emotion breakdown

/// Per-class accuracies of one prediction branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub branch: String,
    pub eval: EvalReport,
}

/// Evaluate every logits branch the model exposes, in A, T, A+T order.
/// Unimodal models produce their single branch; fused models always
/// produce A+T; perspective or LGF models produce all three.
pub fn emotion_breakdown(model: &Model, batches: &[DialogueBatch]) -> Result<Vec<BreakdownRow>> {
    let mut audio_acc = ConfusionAccumulator::new();
    let mut text_acc = ConfusionAccumulator::new();
    let mut fused_acc = ConfusionAccumulator::new();
    let (mut saw_audio, mut saw_text, mut saw_fused) = (false, false, false);
    for batch in batches {
        let out = model.forward(batch, false, None)?;
        if let Some(logits) = &out.audio_logits {
            audio_acc.add(&predictions(logits), &batch.labels, &batch.mask)?;
            saw_audio = true;
        }
        if let Some(logits) = &out.text_logits {
            text_acc.add(&predictions(logits), &batch.labels, &batch.mask)?;
            saw_text = true;
        }
        if let Some(logits) = &out.fused_logits {
            fused_acc.add(&predictions(logits), &batch.labels, &batch.mask)?;
            saw_fused = true;
        }
    }
    let mut rows = Vec::new();
    if saw_audio {
        rows.push(BreakdownRow {
            branch: "A".into(),
            eval: audio_acc.finish()?,
        });
    }
    if saw_text {
        rows.push(BreakdownRow {
            branch: "T".into(),
            eval: text_acc.finish()?,
        });
    }
    if saw_fused {
        rows.push(BreakdownRow {
            branch: "A+T".into(),
            eval: fused_acc.finish()?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config("model exposes no prediction branch".into()));
    }
    Ok(rows)
}

/// Text table of per-class accuracy (%) per branch.
pub fn render_breakdown_text(rows: &[BreakdownRow]) -> String {
    let mut out = format!("{:<8}", "branch");
    for label in EmotionLabel::ALL {
        let _ = write!(out, "{:<10}", label.name());
    }
    let _ = writeln!(out, "{:<10}{:<8}", "overall", "n");
    for row in rows {
        let _ = write!(out, "{:<8}", row.branch);
        for c in 0..N_CLASSES {
            let cell = match row.eval.per_class[c] {
                Some(acc) => format!("{:.2}", acc * 100.0),
                None => "-".to_string(),
            };
            let _ = write!(out, "{cell:<10}");
        }
        let _ = writeln!(out, "{:<10.2}{:<8}", row.eval.wa * 100.0, row.eval.n_test);
    }
    out
}

// ---------------------------------------------------------------------------
// comparison with reported reference systems

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub name: String,
    pub wa: f64,
}

/// Parse a reference table: `name,wa` rows, `#` comments, one header.
pub fn parse_references(text: &str) -> Result<Vec<ReferenceEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "name,wa" {
            continue;
        }
        let (name, wa) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("reference line {}: expected name,wa", lineno + 1))
        })?;
        let wa: f64 = wa.trim().parse().map_err(|e| {
            Error::Format(format!("reference line {}: bad WA: {e}", lineno + 1))
        })?;
        out.push(ReferenceEntry {
            name: name.trim().to_string(),
            wa,
        });
    }
    Ok(out)
}

pub fn builtin_references() -> Vec<ReferenceEntry> {
    parse_references(BUILTIN_REFERENCES).expect("bundled reference table parses")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub wa: f64,
    /// "this work" or "reported".
    pub source: String,
    /// Welch p-value of this cell's runs against the best own cell;
    /// None for reference rows, single-run cells, and the best row
    /// itself.
    pub p_vs_best: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub footnotes: Vec<String>,
}

/// Rank this run's cells against the reported constants. Significance
/// is computed only between own cells (per-seed samples of the others
/// do not exist).
pub fn compare_with_references(
    outcome: &GridOutcome,
    references: &[ReferenceEntry],
) -> Result<ComparisonTable> {
    let own: Vec<(String, f64, Vec<f64>)> = outcome
        .cells
        .iter()
        .filter(|c| c.aggregate.n_runs > 0)
        .map(|c| {
            let samples: Vec<f64> = c.aggregate.runs.iter().map(|r| r.final_wa * 100.0).collect();
            (
                format!("this work: {}", c.key.slug()),
                c.aggregate.mean_wa.expect("successful cell has a mean") * 100.0,
                samples,
            )
        })
        .collect();
    if own.is_empty() {
        return Err(Error::Config(
            "comparison needs at least one successful grid cell".into(),
        ));
    }
    let best = own
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .unwrap();

    let mut rows = Vec::new();
    for (i, (name, wa, samples)) in own.iter().enumerate() {
        let p_vs_best = if i != best && samples.len() >= 2 && own[best].2.len() >= 2 {
            Some(significance_test(&own[best].2, samples)?.p_value)
        } else {
            None
        };
        rows.push(ComparisonRow {
            name: name.clone(),
            wa: *wa,
            source: "this work".into(),
            p_vs_best,
        });
    }
    for r in references {
        rows.push(ComparisonRow {
            name: r.name.clone(),
            wa: r.wa,
            source: "reported".into(),
            p_vs_best: None,
        });
    }
    rows.sort_by(|a, b| b.wa.total_cmp(&a.wa));

    Ok(ComparisonTable {
        rows,
        footnotes: vec![
            "* p < 0.01 against this work's best cell (Welch's t-test over per-seed runs)."
                .to_string(),
            "Reference rows are constants reported by their publications; per-seed samples are \
             unavailable, so no significance is computed against them and their aggregation \
             protocol may differ."
                .to_string(),
        ],
    })
}

pub fn render_comparison_text(table: &ComparisonTable) -> String {
    let mut out = format!("{:<36}{:<10}{:<12}{}\n", "system", "WA(%)", "source", "p vs best");
    for row in &table.rows {
        let p = match row.p_vs_best {
            Some(p) if p < 0.01 => format!("{p:.2e} *"),
            Some(p) => format!("{p:.4}"),
            None => "-".to_string(),
        };
        let _ = writeln!(out, "{:<36}{:<10.2}{:<12}{}", row.name, row.wa, row.source, p);
    }
    out.push('\n');
    for note in &table.footnotes {
        let _ = writeln!(out, "{note}");
    }
    out
}

// ---------------------------------------------------------------------------
// file layout

pub const GRID_CSV_FILE: &str = "grid_report.csv";
pub const GRID_TEXT_FILE: &str = "grid_report.txt";
pub const RUNS_FILE: &str = "runs.json";
pub const LOGS_DIR: &str = "logs";

#[derive(Debug, Clone)]
pub struct GridPaths {
    pub csv: PathBuf,
    pub text: PathBuf,
    pub runs: PathBuf,
    pub logs: PathBuf,
}

/// Persist a grid outcome under `dir`: the CSV and text reports, the
/// full run archive, and one JSONL epoch log per run.
pub fn write_grid_outputs(dir: &Path, outcome: &GridOutcome) -> Result<GridPaths> {
    let paths = GridPaths {
        csv: dir.join(GRID_CSV_FILE),
        text: dir.join(GRID_TEXT_FILE),
        runs: dir.join(RUNS_FILE),
        logs: dir.join(LOGS_DIR),
    };
    fs::create_dir_all(&paths.logs)?;
    fs::write(&paths.csv, render_grid_csv(&outcome.report))?;
    fs::write(&paths.text, render_grid_text(&outcome.report))?;
    fs::write(&paths.runs, serde_json::to_string_pretty(outcome)?)?;
    for cell in &outcome.cells {
        for run in &cell.aggregate.runs {
            let name = format!("{}_seed{}.jsonl", cell.key.slug(), run.seed);
            write_epoch_log(&paths.logs.join(name), run)?;
        }
    }
    Ok(paths)
}

/// Read back a run archive written by `write_grid_outputs`.
pub fn load_grid_outcome(path: &Path) -> Result<GridOutcome> {
    let body = fs::read_to_string(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&body).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
