//! Corpus persistence: a JSON-lines manifest plus two binary feature
//! matrices (audio.fbm, text.fbm) living in a features directory.
//!
//! Feature matrix format "FBM1": magic bytes `FBM1`, u32 row count,
//! u32 column count (little-endian), then row-major f32 payload. File
//! length must equal 12 + 4 * rows * cols.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dialogue, EmotionLabel, Utterance, AUDIO_DIM, TEXT_DIM};
use crate::error::{Error, Result};

pub const AUDIO_MATRIX_FILE: &str = "audio.fbm";
pub const TEXT_MATRIX_FILE: &str = "text.fbm";
const MAGIC: &[u8; 4] = b"FBM1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestUtterance {
    utt_id: String,
    label: String,
    row: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDialogue {
    dialogue_id: String,
    session: u8,
    utterances: Vec<ManifestUtterance>,
}

fn ingest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write a row-major f32 matrix in FBM1 format.
pub fn write_feature_matrix(path: &Path, matrix: &Array2<f32>) -> Result<()> {
    let (rows, cols) = matrix.dim();
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&u32::try_from(rows).map_err(|_| Error::Format("row count exceeds u32".into()))?.to_le_bytes())?;
    w.write_all(&u32::try_from(cols).map_err(|_| Error::Format("column count exceeds u32".into()))?.to_le_bytes())?;
    for &v in matrix.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read an FBM1 matrix, validating magic and declared length.
pub fn read_feature_matrix(path: &Path) -> Result<Array2<f32>> {
    let mut file = File::open(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|e| ingest_err(path, format!("header too short: {e}")))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, expected FBM1",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let expected_len = 12 + 4 * rows * cols;
    let meta = file.metadata()?;
    if meta.len() != expected_len as u64 {
        return Err(Error::Format(format!(
            "{}: file length {} does not match declared {rows}x{cols} ({expected_len})",
            path.display(),
            meta.len()
        )));
    }
    let mut payload = vec![0u8; 4 * rows * cols];
    file.read_exact(&mut payload)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Load a corpus from a manifest and its feature directory. Labels are
/// merged (excited into happy) during parsing.
pub fn load_corpus(manifest_path: &Path, features_dir: &Path) -> Result<Vec<Dialogue>> {
    let file = File::open(manifest_path).map_err(|e| ingest_err(manifest_path, e.to_string()))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestDialogue = serde_json::from_str(&line).map_err(|e| {
            ingest_err(manifest_path, format!("line {}: {e}", lineno + 1))
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(ingest_err(manifest_path, "manifest lists no dialogues"));
    }

    let audio_path = features_dir.join(AUDIO_MATRIX_FILE);
    let text_path = features_dir.join(TEXT_MATRIX_FILE);
    let audio = read_feature_matrix(&audio_path)?;
    let text = read_feature_matrix(&text_path)?;
    if audio.ncols() != AUDIO_DIM {
        return Err(Error::Format(format!(
            "{}: {} columns, expected {AUDIO_DIM}",
            audio_path.display(),
            audio.ncols()
        )));
    }
    if text.ncols() != TEXT_DIM {
        return Err(Error::Format(format!(
            "{}: {} columns, expected {TEXT_DIM}",
            text_path.display(),
            text.ncols()
        )));
    }
    if audio.nrows() != text.nrows() {
        return Err(Error::Format(format!(
            "feature matrices disagree on row count: audio {} vs text {}",
            audio.nrows(),
            text.nrows()
        )));
    }

    let mut dialogues = Vec::with_capacity(records.len());
    for record in records {
        let mut utterances = Vec::with_capacity(record.utterances.len());
        for u in record.utterances {
            if u.row >= audio.nrows() {
                return Err(Error::Format(format!(
                    "utterance {}: row {} outside feature matrix with {} rows",
                    u.utt_id,
                    u.row,
                    audio.nrows()
                )));
            }
            let label = EmotionLabel::parse(&u.label)?;
            utterances.push(Utterance::new(
                u.utt_id,
                label,
                audio.row(u.row).to_vec(),
                text.row(u.row).to_vec(),
            )?);
        }
        dialogues.push(Dialogue::new(record.dialogue_id, record.session, utterances)?);
    }
    Ok(dialogues)
}

/// Utterance ids from a manifest, ordered by their declared feature
/// row. The rows must form a permutation of 0..n.
pub fn manifest_row_order(manifest_path: &Path) -> Result<Vec<String>> {
    let file = File::open(manifest_path).map_err(|e| ingest_err(manifest_path, e.to_string()))?;
    let reader = BufReader::new(file);
    let mut by_row: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestDialogue = serde_json::from_str(&line).map_err(|e| {
            ingest_err(manifest_path, format!("line {}: {e}", lineno + 1))
        })?;
        for u in record.utterances {
            by_row.push((u.row, u.utt_id));
        }
    }
    if by_row.is_empty() {
        return Err(ingest_err(manifest_path, "manifest lists no utterances"));
    }
    by_row.sort();
    for (want, (row, utt_id)) in by_row.iter().enumerate() {
        if *row != want {
            return Err(ingest_err(
                manifest_path,
                format!("utterance {utt_id}: row {row} breaks the 0..n permutation"),
            ));
        }
    }
    Ok(by_row.into_iter().map(|(_, id)| id).collect())
}

/// Write a corpus as manifest + FBM1 matrices into `dir`. Rows follow
/// dialogue order; the manifest records the row of every utterance.
/// Returns the manifest path.
pub fn save_corpus(dialogues: &[Dialogue], dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let total: usize = dialogues.iter().map(|d| d.len()).sum();
    let mut audio = Array2::<f32>::zeros((total, AUDIO_DIM));
    let mut text = Array2::<f32>::zeros((total, TEXT_DIM));
    let manifest_path = dir.join("manifest.jsonl");
    let file = File::create(&manifest_path)?;
    let mut w = BufWriter::new(file);
    let mut row = 0usize;
    for d in dialogues {
        let mut utterances = Vec::with_capacity(d.len());
        for u in &d.utterances {
            for (j, &v) in u.audio.iter().enumerate() {
                audio[[row, j]] = v;
            }
            for (j, &v) in u.text.iter().enumerate() {
                text[[row, j]] = v;
            }
            utterances.push(ManifestUtterance {
                utt_id: u.utt_id.clone(),
                label: u.label.name().to_string(),
                row,
            });
            row += 1;
        }
        let record = ManifestDialogue {
            dialogue_id: d.dialogue_id.clone(),
            session: d.session,
            utterances,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_feature_matrix(&dir.join(AUDIO_MATRIX_FILE), &audio)?;
    write_feature_matrix(&dir.join(TEXT_MATRIX_FILE), &text)?;
    Ok(manifest_path)
}
