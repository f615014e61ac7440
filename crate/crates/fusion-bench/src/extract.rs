//! Adapters around external feature extractors. The audio side shells
//! out to an openSMILE-style binary per wav file; the text side
//! delegates to a pluggable token encoder and mean-pools its states.
//! Both write FBM1 matrices atomically plus a provenance sidecar.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::io::{manifest_row_order, write_feature_matrix};
use crate::corpus::{AUDIO_DIM, TEXT_DIM};
use crate::error::{Error, Result};

pub const DEFAULT_OPENSMILE_CONFIG: &str = "IS13_ComParE";

/// Sidecar path for a matrix file: the same name with `.provenance`
/// appended.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance");
    out.with_file_name(name)
}

fn write_sidecar(out: &Path, tool: &str, version: &str, config: &str) -> Result<()> {
    let body = format!("tool={tool}\nversion={version}\nconfig={config}\n");
    fs::write(sidecar_path(out), body)?;
    Ok(())
}

/// Write `matrix` to `out` via a temp file in the same directory so a
/// failed run never leaves a partial matrix behind.
fn write_matrix_atomically(out: &Path, matrix: &Array2<f32>) -> Result<()> {
    let mut tmp_name = out.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = out.with_file_name(tmp_name);
    write_feature_matrix(&tmp, matrix)?;
    fs::rename(&tmp, out)?;
    Ok(())
}

fn spawn_error(bin: &Path, e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::NotFound {
        Error::Environment(format!("extractor binary {} not found", bin.display()))
    } else {
        Error::Environment(format!("cannot run {}: {e}", bin.display()))
    }
}

/// First line the binary prints for `-h`, used as its version string.
fn probe_version(bin: &Path) -> Result<String> {
    let output = Command::new(bin)
        .arg("-h")
        .output()
        .map_err(|e| spawn_error(bin, e))?;
    let text = if output.stdout.is_empty() {
        String::from_utf8_lossy(&output.stderr).into_owned()
    } else {
        String::from_utf8_lossy(&output.stdout).into_owned()
    };
    Ok(text
        .lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("unknown")
        .trim()
        .to_string())
}

/// Parse an openSMILE functionals CSV: a header line followed by one
/// data line `name;frameTime;<features>` with `;` separators.
fn parse_functionals_csv(text: &str, expect: usize) -> std::result::Result<Vec<f32>, String> {
    let line = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .next_back()
        .ok_or_else(|| "empty extractor output".to_string())?;
    let fields: Vec<&str> = line.split(';').collect();
    if fields.len() != expect + 2 {
        return Err(format!(
            "{} fields in data line, expected name;frameTime;{expect} features",
            fields.len()
        ));
    }
    fields[2..]
        .iter()
        .map(|f| {
            f.trim()
                .parse::<f32>()
                .map_err(|e| format!("bad feature value {f:?}: {e}"))
        })
        .collect()
}

/// Run the audio extractor over every wav in `wav_dir` and assemble an
/// FBM1 matrix at `out`. Row order follows `manifest` when given (its
/// declared feature rows), otherwise utterance ids sorted ascending.
/// Each utterance id maps to `<utt_id>.wav`.
pub fn run_audio_extractor(
    wav_dir: &Path,
    out: &Path,
    opensmile_bin: &Path,
    config_name: &str,
    manifest: Option<&Path>,
) -> Result<PathBuf> {
    let version = probe_version(opensmile_bin)?;

    let utt_ids: Vec<String> = match manifest {
        Some(m) => manifest_row_order(m)?,
        None => {
            let mut ids = Vec::new();
            for entry in fs::read_dir(wav_dir).map_err(|e| Error::Ingest {
                path: wav_dir.to_path_buf(),
                reason: e.to_string(),
            })? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "wav") {
                    if let Some(stem) = path.file_stem() {
                        ids.push(stem.to_string_lossy().into_owned());
                    }
                }
            }
            ids.sort();
            ids
        }
    };
    if utt_ids.is_empty() {
        return Err(Error::Extraction(format!(
            "no wav files to extract under {}",
            wav_dir.display()
        )));
    }

    let csv_dir = tempdir_in_parent(out)?;
    let mut rows = Vec::with_capacity(utt_ids.len());
    let mut failed: Vec<String> = Vec::new();
    for utt_id in &utt_ids {
        let wav = wav_dir.join(format!("{utt_id}.wav"));
        let csv = csv_dir.join(format!("{utt_id}.csv"));
        let run = || -> std::result::Result<Vec<f32>, String> {
            if !wav.is_file() {
                return Err(format!("{} missing", wav.display()));
            }
            let status = Command::new(opensmile_bin)
                .arg("-C")
                .arg(config_name)
                .arg("-I")
                .arg(&wav)
                .arg("-csvoutput")
                .arg(&csv)
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("extractor exited with {}", status.status));
            }
            let text = fs::read_to_string(&csv).map_err(|e| e.to_string())?;
            parse_functionals_csv(&text, AUDIO_DIM)
        };
        match run() {
            Ok(row) => rows.push(row),
            Err(reason) => failed.push(format!("{utt_id} ({reason})")),
        }
    }
    let _ = fs::remove_dir_all(&csv_dir);
    if !failed.is_empty() {
        return Err(Error::Extraction(format!(
            "audio extraction failed for {} utterance(s): {}",
            failed.len(),
            failed.join(", ")
        )));
    }

    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let matrix = Array2::from_shape_vec((utt_ids.len(), AUDIO_DIM), flat)
        .map_err(|e| Error::Extraction(e.to_string()))?;
    write_matrix_atomically(out, &matrix)?;
    let tool = opensmile_bin
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "opensmile".into());
    write_sidecar(out, &tool, &version, config_name)?;
    Ok(out.to_path_buf())
}

fn tempdir_in_parent(out: &Path) -> Result<PathBuf> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = parent
        .unwrap_or(Path::new("."))
        .join(format!(".extract-{}", std::process::id()));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Per-token encoder producing fixed-width hidden states. Empty input
/// must still yield at least one state (the adapter's empty-sequence
/// representation).
pub trait TextEncoder {
    fn name(&self) -> String;
    fn version(&self) -> String;
    fn encode(&self, text: &str) -> Result<Vec<Vec<f32>>>;
}

/// Deterministic stand-in encoder: each whitespace token maps to a
/// fixed pseudo-random vector derived from its hash, so identical
/// transcripts always produce identical rows. Empty input encodes a
/// single reserved state.
pub struct HashEncoder {
    dim: usize,
}

impl HashEncoder {
    pub fn new() -> Self {
        HashEncoder { dim: TEXT_DIM }
    }

    pub fn with_dim(dim: usize) -> Self {
        HashEncoder { dim }
    }

    fn token_state(&self, token: &str) -> Vec<f32> {
        let digest = Sha256::digest(token.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dim)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect()
    }
}

impl Default for HashEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl TextEncoder for HashEncoder {
    fn name(&self) -> String {
        "hash".into()
    }

    fn version(&self) -> String {
        "1".into()
    }

    fn encode(&self, text: &str) -> Result<Vec<Vec<f32>>> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Ok(vec![self.token_state("\u{0}empty\u{0}")]);
        }
        Ok(tokens.into_iter().map(|t| self.token_state(t)).collect())
    }
}

/// Encoder that shells out per utterance: the transcript goes to the
/// command's stdin and each stdout line must hold one token state as
/// whitespace-separated floats.
pub struct CommandEncoder {
    pub command: PathBuf,
}

impl TextEncoder for CommandEncoder {
    fn name(&self) -> String {
        format!("cmd:{}", self.command.display())
    }

    fn version(&self) -> String {
        probe_version(&self.command).unwrap_or_else(|_| "unknown".into())
    }

    fn encode(&self, text: &str) -> Result<Vec<Vec<f32>>> {
        use std::io::Write;
        let mut child = Command::new(&self.command)
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .spawn()
            .map_err(|e| spawn_error(&self.command, e))?;
        child
            .stdin
            .take()
            .expect("stdin was piped")
            .write_all(text.as_bytes())?;
        let output = child.wait_with_output()?;
        if !output.status.success() {
            return Err(Error::Extraction(format!(
                "encoder exited with {}",
                output.status
            )));
        }
        let states: std::result::Result<Vec<Vec<f32>>, _> = String::from_utf8_lossy(&output.stdout)
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|f| f.parse::<f32>())
                    .collect::<std::result::Result<Vec<f32>, _>>()
            })
            .collect();
        let states = states.map_err(|e| Error::Extraction(format!("bad encoder output: {e}")))?;
        if states.is_empty() {
            return Err(Error::Extraction("encoder produced no token states".into()));
        }
        Ok(states)
    }
}

/// Resolve an adapter name: `hash` or `cmd:<path>`.
pub fn text_encoder_for(adapter: &str) -> Result<Box<dyn TextEncoder>> {
    if adapter == "hash" {
        return Ok(Box::new(HashEncoder::new()));
    }
    if let Some(path) = adapter.strip_prefix("cmd:") {
        return Ok(Box::new(CommandEncoder {
            command: PathBuf::from(path),
        }));
    }
    Err(Error::Config(format!(
        "unknown text adapter {adapter:?}; expected \"hash\" or \"cmd:<path>\""
    )))
}

/// One transcript row: utterance id plus raw text.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub utt_id: String,
    pub text: String,
}

/// Read a transcript manifest, one `utt_id<TAB>text` row per line.
/// Line order defines feature-matrix row order. Text may be empty.
pub fn read_transcripts(path: &Path) -> Result<Vec<Transcript>> {
    let body = fs::read_to_string(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (utt_id, text) = line.split_once('\t').ok_or_else(|| Error::Ingest {
            path: path.to_path_buf(),
            reason: format!("line {}: expected utt_id<TAB>text", lineno + 1),
        })?;
        rows.push(Transcript {
            utt_id: utt_id.to_string(),
            text: text.to_string(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            reason: "no transcript rows".into(),
        });
    }
    Ok(rows)
}

/// Mean over token states, accumulated in f64.
pub fn mean_pool(states: &[Vec<f32>], dim: usize) -> std::result::Result<Vec<f32>, String> {
    if states.is_empty() {
        return Err("no token states to pool".into());
    }
    let mut acc = vec![0.0f64; dim];
    for s in states {
        if s.len() != dim {
            return Err(format!("token state width {} differs from {dim}", s.len()));
        }
        for (a, &v) in acc.iter_mut().zip(s.iter()) {
            *a += v as f64;
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| (a / states.len() as f64) as f32)
        .collect())
}

/// Encode every transcript and write the pooled states as an FBM1
/// matrix at `out`, one row per transcript in file order.
pub fn run_text_extractor(
    transcripts: &[Transcript],
    out: &Path,
    encoder: &dyn TextEncoder,
) -> Result<PathBuf> {
    if transcripts.is_empty() {
        return Err(Error::Extraction("no transcripts to encode".into()));
    }
    let mut rows = Vec::with_capacity(transcripts.len());
    let mut failed: Vec<String> = Vec::new();
    for t in transcripts {
        let pooled = encoder
            .encode(&t.text)
            .map_err(|e| e.to_string())
            .and_then(|states| mean_pool(&states, TEXT_DIM));
        match pooled {
            Ok(row) => rows.push(row),
            Err(reason) => failed.push(format!("{} ({reason})", t.utt_id)),
        }
    }
    if !failed.is_empty() {
        return Err(Error::Extraction(format!(
            "text encoding failed for {} utterance(s): {}",
            failed.len(),
            failed.join(", ")
        )));
    }
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let matrix = Array2::from_shape_vec((transcripts.len(), TEXT_DIM), flat)
        .map_err(|e| Error::Extraction(e.to_string()))?;
    write_matrix_atomically(out, &matrix)?;
    write_sidecar(out, "text-encoder", &encoder.version(), &encoder.name())?;
    Ok(out.to_path_buf())
}
