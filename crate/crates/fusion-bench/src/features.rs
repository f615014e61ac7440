//! Audio feature standardization. Statistics are fitted on the training
//! split only and then applied to every split with those frozen values.

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, Dialogue};
use crate::error::{Error, Result};

/// Per-dimension mean and standard deviation of the training audio
/// features. Stds below 1e-8 are clamped to 1.0 so constant columns
/// standardize to zero instead of blowing up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_CLAMP_THRESHOLD: f64 = 1e-8;

fn audio_width(dialogues: &[Dialogue]) -> Result<usize> {
    dialogues
        .iter()
        .flat_map(|d| d.utterances.first())
        .map(|u| u.audio.len())
        .next()
        .ok_or_else(|| Error::Stats("no utterances to standardize".into()))
}

/// Population mean and std over every training utterance's audio vector.
pub fn fit_standardization(train: &[Dialogue]) -> Result<StandardizationStats> {
    let dim = audio_width(train)?;
    let n: usize = train.iter().map(|d| d.utterances.len()).sum();
    if n < 2 {
        return Err(Error::Stats(format!(
            "standardization needs at least 2 utterances, got {n}"
        )));
    }

    let mut mean = vec![0.0f64; dim];
    for d in train {
        for u in &d.utterances {
            if u.audio.len() != dim {
                return Err(Error::Shape(format!(
                    "utterance {}: audio width {} differs from {dim}",
                    u.utt_id,
                    u.audio.len()
                )));
            }
            for (acc, &v) in mean.iter_mut().zip(u.audio.iter()) {
                *acc += v as f64;
            }
        }
    }
    for acc in mean.iter_mut() {
        *acc /= n as f64;
    }

    let mut var = vec![0.0f64; dim];
    for d in train {
        for u in &d.utterances {
            for ((acc, &m), &v) in var.iter_mut().zip(mean.iter()).zip(u.audio.iter()) {
                let c = v as f64 - m;
                *acc += c * c;
            }
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd < STD_CLAMP_THRESHOLD {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(StandardizationStats { mean, std })
}

/// Replace each audio vector with (x - mean) / std in place. Text
/// features are untouched.
pub fn apply_standardization(
    dialogues: &mut [Dialogue],
    stats: &StandardizationStats,
) -> Result<()> {
    let dim = stats.mean.len();
    if stats.std.len() != dim {
        return Err(Error::Shape(format!(
            "stats mean/std lengths differ: {dim} vs {}",
            stats.std.len()
        )));
    }
    for d in dialogues.iter_mut() {
        for u in d.utterances.iter_mut() {
            if u.audio.len() != dim {
                return Err(Error::Shape(format!(
                    "utterance {}: audio width {} does not match stats width {dim}",
                    u.utt_id,
                    u.audio.len()
                )));
            }
            for ((v, &m), &s) in u.audio.iter_mut().zip(stats.mean.iter()).zip(stats.std.iter()) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }
    Ok(())
}

/// Fit on the train split, apply to both splits, return the statistics.
pub fn standardize_split(split: &mut CorpusSplit) -> Result<StandardizationStats> {
    let stats = fit_standardization(&split.train)?;
    apply_standardization(&mut split.train, &stats)?;
    apply_standardization(&mut split.test, &stats)?;
    Ok(stats)
}
