//! Dialogue/utterance data model, session splits, and whole-dialogue
//! batching with padding masks.

pub mod io;
pub mod synthetic;

pub use io::{load_corpus, read_feature_matrix, save_corpus, write_feature_matrix};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AUDIO_DIM: usize = 6373;
pub const TEXT_DIM: usize = 768;
pub const N_CLASSES: usize = 4;

/// Label written into padded batch positions; never enters a loss or metric.
pub const PAD_LABEL: i64 = -1;

/// The four emotion categories. Raw "excited" labels merge into happy
/// before storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Happy = 0,
    Sad = 1,
    Neutral = 2,
    Angry = 3,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 4] = [
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Neutral,
        EmotionLabel::Angry,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<EmotionLabel> {
        EmotionLabel::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Angry => "angry",
        }
    }

    /// Case-insensitive parse, merging "excited" into happy.
    pub fn parse(raw: &str) -> Result<EmotionLabel> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "happy" | "hap" | "happiness" | "excited" | "exc" => Ok(EmotionLabel::Happy),
            "sad" | "sadness" => Ok(EmotionLabel::Sad),
            "neutral" | "neu" => Ok(EmotionLabel::Neutral),
            "angry" | "ang" | "anger" => Ok(EmotionLabel::Angry),
            other => Err(Error::Label(format!("unknown emotion label {other:?}"))),
        }
    }
}

/// One speaker turn with its extracted features.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub label: EmotionLabel,
    pub audio: Vec<f32>,
    pub text: Vec<f32>,
}

impl Utterance {
    pub fn new(utt_id: String, label: EmotionLabel, audio: Vec<f32>, text: Vec<f32>) -> Result<Self> {
        if audio.len() != AUDIO_DIM {
            return Err(Error::Format(format!(
                "utterance {utt_id}: audio vector has {} entries, expected {AUDIO_DIM}",
                audio.len()
            )));
        }
        if text.len() != TEXT_DIM {
            return Err(Error::Format(format!(
                "utterance {utt_id}: text vector has {} entries, expected {TEXT_DIM}",
                text.len()
            )));
        }
        if audio.iter().chain(text.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "utterance {utt_id}: non-finite feature entry"
            )));
        }
        Ok(Utterance {
            utt_id,
            label,
            audio,
            text,
        })
    }
}

/// An ordered sequence of utterances from one session.
#[derive(Debug, Clone)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub session: u8,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn new(dialogue_id: String, session: u8, utterances: Vec<Utterance>) -> Result<Self> {
        if !(1..=5).contains(&session) {
            return Err(Error::Format(format!(
                "dialogue {dialogue_id}: session {session} outside 1..=5"
            )));
        }
        if utterances.is_empty() {
            return Err(Error::Format(format!(
                "dialogue {dialogue_id}: no utterances"
            )));
        }
        Ok(Dialogue {
            dialogue_id,
            session,
            utterances,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Train/test partition by session.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Partition dialogues into train and test by session membership.
pub fn split_by_session(dialogues: Vec<Dialogue>, test_sessions: &BTreeSet<u8>) -> Result<CorpusSplit> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in dialogues {
        if test_sessions.contains(&d.session) {
            test.push(d);
        } else {
            train.push(d);
        }
    }
    if train.is_empty() {
        return Err(Error::Config(
            "session split leaves the training partition empty".into(),
        ));
    }
    if test.is_empty() {
        return Err(Error::Config(
            "session split leaves the test partition empty".into(),
        ));
    }
    Ok(CorpusSplit { train, test })
}

/// Utterance count per class, indexed by `EmotionLabel::index`.
pub fn class_counts(dialogues: &[Dialogue]) -> [usize; N_CLASSES] {
    let mut counts = [0usize; N_CLASSES];
    for d in dialogues {
        for u in &d.utterances {
            counts[u.label.index()] += 1;
        }
    }
    counts
}

pub fn total_utterances(dialogues: &[Dialogue]) -> usize {
    dialogues.iter().map(|d| d.len()).sum()
}

/// A padded batch of whole dialogues. Padded positions carry zero
/// features, label `PAD_LABEL`, and mask 0.
#[derive(Debug, Clone)]
pub struct DialogueBatch {
    pub dialogue_ids: Vec<String>,
    pub audio: Array3<f64>,
    pub text: Array3<f64>,
    pub labels: Array2<i64>,
    pub mask: Array2<f64>,
}

impl DialogueBatch {
    pub fn from_dialogues(dialogues: &[&Dialogue]) -> Result<DialogueBatch> {
        if dialogues.is_empty() {
            return Err(Error::Config("cannot batch zero dialogues".into()));
        }
        let b = dialogues.len();
        let s_max = dialogues.iter().map(|d| d.len()).max().unwrap();
        let audio_dim = dialogues[0].utterances[0].audio.len();
        let text_dim = dialogues[0].utterances[0].text.len();

        let mut audio = Array3::<f64>::zeros((b, s_max, audio_dim));
        let mut text = Array3::<f64>::zeros((b, s_max, text_dim));
        let mut labels = Array2::<i64>::from_elem((b, s_max), PAD_LABEL);
        let mut mask = Array2::<f64>::zeros((b, s_max));
        for (bi, d) in dialogues.iter().enumerate() {
            for (si, u) in d.utterances.iter().enumerate() {
                if u.audio.len() != audio_dim || u.text.len() != text_dim {
                    return Err(Error::Shape(format!(
                        "utterance {} feature width differs within batch",
                        u.utt_id
                    )));
                }
                for (j, &v) in u.audio.iter().enumerate() {
                    audio[[bi, si, j]] = v as f64;
                }
                for (j, &v) in u.text.iter().enumerate() {
                    text[[bi, si, j]] = v as f64;
                }
                labels[[bi, si]] = u.label.index() as i64;
                mask[[bi, si]] = 1.0;
            }
        }
        Ok(DialogueBatch {
            dialogue_ids: dialogues.iter().map(|d| d.dialogue_id.clone()).collect(),
            audio,
            text,
            labels,
            mask,
        })
    }

    pub fn n_dialogues(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn n_utterances(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }
}

/// Group dialogues into whole-dialogue batches of at most `batch_size`.
/// With a seed, ordering is a deterministic shuffle; with none, input
/// order is preserved.
pub fn make_batches(
    dialogues: &[Dialogue],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<DialogueBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Dialogue> = chunk.iter().map(|&i| &dialogues[i]).collect();
            DialogueBatch::from_dialogues(&refs)
        })
        .collect()
}
