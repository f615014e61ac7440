//! Inspect the per-utterance modality weights the attention fusion
//! produces. Trains a small LF/AT model, then prints how much weight
//! the fused representation places on audio versus text when one
//! modality is much cleaner than the other.

use std::collections::BTreeSet;

use fusion_bench::corpus::{
    generate_synthetic_corpus, make_batches, split_by_session, SyntheticSpec,
};
use fusion_bench::model::{FusionLayer, FusionMethod, LossMode, ModelConfig};
use fusion_bench::train::{train_one, TrainConfig};

fn main() -> fusion_bench::Result<()> {
    // Audio is nearly noise-free, text nearly uninformative. A useful
    // fusion should learn to lean on audio.
    let spec = SyntheticSpec {
        n_dialogues: 25,
        class_separation: 6.0,
        audio_separation: Some(6.0),
        text_separation: Some(0.2),
        seed: 13,
        ..Default::default()
    };
    let dialogues = generate_synthetic_corpus(&spec)?;
    let split = split_by_session(dialogues, &BTreeSet::from([5]))?;

    let model_cfg = ModelConfig {
        fusion_layer: FusionLayer::Lf,
        fusion_method: FusionMethod::At,
        loss_mode: LossMode::Single,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: 40,
        ..Default::default()
    };
    let (model, run) = train_one(&model_cfg, &split, &train_cfg, 77)?;
    println!("test WA after training: {:.2}%", run.final_wa * 100.0);

    let batches = make_batches(&split.test, train_cfg.batch_size, None)?;
    let mut sum = [0.0f64; 2];
    let mut n = 0usize;
    for batch in &batches {
        let out = model.forward(batch, false, None)?;
        // at_weights is (batch, seq, 2): audio weight then text weight,
        // softmax-normalized per utterance.
        let w = out.at_weights.as_ref().expect("AT fusion exposes weights");
        for bi in 0..w.dim().0 {
            for si in 0..w.dim().1 {
                if batch.mask[[bi, si]] > 0.0 {
                    sum[0] += w[[bi, si, 0]];
                    sum[1] += w[[bi, si, 1]];
                    n += 1;
                }
            }
        }
    }
    let (a, t) = (sum[0] / n as f64, sum[1] / n as f64);
    println!("mean fusion weight over {n} test utterances:");
    println!("  audio {a:.4}");
    println!("  text  {t:.4}");
    assert!((a + t - 1.0).abs() < 1e-9, "weights are a softmax pair");
    if a > t {
        println!("the model leans on the clean audio channel");
    } else {
        println!("the model leans on text despite the noise (undertrained?)");
    }
    Ok(())
}
