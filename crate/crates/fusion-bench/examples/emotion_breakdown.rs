//! Per-emotion accuracy split by prediction branch. A perspective-loss
//! model carries three scoring heads (audio, text, fused), and the
//! breakdown shows where each emotion is actually recognized.

use std::collections::BTreeSet;

use fusion_bench::corpus::{
    generate_synthetic_corpus, make_batches, split_by_session, SyntheticSpec,
};
use fusion_bench::model::{LossMode, ModelConfig};
use fusion_bench::report::{emotion_breakdown, render_breakdown_text};
use fusion_bench::train::{train_one, TrainConfig};

fn main() -> fusion_bench::Result<()> {
    let spec = SyntheticSpec {
        n_dialogues: 30,
        class_separation: 3.0,
        seed: 17,
        ..Default::default()
    };
    let dialogues = generate_synthetic_corpus(&spec)?;
    let split = split_by_session(dialogues, &BTreeSet::from([5]))?;

    let model_cfg = ModelConfig {
        loss_mode: LossMode::Perspective,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: 25,
        ..Default::default()
    };
    let (model, run) = train_one(&model_cfg, &split, &train_cfg, 3)?;
    println!("trained to {:.2}% test WA\n", run.final_wa * 100.0);

    let batches = make_batches(&split.test, train_cfg.batch_size, None)?;
    let rows = emotion_breakdown(&model, &batches)?;
    print!("{}", render_breakdown_text(&rows));
    Ok(())
}
