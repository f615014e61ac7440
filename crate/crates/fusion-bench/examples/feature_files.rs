//! Round-trip the on-disk formats: FBM1 feature matrices, the JSONL
//! corpus manifest, and an FBCKPT1 model checkpoint.

use std::collections::BTreeSet;

use fusion_bench::checkpoint::{load_checkpoint, save_checkpoint};
use fusion_bench::corpus::{
    generate_synthetic_corpus, load_corpus, make_batches, read_feature_matrix, save_corpus,
    split_by_session, SyntheticSpec,
};
use fusion_bench::model::ModelConfig;
use fusion_bench::train::{train_one, TrainConfig};

fn main() -> fusion_bench::Result<()> {
    let dir = std::env::temp_dir().join(format!("fusion-bench-demo-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    // Write a corpus: manifest.jsonl plus audio.fbm / text.fbm, one
    // matrix row per utterance in manifest row order.
    let spec = SyntheticSpec {
        n_dialogues: 8,
        seed: 2,
        ..Default::default()
    };
    let dialogues = generate_synthetic_corpus(&spec)?;
    let manifest = save_corpus(&dialogues, &dir)?;
    println!("manifest: {}", manifest.display());

    let audio = read_feature_matrix(&dir.join("audio.fbm"))?;
    let text = read_feature_matrix(&dir.join("text.fbm"))?;
    println!(
        "audio matrix {}x{}, text matrix {}x{}",
        audio.nrows(),
        audio.ncols(),
        text.nrows(),
        text.ncols()
    );

    // Read it back and confirm the dialogue structure survived.
    let reloaded = load_corpus(&manifest, &dir)?;
    assert_eq!(reloaded.len(), dialogues.len());
    let total: usize = reloaded.iter().map(|d| d.utterances.len()).sum();
    assert_eq!(total, audio.nrows());
    println!("reloaded {} dialogues, {} utterances", reloaded.len(), total);

    // Checkpoint round trip: train briefly, save, reload, and verify
    // the reloaded model scores batches identically.
    let split = split_by_session(reloaded, &BTreeSet::from([5]))?;
    let train_cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let (model, _) = train_one(&ModelConfig::default(), &split, &train_cfg, 0)?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &model)?;
    let restored = load_checkpoint(&ckpt)?;
    println!("checkpoint: {} ({} bytes)", ckpt.display(), std::fs::metadata(&ckpt)?.len());

    let batch = &make_batches(&split.test, 4, None)?[0];
    let a = model.forward(batch, false, None)?;
    let b = restored.forward(batch, false, None)?;
    let la = a.designated_logits()?;
    let lb = b.designated_logits()?;
    // Checkpoints store f32; agreement holds at that precision.
    let max_diff = la
        .iter()
        .zip(lb.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    println!("max logit difference after reload: {max_diff:.3e}");
    assert!(max_diff < 1e-3);

    std::fs::remove_dir_all(&dir)?;
    println!("cleaned up {}", dir.display());
    Ok(())
}
