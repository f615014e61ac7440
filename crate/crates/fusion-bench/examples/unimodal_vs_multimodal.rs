//! Compare audio-only and text-only baselines against a fused model on
//! the same corpus. The synthetic text channel is made harder than the
//! audio channel so fusion has something to gain.

use std::collections::BTreeSet;

use fusion_bench::corpus::{generate_synthetic_corpus, split_by_session, SyntheticSpec};
use fusion_bench::grid::{run_grid, run_unimodal_baselines, GridOptions, GridSpec};
use fusion_bench::model::{FusionLayer, FusionMethod, LossMode, ModelConfig};
use fusion_bench::train::TrainConfig;

fn main() -> fusion_bench::Result<()> {
    let spec = SyntheticSpec {
        n_dialogues: 25,
        class_separation: 2.5,
        audio_separation: Some(2.5),
        text_separation: Some(1.0),
        seed: 5,
        ..Default::default()
    };
    let dialogues = generate_synthetic_corpus(&spec)?;
    let split = split_by_session(dialogues, &BTreeSet::from([5]))?;

    let model = ModelConfig::default();
    let train = TrainConfig {
        epochs: 25,
        n_runs: 3,
        ..Default::default()
    };

    println!("unimodal baselines ({} seeds each)...", train.n_runs);
    let baselines = run_unimodal_baselines(&split, &model, &train)?;
    for cell in &baselines {
        let row = cell.to_row();
        println!(
            "  {:<10} WA {}",
            cell.key.fusion_layer.name(),
            format_mean(row.mean_wa, row.std_wa)
        );
    }

    let mut opts = GridOptions::new("synthetic-unimodal-demo");
    opts.model = model;
    opts.train = train;
    opts.spec = GridSpec {
        layers: vec![FusionLayer::Lgf],
        methods: vec![FusionMethod::Add],
        losses: vec![LossMode::Perspective],
    };
    println!("fused model ({} seeds)...", opts.train.n_runs);
    let outcome = run_grid(&split, &opts)?;
    for row in &outcome.report.rows {
        println!(
            "  {:<10} WA {}",
            format!("{}/{}", row.fusion_layer.name(), row.fusion_method.name()),
            format_mean(row.mean_wa, row.std_wa)
        );
    }
    Ok(())
}

fn format_mean(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.2}±{s:.2}"),
        _ => "failed".into(),
    }
}
