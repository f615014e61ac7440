//! Check reverse-mode gradients against central finite differences on
//! a tiny model. Probes a handful of coordinates in every parameter
//! tensor for each fusion layer and method.

use fusion_bench::corpus::DialogueBatch;
use fusion_bench::model::{
    build_model, forward_on_tape, FusionLayer, FusionMethod, LossMode, ModelConfig,
};
use fusion_bench::autodiff::Tape;
use fusion_bench::nn::{grad_check, BoundParams, ParamSet};
use fusion_bench::objectives::loss_on_tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config(layer: FusionLayer, method: FusionMethod) -> ModelConfig {
    ModelConfig {
        fusion_layer: layer,
        fusion_method: method,
        loss_mode: LossMode::Perspective,
        d_model: 8,
        n_heads: 2,
        n_classes: 4,
        dropout_p: 0.0,
        audio_dim: 6,
        text_dim: 5,
    }
}

fn random_batch(audio_dim: usize, text_dim: usize, seed: u64) -> DialogueBatch {
    let lengths = [3usize, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, s) = (lengths.len(), *lengths.iter().max().unwrap());
    let mut audio = ndarray::Array3::<f64>::zeros((b, s, audio_dim));
    let mut text = ndarray::Array3::<f64>::zeros((b, s, text_dim));
    let mut labels = ndarray::Array2::<i64>::from_elem((b, s), -1);
    let mut mask = ndarray::Array2::<f64>::zeros((b, s));
    for (bi, &len) in lengths.iter().enumerate() {
        for si in 0..len {
            for j in 0..audio_dim {
                audio[[bi, si, j]] = rng.random::<f64>() * 2.0 - 1.0;
            }
            for j in 0..text_dim {
                text[[bi, si, j]] = rng.random::<f64>() * 2.0 - 1.0;
            }
            labels[[bi, si]] = rng.random_range(0..4);
            mask[[bi, si]] = 1.0;
        }
    }
    DialogueBatch {
        dialogue_ids: (0..b).map(|i| format!("d{i}")).collect(),
        audio,
        text,
        labels,
        mask,
    }
}

fn main() -> fusion_bench::Result<()> {
    let mut worst: (f64, String) = (0.0, String::new());
    for layer in FusionLayer::FUSING {
        for method in FusionMethod::ALL {
            let config = tiny_config(layer, method);
            let batch = random_batch(config.audio_dim, config.text_dim, 99);
            let model = build_model(&config, 42)?;

            // The closure rebuilds the graph from scratch per probe so
            // finite differences see a pure function of the parameters.
            let report = grad_check(
                &model.params,
                |params: &ParamSet, want_grads: bool| {
                    let mut tape = Tape::new();
                    let bp = BoundParams::bind(&mut tape, params);
                    let nodes =
                        forward_on_tape(&mut tape, &bp, &config, &batch, false, None)?;
                    let (root, breakdown) =
                        loss_on_tape(&mut tape, &nodes, &batch, config.loss_mode, None)?;
                    if !want_grads {
                        return Ok((breakdown.total, None));
                    }
                    let grads = tape.backward(root);
                    Ok((breakdown.total, Some(bp.grads(&tape, &grads))))
                },
                1e-5,
                3,
                7,
            )?;
            println!(
                "{:>3}/{:<6} max rel err {:.3e} over {} probes (worst: {})",
                layer.name(),
                method.name(),
                report.max_rel_err,
                report.n_checked,
                report.worst_param
            );
            if report.max_rel_err > worst.0 {
                worst = (
                    report.max_rel_err,
                    format!("{}/{}", layer.name(), method.name()),
                );
            }
        }
    }
    println!("\nworst case: {} at {:.3e}", worst.1, worst.0);
    assert!(worst.0 < 1e-3, "gradient mismatch");
    println!("all configurations under 1e-3");
    Ok(())
}
