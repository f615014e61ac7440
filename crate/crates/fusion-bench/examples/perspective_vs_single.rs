//! Train the same fusion cell under both loss modes and compare the
//! run-level outcomes, including the auxiliary loss terms the
//! perspective objective adds.

use std::collections::BTreeSet;

use fusion_bench::corpus::{generate_synthetic_corpus, split_by_session, SyntheticSpec};
use fusion_bench::metrics::significance_test;
use fusion_bench::model::{LossMode, ModelConfig};
use fusion_bench::train::{train_repeated, TrainConfig};

fn main() -> fusion_bench::Result<()> {
    let spec = SyntheticSpec {
        n_dialogues: 20,
        class_separation: 3.0,
        seed: 31,
        ..Default::default()
    };
    let dialogues = generate_synthetic_corpus(&spec)?;
    let split = split_by_session(dialogues, &BTreeSet::from([5]))?;

    let train_cfg = TrainConfig {
        epochs: 20,
        n_runs: 4,
        ..Default::default()
    };

    let mut samples: Vec<Vec<f64>> = Vec::new();
    for loss_mode in [LossMode::Single, LossMode::Perspective] {
        let model_cfg = ModelConfig {
            loss_mode,
            ..Default::default()
        };
        let agg = train_repeated(&model_cfg, &split, &train_cfg)?;
        println!(
            "{:<12} WA {:.2}±{:.2} over {} runs",
            loss_mode.name(),
            agg.mean_wa.unwrap() * 100.0,
            agg.std_wa.unwrap() * 100.0,
            agg.n_runs
        );
        let first = &agg.runs[0];
        let last = first.epoch_log.last().unwrap();
        match (last.l_a, last.l_t) {
            (Some(a), Some(t)) => println!(
                "  final epoch losses: L_s {:.3}, L_a {:.3}, L_t {:.3}",
                last.l_s, a, t
            ),
            _ => println!("  final epoch losses: L_s {:.3} (no auxiliary terms)", last.l_s),
        }
        samples.push(agg.runs.iter().map(|r| r.final_wa * 100.0).collect());
    }

    let sig = significance_test(&samples[0], &samples[1])?;
    println!(
        "\nWelch's t-test single vs perspective: t = {:.3}, p = {:.4}",
        sig.t_stat, sig.p_value
    );
    if sig.p_value < 0.05 {
        println!("difference is significant at the 5% level");
    } else {
        println!("no significant difference on this tiny corpus (expected; the effect needs full-scale runs)");
    }
    Ok(())
}
