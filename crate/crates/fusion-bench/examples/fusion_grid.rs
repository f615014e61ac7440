//! Sweep every fusion layer, fusion method, and loss mode over a small
//! synthetic corpus and print the aggregated table. This is the library
//! equivalent of the `grid` subcommand.

use std::collections::BTreeSet;

use fusion_bench::corpus::{generate_synthetic_corpus, split_by_session, SyntheticSpec};
use fusion_bench::grid::{corpus_id_for_synthetic, run_grid, GridOptions, GridSpec};
use fusion_bench::model::ModelConfig;
use fusion_bench::report::{render_grid_csv, render_grid_text};
use fusion_bench::train::TrainConfig;

fn main() -> fusion_bench::Result<()> {
    let spec = SyntheticSpec {
        n_dialogues: 15,
        class_separation: 4.0,
        seed: 21,
        ..Default::default()
    };
    let dialogues = generate_synthetic_corpus(&spec)?;
    let split = split_by_session(dialogues, &BTreeSet::from([5]))?;

    let mut opts = GridOptions::new(corpus_id_for_synthetic(&spec));
    opts.spec = GridSpec::full();
    opts.model = ModelConfig::default();
    opts.train = TrainConfig {
        epochs: 8,
        n_runs: 2,
        ..Default::default()
    };
    println!(
        "running {} cells x {} seeds...",
        opts.spec.cells().len(),
        opts.train.n_runs
    );
    let outcome = run_grid(&split, &opts)?;

    print!("{}", render_grid_text(&outcome.report));
    println!("\nCSV form:\n{}", render_grid_csv(&outcome.report));
    Ok(())
}
