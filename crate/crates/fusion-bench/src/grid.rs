//! The experiment grid: every requested (layer, method, loss) cell is
//! trained over repeated seeds and aggregated into one report, plus the
//! unimodal baselines that share the same plumbing.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::io::{AUDIO_MATRIX_FILE, TEXT_MATRIX_FILE};
use crate::corpus::{synthetic::SyntheticSpec, CorpusSplit};
use crate::error::{Error, Result};
use crate::model::{FusionLayer, FusionMethod, LossMode, Model, ModelConfig};
use crate::train::{train_repeated_with, AggregateResult, RunResult, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which (layer, method, loss) cells to run. Cell order is loss-major,
/// then method, then layer, mirroring how the rendered table reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub layers: Vec<FusionLayer>,
    pub methods: Vec<FusionMethod>,
    pub losses: Vec<LossMode>,
}

impl GridSpec {
    /// All 4 layers, 3 methods, and both losses: 24 cells.
    pub fn full() -> Self {
        GridSpec {
            layers: FusionLayer::FUSING.to_vec(),
            methods: FusionMethod::ALL.to_vec(),
            losses: LossMode::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.methods.is_empty() || self.losses.is_empty() {
            return Err(Error::Config(
                "grid needs at least one layer, one method, and one loss".into(),
            ));
        }
        if let Some(l) = self.layers.iter().find(|l| l.is_unimodal()) {
            return Err(Error::Config(format!(
                "layer {} is a unimodal baseline, not a grid cell",
                l.name()
            )));
        }
        fn has_dup(names: Vec<&'static str>) -> bool {
            let uniq: std::collections::BTreeSet<_> = names.iter().collect();
            uniq.len() != names.len()
        }
        if has_dup(self.layers.iter().map(|l| l.name()).collect())
            || has_dup(self.methods.iter().map(|m| m.name()).collect())
            || has_dup(self.losses.iter().map(|l| l.name()).collect())
        {
            return Err(Error::Config("grid axes contain duplicates".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::with_capacity(self.layers.len() * self.methods.len() * self.losses.len());
        for &loss_mode in &self.losses {
            for &fusion_method in &self.methods {
                for &fusion_layer in &self.layers {
                    out.push(CellKey {
                        fusion_layer,
                        fusion_method,
                        loss_mode,
                    });
                }
            }
        }
        out
    }
}

/// One grid coordinate. Unimodal baselines reuse this with a `none_*`
/// layer and the method slot ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub fusion_layer: FusionLayer,
    pub fusion_method: FusionMethod,
    pub loss_mode: LossMode,
}

impl CellKey {
    /// Stable slug for file names.
    pub fn slug(&self) -> String {
        if self.fusion_layer.is_unimodal() {
            format!("{}_{}", self.fusion_layer.name(), self.loss_mode.name())
        } else {
            format!(
                "{}_{}_{}",
                self.fusion_layer.name(),
                self.fusion_method.name(),
                self.loss_mode.name()
            )
        }
    }
}

/// One report row. Accuracies are WA percentages; both are None when
/// every run of the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub fusion_layer: FusionLayer,
    pub fusion_method: FusionMethod,
    pub loss_mode: LossMode,
    pub mean_wa: Option<f64>,
    pub std_wa: Option<f64>,
    pub n_runs: usize,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub corpus_id: String,
    pub config_hash: String,
    pub tool_version: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub metadata: GridMetadata,
}

/// A cell's aggregate with the per-seed results it was computed from,
/// so every report number stays recomputable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRuns {
    pub key: CellKey,
    pub aggregate: AggregateResult,
}

impl CellRuns {
    pub fn to_row(&self) -> GridRow {
        GridRow {
            fusion_layer: self.key.fusion_layer,
            fusion_method: self.key.fusion_method,
            loss_mode: self.key.loss_mode,
            mean_wa: self.aggregate.mean_wa.map(|v| v * 100.0),
            std_wa: self.aggregate.std_wa.map(|v| v * 100.0),
            n_runs: self.aggregate.n_runs,
            failed_runs: self.aggregate.failed_runs,
        }
    }
}

/// The full persisted outcome: the rendered-report source of truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOutcome {
    pub report: GridReport,
    pub cells: Vec<CellRuns>,
}

impl GridOutcome {
    /// Cells where every run failed; a nonempty list means partial
    /// failure (exit code 3 at the CLI).
    pub fn fully_failed_cells(&self) -> Vec<String> {
        self.cells
            .iter()
            .filter(|c| c.aggregate.n_runs == 0)
            .map(|c| c.key.slug())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub spec: GridSpec,
    /// Base model config; each cell overrides layer/method/loss.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus_id: String,
    /// Above 1, cells share the worker pool instead of running one at
    /// a time. Results are identical either way.
    pub parallel_cells: usize,
}

impl GridOptions {
    pub fn new(corpus_id: impl Into<String>) -> Self {
        GridOptions {
            spec: GridSpec::full(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus_id: corpus_id.into(),
            parallel_cells: 1,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hash of everything that determines the numbers: base model config,
/// train config, requested grid axes, and corpus identity.
pub fn config_hash(
    model: &ModelConfig,
    train: &TrainConfig,
    spec: &GridSpec,
    corpus_id: &str,
) -> String {
    #[derive(Serialize)]
    struct HashInput<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        spec: &'a GridSpec,
        corpus_id: &'a str,
    }
    let json = serde_json::to_vec(&HashInput {
        model,
        train,
        spec,
        corpus_id,
    })
    .expect("hash input serializes");
    hex(&Sha256::digest(&json))
}

/// Corpus identity for ingested data: a digest over the manifest and
/// both feature matrices.
pub fn corpus_id_from_files(manifest: &Path, features_dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for path in [
        manifest.to_path_buf(),
        features_dir.join(AUDIO_MATRIX_FILE),
        features_dir.join(TEXT_MATRIX_FILE),
    ] {
        use std::io::Read;
        let mut file = std::fs::File::open(&path).map_err(|e| Error::Ingest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut buf = [0u8; 64 * 1024];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
    }
    Ok(format!("sha256:{}", &hex(&hasher.finalize())[..16]))
}

/// Corpus identity for generated data: derived from the generator spec.
pub fn corpus_id_for_synthetic(spec: &SyntheticSpec) -> String {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    format!(
        "synthetic-n{}-seed{}:{}",
        spec.n_dialogues,
        spec.seed,
        &hex(&Sha256::digest(&json))[..16]
    )
}

fn timestamp_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Run every cell of the grid. `on_run` fires once per finished
/// training run with the trained model, before the model is dropped.
pub fn run_grid_with<F>(split: &CorpusSplit, opts: &GridOptions, on_run: F) -> Result<GridOutcome>
where
    F: Fn(&CellKey, usize, &Model, &RunResult) -> Result<()> + Sync,
{
    opts.spec.validate()?;
    opts.train.validate()?;
    let keys = opts.spec.cells();

    let run_cell = |key: &CellKey| -> Result<CellRuns> {
        let mut mc = opts.model.clone();
        mc.fusion_layer = key.fusion_layer;
        mc.fusion_method = key.fusion_method;
        mc.loss_mode = key.loss_mode;
        let aggregate = train_repeated_with(&mc, split, &opts.train, |k, model, run| {
            on_run(key, k, model, run)
        })?;
        Ok(CellRuns {
            key: *key,
            aggregate,
        })
    };

    let cells: Vec<CellRuns> = if opts.parallel_cells > 1 {
        keys.par_iter().map(run_cell).collect::<Result<_>>()?
    } else {
        keys.iter().map(run_cell).collect::<Result<_>>()?
    };

    let rows = cells.iter().map(CellRuns::to_row).collect();
    Ok(GridOutcome {
        report: GridReport {
            rows,
            metadata: GridMetadata {
                corpus_id: opts.corpus_id.clone(),
                config_hash: config_hash(&opts.model, &opts.train, &opts.spec, &opts.corpus_id),
                tool_version: TOOL_VERSION.to_string(),
                timestamp: timestamp_now(),
            },
        },
        cells,
    })
}

pub fn run_grid(split: &CorpusSplit, opts: &GridOptions) -> Result<GridOutcome> {
    run_grid_with(split, opts, |_, _, _, _| Ok(()))
}

/// Train one unimodal baseline (`none_audio` for audio-only,
/// `none_text` for text-only). The loss is forced to single.
pub fn run_unimodal_baseline(
    split: &CorpusSplit,
    base: &ModelConfig,
    train: &TrainConfig,
    modality: FusionLayer,
) -> Result<CellRuns> {
    if !modality.is_unimodal() {
        return Err(Error::Config(format!(
            "{} is not a unimodal baseline layer",
            modality.name()
        )));
    }
    let mut mc = base.clone();
    mc.fusion_layer = modality;
    mc.loss_mode = LossMode::Single;
    let aggregate = train_repeated_with(&mc, split, train, |_, _, _| Ok(()))?;
    Ok(CellRuns {
        key: CellKey {
            fusion_layer: modality,
            fusion_method: mc.fusion_method,
            loss_mode: LossMode::Single,
        },
        aggregate,
    })
}

/// Audio-only then text-only baselines.
pub fn run_unimodal_baselines(
    split: &CorpusSplit,
    base: &ModelConfig,
    train: &TrainConfig,
) -> Result<Vec<CellRuns>> {
    Ok(vec![
        run_unimodal_baseline(split, base, train, FusionLayer::NoneAudio)?,
        run_unimodal_baseline(split, base, train, FusionLayer::NoneText)?,
    ])
}

/// Wrap already-trained cells (for example unimodal baselines) in the
/// same report shape the grid produces.
pub fn cells_outcome(
    cells: Vec<CellRuns>,
    model: &ModelConfig,
    train: &TrainConfig,
    corpus_id: &str,
) -> GridOutcome {
    let spec = GridSpec {
        layers: cells.iter().map(|c| c.key.fusion_layer).collect(),
        methods: Vec::new(),
        losses: vec![LossMode::Single],
    };
    let rows = cells.iter().map(CellRuns::to_row).collect();
    GridOutcome {
        report: GridReport {
            rows,
            metadata: GridMetadata {
                corpus_id: corpus_id.to_string(),
                config_hash: config_hash(model, train, &spec, corpus_id),
                tool_version: TOOL_VERSION.to_string(),
                timestamp: timestamp_now(),
            },
        },
        cells,
    }
}

/// Write one run's epoch records as JSON lines.
pub fn write_epoch_log(path: &Path, run: &RunResult) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for record in &run.epoch_log {
        serde_json::to_writer(&mut w, record)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::train::tests::{quick_cfg, toy_split};

    fn tiny_opts(spec: GridSpec, train: TrainConfig) -> GridOptions {
        GridOptions {
            spec,
            model: tiny_config(FusionLayer::Lgf, FusionMethod::Add, LossMode::Single),
            train,
            corpus_id: "test-corpus".into(),
            parallel_cells: 1,
        }
    }

    #[test]
    fn full_grid_spec_has_24_cells_in_canonical_order() {
        let spec = GridSpec::full();
        let cells = spec.cells();
        assert_eq!(cells.len(), 24);
        assert_eq!(
            cells[0],
            CellKey {
                fusion_layer: FusionLayer::Ef,
                fusion_method: FusionMethod::Add,
                loss_mode: LossMode::Single,
            }
        );
        // layer varies fastest, loss slowest
        assert_eq!(cells[1].fusion_layer, FusionLayer::Mf);
        assert_eq!(cells[4].fusion_method, FusionMethod::Concat);
        assert_eq!(cells[12].loss_mode, LossMode::Perspective);
        assert_eq!(cells[23].slug(), "lgf_at_perspective");
    }

    #[test]
    fn grid_spec_validation() {
        let mut spec = GridSpec::full();
        spec.layers.push(FusionLayer::NoneAudio);
        assert!(spec.validate().is_err());

        let empty = GridSpec {
            layers: vec![],
            ..GridSpec::full()
        };
        assert!(empty.validate().is_err());

        let dup = GridSpec {
            methods: vec![FusionMethod::Add, FusionMethod::Add],
            ..GridSpec::full()
        };
        assert!(dup.validate().is_err());
        assert!(GridSpec::full().validate().is_ok());
    }

    #[test]
    fn grid_emits_one_row_per_cell_with_recomputable_stats() {
        let split = toy_split(4, 2, 3, 1);
        let spec = GridSpec {
            layers: vec![FusionLayer::Lgf],
            methods: vec![FusionMethod::Add],
            losses: LossMode::ALL.to_vec(),
        };
        let opts = tiny_opts(spec, quick_cfg(2));
        let outcome = run_grid(&split, &opts).unwrap();
        assert_eq!(outcome.report.rows.len(), 2);
        assert_eq!(outcome.cells.len(), 2);
        assert_eq!(outcome.report.rows[0].loss_mode, LossMode::Single);
        assert_eq!(outcome.report.rows[1].loss_mode, LossMode::Perspective);
        for (row, cell) in outcome.report.rows.iter().zip(outcome.cells.iter()) {
            assert_eq!(row.n_runs, 2);
            assert_eq!(row.failed_runs, 0);
            let mean = cell
                .aggregate
                .runs
                .iter()
                .map(|r| r.final_wa)
                .sum::<f64>()
                / cell.aggregate.runs.len() as f64;
            assert!((row.mean_wa.unwrap() - mean * 100.0).abs() < 1e-12);
        }
        assert!(outcome.fully_failed_cells().is_empty());
        assert_eq!(outcome.report.metadata.tool_version, TOOL_VERSION);
    }

    #[test]
    fn rerun_reproduces_rows_and_hash() {
        let split = toy_split(3, 1, 3, 9);
        let spec = GridSpec {
            layers: vec![FusionLayer::Ef],
            methods: vec![FusionMethod::Concat],
            losses: vec![LossMode::Single],
        };
        let opts = tiny_opts(spec, quick_cfg(2));
        let a = run_grid(&split, &opts).unwrap();
        let b = run_grid(&split, &opts).unwrap();
        assert_eq!(a.report.rows, b.report.rows);
        assert_eq!(a.report.metadata.config_hash, b.report.metadata.config_hash);
        assert_eq!(
            a.report.rows[0].mean_wa.unwrap().to_bits(),
            b.report.rows[0].mean_wa.unwrap().to_bits()
        );
    }

    #[test]
    fn config_hash_reacts_to_every_input() {
        let spec = GridSpec::full();
        let model = tiny_config(FusionLayer::Lgf, FusionMethod::Add, LossMode::Single);
        let train = TrainConfig::default();
        let base = config_hash(&model, &train, &spec, "corpus-a");

        let mut model2 = model.clone();
        model2.d_model = 16;
        assert_ne!(base, config_hash(&model2, &train, &spec, "corpus-a"));

        let train2 = TrainConfig {
            lr: 0.002,
            ..train.clone()
        };
        assert_ne!(base, config_hash(&model, &train2, &spec, "corpus-a"));

        let spec2 = GridSpec {
            layers: vec![FusionLayer::Ef],
            ..spec.clone()
        };
        assert_ne!(base, config_hash(&model, &train, &spec2, "corpus-a"));

        assert_ne!(base, config_hash(&model, &train, &spec, "corpus-b"));
        assert_eq!(base, config_hash(&model, &train, &spec, "corpus-a"));
    }

    #[test]
    fn diverging_cells_are_marked_failed_not_dropped() {
        let split = toy_split(2, 1, 3, 4);
        let spec = GridSpec {
            layers: vec![FusionLayer::Lgf],
            methods: vec![FusionMethod::Add],
            losses: vec![LossMode::Single],
        };
        // an absurd rate overflows the l2 penalty on the second epoch
        let train = TrainConfig {
            lr: 1e200,
            epochs: 2,
            batch_size: 4,
            n_runs: 2,
            base_seed: 3,
            ..TrainConfig::default()
        };
        let opts = tiny_opts(spec, train);
        let outcome = run_grid(&split, &opts).unwrap();
        let row = &outcome.report.rows[0];
        assert_eq!(row.n_runs, 0);
        assert_eq!(row.failed_runs, 2);
        assert_eq!(row.mean_wa, None);
        assert_eq!(outcome.fully_failed_cells(), vec!["lgf_add_single"]);
        for (_, msg) in &outcome.cells[0].aggregate.failures {
            assert!(msg.contains("non-finite"), "{msg}");
        }
    }

    #[test]
    fn unimodal_baselines_use_single_loss_and_right_towers() {
        let split = toy_split(3, 1, 3, 6);
        let base = tiny_config(FusionLayer::Lgf, FusionMethod::Add, LossMode::Perspective);
        let cells = run_unimodal_baselines(&split, &base, &quick_cfg(2)).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].key.fusion_layer, FusionLayer::NoneAudio);
        assert_eq!(cells[1].key.fusion_layer, FusionLayer::NoneText);
        for c in &cells {
            assert_eq!(c.key.loss_mode, LossMode::Single);
            assert_eq!(c.aggregate.n_runs, 2);
        }
        assert!(run_unimodal_baseline(&split, &base, &quick_cfg(1), FusionLayer::Lgf).is_err());
    }

    #[test]
    fn synthetic_corpus_id_is_spec_determined() {
        let spec = SyntheticSpec {
            n_dialogues: 12,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let a = corpus_id_for_synthetic(&spec);
        let b = corpus_id_for_synthetic(&spec);
        assert_eq!(a, b);
        assert!(a.starts_with("synthetic-n12-seed5:"));
        let other = SyntheticSpec {
            class_separation: 1.0,
            ..spec
        };
        assert_ne!(a, corpus_id_for_synthetic(&other));
    }
}
