//! Thin command-line front end over the library. Exit codes: 0 on
//! success, 2 for input or environment problems, 3 when the grid
//! finished but some cell failed on every seed.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fusion_bench::checkpoint::{load_checkpoint, save_checkpoint};
use fusion_bench::config_file::ConfigFile;
use fusion_bench::corpus::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use fusion_bench::corpus::{load_corpus, make_batches, save_corpus, split_by_session, CorpusSplit};
use fusion_bench::error::{Error, Result};
use fusion_bench::extract::{
    read_transcripts, run_audio_extractor, run_text_extractor, text_encoder_for,
    DEFAULT_OPENSMILE_CONFIG,
};
use fusion_bench::features::standardize_split;
use fusion_bench::grid::{
    cells_outcome, corpus_id_for_synthetic, corpus_id_from_files, run_grid_with,
    run_unimodal_baseline, GridOptions, GridSpec,
};
use fusion_bench::model::{FusionLayer, ModelConfig};
use fusion_bench::report::{
    builtin_references, compare_with_references, emotion_breakdown, load_grid_outcome,
    parse_references, render_breakdown_text, render_comparison_text, render_grid_text,
    write_grid_outputs,
};
use fusion_bench::train::TrainConfig;

#[derive(Parser)]
#[command(
    name = "fusion-bench",
    version,
    about = "Multimodal dialogue emotion recognition: fusion grid experiments over audio and text features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every requested (layer, method, loss) cell and write reports
    Grid(GridCmd),
    /// Train a single-modality baseline
    Unimodal(UnimodalCmd),
    /// Per-emotion accuracy of a saved checkpoint, per prediction branch
    Breakdown(BreakdownCmd),
    /// Rank grid results against reported reference systems
    Compare(CompareCmd),
    /// Generate a synthetic corpus (manifest plus feature matrices)
    Synth(SynthCmd),
    /// Run an external audio feature extractor over wav files
    ExtractAudio(ExtractAudioCmd),
    /// Encode transcripts into pooled text features
    ExtractText(ExtractTextCmd),
}

#[derive(Args)]
struct CorpusArgs {
    /// Corpus manifest (JSON lines)
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding audio.fbm and text.fbm
    #[arg(long)]
    features_dir: PathBuf,
    /// Comma-separated training sessions; every other session is test
    #[arg(long, default_value = "1,2,3,4")]
    train_sessions: String,
    /// Skip audio z-standardization
    #[arg(long)]
    no_standardize: bool,
}

impl CorpusArgs {
    fn load_split(&self) -> Result<CorpusSplit> {
        let dialogues = load_corpus(&self.manifest, &self.features_dir)?;
        let mut train_sessions = BTreeSet::new();
        for part in self.train_sessions.split(',').filter(|p| !p.trim().is_empty()) {
            let s: u8 = part.trim().parse().map_err(|_| {
                Error::Config(format!("bad session number {part:?} in --train-sessions"))
            })?;
            train_sessions.insert(s);
        }
        let test_sessions: BTreeSet<u8> = dialogues
            .iter()
            .map(|d| d.session)
            .filter(|s| !train_sessions.contains(s))
            .collect();
        let mut split = split_by_session(dialogues, &test_sessions)?;
        if !self.no_standardize {
            standardize_split(&mut split)?;
        }
        Ok(split)
    }

    fn corpus_id(&self) -> Result<String> {
        corpus_id_from_files(&self.manifest, &self.features_dir)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Optional key=value config file; explicit flags win over it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeated runs per cell
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dialogues per batch
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    l2_weight: Option<f64>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<(TrainConfig, ModelConfig)> {
        let mut train = TrainConfig::default();
        let mut model = ModelConfig::default();
        if let Some(path) = &self.config {
            let file = ConfigFile::load(path)?;
            file.check_known_keys()?;
            train = file.apply_train(&train)?;
            model = file.apply_model(&model)?;
        }
        if let Some(v) = self.runs {
            train.n_runs = v;
        }
        if let Some(v) = self.base_seed {
            train.base_seed = v;
        }
        if let Some(v) = self.epochs {
            train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = self.lr {
            train.lr = v;
        }
        if let Some(v) = self.lr_decay {
            train.lr_decay = v;
        }
        if let Some(v) = self.dropout {
            train.dropout_p = v;
        }
        if let Some(v) = self.l2_weight {
            train.l2_weight = v;
        }
        train.validate()?;
        Ok((train, model))
    }
}

#[derive(Args)]
struct GridCmd {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Fusion layers, comma separated (ef, mf, lf, lgf)
    #[arg(long, default_value = "ef,mf,lf,lgf")]
    layers: String,
    /// Fusion methods, comma separated (add, concat, at)
    #[arg(long, default_value = "add,concat,at")]
    methods: String,
    /// Loss modes, comma separated (single, perspective)
    #[arg(long, default_value = "single,perspective")]
    losses: String,
    #[command(flatten)]
    train: TrainArgs,
    /// Output directory for reports, run archive, and logs
    #[arg(long)]
    out: PathBuf,
    /// Grid cells processed concurrently (capped by FUSION_BENCH_THREADS)
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Save an FBCKPT1 checkpoint per run under out/checkpoints
    #[arg(long)]
    save_checkpoints: bool,
}

#[derive(Args)]
struct UnimodalCmd {
    /// audio or text
    #[arg(long)]
    modality: String,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Output directory for the report and run archive
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BreakdownCmd {
    /// FBCKPT1 checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Which side of the session split to evaluate (test or train)
    #[arg(long, default_value = "test")]
    split: String,
    /// Dialogues per evaluation batch
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    /// Also write the table to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareCmd {
    /// Run archive (runs.json) written by the grid command
    #[arg(long)]
    grid_report: PathBuf,
    /// Reference table (name,wa CSV); bundled constants by default
    #[arg(long)]
    references: Option<PathBuf>,
    /// Also write the table to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long)]
    n_dialogues: usize,
    /// Distance between class feature centers in both modalities
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    /// Override the audio-side separation
    #[arg(long)]
    audio_separation: Option<f64>,
    /// Override the text-side separation
    #[arg(long)]
    text_separation: Option<f64>,
    #[arg(long, default_value_t = 4)]
    len_min: usize,
    #[arg(long, default_value_t = 10)]
    len_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving manifest.jsonl, audio.fbm, and text.fbm
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractAudioCmd {
    /// Directory of <utt_id>.wav files
    #[arg(long)]
    wav_dir: PathBuf,
    /// Output feature matrix (FBM1)
    #[arg(long)]
    out: PathBuf,
    /// Extractor binary to invoke per wav file
    #[arg(long)]
    opensmile_bin: PathBuf,
    /// Extractor config name
    #[arg(long, default_value = DEFAULT_OPENSMILE_CONFIG)]
    config: String,
    /// Corpus manifest fixing row order; sorted utterance ids otherwise
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractTextCmd {
    /// Transcript manifest: one utt_id<TAB>text row per utterance
    #[arg(long)]
    manifest: PathBuf,
    /// Output feature matrix (FBM1)
    #[arg(long)]
    out: PathBuf,
    /// Encoder adapter: "hash" or "cmd:<path>"
    #[arg(long, default_value = "hash")]
    adapter: String,
}

fn parse_list<T: std::str::FromStr<Err = Error>>(raw: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<T> = raw
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty {what} list")));
    }
    Ok(items)
}

/// FUSION_BENCH_THREADS sizes the worker pool and caps cell parallelism.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("FUSION_BENCH_THREADS") {
        Err(_) => Ok(None),
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                Error::Config(format!(
                    "FUSION_BENCH_THREADS must be a positive integer, got {raw:?}"
                ))
            })?;
            if n == 0 {
                return Err(Error::Config(
                    "FUSION_BENCH_THREADS must be a positive integer".into(),
                ));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Environment(format!("thread pool: {e}")))?;
            Ok(Some(n))
        }
    }
}

fn cmd_grid(args: GridCmd, cap: Option<usize>) -> Result<i32> {
    let (train, model) = args.train.resolve()?;
    let spec = GridSpec {
        layers: parse_list(&args.layers, "layer")?,
        methods: parse_list(&args.methods, "method")?,
        losses: parse_list(&args.losses, "loss")?,
    };
    spec.validate()?;
    let corpus_id = args.corpus.corpus_id()?;
    let split = args.corpus.load_split()?;
    let opts = GridOptions {
        spec,
        model,
        train,
        corpus_id,
        parallel_cells: args.parallel.min(cap.unwrap_or(usize::MAX)).max(1),
    };

    fs::create_dir_all(&args.out)?;
    let ckpt_dir = args.out.join("checkpoints");
    if args.save_checkpoints {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let outcome = run_grid_with(&split, &opts, |key, _, model, run| {
        if args.save_checkpoints {
            let name = format!("{}_seed{}.ckpt", key.slug(), run.seed);
            save_checkpoint(&ckpt_dir.join(name), model)?;
        }
        Ok(())
    })?;
    let paths = write_grid_outputs(&args.out, &outcome)?;
    print!("{}", render_grid_text(&outcome.report));
    println!("\nreports: {} and {}", paths.csv.display(), paths.text.display());
    println!("run archive: {}", paths.runs.display());

    let failed = outcome.fully_failed_cells();
    if !failed.is_empty() {
        eprintln!(
            "warning: {} cell(s) failed on every seed: {}",
            failed.len(),
            failed.join(", ")
        );
        return Ok(3);
    }
    Ok(0)
}

fn cmd_unimodal(args: UnimodalCmd) -> Result<i32> {
    let layer: FusionLayer = args.modality.parse()?;
    if !layer.is_unimodal() {
        return Err(Error::Config(format!(
            "--modality must be audio or text, got {:?}",
            args.modality
        )));
    }
    let (train, model) = args.train.resolve()?;
    let corpus_id = args.corpus.corpus_id()?;
    let split = args.corpus.load_split()?;
    let cell = run_unimodal_baseline(&split, &model, &train, layer)?;
    let outcome = cells_outcome(vec![cell], &model, &train, &corpus_id);

    fs::create_dir_all(&args.out)?;
    let paths = write_grid_outputs(&args.out, &outcome)?;
    print!("{}", render_grid_text(&outcome.report));
    println!("\nreports: {} and {}", paths.csv.display(), paths.text.display());
    if !outcome.fully_failed_cells().is_empty() {
        eprintln!("warning: every run failed");
        return Ok(3);
    }
    Ok(0)
}

fn cmd_breakdown(args: BreakdownCmd) -> Result<i32> {
    let model = load_checkpoint(&args.checkpoint)?;
    let split = args.corpus.load_split()?;
    let dialogues = match args.split.as_str() {
        "test" => &split.test,
        "train" => &split.train,
        other => {
            return Err(Error::Config(format!(
                "--split must be test or train, got {other:?}"
            )))
        }
    };
    let batches = make_batches(dialogues, args.batch_size, None)?;
    let rows = emotion_breakdown(&model, &batches)?;
    let text = render_breakdown_text(&rows);
    print!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, &text)?;
    }
    Ok(0)
}

fn cmd_compare(args: CompareCmd) -> Result<i32> {
    let outcome = load_grid_outcome(&args.grid_report)?;
    let references = match &args.references {
        Some(path) => {
            let body = fs::read_to_string(path).map_err(|e| Error::Ingest {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            parse_references(&body)?
        }
        None => builtin_references(),
    };
    let table = compare_with_references(&outcome, &references)?;
    let text = render_comparison_text(&table);
    print!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, &text)?;
    }
    Ok(0)
}

fn cmd_synth(args: SynthCmd) -> Result<i32> {
    let spec = SyntheticSpec {
        n_dialogues: args.n_dialogues,
        len_range: (args.len_min, args.len_max),
        class_separation: args.separation,
        audio_separation: args.audio_separation,
        text_separation: args.text_separation,
        seed: args.seed,
    };
    let dialogues = generate_synthetic_corpus(&spec)?;
    fs::create_dir_all(&args.out)?;
    let manifest = save_corpus(&dialogues, &args.out)?;
    let n_utts: usize = dialogues.iter().map(|d| d.utterances.len()).sum();
    println!(
        "wrote {} dialogues ({} utterances) under {}",
        dialogues.len(),
        n_utts,
        args.out.display()
    );
    println!("manifest: {}", manifest.display());
    println!("corpus id: {}", corpus_id_for_synthetic(&spec));
    Ok(0)
}

fn cmd_extract_audio(args: ExtractAudioCmd) -> Result<i32> {
    let out = run_audio_extractor(
        &args.wav_dir,
        &args.out,
        &args.opensmile_bin,
        &args.config,
        args.manifest.as_deref(),
    )?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_extract_text(args: ExtractTextCmd) -> Result<i32> {
    let transcripts = read_transcripts(&args.manifest)?;
    let encoder = text_encoder_for(&args.adapter)?;
    let out = run_text_extractor(&transcripts, &args.out, encoder.as_ref())?;
    println!("wrote {} rows to {}", transcripts.len(), out.display());
    Ok(0)
}

fn run(cli: Cli) -> Result<i32> {
    let cap = thread_cap()?;
    match cli.command {
        Command::Grid(args) => cmd_grid(args, cap),
        Command::Unimodal(args) => cmd_unimodal(args),
        Command::Breakdown(args) => cmd_breakdown(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Synth(args) => cmd_synth(args),
        Command::ExtractAudio(args) => cmd_extract_audio(args),
        Command::ExtractText(args) => cmd_extract_text(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
