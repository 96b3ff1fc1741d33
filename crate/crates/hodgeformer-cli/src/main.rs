//! Command-line tools around the hodgeformer library: dataset generation,
//! mesh inspection, feature dumps, training, evaluation, prediction, random
//! mesh mutations, and a size-scaling benchmark.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad input (unparseable files,
//! invalid configs, unknown flags). With `--workers 1` every command is a
//! pure function of its inputs and seed: reruns write identical bytes.

mod bench;
mod runcfg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hodgeformer::autodiff::Scalar;
use hodgeformer::features;
use hodgeformer::mesh::incidence::IncidenceOperators;
use hodgeformer::mesh::{io, mutate, Mesh};
use hodgeformer::model::checkpoint::{self, LoadedCheckpoint};
use hodgeformer::model::config::{ModelConfig, Precision, TaskKind};
use hodgeformer::model::data::{self, Split};
use hodgeformer::model::eval::{self, EvalReport};
use hodgeformer::model::train::{train, TrainOptions};
use hodgeformer::model::{Dataset, Model, PreparedSample, SampleLabel};
use hodgeformer::nn::Element;
use hodgeformer::par;
use hodgeformer::{Error, Result};

use runcfg::ConfigArgs;

#[derive(Parser)]
#[command(
    name = "hodgeformer",
    version,
    about = "Mesh transformers with learned Hodge star attention",
    after_help = "Config precedence: built-in defaults, then --config / \
                  $HODGEFORMER_CONFIG, then flags. Run `train --help` for \
                  the full key list with defaults."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print element counts, Euler characteristic, and operator checks
    Inspect {
        /// Mesh file (.off or .obj)
        mesh: PathBuf,
    },
    /// Write a synthetic labeled dataset with a JSONL manifest
    GenData(GenDataArgs),
    /// Dump per-element geometric features as CSV
    Features(FeaturesArgs),
    /// Train a model on a manifest and write run artifacts
    Train(TrainArgs),
    /// Score a checkpoint against a manifest split
    Eval(EvalArgs),
    /// Predict labels for one mesh with a trained checkpoint
    Predict(PredictArgs),
    /// Apply a seeded random mutation and write the result with a record
    Mutate(MutateArgs),
    /// Time forward passes and peak allocations across mesh sizes
    Bench(bench::BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for meshes, labels, and manifest.jsonl
    #[arg(long)]
    out: PathBuf,
    /// Label layout: classification | segmentation
    #[arg(long, value_enum, default_value = "classification")]
    task: runcfg::TaskArg,
    /// Shape classes to draw from (1..=4: sphere, cube, torus, cylinder)
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Meshes per class
    #[arg(long = "per-class", default_value_t = 10)]
    per_class: usize,
    /// Resolution multiplier; 1 gives the smallest valid meshes
    #[arg(long, default_value_t = 1)]
    scale: u32,
    /// Random vertex deformation amplitude
    #[arg(long, default_value_t = 0.08)]
    deform: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Manifest split recorded for every entry: train | val | test
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Mesh file (.off or .obj)
    mesh: PathBuf,
    /// Element stream to dump: v | e | f
    #[arg(long, default_value = "v")]
    element: Element,
    /// Write CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSONL)
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for config.json, metrics.csv, report.json,
    /// best.ckpt, final.ckpt, stamp.json
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 1 guarantees deterministic byte-identical runs
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest (JSONL)
    #[arg(long)]
    manifest: PathBuf,
    /// Manifest split to score: train | val | test | all
    #[arg(long, value_enum, default_value = "test")]
    split: EvalSplitArg,
    /// Directory for eval_report.json and stamp.json
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for attention pattern sampling during scoring
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Mesh file (.off or .obj)
    mesh: PathBuf,
    /// Seed for attention pattern sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the prediction JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MutateArgs {
    /// Mesh file (.off or .obj)
    mesh: PathBuf,
    /// Output OFF path; the mutation record lands next to it as .json
    #[arg(long)]
    out: PathBuf,
    /// gaussian-noise | face-removal | patch-removal
    #[arg(long, value_enum)]
    kind: MutationKindArg,
    /// Noise scale as a fraction of the bounding-box diagonal
    /// (gaussian-noise)
    #[arg(long, default_value_t = 0.02)]
    lambda: f64,
    /// Per-face removal or patch-seed probability
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    /// Smallest BFS patch size (patch-removal)
    #[arg(long = "k-min", default_value_t = 2)]
    k_min: usize,
    /// Largest BFS patch size (patch-removal)
    #[arg(long = "k-max", default_value_t = 6)]
    k_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn to_split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum EvalSplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum MutationKindArg {
    GaussianNoise,
    FaceRemoval,
    PatchRemoval,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Inspect { mesh } => cmd_inspect(&mesh),
        Cmd::GenData(args) => cmd_gen_data(&args),
        Cmd::Features(args) => cmd_features(&args),
        Cmd::Train(args) => cmd_train(&args),
        Cmd::Eval(args) => cmd_eval(&args),
        Cmd::Predict(args) => cmd_predict(&args),
        Cmd::Mutate(args) => cmd_mutate(&args),
        Cmd::Bench(args) => bench::run(&args),
    }
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let mesh = io::load_mesh(path)?;
    let ops = IncidenceOperators::build(&mesh);
    println!(
        "V={} E={} F={} χ={} d1·d0=0: {}",
        mesh.n_vertices(),
        mesh.n_edges(),
        mesh.n_faces(),
        mesh.euler_characteristic(),
        if ops.d1_d0_is_zero() { "OK" } else { "FAIL" }
    );
    println!("boundary_edges={}", mesh.boundary_edge_count());
    let (lo, hi) = mesh.bounding_box();
    println!(
        "bbox=[{}, {}, {}]..[{}, {}, {}]",
        lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]
    );
    Ok(())
}

#[derive(Serialize)]
struct GenDataSettings {
    task: TaskKind,
    classes: usize,
    per_class: usize,
    scale: u32,
    deform: f64,
    split: Split,
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let task = match args.task {
        runcfg::TaskArg::Classification => TaskKind::Classification,
        runcfg::TaskArg::Segmentation => TaskKind::Segmentation,
    };
    let manifest = data::write_synthetic_dataset(
        &args.out,
        task,
        args.classes,
        args.per_class,
        args.scale,
        args.deform,
        args.seed,
        args.split.to_split(),
    )?;
    let settings = GenDataSettings {
        task,
        classes: args.classes,
        per_class: args.per_class,
        scale: args.scale,
        deform: args.deform,
        split: args.split.to_split(),
    };
    runcfg::write_stamp(&args.out, &settings, args.seed)?;
    println!(
        "wrote {} meshes and {}",
        args.classes * args.per_class,
        manifest.display()
    );
    Ok(())
}

fn cmd_features(args: &FeaturesArgs) -> Result<()> {
    let mesh = io::load_mesh(&args.mesh)?;
    let set = features::extract(&mesh)?;
    let (matrix, columns): (_, &[&str]) = match args.element {
        Element::Vertex => (&set.x_v, &features::VERTEX_COLUMNS),
        Element::Edge => (&set.x_e, &features::EDGE_COLUMNS),
        Element::Face => (&set.x_f, &features::FACE_COLUMNS),
    };
    let mut text = columns.join(",");
    text.push('\n');
    for r in 0..matrix.rows {
        let row: Vec<String> = matrix.row(r).iter().map(|v| format!("{v}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn take_split(dataset: Dataset, split: EvalSplitArg) -> Vec<PreparedSample> {
    match split {
        EvalSplitArg::Train => dataset.train,
        EvalSplitArg::Val => dataset.val,
        EvalSplitArg::Test => dataset.test,
        EvalSplitArg::All => {
            let mut all = dataset.train;
            all.extend(dataset.val);
            all.extend(dataset.test);
            all
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    par::configure_workers(args.workers);
    let dataset = data::load_dataset(&args.manifest, &cfg)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &dataset, args),
        Precision::F64 => train_typed::<f64>(cfg, &dataset, args),
    }
}

fn train_typed<T: Scalar>(cfg: ModelConfig, dataset: &Dataset, args: &TrainArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.json"), cfg.to_json())?;
    runcfg::write_stamp(&args.out, &cfg, cfg.seed)?;
    let mut model = Model::<T>::new(cfg)?;
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        workers: args.workers,
    };
    let report = train(&mut model, &dataset.train, &dataset.val, &opts)?;
    println!(
        "epochs={} train_acc={:.4} val_acc={:.4} best_val_acc={:.4} best_epoch={}",
        report.epochs_run,
        report.final_train_acc,
        report.final_val_acc,
        report.best_val_acc,
        report.best_epoch
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    par::configure_workers(args.workers);
    match loaded.config.precision {
        Precision::F32 => eval_typed::<f32>(&loaded, args),
        Precision::F64 => eval_typed::<f64>(&loaded, args),
    }
}

fn eval_typed<T: Scalar>(loaded: &LoadedCheckpoint, args: &EvalArgs) -> Result<()> {
    let (model, _) = checkpoint::restore::<T>(loaded)?;
    let dataset = data::load_dataset(&args.manifest, &model.config)?;
    let samples = take_split(dataset, args.split);
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "manifest {} has no samples in the requested split",
            args.manifest.display()
        )));
    }
    let report = eval::evaluate(&model, &samples, args.seed, args.workers);
    print_eval_summary(&report);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        fs::write(dir.join("eval_report.json"), text)?;
        runcfg::write_stamp(dir, &model.config, args.seed)?;
    }
    Ok(())
}

fn print_eval_summary(report: &EvalReport) {
    println!(
        "samples={} accuracy={:.4} mean_loss={:.6} correct={}/{}",
        report.num_samples, report.accuracy, report.mean_loss, report.correct, report.total
    );
}

#[derive(Serialize)]
struct Prediction {
    source: String,
    task: TaskKind,
    predictions: Vec<usize>,
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    match loaded.config.precision {
        Precision::F32 => predict_typed::<f32>(&loaded, args),
        Precision::F64 => predict_typed::<f64>(&loaded, args),
    }
}

fn predict_typed<T: Scalar>(loaded: &LoadedCheckpoint, args: &PredictArgs) -> Result<()> {
    let (model, _) = checkpoint::restore::<T>(loaded)?;
    let mesh = io::load_mesh(&args.mesh)?;
    // Placeholder label: predictions don't depend on it.
    let label = match model.config.task {
        TaskKind::Classification => SampleLabel::Class(0),
        TaskKind::Segmentation => SampleLabel::Faces(vec![0; mesh.n_faces()]),
    };
    let source = args.mesh.display().to_string();
    let sample = PreparedSample::new(mesh, label, &model.config, source.clone())?;
    let predictions = eval::predict(&model, &sample, args.seed);
    let out = Prediction {
        source,
        task: model.config.task,
        predictions,
    };
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_mutate(args: &MutateArgs) -> Result<()> {
    let mesh: Mesh = io::load_mesh(&args.mesh)?;
    let mutation = match args.kind {
        MutationKindArg::GaussianNoise => mutate::Mutation::GaussianNoise { lambda: args.lambda },
        MutationKindArg::FaceRemoval => mutate::Mutation::FaceRemoval { p: args.p },
        MutationKindArg::PatchRemoval => mutate::Mutation::PatchRemoval {
            p: args.p,
            k_min: args.k_min,
            k_max: args.k_max,
        },
    };
    let (mutated, record) = mutate::apply(&mesh, &mutation, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    io::write_off(&mutated, &args.out)?;
    let sidecar = args.out.with_extension("json");
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    fs::write(&sidecar, text)?;
    println!(
        "wrote {} ({} -> {} faces) and {}",
        args.out.display(),
        mesh.n_faces(),
        mutated.n_faces(),
        sidecar.display()
    );
    Ok(())
}
