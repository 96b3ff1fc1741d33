//! Forward-pass timing and peak-allocation benchmark across mesh sizes.
//!
//! For each requested vertex count the command generates the sphere whose
//! subdivision level lands closest, then times three phases:
//!
//! * `forward`          — compute only: one forward pass on prebuilt
//!                        features and attention patterns,
//! * `forward_backward` — compute only, with the gradient pass
//!                        (`--backward`),
//! * `end_to_end`       — feature extraction, pattern sampling, and the
//!                        forward pass together.
//!
//! Each phase reports the median wall time of `--reps` runs after two
//! untimed warmups, plus the peak bytes held by the global allocator during
//! the timed runs. Sizes whose predicted peak exceeds the memory limit are
//! skipped with a note instead of crashing the run.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hodgeformer::autodiff::{Scalar, Tape};
use hodgeformer::mesh::generate::{self, ShapeKind, MAX_VERTICES};
use hodgeformer::model::config::{LayerConfig, LayerKind, ModelConfig, Precision};
use hodgeformer::model::{build_patterns, Model, PreparedSample, SampleLabel};
use hodgeformer::nn::Element;
use hodgeformer::Result;

use crate::runcfg::{write_stamp, PrecisionArg};

/// System allocator wrapper tracking live and peak bytes. Peak is relative
/// to the last [`reset_peak`], which lets each benchmark phase report its
/// own high-water mark within one process.
struct CountingAlloc;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn track_add(n: usize) {
    let cur = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(cur, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            track_add(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            track_add(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            track_add(new_size);
        }
        p
    }
}

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Target vertex counts, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096, 16384])]
    pub sizes: Vec<usize>,

    /// Latent width [default matches training: 256]
    #[arg(long, default_value_t = 256)]
    pub d: usize,

    /// MLP hidden width
    #[arg(long = "d-hidden", default_value_t = 512)]
    pub d_hidden: usize,

    /// Attention heads
    #[arg(long, default_value_t = 4)]
    pub heads: usize,

    /// Number of vertex-updating attention layers
    #[arg(long, default_value_t = 1)]
    pub layers: usize,

    /// Timed repetitions per phase (two untimed warmups come first)
    #[arg(long, default_value_t = 5)]
    pub reps: usize,

    /// Also time the combined forward+backward pass
    #[arg(long, default_value_t = false)]
    pub backward: bool,

    /// Scalar precision for the timed model
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: PrecisionArg,

    /// Skip sizes whose predicted peak allocation exceeds this many MiB
    /// [default: 80% of MemAvailable, else 4096]
    #[arg(long = "mem-limit-mb")]
    pub mem_limit_mb: Option<usize>,

    /// Write the CSV (and stamp.json) here in addition to stdout
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Seed for mesh generation and attention patterns
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct BenchSettings<'a> {
    sizes: &'a [usize],
    d: usize,
    d_hidden: usize,
    heads: usize,
    layers: usize,
    reps: usize,
    backward: bool,
    precision: &'a str,
}

/// Sphere subdivision level whose vertex count (10·4^r + 2) lands closest
/// to `n`, restricted to levels the generator accepts.
fn closest_sphere_resolution(n: usize) -> u32 {
    let mut best = 2u32;
    let mut best_err = usize::MAX;
    for r in 2..=8u32 {
        let n_v = 10usize * 4usize.pow(r) + 2;
        if n_v > MAX_VERTICES {
            break;
        }
        let err = n_v.abs_diff(n);
        if err < best_err {
            best_err = err;
            best = r;
        }
    }
    best
}

fn default_mem_limit_mb() -> usize {
    if let Ok(text) = std::fs::read_to_string("/proc/meminfo") {
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("MemAvailable:") {
                if let Some(kb) = rest.split_whitespace().next().and_then(|v| v.parse::<usize>().ok()) {
                    return kb * 8 / 10 / 1024;
                }
            }
        }
    }
    4096
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

struct PhaseResult {
    median_ms: f64,
    peak_bytes: usize,
}

/// Runs `work` with two warmups and `reps` timed repetitions; the peak is
/// measured across the timed repetitions only.
fn run_phase<F: FnMut()>(reps: usize, mut work: F) -> PhaseResult {
    for _ in 0..2 {
        work();
    }
    reset_peak();
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        work();
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    PhaseResult {
        median_ms: median_ms(times),
        peak_bytes: peak_bytes(),
    }
}

fn csv_row(
    rows: &mut Vec<String>,
    requested: usize,
    mesh: Option<&hodgeformer::mesh::Mesh>,
    phase: &str,
    result: Option<&PhaseResult>,
    reps: usize,
    note: &str,
) {
    let (n_v, n_e, n_f) = mesh
        .map(|m| (m.n_vertices(), m.n_edges(), m.n_faces()))
        .unwrap_or((0, 0, 0));
    let (ms, peak) = result
        .map(|r| (format!("{:.3}", r.median_ms), r.peak_bytes.to_string()))
        .unwrap_or_default();
    rows.push(format!(
        "{requested},{n_v},{n_e},{n_f},{phase},{ms},{reps},{peak},{note}"
    ));
}

fn bench_model_config(args: &BenchArgs) -> ModelConfig {
    ModelConfig {
        d: args.d,
        heads: args.heads,
        d_hidden: args.d_hidden,
        elements: vec![Element::Vertex, Element::Edge],
        layers: vec![
            LayerConfig {
                kind: LayerKind::Hodge,
                updates: vec![Element::Vertex],
            };
            args.layers
        ],
        num_classes: 3,
        dropout: 0.0,
        augment: false,
        precision: match args.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
        ..ModelConfig::default()
    }
}

pub fn run(args: &BenchArgs) -> Result<()> {
    match args.precision {
        PrecisionArg::F32 => run_typed::<f32>(args),
        PrecisionArg::F64 => run_typed::<f64>(args),
    }
}

fn run_typed<T: Scalar>(args: &BenchArgs) -> Result<()> {
    let cfg = bench_model_config(args);
    cfg.validate()?;
    let model = Model::<T>::new(cfg.clone())?;
    let limit_bytes = args.mem_limit_mb.unwrap_or_else(default_mem_limit_mb) * 1024 * 1024;
    let reps = args.reps.max(5);

    let mut rows = vec![
        "requested_n,n_v,n_e,n_f,phase,median_ms,reps,peak_bytes,note".to_string(),
    ];
    // (n_v, peak) of the largest completed size, for memory prediction.
    let mut last_scale: Option<(usize, usize)> = None;

    for &requested in &args.sizes {
        let resolution = closest_sphere_resolution(requested);
        let n_v = 10usize * 4usize.pow(resolution) + 2;
        if let Some((prev_n, prev_peak)) = last_scale {
            if n_v > prev_n {
                // Attention pattern storage grows ~n^1.5; everything else is
                // linear, so this is a conservative ceiling.
                let ratio = (n_v as f64 / prev_n as f64).powf(1.5);
                let predicted = (prev_peak as f64 * ratio) as usize;
                if predicted > limit_bytes {
                    let note = format!(
                        "skipped: predicted peak ~{} MiB exceeds limit {} MiB",
                        predicted / (1024 * 1024),
                        limit_bytes / (1024 * 1024)
                    );
                    csv_row(&mut rows, requested, None, "forward", None, reps, &note);
                    continue;
                }
            }
        }

        let mesh = generate::generate(ShapeKind::Sphere, resolution, args.seed, 0.0)?;
        let sample = PreparedSample::new(
            mesh,
            SampleLabel::Class(0),
            &cfg,
            format!("bench_{requested}"),
        )?;
        let patterns = build_patterns(&sample.adj, args.seed);
        let targets = model.targets(&sample);
        let weights = vec![1.0; cfg.num_classes];

        let forward = run_phase(reps, || {
            let mut tape = Tape::new();
            let b = model.store.bind(&mut tape, false);
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let logits = model.forward(
                &mut tape,
                &b,
                &sample,
                &sample.base_features,
                &patterns,
                false,
                &mut rng,
            );
            std::hint::black_box(tape.values(logits)[0]);
        });
        csv_row(
            &mut rows,
            requested,
            Some(&sample.mesh),
            "forward",
            Some(&forward),
            reps,
            "",
        );

        if args.backward {
            let grad = run_phase(reps, || {
                let mut tape = Tape::new();
                let b = model.store.bind(&mut tape, true);
                let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                let logits = model.forward(
                    &mut tape,
                    &b,
                    &sample,
                    &sample.base_features,
                    &patterns,
                    true,
                    &mut rng,
                );
                let loss = tape.cross_entropy(logits, &targets, &weights, 0.0);
                let grads = tape.backward_seeded(loss, T::one());
                std::hint::black_box(grads.get(logits).map(|g| g.len()));
            });
            csv_row(
                &mut rows,
                requested,
                Some(&sample.mesh),
                "forward_backward",
                Some(&grad),
                reps,
                "",
            );
        }

        let mesh_copy = sample.mesh.clone();
        let end_to_end = run_phase(reps, || {
            let s = PreparedSample::new(
                mesh_copy.clone(),
                SampleLabel::Class(0),
                &cfg,
                "bench".into(),
            )
            .expect("prepared once already");
            let p = build_patterns(&s.adj, args.seed);
            let mut tape = Tape::new();
            let b = model.store.bind(&mut tape, false);
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let logits =
                model.forward(&mut tape, &b, &s, &s.base_features, &p, false, &mut rng);
            std::hint::black_box(tape.values(logits)[0]);
        });
        csv_row(
            &mut rows,
            requested,
            Some(&sample.mesh),
            "end_to_end",
            Some(&end_to_end),
            reps,
            "",
        );

        let size_peak = forward.peak_bytes.max(end_to_end.peak_bytes);
        last_scale = Some((sample.mesh.n_vertices(), size_peak.max(1)));
    }

    let mut csv = rows.join("\n");
    csv.push('\n');
    print!("{csv}");
    if let Some(path) = &args.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &csv)?;
        let settings = BenchSettings {
            sizes: &args.sizes,
            d: args.d,
            d_hidden: args.d_hidden,
            heads: args.heads,
            layers: args.layers,
            reps,
            backward: args.backward,
            precision: match args.precision {
                PrecisionArg::F32 => "f32",
                PrecisionArg::F64 => "f64",
            },
        };
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
        write_stamp(dir.unwrap_or(std::path::Path::new(".")), &settings, args.seed)?;
    }
    Ok(())
}
