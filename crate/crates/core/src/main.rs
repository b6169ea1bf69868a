use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use partparse::dataset::{self, NegativeKind, SynthConfig};
use partparse::evalbench::{self, InstanceKind};
use partparse::featurestack::FeatureStack;
use partparse::inference::{self, ParseDocument, DEFAULT_EXACT_CAP};
use partparse::paramlearn::{self, Solver, TrainConfig, TrainManifest};
use partparse::shapemodel::{deserialize_model, serialize_model, LandmarkCounts, WeightVector};
use partparse::structlearn::{self, AnnotationFile, StructureConfig};
use partparse::{Error, Result};

#[derive(Parser)]
#[command(name = "partparse", version, about = "Parse part-based shapes with mixtures of compositional trees")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write rectangle-animal template annotations.
    Templates {
        /// Image side in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render instances of a model into a dataset directory.
    Synth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Negative stacks added to the training manifest.
        #[arg(long, default_value_t = 0)]
        negatives: usize,
        #[arg(long, value_enum, default_value_t = NegativeArg::Clutter)]
        negative_kind: NegativeArg,
    },
    /// Cluster annotations and build one compositional tree per cluster.
    LearnStructure {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "head=8,neck=8,torso=16")]
        landmarks: String,
        #[arg(long, default_value_t = 160)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Odd side of the appearance window.
        #[arg(long, default_value_t = 3)]
        square_side: usize,
        /// Appearance channels of the stacks the model will see.
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn the weight vector by latent SVM.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = paramlearn::DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = paramlearn::DEFAULT_INNER_ITERATIONS)]
        inner_iterations: usize,
        #[arg(long, value_enum, default_value_t = SolverArg::DualCoordinate)]
        solver: SolverArg,
        /// Lower bound on both deformation weights.
        #[arg(long, default_value_t = paramlearn::DEFAULT_MIN_DEFORMATION)]
        min_deformation: f64,
        #[arg(long)]
        out: PathBuf,
        /// Optional training report (per-round objective, trace, accuracy).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Parse one feature stack.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Portable pixmap with the parsed contours over the edge map.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Score a dataset directory against its ground truth.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Aligned plain-text table.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Approximation-error or complexity measurements.
    Bench {
        #[arg(long, value_enum)]
        mode: BenchMode,
        #[arg(long, default_value_t = 12)]
        grid: usize,
        #[arg(long, default_value_t = 3)]
        tree_levels: u32,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instance families for approx-error (comma separated).
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [KindArg::Noise, KindArg::SmoothWells, KindArg::PixelWells, KindArg::Rendered])]
        kinds: Vec<KindArg>,
        #[arg(long, value_delimiter = ',', default_values_t = [40usize, 80, 160, 320])]
        approx_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 12, 16, 20, 24])]
        exact_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Report file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Approximate against exact parses on random instances.
    OracleCheck {
        #[arg(long, default_value_t = 12)]
        grid: usize,
        #[arg(long, default_value_t = 3)]
        tree_levels: u32,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = KindArg::Noise)]
        kind: KindArg,
        /// Report file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NegativeArg {
    Noise,
    Clutter,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    DualCoordinate,
    Subgradient,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    ApproxError,
    Complexity,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Noise,
    SmoothWells,
    PixelWells,
    Rendered,
}

impl From<KindArg> for InstanceKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Noise => InstanceKind::Noise,
            KindArg::SmoothWells => InstanceKind::SmoothWells,
            KindArg::PixelWells => InstanceKind::PixelWells,
            KindArg::Rendered => InstanceKind::Rendered,
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_model(path: &Path) -> Result<(partparse::shapemodel::MixtureModel, WeightVector)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    deserialize_model(&text).map_err(|e| match e {
        Error::Schema { location, message, .. } => Error::Schema {
            what: path.display().to_string(),
            location,
            message,
        },
        Error::Parse { location, message, .. } => Error::Parse {
            what: path.display().to_string(),
            location,
            message,
        },
        other => other,
    })
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct EvalDocument {
    mixture_map: Vec<usize>,
    report: evalbench::EvalReport,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct GapDocument {
    grid: usize,
    tree_levels: u32,
    seed: u64,
    kind: InstanceKind,
    report: evalbench::ApproxErrorReport,
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Templates { size, out } => {
            if size < 16 {
                return Err(Error::invalid(format!("template size {size} is below 16")));
            }
            write(&out, to_json(&AnnotationFile { images: dataset::templates(size) })?)
        }
        Command::Synth {
            model,
            count,
            noise,
            seed,
            out,
            negatives,
            negative_kind,
        } => {
            let (model, _) = read_model(&model)?;
            let cfg = SynthConfig {
                count,
                noise,
                seed,
                negatives,
                negative_kind: match negative_kind {
                    NegativeArg::Noise => NegativeKind::Noise,
                    NegativeArg::Clutter => NegativeKind::Clutter,
                },
            };
            dataset::write_dataset(&out, &dataset::synth_dataset(&model, &cfg)?)
        }
        Command::LearnStructure {
            annotations,
            k,
            landmarks,
            grid,
            seed,
            square_side,
            channels,
            out,
        } => {
            let file = AnnotationFile::read(&annotations)?;
            let cfg = StructureConfig {
                k,
                counts: LandmarkCounts::parse(&landmarks)?,
                grid_size: grid,
                square_side,
                channels,
                seed,
            };
            let learned = structlearn::learn_structure(&file.images, &cfg)?;
            write(&out, serialize_model(&learned.model, &WeightVector::initial(channels))?)
        }
        Command::Train {
            model,
            manifest,
            c,
            epochs,
            seed,
            inner_iterations,
            solver,
            min_deformation,
            out,
            report,
        } => {
            let (model, _) = read_model(&model)?;
            let (m, base) = TrainManifest::read(&manifest)?;
            let examples = m.load_examples(&base)?;
            if !(min_deformation >= 0.0) {
                return Err(Error::invalid(format!("min-deformation {min_deformation} must be non-negative")));
            }
            let mut cfg = TrainConfig::new(model.channels, c, epochs, seed);
            cfg.inner_iterations = inner_iterations;
            cfg.min_deformation = min_deformation;
            cfg.initial.w_def = cfg.initial.w_def.map(|v| v.max(min_deformation));
            cfg.solver = match solver {
                SolverArg::DualCoordinate => Solver::DualCoordinate,
                SolverArg::Subgradient => Solver::Subgradient,
            };
            let rep = paramlearn::train_latent_svm(&model, &examples, &cfg)?;
            if rep.degenerate {
                eprintln!("warning: every training example has the same label");
            }
            write(&out, serialize_model(&model, &rep.weights)?)?;
            match report {
                Some(p) => write(&p, to_json(&rep)?),
                None => Ok(()),
            }
        }
        Command::Infer {
            model,
            stack,
            out,
            overlay,
        } => {
            let (model, weights) = read_model(&model)?;
            let original = FeatureStack::load(&stack)?;
            let (w, h) = (original.width(), original.height());
            let side = w.max(h) as f64;
            let tw = ((w as f64 * model.grid_size as f64 / side).round() as usize).max(1);
            let th = ((h as f64 * model.grid_size as f64 / side).round() as usize).max(1);
            let working = if (tw, th) == (w, h) { original.clone() } else { original.resized(tw, th) };
            let r = inference::parse(&model, &working, &weights)?;
            let doc = ParseDocument::from_result(&r, [w as f64 / tw as f64, h as f64 / th as f64])?;
            write(&out, to_json(&doc)?)?;
            if let Some(p) = overlay {
                write(&p, evalbench::overlay_ppm(&original, &doc.parts, &[]))?;
            }
            Ok(())
        }
        Command::Eval {
            model,
            dataset: dir,
            out,
            text,
        } => {
            let (model, weights) = read_model(&model)?;
            let data = dataset::load_dataset(&dir)?;
            let truths: Vec<_> = data.iter().map(|(_, t)| t.clone()).collect();
            let map = evalbench::mixture_correspondence(&model, &truths)?;
            let report = evalbench::eval_dataset(&model, &weights, &data, Some(&map))?;
            if let Some(p) = text {
                write(&p, report.to_text())?;
            }
            write(&out, to_json(&EvalDocument { mixture_map: map, report })?)
        }
        Command::Bench {
            mode,
            grid,
            tree_levels,
            instances,
            seed,
            kinds,
            approx_sizes,
            exact_sizes,
            repetitions,
            out,
        } => match mode {
            BenchMode::ApproxError => {
                let docs = kinds
                    .into_iter()
                    .map(|k| {
                        let kind = InstanceKind::from(k);
                        Ok(GapDocument {
                            grid,
                            tree_levels,
                            seed,
                            kind,
                            report: evalbench::random_gap_report(grid, tree_levels, instances, seed, kind)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                emit(out.as_deref(), &to_json(&docs)?)
            }
            BenchMode::Complexity => {
                let r = evalbench::complexity_bench(&approx_sizes, &exact_sizes, tree_levels, repetitions, seed)?;
                emit(out.as_deref(), &to_json(&r)?)
            }
        },
        Command::OracleCheck {
            grid,
            tree_levels,
            instances,
            seed,
            kind,
            out,
        } => {
            let kind = InstanceKind::from(kind);
            if grid * grid > DEFAULT_EXACT_CAP {
                return Err(Error::CapExceeded {
                    size: grid * grid,
                    cap: DEFAULT_EXACT_CAP,
                });
            }
            let report = evalbench::random_gap_report(grid, tree_levels, instances, seed, kind)?;
            emit(
                out.as_deref(),
                &to_json(&GapDocument {
                    grid,
                    tree_levels,
                    seed,
                    kind,
                    report,
                })?,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
