//! Command-line front end: theory verification, loss-curve sweeps, training
//! runs, standalone calibration, and synthetic data generation.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jaccard::harness::{
    generate_synthetic, loss_curve, parse_curve_losses, read_ptf_file, train, write_curve_csv,
    write_outputs, write_ptf_file, DatasetSpec, ExperimentConfig, Technique,
};
use jaccard::labels::{boundary_mask, LabelMap};
use jaccard::metrics::{calibration_error, write_bins_csv, CalibrationKind, DEFAULT_BINS};
use jaccard::theory::{run_suite, SuiteConfig};

#[derive(Parser)]
#[command(name = "jaccard", about = "Soft-label IoU losses: verification, training, metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the theory verification battery and print a JSON report.
    Verify(VerifyArgs),
    /// Sweep one or more losses over x in [0, 1] for a fixed label value.
    Losscurve(LosscurveArgs),
    /// Train the desk-scale pixel classifier with a chosen technique.
    Train(TrainArgs),
    /// Compute calibration metrics for saved predictions.
    Calibrate(CalibrateArgs),
    /// Generate a synthetic dataset and write it as portable tensor files.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Samples per dimension for the metric-axiom checks.
    #[arg(long, default_value_t = 100_000)]
    axiom_samples: usize,
    #[arg(long, default_value_t = 8)]
    max_dim: usize,
    #[arg(long, default_value_t = 10_000)]
    equivalence_samples: usize,
    #[arg(long, default_value_t = 100_000)]
    ordering_samples: usize,
    #[arg(long, default_value_t = 10_000)]
    triangle_samples: usize,
    #[arg(long, default_value_t = 1_000)]
    sign_samples: usize,
    #[arg(long, default_value_t = 100)]
    fd_points: usize,
    #[arg(long, default_value_t = 1_000)]
    closure_pairs: usize,
    /// Also write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LosscurveArgs {
    /// Loss name or comma-separated list (e.g. `jml1` or `jml1,jml2`).
    #[arg(long)]
    loss: String,
    /// Label value.
    #[arg(long)]
    y: f64,
    /// Grid size.
    #[arg(long, default_value_t = 201)]
    n: usize,
    /// Output CSV path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON experiment config; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for history, reports and prediction dumps.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's technique.
    #[arg(long, value_enum)]
    technique: Option<TechniqueArg>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TechniqueArg {
    Supervised,
    LabelSmoothing,
    BoundaryLabelSmoothing,
    KnowledgeDistillation,
    SemiSupervised,
}

impl From<TechniqueArg> for Technique {
    fn from(value: TechniqueArg) -> Self {
        match value {
            TechniqueArg::Supervised => Technique::Supervised,
            TechniqueArg::LabelSmoothing => Technique::LabelSmoothing,
            TechniqueArg::BoundaryLabelSmoothing => Technique::BoundaryLabelSmoothing,
            TechniqueArg::KnowledgeDistillation => Technique::KnowledgeDistillation,
            TechniqueArg::SemiSupervised => Technique::SemiSupervised,
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Predictions: PTF tensor shaped (C, H, W).
    #[arg(long)]
    pred: PathBuf,
    /// True labels: PTF tensor shaped (H, W) of class indices.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Boundary kernel for BECE/BSCE.
    #[arg(long, default_value_t = 3)]
    boundary_k: usize,
    /// Directory for reliability-bin CSV exports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON dataset spec; defaults apply for missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Verify(args) => {
            let cfg = SuiteConfig {
                seed: args.seed,
                max_dim: args.max_dim,
                axiom_samples: args.axiom_samples,
                axiom_tolerance: 1e-9,
                equivalence_samples: args.equivalence_samples,
                ordering_samples: args.ordering_samples,
                triangle_samples: args.triangle_samples,
                sign_samples: args.sign_samples,
                fd_points: args.fd_points,
                closure_pairs: args.closure_pairs,
            };
            let report = run_suite(&cfg)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(path) = args.out {
                fs::write(path, format!("{json}\n"))?;
            }
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Losscurve(args) => {
            let losses = parse_curve_losses(&args.loss)?;
            let table = loss_curve(&losses, args.y, args.n)?;
            match args.out {
                Some(path) => {
                    let mut buf = Vec::new();
                    write_curve_csv(&mut buf, &table)?;
                    fs::write(path, buf)?;
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    write_curve_csv(&mut stdout, &table)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let mut cfg: ExperimentConfig = match &args.config {
                Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(technique) = args.technique {
                cfg.technique = technique.into();
            }
            let outcome = train(&cfg)?;
            write_outputs(&outcome, &args.out_dir)?;
            let m = &outcome.report.final_metrics;
            println!(
                "final: acc={:.4} miou_dataset={:.4} miou_image={:.4} ece={:.4} bece={:.4}",
                m.accuracy, m.miou_dataset, m.miou_image, m.ece, m.bece
            );
            println!("artifacts written to {}", args.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate(args) => {
            let probs = read_ptf_file(&args.pred)?;
            let labels_tensor = read_ptf_file(&args.labels)?;
            if labels_tensor.shape().len() != 2 {
                return Err(
                    format!("labels must be (H, W), got {:?}", labels_tensor.shape()).into()
                );
            }
            let (h, w) = (labels_tensor.shape()[0], labels_tensor.shape()[1]);
            let data: Vec<u32> = labels_tensor.data().iter().map(|&v| v as u32).collect();
            let truth = LabelMap::new(h, w, data, None)?;
            let boundary = boundary_mask(&truth, args.boundary_k)?;

            let ece = calibration_error(&probs, &truth, args.bins, CalibrationKind::Ece, None)?;
            let sce = calibration_error(&probs, &truth, args.bins, CalibrationKind::Sce, None)?;
            let bece = calibration_error(
                &probs,
                &truth,
                args.bins,
                CalibrationKind::Ece,
                Some(&boundary),
            )?;
            let bsce = calibration_error(
                &probs,
                &truth,
                args.bins,
                CalibrationKind::Sce,
                Some(&boundary),
            )?;
            println!("ece={}", ece.value);
            println!("sce={}", sce.value);
            println!("bece={}", bece.value);
            println!("bsce={}", bsce.value);
            if let Some(dir) = args.out_dir {
                fs::create_dir_all(&dir)?;
                for (name, report) in
                    [("ece", &ece), ("sce", &sce), ("bece", &bece), ("bsce", &bsce)]
                {
                    let mut buf = Vec::new();
                    write_bins_csv(&mut buf, &report.bins)?;
                    fs::write(dir.join(format!("reliability_{name}.csv")), buf)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData(args) => {
            let spec: DatasetSpec = match &args.spec {
                Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
                None => DatasetSpec::default(),
            };
            let dataset = generate_synthetic(&spec, args.seed)?;
            for (split, images) in [("train", &dataset.train), ("val", &dataset.val)] {
                let dir = args.out_dir.join(split);
                fs::create_dir_all(&dir)?;
                for (i, image) in images.iter().enumerate() {
                    write_ptf_file(dir.join(format!("img_{i:03}.ptf")), &image.channels)?;
                    let labels: Vec<f64> =
                        image.labels.data().iter().map(|&c| c as f64).collect();
                    let tensor = jaccard::autodiff::Tensor::new(
                        vec![image.labels.height(), image.labels.width()],
                        labels,
                    )?;
                    write_ptf_file(dir.join(format!("lab_{i:03}.ptf")), &tensor)?;
                }
            }
            fs::write(
                args.out_dir.join("spec.json"),
                format!("{}\n", serde_json::to_string_pretty(&spec)?),
            )?;
            println!(
                "wrote {} train and {} val images to {}",
                dataset.train.len(),
                dataset.val.len(),
                args.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
