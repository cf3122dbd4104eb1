use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facemine::config::RunConfig;
use facemine::datasets::{annotation_path, generate_synthetic, list_images, load_records};
use facemine::evaluate::{evaluate_dataset, ground_truth_set, per_image_ap, per_image_csv, pr_curve_csv, summary_csv};
use facemine::inference::{detect_images, detections_text, parse_detections};
use facemine::trainer::{load_model, train};
use facemine::Error;
use failure::Failure;

#[derive(Parser)]
#[command(
    name = "facemine",
    version,
    about = "Single-level small face detector with hard image mining"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic face dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Annotation file, or a directory holding `annotations.txt`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable hard image mining.
        #[arg(long)]
        no_him: bool,
        /// Continue from a checkpoint of an earlier run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the top-level seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Detect faces with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset path, or a directory searched for `.ppm` files.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Inference settings; defaults to those stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a detection file against ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-image AP of a checkpoint over a dataset, sorted ascending.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

mod failure {
    use facemine::Error;

    /// An error tagged with the exit code it maps to.
    pub struct Failure {
        pub code: u8,
        pub msg: String,
    }

    impl From<Error> for Failure {
        fn from(e: Error) -> Self {
            let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
            Self {
                code,
                msg: e.to_string(),
            }
        }
    }

    impl From<std::io::Error> for Failure {
        fn from(e: std::io::Error) -> Self {
            Error::from(e).into()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::toy()),
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData {
            config,
            out,
            count,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let ds = generate_synthetic(&cfg.synth, count, &out)?;
            cfg.echo(&out)?;
            println!("{}", ds.manifest.display());
        }
        Cmd::Train {
            config,
            data,
            out,
            no_him,
            resume,
            seed,
            epochs,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if no_him {
                cfg.him.enabled = false;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let records = load_records(&annotation_path(&data))?;
            let (state, outputs) = train(&cfg, records, &out, resume.as_deref())?;
            println!(
                "trained {} epochs, {} steps, {} image visits; model at {}",
                state.epoch,
                state.step,
                state.total_visits(),
                outputs.model.display()
            );
        }
        Cmd::Infer {
            checkpoint,
            images,
            out,
            config,
        } => {
            let (model, mut cfg) = load_model(&checkpoint)?;
            if let Some(p) = config {
                cfg.infer = RunConfig::load(&p)?.infer;
            }
            let dets = detect_images(&model, &cfg.anchors, &list_images(&images)?, &cfg.infer)?;
            cfg.echo(&out)?;
            let path = out.join("detections.txt");
            fs::write(&path, detections_text(&dets))?;
            println!("{}", path.display());
        }
        Cmd::Eval { dets, gt, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let text = fs::read_to_string(&dets)?;
            let dets = parse_detections(&text, &dets)?;
            let records = load_records(&annotation_path(&gt))?;
            let results = evaluate_dataset(&ground_truth_set(&records), &dets, &cfg.eval)?;
            cfg.echo(&out)?;
            fs::write(out.join("summary.csv"), summary_csv(&results))?;
            for r in &results {
                fs::write(out.join(format!("pr_{}.csv", r.name)), pr_curve_csv(&r.curve))?;
                println!("{:<8} AP {:.4} ({} faces)", r.name, r.ap, r.num_gt);
            }
        }
        Cmd::Diagnose { checkpoint, data, out } => {
            let (model, cfg) = load_model(&checkpoint)?;
            let records = load_records(&annotation_path(&data))?;
            let images: Vec<(String, PathBuf)> = records.iter().map(|r| (r.id.clone(), r.path.clone())).collect();
            let dets = detect_images(&model, &cfg.anchors, &images, &cfg.infer)?;
            let rows: Vec<(String, f64)> = records
                .iter()
                .map(|r| (r.id.clone(), per_image_ap(&dets[&r.id], &r.ground_truth(), &cfg.eval)))
                .collect();
            cfg.echo(&out)?;
            let path = out.join("per_image_ap.csv");
            fs::write(&path, per_image_csv(&rows))?;
            fs::write(out.join("detections.txt"), detections_text(&dets))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
