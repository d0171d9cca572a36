use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pneumoscan_core::Error;

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(name = "pneumoscan", version, about = "Chest X-ray infection segmentation and pneumonia classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the U-Net infection segmentation model.
    TrainSeg {
        #[arg(long)]
        manifest: PathBuf,
        /// `key = value` run configuration; task defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// History CSV path (default: next to the checkpoint).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train the pneumonia classifier, optionally from a segmentation encoder.
    TrainCls {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Segmentation checkpoint whose encoder initializes the classifier.
        #[arg(long)]
        encoder_from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Classify, segment infected images and write masks and overlays.
    Predict {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        image: Option<PathBuf>,
        #[arg(long, requires = "image")]
        lung_mask: Option<PathBuf>,
        /// Batch form: every record of the manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        cls: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// Metrics on the train and validation splits.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cls: PathBuf,
        #[arg(long)]
        seg: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Overrides the averaging stored in the checkpoint (macro, micro, weighted).
        #[arg(long)]
        averaging: Option<String>,
    },
    /// Grad-CAM heatmap overlay for one image.
    Gradcam {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        cls: PathBuf,
        /// `auto` (the predicted class) or a class index 0..2.
        #[arg(long, default_value = "auto")]
        class: String,
        #[arg(long, default_value = pneumoscan_core::explain::DEFAULT_TARGET_LAYER)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// 0 success, 2 usage or configuration, 3 numeric failure, 4 I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NumericAbort { .. } => 3,
                Error::Io { .. } | Error::Decode { .. } | Error::UnsupportedFormat(_) | Error::Checkpoint(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainSeg { manifest, config, out, history } => {
            commands::train_seg(&manifest, config.as_deref(), &out, history.as_deref())
        }
        Command::TrainCls { manifest, config, encoder_from, out, history } => {
            commands::train_cls(&manifest, config.as_deref(), encoder_from.as_deref(), &out, history.as_deref())
        }
        Command::Predict { image, lung_mask, manifest, cls, seg, out, threshold } => commands::predict(
            commands::PredictInput::new(image, lung_mask, manifest),
            &cls,
            &seg,
            &out,
            threshold,
        ),
        Command::Eval { manifest, cls, seg, report, averaging } => {
            commands::eval(&manifest, &cls, seg.as_deref(), &report, averaging.as_deref())
        }
        Command::Gradcam { image, cls, class, layer, out } => commands::gradcam(&image, &cls, &class, &layer, &out),
        Command::Synth { n, side, seed, out } => commands::synth(n, side, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
