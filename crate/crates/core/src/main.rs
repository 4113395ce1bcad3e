use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semcom::config::{ConfigError, RunConfig};
use semcom::pipeline::{self, Aggregate, PipelineError};
use semcom::segmap::SegMap;
use semcom::wire::{encode_frame, measure_compression};

const EXIT_OTHER: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 3;
const EXIT_MISSING_WEIGHTS: u8 = 4;

const EXIT_CODES: &str = "\
Exit status:
  0  success
  1  any other error (I/O, corrupt frame, training failure)
  2  usage error or unknown subcommand
  3  bad configuration file or value
  4  missing weights file";

#[derive(Parser)]
#[command(name = "semcom", version, about = "Segmentation-map frames in, visible and infrared reconstructions out")]
#[command(after_help = EXIT_CODES)]
struct Cli {
    /// Run configuration (`key = value` lines). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and evaluation corpora.
    GenData,
    /// Train the two autoencoders.
    TrainAe,
    /// Train the latent diffusion model on top of the trained autoencoders.
    TrainLdm,
    /// Encode a .segmap file into a frame file.
    Send {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode a frame file and write the reconstructed images.
    Recv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Run the evaluation corpus through sender, channel and receiver.
    Eval,
    /// Summarize a written report.jsonl (defaults to the one in the output directory).
    Report {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

enum Failure {
    Config(ConfigError),
    Pipeline(PipelineError),
    Other(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Pipeline(PipelineError::Config(_)) => EXIT_BAD_CONFIG,
            Failure::Pipeline(PipelineError::MissingWeights(_)) => EXIT_MISSING_WEIGHTS,
            _ => EXIT_OTHER,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "bad config: {e}"),
            Failure::Pipeline(e) => write!(f, "{e}"),
            Failure::Other(e) => write!(f, "{e}"),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let (train, eval) = pipeline::gen_data(&cfg)?;
            println!("wrote {} training scenes to {}", cfg.train_scenes, train.display());
            println!("wrote {} evaluation scenes to {}", cfg.eval_scenes, eval.display());
        }
        Command::TrainAe => {
            let log = pipeline::train_ae_stage(&cfg)?;
            if let Some(last) = log.last() {
                println!(
                    "epochs {} final total {:.6} contrastive {:.6} rgb {:.6} ir {:.6}",
                    log.len(),
                    last.total,
                    last.contrastive,
                    last.recon_rgb,
                    last.recon_ir
                );
            }
            println!("weights in {}", cfg.weights_dir.display());
        }
        Command::TrainLdm => {
            let log = pipeline::train_ldm_stage(&cfg)?;
            if let Some(last) = log.last() {
                println!(
                    "epochs {} final total {:.6} rgb {:.6} ir {:.6}",
                    log.len(),
                    last.total,
                    last.rgb,
                    last.ir
                );
            }
            println!("weights in {}", cfg.weights_dir.display());
        }
        Command::Send { input, output } => {
            let seg = SegMap::load(input).map_err(|e| Failure::Other(format!("{}: {e}", input.display())))?;
            let frame = encode_frame(&seg, cfg.modality_mask());
            std::fs::write(output, &frame).map_err(|e| Failure::Other(format!("{}: {e}", output.display())))?;
            let r = measure_compression(&seg);
            println!(
                "frame {} B (payload {} B), ratio_onehot {:.2}",
                r.frame_bytes, r.compressed_bytes, r.ratio_onehot
            );
        }
        Command::Recv { input, output_dir } => {
            let frame = std::fs::read(input).map_err(|e| Failure::Other(format!("{}: {e}", input.display())))?;
            let (seg, written) = pipeline::receive_frame(&cfg, &frame, output_dir, cfg.sample_seed)?;
            println!("decoded {}x{} map with {} classes", seg.width(), seg.height(), seg.num_classes());
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval => {
            let report = pipeline::run_end_to_end(&cfg)?;
            print!("{}", report.aggregate.to_text());
            println!("report in {}", cfg.output_dir.display());
        }
        Command::Report { input } => {
            let path = input
                .clone()
                .unwrap_or_else(|| cfg.output_dir.join(pipeline::REPORT_RECORDS));
            let rows = pipeline::read_records(&path)?;
            print!("{}", Aggregate::from_scenes(&rows).to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
