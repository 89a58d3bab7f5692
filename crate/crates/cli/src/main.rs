use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod invariants;
mod settings;

use settings::Settings;

/// Feature-subtraction face protection: train protectors, produce protective
/// images, verify identities on them and attack them.
#[derive(Parser, Debug)]
#[command(name = "minusface", version, about, long_about = None)]
pub struct Cli {
    /// Flat JSON object of defaults; keys are long flag names with `_`
    /// instead of `-`. Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic identity dataset with a manifest.
    GenData(GenData),
    /// Jointly train the generator g and the residue recognizer f.
    TrainStage1(TrainStage1),
    /// Train the recognizer f_p on protective images from a frozen g.
    TrainStage2(TrainStage2),
    /// Turn one face image into a protective representation file.
    Protect(Protect),
    /// Extract templates from protective images.
    Enroll(Enroll),
    /// Compare two protective images, or score verification over a dataset.
    Verify(Verify),
    /// Train a recovery model that tries to invert protective images.
    TrainAttack(TrainAttack),
    /// Score a recovery model against ground truth.
    AttackEval(AttackEval),
    /// Evaluate a fixed-seed recovery model on same-seed and other-seed inputs.
    FixedSeedAttack(FixedSeedAttack),
    /// Run one ablation experiment and write its report.
    Ablate(Ablate),
    /// Run codec and perturbation property checks.
    CheckInvariants(CheckInvariants),
    /// Summarise training logs and reports found in a directory.
    Report(Report),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Number of identities [default: 20]
    #[arg(long)]
    pub ids: Option<usize>,
    /// Images per identity [default: 26]
    #[arg(long)]
    pub per_id: Option<usize>,
    /// Image side length in pixels, a multiple of 16 [default: 32]
    #[arg(long)]
    pub size: Option<usize>,
    /// Generator seed [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Options shared by every training command.
#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    /// Training epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f32>,
    /// Comma-separated epochs at which the learning rate drops by 10x [default: 15,24]
    #[arg(long)]
    pub lr_drops: Option<String>,
    /// Seed for weight initialisation [default: 1]
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Seed for data order [default: 2]
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Seed for augmentation shuffles [default: 3]
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

/// Options describing the protector.
#[derive(Args, Debug, Clone)]
pub struct ProtectOpts {
    /// Frequency mapping: dct8 or haar2 [default: dct8]
    #[arg(long)]
    pub mapping: Option<String>,
    /// Perturbation: shuffle, mask:<ratio> or none [default: shuffle]
    #[arg(long)]
    pub perturbation: Option<String>,
    /// Margin-loss scale [default: 16]
    #[arg(long)]
    pub margin_scale: Option<f32>,
    /// Additive angular margin [default: 0.3]
    #[arg(long)]
    pub margin: Option<f32>,
}

#[derive(Args, Debug)]
pub struct TrainStage1 {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for g.mfck, f.mfck and stage1.log
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Weight on the regeneration loss [default: 5]
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Weight on the recognition loss [default: 1]
    #[arg(long)]
    pub beta: Option<f32>,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub protect: ProtectOpts,
}

#[derive(Args, Debug)]
pub struct TrainStage2 {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator checkpoint from train-stage1
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Output directory for fp.mfck and stage2.log
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Protected copies per training image [default: 3]
    #[arg(long)]
    pub copies: Option<usize>,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub protect: ProtectOpts,
}

#[derive(Args, Debug)]
pub struct Protect {
    /// Input face image (PNG or PPM)
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Generator checkpoint
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Per-image seed, decimal or 0x-hex
    #[arg(long)]
    pub seed: Option<String>,
    /// Output MFRP file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a clamped PNG rendering of the protective image
    #[arg(long)]
    pub preview: Option<PathBuf>,
    #[command(flatten)]
    pub protect: ProtectOpts,
}

#[derive(Args, Debug)]
pub struct Enroll {
    /// Recognizer checkpoint from train-stage2
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output template file (tab-separated: name, comma-separated embedding)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Protective images (.mfrp, .png or .ppm)
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Verify {
    /// Recognizer checkpoint from train-stage2
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// First protective image (pair mode)
    #[arg(long, requires = "b")]
    pub a: Option<PathBuf>,
    /// Second protective image (pair mode)
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    /// Cosine threshold above which a pair is the same person (pair mode) [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Dataset directory (dataset mode)
    #[arg(long, conflicts_with = "a")]
    pub data: Option<PathBuf>,
    /// Generator checkpoint (dataset mode)
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Number of balanced pairs (dataset mode) [default: 400]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Seed for pairs and per-image shuffles (dataset mode) [default: 5]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub protect: ProtectOpts,
}

#[derive(Args, Debug, Clone)]
pub struct AttackOpts {
    /// What the attacker observes: minusface, identity or no-subtraction [default: minusface]
    #[arg(long)]
    pub protection: Option<String>,
    /// Generator checkpoint (needed for minusface)
    #[arg(long)]
    pub gen: Option<PathBuf>,
    #[command(flatten)]
    pub protect: ProtectOpts,
}

#[derive(Args, Debug)]
pub struct TrainAttack {
    /// Dataset directory; the attacker trains on its attacker split
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint for the recovery model
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed mode: random, or fixed:<seed> [default: random]
    #[arg(long)]
    pub mode: Option<String>,
    /// Epoch budget [default: 40]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without improvement before stopping [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Mini-batch size [default: 4]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f32>,
    /// Initialisation seed [default: 11]
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Data-order and simulated-client seed [default: 12]
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[command(flatten)]
    pub attack: AttackOpts,
}

#[derive(Args, Debug)]
pub struct AttackEval {
    /// Dataset directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Recovery model checkpoint
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Split to evaluate on [default: defender-test]
    #[arg(long)]
    pub split: Option<String>,
    /// Seed for the defender's per-image shuffles [default: 99]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the key-value report here
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write per-image scores here
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackOpts,
}

#[derive(Args, Debug)]
pub struct FixedSeedAttack {
    /// Dataset directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Recovery model trained with --mode fixed:<theta>
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// The seed the model was trained on
    #[arg(long)]
    pub theta: Option<String>,
    /// Comma-separated alternative seeds [default: 1,2,3,4,5]
    #[arg(long)]
    pub theta_prime: Option<String>,
    /// Write the key-value report here
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write per-image scores here
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Generator checkpoint
    #[arg(long)]
    pub gen: Option<PathBuf>,
    #[command(flatten)]
    pub protect: ProtectOpts,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    /// Recognizer trained on the residue r
    R,
    /// Recognizer trained on the decoded residue R'
    RPrime,
    /// Channel masking instead of shuffling
    Mask,
    /// Recovery attack without feature subtraction
    NoSubtraction,
    /// Full pipeline with the Haar mapping
    Dwt,
}

#[derive(Args, Debug)]
pub struct Ablate {
    /// Which ablation to run
    #[arg(long, value_enum)]
    pub kind: AblationKind,
    /// Dataset directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator checkpoint (all kinds except dwt)
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Directory for the report and any checkpoints
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Mask ratio for the mask ablation [default: 0.25]
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug)]
pub struct CheckInvariants {
    /// dct8, haar2 or all [default: all]
    #[arg(long)]
    pub mapping: Option<String>,
    /// Random instances per check [default: 100]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Seed for random instances [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side length [default: 32]
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Report {
    /// Directory holding *.log and *_report.txt files
    #[arg(long)]
    pub dir: Option<PathBuf>,
    /// Also write the summary here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration (exit code 2).
    Usage(String),
    /// Anything that went wrong while running (exit code 1).
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<minusface::Error> for Failure {
    fn from(e: minusface::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = Settings::load(cli.config.as_deref()).and_then(|s| commands::run(cli.command, &s));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
