use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "plugmem", version, about = "Encoder with a plug-in knowledge memory")]
pub struct Cli {
    /// Where to write the run manifest; defaults to `<output>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a vocabulary from a corpus and write a freshly initialized checkpoint.
    Init(InitArgs),
    /// Encode a knowledge corpus into a memory file.
    BuildMemory(BuildMemoryArgs),
    /// Masked-LM pretraining against a memory.
    Pretrain(PretrainArgs),
    /// Append to or replace a memory without touching the checkpoint.
    SwapMemory(SwapMemoryArgs),
    /// Fine-tune a classification head on labeled JSONL samples.
    Finetune(FinetuneArgs),
    /// Accuracy and macro-F1 of a fine-tuned checkpoint.
    Eval(EvalArgs),
    /// Top-N memory entries for a query string.
    Retrieve(RetrieveArgs),
    /// Synthetic-domain experiments.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Run the command recorded in a manifest again.
    Rerun { manifest_path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SwapMode {
    Daa,
    Dar,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4000)]
    pub vocab_size: usize,
}

#[derive(Args, Debug)]
pub struct BuildMemoryArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint's configured length.
    #[arg(long)]
    pub max_knowledge_len: Option<usize>,
    /// Added to every entry id.
    #[arg(long, default_value_t = 0)]
    pub id_offset: u64,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub memory: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub refresh_every: Option<usize>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    pub vocab_size: usize,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Also write the memory as refreshed at the end of training.
    #[arg(long)]
    pub memory_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SwapMemoryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Memory holding the new entries.
    #[arg(long)]
    pub memory: PathBuf,
    /// Memory being edited; required for `daa`.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: SwapMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub memory: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Parameter-name prefixes to hold fixed.
    #[arg(long, value_delimiter = ',')]
    pub freeze: Vec<String>,
    /// Defaults to one more than the largest label.
    #[arg(long)]
    pub num_classes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub memory: Option<PathBuf>,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub memory: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Memory layer to report; defaults to the lowest one.
    #[arg(long)]
    pub layer: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of fine-tuning seeds, starting at 0.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// JSON experiment configuration; defaults are used for missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run each seed in its own thread, up to PLUGMEM_THREADS at a time.
    #[arg(long)]
    pub parallel_seeds: bool,
}

#[derive(Subcommand, Debug)]
pub enum ExperimentCommand {
    DomainAdaptation(ExperimentArgs),
    KnowledgeUpdate {
        #[command(flatten)]
        common: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75, 1.0])]
        fractions: Vec<f64>,
    },
    InTask {
        #[command(flatten)]
        common: ExperimentArgs,
        /// concate, tagged or prompting; all three when absent.
        #[arg(long)]
        variant: Option<String>,
    },
    Sweep(ExperimentArgs),
    Heatmap {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Domain whose test samples are exported.
        #[arg(long, default_value_t = 0)]
        domain: usize,
    },
}

impl ExperimentCommand {
    pub fn common(&self) -> &ExperimentArgs {
        match self {
            ExperimentCommand::DomainAdaptation(c) | ExperimentCommand::Sweep(c) => c,
            ExperimentCommand::KnowledgeUpdate { common, .. }
            | ExperimentCommand::InTask { common, .. }
            | ExperimentCommand::Heatmap { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentCommand::DomainAdaptation(_) => "domain-adaptation",
            ExperimentCommand::KnowledgeUpdate { .. } => "knowledge-update",
            ExperimentCommand::InTask { .. } => "in-task",
            ExperimentCommand::Sweep(_) => "sweep",
            ExperimentCommand::Heatmap { .. } => "heatmap",
        }
    }
}
