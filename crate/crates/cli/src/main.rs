//! `dmb` — train, translate, evaluate, profile, benchmark, and export
//! gate assignments for plain / DMB / MoE transformer models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use dmb_cli::{checkpoint, commands, config, error};

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmb_core::model::TransformerModel;
use dmb_core::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{parse_variant, RunConfig};
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "dmb", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Model/run settings shared by commands that build a model from
/// configuration; each flag overrides the config file.
#[derive(Args, Clone)]
struct ConfigFlags {
    /// Config file (key = value, sections [model]/[train]/[data])
    #[arg(long)]
    config: Option<String>,
    /// Model preset: micro | tiny | small
    #[arg(long)]
    preset: Option<String>,
    /// Layer variant: plain | dmb | moe
    #[arg(long)]
    variant: Option<String>,
    /// Branch / expert count N
    #[arg(long)]
    branches: Option<usize>,
    /// MoE top-k
    #[arg(long)]
    topk: Option<usize>,
    /// Auxiliary-loss weight α
    #[arg(long)]
    alpha: Option<Real>,
    /// Training steps
    #[arg(long)]
    steps: Option<u64>,
    /// Seed for data generation, init, and batching
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let variant = match &self.variant {
            Some(v) => parse_variant(v)?,
            None => cfg.model.variant,
        };
        if let Some(p) = &self.preset {
            let vocab = cfg.model.vocab_size;
            cfg.model = match p.as_str() {
                "micro" => dmb_core::model::ModelConfig::micro(variant, vocab),
                "tiny" => dmb_core::model::ModelConfig::tiny(variant),
                "small" => dmb_core::model::ModelConfig::small(variant),
                _ => {
                    return Err(CliError::Usage(format!(
                        "unknown preset `{p}` (micro|tiny|small)"
                    )))
                }
            };
            cfg.preset = p.clone();
        } else {
            cfg.model.variant = variant;
        }
        if let Some(n) = self.branches {
            cfg.model.branches = n;
        }
        if let Some(k) = self.topk {
            cfg.model.top_k = k;
        }
        if let Some(a) = self.alpha {
            cfg.model.alpha = a;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.data.seed = s;
        }
        cfg.model
            .validate()
            .map_err(|e| CliError::Usage(format!("invalid model config: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a toy task or TSV corpus
    Train {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Output directory for checkpoints, log, and vocabulary
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Translate a file of whitespace-tokenized lines
    Translate {
        /// Checkpoint file
        #[arg(long)]
        ckpt: String,
        /// Vocabulary file (one token per line)
        #[arg(long)]
        vocab: String,
        /// Input file, one sentence per line
        #[arg(long)]
        input: String,
        /// Beam size (1 = greedy)
        #[arg(long, default_value_t = 4)]
        beam: usize,
        /// Length-penalty exponent α in ((5+T)/6)^α
        #[arg(long = "length-penalty", default_value_t = 0.6)]
        length_penalty: Real,
    },
    /// Translate and score BLEU against references
    Eval {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        vocab: String,
        /// Source file
        #[arg(long)]
        src: String,
        /// Reference file, aligned line-by-line
        #[arg(long = "refs")]
        refs: String,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long = "length-penalty", default_value_t = 0.6)]
        length_penalty: Real,
    },
    /// Analytic parameter / Mult-Adds / PTR report
    Profile {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Source length S
        #[arg(long, default_value_t = 30)]
        s: usize,
        /// Target length T
        #[arg(long, default_value_t = 30)]
        t: usize,
        /// BLEU score to turn into a PTR
        #[arg(long)]
        bleu: Option<f64>,
        /// Directory for the machine-readable report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-length greedy decode latency
    Bench {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Checkpoint to benchmark (otherwise a fresh model from the flags)
        #[arg(long)]
        ckpt: Option<String>,
        /// Tokens to decode per trial
        #[arg(long = "seq-len", default_value_t = 30)]
        seq_len: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Export per-token encoder gate assignments as TSV
    Gates {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        vocab: String,
        #[arg(long)]
        input: String,
        /// Directory for gates.tsv (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { flags, out } => {
            let cfg = flags.resolve()?;
            commands::cmd_train(&cfg, &out)
        }
        Command::Translate { ckpt, vocab, input, beam, length_penalty } => {
            commands::cmd_translate(&ckpt, &vocab, &input, beam, length_penalty)
        }
        Command::Eval { ckpt, vocab, src, refs, beam, length_penalty } => {
            commands::cmd_eval(&ckpt, &vocab, &src, &refs, beam, length_penalty)
        }
        Command::Profile { flags, s, t, bleu, out } => {
            let cfg = flags.resolve()?;
            println!("{}", cfg.render());
            commands::cmd_profile(&cfg.model, s, t, bleu, out.as_deref())
        }
        Command::Bench { flags, ckpt, seq_len, trials } => {
            let model = match ckpt {
                Some(path) => checkpoint::load(Path::new(&path))?,
                None => {
                    let cfg = flags.resolve()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
                    let mut model = TransformerModel::new(cfg.model, &mut rng)
                        .map_err(|e| CliError::Usage(format!("invalid model config: {e}")))?;
                    // benchmark the deployment form
                    model.fold();
                    model
                }
            };
            commands::cmd_bench(&model, seq_len, trials)
        }
        Command::Gates { ckpt, vocab, input, out } => {
            commands::cmd_gates(&ckpt, &vocab, &input, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
