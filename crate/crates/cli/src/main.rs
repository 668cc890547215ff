//! Command-line front end for the desk-scale training laboratory: model
//! training, corpus cleaning and quality gating, tokenizer experiments, and
//! quantization fidelity studies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;
use config::CliError;
use wlab_core::corpus::DEFAULT_QUALITY_THRESHOLD;
use wlab_core::model::CHECKPOINT_VERSION;

#[derive(Parser)]
#[command(name = "wlab", version = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format v1)"))]
#[command(about = "Desk-scale language-model training laboratory")]
struct Cli {
    /// Worker threads for parallel stages (0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Treat malformed input lines as fatal (exit code 4)
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the desk model on a JSONL instruction dataset
    Train {
        /// key=value config file layered between defaults and flags
        #[arg(long)]
        config: Option<PathBuf>,
        /// Hyperparameter preset: desk, pretrain-7b, sft-7b
        #[arg(long)]
        preset: Option<String>,
        /// JSONL dataset ({"prompt": ..., "response": ..., "weight": ...})
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (checkpoint.bin, train.csv, resolved.cfg)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Adaptive learning-rate scaling: on or off
        #[arg(long)]
        alr: Option<String>,
        /// Subword vocabulary file; defaults to the byte-level tokenizer
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Apply text cleanup to a JSONL document stream
    Clean {
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score documents with a trained quality model
    Classify {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_QUALITY_THRESHOLD)]
        threshold: f64,
    },
    /// Keep only documents whose high-quality probability clears the threshold
    Gate {
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_QUALITY_THRESHOLD)]
        threshold: f64,
    },
    /// Clean, classify, and gate in one pass
    Pipeline {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_QUALITY_THRESHOLD)]
        threshold: f64,
    },
    /// Train the gradient-boosted quality classifier
    QualityTrain {
        /// Labeled JSONL ({"text": ..., "label": "high"|"medium"|"low"});
        /// omitted = train on the built-in synthetic benchmark
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Learn a byte-pair vocabulary from a text file (one document per line)
    BpeTrain {
        input: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Tokenize a text file and report efficiency metrics
    Tokenize {
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        tokens_out: Option<PathBuf>,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Merge two vocabularies and report overlaps and ambiguities
    MergeVocabs {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Exhaustive ambiguity scan bound (max string length)
        #[arg(long, default_value_t = 6)]
        max_len: usize,
    },
    /// Accumulate an importance matrix from calibration tokens
    Imatrix {
        checkpoint: PathBuf,
        /// Whitespace-separated token ids
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Quantize a checkpoint (simulated: weights stored dequantized)
    Quantize {
        checkpoint: PathBuf,
        #[arg(long)]
        bits: u8,
        #[arg(long)]
        imatrix: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare a quantized checkpoint against its reference on an eval stream
    Fidelity {
        #[arg(long, visible_alias = "ref")]
        reference: PathBuf,
        #[arg(long, visible_alias = "quant")]
        quantized: PathBuf,
        /// Whitespace-separated token ids
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Scheme label override (normally read from the quantize metadata)
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Aggregate fidelity CSVs in a directory into a Markdown table
    Report {
        dir: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let _ = CHECKPOINT_VERSION; // surfaced through --version
    let strict = cli.strict;
    let jobs = cli.jobs;
    match cli.cmd {
        Cmd::Train {
            config,
            preset,
            data,
            out,
            iters,
            batch_size,
            seed,
            alr,
            vocab,
        } => cmd_train(TrainFlags {
            config,
            preset,
            data,
            out,
            iters,
            batch_size,
            seed,
            alr,
            vocab,
        }),
        Cmd::Clean { input, output } => cmd_clean(&input, output.as_deref(), strict, jobs),
        Cmd::Classify {
            input,
            model,
            output,
            threshold,
        } => cmd_classify(&input, &model, output.as_deref(), threshold, strict, jobs),
        Cmd::Gate {
            input,
            output,
            threshold,
        } => cmd_gate(&input, output.as_deref(), threshold, strict),
        Cmd::Pipeline {
            input,
            model,
            output,
            threshold,
        } => cmd_pipeline(&input, &model, output.as_deref(), threshold, strict, jobs),
        Cmd::QualityTrain {
            data,
            output,
            rounds,
            depth,
            seed,
        } => cmd_quality_train(data.as_deref(), &output, rounds, depth, seed, strict),
        Cmd::BpeTrain {
            input,
            vocab_size,
            output,
        } => cmd_bpe_train(&input, vocab_size, &output),
        Cmd::Tokenize {
            input,
            vocab,
            tokens_out,
            metrics_out,
        } => cmd_tokenize(&vocab, &input, tokens_out.as_deref(), metrics_out.as_deref()),
        Cmd::MergeVocabs {
            a,
            b,
            output,
            report,
            max_len,
        } => cmd_merge_vocabs(&a, &b, &output, report.as_deref(), max_len),
        Cmd::Imatrix {
            checkpoint,
            data,
            output,
        } => cmd_imatrix(&checkpoint, &data, &output),
        Cmd::Quantize {
            checkpoint,
            bits,
            imatrix,
            output,
        } => cmd_quantize(&checkpoint, bits, imatrix.as_deref(), &output),
        Cmd::Fidelity {
            reference,
            quantized,
            eval,
            output,
            scheme,
        } => cmd_fidelity(&reference, &quantized, &eval, output.as_deref(), scheme.as_deref()),
        Cmd::Report { dir, output } => cmd_report(&dir, output.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
