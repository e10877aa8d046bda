use std::path::PathBuf;
use std::process::exit;

use clap::{error::ErrorKind, Parser, Subcommand};

use nhmm::cli;

#[derive(Parser)]
#[command(name = "nhmm", version, about = "Neural HMM speech representation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract normalized log Mel features from a directory of WAV files
    Extract {
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Write the computed normalization stats here
        #[arg(long, conflicts_with = "stats_in")]
        stats_out: Option<PathBuf>,
        /// Load normalization stats instead of computing them
        #[arg(long)]
        stats_in: Option<PathBuf>,
    },
    /// Generate a synthetic HMM dataset with ground-truth state labels
    Synth {
        /// Spec file (key = value); omit for the built-in 3-state spec
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model over a feature manifest
    Pretrain {
        /// Config file (key = value); flags given via --set override it
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set variant=vq_apc (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Allow overwriting an existing checkpoint in --out
        #[arg(long)]
        force: bool,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Viterbi-decode a manifest into per-frame codes
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output text file: `utterance_id code code ...` per line
        #[arg(long)]
        out: PathBuf,
    },
    /// Score decoded codes or probe representations against labels
    Eval {
        /// Codes file from `decode` (required for nmi and seg)
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// One of: nmi, seg, probe
        #[arg(long)]
        metric: String,
        /// Checkpoint (required for probe)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write `metric,value` rows here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the built-in oracle and gradient verification suites
    Selfcheck {
        /// Test hook: corrupt the pairwise posteriors to prove the
        /// suite detects failures
        #[arg(long, hide = true)]
        flip_xi: bool,
    },
}

fn parse_override(s: &str) -> nhmm::Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| nhmm::Error::validation(format!("--set expects KEY=VALUE, got {s:?}")))
}

fn run(cli: Cli) -> nhmm::Result<()> {
    match cli.command {
        Command::Extract {
            wav_dir,
            out_dir,
            stats_out,
            stats_in,
        } => cli::cmd_extract(&wav_dir, &out_dir, stats_out.as_deref(), stats_in.as_deref()),
        Command::Synth { spec, out_dir, seed } => {
            cli::cmd_synth(spec.as_deref(), &out_dir, seed)
        }
        Command::Pretrain {
            config,
            set,
            manifest,
            out,
            force,
            resume,
        } => {
            let overrides: nhmm::Result<Vec<_>> =
                set.iter().map(|s| parse_override(s)).collect();
            cli::cmd_pretrain(
                config.as_deref(),
                &overrides?,
                &manifest,
                &out,
                force,
                resume.as_deref(),
            )
        }
        Command::Decode {
            checkpoint,
            manifest,
            out,
        } => cli::cmd_decode(&checkpoint, &manifest, &out),
        Command::Eval {
            codes,
            manifest,
            metric,
            checkpoint,
            csv,
        } => cli::cmd_eval(
            codes.as_deref(),
            &manifest,
            &metric,
            checkpoint.as_deref(),
            csv.as_deref(),
        ),
        Command::Selfcheck { flip_xi } => cli::cmd_selfcheck(flip_xi),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        exit(e.exit_code());
    }
}
