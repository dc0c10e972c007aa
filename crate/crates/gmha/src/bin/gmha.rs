//! Thin command-line wrapper over the library's `cli` module.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gmha::arch::{ArchKind, KrVariant, PosEmbed};
use gmha::cli::{
    cmd_decode, cmd_equiv, cmd_gradcheck, cmd_report, cmd_train, exit_code_for, ReportFormat, EXIT_DIVERGED, EXIT_OK, EXIT_ORACLE_FAILURE, GRADCHECK_TOLERANCE, SEED_ENV_VAR,
};
use gmha::config::{load_config_file, preset_set, RunConfig};
use gmha::train::TrainStatus;

#[derive(Parser)]
#[command(
    name = "gmha",
    about = "Attention-family laboratory: capacity reports, equivalence oracles, gradient checks, toy training, cached decoding",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum PosEmbedArg {
    None,
    Rope,
    Alibi,
}

impl PosEmbedArg {
    fn to_pos(self) -> PosEmbed {
        match self {
            PosEmbedArg::None => PosEmbed::None,
            PosEmbedArg::Rope => PosEmbed::rope_default(),
            PosEmbedArg::Alibi => PosEmbed::Alibi,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Capacity/memory rows: kv bytes per token, parameter counts, heads,
    /// factorization rank, shared latent dimension, total effective rank.
    Report {
        /// Preset names, or a set name (`7b`, `1b`). Ignored with --config.
        #[arg(default_values_t = [String::from("7b"), String::from("1b")])]
        presets: Vec<String>,
        /// JSON config file instead of presets.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bytes per cached element (accounting only).
        #[arg(long, default_value_t = 2)]
        elem_bytes: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Equivalence and bound oracles; exits 1 on any oracle failure.
    Equiv {
        /// Architectures to test (default: all).
        #[arg(long = "arch")]
        archs: Vec<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Narrow the positional embedding (default: oracle-specific).
        #[arg(long, value_enum)]
        pos_embed: Option<PosEmbedArg>,
    },
    /// Full-model finite-difference gradient check on a 2-layer model.
    Gradcheck {
        #[arg(long)]
        arch: String,
        /// Key-reuse variant (mfa-kr only).
        #[arg(long)]
        kr_variant: Option<String>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Byte-level training; one metrics line per step. Exits 3 on
    /// divergence. GMHA_SEED overrides the config seed.
    Train {
        /// JSON config file (TrainConfig schema, strict keys).
        #[arg(long)]
        config: PathBuf,
        /// Raw byte corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint written at the end of the run.
        #[arg(long, default_value = "checkpoint.gmha")]
        out: PathBuf,
    },
    /// Greedy cached decoding from a checkpoint, with cache statistics.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        steps: usize,
    },
}

fn parse_archs(names: &[String]) -> gmha::Result<Vec<ArchKind>> {
    if names.is_empty() {
        return Ok(ArchKind::ALL.to_vec());
    }
    names.iter().map(|n| ArchKind::parse(n)).collect()
}

fn parse_kr(name: &str) -> gmha::Result<KrVariant> {
    match name {
        "vanilla" => Ok(KrVariant::Vanilla),
        "extra_proj" => Ok(KrVariant::ExtraProj),
        "residual" => Ok(KrVariant::Residual),
        "gated" => Ok(KrVariant::Gated),
        other => Err(gmha::Error::Config(format!("unknown kr variant '{other}'"))),
    }
}

fn run() -> gmha::Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Report { presets, config, elem_bytes, format } => {
            let configs: Vec<RunConfig> = match config {
                Some(path) => {
                    let mut cfg = load_config_file(&path)?;
                    cfg.name = cfg.train.arch.label();
                    vec![cfg]
                }
                None => {
                    let mut out = Vec::new();
                    for name in &presets {
                        out.extend(preset_set(name)?);
                    }
                    out
                }
            };
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            };
            print!("{}", cmd_report(&configs, elem_bytes, format)?);
            Ok(EXIT_OK)
        }
        Command::Equiv { archs, trials, seed, pos_embed } => {
            let archs = parse_archs(&archs)?;
            let summary = cmd_equiv(&archs, trials, seed, pos_embed.map(PosEmbedArg::to_pos))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(if summary.all_pass { EXIT_OK } else { EXIT_ORACLE_FAILURE })
        }
        Command::Gradcheck { arch, kr_variant, seed } => {
            let kind = ArchKind::parse(&arch)?;
            let variant = kr_variant.as_deref().map(parse_kr).transpose()?;
            let err = cmd_gradcheck(kind, variant, seed)?;
            println!("max_relative_error={err:e} tolerance={GRADCHECK_TOLERANCE:e}");
            Ok(if err <= GRADCHECK_TOLERANCE { EXIT_OK } else { EXIT_ORACLE_FAILURE })
        }
        Command::Train { config, corpus, out } => {
            let mut cfg = load_config_file(&config)?;
            if let Ok(seed_text) = std::env::var(SEED_ENV_VAR) {
                cfg.train.seed = seed_text.parse().map_err(|_| {
                    gmha::Error::Config(format!("{SEED_ENV_VAR} must be an integer, got '{seed_text}'"))
                })?;
            }
            let status = cmd_train(&cfg, &corpus, &out, |m| println!("{}", m.line()))?;
            println!("checkpoint={}", out.display());
            Ok(match status {
                TrainStatus::Ok => EXIT_OK,
                TrainStatus::Diverged => EXIT_DIVERGED,
            })
        }
        Command::Decode { ckpt, prompt, steps } => {
            let out = cmd_decode(&ckpt, &prompt, steps)?;
            println!("generated: {}", out.text());
            println!("tokens_cached: {}", out.tokens_cached);
            println!("measured_cache_bytes: {}", out.measured_bytes);
            println!("predicted_cache_bytes: {}", out.predicted_bytes);
            println!("predicted==measured: {}", out.accounting_matches());
            Ok(if out.accounting_matches() { EXIT_OK } else { EXIT_ORACLE_FAILURE })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
