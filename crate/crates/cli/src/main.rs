mod commands;
mod exit;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lorawhisper::expansion::Mode;
use lorawhisper::experiment::DonorChoice;

use commands::{Baseline, EvalArgs, ExpandArgs, LangSet};
use exit::CliError;
use run_dir::RunDir;

/// Multilingual speech recognition with per-language LoRA banks, on synthetic data.
#[derive(Parser)]
#[command(name = "lorawhisper", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing artifacts.
    #[arg(long)]
    force: bool,
}

impl RunArgs {
    fn dir(&self) -> RunDir {
        RunDir::new(&self.out, self.force)
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config as JSON.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (default, desk).
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to runs/<config name>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<(lorawhisper::experiment::ExperimentConfig, RunDir)> {
        let cfg = commands::load_config(self.config.as_ref(), &self.preset, self.seed)?;
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
        Ok((cfg, RunDir::new(&out, self.force)))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the config and language manifests into a fresh run directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write every utterance as JSON lines.
        #[arg(long)]
        dump: bool,
    },
    /// Pretrain the base model on all base languages.
    TrainBase {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train one adapter per base language on the frozen base.
    TrainBank {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Language-ID similarity of added languages against the base languages.
    Similarity {
        #[command(flatten)]
        run: RunArgs,
        /// Languages to profile; defaults to all added languages.
        #[arg(long = "lang")]
        langs: Vec<String>,
    },
    /// Add every new language to a bank.
    Expand {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        mode: Mode,
        /// auto, least, or a base language code.
        #[arg(long, default_value = "auto")]
        donor: DonorChoice,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, default_value = "bank.lwbk")]
        bank: String,
        /// Output bank; defaults to bank-<mode>.lwbk.
        #[arg(long = "into")]
        into: Option<String>,
    },
    /// Decode test sets and write a TER report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "base.lwbk")]
        model: String,
        #[arg(long, default_value = "bank.lwbk", conflicts_with = "base_only")]
        bank: String,
        /// Evaluate the model without adapters.
        #[arg(long)]
        base_only: bool,
        #[arg(long, value_enum, default_value_t = LangSet::Base)]
        langs: LangSet,
        /// Report name under reports/.
        #[arg(long, default_value = "eval")]
        id: String,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Count LoRA parameters for a model shape.
    Params {
        /// whisper-small, desk, default, or d_model,ffn,enc_layers,dec_layers.
        #[arg(long, default_value = "whisper-small")]
        dims: String,
        #[arg(long, default_value_t = 32)]
        rank: usize,
        /// full or qkv-fc1.
        #[arg(long, default_value = "full")]
        policy: String,
    },
    /// Full fine-tuning baselines.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        kind: Baseline,
    },
    /// Every stage end to end, then a comparison table.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LORAWHISPER_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Invalid(format!("LORAWHISPER_THREADS must be a positive integer, got {v:?}"))
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.cmd {
        Cmd::GenData { cfg, dump } => {
            let (cfg, dir) = cfg.resolve()?;
            commands::gen_data(&cfg, &dir, dump)
        }
        Cmd::TrainBase { run } => commands::train_base_cmd(&run.dir()),
        Cmd::TrainBank { run, rank } => commands::train_bank_cmd(&run.dir(), rank),
        Cmd::Similarity { run, langs } => commands::similarity_cmd(&run.dir(), &langs),
        Cmd::Expand { run, mode, donor, rank, bank, into } => {
            let args = ExpandArgs { mode, donor, rank, bank_in: bank, bank_out: into };
            let out = commands::expand_cmd(&run.dir(), &args)?;
            eprintln!("wrote {out}");
            Ok(())
        }
        Cmd::Eval { run, model, bank, base_only, langs, id, beam } => {
            let bank = (!base_only).then_some(bank);
            commands::eval_cmd(&run.dir(), &EvalArgs { model, bank, langs, id, beam }).map(drop)
        }
        Cmd::Params { dims, rank, policy } => {
            println!("{}", commands::params_cmd(&dims, rank, &policy)?);
            Ok(())
        }
        Cmd::Baseline { run, kind } => commands::baseline_cmd(&run.dir(), kind),
        Cmd::Pipeline { cfg } => {
            let (cfg, dir) = cfg.resolve()?;
            commands::pipeline(&cfg, &dir)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
