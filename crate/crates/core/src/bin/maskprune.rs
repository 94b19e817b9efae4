use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskprune::harness::{
    eval_cmd, pretrain_cmd, prune_cmd, stats_cmd, sweep_cmd, ExperimentConfig, SweepParam,
};
use maskprune::model::UnitKind;
use maskprune::{Error, Result};

/// Uniform structured pruning of small decoder-only transformers.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON file of flat `key = value` settings.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut exp = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        exp.apply_overrides(&self.set)?;
        Ok(exp)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the dense teacher and write it to `teacher`.
    Pretrain(Common),
    /// Learn masks on the teacher, prune, and write artifacts to `out_dir`.
    Prune(Common),
    /// Held-out perplexity of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Repeat `prune` over values of one setting and several seeds.
    Sweep {
        /// `decay_rate` (eta1) or `interval_start`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Mask histograms of a checkpoint carrying masks (e.g. `state.json`).
    Stats {
        checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Pretrain(c) => {
            let exp = c.load()?;
            let r = pretrain_cmd(&exp)?;
            println!(
                "teacher {}: eval ppl {:.3} (untrained {:.3}), final loss {:.4}",
                exp.data.teacher.display(),
                r.final_ppl,
                r.untrained_ppl,
                r.final_loss
            );
        }
        Cmd::Prune(c) => {
            let exp = c.load()?;
            let s = prune_cmd(&exp)?;
            println!(
                "removed {} heads and {} channels per layer; sparsity {:.4}; eval ppl dense {:.3}, pruned {:.3}, magnitude {:.3}",
                s.heads_removed, s.channels_removed, s.achieved_sparsity, s.dense_ppl, s.pruned_ppl, s.magnitude_ppl
            );
            println!("artifacts in {}", exp.data.out_dir.display());
        }
        Cmd::Eval { checkpoint, common } => {
            let r = eval_cmd(&common.load()?, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::Sweep {
            param,
            values,
            seeds,
            common,
        } => {
            let exp = common.load()?;
            let param = SweepParam::parse(&param)?;
            let report = sweep_cmd(&exp, param, &values, &seeds)?;
            for v in &values {
                let failed = report
                    .entries
                    .iter()
                    .filter(|e| e.value == *v && e.summary.is_none())
                    .count();
                match report.median_tail_loss(*v) {
                    Some(l) => println!("{v}: median final loss {l:.4} ({failed} failed)"),
                    None => println!("{v}: all runs failed"),
                }
            }
        }
        Cmd::Stats {
            checkpoint,
            out_dir,
        } => {
            let st = stats_cmd(&checkpoint, &out_dir)?;
            for kind in UnitKind::BOTH {
                let (lo, hi, mid) = st.extremes(kind);
                println!("{}: {lo} near 0, {hi} near 1, {mid} between", kind.name());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let code = e.exit_code();
            if matches!(e, Error::ConstraintNotMet(_)) {
                eprintln!("constraints not met; artifacts were still written");
            }
            ExitCode::from(code as u8)
        }
    }
}
