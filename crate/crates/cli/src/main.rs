use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dbgl::temporal::DecayKernel;
use dbgl_cli::commands::{self, GRADCHECK_FILE};
use dbgl_cli::report::write_json;
use dbgl_cli::RunConfig;

#[derive(Parser)]
#[command(name = "dbgl", version, about = "Dynamic bipartite graph learning for irregular time series")]
struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ModelArgs {
    /// Dataset directory with observations.csv and labels.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Component to switch off; repeatable.
    #[arg(long, value_parser = ["tde", "sna", "hvs", "cb", "mcv", "te"])]
    ablate: Vec<String>,
    #[arg(long)]
    kernel: Option<DecayKernel>,
    /// Fraction of variables hidden in validation and test.
    #[arg(long)]
    leave_out: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train a model; writes model.json, report.json and timing.json.
    Train(ModelArgs),
    /// Evaluate a checkpoint, optionally with variables left out.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate at leave-out rates 0.1 to 0.5.
        #[arg(long)]
        sweep: bool,
    },
    /// Fit per-variable decay rates and compare them across variables.
    Analyze {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient check of the full model.
    Gradcheck {
        #[arg(long, default_value = "mlp_exp")]
        kernel: DecayKernel,
        /// Corrupts one block's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt_block: Option<String>,
    },
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out = o.clone();
    }
    Ok(config)
}

fn apply_model_args(config: &mut RunConfig, args: &ModelArgs) {
    if let Some(d) = &args.data {
        config.data = Some(d.clone());
    }
    if !args.ablate.is_empty() {
        config.ablate = args.ablate.clone();
    }
    if let Some(k) = args.kernel {
        config.model.kernel = k;
    }
    if args.leave_out.is_some() {
        config.leave_out = args.leave_out;
    }
}

fn run(cli: Cli) -> Result<bool> {
    let mut config = base_config(&cli)?;
    match &cli.command {
        Command::Synth => {
            let data = commands::cmd_synth(&config.resolved()?)?;
            println!("wrote {} episodes over {} variables", data.len(), data.n_vars());
        }
        Command::Train(args) => {
            apply_model_args(&mut config, args);
            let report = commands::cmd_train(&config.resolved()?)?;
            for (split, eval) in &report.metrics {
                println!("{split}: loss {:.5} auroc {:?} auprc {:?}", eval.loss, eval.metrics.auroc, eval.metrics.auprc);
            }
        }
        Command::Eval { model, checkpoint, sweep } => {
            apply_model_args(&mut config, model);
            if let Some(c) = checkpoint {
                config.checkpoint = Some(c.clone());
            }
            config.sweep |= sweep;
            let report = commands::cmd_eval(&config.resolved()?)?;
            for (split, eval) in &report.metrics {
                println!("{split}: loss {:.5} auroc {:?} auprc {:?}", eval.loss, eval.metrics.auroc, eval.metrics.auprc);
            }
            for entry in &report.sweep {
                let test = entry.metrics.get("test").or(entry.metrics.get("val"));
                println!(
                    "leave-out {}: hidden {:?} auprc {:?}",
                    entry.leave_out.rate,
                    entry.leave_out.hidden,
                    test.and_then(|e| e.metrics.auprc)
                );
            }
        }
        Command::Analyze { data } => {
            if let Some(d) = data {
                config.data = Some(d.clone());
            }
            let report = commands::cmd_analyze(&config.resolved()?)?;
            print!("{}", report.table_csv());
            match (report.kw_csv(), &report.kruskal_wallis_note) {
                (Some(kw), _) => print!("{kw}"),
                (None, Some(note)) => eprintln!("Kruskal-Wallis not computed: {note}"),
                (None, None) => {}
            }
        }
        Command::Gradcheck { kernel, corrupt_block } => {
            let config = config.resolved()?;
            let report = commands::run_gradcheck(config.seed, *kernel, corrupt_block.clone())?;
            for b in &report.blocks {
                let status = if b.passed { "ok" } else { "FAIL" };
                println!("{:<24} {:>10.3e} {status}", b.name, b.max_rel_err);
            }
            println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_err(), report.tolerance);
            if cli.out.is_some() || cli.config.is_some() {
                std::fs::create_dir_all(&config.out)?;
                write_json(&report, &config.out.join(GRADCHECK_FILE))?;
            }
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
