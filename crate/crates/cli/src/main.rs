//! `cgrow`: plan, train, grow, verify and evaluate progressive-growth runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgrow_core::cost::{schedule_cost, CostOptions};
use cgrow_core::growth::{apply, perturb_ffn, verify_function_preserving, GrowthOp, DEFAULT_PRESERVATION_TOL};
use cgrow_core::io::{Checkpoint, FileSink, RunConfig};
use cgrow_core::numerics::Rng;
use cgrow_core::trainer::{heldout_loss, heldout_set, run_schedule};
use cgrow_core::Error;

#[derive(Parser)]
#[command(name = "cgrow", version, about = "Progressive compound growth for BERT-style encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CostFlags {
    /// Count the MLM head (overrides the config).
    #[arg(long, conflicts_with = "no_overhead")]
    overhead: bool,
    /// Ignore the MLM head (overrides the config).
    #[arg(long)]
    no_overhead: bool,
    /// Report FLOPs (2 × Mult-Adds).
    #[arg(long)]
    flops: bool,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Cost of a schedule against its single-stage baseline.
    Plan {
        /// Config file or preset name.
        #[arg(short = 'c', long = "config")]
        config: String,
        #[command(flatten)]
        cost: CostFlags,
    },
    /// Run a schedule, writing checkpoints and loss.csv.
    Train {
        #[arg(short = 'c', long = "config")]
        config: String,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
        /// Override train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply growth ops to a checkpoint.
    Grow {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated ops: stack:<L>, unshare, defactorize, unpool, extend:<len>:<masks>.
        #[arg(long)]
        op: String,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
        /// Std of Gaussian noise added to FFN weights after growth.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Seed for --noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check whether growth ops preserve the model's outputs.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = DEFAULT_PRESERVATION_TOL)]
        tol: f64,
        /// Probe sequences.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long)]
        json: bool,
    },
    /// Per-stage cost table of a schedule.
    Flops {
        #[arg(short = 'c', long = "config")]
        config: String,
        #[command(flatten)]
        cost: CostFlags,
    },
    /// Held-out MLM loss of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(short = 'c', long = "config")]
        config: String,
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::OpSpec(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn parse_ops(spec: &str) -> Result<Vec<GrowthOp>, Failure> {
    let ops = GrowthOp::parse_list(spec)?;
    if ops.is_empty() {
        return Err(Failure::Usage("--op needs at least one growth op".into()));
    }
    Ok(ops)
}

fn cost_options(config: &RunConfig, flags: &CostFlags) -> CostOptions {
    let mut opts = config.cost_options();
    if flags.overhead {
        opts.count_overhead = true;
    }
    if flags.no_overhead {
        opts.count_overhead = false;
    }
    if flags.flops {
        opts.flops_x2 = true;
    }
    opts
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn plan(config: &str, flags: &CostFlags) -> CliResult {
    let config = RunConfig::resolve(config)?;
    let report = config.plan(cost_options(&config, flags))?;
    if flags.json {
        println!("{}", json(&report));
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn flops(config: &str, flags: &CostFlags) -> CliResult {
    let config = RunConfig::resolve(config)?;
    let stages = config.schedule()?.plan()?;
    let report = schedule_cost(&stages, &stages, cost_options(&config, flags))?;
    if flags.json {
        println!("{}", json(&report.stages));
    } else {
        let table = report.table();
        let schedule_part = table.split("baseline (").next().unwrap_or(&table);
        print!("{schedule_part}");
        println!("total: {}", report.total);
    }
    Ok(())
}

fn train(config: &str, out: &Path, seed: Option<u64>) -> CliResult {
    let mut config = RunConfig::resolve(config)?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    let schedule = config.schedule()?;
    let mut sink = FileSink::create(out)?;
    let summary = run_schedule(&schedule, &config.optimizer, &config.train_options(), &mut sink)?;
    let report = serde_json::json!({
        "seed": config.train.seed,
        "global_step": summary.final_checkpoint.global_step,
        "heldout_initial": summary.heldout_initial,
        "heldout_per_stage": summary.heldout_per_stage,
        "boundaries": summary.boundaries,
    });
    let text = json(&report);
    let path = out.join("summary.json");
    std::fs::write(&path, &text).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    println!("{text}");
    Ok(())
}

fn grow(ckpt: &Path, op: &str, out: &Path, noise: f64, seed: u64) -> CliResult {
    let ops = parse_ops(op)?;
    let source = Checkpoint::load(ckpt)?;
    let mut grown = apply(&ops, &source.params, &source.model, &source.data)?;
    if noise > 0.0 {
        perturb_ffn(&mut grown.params, noise, &mut Rng::new(seed).fork("growth_noise"));
    }
    let result = Checkpoint {
        model: grown.model,
        data: grown.data,
        params: grown.params,
        ..source
    };
    result.save(out)?;
    println!(
        "grew {} -> {} ({} layers, ffn {}, pool {}, train_len {})",
        ckpt.display(),
        out.display(),
        result.model.layers,
        result.model.ffn,
        result.model.pool_k,
        result.data.train_len
    );
    Ok(())
}

fn verify(ckpt: &Path, op: &str, tol: f64, batch: usize, as_json: bool) -> CliResult {
    let ops = parse_ops(op)?;
    if batch == 0 {
        return Err(Failure::Usage("--batch must be >= 1".into()));
    }
    let c = Checkpoint::load(ckpt)?;
    let probe = heldout_set(&c.data, batch)?;
    let report = verify_function_preserving(&ops, &c.params, &c.model, &c.data, &probe, tol)?;
    if as_json {
        println!("{}", json(&report));
    } else {
        let verdict = match report.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "report-only",
        };
        println!("ops: {}", report.ops);
        println!("max_abs_diff: {:e}", report.max_abs_diff);
        println!("tolerance: {tol:e}");
        println!("result: {verdict}");
    }
    match report.pass {
        Some(false) => Err(Failure::Run(format!(
            "{} changed outputs by {:e} (> {tol:e})",
            report.ops, report.max_abs_diff
        ))),
        _ => Ok(()),
    }
}

fn eval(ckpt: &Path, config: &str, as_json: bool) -> CliResult {
    let config = RunConfig::resolve(config)?;
    let c = Checkpoint::load(ckpt)?;
    let (_, final_data) = config.schedule()?.final_configs()?;
    let heldout = heldout_set(&final_data, config.data.heldout_size)?;
    let loss = heldout_loss(&c.params, &c.model, &heldout)?;
    if as_json {
        println!(
            "{}",
            json(&serde_json::json!({ "heldout_loss": loss, "sequences": heldout.len(), "global_step": c.global_step }))
        );
    } else {
        println!("heldout_loss: {loss}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan { config, cost } => plan(config, cost),
        Command::Train { config, out, seed } => train(config, out, *seed),
        Command::Grow {
            ckpt,
            op,
            out,
            noise,
            seed,
        } => grow(ckpt, op, out, *noise, *seed),
        Command::Verify {
            ckpt,
            op,
            tol,
            batch,
            json,
        } => verify(ckpt, op, *tol, *batch, *json),
        Command::Flops { config, cost } => flops(config, cost),
        Command::Eval { ckpt, config, json } => eval(ckpt, config, *json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
