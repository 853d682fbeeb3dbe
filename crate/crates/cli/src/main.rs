use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scommer::checkpoint::Checkpoint;
use scommer::config::RunConfig;
use scommer::experiment::{
    load_data, make_tasks, metric_rows, run_label, run_on, write_run, RunResult, METRICS_HEADER,
};
use scommer::verify::{run_suite, Formulas};

mod report;

use report::{ablation_table, summarize, AblationRow};

/// Sparse-coding multi-memory replay for class-incremental learning.
#[derive(Parser)]
#[command(name = "scommer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method over the task stream for each seed.
    Run(RunArgs),
    /// Run the component ablation and print the comparison table.
    Ablate(RunArgs),
    /// Execute the fast invariant suite.
    Verify(VerifyArgs),
    /// Write the resolved config and task stream, or list a checkpoint.
    Export(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run (repeatable); defaults to the config's seed list.
    #[arg(long)]
    seed: Vec<u64>,
    /// Artifact directory; defaults to output.dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override such as training.gamma=0 or gamma=0 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Method to train.
    #[arg(long, value_parser = ["scommer", "er", "sgd", "joint"])]
    method: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Also write the report as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint file whose tensor inventory should be exported instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Export(a) => cmd_export(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml_with(&text, overrides).with_context(|| p.display().to_string())?
        }
        None => RunConfig::default().with_overrides(overrides)?,
    };
    Ok(cfg)
}

fn resolve(args: &RunArgs) -> Result<(RunConfig, Vec<u64>, PathBuf)> {
    let mut overrides = args.overrides.clone();
    if let Some(m) = &args.method {
        overrides.push(format!("method.name=\"{m}\""));
    }
    let cfg = load_config(args.config.as_deref(), &overrides)?;
    let seeds = if args.seed.is_empty() { cfg.seeds.list.clone() } else { args.seed.clone() };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    Ok((cfg, seeds, out))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs every seed of `cfg`, writing each under `dir/seed-N`.
fn run_seeds(cfg: &RunConfig, seeds: &[u64], dir: &Path) -> Result<Vec<RunResult>> {
    let split = load_data(cfg)?;
    let tasks = make_tasks(cfg, &split)?;
    let mut results = Vec::new();
    for &seed in seeds {
        eprintln!("[{}] seed {seed}", run_label(cfg));
        let r = run_on(cfg, seed, &split, &tasks)?;
        write_run(&dir.join(format!("seed-{seed}")), cfg, &r)?;
        results.push(r);
    }
    Ok(results)
}

fn write_metrics(dir: &Path, results: &[RunResult]) -> Result<()> {
    let mut text = format!("{METRICS_HEADER}\n");
    for r in results {
        for row in metric_rows(r) {
            text.push_str(&row);
            text.push('\n');
        }
    }
    write_text(&dir.join("metrics.tsv"), &text)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (cfg, seeds, out) = resolve(args)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let results = run_seeds(&cfg, &seeds, &out)?;
    write_metrics(&out, &results)?;
    let summary = summarize(&results);
    write_text(&out.join("summary.tsv"), &summary.to_tsv())?;
    print!("{}", summary.to_text());
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let (base, seeds, out) = resolve(args)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for row in AblationRow::ALL {
        let cfg = row.apply(&base);
        cfg.validate()?;
        let results = run_seeds(&cfg, &seeds, &out.join(row.dir_name()))?;
        let class_il: Vec<f64> = results.iter().map(|r| r.final_inference().mean_class_il()).collect();
        rows.push((row, class_il));
        all.extend(results);
    }
    write_metrics(&out, &all)?;
    let table = ablation_table(&rows);
    write_text(&out.join("ablation.tsv"), &table.tsv)?;
    print!("{}", table.text);
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let outcomes = run_suite(&Formulas::ENGINE);
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<22} {:>7.2}s  {}  [{}]", o.id, o.seconds, o.description, o.detail);
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_text(&dir.join("verify.json"), &serde_json::to_string_pretty(&outcomes)?)?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    if !failed.is_empty() {
        bail!("violated invariants: {}", failed.join(", "));
    }
    println!("all {} invariants hold", outcomes.len());
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    if let Some(path) = &args.checkpoint {
        let ck = Checkpoint::load(path)?;
        let mut text = String::from("name\tshape\tlen\n");
        for (name, t) in &ck.tensors {
            text.push_str(&format!("{name}\t{:?}\t{}\n", t.shape(), t.len()));
        }
        write_text(&args.out.join("checkpoint.tsv"), &text)?;
        println!("{} tensors listed", ck.tensors.len());
        return Ok(());
    }
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let split = load_data(&cfg)?;
    let tasks = make_tasks(&cfg, &split)?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml()?)?;
    write_text(&args.out.join("tasks.json"), &serde_json::to_string_pretty(&tasks)?)?;
    for t in &tasks {
        println!(
            "task {}: classes {:?}, {} train, {} test",
            t.task_id,
            t.classes,
            t.train_indices.len(),
            t.test_indices.len()
        );
    }
    Ok(())
}
