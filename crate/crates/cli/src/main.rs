use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use lgcl_core::config::ExperimentConfig;
use lgcl_core::trainer::{run_experiment, ExperimentReport, RunOptions};
use lgcl_core::LabError;

#[derive(Parser)]
#[command(name = "lgcl-lab", version, about = "Prompt-pool continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write report.json, metrics.csv and checkpoints.
    Run {
        config: PathBuf,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides [output].dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record wall-clock time in the report (makes it non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Compare final accuracy and forgetting across reports.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Where to write the CSV version of the table.
        #[arg(long, default_value = "comparison.csv")]
        csv: PathBuf,
    },
    /// Print per-task average accuracy as CSV.
    Curve {
        report: PathBuf,
        /// Append a one-line text sparkline.
        #[arg(long)]
        sparkline: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            timing,
        } => cmd_run(&config, seed, out, timing),
        Command::Compare { reports, csv } => cmd_compare(&reports, &csv),
        Command::Curve { report, sparkline } => cmd_curve(&report, sparkline),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(LabError::Config(issues)) = e.downcast_ref::<LabError>() {
                eprintln!("invalid configuration:");
                for issue in issues {
                    eprintln!("  {issue}");
                }
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, timing: bool) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.output.dir = out;
    }
    if cfg.output.dir.is_none() {
        cfg.output.dir = Some(PathBuf::from("runs").join(format!("{}-seed{}", cfg.name, cfg.seed)));
    }
    let opts = RunOptions {
        record_wall_time: timing,
        ..RunOptions::default()
    };
    let outcome = run_experiment(&cfg, &opts)?;
    let dir = cfg.output.dir.as_deref().expect("set above");
    let r = &outcome.report;
    println!(
        "{}: final accuracy {:.2}%, forgetting {}",
        r.name,
        r.final_accuracy(),
        fmt_opt(r.final_forgetting())
    );
    println!("wrote {}", dir.join("report.json").display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into())
}

fn cmd_compare(paths: &[PathBuf], csv: &Path) -> anyhow::Result<()> {
    if paths.len() < 2 {
        bail!("need >= 2 reports to compare, got {}", paths.len());
    }
    let reports = paths
        .iter()
        .map(|p| ExperimentReport::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let sig = &reports[0].dataset_signature;
    for (p, r) in paths.iter().zip(&reports).skip(1) {
        if &r.dataset_signature != sig {
            bail!(
                "{} was run on a different dataset than {} (signature mismatch)",
                p.display(),
                paths[0].display()
            );
        }
    }
    let mark = |v: f64| if v > 0.0 { "yes" } else { "-" };
    let mut table = format!(
        "{:<40} {:>6} {:>7} {:>8} {:>10}\n",
        "report", "L_task", "L_class", "Acc", "Forgetting"
    );
    let mut out = String::from("report,seed,lambda_task,lambda_class,final_accuracy,final_forgetting\n");
    for r in &reports {
        let w = r.config.effective_loss();
        table.push_str(&format!(
            "{:<40} {:>6} {:>7} {:>8.2} {:>10}\n",
            r.name,
            mark(w.lambda_task),
            mark(w.lambda_class),
            r.final_accuracy(),
            fmt_opt(r.final_forgetting())
        ));
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name,
            r.seed,
            w.lambda_task,
            w.lambda_class,
            r.final_accuracy(),
            r.final_forgetting().map(|f| f.to_string()).unwrap_or_default()
        ));
    }
    print!("{table}");
    std::fs::write(csv, out).with_context(|| format!("writing {}", csv.display()))?;
    Ok(())
}

fn sparkline(values: &[f64]) -> String {
    const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
    values
        .iter()
        .map(|&v| BARS[((v.clamp(0.0, 100.0) / 100.0) * 7.0).round() as usize])
        .collect()
}

fn cmd_curve(path: &Path, spark: bool) -> anyhow::Result<()> {
    let report = ExperimentReport::load(path)?;
    println!("task,avg_accuracy");
    for (t, a) in report.avg_accuracy.iter().enumerate() {
        println!("{t},{a}");
    }
    if spark {
        println!("# {}", sparkline(&report.avg_accuracy));
    }
    Ok(())
}
