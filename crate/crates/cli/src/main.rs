//! `opride` command line: data generation, runs, sweeps, the theory loop,
//! policy evaluation and the label service.
//!
//! Any `--section.key=value` argument overrides the matching config key.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use opride::dataset::OfflineDataset;
use opride::orchestrator::{
    build_environment, eval_policy, run_session, sweep, write_metrics, write_sweep_csv, ExperimentConfig, Session,
    SweepAxis,
};
use opride::query::write_query_log;
use opride::reward::{annotate, RewardEnsemble};
use opride::theory::TheoryExperiment;
use opride::{Policy, TabularMdp};

#[derive(Parser)]
#[command(name = "opride", version, about = "Offline preference-based RL with in-dataset exploration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline dataset a run would use.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "dataset.jsonl")]
        out: PathBuf,
    },
    /// Run the query loop with the scripted teacher.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset from `gen-data`; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run the cross product of override grids over several seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=v1,v2,...`; repeat for more axes.
        #[arg(long = "grid")]
        grid: Vec<String>,
        /// `a..b` (exclusive) or a comma list.
        #[arg(long, default_value = "0..20")]
        seeds: String,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Repeated confidence-set exploration trials on finite families.
    TheoryRun {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "theory-out")]
        out_dir: PathBuf,
    },
    /// Exact suboptimality of a saved policy, plus reward correlation of a saved ensemble.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Serve the labeling API (and UI files) for a human teacher.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Accepted answers are appended here as query-log lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

/// Splits `--a.b=value` arguments (dotted key) from the ones clap parses.
fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        match arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            Some((key, _)) if key.contains('.') => overrides.push(arg[2..].to_string()),
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(overrides)?)
}

fn read_dataset(path: &Path, mdp: &TabularMdp) -> Result<OfflineDataset> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(OfflineDataset::read_jsonl(BufReader::new(file), mdp)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("seed range {text} is empty");
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| Ok(s.trim().parse()?)).collect()
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (_, dataset) = build_environment(cfg)?;
    let mut w = create(out)?;
    dataset.write_jsonl(&mut w)?;
    w.flush()?;
    let counts = dataset.pair_counts();
    let covered = counts.iter().filter(|&&c| c > 0).count();
    println!(
        "wrote {} trajectories to {} ({covered}/{} state-action pairs covered)",
        dataset.trajectories.len(),
        out.display(),
        counts.len()
    );
    Ok(())
}

fn run(cfg: ExperimentConfig, dataset: Option<&Path>, out_dir: &Path) -> Result<()> {
    let session = match dataset {
        Some(path) => {
            let mdp = cfg.environment.build()?;
            let data = read_dataset(path, &mdp)?;
            Session::with_dataset(cfg.clone(), mdp, data)?
        }
        None => Session::new(cfg.clone())?,
    };
    let report = run_session(session)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let mut w = create(&out_dir.join("metrics.jsonl"))?;
    write_metrics(&report.metrics, &mut w)?;
    w.flush()?;
    let mut w = create(&out_dir.join("queries.jsonl"))?;
    write_query_log(report.session.query_log(), &mut w)?;
    w.flush()?;
    fs::write(out_dir.join("policy.json"), serde_json::to_string_pretty(&report.outcome.policy)?)?;
    fs::write(out_dir.join("outcome.json"), serde_json::to_string_pretty(&report.outcome)?)?;
    if let Some(ensemble) = report.session.final_ensemble() {
        fs::write(out_dir.join("ensemble.json"), ensemble.to_json())?;
    }
    for m in &report.metrics {
        println!(
            "round {:>3}  subopt {:>9.4}  reward corr {:>7.4}  score {:>9.4}  label {}",
            m.round, m.suboptimality, m.reward_correlation, m.score, m.label
        );
    }
    println!(
        "final suboptimality {:.6}  reward correlation {:.4}  (outputs in {})",
        report.outcome.suboptimality,
        report.outcome.reward_correlation,
        out_dir.display()
    );
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, grid: &[String], seeds: &str, workers: Option<usize>, out: &Path) -> Result<()> {
    let axes = grid.iter().map(|g| SweepAxis::parse(g)).collect::<opride::Result<Vec<_>>>()?;
    let seeds = parse_seeds(seeds)?;
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let runs = sweep(cfg, &axes, &seeds, workers)?;
    let mut w = create(out)?;
    write_sweep_csv(&runs, &mut w)?;
    w.flush()?;

    let n_cells = runs.iter().map(|r| r.cell + 1).max().unwrap_or(0);
    for cell in 0..n_cells {
        let in_cell: Vec<_> = runs.iter().filter(|r| r.cell == cell).collect();
        let finals: Vec<f64> = in_cell
            .iter()
            .filter_map(|r| r.result.as_ref().ok().map(|(_, o)| o.suboptimality))
            .collect();
        let failed = in_cell.len() - finals.len();
        let mean = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
        println!(
            "cell {cell} [{}]: mean final subopt {mean:.4} over {} seeds{}",
            in_cell[0].overrides.join(" "),
            finals.len(),
            if failed > 0 { format!(", {failed} failed") } else { String::new() }
        );
    }
    println!("wrote {}", out.display());
    if runs.iter().any(|r| r.result.is_err()) {
        bail!("some sweep runs failed; see the error rows in {}", out.display());
    }
    Ok(())
}

fn theory_run(exp: &TheoryExperiment, out_dir: &Path) -> Result<()> {
    let trials = exp.run_trials()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), exp.to_toml())?;
    let mut records = create(&out_dir.join("records.jsonl"))?;
    let mut csv = create(&out_dir.join("subopt.csv"))?;
    writeln!(csv, "trial,k,subopt")?;
    for t in &trials {
        for r in &t.outcome.records {
            let mut line = serde_json::to_value(r)?;
            line["trial"] = t.trial.into();
            serde_json::to_writer(&mut records, &line)?;
            records.write_all(b"\n")?;
            writeln!(csv, "{},{},{}", t.trial, r.round, r.subopt_running)?;
        }
    }
    records.flush()?;
    csv.flush()?;

    let n = trials.len() as f64;
    let mean = trials.iter().map(|t| t.subopt).sum::<f64>() / n;
    println!("trials {}  budget {}  mean SubOpt(mixture) {mean:.4}", trials.len(), exp.theory.budget);
    let covered: Vec<bool> = trials.iter().filter_map(|t| t.covered).collect();
    if !covered.is_empty() {
        let hits = covered.iter().filter(|c| **c).count();
        println!("true reward in final confidence set: {hits}/{}", covered.len());
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, policy: &Path, ensemble: Option<&Path>, dataset: Option<&Path>) -> Result<()> {
    let (mdp, generated) = build_environment(cfg)?;
    let text = fs::read_to_string(policy).with_context(|| format!("reading {}", policy.display()))?;
    let policy: Policy = serde_json::from_str(&text)?;
    let labeled = match ensemble {
        Some(path) => {
            let data = match dataset {
                Some(p) => read_dataset(p, &mdp)?,
                None => generated,
            };
            let ens = RewardEnsemble::from_json(&fs::read_to_string(path)?)?;
            Some(annotate(&data, &ens)?)
        }
        None => None,
    };
    let evaluation = eval_policy(&mdp, &policy, labeled.as_ref())?;
    println!("{}", serde_json::to_string(&evaluation)?);
    Ok(())
}

fn serve(cfg: ExperimentConfig, addr: SocketAddr, static_dir: Option<PathBuf>, log: Option<PathBuf>) -> Result<()> {
    let session = Session::new(cfg)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let state = opride_service::AppState::start(session, log);
        println!("serving on http://{addr}");
        opride_service::serve(state, addr, static_dir.as_deref()).await
    })?;
    Ok(())
}

fn main() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    match cli.command {
        Command::GenData { config, out } => gen_data(&load_config(config.as_deref(), &overrides)?, &out),
        Command::Run {
            config,
            dataset,
            out_dir,
        } => run(load_config(config.as_deref(), &overrides)?, dataset.as_deref(), &out_dir),
        Command::Sweep {
            config,
            grid,
            seeds,
            workers,
            out,
        } => run_sweep(&load_config(config.as_deref(), &overrides)?, &grid, &seeds, workers, &out),
        Command::TheoryRun {
            config,
            trials,
            budget,
            seed,
            out_dir,
        } => {
            let mut exp = match config {
                Some(p) => TheoryExperiment::from_toml(&fs::read_to_string(&p)?)?,
                None => TheoryExperiment::default(),
            }
            .with_overrides(&overrides)?;
            exp.trials = trials.unwrap_or(exp.trials);
            exp.theory.budget = budget.unwrap_or(exp.theory.budget);
            exp.seed = seed.unwrap_or(exp.seed);
            exp.validate()?;
            theory_run(&exp, &out_dir)
        }
        Command::Eval {
            config,
            policy,
            ensemble,
            dataset,
        } => eval(
            &load_config(config.as_deref(), &overrides)?,
            &policy,
            ensemble.as_deref(),
            dataset.as_deref(),
        ),
        Command::Serve {
            config,
            host,
            port,
            static_dir,
            log,
        } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid --host/--port")?;
            serve(load_config(config.as_deref(), &overrides)?, addr, static_dir, log)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_flags_become_overrides() {
        let args = ["opride", "run", "--out-dir=x", "--query.strategy=random", "--config", "c.toml", "--run.seed=3"];
        let (rest, overrides) = split_overrides(args.iter().map(|s| s.to_string()));
        assert_eq!(rest, vec!["opride", "run", "--out-dir=x", "--config", "c.toml"]);
        assert_eq!(overrides, vec!["query.strategy=random", "run.seed=3"]);
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("5, 7").unwrap(), vec![5, 7]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
