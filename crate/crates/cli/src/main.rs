use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dnas::config::{from_json_str, load_json, write_json, RunConfig};
use dnas::cost::{CostTable, Objective};
use dnas::data::DatasetSpec;
use dnas::oracle::{oracle_rank, DesignSpace};
use dnas::pipeline::{
    evaluate_full, load_network, run_search, sample_from_snapshot, save_network, split_search_data, split_seed,
    train_child, train_queue, SearchSummary,
};
use dnas::supernet::{Architecture, SuperNetSpec, ThetaSnapshot};
use dnas::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dnas", version, about = "Mixed-precision architecture search for ConvNets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a super net and write the run directory.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also train every sampled architecture and fill in results.csv.
        #[arg(long)]
        train_children: bool,
        /// Replaces the search seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one architecture from scratch and evaluate it.
    TrainChild {
        /// Architecture JSON, or an `archs/NNN.json` file of a search run.
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset description (the `data` section of a run config).
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the cost report of an architecture.
    Cost {
        #[arg(long)]
        arch: PathBuf,
        /// Network description, or a run config holding one.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "size")]
        objective: Objective,
    },
    /// Train and rank every architecture of a small design space.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Search run directories whose selections are located in the ranking.
        #[arg(long = "search")]
        searches: Vec<PathBuf>,
    },
    /// Draw architectures from a logit snapshot.
    Sample {
        #[arg(long)]
        theta: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_run(path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = load_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a JSON file that is either the value itself or an object holding
/// it under `key`.
fn load_nested<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> Result<T> {
    let text = read_text(path)?;
    let origin = path.display().to_string();
    let value: serde_json::Value = from_json_str(&text, &origin)?;
    match value.get(key) {
        Some(inner) => from_json_str(&inner.to_string(), &format!("{origin}: {key}")),
        None => from_json_str(&text, &origin),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn search(config: &Path, out: &Path, train_children: bool, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_run(config)?;
    if let Some(s) = seed {
        cfg.search.seed = s;
    }
    let (train, test) = cfg.data.load(&base_dir(config))?;
    fs::create_dir_all(out)?;
    write_json(&out.join("run_config.json"), &cfg)?;
    let (w, t) = split_search_data(&train, cfg.search.split_ratio, split_seed(cfg.search.seed))?;
    let mut outcome = run_search(&cfg.network, &cfg.search, &w, &t, Some(out))?;
    save_network(&outcome.supernet, &out.join("supernet.ckpt"))?;
    if train_children {
        train_queue(
            &mut outcome.queue,
            &cfg.network,
            &train,
            &test,
            &cfg.child,
            Some(&outcome.supernet),
            Some(out),
        )?;
    }
    println!("selected {}", outcome.selected.label());
    println!(
        "sampled {} architectures into {}",
        outcome.queue.entries.len(),
        out.display()
    );
    Ok(())
}

fn train_child_cmd(arch: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = load_run(config)?;
    let arch: Architecture = load_nested(arch, "architecture")?;
    arch.indices(&cfg.network)?;
    let (train, test) = cfg.data.load(&base_dir(config))?;
    fs::create_dir_all(out)?;
    let r = train_child(&cfg.network, &arch, &train, &test, &cfg.child, None)?;
    save_network(&r.network, &out.join("child.ckpt"))?;
    let cost = CostTable::new(&cfg.network, cfg.search.cost.objective, cfg.search.cost.count_bias)?
        .report(&cfg.network, &arch)?;
    let result = json!({
        "architecture": arch,
        "failed": r.failed(),
        "accuracy": r.evaluation.map(|e| e.accuracy),
        "cross_entropy": r.evaluation.map(|e| e.cross_entropy),
        "final_train_loss": r.final_loss,
        "cost": cost,
    });
    write_json(&out.join("result.json"), &result)?;
    match r.evaluation {
        Some(e) => println!("accuracy {}", e.accuracy),
        None => println!("training diverged"),
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let mut net = load_network(checkpoint)?;
    if net.is_supernet() && net.num_blocks() > 0 {
        return Err(Error::InvalidArgument(
            "checkpoint holds a super net; evaluate a child checkpoint instead".into(),
        ));
    }
    let spec: DatasetSpec = load_nested(data, "data")?;
    let (_, test) = spec.load(&base_dir(data))?;
    let e = evaluate_full(&mut net, &test, None, 256)?;
    println!("accuracy {}", e.accuracy);
    Ok(())
}

fn cost(arch: &Path, spec: &Path, objective: Objective) -> Result<()> {
    let spec: SuperNetSpec = load_nested(spec, "network")?;
    let arch: Architecture = load_nested(arch, "architecture")?;
    let report = CostTable::new(&spec, objective, false)?.report(&spec, &arch)?;
    print_json(&report)
}

fn oracle(config: &Path, out: &Path, searches: &[PathBuf]) -> Result<()> {
    let cfg = load_run(config)?;
    let (train, test) = cfg.data.load(&base_dir(config))?;
    let child = cfg.oracle.child.clone().unwrap_or_else(|| cfg.child.clone());
    fs::create_dir_all(out)?;
    let space = DesignSpace::new(&cfg.network)?;
    let ranking = oracle_rank(&space, &train, &test, &child, &cfg.search.cost, cfg.oracle.limit)?;
    ranking.write_csv(&out.join("oracle_results.csv"))?;
    write_json(&out.join("ranking.json"), &ranking)?;
    println!("ranked {} architectures", ranking.len());
    let mut located = Vec::new();
    for dir in searches {
        let summary: SearchSummary = load_json(&dir.join("summary.json"))?;
        let p = ranking.percentile_of(&summary.selected)?;
        println!("{}: {} at percentile {:.3}", dir.display(), summary.selected.label(), p);
        located.push(json!({
            "run": dir,
            "selected": summary.selected.label(),
            "percentile": p,
        }));
    }
    if !located.is_empty() {
        write_json(&out.join("percentiles.json"), &located)?;
    }
    Ok(())
}

fn sample(theta: &Path, n: usize, seed: u64) -> Result<()> {
    let snap: ThetaSnapshot = load_json(theta)?;
    let archs = sample_from_snapshot(&snap, &snap.choice_spec(), n, seed)?;
    print_json(&archs)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Search {
            config,
            out,
            train_children,
            seed,
        } => search(config, out, *train_children, *seed),
        Command::TrainChild { arch, config, out } => train_child_cmd(arch, config, out),
        Command::Eval { checkpoint, data } => eval(checkpoint, data),
        Command::Cost { arch, spec, objective } => cost(arch, spec, *objective),
        Command::Oracle { config, out, searches } => oracle(config, out, searches),
        Command::Sample { theta, n, seed } => sample(theta, *n, *seed),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
