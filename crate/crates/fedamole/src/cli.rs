//! Experiment runner CLI: `run` executes a seed sweep for one mode and
//! writes event logs plus a summary CSV; `report` compares modes by MTAL.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fed::{run_training, Mode};

#[derive(Parser, Debug)]
#[command(name = "fedamole", about = "Federated fine-tuning simulator with heterogeneous LoRA-expert mixtures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one mode over a seed sweep and write results to a directory.
    Run {
        /// JSON config file; an empty file selects all defaults.
        #[arg(long)]
        config: PathBuf,
        /// fedamole | fedit | fedit_ft | ablate-h | ablate-s | ablate-r | random
        #[arg(long)]
        mode: String,
        /// Comma-separated seed list; defaults to the config's seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a summary CSV as a per-mode MTAL table.
    Report {
        #[arg(long)]
        summary: PathBuf,
    },
}

fn verbose() -> bool {
    !matches!(std::env::var("FEDAMOLE_LOG").as_deref(), Ok("quiet"))
}

pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Invalid(format!("bad seed `{s}`"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Invalid("empty seed list".into()));
    }
    Ok(seeds)
}

/// Write then rename, so readers never observe a partial file.
pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize)]
struct RunHeader<'a> {
    mode: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    mode: &'a str,
    seed: u64,
    round: usize,
    client: usize,
    acc: f64,
    loss: f64,
    experts_assigned: usize,
}

/// Execute a seed sweep; returns the MTAL per seed in seed order.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    mode: Mode,
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<(u64, f64)>> {
    fs::create_dir_all(out)?;
    let mut summary = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut mtal_rows = Vec::new();
    for &seed in seeds {
        if verbose() {
            eprintln!("running mode={} seed={}", mode.as_str(), seed);
        }
        let (log, events) = run_training(cfg, mode, seed)?;

        // JSON-lines event log; the first line is the resolved run header
        let mut text = serde_json::to_string(&RunHeader { mode: mode.as_str(), seed, config: cfg })?;
        text.push('\n');
        for e in &events {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        atomic_write(&out.join(format!("events_{}_{}.jsonl", mode.as_str(), seed)), &text)?;

        for e in &events {
            summary.serialize(SummaryRow {
                mode: mode.as_str(),
                seed,
                round: e.round,
                client: e.client,
                acc: e.accuracy,
                loss: e.mean_loss,
                experts_assigned: e.experts_assigned,
            })?;
        }
        mtal_rows.push((seed, log.mtal()?));
    }

    let bytes = summary.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    atomic_write(&out.join("summary.csv"), &String::from_utf8_lossy(&bytes))?;

    let mut mtal_csv = String::from("mode,seed,mtal\n");
    for (seed, mtal) in &mtal_rows {
        mtal_csv.push_str(&format!("{},{},{}\n", mode.as_str(), seed, mtal));
    }
    atomic_write(&out.join("mtal.csv"), &mtal_csv)?;
    Ok(mtal_rows)
}

/// Per-mode mean and population standard deviation of MTAL.
pub fn summarize(csv_text: &str) -> Result<Vec<(String, usize, f64, f64)>> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Invalid(format!("summary CSV missing column `{name}`")))
    };
    let (c_mode, c_seed, c_round, c_acc) =
        (col("mode")?, col("seed")?, col("round")?, col("acc")?);

    // (mode, seed) -> round -> accs
    let mut runs: BTreeMap<(String, u64), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let parse_err = |c: usize| Error::Invalid(format!("bad value `{}` in summary", &record[c]));
        let mode = record[c_mode].to_string();
        let seed: u64 = record[c_seed].parse().map_err(|_| parse_err(c_seed))?;
        let round: usize = record[c_round].parse().map_err(|_| parse_err(c_round))?;
        let acc: f64 = record[c_acc].parse().map_err(|_| parse_err(c_acc))?;
        runs.entry((mode, seed)).or_default().entry(round).or_default().push(acc);
    }
    if runs.is_empty() {
        return Err(Error::Invalid("summary CSV contains no rows".into()));
    }

    let mut per_mode: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((mode, _), rounds) in runs {
        let (_, accs) = rounds.iter().next_back().expect("non-empty run");
        let mtal = accs.iter().sum::<f64>() / accs.len() as f64;
        per_mode.entry(mode).or_default().push(mtal);
    }

    Ok(per_mode
        .into_iter()
        .map(|(mode, mtals)| {
            let n = mtals.len();
            let mean = mtals.iter().sum::<f64>() / n as f64;
            let var = mtals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            (mode, n, mean, var.sqrt())
        })
        .collect())
}

pub fn report(summary_path: &Path) -> Result<String> {
    let text = fs::read_to_string(summary_path)?;
    let rows = summarize(&text)?;
    let mut out = String::from("mode        seeds  mtal_mean  mtal_std (population)\n");
    for (mode, n, mean, std) in rows {
        out.push_str(&format!("{:<11} {:<6} {:<10.4} {:.4}\n", mode, n, mean, std));
    }
    Ok(out)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, mode, seeds, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let mode = Mode::from_str(&mode)?;
            let seeds = match seeds {
                Some(s) => parse_seeds(&s)?,
                None => cfg.seeds.clone(),
            };
            let mtals = run_sweep(&cfg, mode, &seeds, &out)?;
            for (seed, mtal) in mtals {
                println!("mode={} seed={} mtal={:.4}", mode.as_str(), seed, mtal);
            }
            Ok(())
        }
        Command::Report { summary } => {
            print!("{}", report(&summary)?);
            Ok(())
        }
    }
}
