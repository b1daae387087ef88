//! Grid of fusion trainings over modality pairs, modes and seeds. Cells run
//! on a bounded rayon pool; rows are always emitted in grid order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fiona_core::metrics;
use fiona_core::models::Architecture;
use fiona_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{fit, load_pair};
use crate::config::RunConfig;

#[derive(Debug, Clone)]
struct Cell {
    pair: (String, String),
    mode: Architecture,
    seed: u64,
}

impl Cell {
    fn pair_name(&self) -> String {
        format!("{}+{}", self.pair.0, self.pair.1)
    }
}

#[derive(Serialize)]
struct Row {
    pair: String,
    mode: String,
    seed: u64,
    eer: String,
}

fn parse_pair(text: &str) -> Result<(String, String)> {
    match text.split_once('+') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains('+') => Ok((a.to_string(), b.to_string())),
        _ => Err(Error::Config(format!("pair {text:?} is not of the form name+name"))),
    }
}

fn parse_mode(name: &str) -> Result<Architecture> {
    match name {
        "concat" => Ok(Architecture::ConcatFusion),
        "fiona" => Ok(Architecture::Fiona),
        other => Err(Error::Config(format!("sweep mode {other:?} is not concat or fiona"))),
    }
}

fn femb(dir: &Path, name: &str, portion: &str) -> PathBuf {
    dir.join(format!("{name}_{portion}.femb"))
}

fn run_cell(cfg: &RunConfig, dir: &Path, cell: &Cell) -> Result<f64> {
    let mut cell_cfg = cfg.clone();
    cell_cfg.seed = Some(cell.seed);
    let (a, b) = (&cell.pair.0, &cell.pair.1);
    let train_data = load_pair(&femb(dir, a, "train"), &femb(dir, b, "train"))?;
    let eval_data = load_pair(&femb(dir, a, "eval"), &femb(dir, b, "eval"))?;
    let fitted = fit(&cell_cfg, cell.mode, &train_data, &eval_data)?;
    metrics::eer(&fitted.scores)
}

fn summary(pairs: &[(String, String)], modes: &[Architecture], cells: &[Cell], results: &[Result<f64>]) -> String {
    let mut md = String::from("| Pair |");
    for m in modes {
        write!(md, " {m} EER (%) |").unwrap();
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(modes.len()));
    md.push('\n');
    for (a, b) in pairs {
        write!(md, "| {a} + {b} |").unwrap();
        for &m in modes {
            let ok: Vec<f64> = cells
                .iter()
                .zip(results)
                .filter(|(c, _)| c.mode == m && c.pair.0 == *a && c.pair.1 == *b)
                .filter_map(|(_, r)| r.as_ref().ok().copied())
                .collect();
            if ok.is_empty() {
                md.push_str(" failed |");
            } else {
                write!(md, " {:.2} |", 100.0 * ok.iter().sum::<f64>() / ok.len() as f64).unwrap();
            }
        }
        md.push('\n');
    }
    let failures: Vec<String> = cells
        .iter()
        .zip(results)
        .filter_map(|(c, r)| r.as_ref().err().map(|e| format!("- {} {} seed {}: {e}", c.pair_name(), c.mode, c.seed)))
        .collect();
    if !failures.is_empty() {
        write!(md, "\nFailed cells:\n\n{}\n", failures.join("\n")).unwrap();
    }
    md
}

pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.sweep;
    let dir = s
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("--data is required (flag or config file)".into()))?;
    let pairs = s
        .pairs
        .as_deref()
        .filter(|p| !p.is_empty())
        .ok_or_else(|| Error::Config("--pairs is required (flag or config file)".into()))?
        .iter()
        .map(|p| parse_pair(p))
        .collect::<Result<Vec<_>>>()?;
    let mode_names = s.modes.clone().unwrap_or_else(|| vec!["concat".into(), "fiona".into()]);
    let modes = mode_names.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>>>()?;
    let seeds = s.seeds.clone().unwrap_or_else(|| vec![cfg.seed()]);
    let jobs = s.jobs.unwrap_or(1);
    if jobs == 0 || modes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("jobs, modes and seeds must be non-empty".into()));
    }

    let mut cells = Vec::with_capacity(pairs.len() * modes.len() * seeds.len());
    for pair in &pairs {
        for &mode in &modes {
            for &seed in &seeds {
                cells.push(Cell {
                    pair: pair.clone(),
                    mode,
                    seed,
                });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<f64>> = pool.install(|| cells.par_iter().map(|c| run_cell(cfg, dir, c)).collect());

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    for (cell, result) in cells.iter().zip(&results) {
        let eer = match result {
            Ok(v) => format!("{:.4}", 100.0 * v),
            Err(e) => {
                eprintln!("{} {} seed {} failed: {e}", cell.pair_name(), cell.mode, cell.seed);
                "failed".to_string()
            }
        };
        csv.serialize(Row {
            pair: cell.pair_name(),
            mode: cell.mode.to_string(),
            seed: cell.seed,
            eer,
        })
        .expect("rows serialize to memory");
    }
    let csv_path = out.join("results.csv");
    let bytes = csv.into_inner().expect("in-memory writer");
    std::fs::write(&csv_path, bytes).map_err(|e| Error::io(&csv_path, e))?;
    let table = summary(&pairs, &modes, &cells, &results);
    let md_path = out.join("summary.md");
    std::fs::write(&md_path, &table).map_err(|e| Error::io(&md_path, e))?;

    let mut echo = cfg.with_training_defaults();
    echo.sweep.modes = Some(mode_names);
    echo.sweep.seeds = Some(seeds);
    echo.sweep.jobs = Some(jobs);
    echo.write(&out.join("config.toml"))?;

    print!("{table}");
    let failed = results.iter().filter(|r| r.is_err()).count();
    println!("{} of {} cells succeeded", cells.len() - failed, cells.len());
    if failed == cells.len() {
        let first = results.into_iter().find_map(Result::err).expect("all failed");
        return Err(first);
    }
    Ok(())
}
