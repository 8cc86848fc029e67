//! Result files: newline-delimited records plus a CSV projection, and
//! episode-log audit files.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pareto::ParetoPoint;
use super::runner::{CellResult, LoggedEpisode};
use crate::error::{Error, Result};
use crate::meta::{step_cost, CostParams};

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ResultLine {
    Header { config: ExperimentConfig },
    Cell(CellResult),
}

/// Parsed results file.
#[derive(Clone, Debug)]
pub struct ResultsFile {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
}

/// One header line echoing the config, then one line per cell.
pub fn write_results<P: AsRef<Path>>(
    path: P,
    config: &ExperimentConfig,
    cells: &[CellResult],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut out,
        &ResultLine::Header {
            config: config.clone(),
        },
    )?;
    out.write_all(b"\n")?;
    for cell in cells {
        serde_json::to_writer(&mut out, &ResultLine::Cell(cell.clone()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results<P: AsRef<Path>>(path: P) -> Result<ResultsFile> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut config = None;
    let mut cells = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ResultLine>(&line)? {
            ResultLine::Header { config: c } => config = Some(c),
            ResultLine::Cell(cell) => cells.push(cell),
        }
    }
    Ok(ResultsFile {
        config: config.ok_or_else(|| Error::Input("results file has no header".into()))?,
        cells,
    })
}

/// Flat projection for plotting.
pub fn write_csv<P: AsRef<Path>>(path: P, cells: &[CellResult]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "strategy,alpha,beta,episodes,mean_reward,se_reward,mean_norm_compute,\
         se_norm_compute,mean_norm_latency,se_norm_latency,mean_gen_cost,se_gen_cost,\
         mean_realized_utility,se_realized_utility,mean_samples"
    )?;
    for c in cells {
        let m = &c.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.strategy,
            c.alpha,
            c.beta,
            m.episodes,
            m.mean_reward,
            m.se_reward,
            m.mean_norm_compute,
            m.se_norm_compute,
            m.mean_norm_latency,
            m.se_norm_latency,
            m.mean_gen_cost,
            m.se_gen_cost,
            m.mean_realized_utility,
            m.se_realized_utility,
            m.mean_samples
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_pareto_csv<P: AsRef<Path>>(path: P, points: &[ParetoPoint]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "strategy,alpha,beta,gen_cost,reward,dominated")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.strategy, p.alpha, p.beta, p.gen_cost, p.reward, p.dominated
        )?;
    }
    out.flush()?;
    Ok(())
}

/// One line per episode.
pub fn write_episode_logs<P: AsRef<Path>>(path: P, episodes: &[LoggedEpisode]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for episode in episodes {
        serde_json::to_writer(&mut out, episode)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_episode_logs<P: AsRef<Path>>(path: P) -> Result<Vec<LoggedEpisode>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut episodes = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        episodes.push(serde_json::from_str(&line)?);
    }
    Ok(episodes)
}

/// Outcome of re-deriving every logged cost and realized utility.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub episodes: usize,
    pub cost_mismatches: usize,
    pub incomplete: usize,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.cost_mismatches == 0 && self.incomplete == 0
    }
}

/// Recompute each step's cost from its action and the logged (alpha,
/// beta), and the episode's realized utility, checking both against the
/// recorded values.
pub fn audit_episode_logs(episodes: &[LoggedEpisode]) -> Result<AuditReport> {
    let mut report = AuditReport {
        episodes: episodes.len(),
        ..AuditReport::default()
    };
    for episode in episodes {
        let params = CostParams::new(episode.alpha, episode.beta)?;
        if !episode.log.complete {
            report.incomplete += 1;
            continue;
        }
        let mut consistent = true;
        for step in &episode.log.steps {
            let expected = step_cost(&step.action, &params);
            if (expected - step.cost).abs() > 1e-9 {
                consistent = false;
            }
        }
        let recomputed = episode.log.terminal_reward - episode.log.total_cost();
        if (recomputed - episode.log.realized_utility()?).abs() > 1e-9 {
            consistent = false;
        }
        if !consistent {
            report.cost_mismatches += 1;
        }
    }
    Ok(report)
}
