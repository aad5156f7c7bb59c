use std::collections::{BTreeSet, VecDeque};
use std::fs::File;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use clap::Args;
use log::{info, warn};

use dst_core::evaluator::{ResultRecord, RESULT_FILE};
use dst_core::schema::{DescriptionVariant, Domain};
use dst_core::trainer::{CheckpointRef, ExperimentConfig, Protocol, MANIFEST_FILE};
use dst_core::Error;

use crate::commands::{parse_variants, write_if_changed};
use crate::report::{render_markdown, write_report};
use crate::{ConfigArgs, EXIT_RUN};

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated target domains; all five when omitted. Ignored for full-shot.
    #[arg(long)]
    pub domains: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    /// Comma-separated description variants, or `all`.
    #[arg(long)]
    pub variants: Option<String>,
    /// Runs executed at once, each in its own process.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn parse_domains(spec: &str) -> dst_core::Result<Vec<Domain>> {
    let domains: BTreeSet<Domain> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<dst_core::Result<_>>()?;
    if domains.is_empty() {
        return Err(Error::Config("no domains given".into()));
    }
    Ok(domains.into_iter().collect())
}

fn parse_seeds(spec: &str) -> dst_core::Result<Vec<u64>> {
    let seeds: BTreeSet<u64> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("seed `{s}` is not a non-negative integer")))
        })
        .collect::<dst_core::Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    Ok(seeds.into_iter().collect())
}

/// The cross product of the grid, one validated configuration per run.
pub fn plan(
    template: &ExperimentConfig,
    domains: &[Domain],
    seeds: &[u64],
    variants: &[DescriptionVariant],
) -> dst_core::Result<Vec<ExperimentConfig>> {
    let targets: Vec<Option<Domain>> = match template.protocol {
        Protocol::FullShot => vec![None],
        _ => domains.iter().copied().map(Some).collect(),
    };
    let mut runs = Vec::new();
    for &variant in variants {
        for &target in &targets {
            for &seed in seeds {
                let mut config = template.clone();
                config.variant = variant;
                config.target_domain = target;
                config.seed = seed;
                config.validate()?;
                runs.push(config);
            }
        }
    }
    Ok(runs)
}

/// A run is done when its record matches the checkpoint of its manifest.
fn finished(config: &ExperimentConfig) -> bool {
    let dir = config.run_dir();
    if !dir.join(MANIFEST_FILE).exists() {
        return false;
    }
    match (CheckpointRef::open(&dir), ResultRecord::load(&dir.join(RESULT_FILE))) {
        (Ok(run), Ok(record)) => {
            record.checkpoint_hash == run.manifest.checkpoint_hash && dir.join(&record.predictions).exists()
        }
        _ => false,
    }
}

struct Job {
    run_id: String,
    child: Child,
}

fn spawn(config: &ExperimentConfig, out: &std::path::Path) -> anyhow::Result<Job> {
    let run_id = config.run_id();
    let configs = out.join("configs");
    let logs = out.join("logs");
    std::fs::create_dir_all(&logs).map_err(Error::from)?;
    let config_path = configs.join(format!("{run_id}.toml"));
    write_if_changed(&config_path, config.to_toml().as_bytes()).map_err(Error::from)?;
    let log = File::create(logs.join(format!("{run_id}.log"))).map_err(Error::from)?;
    let child = Command::new(std::env::current_exe()?)
        .arg("train")
        .arg("--config")
        .arg(&config_path)
        .arg("--evaluate")
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log)
        .spawn()?;
    Ok(Job { run_id, child })
}

pub fn sweep(args: &SweepArgs) -> anyhow::Result<u8> {
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()).into());
    }
    let template = args.config.build()?;
    let domains = match &args.domains {
        Some(spec) => parse_domains(spec)?,
        None => Domain::ALL.to_vec(),
    };
    let seeds = parse_seeds(&args.seeds)?;
    let variants = match &args.variants {
        Some(spec) => parse_variants(spec)?,
        None => vec![template.variant],
    };
    let runs = plan(&template, &domains, &seeds, &variants)?;
    let out = template.output_dir.clone();

    let (done, todo): (Vec<&ExperimentConfig>, Vec<&ExperimentConfig>) = runs.iter().partition(|c| finished(c));
    info!(
        "sweep of {} runs: {} already complete, {} to run with {} jobs",
        runs.len(),
        done.len(),
        todo.len(),
        args.jobs
    );
    let mut queue: VecDeque<&ExperimentConfig> = todo.into_iter().collect();
    let mut running: Vec<Job> = Vec::new();
    let mut failures: Vec<(String, i32)> = Vec::new();
    while !queue.is_empty() || !running.is_empty() {
        while running.len() < args.jobs {
            let Some(config) = queue.pop_front() else { break };
            info!("starting {}", config.run_id());
            running.push(spawn(config, &out)?);
        }
        let mut still = Vec::new();
        for mut job in running {
            match job.child.try_wait()? {
                Some(status) if status.success() => info!("finished {}", job.run_id),
                Some(status) => {
                    let code = status.code().unwrap_or(i32::from(EXIT_RUN));
                    warn!(
                        "{} failed with exit code {code}; see logs/{}.log",
                        job.run_id, job.run_id
                    );
                    failures.push((job.run_id, code));
                }
                None => still.push(job),
            }
        }
        running = still;
        if !running.is_empty() {
            std::thread::sleep(Duration::from_millis(100));
        }
    }

    let records: Vec<ResultRecord> = runs
        .iter()
        .filter_map(|c| ResultRecord::load(&c.run_dir().join(RESULT_FILE)).ok())
        .collect();
    println!(
        "sweep: {} runs, {} skipped as complete, {} failed",
        runs.len(),
        done.len(),
        failures.len()
    );
    if !records.is_empty() {
        let summary = write_report(&records, &out)?;
        print!("{}", render_markdown(&summary));
    }
    if let Some((run_id, code)) = failures.first() {
        eprintln!(
            "error: {} of {} runs failed, first {run_id}",
            failures.len(),
            runs.len()
        );
        return Ok(u8::try_from(*code).ok().filter(|c| *c != 0).unwrap_or(EXIT_RUN));
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_the_full_cross_product() {
        let template = ExperimentConfig::default();
        let runs = plan(&template, &Domain::ALL, &[0, 1, 2], &[DescriptionVariant::SlotType]).unwrap();
        assert_eq!(runs.len(), 15);
        let ids: BTreeSet<String> = runs.iter().map(ExperimentConfig::run_id).collect();
        assert_eq!(ids.len(), 15);
        let full = ExperimentConfig {
            protocol: Protocol::FullShot,
            ..Default::default()
        };
        let runs = plan(&full, &Domain::ALL, &[0, 1], &DescriptionVariant::ALL).unwrap();
        assert_eq!(runs.len(), 12);
        assert!(runs.iter().all(|c| c.target_domain.is_none()));
    }

    #[test]
    fn list_flags_parse_and_reject_garbage() {
        assert_eq!(parse_seeds("2, 0,1").unwrap(), vec![0, 1, 2]);
        assert!(matches!(parse_seeds("x"), Err(Error::Config(_))));
        assert_eq!(parse_domains("taxi,hotel").unwrap(), vec![Domain::Hotel, Domain::Taxi]);
        assert!(parse_domains("hospital").is_err());
        assert!(matches!(parse_domains(","), Err(Error::Config(_))));
    }
}
