//! Command-line front end: flat-text scenario configs, policy x lambda
//! sweeps with replications, CSV output and a summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Parser;
use thiserror::Error;

use crate::configurator::Policy;
use crate::model::ContentCatalog;
use crate::simulator::{
    build_world, csv_batch_row, csv_summary_row, derive_seed, run, RunReport, ScenarioConfig,
    SimError, CSV_HEADER,
};
use crate::stats::batch_means_ci;
use crate::topology::dump_topology;
use crate::units::{ContentId, Rate};

/// Environment variable that overrides the configured base seed.
pub const SEED_ENV: &str = "MESHWEAVE_SEED";

// sub-seed tags separating the sweep's derivation domains
const SWEEP_RUN_TAG: u64 = 11;
const SWEEP_WORLD_TAG: u64 = 12;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("config error at line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

/// A parsed sweep: the base scenario plus the swept dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ScenarioConfig,
    pub policies: Vec<Policy>,
    pub lambda_inv_values: Vec<f64>,
    pub replications: usize,
    pub output_path: Option<PathBuf>,
}

fn default_lambdas() -> Vec<f64> {
    vec![1800.0, 3600.0, 7200.0, 14400.0, 28800.0]
}

/// Parses the flat `key = value` config format. Unknown keys, malformed
/// values and inconsistent combinations are rejected with line numbers.
pub fn parse_config(text: &str) -> Result<SweepSpec, ConfigError> {
    let mut base = ScenarioConfig::default();
    let mut policies = Policy::ALL.to_vec();
    let mut lambdas = default_lambdas();
    let mut replications = 1usize;
    let mut distribution: Option<(usize, Vec<(Vec<ContentId>, f64)>)> = None;
    let mut content_count_line = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |msg: String| ConfigError { line, msg };
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(format!("expected key = value, got {content:?}")))?;
        if value.is_empty() {
            return Err(err(format!("key {key:?} has no value")));
        }
        macro_rules! parse_as {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|e| err(format!("invalid value for {key}: {e}")))?
            };
        }
        let parse_rate = |key: &str| -> Result<Rate, ConfigError> {
            let mbps: f64 = value
                .parse()
                .map_err(|e| err(format!("invalid value for {key}: {e}")))?;
            if !mbps.is_finite() || mbps < 0.0 {
                return Err(err(format!("invalid value for {key}: must be non-negative Mbps")));
            }
            Ok(Rate::from_mbps(mbps))
        };
        match key {
            "peer_count" => base.peer_count = parse_as!(usize),
            "as_count" => base.as_count = parse_as!(u32),
            "edges_per_node" => base.edges_per_node = parse_as!(u32),
            "content_count" => {
                base.content_count = parse_as!(usize);
                content_count_line = line;
            }
            "oss_per_content" => base.oss_per_content = parse_as!(usize),
            "oss_bandwidth" => base.oss_bandwidth = parse_rate(key)?,
            "peer_bandwidth_min" => base.peer_bandwidth_min = parse_rate(key)?,
            "peer_bandwidth_max" => base.peer_bandwidth_max = parse_rate(key)?,
            "view_rate" => base.view_rate = parse_rate(key)?,
            "hop_limit" => base.hop_limit = parse_as!(u32),
            "reserve_budget" => base.reserve_budget = parse_as!(usize),
            "bandwidth_class" => base.bandwidth_class = parse_rate(key)?,
            "request_distribution" => {
                distribution = Some((line, parse_distribution(line, value)?));
            }
            "mean_viewing_s" => base.mean_viewing_s = parse_as!(f64),
            "viewing_cv" => base.viewing_cv = parse_as!(f64),
            "lambda_inv_s" => {
                lambdas = split_list(value)
                    .map(|tok| {
                        tok.parse::<f64>()
                            .map_err(|e| err(format!("invalid lambda_inv_s entry {tok:?}: {e}")))
                    })
                    .collect::<Result<_, _>>()?;
                if lambdas.is_empty() {
                    return Err(err("lambda_inv_s must list at least one value".into()));
                }
            }
            "policies" => {
                policies = split_list(value)
                    .map(|tok| {
                        tok.parse::<Policy>()
                            .map_err(|e| err(e.to_string()))
                    })
                    .collect::<Result<_, _>>()?;
                if policies.is_empty() {
                    return Err(err("policies must list at least one policy".into()));
                }
            }
            "replications" => {
                replications = parse_as!(usize);
                if replications == 0 {
                    return Err(err("replications must be at least 1".into()));
                }
            }
            "sim_days" => base.sim_days = parse_as!(u32),
            "warmup_days" => base.warmup_days = parse_as!(u32),
            "batch_days" => base.batch_days = parse_as!(u32),
            "seed" => base.seed = parse_as!(u64),
            _ => return Err(err(format!("unknown key {key:?}"))),
        }
    }

    base.request_distribution = match distribution {
        Some((line, entries)) => ContentCatalog::new(base.content_count, entries)
            .map_err(|msg| ConfigError { line, msg })?,
        None => {
            if base.content_count == 0 || base.content_count > 16 {
                return Err(ConfigError {
                    line: content_count_line,
                    msg: "content_count must be between 1 and 16".into(),
                });
            }
            ContentCatalog::uniform_nonempty(base.content_count)
        }
    };
    base.world_seed = base.seed;
    if let Err(msg) = base.validate() {
        return Err(ConfigError { line: 0, msg });
    }
    Ok(SweepSpec {
        base,
        policies,
        lambda_inv_values: lambdas,
        replications,
        output_path: None,
    })
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|t| !t.is_empty())
}

/// Parses "1:1, 2:1, 1+2:1" into subset/weight pairs (one-based labels).
fn parse_distribution(
    line: usize,
    value: &str,
) -> Result<Vec<(Vec<ContentId>, f64)>, ConfigError> {
    let err = |msg: String| ConfigError { line, msg };
    split_list(value)
        .map(|entry| {
            let (subset_str, weight_str) = entry
                .split_once(':')
                .ok_or_else(|| err(format!("expected subset:weight, got {entry:?}")))?;
            let subset = subset_str
                .split('+')
                .map(|tok| {
                    let label: usize = tok
                        .trim()
                        .parse()
                        .map_err(|e| err(format!("invalid content label {tok:?}: {e}")))?;
                    if label == 0 {
                        return Err(err("content labels are one-based".into()));
                    }
                    Ok(ContentId(label - 1))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let weight: f64 = weight_str
                .trim()
                .parse()
                .map_err(|e| err(format!("invalid weight {weight_str:?}: {e}")))?;
            Ok((subset, weight))
        })
        .collect()
}

/// The fully expanded run list of a sweep, in deterministic output order.
/// Each run's seeds derive from the base seed and its coordinates, so any
/// single run can be reproduced in isolation.
pub fn expand_runs(spec: &SweepSpec) -> Vec<ScenarioConfig> {
    let mut runs = Vec::new();
    for (p_idx, &policy) in spec.policies.iter().enumerate() {
        for (l_idx, &lambda) in spec.lambda_inv_values.iter().enumerate() {
            for rep in 0..spec.replications {
                let mut config = spec.base.clone();
                config.policy = policy;
                config.mean_waiting_s = lambda;
                config.seed = derive_seed(
                    spec.base.seed,
                    &[SWEEP_RUN_TAG, p_idx as u64, l_idx as u64, rep as u64],
                );
                // worlds are shared across policies and lambdas within a
                // replication so comparisons are paired
                config.world_seed = derive_seed(spec.base.seed, &[SWEEP_WORLD_TAG, rep as u64]);
                runs.push(config);
            }
        }
    }
    runs
}

/// Runs every cell of the sweep and renders the CSV plus a summary table.
pub fn render_sweep(spec: &SweepSpec, jobs: usize) -> Result<(String, String), SimError> {
    use rayon::prelude::*;
    let configs = expand_runs(spec);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("worker pool");
    let reports: Vec<Result<RunReport, SimError>> =
        pool.install(|| configs.par_iter().map(run).collect());
    let mut ordered = Vec::with_capacity(reports.len());
    for r in reports {
        ordered.push(r?);
    }

    let mut csv = String::new();
    writeln!(csv, "{CSV_HEADER}").unwrap();
    for report in &ordered {
        for batch in 0..report.batches.len() {
            writeln!(csv, "{}", csv_batch_row(report, batch)).unwrap();
        }
    }
    // pool batch values over replications per (policy, lambda) cell
    let mut cells: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let reps = spec.replications.max(1);
    for (run_idx, report) in ordered.iter().enumerate() {
        let cell = (run_idx / reps / spec.lambda_inv_values.len(), run_idx / reps % spec.lambda_inv_values.len());
        let entry = cells.entry(cell).or_default();
        for b in &report.batches {
            entry.0.push(b.joining_peers);
            if let Some(c) = b.congestion {
                entry.1.push(c);
            }
        }
    }
    let mut table = String::new();
    writeln!(
        table,
        "{:<14} {:>12} {:>12} {:>9} {:>12} {:>9} {:>8}",
        "policy", "lambda_inv_s", "joining", "ci95", "congestion", "ci95", "batches"
    )
    .unwrap();
    for (&(p_idx, l_idx), (joining, congestion)) in &cells {
        let policy = spec.policies[p_idx];
        let lambda = spec.lambda_inv_values[l_idx];
        let jp = batch_means_ci(joining, 0.95);
        let cd = (!congestion.is_empty()).then(|| batch_means_ci(congestion, 0.95));
        writeln!(csv, "{}", csv_summary_row(policy, lambda, &jp, cd.as_ref())).unwrap();
        let fmt_ci = |ci: Option<&crate::stats::BatchMeansCi>| match ci {
            Some(c) => (
                format!("{:.3}", c.mean),
                c.half_width.map_or("-".to_string(), |h| format!("{h:.3}")),
            ),
            None => ("no-traffic".to_string(), "-".to_string()),
        };
        let (jp_mean, jp_hw) = fmt_ci(Some(&jp));
        let (cd_mean, cd_hw) = fmt_ci(cd.as_ref());
        writeln!(
            table,
            "{:<14} {:>12} {:>12} {:>9} {:>12} {:>9} {:>8}",
            policy.to_string(),
            lambda,
            jp_mean,
            jp_hw,
            cd_mean,
            cd_hw,
            jp.count
        )
        .unwrap();
    }
    Ok((csv, table))
}

#[derive(Parser, Debug)]
#[command(name = "meshweave", version, about = "Mesh-pull P2P overlay construction simulator")]
struct Cli {
    /// Scenario / sweep configuration file
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for independent runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the replication-0 physical topology to this path
    #[arg(long)]
    dump_topology: Option<PathBuf>,
}

fn exit_code_for(err: &SimError) -> i32 {
    match err {
        SimError::InvalidConfig(_) | SimError::Topology(_) => 1,
        SimError::Invariant { .. } => 2,
    }
}

/// Full CLI entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/version output
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let text = match fs::read_to_string(&cli.config) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("cannot read config {}: {e}", cli.config.display());
            return 1;
        }
    };
    let mut spec = match parse_config(&text) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("{e}");
            return 1;
        }
    };
    spec.output_path = cli.out.clone();
    if let Ok(seed_text) = std::env::var(SEED_ENV) {
        match seed_text.parse::<u64>() {
            Ok(seed) => {
                spec.base.seed = seed;
                spec.base.world_seed = seed;
            }
            Err(e) => {
                eprintln!("invalid {SEED_ENV} value {seed_text:?}: {e}");
                return 1;
            }
        }
    }
    if let Some(path) = &cli.dump_topology {
        let mut probe = spec.base.clone();
        probe.world_seed = derive_seed(spec.base.seed, &[SWEEP_WORLD_TAG, 0]);
        match build_world(&probe) {
            Ok(world) => {
                if let Err(e) = fs::write(path, dump_topology(&world.topo)) {
                    eprintln!("cannot write topology dump {}: {e}", path.display());
                    return 1;
                }
            }
            Err(e) => {
                eprintln!("{e}");
                return exit_code_for(&e);
            }
        }
    }
    match render_sweep(&spec, cli.jobs) {
        Ok((csv, table)) => {
            match &spec.output_path {
                Some(path) => {
                    if let Err(e) = fs::write(path, &csv) {
                        eprintln!("cannot write CSV {}: {e}", path.display());
                        return 1;
                    }
                }
                None => print!("{csv}"),
            }
            print!("{table}");
            0
        }
        Err(e) => {
            if let SimError::Invariant { snapshot, .. } = &e {
                let path = std::env::temp_dir().join("meshweave-abort-snapshot.txt");
                let _ = fs::write(&path, snapshot);
                eprintln!("{e}");
                eprintln!("diagnostic snapshot written to {}", path.display());
            } else {
                eprintln!("{e}");
            }
            exit_code_for(&e)
        }
    }
}

pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}
