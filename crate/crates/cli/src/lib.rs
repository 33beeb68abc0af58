//! Experiment commands behind the `edgemap` binary: trace generation, agent
//! training, policy evaluation on identical traces, and cross-run
//! comparison. Every command echoes its fully resolved config into the
//! output directory and is byte-reproducible from (config, seed).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use edgemap_core::agent::DqnAgent;
use edgemap_core::config::{ConfigError, ExperimentConfig, PolicyKind};
use edgemap_core::runner::{build_vae, fit_rm, EvalPolicy, Runner, RunSummary};
use edgemap_core::scenario::{generate, Trace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Flag overrides shared by the commands.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub beta: Option<f64>,
    pub vehicles: Option<usize>,
    pub train_steps: Option<u64>,
}

/// Loads the config file (or defaults) and applies flag overrides.
pub fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
        cfg.scenario.seed = seed;
    }
    if let Some(beta) = ov.beta {
        cfg.scheduler.beta = beta;
    }
    if let Some(n) = ov.vehicles {
        cfg.scenario.n_vehicles = n;
    }
    if let Some(steps) = ov.train_steps {
        cfg.train.train_steps = steps;
        cfg.agent.epsilon_decay_steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(runtime)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(runtime)?;
    Ok(())
}

fn load_or_generate_trace(
    cfg: &ExperimentConfig,
    trace_path: Option<&Path>,
) -> Result<Trace, CliError> {
    match trace_path {
        Some(p) => {
            let file = fs::File::open(p).map_err(runtime)?;
            Trace::read_from(&mut BufReader::new(file)).map_err(runtime)
        }
        None => Ok(generate(&cfg.scenario)),
    }
}

fn trained_vae(
    cfg: &ExperimentConfig,
) -> Result<(edgemap_core::neural::VaeModel, Vec<f64>), CliError> {
    build_vae(
        cfg.vae.hidden,
        cfg.vae.epochs,
        cfg.vae.sample_count,
        cfg.vae.learning_rate,
        cfg.scenario.seed,
    )
    .map_err(runtime)
}

/// Writes the trace file for the configured scenario.
pub fn cmd_gen_traces(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    prepare_out(out, cfg)?;
    let trace = generate(&cfg.scenario);
    let path = out.join("trace.jsonl");
    let mut buf = Vec::new();
    trace.write_to(&mut buf).map_err(runtime)?;
    fs::write(&path, buf).map_err(runtime)?;
    Ok(path)
}

/// Online-trains the offloading agent with HEAD scheduling and writes the
/// checkpoint, periodic snapshots, and the reward/loss curve.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    trace_path: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    prepare_out(out, cfg)?;
    let trace = load_or_generate_trace(cfg, trace_path)?;
    let (vae, vae_losses) = trained_vae(cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x747261696e);
    let mut agent = match resume {
        Some(path) => DqnAgent::load_checkpoint(path, &mut rng).map_err(runtime)?,
        None => DqnAgent::new(cfg.agent.clone(), cfg.bounds.clone(), &mut rng),
    };

    let mut runner = Runner::new(cfg, &trace, &vae, cfg.seed);
    let snapshot_dir = out.to_path_buf();
    runner
        .run_train(
            &mut agent,
            cfg.train.train_steps,
            cfg.train.train_every,
            |step, agent| {
                let _ = agent.save_checkpoint(&snapshot_dir.join(format!("checkpoint_{step}.bin")));
            },
            cfg.train.snapshot_every,
        )
        .map_err(runtime)?;

    agent.save_checkpoint(&out.join("checkpoint.bin")).map_err(runtime)?;

    let mut curve = String::from("completion_index,t_ms,reward,epsilon,loss\n");
    for row in &runner.training_curve {
        writeln!(
            curve,
            "{},{},{},{},{}",
            row.completion_index, row.t_ms, row.reward, row.epsilon, row.loss
        )
        .unwrap();
    }
    fs::write(out.join("training_curve.csv"), curve).map_err(runtime)?;

    let mut vae_curve = String::from("epoch,loss\n");
    for (i, l) in vae_losses.iter().enumerate() {
        writeln!(vae_curve, "{i},{l}").unwrap();
    }
    fs::write(out.join("vae_curve.csv"), vae_curve).map_err(runtime)?;

    let summary = runner.summary("head-train");
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&vec![summary]).map_err(runtime)?,
    )
    .map_err(runtime)?;
    Ok(())
}

fn write_run_outputs(
    out: &Path,
    policy: PolicyKind,
    seed: u64,
    runner: &Runner,
) -> Result<(), CliError> {
    let tag = format!("{}_{}", policy.as_str(), seed);
    fs::write(out.join(format!("latency_{tag}.csv")), runner.engine.metrics_csv())
        .map_err(runtime)?;

    let mut cov = String::from("t_ms,scheduled,total,scheduled_ratio,coverage_ratio\n");
    for r in &runner.coverage_rows {
        writeln!(
            cov,
            "{},{},{},{},{}",
            r.t_ms, r.scheduled, r.total, r.scheduled_ratio, r.coverage_ratio
        )
        .unwrap();
    }
    fs::write(out.join(format!("coverage_{tag}.csv")), cov).map_err(runtime)?;

    let mut dec = String::from("t_ms,task_id,vehicle_id,action,rate_bps,connected\n");
    for d in &runner.decisions {
        writeln!(
            dec,
            "{},{},{},{},{},{}",
            d.t_ms, d.task_id, d.vehicle_id, d.action, d.rate_bps, d.connected
        )
        .unwrap();
    }
    fs::write(out.join(format!("decisions_{tag}.csv")), dec).map_err(runtime)?;

    let mut snapshot = Vec::new();
    runner.db.write_snapshot(&mut snapshot).map_err(runtime)?;
    fs::write(out.join(format!("db_snapshot_{tag}.txt")), snapshot).map_err(runtime)?;
    Ok(())
}

/// Evaluates the requested policies on identical traces and seeds; writes
/// per-run latency, coverage, decision and map-snapshot files plus an
/// aggregated summary.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    trace_path: Option<&Path>,
    policies: &[PolicyKind],
    n_seeds: u64,
    checkpoint: Option<&Path>,
) -> Result<Vec<RunSummary>, CliError> {
    prepare_out(out, cfg)?;
    let trace = load_or_generate_trace(cfg, trace_path)?;
    let (vae, _) = trained_vae(cfg)?;

    let agent = if policies.contains(&PolicyKind::Head) {
        let path = checkpoint.ok_or_else(|| {
            CliError::Runtime("policy 'head' needs --checkpoint from a train run".into())
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Some(DqnAgent::load_checkpoint(path, &mut rng).map_err(runtime)?)
    } else {
        None
    };
    let rm_model = if policies.contains(&PolicyKind::Rm) {
        let model = fit_rm(cfg, &vae, cfg.seed).map_err(runtime)?;
        let mut text = Vec::new();
        model.write_to(&mut text).map_err(runtime)?;
        fs::write(out.join("rm_model.txt"), text).map_err(runtime)?;
        Some(model)
    } else {
        None
    };

    let mut summaries = Vec::new();
    for policy in policies {
        for i in 0..n_seeds.max(1) {
            let seed = cfg.seed + i;
            let mut runner = Runner::new(cfg, &trace, &vae, seed);
            let mut driver = match policy {
                PolicyKind::Head => EvalPolicy::Head(agent.as_ref().unwrap()),
                PolicyKind::Eo => EvalPolicy::Eo,
                PolicyKind::Lp => EvalPolicy::Lp,
                PolicyKind::Ro => EvalPolicy::Ro,
                PolicyKind::Rm => EvalPolicy::Rm(rm_model.as_ref().unwrap()),
            };
            runner
                .run_eval(&mut driver, cfg.scenario.duration_ms)
                .map_err(runtime)?;
            write_run_outputs(out, *policy, seed, &runner)?;
            summaries.push(runner.summary(policy.as_str()));
        }
    }

    let aggregate = aggregate_by_policy(&summaries);
    let doc = serde_json::json!({ "runs": summaries, "aggregate": aggregate });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&doc).map_err(runtime)?)
        .map_err(runtime)?;
    Ok(summaries)
}

fn aggregate_by_policy(summaries: &[RunSummary]) -> BTreeMap<String, serde_json::Value> {
    let mut grouped: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        grouped.entry(s.policy.clone()).or_default().push(s);
    }
    grouped
        .into_iter()
        .map(|(policy, runs)| {
            let n = runs.len() as f64;
            let mean = |f: fn(&RunSummary) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
            let value = serde_json::json!({
                "runs": runs.len(),
                "mean_latency_ms": mean(|r| r.mean_latency_ms),
                "p50_latency_ms": mean(|r| r.p50_latency_ms),
                "p95_latency_ms": mean(|r| r.p95_latency_ms),
                "mean_action": mean(|r| r.mean_action),
                "scheduled_ratio_mean": mean(|r| r.scheduled_ratio_mean),
                "match_accuracy": mean(|r| r.match_accuracy),
                "detection_success_rate": mean(|r| r.detection_success_rate),
            });
            (policy, value)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub dir: String,
    pub samples: usize,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    /// Relative reduction of the mean against the first directory.
    pub reduction_vs_first: f64,
}

/// Pools the latency files of each run directory and reports mean and
/// percentile latencies plus the relative reduction against the first.
pub fn cmd_compare(dirs: &[PathBuf]) -> Result<Vec<CompareRow>, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("compare needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    let mut first_mean = None;
    for dir in dirs {
        let mut latencies: Vec<f64> = Vec::new();
        let entries = fs::read_dir(dir).map_err(runtime)?;
        for entry in entries {
            let entry = entry.map_err(runtime)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !(name.starts_with("latency_") && name.ends_with(".csv")) {
                continue;
            }
            let text = fs::read_to_string(entry.path()).map_err(runtime)?;
            for line in text.lines().skip(1) {
                let mut cols = line.split(',');
                let latency = cols
                    .nth(2)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| CliError::Runtime(format!("bad latency row in {name}")))?;
                latencies.push(latency);
            }
        }
        if latencies.is_empty() {
            return Err(CliError::Runtime(format!(
                "no latency records found under {}",
                dir.display()
            )));
        }
        latencies.sort_by(|a, b| a.total_cmp(b));
        let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
        let pct = |p: f64| latencies[((latencies.len() - 1) as f64 * p).round() as usize];
        let base = *first_mean.get_or_insert(mean);
        rows.push(CompareRow {
            dir: dir.display().to_string(),
            samples: latencies.len(),
            mean_latency_ms: mean,
            p50_latency_ms: pct(0.5),
            p95_latency_ms: pct(0.95),
            reduction_vs_first: if base > 0.0 { (base - mean) / base } else { 0.0 },
        });
    }
    Ok(rows)
}

pub fn render_compare_table(rows: &[CompareRow]) -> String {
    let mut out = String::from("dir,samples,mean_latency_ms,p50_latency_ms,p95_latency_ms,reduction_vs_first\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.3},{:.3},{:.3},{:.4}",
            r.dir, r.samples, r.mean_latency_ms, r.p50_latency_ms, r.p95_latency_ms,
            r.reduction_vs_first
        )
        .unwrap();
    }
    out
}
