//! Run configuration files, the metrics CSV, run directories, sweeps,
//! sweep reports and learning-curve data.
//!
//! A config file is flat `key = value` text grouped under `[section]`
//! headers; `#` starts a comment. Keys are addressed as `section.key` on
//! the command line. Sections are `run`, `trainer`, `model`, `kfac` and
//! `critic_kfac`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{ActorCritic, StepMetrics, Topology, Trainer, TrainerConfig};
use crate::kfac::KfacConfig;
use crate::net::Network;
use crate::oracle;
use crate::rl::{Env, GridChain, VecEnv};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.ini";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATUS_FILE: &str = "status";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub const METRICS_HEADER: [&str; 12] = [
    "update_index",
    "timesteps",
    "episodes",
    "mean_reward_100",
    "policy_loss",
    "value_loss",
    "entropy",
    "eta_effective",
    "quad_kl",
    "exact_kl",
    "sigma_critic",
    "step_wall_ms",
];

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: String,
    pub trainer: TrainerConfig,
    /// Trailing-100 mean reward counted as solving the task.
    pub threshold: f64,
    /// Write a metrics row every this many updates. The last update is
    /// always written.
    pub log_interval: usize,
    /// Save checkpoints every this many updates (0 = initial and final only).
    pub checkpoint_interval: usize,
    /// Leave `step_wall_ms` blank when false, so logs compare bitwise.
    pub record_timing: bool,
    /// End the run at the first update whose trailing mean reaches the
    /// threshold. The schedule still spans `total_timesteps`.
    pub stop_at_threshold: bool,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Defaults for `env`, including its threshold and topology.
    pub fn for_env(env: &str) -> Result<Self> {
        let mut cfg = RunConfig {
            env: env.to_string(),
            trainer: TrainerConfig::default(),
            threshold: 0.0,
            log_interval: 1,
            checkpoint_interval: 0,
            record_timing: true,
            stop_at_threshold: false,
            output_dir: PathBuf::from("runs"),
        };
        cfg.threshold = default_threshold(env)?;
        if env == "pendulum" {
            cfg.trainer.topology = Topology::Disjoint;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let env = entries
            .iter()
            .find(|(k, _)| k == "run.env")
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "cartpole".to_string());
        let mut cfg = RunConfig::for_env(&env)?;
        for (key, value) in &entries {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one fully qualified key. Changing `run.env` does not reset the
    /// threshold or topology; [`RunConfig::parse`] applies env defaults first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, name) = key.split_once('.').ok_or_else(|| Error::config(key, "expected `section.key`"))?;
        let t = &mut self.trainer;
        match (section, name) {
            ("run", "env") => {
                default_threshold(value).map_err(|_| Error::config(key, format!("unknown environment `{value}`")))?;
                self.env = value.to_string();
            }
            ("run", "seed") => t.seed = parse_value(key, value)?,
            ("run", "total_timesteps") => t.total_timesteps = parse_value(key, value)?,
            ("run", "log_interval") => self.log_interval = parse_value(key, value)?,
            ("run", "checkpoint_interval") => self.checkpoint_interval = parse_value(key, value)?,
            ("run", "exact_kl_interval") => t.exact_kl_interval = parse_value(key, value)?,
            ("run", "record_timing") => self.record_timing = parse_value(key, value)?,
            ("run", "stop_at_threshold") => self.stop_at_threshold = parse_value(key, value)?,
            ("run", "threshold") => self.threshold = parse_value(key, value)?,
            ("run", "output_dir") => self.output_dir = PathBuf::from(value),
            ("trainer", "algorithm") => t.algorithm = parse_value(key, value)?,
            ("trainer", "topology") => t.topology = parse_value(key, value)?,
            ("trainer", "critic_norm") => t.critic_norm = parse_value(key, value)?,
            ("trainer", "entropy_weight") => t.entropy_weight = parse_value(key, value)?,
            ("trainer", "value_loss_weight") => t.value_loss_weight = parse_value(key, value)?,
            ("trainer", "k") => {
                let batch = t.batch_size();
                t.k = parse_value(key, value)?;
                t.n_envs = if t.k > 0 && batch % t.k == 0 { batch / t.k } else { 0 };
            }
            ("trainer", "batch_size") => {
                let batch: usize = parse_value(key, value)?;
                if t.k == 0 || batch == 0 || batch % t.k != 0 {
                    return Err(Error::config(key, format!("{batch} is not a positive multiple of trainer.k = {}", t.k)));
                }
                t.n_envs = batch / t.k;
            }
            ("trainer", "gamma") => t.gamma = parse_value(key, value)?,
            ("trainer", "momentum") => t.momentum = parse_value(key, value)?,
            ("trainer", "fisher_samples") => t.fisher_samples = parse_value(key, value)?,
            ("trainer", "normalize_advantages") => t.normalize_advantages = parse_value(key, value)?,
            ("trainer", "normalize_observations") => t.normalize_observations = parse_value(key, value)?,
            ("trainer", "timeout_bootstrap") => t.timeout_bootstrap = parse_value(key, value)?,
            ("model", "hidden") => {
                t.hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_>>()?;
            }
            ("model", "policy_activation") => t.policy_activation = parse_value(key, value)?,
            ("model", "value_activation") => t.value_activation = parse_value(key, value)?,
            ("kfac", name) => set_kfac(&mut t.kfac, key, name, value)?,
            ("critic_kfac", name) => set_kfac(&mut t.critic_kfac, key, name, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.log_interval == 0 {
            return Err(Error::config("run.log_interval", "must be positive"));
        }
        if !self.threshold.is_finite() {
            return Err(Error::config("run.threshold", "must be finite"));
        }
        Ok(())
    }

    /// The fully resolved config in file form; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.trainer;
        let hidden: Vec<String> = t.hidden.iter().map(usize::to_string).collect();
        let mut out = String::new();
        let _ = writeln!(out, "[run]");
        let _ = writeln!(out, "env = {}", self.env);
        let _ = writeln!(out, "seed = {}", t.seed);
        let _ = writeln!(out, "total_timesteps = {}", t.total_timesteps);
        let _ = writeln!(out, "log_interval = {}", self.log_interval);
        let _ = writeln!(out, "checkpoint_interval = {}", self.checkpoint_interval);
        let _ = writeln!(out, "exact_kl_interval = {}", t.exact_kl_interval);
        let _ = writeln!(out, "record_timing = {}", self.record_timing);
        let _ = writeln!(out, "threshold = {:?}", self.threshold);
        let _ = writeln!(out, "stop_at_threshold = {}", self.stop_at_threshold);
        let _ = writeln!(out, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(out, "\n[trainer]");
        let _ = writeln!(out, "algorithm = {}", t.algorithm);
        let _ = writeln!(out, "topology = {}", t.topology);
        let _ = writeln!(out, "critic_norm = {}", t.critic_norm);
        let _ = writeln!(out, "entropy_weight = {:?}", t.entropy_weight);
        let _ = writeln!(out, "value_loss_weight = {:?}", t.value_loss_weight);
        let _ = writeln!(out, "k = {}", t.k);
        let _ = writeln!(out, "batch_size = {}", t.batch_size());
        let _ = writeln!(out, "gamma = {:?}", t.gamma);
        let _ = writeln!(out, "momentum = {:?}", t.momentum);
        let _ = writeln!(out, "fisher_samples = {}", t.fisher_samples);
        let _ = writeln!(out, "normalize_advantages = {}", t.normalize_advantages);
        let _ = writeln!(out, "normalize_observations = {}", t.normalize_observations);
        let _ = writeln!(out, "timeout_bootstrap = {}", t.timeout_bootstrap);
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "hidden = {}", hidden.join(","));
        let _ = writeln!(out, "policy_activation = {}", t.policy_activation);
        let _ = writeln!(out, "value_activation = {}", t.value_activation);
        for (name, k) in [("kfac", &t.kfac), ("critic_kfac", &t.critic_kfac)] {
            let _ = writeln!(out, "\n[{name}]");
            let _ = writeln!(out, "eta_max = {:?}", k.eta_max);
            let _ = writeln!(out, "delta = {:?}", k.delta);
            let _ = writeln!(out, "damping_lambda = {:?}", k.damping_lambda);
            let _ = writeln!(out, "stat_decay = {:?}", k.stat_decay);
            let _ = writeln!(out, "inverse_interval = {}", k.inverse_interval);
            let _ = writeln!(out, "schedule = {}", k.schedule);
        }
        out
    }
}

fn set_kfac(k: &mut KfacConfig, key: &str, name: &str, value: &str) -> Result<()> {
    match name {
        "eta_max" => k.eta_max = parse_value(key, value)?,
        "delta" => k.delta = parse_value(key, value)?,
        "damping_lambda" => k.damping_lambda = parse_value(key, value)?,
        "stat_decay" => k.stat_decay = parse_value(key, value)?,
        "inverse_interval" => k.inverse_interval = parse_value(key, value)?,
        "schedule" => k.schedule = parse_value(key, value)?,
        _ => return Err(Error::config(key, "unknown key")),
    }
    Ok(())
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

/// Splits config text into `(section.key, value)` pairs in file order.
fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut section: Option<String> = None;
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                what: "config".into(),
                reason: format!("line {}: expected `key = value`", n + 1),
            });
        };
        let key = key.trim();
        let Some(section) = &section else {
            return Err(Error::config(key, "key outside any section"));
        };
        entries.push((format!("{section}.{key}"), value.trim().to_string()));
    }
    Ok(entries)
}

/// Default solved threshold: 195 for cartpole, -200 for pendulum and 99% of
/// the optimal episode return for gridchain.
pub fn default_threshold(env: &str) -> Result<f64> {
    match env {
        "cartpole" => Ok(195.0),
        "pendulum" => Ok(-200.0),
        "gridchain" => Ok(0.99 * gridchain_optimal_return(&GridChain::new(10))?),
        other => Err(Error::config("run.env", format!("unknown environment `{other}`"))),
    }
}

/// Undiscounted return of one episode under the value-iteration policy.
/// Needs a chain without slip.
pub fn gridchain_optimal_return(chain: &GridChain) -> Result<f64> {
    if chain.slip != 0.0 {
        return Err(Error::config("env", "optimal return needs a deterministic chain"));
    }
    let vi = oracle::value_iteration(&chain.to_mdp(), 0.99, 1e-12)?;
    let mut env = chain.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = env.reset(&mut rng);
    let mut total = 0.0;
    loop {
        let s = obs.iter().position(|&x| x == 1.0).unwrap_or(0);
        let t = env.step(&crate::distributions::Action::Discrete(vi.policy[s]), &mut rng)?;
        total += t.reward;
        if t.terminal {
            return Ok(total);
        }
        obs = t.next_state;
    }
}

/// Formats `x` in fixed notation with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0.00000".to_string();
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if exp >= 5 {
        let scale = 10f64.powi(exp - 5);
        return format!("{:.0}", (x / scale).round() * scale);
    }
    format!("{:.*}", (5 - exp) as usize, x)
}

fn cell(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format_sig6(v),
        _ => String::new(),
    }
}

/// One metrics CSV line, without the newline.
pub fn format_row(m: &StepMetrics, record_timing: bool) -> String {
    [
        m.update_index.to_string(),
        m.timesteps.to_string(),
        m.episodes.to_string(),
        cell(m.mean_reward_100),
        cell(Some(m.policy_loss)),
        cell(Some(m.value_loss)),
        cell(Some(m.entropy)),
        cell(Some(m.eta_effective)),
        cell(m.quad_kl),
        cell(m.exact_kl),
        cell(Some(m.sigma_critic)),
        cell(record_timing.then_some(m.step_wall_ms)),
    ]
    .join(",")
}

/// A metrics row read back from disk; blank cells are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub update_index: usize,
    pub timesteps: usize,
    pub episodes: usize,
    pub mean_reward_100: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub eta_effective: Option<f64>,
    pub quad_kl: Option<f64>,
    pub exact_kl: Option<f64>,
    pub sigma_critic: Option<f64>,
    pub step_wall_ms: Option<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let bad = |reason: String| Error::Parse {
        what: "metrics csv".into(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER.join(",").as_str()) {
        return Err(bad("header does not match".into()));
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != METRICS_HEADER.len() {
            return Err(bad(format!("row {} has {} fields", n + 1, f.len())));
        }
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(format!("row {}: bad {}", n + 1, METRICS_HEADER[i])));
        let num = |i: usize| -> Result<Option<f64>> {
            if f[i].is_empty() {
                return Ok(None);
            }
            match f[i].parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(bad(format!("row {}: bad {}", n + 1, METRICS_HEADER[i]))),
            }
        };
        let row = MetricsRow {
            update_index: int(0)?,
            timesteps: int(1)?,
            episodes: int(2)?,
            mean_reward_100: num(3)?,
            policy_loss: num(4)?,
            value_loss: num(5)?,
            entropy: num(6)?,
            eta_effective: num(7)?,
            quad_kl: num(8)?,
            exact_kl: num(9)?,
            sigma_critic: num(10)?,
            step_wall_ms: num(11)?,
        };
        if rows.last().is_some_and(|r| r.update_index >= row.update_index) {
            return Err(bad(format!("row {}: update_index does not increase", n + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes the network(s) of `model` as `<stem>.ckpt`, or
/// `<stem>_actor.ckpt` and `<stem>_critic.ckpt` for a disjoint model.
pub fn save_model(model: &ActorCritic, dir: &Path, stem: &str) -> Result<()> {
    match model {
        ActorCritic::Shared(net) => net.save(&dir.join(format!("{stem}.ckpt"))),
        ActorCritic::Disjoint { actor, critic } => {
            actor.save(&dir.join(format!("{stem}_actor.ckpt")))?;
            critic.save(&dir.join(format!("{stem}_critic.ckpt")))
        }
    }
}

/// Reads back what [`save_model`] wrote.
pub fn load_model(dir: &Path, stem: &str) -> Result<ActorCritic> {
    let shared = dir.join(format!("{stem}.ckpt"));
    if shared.exists() {
        return Ok(ActorCritic::Shared(Network::load(&shared)?));
    }
    Ok(ActorCritic::Disjoint {
        actor: Network::load(&dir.join(format!("{stem}_actor.ckpt")))?,
        critic: Network::load(&dir.join(format!("{stem}_critic.ckpt")))?,
    })
}

/// What [`run`] leaves behind besides the files.
pub struct RunResult {
    pub dir: PathBuf,
    pub model: ActorCritic,
    pub metrics: Vec<StepMetrics>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains per `cfg` inside `cfg.output_dir`: resolved config, metrics CSV,
/// checkpoints, and a status file that reads `complete` once done.
pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let t = &cfg.trainer;
    let envs = VecEnv::from_name(&cfg.env, t.n_envs, t.seed, t.normalize_observations)?;
    let mut trainer = Trainer::new(t, envs)?;

    let dir = cfg.output_dir.clone();
    let ckpt = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    write_file(&dir.join(STATUS_FILE), "running\n")?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    save_model(&trainer.agent().model, &ckpt, "initial")?;

    let metrics_path = dir.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    writeln!(out, "{}", METRICS_HEADER.join(",")).map_err(io)?;

    let norm = t.critic_norm;
    let probe = move |old: &ActorCritic, new: &ActorCritic, states: &crate::Matrix, sigma: f64| {
        oracle::actor_critic_kl(old, new, states, sigma, norm)
    };
    let total = t.total_updates();
    let mut metrics = Vec::with_capacity(total);
    while !trainer.is_done() {
        let m = trainer.update(Some(&probe))?;
        let i = m.update_index;
        let stop = cfg.stop_at_threshold && m.mean_reward_100.is_some_and(|r| r >= cfg.threshold);
        if i % cfg.log_interval == 0 || i == total || stop {
            writeln!(out, "{}", format_row(&m, cfg.record_timing)).map_err(io)?;
        }
        if cfg.checkpoint_interval > 0 && i % cfg.checkpoint_interval == 0 && i < total {
            save_model(&trainer.agent().model, &ckpt, &format!("update_{i:07}"))?;
        }
        metrics.push(m);
        if stop {
            break;
        }
    }
    out.flush().map_err(io)?;
    drop(out);

    let model = trainer.into_agent().model;
    save_model(&model, &ckpt, "final")?;
    write_file(&dir.join(STATUS_FILE), &format!("complete {}\n", metrics.len()))?;
    Ok(RunResult { dir, model, metrics })
}

/// One axis of a sweep: a config key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for GridAxis {
    type Err = Error;

    /// Parses `section.key=v1,v2,...`.
    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| Error::config(s, "grid axis must look like `section.key=v1,v2`"))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::config(key, "grid axis has no values"));
        }
        Ok(GridAxis {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Expands `grid` into one config per cell, each writing into its own
/// subdirectory of `base.output_dir`. Every cell is validated up front.
pub fn sweep_cells(base: &RunConfig, grid: &[GridAxis]) -> Result<Vec<RunConfig>> {
    let mut cells = vec![(base.clone(), Vec::<String>::new())];
    for axis in grid {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for (cfg, name) in &cells {
            for v in &axis.values {
                let mut c = cfg.clone();
                c.set(&axis.key, v)?;
                let mut n = name.clone();
                n.push(format!("{}={}", axis.key, v));
                next.push((c, n));
            }
        }
        cells = next;
    }
    cells
        .into_iter()
        .map(|(mut c, name)| {
            let dir = if name.is_empty() { "base".to_string() } else { name.join(",") };
            c.output_dir = base.output_dir.join(dir.replace(['/', '\\'], "_"));
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Runs every cell of the grid, `jobs` at a time. Returns the cell
/// directories in grid order.
pub fn sweep(base: &RunConfig, grid: &[GridAxis], jobs: usize) -> Result<Vec<PathBuf>> {
    let cells = sweep_cells(base, grid)?;
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<()>>>> = cells.iter().map(|_| Default::default()).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(cfg) = cells.get(i) else { break };
                let r = run(cfg).map(|_| ());
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });
    for r in results {
        if let Some(Err(e)) = r.into_inner().unwrap() {
            return Err(e);
        }
    }
    Ok(cells.into_iter().map(|c| c.output_dir).collect())
}

/// True once [`run`] finished writing the directory.
pub fn run_complete(dir: &Path) -> bool {
    fs::read_to_string(dir.join(STATUS_FILE)).is_ok_and(|s| s.starts_with("complete"))
}

/// First logged row whose trailing mean reaches `threshold`.
pub fn first_crossing(rows: &[MetricsRow], threshold: f64) -> Option<&MetricsRow> {
    rows.iter().find(|r| r.mean_reward_100.is_some_and(|v| v >= threshold))
}

/// One line of a sweep report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub cell: String,
    pub final_mean_reward_100: Option<f64>,
    pub timesteps_to_threshold: Option<usize>,
    pub updates_to_threshold: Option<usize>,
    pub complete: bool,
}

/// Summarizes one run directory.
pub fn report_run(dir: &Path) -> Result<ReportRow> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let rows = match read_metrics(&dir.join(METRICS_FILE)) {
        Ok(rows) => rows,
        Err(Error::Io { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    let crossing = first_crossing(&rows, cfg.threshold);
    Ok(ReportRow {
        cell: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        final_mean_reward_100: rows.last().and_then(|r| r.mean_reward_100),
        timesteps_to_threshold: crossing.map(|r| r.timesteps),
        updates_to_threshold: crossing.map(|r| r.update_index),
        complete: run_complete(dir),
    })
}

/// One row per run subdirectory of `dir` (those holding a config file),
/// sorted by name.
pub fn sweep_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut cells: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONFIG_FILE).is_file())
        .collect();
    cells.sort();
    cells.iter().map(|c| report_run(c)).collect()
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("cell,final_mean_reward_100,timesteps_to_threshold,updates_to_threshold,status\n");
    for r in rows {
        let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.cell,
            cell(r.final_mean_reward_100),
            opt(r.timesteps_to_threshold),
            opt(r.updates_to_threshold),
            if r.complete { "complete" } else { "incomplete" }
        );
    }
    out
}

/// Learning curves of several runs aligned on `update_index`: mean and
/// sample standard deviation of `mean_reward_100`, and mean timesteps.
/// Only updates logged by every run with a reward in each are kept.
pub fn plot_data(runs: &[Vec<MetricsRow>]) -> String {
    let mut out = String::from("update_index,runs,timesteps_mean,mean_reward_100_mean,mean_reward_100_std\n");
    let Some(first) = runs.first() else { return out };
    for row in first {
        let matched: Vec<&MetricsRow> = runs
            .iter()
            .filter_map(|r| r.iter().find(|x| x.update_index == row.update_index))
            .collect();
        if matched.len() != runs.len() || matched.iter().any(|r| r.mean_reward_100.is_none()) {
            continue;
        }
        let n = matched.len() as f64;
        let steps = matched.iter().map(|r| r.timesteps as f64).sum::<f64>() / n;
        let rewards: Vec<f64> = matched.iter().filter_map(|r| r.mean_reward_100).collect();
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (matched.len() > 1).then(|| (rewards.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.update_index,
            matched.len(),
            format_sig6(steps),
            format_sig6(mean),
            cell(std)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(195.0), "195.000");
        assert_eq!(format_sig6(0.001), "0.00100000");
        assert_eq!(format_sig6(-12.3456789), "-12.3457");
        assert_eq!(format_sig6(9.999996), "10.0000");
        assert_eq!(format_sig6(1234567.0), "1234570");
        assert_eq!(format_sig6(0.0), "0.00000");
        assert_eq!(format_sig6(1.0), "1.00000");
    }

    #[test]
    fn config_round_trips() {
        let mut cfg = RunConfig::for_env("pendulum").unwrap();
        cfg.set("kfac.eta_max", "0.03").unwrap();
        cfg.set("model.hidden", "").unwrap();
        cfg.set("trainer.batch_size", "40").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.trainer.topology, Topology::Disjoint);
        assert!(back.trainer.hidden.is_empty());
        assert_eq!(back.trainer.n_envs, 2);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("[kfac]\neta_mx = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("kfac.eta_mx"), "{err}");
        let err = RunConfig::parse("[trainer]\ngamma = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("trainer.gamma"), "{err}");
        let err = RunConfig::parse("seed = 1\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn gridchain_threshold() {
        assert!((gridchain_optimal_return(&GridChain::new(10)).unwrap() - 0.93).abs() < 1e-12);
        assert!((default_threshold("gridchain").unwrap() - 0.9207).abs() < 1e-12);
    }

    #[test]
    fn grid_expands_to_cartesian_product() {
        let base = RunConfig::for_env("cartpole").unwrap();
        let grid: Vec<GridAxis> = ["kfac.eta_max=0.7,0.2", "run.seed=0,1,2"].iter().map(|s| s.parse().unwrap()).collect();
        let cells = sweep_cells(&base, &grid).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[4].trainer.kfac.eta_max, 0.2);
        assert_eq!(cells[4].trainer.seed, 1);
        assert!(cells[4].output_dir.ends_with("kfac.eta_max=0.2,run.seed=1"));
        assert!(sweep_cells(&base, &["kfac.nope=1".parse().unwrap()]).is_err());
    }
}
