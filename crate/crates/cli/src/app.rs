use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use cpe_api::ServeOptions;
use cpe_core::control::GateConfig;
use cpe_core::engine::Engine;
use cpe_core::experiment::{run_comparison, trial_result, ComparisonReport, ExperimentError, TrialResult};
use cpe_core::report::{render_summary, render_trial, to_canonical_json};
use cpe_core::Mode;

use crate::config::{self, ConfigError, ConfigFile, LoadedConfig};
use crate::manifest::{now_unix_ms, write_artifact, Artifact, RunManifest};

pub const RESULT_FILE: &str = "result.json";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const SUITE_FILE: &str = "suite.json";
pub const SUMMARY_FILE: &str = "summary.md";

#[derive(Debug, Parser)]
#[command(name = "cpe", version, about = "Closed-loop remediation experiments on a simulated cluster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one trial arm.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Baseline against CPE over K seeded pairs.
    Compare {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        trials: Option<usize>,
        /// First seed; pair k uses seed + k.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Comparisons for all four scenarios.
    Suite {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-render stored results as a summary table.
    Report {
        /// A results file, or a directory holding one.
        path: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one trial in real time behind the HTTP API.
    Serve {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        realtime_factor: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// S1..S4; overrides the config file's scenario.
    #[arg(long)]
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Cpe,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Cpe => Mode::Cpe,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(what: &str, path: &Path) -> impl FnOnce(std::io::Error) -> CliError {
    let context = format!("{what} {}", path.display());
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

const DEFAULT_SCENARIO: &str = "S2";

/// Resolve `--config` / `--scenario` into a defaulted config.
pub fn load_source(source: &Source) -> Result<LoadedConfig, CliError> {
    match &source.config {
        Some(path) => {
            let (mut file, sha) = config::read(path)?;
            if let Some(id) = &source.scenario {
                file.scenario = id.clone();
            }
            let mut loaded = config::resolve(&file)?;
            loaded.source_sha256 = Some(sha);
            Ok(loaded)
        }
        None => Ok(config::resolve(&ConfigFile {
            scenario: source.scenario.clone().unwrap_or_else(|| DEFAULT_SCENARIO.to_string()),
            ..ConfigFile::default()
        })?),
    }
}

/// Flag, then file, then CPE.
fn pick_mode(loaded: &mut LoadedConfig, flag: Option<ModeArg>) {
    if let Some(m) = flag {
        loaded.trial.mode = m.into();
    } else if !loaded.mode_explicit {
        loaded.trial.mode = Mode::Cpe;
    }
}

struct Context {
    command: &'static str,
    args: Vec<String>,
    started: u128,
}

fn finish(
    ctx: Context,
    out: &Path,
    loaded: Option<&LoadedConfig>,
    config_digest: String,
    seeds: Vec<u64>,
    artifacts: Vec<Artifact>,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: ctx.command.to_string(),
        args: ctx.args,
        config_file_sha256: loaded.and_then(|l| l.source_sha256.clone()),
        config_digest,
        config: loaded.map_or(serde_json::Value::Null, |l| serde_json::json!(l)),
        seeds,
        artifacts,
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_ms: ctx.started,
        finished_unix_ms: now_unix_ms(),
    };
    manifest.write(out).map_err(io_err("cannot write manifest in", out))?;
    Ok(())
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(io_err("cannot create", out))
}

fn artifact(out: &Path, name: &str, kind: &str, contents: &[u8]) -> Result<Artifact, CliError> {
    write_artifact(out, name, kind, contents).map_err(io_err("cannot write", &out.join(name)))
}

pub fn execute(cli: Cli, args: Vec<String>) -> Result<String, CliError> {
    let started = now_unix_ms();
    match cli.command {
        Command::Run {
            source,
            mode,
            seed,
            out,
        } => {
            let mut loaded = load_source(&source)?;
            pick_mode(&mut loaded, mode);
            if let Some(s) = seed {
                loaded.trial.seed = s;
            }
            let cfg = &loaded.trial;
            let mut engine = Engine::new(cfg.engine_config()).map_err(|e| CliError::Runtime(e.to_string()))?;
            engine.run_to_end().map_err(|e| CliError::Runtime(e.to_string()))?;
            let result = trial_result(cfg, &engine);

            create_dir(&out)?;
            let mut telemetry = Vec::new();
            engine
                .store()
                .write_jsonl(&mut telemetry)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut audit = Vec::new();
            engine
                .control()
                .audit()
                .write_jsonl(&mut audit)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut events = String::new();
            for e in engine.events() {
                events.push_str(&serde_json::to_string(e).map_err(|e| CliError::Runtime(e.to_string()))?);
                events.push('\n');
            }
            let summary = render_trial(&result);
            let artifacts = vec![
                artifact(&out, RESULT_FILE, "results", to_canonical_json(&result).as_bytes())?,
                artifact(&out, SUMMARY_FILE, "summary", summary.as_bytes())?,
                artifact(&out, "telemetry.jsonl", "telemetry", &telemetry)?,
                artifact(&out, "audit.jsonl", "audit", &audit)?,
                artifact(&out, "events.jsonl", "events", events.as_bytes())?,
            ];
            let ctx = Context {
                command: "run",
                args,
                started,
            };
            finish(ctx, &out, Some(&loaded), cfg.digest(), vec![cfg.seed], artifacts)?;
            Ok(summary)
        }
        Command::Compare {
            source,
            trials,
            seed,
            out,
        } => {
            let loaded = load_source(&source)?;
            let trials = trials.unwrap_or(loaded.trials);
            if trials == 0 {
                return Err(CliError::Usage("--trials must be at least 1".into()));
            }
            let base_seed = seed.unwrap_or(loaded.trial.seed);
            let report = run_comparison(&loaded.scenario, &loaded.trial, trials, base_seed)?;
            create_dir(&out)?;
            let summary = render_summary(&report);
            let artifacts = vec![
                artifact(&out, COMPARISON_FILE, "results", to_canonical_json(&report).as_bytes())?,
                artifact(&out, SUMMARY_FILE, "summary", summary.as_bytes())?,
            ];
            let seeds = report.per_pair.iter().map(|p| p.seed).collect();
            let ctx = Context {
                command: "compare",
                args,
                started,
            };
            finish(ctx, &out, Some(&loaded), report.config_digest.clone(), seeds, artifacts)?;
            Ok(summary)
        }
        Command::Suite { trials, seed, out } => {
            let mut reports = BTreeMap::new();
            let mut summary = String::new();
            let mut seeds = Vec::new();
            for id in ["S1", "S2", "S3", "S4"] {
                let loaded = config::for_scenario(id)?;
                let trials = trials.unwrap_or(loaded.trials);
                if trials == 0 {
                    return Err(CliError::Usage("--trials must be at least 1".into()));
                }
                let base_seed = seed.unwrap_or(loaded.trial.seed);
                let report = run_comparison(&loaded.scenario, &loaded.trial, trials, base_seed)?;
                seeds = report.per_pair.iter().map(|p| p.seed).collect();
                summary.push_str(&render_summary(&report));
                summary.push('\n');
                reports.insert(id.to_string(), report);
            }
            create_dir(&out)?;
            let digest = cpe_core::report::sha256_hex(
                to_canonical_json(&reports.values().map(|r| &r.config_digest).collect::<Vec<_>>()).as_bytes(),
            );
            let artifacts = vec![
                artifact(&out, SUITE_FILE, "results", to_canonical_json(&reports).as_bytes())?,
                artifact(&out, SUMMARY_FILE, "summary", summary.as_bytes())?,
            ];
            let ctx = Context {
                command: "suite",
                args,
                started,
            };
            finish(ctx, &out, None, digest, seeds, artifacts)?;
            Ok(summary)
        }
        Command::Report { path, out } => render_stored(path.as_deref().unwrap_or(&out)),
        Command::Serve {
            source,
            mode,
            seed,
            port,
            realtime_factor,
        } => {
            let mut loaded = load_source(&source)?;
            pick_mode(&mut loaded, mode);
            if let Some(s) = seed {
                loaded.trial.seed = s;
            }
            if !loaded.gate_explicit {
                loaded.trial.gate = GateConfig::interactive();
            }
            serve(loaded, port, realtime_factor)?;
            Ok(String::new())
        }
    }
}

fn serve(loaded: LoadedConfig, port: u16, realtime_factor: f64) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind port {port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        eprintln!(
            "serving scenario {} ({} mode, seed {}) at {realtime_factor}x on http://{addr}",
            loaded.scenario.id,
            loaded.trial.mode.as_str(),
            loaded.trial.seed
        );
        cpe_api::serve(listener, loaded.trial, ServeOptions { realtime_factor })
            .await
            .map_err(|e| match e.status {
                400 => CliError::Usage(e.to_string()),
                _ => CliError::Runtime(e.to_string()),
            })
    })
}

/// Summary table for a stored comparison, suite or single-trial document.
pub fn render_stored(path: &Path) -> Result<String, CliError> {
    let file = if path.is_dir() {
        [COMPARISON_FILE, SUITE_FILE, RESULT_FILE]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| CliError::Usage(format!("no results document in {}", path.display())))?
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", file.display())))?;
    let bad = |e: serde_json::Error| CliError::Usage(format!("{}: not a results document: {e}", file.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    if value.get("baseline").is_some() && value.get("cpe").is_some() {
        let report: ComparisonReport = serde_json::from_value(value).map_err(bad)?;
        Ok(render_summary(&report))
    } else if value.get("config_digest").is_some() && value.get("mode").is_some() {
        let result: TrialResult = serde_json::from_value(value).map_err(bad)?;
        Ok(render_trial(&result))
    } else {
        let suite: BTreeMap<String, ComparisonReport> = serde_json::from_value(value).map_err(bad)?;
        Ok(suite
            .values()
            .map(render_summary)
            .collect::<Vec<_>>()
            .join("\n"))
    }
}
