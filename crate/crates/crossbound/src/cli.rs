//! Operator command line: cluster/account/tool administration, job
//! submission and tracking, quota reporting, benchmarking, and manifest
//! verification.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.
//! Diagnostics go to the error stream, data to the output stream.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{render_report, run_bench, BenchSpec};
use crate::cluster::{
    AuthMode, Availability, ClusterCaps, ClusterProfile, QueueKind, RobotAccount,
};
use crate::config::{
    parse_job_spec_file, BrokerHandle, ClusterEntry, ConfigError, SimSettings, StateDir,
};
use crate::digest::Digest;
use crate::eventlog::JobState;
use crate::model::{verify_reproduction, ReproducibilityManifest};
use crate::registry::{parse_descriptor, persist_descriptor};
use crate::simcluster::RuntimeModel;
use crate::transport::Credential;

#[derive(Parser)]
#[command(
    name = "crossbound",
    about = "Cross-border HPC job broker for scientific portals",
    version
)]
struct Cli {
    /// Broker state directory (default: $CROSSBOUND_STATE_DIR or ./state).
    #[arg(long, global = true)]
    state_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manage remote cluster definitions.
    Cluster {
        #[command(subcommand)]
        action: ClusterAction,
    },
    /// Manage group-scoped robot accounts.
    Account {
        #[command(subcommand)]
        action: AccountAction,
    },
    /// Manage the versioned tool registry.
    Tool {
        #[command(subcommand)]
        action: ToolAction,
    },
    /// Submit a job spec and run it to completion.
    Submit {
        specfile: PathBuf,
        /// User group the job is submitted on behalf of.
        #[arg(long, default_value = "default")]
        group: String,
        /// Stop after submission instead of driving the job to a terminal
        /// state.
        #[arg(long)]
        no_wait: bool,
    },
    /// Show one job's record.
    Status { job_id: String },
    /// Copy a finished job's outputs (and manifest.json) into a directory.
    Fetch { job_id: String, dir: PathBuf },
    /// Cancel a non-terminal job.
    Cancel { job_id: String },
    /// Print the per-account quota report.
    Quota,
    /// Run a benchmark ladder on the simulated cluster.
    Bench { benchfile: PathBuf },
    /// Compare two reproducibility manifests.
    Verify {
        manifest_a: PathBuf,
        manifest_b: PathBuf,
    },
}

#[derive(Subcommand)]
enum ClusterAction {
    Add(ClusterAddArgs),
    List,
}

#[derive(Args)]
struct ClusterAddArgs {
    #[arg(long)]
    id: String,
    /// Transport endpoint; `sim://<id>` endpoints are served by the
    /// in-process simulator.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, value_parser = parse_auth_mode, default_value = "KEY")]
    auth: AuthMode,
    #[arg(long, value_parser = parse_queue_kind, default_value = "SLURM_LIKE")]
    queue: QueueKind,
    #[arg(long, default_value = "/scratch")]
    scratch_root: String,
    #[arg(long, default_value_t = 64)]
    max_cpus: u32,
    #[arg(long, default_value_t = 262_144)]
    max_mem_mb: u64,
    #[arg(long, default_value_t = 0)]
    gpus: u32,
    #[arg(long, default_value_t = 30 * 86_400)]
    max_walltime_s: u64,
    #[arg(long, default_value = "singularity")]
    runtime_cmd: String,
    /// Register the cluster as currently unavailable.
    #[arg(long)]
    down: bool,
    /// Credential kind the broker holds for this cluster (defaults to the
    /// cluster's auth mode).
    #[arg(long, value_parser = parse_auth_mode)]
    cred: Option<AuthMode>,
    /// Ticket expiry timestamp, for TICKET credentials.
    #[arg(long)]
    cred_expires: Option<u64>,
    /// Simulator: concurrently running jobs.
    #[arg(long, default_value_t = 4)]
    slots: u32,
    /// Simulator: fixed per-job runtime in virtual seconds.
    #[arg(long, default_value_t = 300)]
    runtime_s: u64,
}

#[derive(Subcommand)]
enum AccountAction {
    Add(AccountAddArgs),
    List,
}

#[derive(Args)]
struct AccountAddArgs {
    #[arg(long)]
    cluster: String,
    #[arg(long)]
    group: String,
    #[arg(long)]
    account_id: Option<String>,
    /// Core-hour budget.
    #[arg(long)]
    budget_ch: u64,
    #[arg(long, default_value_t = 4)]
    max_concurrent: u32,
    #[arg(long, default_value_t = 0)]
    valid_from: u64,
    /// End of the allocation window (default 9999-12-31T23:59:59Z).
    #[arg(long, default_value_t = 253_402_300_799)]
    valid_until: u64,
}

#[derive(Subcommand)]
enum ToolAction {
    /// Install a wrapper descriptor, optionally importing its container
    /// image and reference bundles into the artifact store.
    Install {
        descriptor: PathBuf,
        #[arg(long)]
        container: Option<PathBuf>,
        #[arg(long)]
        bundle: Vec<PathBuf>,
    },
    List,
}

fn parse_auth_mode(s: &str) -> Result<AuthMode, String> {
    match s {
        "KEY" => Ok(AuthMode::Key),
        "TICKET" => Ok(AuthMode::Ticket),
        other => Err(format!("auth mode {other:?} is not KEY or TICKET")),
    }
}

fn parse_queue_kind(s: &str) -> Result<QueueKind, String> {
    match s {
        "SLURM_LIKE" => Ok(QueueKind::SlurmLike),
        "SHELL" => Ok(QueueKind::Shell),
        other => Err(format!("queue kind {other:?} is not SLURM_LIKE or SHELL")),
    }
}

/// Run the CLI against explicit streams; the binary wraps this with the
/// process streams and exit code.
pub fn dispatch<O: Write, E: Write>(
    argv: &[String],
    out: &mut O,
    err: &mut E,
) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    let state = StateDir::resolve(cli.state_dir.as_deref());
    match run(cli.command, state, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn run<O: Write>(command: Command, state: StateDir, out: &mut O) -> Result<i32, CliError> {
    match command {
        Command::Cluster { action } => run_cluster(action, &state, out),
        Command::Account { action } => run_account(action, &state, out),
        Command::Tool { action } => run_tool(action, &state, out),
        Command::Submit {
            specfile,
            group,
            no_wait,
        } => run_submit(&specfile, &group, no_wait, state, out),
        Command::Status { job_id } => run_status(&job_id, state, out),
        Command::Fetch { job_id, dir } => run_fetch(&job_id, &dir, state, out),
        Command::Cancel { job_id } => run_cancel(&job_id, state, out),
        Command::Quota => {
            let handle = BrokerHandle::open(state)?;
            write!(out, "{}", handle.broker.quota_report())?;
            Ok(0)
        }
        Command::Bench { benchfile } => run_bench_cmd(&benchfile, state, out),
        Command::Verify {
            manifest_a,
            manifest_b,
        } => run_verify(&manifest_a, &manifest_b, out),
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn run_cluster<O: Write>(
    action: ClusterAction,
    state: &StateDir,
    out: &mut O,
) -> Result<i32, CliError> {
    match action {
        ClusterAction::Add(args) => {
            let endpoint = args
                .endpoint
                .clone()
                .unwrap_or_else(|| format!("sim://{}", args.id));
            let credential = Credential {
                kind: args.cred.unwrap_or(args.auth),
                expires_at: args.cred_expires,
            };
            let entry = ClusterEntry {
                profile: ClusterProfile {
                    cluster_id: args.id.clone(),
                    endpoint,
                    auth_mode: args.auth,
                    queue_kind: args.queue,
                    scratch_root: args.scratch_root,
                    capabilities: ClusterCaps {
                        max_cpus: args.max_cpus,
                        max_mem_mb: args.max_mem_mb,
                        gpus_total: args.gpus,
                        max_walltime_s: args.max_walltime_s,
                    },
                    container_runtime_cmd: args.runtime_cmd,
                    availability: if args.down {
                        Availability::Down
                    } else {
                        Availability::Up
                    },
                },
                credential: Some(credential),
                sim: Some(SimSettings {
                    slots: args.slots,
                    runtime_model: RuntimeModel::Fixed {
                        default_s: args.runtime_s,
                        per_tool: BTreeMap::new(),
                    },
                    failure_injections: vec![],
                }),
            };
            state.add_cluster(entry)?;
            writeln!(out, "added cluster {}", args.id)?;
            Ok(0)
        }
        ClusterAction::List => {
            for entry in state.load_clusters()? {
                let p = &entry.profile;
                writeln!(
                    out,
                    "{} {} {:?} {:?} {:?}",
                    p.cluster_id, p.endpoint, p.auth_mode, p.queue_kind, p.availability
                )?;
            }
            Ok(0)
        }
    }
}

fn run_account<O: Write>(
    action: AccountAction,
    state: &StateDir,
    out: &mut O,
) -> Result<i32, CliError> {
    match action {
        AccountAction::Add(args) => {
            let clusters = state.load_clusters()?;
            if !clusters
                .iter()
                .any(|c| c.profile.cluster_id == args.cluster)
            {
                return Err(CliError::Domain(format!(
                    "unknown cluster {:?}; add it first",
                    args.cluster
                )));
            }
            let account = RobotAccount {
                account_id: args
                    .account_id
                    .unwrap_or_else(|| format!("robot-{}", args.group)),
                cluster_id: args.cluster.clone(),
                user_group: args.group.clone(),
                budget_core_hours: args.budget_ch,
                max_concurrent_jobs: args.max_concurrent,
                valid_from: args.valid_from,
                valid_until: args.valid_until,
            };
            state.add_account(account)?;
            writeln!(out, "added account for group {} on {}", args.group, args.cluster)?;
            Ok(0)
        }
        AccountAction::List => {
            for a in state.load_accounts()? {
                writeln!(
                    out,
                    "{} {} {} budget_ch={} valid=[{},{})",
                    a.user_group,
                    a.cluster_id,
                    a.account_id,
                    a.budget_core_hours,
                    a.valid_from,
                    a.valid_until
                )?;
            }
            Ok(0)
        }
    }
}

fn run_tool<O: Write>(
    action: ToolAction,
    state: &StateDir,
    out: &mut O,
) -> Result<i32, CliError> {
    match action {
        ToolAction::Install {
            descriptor,
            container,
            bundle,
        } => {
            let bytes = fs::read(&descriptor)?;
            let parsed = parse_descriptor(&bytes)
                .map_err(|e| CliError::Domain(e.to_string()))?;
            state.ensure()?;
            let artifacts = crate::staging::ArtifactStore::open(state.artifacts_dir())?;
            if let Some(path) = container {
                let image = fs::read(&path)?;
                let digest = Digest::of_bytes(&image);
                if digest != parsed.container_digest {
                    return Err(CliError::Domain(format!(
                        "container file digest {digest} does not match the descriptor pin {}",
                        parsed.container_digest
                    )));
                }
                artifacts.put(&image)?;
            }
            for path in bundle {
                let data = fs::read(&path)?;
                let digest = artifacts.put(&data)?;
                writeln!(out, "imported bundle {digest}")?;
            }
            let now = state.load_clock();
            persist_descriptor(&state.registry_dir(), &parsed, now)
                .map_err(|e| CliError::Domain(e.to_string()))?;
            writeln!(out, "installed {} {}", parsed.tool_id, parsed.version)?;
            Ok(0)
        }
        ToolAction::List => {
            let registry = crate::registry::load_registry_dir(&state.registry_dir())
                .map_err(|e| CliError::Domain(e.to_string()))?;
            for tool in registry.tools() {
                writeln!(
                    out,
                    "{} {} container=sha256:{}",
                    tool.tool_id, tool.version, tool.container_digest
                )?;
            }
            Ok(0)
        }
    }
}

fn run_submit<O: Write>(
    specfile: &Path,
    group: &str,
    no_wait: bool,
    state: StateDir,
    out: &mut O,
) -> Result<i32, CliError> {
    let draft = parse_job_spec_file(specfile)?;
    let handle = BrokerHandle::open(state)?;
    let job_id = handle
        .broker
        .submit_job(draft, group, handle.clock.now())
        .map_err(|e| CliError::Domain(e.to_string()))?;
    writeln!(out, "{job_id}")?;
    let record = if no_wait {
        handle.broker.status(&job_id).map_err(|e| CliError::Domain(e.to_string()))?
    } else {
        handle.drive_to_terminal(&job_id, 60, 200_000)?
    };
    handle.persist_clock()?;
    match record.state {
        JobState::Notified | JobState::Submitted => Ok(0),
        JobState::Failed => {
            let (phase, reason) = record.failure.unwrap_or((
                crate::eventlog::Phase::Validate,
                "unknown".into(),
            ));
            Err(CliError::Domain(format!(
                "job {job_id} failed in phase {phase}: {reason}"
            )))
        }
        other => Err(CliError::Domain(format!("job {job_id} ended {other}"))),
    }
}

fn run_status<O: Write>(job_id: &str, state: StateDir, out: &mut O) -> Result<i32, CliError> {
    let handle = BrokerHandle::open(state)?;
    let record = handle
        .broker
        .status(job_id)
        .map_err(|e| CliError::Domain(e.to_string()))?;
    writeln!(out, "job {}", record.job_id)?;
    writeln!(out, "state {}", record.state)?;
    writeln!(out, "group {}", record.group)?;
    writeln!(out, "tool {} {}", record.spec.tool_id, record.spec.tool_version)?;
    if let Some(cluster) = record.cluster_id() {
        writeln!(out, "cluster {cluster}")?;
    }
    if let Some(remote) = record.remote_job_id {
        writeln!(out, "remote_job_id {remote}")?;
    }
    let durations = record.phase_durations();
    if let Some(s) = durations.pre_proc_s {
        writeln!(out, "pre_proc_s {s}")?;
    }
    if let Some(s) = durations.proc_s {
        writeln!(out, "proc_s {s}")?;
    }
    if let Some(s) = durations.post_proc_s {
        writeln!(out, "post_proc_s {s}")?;
    }
    if let Some(code) = record.exit_code {
        writeln!(out, "exit_code {code}")?;
    }
    if let Some((phase, reason)) = &record.failure {
        writeln!(out, "failed_phase {phase}")?;
        writeln!(out, "failed_reason {reason}")?;
    }
    for (name, digest) in &record.output_digests {
        writeln!(out, "output {name} sha256:{digest}")?;
    }
    Ok(0)
}

fn run_fetch<O: Write>(
    job_id: &str,
    dir: &Path,
    state: StateDir,
    out: &mut O,
) -> Result<i32, CliError> {
    let handle = BrokerHandle::open(state)?;
    let record = handle
        .broker
        .status(job_id)
        .map_err(|e| CliError::Domain(e.to_string()))?;
    let manifest = record
        .manifest()
        .map_err(CliError::Domain)?;
    fs::create_dir_all(dir)?;
    for (name, _) in &record.output_digests {
        let bytes = handle
            .broker
            .output_bytes(job_id, name)
            .map_err(|e| CliError::Domain(e.to_string()))?;
        let target = dir.join(name);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&target, bytes)?;
        writeln!(out, "{}", target.display())?;
    }
    let manifest_path = dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    writeln!(out, "{}", manifest_path.display())?;
    Ok(0)
}

fn run_cancel<O: Write>(job_id: &str, state: StateDir, out: &mut O) -> Result<i32, CliError> {
    let handle = BrokerHandle::open(state)?;
    handle
        .broker
        .cancel(job_id, handle.clock.now())
        .map_err(|e| CliError::Domain(e.to_string()))?;
    handle.persist_clock()?;
    writeln!(out, "cancelled {job_id}")?;
    Ok(0)
}

fn run_bench_cmd<O: Write>(
    benchfile: &Path,
    state: StateDir,
    out: &mut O,
) -> Result<i32, CliError> {
    let text = fs::read_to_string(benchfile)?;
    let spec: BenchSpec =
        toml::from_str(&text).map_err(|e| CliError::Domain(format!("benchfile: {e}")))?;
    state.ensure()?;
    let workdir = state.bench_dir();
    if workdir.exists() {
        fs::remove_dir_all(&workdir)?;
    }
    fs::create_dir_all(&workdir)?;
    let report = run_bench(&spec, &workdir).map_err(|e| CliError::Domain(e.to_string()))?;
    write!(out, "{}", render_report(&report))?;
    Ok(0)
}

fn run_verify<O: Write>(
    manifest_a: &Path,
    manifest_b: &Path,
    out: &mut O,
) -> Result<i32, CliError> {
    let load = |path: &Path| -> Result<ReproducibilityManifest, CliError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
    };
    let a = load(manifest_a)?;
    let b = load(manifest_b)?;
    let report = verify_reproduction(&a, &b);
    writeln!(
        out,
        "{}",
        if report.bit_identical {
            "BIT_IDENTICAL"
        } else {
            "NOT_BIT_IDENTICAL"
        }
    )?;
    writeln!(
        out,
        "{}",
        if report.same_setup {
            "SAME_SETUP"
        } else {
            "DIFFERENT_SETUP"
        }
    )?;
    for diff in &report.diffs {
        writeln!(out, "diff {}: {} != {}", diff.field, diff.left, diff.right)?;
    }
    Ok(if report.bit_identical { 0 } else { 1 })
}
