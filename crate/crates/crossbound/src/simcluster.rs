//! A deterministic in-process simulated HPC provider.
//!
//! The simulator accepts batch scripts, runs a FIFO slot model under an
//! explicitly advanced virtual clock, and "executes" the containerized
//! command as a keyed hash chain over the staged input digests, the
//! container image, and the normalized command line. Identical staged
//! inputs therefore always yield byte-identical outputs, independent of
//! wall clock, slot assignment, or submission order — which is exactly the
//! property the broker's reproducibility manifests are meant to witness.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::batchgen::{parse_directives, ParsedScript, ScriptError, SCRIPT_FILENAME, STDERR_FILENAME, STDOUT_FILENAME};
use crate::digest::{Digest, Hasher};
use crate::transport::{map_remote_path, ExecResult, RemoteHost};

/// How long a job "runs", derived from its command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum RuntimeModel {
    /// Seconds per tool (keyed by the command's program name), with a
    /// default for unknown tools.
    Fixed {
        default_s: u64,
        #[serde(default)]
        per_tool: BTreeMap<String, u64>,
    },
    /// Processing minutes as a function of the declared record count,
    /// linearly interpolated between knot points and clamped outside them.
    /// The record count is read from the command token following
    /// `records_flag`; commands without it run at the smallest knot.
    Table {
        records_flag: String,
        /// (records, minutes), strictly increasing in records.
        points: Vec<(u64, u64)>,
    },
}

impl RuntimeModel {
    pub fn validate(&self) -> Result<(), String> {
        if let RuntimeModel::Table { points, .. } = self {
            if points.is_empty() {
                return Err("runtime table needs at least one point".into());
            }
            if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err("runtime table points must be strictly increasing in records".into());
            }
        }
        Ok(())
    }

    fn runtime_s(&self, script: &ParsedScript) -> u64 {
        match self {
            RuntimeModel::Fixed { default_s, per_tool } => {
                let tool = script.command.split_whitespace().next().unwrap_or("");
                per_tool.get(tool).copied().unwrap_or(*default_s)
            }
            RuntimeModel::Table {
                records_flag,
                points,
            } => {
                let records = extract_records(&script.command, records_flag)
                    .unwrap_or_else(|| points[0].0);
                table_runtime_s(points, records)
            }
        }
    }
}

fn extract_records(command: &str, flag: &str) -> Option<u64> {
    let mut tokens = command.split_whitespace();
    while let Some(token) = tokens.next() {
        if token == flag {
            return tokens.next().and_then(|v| v.parse().ok());
        }
    }
    None
}

/// Piecewise-linear interpolation of processing time, in whole seconds
/// (floor), clamped at the first and last knots.
pub fn table_runtime_s(points: &[(u64, u64)], records: u64) -> u64 {
    let first = points.first().expect("validated non-empty");
    let last = points.last().expect("validated non-empty");
    if records <= first.0 {
        return first.1 * 60;
    }
    if records >= last.0 {
        return last.1 * 60;
    }
    for pair in points.windows(2) {
        let (r1, m1) = pair[0];
        let (r2, m2) = pair[1];
        if records <= r2 {
            let span = (records - r1) as i128;
            let rise = (m2 as i128 - m1 as i128) * 60;
            let base = m1 as i128 * 60;
            return (base + span * rise / (r2 - r1) as i128) as u64;
        }
    }
    last.1 * 60
}

/// Force a nonzero exit for jobs whose command matches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRule {
    pub command_contains: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClusterConfig {
    pub cluster_id: String,
    /// Concurrently running jobs.
    pub slots: u32,
    pub runtime_model: RuntimeModel,
    #[serde(default)]
    pub failure_injections: Vec<FailureRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimJobState {
    Pending,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl SimJobState {
    pub fn as_str(&self) -> &'static str {
        match self {
            SimJobState::Pending => "PENDING",
            SimJobState::Running => "RUNNING",
            SimJobState::Completed => "COMPLETED",
            SimJobState::Failed => "FAILED",
            SimJobState::Cancelled => "CANCELLED",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimJob {
    pub remote_job_id: u64,
    pub script: ParsedScript,
    pub state: SimJobState,
    pub submitted_at: u64,
    pub started_at: Option<u64>,
    pub finish_at: Option<u64>,
    pub exit_code: Option<i32>,
    runtime_s: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub time: u64,
    pub remote_job_id: u64,
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEventKind {
    Started,
    Finished { exit_code: i32 },
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("script rejected: {0}")]
    Script(#[from] ScriptError),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("bad cluster config: {0}")]
    Config(String),
}

/// Single-threaded discrete-event core. The broker talks to it only
/// through the transport's exec channel; tests may introspect directly.
#[derive(Debug)]
pub struct SimCluster {
    config: SimClusterConfig,
    sandbox: PathBuf,
    now: u64,
    next_id: u64,
    jobs: BTreeMap<u64, SimJob>,
    pending: VecDeque<u64>,
    running: BTreeSet<u64>,
}

impl SimCluster {
    pub fn new(config: SimClusterConfig, sandbox: PathBuf) -> Result<Self, SimError> {
        config.runtime_model.validate().map_err(SimError::Config)?;
        if config.slots == 0 {
            return Err(SimError::Config("slots must be positive".into()));
        }
        Ok(SimCluster {
            config,
            sandbox,
            now: 0,
            next_id: 1,
            jobs: BTreeMap::new(),
            pending: VecDeque::new(),
            running: BTreeSet::new(),
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn job(&self, id: u64) -> Option<&SimJob> {
        self.jobs.get(&id)
    }

    pub fn running_count(&self) -> usize {
        self.running.len()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Accept a batch script. The job queues FIFO and starts as soon as a
    /// slot is free; its runtime comes from the cluster's runtime model.
    pub fn sbatch(&mut self, script_bytes: &[u8]) -> Result<u64, SimError> {
        let text = std::str::from_utf8(script_bytes)
            .map_err(|_| SimError::Script(ScriptError::NotAscii))?;
        let script = parse_directives(text)?;
        let runtime_s = self.config.runtime_model.runtime_s(&script);
        let id = self.next_id;
        self.next_id += 1;
        self.jobs.insert(
            id,
            SimJob {
                remote_job_id: id,
                script,
                state: SimJobState::Pending,
                submitted_at: self.now,
                started_at: None,
                finish_at: None,
                exit_code: None,
                runtime_s,
            },
        );
        self.pending.push_back(id);
        let mut events = Vec::new();
        self.fill_slots(self.now, &mut events);
        Ok(id)
    }

    /// Current state under the virtual clock, with the exit code once
    /// terminal.
    pub fn squeue(&self, id: u64) -> Result<(SimJobState, Option<i32>), SimError> {
        let job = self.jobs.get(&id).ok_or(SimError::UnknownJob(id))?;
        Ok((job.state, job.exit_code))
    }

    pub fn scancel(&mut self, id: u64) -> Result<(), SimError> {
        let job = self.jobs.get_mut(&id).ok_or(SimError::UnknownJob(id))?;
        match job.state {
            SimJobState::Pending => {
                job.state = SimJobState::Cancelled;
                self.pending.retain(|p| *p != id);
            }
            SimJobState::Running => {
                job.state = SimJobState::Cancelled;
                self.running.remove(&id);
                let mut events = Vec::new();
                self.fill_slots(self.now, &mut events);
            }
            // Cancelling a finished job is a no-op, like the real queue.
            _ => {}
        }
        Ok(())
    }

    /// Advance the virtual clock, applying every start/finish event with
    /// time ≤ the new now in time order, FIFO (job id) tie-break.
    pub fn advance_clock(&mut self, seconds: u64) -> Vec<SimEvent> {
        let target = self.now + seconds;
        let mut events = Vec::new();
        loop {
            let next = self
                .running
                .iter()
                .filter_map(|id| {
                    let job = &self.jobs[id];
                    job.finish_at.map(|t| (t, *id))
                })
                .filter(|(t, _)| *t <= target)
                .min();
            let Some((time, id)) = next else { break };
            self.finish_job(id, time, &mut events);
            self.fill_slots(time, &mut events);
        }
        self.now = target;
        events
    }

    fn fill_slots(&mut self, time: u64, events: &mut Vec<SimEvent>) {
        while self.running.len() < self.config.slots as usize {
            let Some(id) = self.pending.pop_front() else { break };
            let job = self.jobs.get_mut(&id).expect("queued job exists");
            job.state = SimJobState::Running;
            job.started_at = Some(time);
            job.finish_at = Some(time + job.runtime_s);
            self.running.insert(id);
            events.push(SimEvent {
                time,
                remote_job_id: id,
                kind: SimEventKind::Started,
            });
        }
    }

    fn finish_job(&mut self, id: u64, time: u64, events: &mut Vec<SimEvent>) {
        self.running.remove(&id);
        let job = self.jobs.get_mut(&id).expect("running job exists");
        let injected = self
            .config
            .failure_injections
            .iter()
            .find(|rule| job.script.command.contains(&rule.command_contains))
            .map(|rule| rule.exit_code);
        let exit_code = match injected {
            Some(code) => code,
            None => execute_tool(&self.sandbox, &job.script),
        };
        job.exit_code = Some(exit_code);
        job.state = if exit_code == 0 {
            SimJobState::Completed
        } else {
            SimJobState::Failed
        };
        events.push(SimEvent {
            time,
            remote_job_id: id,
            kind: SimEventKind::Finished { exit_code },
        });
    }
}

/// Run the containerized command as a reproducible pure function of the
/// work-directory contents.
///
/// Inputs are every regular file staged flat in the work directory (the
/// batch script and log files excluded), identified by (name, digest) and
/// sorted. Command tokens that point under the work directory but do not
/// exist yet are the declared outputs; each receives a hash chain keyed by
/// the container image digest, the command line with the work-directory
/// prefix normalized out, and the sorted input digests. Absolute paths,
/// submission order, and the clock never enter the key, so identical
/// setups produce identical bytes.
pub fn execute_tool(sandbox: &Path, script: &ParsedScript) -> i32 {
    let Ok(work_dir) = map_remote_path(sandbox, &script.work_dir) else {
        return 64;
    };
    let mut inputs: Vec<(String, Digest)> = Vec::new();
    let entries = match fs::read_dir(&work_dir) {
        Ok(entries) => entries,
        Err(_) => return 65,
    };
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if matches!(name.as_str(), SCRIPT_FILENAME | STDOUT_FILENAME | STDERR_FILENAME) {
            continue;
        }
        if entry.path().is_file() {
            let Ok(bytes) = fs::read(entry.path()) else {
                return 65;
            };
            inputs.push((name, Digest::of_bytes(&bytes)));
        }
    }
    inputs.sort();

    let Ok(container_host_path) = map_remote_path(sandbox, &script.container_path) else {
        return 64;
    };
    let Ok(container_bytes) = fs::read(&container_host_path) else {
        return 66;
    };
    let container_digest = Digest::of_bytes(&container_bytes);

    let work_prefix = format!("{}/", script.work_dir);
    let outputs: Vec<String> = {
        let mut names: Vec<String> = script
            .command
            .split_whitespace()
            .filter_map(|tok| tok.strip_prefix(&work_prefix))
            .filter(|rel| !inputs.iter().any(|(name, _)| name == rel))
            .map(str::to_string)
            .collect();
        names.sort();
        names.dedup();
        names
    };

    let normalized_command = script.command.replace(&script.work_dir, "$WORKDIR");
    let mut key = Hasher::new();
    frame(&mut key, b"crossbound-sim-exec-v1");
    frame(&mut key, container_digest.as_hex().as_bytes());
    frame(&mut key, normalized_command.as_bytes());
    for (name, digest) in &inputs {
        frame(&mut key, name.as_bytes());
        frame(&mut key, digest.as_hex().as_bytes());
    }
    let key = key.finish_raw();

    for name in &outputs {
        let mut block = {
            let mut h = Hasher::new();
            h.update(&key).update(name.as_bytes());
            h.finish_raw()
        };
        let mut content = String::new();
        for _ in 0..4 {
            content.push_str(&hex::encode(block));
            content.push('\n');
            let mut h = Hasher::new();
            h.update(&block);
            block = h.finish_raw();
        }
        let path = work_dir.join(name);
        if let Some(parent) = path.parent() {
            if fs::create_dir_all(parent).is_err() {
                return 65;
            }
        }
        if fs::write(&path, content).is_err() {
            return 65;
        }
    }
    let _ = fs::write(work_dir.join(STDOUT_FILENAME), "run complete\n");
    let _ = fs::write(work_dir.join(STDERR_FILENAME), "");
    0
}

fn frame(h: &mut Hasher, field: &[u8]) {
    h.update(&(field.len() as u64).to_le_bytes());
    h.update(field);
}

/// The in-process "remote machine": a sandbox directory as its filesystem
/// and a command interpreter for the verbs the broker emits.
///
/// Output formats are exact contracts:
/// `sbatch <path>` prints `Submitted batch job <id>`;
/// `squeue <id>` prints `<id> <STATE> <exit_code?>`;
/// `fetch-object <base_url> <key> <dest>` copies from the directory tree
/// standing in for the object store; `sha256 <path>` prints
/// `<hex>  <path>`; `scancel <id>` cancels.
pub struct SimHost {
    sandbox: PathBuf,
    sim: Mutex<SimCluster>,
}

impl SimHost {
    pub fn new(config: SimClusterConfig, sandbox: PathBuf) -> Result<Self, SimError> {
        fs::create_dir_all(&sandbox).map_err(|e| SimError::Config(e.to_string()))?;
        let sim = SimCluster::new(config, sandbox.clone())?;
        Ok(SimHost {
            sandbox,
            sim: Mutex::new(sim),
        })
    }

    pub fn sim(&self) -> MutexGuard<'_, SimCluster> {
        self.sim.lock().unwrap()
    }

    pub fn advance_clock(&self, seconds: u64) -> Vec<SimEvent> {
        self.sim().advance_clock(seconds)
    }

    fn verb_sbatch(&self, args: &[&str]) -> ExecResult {
        let [path] = args else {
            return ExecResult::fail(2, "usage: sbatch <path>");
        };
        let mapped = match map_remote_path(&self.sandbox, path) {
            Ok(p) => p,
            Err(e) => return ExecResult::fail(1, e.to_string()),
        };
        let bytes = match fs::read(&mapped) {
            Ok(b) => b,
            Err(e) => return ExecResult::fail(1, format!("sbatch: cannot read {path}: {e}")),
        };
        match self.sim().sbatch(&bytes) {
            Ok(id) => ExecResult::ok(format!("Submitted batch job {id}\n")),
            Err(e) => ExecResult::fail(1, format!("sbatch: {e}")),
        }
    }

    fn verb_squeue(&self, args: &[&str]) -> ExecResult {
        let [id] = args else {
            return ExecResult::fail(2, "usage: squeue <id>");
        };
        let Ok(id) = id.parse::<u64>() else {
            return ExecResult::fail(1, format!("squeue: bad job id {id:?}"));
        };
        match self.sim().squeue(id) {
            Ok((state, Some(exit_code))) => {
                ExecResult::ok(format!("{id} {} {exit_code}\n", state.as_str()))
            }
            Ok((state, None)) => ExecResult::ok(format!("{id} {}\n", state.as_str())),
            Err(e) => ExecResult::fail(1, format!("squeue: {e}")),
        }
    }

    fn verb_scancel(&self, args: &[&str]) -> ExecResult {
        let [id] = args else {
            return ExecResult::fail(2, "usage: scancel <id>");
        };
        let Ok(id) = id.parse::<u64>() else {
            return ExecResult::fail(1, format!("scancel: bad job id {id:?}"));
        };
        match self.sim().scancel(id) {
            Ok(()) => ExecResult::ok(""),
            Err(e) => ExecResult::fail(1, format!("scancel: {e}")),
        }
    }

    fn verb_fetch_object(&self, args: &[&str]) -> ExecResult {
        let [base_url, key, dest] = args else {
            return ExecResult::fail(2, "usage: fetch-object <base_url> <key> <dest>");
        };
        let store_root = PathBuf::from(base_url.strip_prefix("file://").unwrap_or(base_url));
        let source = store_root.join(key);
        let bytes = match fs::read(&source) {
            Ok(b) => b,
            Err(e) => {
                return ExecResult::fail(1, format!("fetch-object: {base_url}/{key}: {e}"))
            }
        };
        let mapped = match map_remote_path(&self.sandbox, dest) {
            Ok(p) => p,
            Err(e) => return ExecResult::fail(1, e.to_string()),
        };
        if let Some(parent) = mapped.parent() {
            if let Err(e) = fs::create_dir_all(parent) {
                return ExecResult::fail(1, format!("fetch-object: {e}"));
            }
        }
        match fs::write(&mapped, &bytes) {
            Ok(()) => ExecResult::ok(""),
            Err(e) => ExecResult::fail(1, format!("fetch-object: {e}")),
        }
    }

    fn verb_sha256(&self, args: &[&str]) -> ExecResult {
        let [path] = args else {
            return ExecResult::fail(2, "usage: sha256 <path>");
        };
        let mapped = match map_remote_path(&self.sandbox, path) {
            Ok(p) => p,
            Err(e) => return ExecResult::fail(1, e.to_string()),
        };
        match fs::read(&mapped) {
            Ok(bytes) => {
                ExecResult::ok(format!("{}  {path}\n", Digest::of_bytes(&bytes)))
            }
            Err(e) => ExecResult::fail(1, format!("sha256: {path}: {e}")),
        }
    }
}

impl RemoteHost for SimHost {
    fn fs_root(&self) -> &Path {
        &self.sandbox
    }

    fn exec(&self, command: &str) -> ExecResult {
        let tokens: Vec<&str> = command.split_whitespace().collect();
        match tokens.split_first() {
            Some((&"sbatch", args)) => self.verb_sbatch(args),
            Some((&"squeue", args)) => self.verb_squeue(args),
            Some((&"scancel", args)) => self.verb_scancel(args),
            Some((&"fetch-object", args)) => self.verb_fetch_object(args),
            Some((&"sha256", args)) => self.verb_sha256(args),
            Some((&"true", _)) => ExecResult::ok(""),
            Some((other, _)) => ExecResult::fail(127, format!("unknown command: {other}")),
            None => ExecResult::fail(2, "empty command"),
        }
    }
}
