//! Append-only job event logs and their replay into job records.
//!
//! Every lifecycle transition is one persisted event; the broker's
//! in-memory state is always reconstructible by replaying the logs, which
//! is what crash recovery does. Replay validates that the recorded
//! transitions form a legal path through the state machine and refuses to
//! start on a corrupt store.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cluster::Reservation;
use crate::digest::Digest;
use crate::model::{JobSpec, ReproducibilityManifest};
use crate::staging::StagedLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JobState {
    Created,
    Validated,
    Reserved,
    Staged,
    Submitted,
    Running,
    RemoteComplete,
    Fetched,
    Notified,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            JobState::Notified | JobState::Failed | JobState::Cancelled
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            JobState::Created => "CREATED",
            JobState::Validated => "VALIDATED",
            JobState::Reserved => "RESERVED",
            JobState::Staged => "STAGED",
            JobState::Submitted => "SUBMITTED",
            JobState::Running => "RUNNING",
            JobState::RemoteComplete => "REMOTE_COMPLETE",
            JobState::Fetched => "FETCHED",
            JobState::Notified => "NOTIFIED",
            JobState::Failed => "FAILED",
            JobState::Cancelled => "CANCELLED",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which pipeline phase a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Validate,
    Reserve,
    Stage,
    Submit,
    Poll,
    Proc,
    Fetch,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Validate => "VALIDATE",
            Phase::Reserve => "RESERVE",
            Phase::Stage => "STAGE",
            Phase::Submit => "SUBMIT",
            Phase::Poll => "POLL",
            Phase::Proc => "PROC",
            Phase::Fetch => "FETCH",
        })
    }
}

/// One appended event in a job's log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JobEvent {
    Created {
        t: u64,
        group: String,
        spec: JobSpec,
    },
    Validated {
        t: u64,
    },
    Reserved {
        t: u64,
        account_id: String,
        reservation: Reservation,
    },
    Staged {
        t: u64,
        layout: StagedLayout,
        container_digest: Digest,
        input_digests: Vec<(String, Digest)>,
    },
    Submitted {
        t: u64,
        remote_job_id: u64,
        script_digest: Digest,
    },
    Running {
        t: u64,
    },
    RemoteComplete {
        t: u64,
        exit_code: i32,
    },
    Fetched {
        t: u64,
        output_digests: Vec<(String, Digest)>,
    },
    /// Quota settlement; exactly one per job that passed Reserved.
    Settled {
        t: u64,
        runtime_s: u64,
        charged_cs: u64,
    },
    Notified {
        t: u64,
    },
    Failed {
        t: u64,
        phase: Phase,
        reason: String,
    },
    Cancelled {
        t: u64,
    },
    /// Transient remote-query failure; state is unchanged.
    PollFailed {
        t: u64,
        reason: String,
    },
    /// Terminal notification delivered for a failed or cancelled job.
    NotificationSent {
        t: u64,
    },
}

impl JobEvent {
    pub fn timestamp(&self) -> u64 {
        match self {
            JobEvent::Created { t, .. }
            | JobEvent::Validated { t }
            | JobEvent::Reserved { t, .. }
            | JobEvent::Staged { t, .. }
            | JobEvent::Submitted { t, .. }
            | JobEvent::Running { t }
            | JobEvent::RemoteComplete { t, .. }
            | JobEvent::Fetched { t, .. }
            | JobEvent::Settled { t, .. }
            | JobEvent::Notified { t }
            | JobEvent::Failed { t, .. }
            | JobEvent::Cancelled { t }
            | JobEvent::PollFailed { t, .. }
            | JobEvent::NotificationSent { t } => *t,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

/// Where job event logs live. Appends to distinct job logs may happen
/// concurrently.
pub trait EventStore: Send + Sync {
    fn append(&self, job_id: &str, event: &JobEvent) -> Result<(), StoreError>;
    fn load_all(&self) -> Result<BTreeMap<String, Vec<JobEvent>>, StoreError>;
}

/// One `<job_id>.log` file per job, one JSON event per line.
#[derive(Debug)]
pub struct DirStore {
    dir: PathBuf,
}

impl DirStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(DirStore { dir })
    }

    fn log_path(&self, job_id: &str) -> PathBuf {
        self.dir.join(format!("{job_id}.log"))
    }
}

impl EventStore for DirStore {
    fn append(&self, job_id: &str, event: &JobEvent) -> Result<(), StoreError> {
        let line = serde_json::to_string(event)
            .map_err(|e| StoreError::Corrupt(format!("unencodable event: {e}")))?;
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path(job_id))?;
        writeln!(file, "{line}")?;
        Ok(())
    }

    fn load_all(&self) -> Result<BTreeMap<String, Vec<JobEvent>>, StoreError> {
        let mut logs = BTreeMap::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "log"))
            .collect();
        paths.sort();
        for path in paths {
            let job_id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| StoreError::Corrupt(format!("bad log name {path:?}")))?
                .to_string();
            let mut events = Vec::new();
            for (idx, line) in fs::read_to_string(&path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let event: JobEvent = serde_json::from_str(line).map_err(|e| {
                    StoreError::Corrupt(format!("{job_id} line {}: {e}", idx + 1))
                })?;
                events.push(event);
            }
            logs.insert(job_id, events);
        }
        Ok(logs)
    }
}

/// Volatile store for tests that do not exercise restart.
#[derive(Debug, Default)]
pub struct MemStore {
    inner: Mutex<BTreeMap<String, Vec<JobEvent>>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventStore for MemStore {
    fn append(&self, job_id: &str, event: &JobEvent) -> Result<(), StoreError> {
        self.inner
            .lock()
            .unwrap()
            .entry(job_id.to_string())
            .or_default()
            .push(event.clone());
        Ok(())
    }

    fn load_all(&self) -> Result<BTreeMap<String, Vec<JobEvent>>, StoreError> {
        Ok(self.inner.lock().unwrap().clone())
    }
}

/// Per-phase wall times, in the three-phase decomposition benchmark
/// reports use: pre-processing (submission side), processing (remote
/// execution as observed), post-processing (result retrieval through
/// notification).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseDurations {
    pub pre_proc_s: Option<u64>,
    pub proc_s: Option<u64>,
    pub post_proc_s: Option<u64>,
}

/// Current view of one job, reconstructed by replaying its event log.
#[derive(Debug, Clone, PartialEq)]
pub struct JobRecord {
    pub job_id: String,
    pub group: String,
    pub spec: JobSpec,
    pub state: JobState,
    pub failure: Option<(Phase, String)>,
    pub account_id: Option<String>,
    pub reservation: Option<Reservation>,
    pub layout: Option<StagedLayout>,
    pub container_digest: Option<Digest>,
    pub input_digests: Vec<(String, Digest)>,
    pub script_digest: Option<Digest>,
    pub remote_job_id: Option<u64>,
    pub exit_code: Option<i32>,
    pub output_digests: Vec<(String, Digest)>,
    /// Entry time of each state reached.
    pub timestamps: BTreeMap<JobState, u64>,
    pub settled: bool,
    pub settled_runtime_s: Option<u64>,
    pub settled_charged_cs: Option<u64>,
    pub notification_sent: bool,
    pub consecutive_poll_failures: u32,
}

impl JobRecord {
    pub fn cluster_id(&self) -> Option<&str> {
        self.reservation.as_ref().map(|r| r.cluster_id.as_str())
    }

    pub fn entered_at(&self, state: JobState) -> Option<u64> {
        self.timestamps.get(&state).copied()
    }

    pub fn phase_durations(&self) -> PhaseDurations {
        let span = |from: JobState, to: JobState| {
            match (self.entered_at(from), self.entered_at(to)) {
                (Some(a), Some(b)) => Some(b.saturating_sub(a)),
                _ => None,
            }
        };
        PhaseDurations {
            pre_proc_s: span(JobState::Created, JobState::Submitted),
            proc_s: span(JobState::Submitted, JobState::RemoteComplete),
            post_proc_s: span(JobState::RemoteComplete, JobState::Notified),
        }
    }

    /// The reproducibility manifest of a job whose outputs were fetched.
    pub fn manifest(&self) -> Result<ReproducibilityManifest, String> {
        if !matches!(self.state, JobState::Fetched | JobState::Notified) {
            return Err(format!(
                "job {} is {}; manifests exist once outputs are fetched",
                self.job_id, self.state
            ));
        }
        Ok(ReproducibilityManifest {
            job_id: self.job_id.clone(),
            cluster_id: self.cluster_id().unwrap_or_default().to_string(),
            tool_id: self.spec.tool_id.clone(),
            tool_version: self.spec.tool_version.clone(),
            container_digest: self
                .container_digest
                .clone()
                .expect("fetched job has a staged container"),
            input_digests: self.input_digests.clone(),
            script_digest: self
                .script_digest
                .clone()
                .expect("fetched job has a submitted script"),
            exit_code: self.exit_code.unwrap_or_default(),
            output_digests: self.output_digests.clone(),
        }
        .normalized())
    }
}

/// Replay a job's event log, validating that it is a path in the allowed
/// state graph with monotone timestamps.
pub fn replay(job_id: &str, events: &[JobEvent]) -> Result<JobRecord, StoreError> {
    let corrupt = |msg: String| StoreError::Corrupt(format!("job {job_id}: {msg}"));
    let mut iter = events.iter();
    let Some(JobEvent::Created { t, group, spec }) = iter.next() else {
        return Err(corrupt("log does not begin with a created event".into()));
    };
    if spec.job_id != job_id {
        return Err(corrupt(format!(
            "spec claims job id {:?}",
            spec.job_id
        )));
    }
    let mut record = JobRecord {
        job_id: job_id.to_string(),
        group: group.clone(),
        spec: spec.clone(),
        state: JobState::Created,
        failure: None,
        account_id: None,
        reservation: None,
        layout: None,
        container_digest: None,
        input_digests: Vec::new(),
        script_digest: None,
        remote_job_id: None,
        exit_code: None,
        output_digests: Vec::new(),
        timestamps: BTreeMap::from([(JobState::Created, *t)]),
        settled: false,
        settled_runtime_s: None,
        settled_charged_cs: None,
        notification_sent: false,
        consecutive_poll_failures: 0,
    };
    let mut last_t = *t;

    for event in iter {
        if event.timestamp() < last_t {
            return Err(corrupt(format!(
                "timestamp went backwards at {event:?}"
            )));
        }
        last_t = event.timestamp();
        apply_event(&mut record, event).map_err(corrupt)?;
    }
    Ok(record)
}

pub(crate) fn apply_event(record: &mut JobRecord, event: &JobEvent) -> Result<(), String> {
    use JobEvent as E;
    use JobState as S;

    let enter = |record: &mut JobRecord, state: S, t: u64| {
        record.state = state;
        record.timestamps.insert(state, t);
        record.consecutive_poll_failures = 0;
    };
    let expect = |record: &JobRecord, allowed: &[S], event: &E| {
        if allowed.contains(&record.state) {
            Ok(())
        } else {
            Err(format!(
                "illegal transition from {} via {event:?}",
                record.state
            ))
        }
    };

    match event {
        E::Created { .. } => return Err("duplicate created event".into()),
        E::Validated { t } => {
            expect(record, &[S::Created], event)?;
            enter(record, S::Validated, *t);
        }
        E::Reserved {
            t,
            account_id,
            reservation,
        } => {
            expect(record, &[S::Validated], event)?;
            record.account_id = Some(account_id.clone());
            record.reservation = Some(reservation.clone());
            enter(record, S::Reserved, *t);
        }
        E::Staged {
            t,
            layout,
            container_digest,
            input_digests,
        } => {
            expect(record, &[S::Reserved], event)?;
            record.layout = Some(layout.clone());
            record.container_digest = Some(container_digest.clone());
            record.input_digests = input_digests.clone();
            enter(record, S::Staged, *t);
        }
        E::Submitted {
            t,
            remote_job_id,
            script_digest,
        } => {
            expect(record, &[S::Staged], event)?;
            record.remote_job_id = Some(*remote_job_id);
            record.script_digest = Some(script_digest.clone());
            enter(record, S::Submitted, *t);
        }
        E::Running { t } => {
            expect(record, &[S::Submitted], event)?;
            enter(record, S::Running, *t);
        }
        E::RemoteComplete { t, exit_code } => {
            expect(record, &[S::Running], event)?;
            record.exit_code = Some(*exit_code);
            enter(record, S::RemoteComplete, *t);
        }
        E::Fetched { t, output_digests } => {
            expect(record, &[S::RemoteComplete], event)?;
            record.output_digests = output_digests.clone();
            enter(record, S::Fetched, *t);
        }
        E::Settled {
            runtime_s,
            charged_cs,
            ..
        } => {
            if record.reservation.is_none() {
                return Err("settled without a reservation".into());
            }
            if record.settled {
                return Err("double settle".into());
            }
            record.settled = true;
            record.settled_runtime_s = Some(*runtime_s);
            record.settled_charged_cs = Some(*charged_cs);
        }
        E::Notified { t } => {
            expect(record, &[S::Fetched], event)?;
            record.notification_sent = true;
            enter(record, S::Notified, *t);
        }
        E::Failed { t, phase, reason } => {
            if record.state.is_terminal() {
                return Err("failed after a terminal state".into());
            }
            record.failure = Some((*phase, reason.clone()));
            enter(record, S::Failed, *t);
        }
        E::Cancelled { t } => {
            if record.state.is_terminal() {
                return Err("cancelled after a terminal state".into());
            }
            enter(record, S::Cancelled, *t);
        }
        E::PollFailed { .. } => {
            record.consecutive_poll_failures += 1;
        }
        E::NotificationSent { .. } => {
            if !record.state.is_terminal() {
                return Err("notification sent before a terminal state".into());
            }
            record.notification_sent = true;
        }
    }
    Ok(())
}
