//! The broker: drives every job through validate → reserve → stage →
//! submit → poll → fetch → settle → notify, persisting each transition to
//! the event log before applying it.
//!
//! Quota is reserved before any byte is transferred, so a job that cannot
//! run never costs bandwidth. Completion is detected by polling the remote
//! queue; post-processing (fetch, settle, gc, notify) runs in order at the
//! detecting poll. All transitions for one job are serialized; the engine
//! lock also makes concurrent submissions race safely for the last quota
//! slot.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use crate::cluster::{
    select_cluster, AccountLedger, ClusterProfile, QuotaError, RobotAccount,
};
use crate::batchgen::{render_batch_script, SCRIPT_FILENAME};
use crate::clock::iso8601;
use crate::eventlog::{
    apply_event, replay, EventStore, JobEvent, JobRecord, JobState, Phase, StoreError,
};
use crate::model::{validate_jobspec, JobDraft, ReproducibilityManifest, ValidatedJob};
use crate::registry::ToolRegistry;
use crate::staging::{
    gc_workdir, ArtifactStore, GcState, ObjectStoreEndpoint, Stager, StagingError, StagingLocks,
};
use crate::transport::{Credential, Session, Transport, TransferLog, TransportError};

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("job {job_id} is already terminal ({state})")]
    AlreadyTerminal { job_id: String, state: JobState },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("recovery failed: {0}")]
    Recovery(String),
    #[error("wrong state: {0}")]
    WrongState(String),
    #[error("broker invariant violated: {0}")]
    Internal(String),
}

/// One record per terminal job. The file-sink line format is
/// `<iso8601> <job_id> <state> <exit_code?>`; custom sinks additionally
/// see the opaque recipient address the job spec carried.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    pub timestamp: u64,
    pub job_id: String,
    pub state: JobState,
    pub exit_code: Option<i32>,
    pub recipient: String,
}

impl Notification {
    pub fn render(&self) -> String {
        match self.exit_code {
            Some(code) => format!(
                "{} {} {} {code}",
                iso8601(self.timestamp),
                self.job_id,
                self.state
            ),
            None => format!("{} {} {}", iso8601(self.timestamp), self.job_id, self.state),
        }
    }
}

/// Delivery is at-least-once with idempotent content; consumers
/// deduplicate by job id.
pub enum NotificationSink {
    File(PathBuf),
    Stdout,
    Custom(Box<dyn FnMut(&Notification) + Send>),
}

impl NotificationSink {
    /// Collect notifications into a shared vector; handy for tests and
    /// examples.
    pub fn memory() -> (Self, Arc<Mutex<Vec<Notification>>>) {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink_view = Arc::clone(&seen);
        let sink = NotificationSink::Custom(Box::new(move |n: &Notification| {
            sink_view.lock().unwrap().push(n.clone());
        }));
        (sink, seen)
    }

    fn deliver(&mut self, notification: &Notification) {
        match self {
            NotificationSink::File(path) => {
                if let Some(parent) = path.parent() {
                    let _ = fs::create_dir_all(parent);
                }
                if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(path) {
                    let _ = writeln!(f, "{}", notification.render());
                }
            }
            NotificationSink::Stdout => println!("{}", notification.render()),
            NotificationSink::Custom(f) => f(notification),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BrokerOptions {
    /// Seconds between queue polls.
    pub poll_interval_s: u64,
    /// Consecutive transient failures before a job is failed.
    pub max_poll_failures: u32,
    /// Where fetched outputs are kept broker-side, one directory per job.
    pub outputs_dir: Option<PathBuf>,
}

impl Default for BrokerOptions {
    fn default() -> Self {
        BrokerOptions {
            poll_interval_s: 600,
            max_poll_failures: 3,
            outputs_dir: None,
        }
    }
}

/// Everything a broker is wired to.
pub struct BrokerSetup {
    pub store: Arc<dyn EventStore>,
    pub transport: Arc<dyn Transport>,
    pub artifacts: ArtifactStore,
    pub transfer_log: TransferLog,
    pub registry: ToolRegistry,
    pub clusters: Vec<ClusterProfile>,
    pub accounts: Vec<RobotAccount>,
    /// Per-cluster credential the broker authenticates with.
    pub credentials: BTreeMap<String, Credential>,
    pub endpoints: BTreeMap<String, ObjectStoreEndpoint>,
    pub sink: NotificationSink,
    pub options: BrokerOptions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateChange {
    pub job_id: String,
    pub from: JobState,
    pub to: JobState,
}

struct Engine {
    jobs: BTreeMap<String, JobRecord>,
    ledger: AccountLedger,
    next_seq: u64,
}

/// How far one micro-step got.
enum Step {
    /// An event was appended; keep driving.
    Advanced,
    /// Transient trouble was recorded; leave the job for the next poll.
    Blocked,
    /// Nothing to do right now.
    Idle,
}

pub struct Broker {
    engine: Mutex<Engine>,
    registry: RwLock<ToolRegistry>,
    clusters: Vec<ClusterProfile>,
    credentials: BTreeMap<String, Credential>,
    endpoints: BTreeMap<String, ObjectStoreEndpoint>,
    store: Arc<dyn EventStore>,
    transport: Arc<dyn Transport>,
    artifacts: ArtifactStore,
    transfer_log: TransferLog,
    locks: StagingLocks,
    sink: Mutex<NotificationSink>,
    options: BrokerOptions,
}

impl Broker {
    /// Open a broker over its event store, replaying all job logs. Jobs
    /// found mid-pipeline resume on the next poll; terminal jobs with an
    /// outstanding reservation or undelivered notification are finished
    /// here, so no reservation leaks across a crash.
    pub fn open(setup: BrokerSetup, now: u64) -> Result<Self, BrokerError> {
        let mut ledger = AccountLedger::new();
        for account in setup.accounts {
            ledger
                .add_account(account)
                .map_err(|e| BrokerError::Recovery(e.to_string()))?;
        }

        let logs = setup.store.load_all()?;
        let mut jobs = BTreeMap::new();
        let mut next_seq = 1;
        for (job_id, events) in &logs {
            let record = replay(job_id, events)?;
            if let Some(seq) = job_id
                .strip_prefix('j')
                .and_then(|s| s.parse::<u64>().ok())
            {
                next_seq = next_seq.max(seq + 1);
            }
            jobs.insert(job_id.clone(), record);
        }

        // Rebuild the quota ledger from the logs: outstanding reservations
        // for unsettled jobs, spent charges for settled ones.
        for record in jobs.values() {
            if let Some(reservation) = &record.reservation {
                if record.settled {
                    ledger
                        .restore_charge(
                            &reservation.cluster_id,
                            &reservation.user_group,
                            record.settled_charged_cs.unwrap_or(0),
                        )
                        .map_err(|e| BrokerError::Recovery(e.to_string()))?;
                } else {
                    ledger
                        .restore_reservation(reservation.clone())
                        .map_err(|e| BrokerError::Recovery(e.to_string()))?;
                }
            }
        }

        let broker = Broker {
            engine: Mutex::new(Engine {
                jobs,
                ledger,
                next_seq,
            }),
            registry: RwLock::new(setup.registry),
            clusters: setup.clusters,
            credentials: setup.credentials,
            endpoints: setup.endpoints,
            store: setup.store,
            transport: setup.transport,
            artifacts: setup.artifacts,
            transfer_log: setup.transfer_log,
            locks: StagingLocks::new(),
            sink: Mutex::new(setup.sink),
            options: setup.options,
        };

        // Close out crash windows around terminal states.
        {
            let mut engine = broker.engine.lock().unwrap();
            let ids: Vec<String> = engine.jobs.keys().cloned().collect();
            for job_id in ids {
                if engine.jobs[&job_id].state.is_terminal() {
                    broker.sweep_terminal(&mut engine, &job_id, now)?;
                }
            }
        }
        Ok(broker)
    }

    pub fn options(&self) -> &BrokerOptions {
        &self.options
    }

    pub fn transfer_log(&self) -> &TransferLog {
        &self.transfer_log
    }

    pub fn artifacts(&self) -> &ArtifactStore {
        &self.artifacts
    }

    pub fn install_tool(
        &self,
        descriptor: crate::model::ToolDescriptor,
        now: u64,
    ) -> Result<(), crate::registry::RegistryError> {
        self.registry.write().unwrap().install(descriptor, now)
    }

    /// Persist a job in CREATED and drive it through the submission
    /// pipeline. Validation, selection, quota, staging, and submission
    /// problems surface as a FAILED record, not as an error here.
    pub fn submit_job(
        &self,
        draft: JobDraft,
        group: &str,
        now: u64,
    ) -> Result<String, BrokerError> {
        let job_id = self.create_job(draft, group, now)?;
        let mut engine = self.engine.lock().unwrap();
        // Drive the submission pipeline only; everything past SUBMITTED is
        // the poller's business.
        while matches!(
            engine.jobs[&job_id].state,
            JobState::Created | JobState::Validated | JobState::Reserved | JobState::Staged
        ) {
            self.step(&mut engine, &job_id, now)?;
        }
        // A failed submission settles and notifies immediately.
        if engine.jobs[&job_id].state.is_terminal() {
            while self.sweep_terminal(&mut engine, &job_id, now)? {}
        }
        Ok(job_id)
    }

    /// Persist a job in CREATED without advancing it.
    pub fn create_job(
        &self,
        draft: JobDraft,
        group: &str,
        now: u64,
    ) -> Result<String, BrokerError> {
        let mut engine = self.engine.lock().unwrap();
        let job_id = format!("j{:06}", engine.next_seq);
        engine.next_seq += 1;
        let event = JobEvent::Created {
            t: now,
            group: group.to_string(),
            spec: draft.into_spec(job_id.clone()),
        };
        self.store.append(&job_id, &event)?;
        let record = replay(&job_id, std::slice::from_ref(&event))?;
        engine.jobs.insert(job_id.clone(), record);
        Ok(job_id)
    }

    /// Advance one job by one persisted event, if there is anything to do.
    /// `poll_once` is a loop over this; it is public so tests can stop a
    /// pipeline at any event boundary.
    pub fn step_job(&self, job_id: &str, now: u64) -> Result<Option<StateChange>, BrokerError> {
        let mut engine = self.engine.lock().unwrap();
        if !engine.jobs.contains_key(job_id) {
            return Err(BrokerError::UnknownJob(job_id.to_string()));
        }
        let from = engine.jobs[job_id].state;
        self.step(&mut engine, job_id, now)?;
        let to = engine.jobs[job_id].state;
        Ok((from != to).then(|| StateChange {
            job_id: job_id.to_string(),
            from,
            to,
        }))
    }

    /// One scheduler tick: resume any job stalled before SUBMITTED, query
    /// the remote queue for submitted/running jobs, and run fetch → settle
    /// → gc → notify for anything that completed.
    pub fn poll_once(&self, now: u64) -> Result<Vec<StateChange>, BrokerError> {
        let mut engine = self.engine.lock().unwrap();
        let ids: Vec<String> = engine.jobs.keys().cloned().collect();
        let mut changes = Vec::new();
        for job_id in ids {
            changes.extend(self.drive_job(&mut engine, &job_id, now)?);
        }
        Ok(changes)
    }

    /// Cancel a non-terminal job: best-effort remote cancel, then release
    /// its reservation and deliver the terminal notification.
    pub fn cancel(&self, job_id: &str, now: u64) -> Result<(), BrokerError> {
        let mut engine = self.engine.lock().unwrap();
        let record = engine
            .jobs
            .get(job_id)
            .ok_or_else(|| BrokerError::UnknownJob(job_id.to_string()))?;
        if record.state.is_terminal() {
            return Err(BrokerError::AlreadyTerminal {
                job_id: job_id.to_string(),
                state: record.state,
            });
        }
        if matches!(record.state, JobState::Submitted | JobState::Running) {
            if let (Some(remote_id), Ok(mut session)) =
                (record.remote_job_id, self.session_for(record, now))
            {
                let _ = session.exec_command(&format!("scancel {remote_id}"));
            }
        }
        self.commit(&mut engine, job_id, JobEvent::Cancelled { t: now })?;
        self.sweep_terminal(&mut engine, job_id, now)?;
        Ok(())
    }

    pub fn status(&self, job_id: &str) -> Result<JobRecord, BrokerError> {
        self.engine
            .lock()
            .unwrap()
            .jobs
            .get(job_id)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownJob(job_id.to_string()))
    }

    pub fn manifest(&self, job_id: &str) -> Result<ReproducibilityManifest, BrokerError> {
        self.status(job_id)?
            .manifest()
            .map_err(BrokerError::WrongState)
    }

    pub fn job_ids(&self) -> Vec<String> {
        self.engine.lock().unwrap().jobs.keys().cloned().collect()
    }

    pub fn quota_report(&self) -> String {
        crate::cluster::render_quota_report(&self.engine.lock().unwrap().ledger)
    }

    /// Live quota state of one account, for ledger assertions.
    pub fn quota(&self, cluster_id: &str, group: &str) -> Option<crate::cluster::QuotaState> {
        self.engine.lock().unwrap().ledger.quota(cluster_id, group)
    }

    /// Bytes of a fetched output, from the broker-side output directory.
    pub fn output_bytes(&self, job_id: &str, name: &str) -> Result<Vec<u8>, BrokerError> {
        let dir = self.options.outputs_dir.as_ref().ok_or_else(|| {
            BrokerError::WrongState("broker keeps no output directory".into())
        })?;
        fs::read(dir.join(job_id).join(name))
            .map_err(|e| BrokerError::WrongState(format!("output {name:?}: {e}")))
    }

    // ------------------------------------------------------------------
    // Engine internals
    // ------------------------------------------------------------------

    /// Append to the store first, then apply to the in-memory record, so
    /// memory never runs ahead of the log.
    fn commit(
        &self,
        engine: &mut Engine,
        job_id: &str,
        event: JobEvent,
    ) -> Result<(), BrokerError> {
        self.store.append(job_id, &event)?;
        let record = engine
            .jobs
            .get_mut(job_id)
            .ok_or_else(|| BrokerError::UnknownJob(job_id.to_string()))?;
        apply_event(record, &event).map_err(BrokerError::Internal)
    }

    fn drive_job(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
    ) -> Result<Vec<StateChange>, BrokerError> {
        let mut changes = Vec::new();
        for _ in 0..32 {
            let from = engine.jobs[job_id].state;
            let step = self.step(engine, job_id, now)?;
            let to = engine.jobs[job_id].state;
            if from != to {
                changes.push(StateChange {
                    job_id: job_id.to_string(),
                    from,
                    to,
                });
            }
            match step {
                Step::Advanced => continue,
                Step::Blocked | Step::Idle => break,
            }
        }
        Ok(changes)
    }

    fn step(&self, engine: &mut Engine, job_id: &str, now: u64) -> Result<Step, BrokerError> {
        let state = engine.jobs[job_id].state;
        match state {
            JobState::Created => self.step_validate(engine, job_id, now),
            JobState::Validated => self.step_reserve(engine, job_id, now),
            JobState::Reserved => self.step_stage(engine, job_id, now),
            JobState::Staged => self.step_submit(engine, job_id, now),
            JobState::Submitted | JobState::Running => self.step_poll_remote(engine, job_id, now),
            JobState::RemoteComplete => self.step_fetch(engine, job_id, now),
            JobState::Fetched => self.step_settle_or_notify(engine, job_id, now),
            JobState::Failed | JobState::Cancelled => {
                if self.sweep_terminal(engine, job_id, now)? {
                    Ok(Step::Advanced)
                } else {
                    Ok(Step::Idle)
                }
            }
            JobState::Notified => Ok(Step::Idle),
        }
    }

    fn fail(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
        phase: Phase,
        reason: String,
    ) -> Result<Step, BrokerError> {
        self.commit(
            engine,
            job_id,
            JobEvent::Failed {
                t: now,
                phase,
                reason,
            },
        )?;
        Ok(Step::Advanced)
    }

    /// Record a transient failure; the job fails once the consecutive
    /// count reaches the configured limit.
    fn transient(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
        phase: Phase,
        reason: String,
    ) -> Result<Step, BrokerError> {
        let failures = engine.jobs[job_id].consecutive_poll_failures + 1;
        if failures >= self.options.max_poll_failures {
            return self.fail(
                engine,
                job_id,
                now,
                phase,
                format!("{reason} ({failures} consecutive failures)"),
            );
        }
        self.commit(engine, job_id, JobEvent::PollFailed { t: now, reason })?;
        Ok(Step::Blocked)
    }

    fn validated_job(&self, engine: &Engine, job_id: &str) -> Result<ValidatedJob, String> {
        let record = &engine.jobs[job_id];
        validate_jobspec(&record.spec, &self.registry.read().unwrap())
            .map_err(|e| e.to_string())
    }

    fn step_validate(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
    ) -> Result<Step, BrokerError> {
        match self.validated_job(engine, job_id) {
            Ok(_) => {
                self.commit(engine, job_id, JobEvent::Validated { t: now })?;
                Ok(Step::Advanced)
            }
            Err(reason) => self.fail(engine, job_id, now, Phase::Validate, reason),
        }
    }

    fn step_reserve(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
    ) -> Result<Step, BrokerError> {
        let job = match self.validated_job(engine, job_id) {
            Ok(job) => job,
            Err(reason) => return self.fail(engine, job_id, now, Phase::Validate, reason),
        };
        let group = engine.jobs[job_id].group.clone();
        let selected = match select_cluster(&job, &group, &self.clusters, &engine.ledger, now) {
            Ok((profile, account)) => (profile.cluster_id.clone(), account.account_id.clone()),
            Err(e) => return self.fail(engine, job_id, now, Phase::Reserve, e.to_string()),
        };
        let (cluster_id, account_id) = selected;
        let reservation =
            match engine
                .ledger
                .reserve(&cluster_id, &group, job_id, &job.resources, now)
            {
                Ok(reservation) => reservation,
                Err(e @ QuotaError::QuotaExceeded { .. })
                | Err(e @ QuotaError::ConcurrencyLimit(_))
                | Err(e @ QuotaError::AccountExpired(_)) => {
                    return self.fail(engine, job_id, now, Phase::Reserve, e.to_string())
                }
                Err(e) => return Err(BrokerError::Internal(e.to_string())),
            };
        self.commit(
            engine,
            job_id,
            JobEvent::Reserved {
                t: now,
                account_id,
                reservation,
            },
        )?;
        Ok(Step::Advanced)
    }

    fn profile_for(&self, record: &JobRecord) -> Result<&ClusterProfile, String> {
        let cluster_id = record
            .cluster_id()
            .ok_or_else(|| "job has no selected cluster".to_string())?;
        self.clusters
            .iter()
            .find(|c| c.cluster_id == cluster_id)
            .ok_or_else(|| format!("cluster {cluster_id:?} vanished from the registry"))
    }

    fn session_for(&self, record: &JobRecord, now: u64) -> Result<Box<dyn Session>, String> {
        let profile = self.profile_for(record)?;
        let credential = self
            .credentials
            .get(&profile.cluster_id)
            .ok_or_else(|| format!("no credential for cluster {:?}", profile.cluster_id))?;
        self.transport
            .connect(profile, credential, now)
            .map_err(|e| e.to_string())
    }

    fn step_stage(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
    ) -> Result<Step, BrokerError> {
        let job = match self.validated_job(engine, job_id) {
            Ok(job) => job,
            Err(reason) => return self.fail(engine, job_id, now, Phase::Validate, reason),
        };
        let record = &engine.jobs[job_id];
        let scratch_root = match self.profile_for(record) {
            Ok(profile) => profile.scratch_root.clone(),
            Err(reason) => return self.fail(engine, job_id, now, Phase::Stage, reason),
        };
        let mut session = match self.session_for(record, now) {
            Ok(session) => session,
            Err(reason) => return self.fail(engine, job_id, now, Phase::Stage, reason),
        };
        let stager = Stager {
            scratch_root: &scratch_root,
            artifacts: &self.artifacts,
            endpoints: &self.endpoints,
            log: &self.transfer_log,
            locks: &self.locks,
        };
        match stager.stage_job(&job, session.as_mut()) {
            Ok(outcome) => {
                self.commit(
                    engine,
                    job_id,
                    JobEvent::Staged {
                        t: now,
                        layout: outcome.layout,
                        container_digest: job.descriptor.container_digest.clone(),
                        input_digests: outcome.input_digests,
                    },
                )?;
                Ok(Step::Advanced)
            }
            Err(e) => self.fail(engine, job_id, now, Phase::Stage, e.to_string()),
        }
    }

    fn step_submit(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
    ) -> Result<Step, BrokerError> {
        let job = match self.validated_job(engine, job_id) {
            Ok(job) => job,
            Err(reason) => return self.fail(engine, job_id, now, Phase::Validate, reason),
        };
        let record = &engine.jobs[job_id];
        let layout = record.layout.clone().expect("staged job has a layout");
        let profile = match self.profile_for(record) {
            Ok(profile) => profile.clone(),
            Err(reason) => return self.fail(engine, job_id, now, Phase::Submit, reason),
        };
        let script = match render_batch_script(&job, &layout, &profile) {
            Ok(script) => script,
            Err(e) => return self.fail(engine, job_id, now, Phase::Submit, e.to_string()),
        };
        let mut session = match self.session_for(record, now) {
            Ok(session) => session,
            Err(reason) => return self.fail(engine, job_id, now, Phase::Submit, reason),
        };
        let script_path = format!("{}/{SCRIPT_FILENAME}", layout.work_dir);
        if let Err(e) = session.put_file(script.text.as_bytes(), &script_path) {
            return self.fail(engine, job_id, now, Phase::Submit, e.to_string());
        }
        let result = match session.exec_command(&format!("sbatch {script_path}")) {
            Ok(result) => result,
            Err(e) => return self.fail(engine, job_id, now, Phase::Submit, e.to_string()),
        };
        if result.exit_code != 0 {
            return self.fail(
                engine,
                job_id,
                now,
                Phase::Submit,
                format!("sbatch rejected the script: {}", result.stderr.trim()),
            );
        }
        let remote_job_id = match parse_sbatch_reply(&result.stdout) {
            Some(id) => id,
            None => {
                return self.fail(
                    engine,
                    job_id,
                    now,
                    Phase::Submit,
                    format!("unparsable sbatch reply {:?}", result.stdout),
                )
            }
        };
        self.commit(
            engine,
            job_id,
            JobEvent::Submitted {
                t: now,
                remote_job_id,
                script_digest: script.script_digest,
            },
        )?;
        Ok(Step::Advanced)
    }

    fn step_poll_remote(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
    ) -> Result<Step, BrokerError> {
        let record = &engine.jobs[job_id];
        let remote_id = record.remote_job_id.expect("submitted job has a remote id");
        let was_submitted = record.state == JobState::Submitted;
        let mut session = match self.session_for(record, now) {
            Ok(session) => session,
            Err(reason) => return self.transient(engine, job_id, now, Phase::Poll, reason),
        };
        let reply = match session.exec_command(&format!("squeue {remote_id}")) {
            Ok(reply) => reply,
            Err(e) => {
                return self.transient(engine, job_id, now, Phase::Poll, e.to_string())
            }
        };
        if reply.exit_code != 0 {
            return self.transient(
                engine,
                job_id,
                now,
                Phase::Poll,
                format!("squeue failed: {}", reply.stderr.trim()),
            );
        }
        let Some((state_word, exit_code)) = parse_squeue_reply(&reply.stdout, remote_id) else {
            return self.transient(
                engine,
                job_id,
                now,
                Phase::Poll,
                format!("unparsable squeue reply {:?}", reply.stdout),
            );
        };
        match (state_word.as_str(), exit_code) {
            ("PENDING", _) => Ok(Step::Idle),
            ("RUNNING", _) => {
                if was_submitted {
                    self.commit(engine, job_id, JobEvent::Running { t: now })?;
                    Ok(Step::Advanced)
                } else {
                    Ok(Step::Idle)
                }
            }
            ("COMPLETED", code) => {
                // A fast job can complete between polls without ever being
                // observed running; record the implied RUNNING entry at the
                // detecting poll.
                if was_submitted {
                    self.commit(engine, job_id, JobEvent::Running { t: now })?;
                }
                self.commit(
                    engine,
                    job_id,
                    JobEvent::RemoteComplete {
                        t: now,
                        exit_code: code.unwrap_or(0),
                    },
                )?;
                Ok(Step::Advanced)
            }
            ("FAILED", code) => self.fail(
                engine,
                job_id,
                now,
                Phase::Proc,
                format!("remote exit code {}", code.unwrap_or(-1)),
            ),
            ("CANCELLED", _) => self.fail(
                engine,
                job_id,
                now,
                Phase::Proc,
                "cancelled on the remote queue".to_string(),
            ),
            (other, _) => self.transient(
                engine,
                job_id,
                now,
                Phase::Poll,
                format!("unknown remote state {other:?}"),
            ),
        }
    }

    fn step_fetch(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
    ) -> Result<Step, BrokerError> {
        let job = match self.validated_job(engine, job_id) {
            Ok(job) => job,
            Err(reason) => return self.fail(engine, job_id, now, Phase::Fetch, reason),
        };
        let record = &engine.jobs[job_id];
        let layout = record.layout.clone().expect("completed job has a layout");
        let scratch_root = match self.profile_for(record) {
            Ok(profile) => profile.scratch_root.clone(),
            Err(reason) => return self.fail(engine, job_id, now, Phase::Fetch, reason),
        };
        let mut session = match self.session_for(record, now) {
            Ok(session) => session,
            Err(reason) => return self.transient(engine, job_id, now, Phase::Fetch, reason),
        };
        let stager = Stager {
            scratch_root: &scratch_root,
            artifacts: &self.artifacts,
            endpoints: &self.endpoints,
            log: &self.transfer_log,
            locks: &self.locks,
        };
        let outputs = match stager.fetch_outputs(&job, &layout, session.as_mut()) {
            Ok(outputs) => outputs,
            // Absent outputs and corrupt data will not heal on retry.
            Err(e @ StagingError::MissingOutput(_))
            | Err(e @ StagingError::DigestMismatch { .. }) => {
                return self.fail(engine, job_id, now, Phase::Fetch, e.to_string())
            }
            Err(StagingError::Transport(e @ TransportError::SessionClosed)) => {
                return self.fail(engine, job_id, now, Phase::Fetch, e.to_string())
            }
            Err(e) => return self.transient(engine, job_id, now, Phase::Fetch, e.to_string()),
        };
        if let Some(dir) = &self.options.outputs_dir {
            let job_dir = dir.join(job_id);
            for output in &outputs {
                let path = job_dir.join(&output.name);
                if let Some(parent) = path.parent() {
                    let _ = fs::create_dir_all(parent);
                }
                if let Err(e) = fs::write(&path, &output.bytes) {
                    return self.fail(
                        engine,
                        job_id,
                        now,
                        Phase::Fetch,
                        format!("cannot persist output {:?}: {e}", output.name),
                    );
                }
            }
        }
        let output_digests = outputs
            .into_iter()
            .map(|o| (o.name, o.digest))
            .collect();
        self.commit(
            engine,
            job_id,
            JobEvent::Fetched {
                t: now,
                output_digests,
            },
        )?;
        Ok(Step::Advanced)
    }

    /// Broker-side runtime estimate: observed RUNNING → completion span,
    /// zero if the job was never observed running.
    fn observed_runtime(record: &JobRecord, now: u64) -> u64 {
        let Some(started) = record.entered_at(JobState::Running) else {
            return 0;
        };
        let ended = record
            .entered_at(JobState::RemoteComplete)
            .or_else(|| record.entered_at(JobState::Failed))
            .or_else(|| record.entered_at(JobState::Cancelled))
            .unwrap_or(now);
        ended.saturating_sub(started)
    }

    fn settle(&self, engine: &mut Engine, job_id: &str, now: u64) -> Result<(), BrokerError> {
        let record = &engine.jobs[job_id];
        let reservation = record
            .reservation
            .clone()
            .expect("settle requires a reservation");
        let runtime_s = Self::observed_runtime(record, now);
        let charge = engine
            .ledger
            .settle(
                &reservation.cluster_id,
                &reservation.user_group,
                job_id,
                runtime_s,
            )
            .map_err(|e| BrokerError::Internal(format!("settle {job_id}: {e}")))?;
        self.commit(
            engine,
            job_id,
            JobEvent::Settled {
                t: now,
                runtime_s,
                charged_cs: charge.charged_cs,
            },
        )
    }

    fn step_settle_or_notify(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
    ) -> Result<Step, BrokerError> {
        let record = &engine.jobs[job_id];
        if record.reservation.is_some() && !record.settled {
            self.settle(engine, job_id, now)?;
            return Ok(Step::Advanced);
        }
        // Work directory cleanup precedes notification; the bundle cache
        // stays for the next job.
        let record = &engine.jobs[job_id];
        if let (Some(layout), Ok(mut session)) =
            (record.layout.clone(), self.session_for(record, now))
        {
            let _ = gc_workdir(GcState::Fetched, &layout, session.as_mut());
        }
        self.notify(
            engine,
            job_id,
            Notification {
                timestamp: now,
                job_id: job_id.to_string(),
                state: JobState::Notified,
                exit_code: engine.jobs[job_id].exit_code,
                recipient: engine.jobs[job_id].spec.notify_to.clone(),
            },
        );
        self.commit(engine, job_id, JobEvent::Notified { t: now })?;
        Ok(Step::Advanced)
    }

    /// Close out a failed or cancelled job: settle the reservation if one
    /// is outstanding, then deliver the terminal notification once.
    /// Returns whether anything was done.
    fn sweep_terminal(
        &self,
        engine: &mut Engine,
        job_id: &str,
        now: u64,
    ) -> Result<bool, BrokerError> {
        let record = &engine.jobs[job_id];
        debug_assert!(record.state.is_terminal());
        if record.state == JobState::Notified {
            return Ok(false);
        }
        if record.reservation.is_some() && !record.settled {
            self.settle(engine, job_id, now)?;
            return Ok(true);
        }
        if !record.notification_sent {
            let record = &engine.jobs[job_id];
            if let (Some(layout), Ok(mut session)) =
                (record.layout.clone(), self.session_for(record, now))
            {
                let gc_state = match record.state {
                    JobState::Cancelled => GcState::Cancelled,
                    _ => GcState::Failed,
                };
                let _ = gc_workdir(gc_state, &layout, session.as_mut());
            }
            self.notify(
                engine,
                job_id,
                Notification {
                    timestamp: now,
                    job_id: job_id.to_string(),
                    state: engine.jobs[job_id].state,
                    exit_code: engine.jobs[job_id].exit_code,
                    recipient: engine.jobs[job_id].spec.notify_to.clone(),
                },
            );
            self.commit(engine, job_id, JobEvent::NotificationSent { t: now })?;
            return Ok(true);
        }
        Ok(false)
    }

    fn notify(&self, _engine: &mut Engine, _job_id: &str, notification: Notification) {
        self.sink.lock().unwrap().deliver(&notification);
    }
}

fn parse_sbatch_reply(stdout: &str) -> Option<u64> {
    stdout
        .trim()
        .strip_prefix("Submitted batch job ")?
        .trim()
        .parse()
        .ok()
}

fn parse_squeue_reply(stdout: &str, expected_id: u64) -> Option<(String, Option<i32>)> {
    let mut parts = stdout.split_whitespace();
    let id: u64 = parts.next()?.parse().ok()?;
    if id != expected_id {
        return None;
    }
    let state = parts.next()?.to_string();
    let exit_code = parts.next().and_then(|s| s.parse().ok());
    Some((state, exit_code))
}
