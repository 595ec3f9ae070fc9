//! Remote providers, group-scoped robot accounts, quota accounting, and
//! cluster selection.
//!
//! Quota is tracked in integer core-seconds so the ledger stays exact:
//! requested core-hours are reserved up front and the unused remainder is
//! refunded when the job settles.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{ResourceRequest, ValidatedJob};

pub const CORE_SECONDS_PER_HOUR: u64 = 3600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AuthMode {
    /// ssh key pair.
    Key,
    /// Kerberos-style time-limited ticket, modeled as a tagged credential.
    Ticket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum QueueKind {
    SlurmLike,
    Shell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Availability {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCaps {
    pub max_cpus: u32,
    pub max_mem_mb: u64,
    pub gpus_total: u32,
    pub max_walltime_s: u64,
}

impl ClusterCaps {
    pub fn dominates(&self, r: &ResourceRequest) -> bool {
        r.cpus <= self.max_cpus
            && r.mem_mb <= self.max_mem_mb
            && r.gpus <= self.gpus_total
            && r.walltime_s <= self.max_walltime_s
    }
}

fn default_runtime_cmd() -> String {
    "singularity".to_string()
}

/// A remote provider: where it is, how to authenticate, what it can run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster_id: String,
    pub endpoint: String,
    pub auth_mode: AuthMode,
    pub queue_kind: QueueKind,
    /// Absolute path on the target under which job work directories live.
    pub scratch_root: String,
    pub capabilities: ClusterCaps,
    #[serde(default = "default_runtime_cmd")]
    pub container_runtime_cmd: String,
    pub availability: Availability,
}

impl ClusterProfile {
    pub fn validate(&self) -> Result<(), String> {
        if !self.scratch_root.starts_with('/') {
            return Err(format!(
                "scratch_root {:?} must be absolute",
                self.scratch_root
            ));
        }
        let c = &self.capabilities;
        if c.max_cpus == 0 || c.max_mem_mb == 0 || c.max_walltime_s == 0 {
            return Err("capability bounds must be positive".into());
        }
        Ok(())
    }
}

/// The group-scoped machine account a portal submits under, with its
/// allocation window and quota configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotAccount {
    pub account_id: String,
    pub cluster_id: String,
    pub user_group: String,
    pub budget_core_hours: u64,
    pub max_concurrent_jobs: u32,
    pub valid_from: u64,
    pub valid_until: u64,
}

impl RobotAccount {
    /// Access windows are half-open: valid at `valid_from`, expired at
    /// `valid_until`.
    pub fn check_validity(&self, now: u64) -> bool {
        self.valid_from <= now && now < self.valid_until
    }
}

/// Live quota counters for one account.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaState {
    pub budget_cs: u64,
    pub reserved_cs: u64,
    pub spent_cs: u64,
    pub max_concurrent_jobs: u32,
    pub active_jobs: u32,
}

impl QuotaState {
    pub fn headroom_cs(&self) -> u64 {
        self.budget_cs
            .saturating_sub(self.reserved_cs)
            .saturating_sub(self.spent_cs)
    }
}

pub fn core_hours(cs: u64) -> f64 {
    cs as f64 / CORE_SECONDS_PER_HOUR as f64
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum QuotaError {
    #[error("quota exceeded: requested {requested_cs} core-seconds, headroom {headroom_cs}")]
    QuotaExceeded { requested_cs: u64, headroom_cs: u64 },
    #[error("concurrency limit reached ({0} active jobs)")]
    ConcurrencyLimit(u32),
    #[error("account expired or not yet valid at t={0}")]
    AccountExpired(u64),
    #[error("no reservation outstanding for job {0:?}")]
    UnknownReservation(String),
    #[error("no account for group {group:?} on cluster {cluster_id:?}")]
    UnknownAccount { cluster_id: String, group: String },
    #[error("account for group {group:?} on cluster {cluster_id:?} already exists")]
    DuplicateAccount { cluster_id: String, group: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub job_id: String,
    pub cluster_id: String,
    pub user_group: String,
    pub cpus: u32,
    pub walltime_s: u64,
}

impl Reservation {
    pub fn core_seconds(&self) -> u64 {
        u64::from(self.cpus) * self.walltime_s
    }
}

/// What a settle charged and refunded, in core-seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SettledCharge {
    pub released_cs: u64,
    pub charged_cs: u64,
}

#[derive(Debug)]
struct AccountState {
    def: RobotAccount,
    reserved_cs: u64,
    spent_cs: u64,
    outstanding: BTreeMap<String, Reservation>,
}

impl AccountState {
    fn quota(&self) -> QuotaState {
        QuotaState {
            budget_cs: self.def.budget_core_hours * CORE_SECONDS_PER_HOUR,
            reserved_cs: self.reserved_cs,
            spent_cs: self.spent_cs,
            max_concurrent_jobs: self.def.max_concurrent_jobs,
            active_jobs: self.outstanding.len() as u32,
        }
    }
}

/// All robot accounts and their live quota state. Mutations are atomic at
/// the ledger level; the broker serializes access.
#[derive(Debug, Default)]
pub struct AccountLedger {
    accounts: BTreeMap<(String, String), AccountState>,
}

impl AccountLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_account(&mut self, def: RobotAccount) -> Result<(), QuotaError> {
        let key = (def.cluster_id.clone(), def.user_group.clone());
        if self.accounts.contains_key(&key) {
            return Err(QuotaError::DuplicateAccount {
                cluster_id: def.cluster_id,
                group: def.user_group,
            });
        }
        self.accounts.insert(
            key,
            AccountState {
                def,
                reserved_cs: 0,
                spent_cs: 0,
                outstanding: BTreeMap::new(),
            },
        );
        Ok(())
    }

    pub fn account(&self, cluster_id: &str, group: &str) -> Option<&RobotAccount> {
        self.accounts
            .get(&(cluster_id.to_string(), group.to_string()))
            .map(|s| &s.def)
    }

    pub fn quota(&self, cluster_id: &str, group: &str) -> Option<QuotaState> {
        self.accounts
            .get(&(cluster_id.to_string(), group.to_string()))
            .map(AccountState::quota)
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&RobotAccount, QuotaState)> {
        self.accounts.values().map(|s| (&s.def, s.quota()))
    }

    /// Reserve the requested core-hours up front and take a concurrency
    /// slot. Fails without side effects.
    pub fn reserve(
        &mut self,
        cluster_id: &str,
        group: &str,
        job_id: &str,
        resources: &ResourceRequest,
        now: u64,
    ) -> Result<Reservation, QuotaError> {
        let state = self
            .accounts
            .get_mut(&(cluster_id.to_string(), group.to_string()))
            .ok_or_else(|| QuotaError::UnknownAccount {
                cluster_id: cluster_id.to_string(),
                group: group.to_string(),
            })?;
        if !state.def.check_validity(now) {
            return Err(QuotaError::AccountExpired(now));
        }
        let quota = state.quota();
        if quota.active_jobs >= quota.max_concurrent_jobs {
            return Err(QuotaError::ConcurrencyLimit(quota.active_jobs));
        }
        let requested_cs = resources.core_seconds();
        if requested_cs > quota.headroom_cs() {
            return Err(QuotaError::QuotaExceeded {
                requested_cs,
                headroom_cs: quota.headroom_cs(),
            });
        }
        let reservation = Reservation {
            job_id: job_id.to_string(),
            cluster_id: cluster_id.to_string(),
            user_group: group.to_string(),
            cpus: resources.cpus,
            walltime_s: resources.walltime_s,
        };
        state.reserved_cs += requested_cs;
        state.outstanding.insert(job_id.to_string(), reservation.clone());
        Ok(reservation)
    }

    /// Re-apply a reservation recovered from a job's event log without
    /// re-checking validity: the admission decision was already made.
    pub fn restore_reservation(&mut self, reservation: Reservation) -> Result<(), QuotaError> {
        let key = (reservation.cluster_id.clone(), reservation.user_group.clone());
        let state = self
            .accounts
            .get_mut(&key)
            .ok_or(QuotaError::UnknownAccount {
                cluster_id: reservation.cluster_id.clone(),
                group: reservation.user_group.clone(),
            })?;
        state.reserved_cs += reservation.core_seconds();
        state
            .outstanding
            .insert(reservation.job_id.clone(), reservation);
        Ok(())
    }

    /// Release a reservation and charge actual usage, capped at the
    /// reserved walltime. Exactly once per reservation.
    pub fn settle(
        &mut self,
        cluster_id: &str,
        group: &str,
        job_id: &str,
        actual_runtime_s: u64,
    ) -> Result<SettledCharge, QuotaError> {
        let state = self
            .accounts
            .get_mut(&(cluster_id.to_string(), group.to_string()))
            .ok_or_else(|| QuotaError::UnknownAccount {
                cluster_id: cluster_id.to_string(),
                group: group.to_string(),
            })?;
        let reservation = state
            .outstanding
            .remove(job_id)
            .ok_or_else(|| QuotaError::UnknownReservation(job_id.to_string()))?;
        let released_cs = reservation.core_seconds();
        let charged_cs =
            u64::from(reservation.cpus) * actual_runtime_s.min(reservation.walltime_s);
        state.reserved_cs -= released_cs;
        state.spent_cs += charged_cs;
        Ok(SettledCharge {
            released_cs,
            charged_cs,
        })
    }

    /// Re-apply a settled charge recovered from a job's event log.
    pub fn restore_charge(
        &mut self,
        cluster_id: &str,
        group: &str,
        charged_cs: u64,
    ) -> Result<(), QuotaError> {
        let state = self
            .accounts
            .get_mut(&(cluster_id.to_string(), group.to_string()))
            .ok_or_else(|| QuotaError::UnknownAccount {
                cluster_id: cluster_id.to_string(),
                group: group.to_string(),
            })?;
        state.spent_cs += charged_cs;
        Ok(())
    }

    pub fn has_outstanding(&self, cluster_id: &str, group: &str, job_id: &str) -> bool {
        self.accounts
            .get(&(cluster_id.to_string(), group.to_string()))
            .is_some_and(|s| s.outstanding.contains_key(job_id))
    }
}

/// Why one cluster was passed over during selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ineligibility {
    Down,
    CapabilityMismatch,
    NoAccount,
    AccountExpired,
    QuotaExhausted,
    ConcurrencyLimit,
}

impl std::fmt::Display for Ineligibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ineligibility::Down => "availability DOWN",
            Ineligibility::CapabilityMismatch => "capability mismatch",
            Ineligibility::NoAccount => "no account for group",
            Ineligibility::AccountExpired => "account expired",
            Ineligibility::QuotaExhausted => "quota exhausted",
            Ineligibility::ConcurrencyLimit => "concurrency limit reached",
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("no eligible cluster: {}", format_causes(.causes))]
    NoEligibleCluster { causes: Vec<(String, Ineligibility)> },
}

fn format_causes(causes: &[(String, Ineligibility)]) -> String {
    if causes.is_empty() {
        return "no clusters registered".into();
    }
    causes
        .iter()
        .map(|(id, why)| format!("{id}: {why}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Pick the cluster to run a job on: availability UP, capabilities
/// dominating the request, a currently valid account for the group with
/// quota headroom for the full reservation. Among eligible clusters the
/// least-loaded wins, ties broken by lexicographic cluster id, so repeated
/// calls on a frozen snapshot agree.
pub fn select_cluster<'a>(
    job: &ValidatedJob,
    group: &str,
    clusters: &'a [ClusterProfile],
    ledger: &'a AccountLedger,
    now: u64,
) -> Result<(&'a ClusterProfile, &'a RobotAccount), SelectError> {
    let mut causes = Vec::new();
    let mut eligible: Vec<(&ClusterProfile, &RobotAccount, u32)> = Vec::new();

    for profile in clusters {
        if profile.availability == Availability::Down {
            causes.push((profile.cluster_id.clone(), Ineligibility::Down));
            continue;
        }
        if !profile.capabilities.dominates(&job.resources) {
            causes.push((profile.cluster_id.clone(), Ineligibility::CapabilityMismatch));
            continue;
        }
        let Some(account) = ledger.account(&profile.cluster_id, group) else {
            causes.push((profile.cluster_id.clone(), Ineligibility::NoAccount));
            continue;
        };
        if !account.check_validity(now) {
            causes.push((profile.cluster_id.clone(), Ineligibility::AccountExpired));
            continue;
        }
        let quota = ledger
            .quota(&profile.cluster_id, group)
            .expect("account implies quota");
        if quota.active_jobs >= quota.max_concurrent_jobs {
            causes.push((profile.cluster_id.clone(), Ineligibility::ConcurrencyLimit));
            continue;
        }
        if job.resources.core_seconds() > quota.headroom_cs() {
            causes.push((profile.cluster_id.clone(), Ineligibility::QuotaExhausted));
            continue;
        }
        eligible.push((profile, account, quota.active_jobs));
    }

    eligible
        .into_iter()
        .min_by(|a, b| a.2.cmp(&b.2).then_with(|| a.0.cluster_id.cmp(&b.0.cluster_id)))
        .map(|(profile, account, _)| (profile, account))
        .ok_or(SelectError::NoEligibleCluster { causes })
}

/// Aligned-column quota report: `GROUP CLUSTER BUDGET RESERVED SPENT ACTIVE`.
pub fn render_quota_report(ledger: &AccountLedger) -> String {
    let mut rows = vec![[
        "GROUP".to_string(),
        "CLUSTER".to_string(),
        "BUDGET".to_string(),
        "RESERVED".to_string(),
        "SPENT".to_string(),
        "ACTIVE".to_string(),
    ]];
    for (def, quota) in ledger.accounts() {
        rows.push([
            def.user_group.clone(),
            def.cluster_id.clone(),
            format!("{:.2}", core_hours(quota.budget_cs)),
            format!("{:.2}", core_hours(quota.reserved_cs)),
            format!("{:.2}", core_hours(quota.spent_cs)),
            quota.active_jobs.to_string(),
        ]);
    }
    let mut widths = [0usize; 6];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (i, (cell, width)) in row.iter().zip(widths).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let _ = write!(line, "{cell:<width$}");
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
