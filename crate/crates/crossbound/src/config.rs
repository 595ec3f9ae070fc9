//! Broker state directory and configuration documents.
//!
//! Everything the operator surface touches lives under one state
//! directory (environment variable `CROSSBOUND_STATE_DIR`, default
//! `./state`): cluster and account definitions, the tool registry, the
//! content-addressed artifact store, per-job event logs, fetched outputs,
//! the notification log, the persisted virtual clock, and a sandbox
//! directory per simulated cluster.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterProfile, RobotAccount};
use crate::eventlog::DirStore;
use crate::lifecycle::{Broker, BrokerOptions, BrokerSetup, NotificationSink};
use crate::model::JobDraft;
use crate::registry::{load_registry_dir, RegistryError};
use crate::simcluster::{FailureRule, RuntimeModel, SimClusterConfig, SimHost};
use crate::staging::{ArtifactStore, ObjectStoreEndpoint};
use crate::transport::{Credential, LocalTransport, TransferLog};
use crate::VirtualClock;

pub const STATE_DIR_ENV: &str = "CROSSBOUND_STATE_DIR";
pub const DEFAULT_STATE_DIR: &str = "./state";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io at {path:?}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("cannot parse {path:?}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("broker: {0}")]
    Broker(String),
}

/// Simulation knobs for a cluster served by the in-process simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    #[serde(default = "default_slots")]
    pub slots: u32,
    #[serde(default = "default_runtime_model")]
    pub runtime_model: RuntimeModel,
    #[serde(default)]
    pub failure_injections: Vec<FailureRule>,
}

fn default_slots() -> u32 {
    4
}

fn default_runtime_model() -> RuntimeModel {
    RuntimeModel::Fixed {
        default_s: 300,
        per_tool: BTreeMap::new(),
    }
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            slots: default_slots(),
            runtime_model: default_runtime_model(),
            failure_injections: vec![],
        }
    }
}

/// One cluster definition as stored in `clusters.toml`: the profile, the
/// credential the broker holds for it, and simulator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    #[serde(flatten)]
    pub profile: ClusterProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential: Option<Credential>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSettings>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ClustersFile {
    #[serde(default)]
    clusters: Vec<ClusterEntry>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct AccountsFile {
    #[serde(default)]
    accounts: Vec<RobotAccount>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct EndpointsFile {
    #[serde(default)]
    endpoints: Vec<ObjectStoreEndpoint>,
}

/// The broker's on-disk home.
#[derive(Debug, Clone)]
pub struct StateDir {
    root: PathBuf,
}

impl StateDir {
    pub fn resolve(explicit: Option<&Path>) -> StateDir {
        let root = explicit.map(Path::to_path_buf).unwrap_or_else(|| {
            std::env::var_os(STATE_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_STATE_DIR))
        });
        StateDir { root }
    }

    pub fn at(root: impl Into<PathBuf>) -> StateDir {
        StateDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clusters_file(&self) -> PathBuf {
        self.root.join("clusters.toml")
    }

    pub fn accounts_file(&self) -> PathBuf {
        self.root.join("accounts.toml")
    }

    pub fn endpoints_file(&self) -> PathBuf {
        self.root.join("endpoints.toml")
    }

    pub fn registry_dir(&self) -> PathBuf {
        self.root.join("registry")
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.root.join("artifacts")
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }

    pub fn outputs_dir(&self) -> PathBuf {
        self.root.join("outputs")
    }

    pub fn notifications_file(&self) -> PathBuf {
        self.root.join("notifications.log")
    }

    pub fn clock_file(&self) -> PathBuf {
        self.root.join("clock")
    }

    pub fn sandbox_dir(&self, cluster_id: &str) -> PathBuf {
        self.root.join("sandbox").join(cluster_id)
    }

    pub fn bench_dir(&self) -> PathBuf {
        self.root.join("bench")
    }

    pub fn ensure(&self) -> Result<(), ConfigError> {
        fs::create_dir_all(&self.root).map_err(|e| ConfigError::Io {
            path: self.root.clone(),
            detail: e.to_string(),
        })
    }

    pub fn load_clusters(&self) -> Result<Vec<ClusterEntry>, ConfigError> {
        Ok(load_toml::<ClustersFile>(&self.clusters_file())?
            .unwrap_or_default()
            .clusters)
    }

    pub fn save_clusters(&self, clusters: &[ClusterEntry]) -> Result<(), ConfigError> {
        self.ensure()?;
        save_toml(
            &self.clusters_file(),
            &ClustersFile {
                clusters: clusters.to_vec(),
            },
        )
    }

    pub fn add_cluster(&self, entry: ClusterEntry) -> Result<(), ConfigError> {
        entry
            .profile
            .validate()
            .map_err(ConfigError::Invalid)?;
        let mut clusters = self.load_clusters()?;
        if clusters
            .iter()
            .any(|c| c.profile.cluster_id == entry.profile.cluster_id)
        {
            return Err(ConfigError::Invalid(format!(
                "cluster {:?} already defined",
                entry.profile.cluster_id
            )));
        }
        clusters.push(entry);
        self.save_clusters(&clusters)
    }

    pub fn load_accounts(&self) -> Result<Vec<RobotAccount>, ConfigError> {
        Ok(load_toml::<AccountsFile>(&self.accounts_file())?
            .unwrap_or_default()
            .accounts)
    }

    pub fn add_account(&self, account: RobotAccount) -> Result<(), ConfigError> {
        if account.valid_from >= account.valid_until {
            return Err(ConfigError::Invalid(
                "valid_from must precede valid_until".into(),
            ));
        }
        // The configuration documents are TOML, whose integers are i64.
        if account.valid_until > i64::MAX as u64 || account.budget_core_hours > i64::MAX as u64 {
            return Err(ConfigError::Invalid(
                "timestamps and budgets must fit a signed 64-bit integer".into(),
            ));
        }
        let mut accounts = self.load_accounts()?;
        if accounts
            .iter()
            .any(|a| a.cluster_id == account.cluster_id && a.user_group == account.user_group)
        {
            return Err(ConfigError::Invalid(format!(
                "group {:?} already has an account on cluster {:?}",
                account.user_group, account.cluster_id
            )));
        }
        accounts.push(account);
        self.ensure()?;
        save_toml(&self.accounts_file(), &AccountsFile { accounts })
    }

    pub fn load_endpoints(&self) -> Result<Vec<ObjectStoreEndpoint>, ConfigError> {
        Ok(load_toml::<EndpointsFile>(&self.endpoints_file())?
            .unwrap_or_default()
            .endpoints)
    }

    pub fn load_clock(&self) -> u64 {
        fs::read_to_string(self.clock_file())
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(0)
    }

    pub fn save_clock(&self, now: u64) -> Result<(), ConfigError> {
        self.ensure()?;
        fs::write(self.clock_file(), format!("{now}\n")).map_err(|e| ConfigError::Io {
            path: self.clock_file(),
            detail: e.to_string(),
        })
    }
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, ConfigError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

fn save_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(value).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Parse a job spec document (TOML, `JobDraft` fields).
pub fn parse_job_spec_file(path: &Path) -> Result<JobDraft, ConfigError> {
    load_toml::<JobDraft>(path)?.ok_or_else(|| ConfigError::Io {
        path: path.to_path_buf(),
        detail: "no such file".into(),
    })
}

/// A broker opened over a state directory, with its simulated clusters
/// and persisted virtual clock.
pub struct BrokerHandle {
    pub broker: Broker,
    pub clock: VirtualClock,
    pub hosts: BTreeMap<String, Arc<SimHost>>,
    pub state: StateDir,
}

impl BrokerHandle {
    /// Wire a broker from the state directory: configuration documents,
    /// registry directory, artifact store, event logs, and one in-process
    /// simulated host per cluster with a `sim://` endpoint.
    pub fn open(state: StateDir) -> Result<BrokerHandle, ConfigError> {
        state.ensure()?;
        let clock = VirtualClock::new(state.load_clock());
        let entries = state.load_clusters()?;
        let accounts = state.load_accounts()?;
        let endpoints: BTreeMap<String, ObjectStoreEndpoint> = state
            .load_endpoints()?
            .into_iter()
            .map(|e| (e.endpoint_id.clone(), e))
            .collect();
        let registry = load_registry_dir(&state.registry_dir())?;
        let artifacts = ArtifactStore::open(state.artifacts_dir()).map_err(|e| ConfigError::Io {
            path: state.artifacts_dir(),
            detail: e.to_string(),
        })?;

        let transfer_log = TransferLog::new();
        let transport = Arc::new(LocalTransport::new(transfer_log.clone(), clock.clone()));
        let mut hosts = BTreeMap::new();
        let mut clusters = Vec::new();
        let mut credentials = BTreeMap::new();
        for entry in entries {
            let profile = entry.profile.clone();
            credentials.insert(
                profile.cluster_id.clone(),
                entry.credential.unwrap_or(Credential {
                    kind: profile.auth_mode,
                    expires_at: None,
                }),
            );
            if profile.endpoint.starts_with("sim://") {
                let sim = entry.sim.unwrap_or_default();
                let host = Arc::new(
                    SimHost::new(
                        SimClusterConfig {
                            cluster_id: profile.cluster_id.clone(),
                            slots: sim.slots,
                            runtime_model: sim.runtime_model,
                            failure_injections: sim.failure_injections,
                        },
                        state.sandbox_dir(&profile.cluster_id),
                    )
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                );
                transport.register_host(profile.endpoint.clone(), host.clone() as _);
                hosts.insert(profile.cluster_id.clone(), host);
            }
            clusters.push(profile);
        }

        let store = DirStore::open(state.jobs_dir()).map_err(|e| ConfigError::Broker(e.to_string()))?;
        let broker = Broker::open(
            BrokerSetup {
                store: Arc::new(store),
                transport: transport as _,
                artifacts,
                transfer_log,
                registry,
                clusters,
                accounts,
                credentials,
                endpoints,
                sink: NotificationSink::File(state.notifications_file()),
                options: BrokerOptions {
                    outputs_dir: Some(state.outputs_dir()),
                    ..BrokerOptions::default()
                },
            },
            clock.now(),
        )
        .map_err(|e| ConfigError::Broker(e.to_string()))?;

        Ok(BrokerHandle {
            broker,
            clock,
            hosts,
            state,
        })
    }

    /// Advance virtual time in lockstep across the clock and every
    /// simulated cluster, polling after each step, until the job is
    /// terminal.
    pub fn drive_to_terminal(
        &self,
        job_id: &str,
        step_s: u64,
        max_steps: u64,
    ) -> Result<crate::JobRecord, ConfigError> {
        for _ in 0..max_steps {
            let record = self
                .broker
                .status(job_id)
                .map_err(|e| ConfigError::Broker(e.to_string()))?;
            if record.state.is_terminal() {
                return Ok(record);
            }
            self.clock.advance(step_s);
            for host in self.hosts.values() {
                host.advance_clock(step_s);
            }
            self.broker
                .poll_once(self.clock.now())
                .map_err(|e| ConfigError::Broker(e.to_string()))?;
        }
        Err(ConfigError::Broker(format!(
            "job {job_id} did not finish within {max_steps} poll steps"
        )))
    }

    pub fn persist_clock(&self) -> Result<(), ConfigError> {
        self.state.save_clock(self.clock.now())
    }
}
