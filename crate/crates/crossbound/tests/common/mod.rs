//! Shared end-to-end rig: a broker wired to one or more simulated
//! clusters through the local transport, with a registered tool and a
//! funded robot account, all under one virtual clock.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crossbound::cluster::{
    AuthMode, Availability, ClusterCaps, ClusterProfile, QueueKind, RobotAccount,
};
use crossbound::digest::Digest;
use crossbound::eventlog::{DirStore, EventStore, MemStore};
use crossbound::lifecycle::{Broker, BrokerOptions, BrokerSetup, Notification, NotificationSink};
use crossbound::model::{
    DataKind, DataRef, DataSource, DeclaredInput, DeclaredParam, JobDraft, Parameter,
    ResourceRequest, ToolDescriptor,
};
use crossbound::registry::ToolRegistry;
use crossbound::simcluster::{FailureRule, RuntimeModel, SimClusterConfig, SimHost};
use crossbound::staging::{ArtifactStore, ObjectStoreEndpoint};
use crossbound::transport::{Credential, LocalTransport, TransferLog};
use crossbound::VirtualClock;

/// A transport wrapper with a kill switch, for exercising transient
/// remote-query failures: while tripped, every connect attempt fails as
/// unreachable.
pub struct SwitchableTransport {
    inner: Arc<dyn crossbound::transport::Transport>,
    broken: std::sync::atomic::AtomicBool,
}

impl SwitchableTransport {
    pub fn set_broken(&self, broken: bool) {
        self.broken
            .store(broken, std::sync::atomic::Ordering::SeqCst);
    }
}

impl crossbound::transport::Transport for SwitchableTransport {
    fn connect(
        &self,
        profile: &ClusterProfile,
        credential: &Credential,
        now: u64,
    ) -> Result<Box<dyn crossbound::transport::Session>, crossbound::transport::TransportError>
    {
        if self.broken.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(crossbound::transport::TransportError::Unreachable(
                profile.cluster_id.clone(),
            ));
        }
        self.inner.connect(profile, credential, now)
    }
}

pub struct RigBuilder {
    pub cluster_ids: Vec<String>,
    pub slots: u32,
    pub runtime_model: RuntimeModel,
    pub failure_injections: Vec<FailureRule>,
    pub auth_mode: AuthMode,
    pub credential: Option<Credential>,
    pub budget_core_hours: u64,
    pub max_concurrent_jobs: u32,
    pub valid_until: u64,
    pub persistent_store: bool,
    pub options: BrokerOptions,
    pub bundles: Vec<Digest>,
}

impl Default for RigBuilder {
    fn default() -> Self {
        RigBuilder {
            cluster_ids: vec!["alpha".into()],
            slots: 4,
            runtime_model: RuntimeModel::Fixed {
                default_s: 300,
                per_tool: BTreeMap::new(),
            },
            failure_injections: vec![],
            auth_mode: AuthMode::Key,
            credential: None,
            budget_core_hours: 10_000,
            max_concurrent_jobs: 64,
            valid_until: u64::MAX,
            persistent_store: false,
            options: BrokerOptions::default(),
            bundles: vec![],
        }
    }
}

impl RigBuilder {
    pub fn persistent(mut self) -> Self {
        self.persistent_store = true;
        self
    }

    pub fn runtime_s(mut self, seconds: u64) -> Self {
        self.runtime_model = RuntimeModel::Fixed {
            default_s: seconds,
            per_tool: BTreeMap::new(),
        };
        self
    }

    pub fn build(self) -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let clock = VirtualClock::new(0);

        let artifacts = ArtifactStore::open(dir.path().join("artifacts")).unwrap();
        let container_digest = artifacts.put(b"standard container image").unwrap();
        let bundle_digest = artifacts.put(b"standard reference bundle").unwrap();

        let mut registry = ToolRegistry::new();
        registry
            .install(standard_tool(&container_digest, &self.bundles), 0)
            .unwrap();

        let store_dir = dir.path().join("objects");
        fs::create_dir_all(&store_dir).unwrap();
        let mut endpoints = BTreeMap::new();
        endpoints.insert(
            "store1".to_string(),
            ObjectStoreEndpoint {
                endpoint_id: "store1".into(),
                base_url: store_dir.display().to_string(),
                access: Default::default(),
            },
        );

        let mut clusters = Vec::new();
        let mut accounts = Vec::new();
        let mut credentials = BTreeMap::new();
        let mut hosts = BTreeMap::new();
        for cluster_id in &self.cluster_ids {
            clusters.push(ClusterProfile {
                cluster_id: cluster_id.clone(),
                endpoint: format!("sim://{cluster_id}"),
                auth_mode: self.auth_mode,
                queue_kind: QueueKind::SlurmLike,
                scratch_root: "/scratch".into(),
                capabilities: ClusterCaps {
                    max_cpus: 64,
                    max_mem_mb: 262_144,
                    gpus_total: 8,
                    max_walltime_s: 30 * 86_400,
                },
                container_runtime_cmd: "singularity".into(),
                availability: Availability::Up,
            });
            accounts.push(RobotAccount {
                account_id: format!("robot-{cluster_id}"),
                cluster_id: cluster_id.clone(),
                user_group: "unite".into(),
                budget_core_hours: self.budget_core_hours,
                max_concurrent_jobs: self.max_concurrent_jobs,
                valid_from: 0,
                valid_until: self.valid_until,
            });
            credentials.insert(
                cluster_id.clone(),
                self.credential.unwrap_or(Credential::key()),
            );
            let host = Arc::new(
                SimHost::new(
                    SimClusterConfig {
                        cluster_id: cluster_id.clone(),
                        slots: self.slots,
                        runtime_model: self.runtime_model.clone(),
                        failure_injections: self.failure_injections.clone(),
                    },
                    dir.path().join("sandbox").join(cluster_id),
                )
                .unwrap(),
            );
            hosts.insert(cluster_id.clone(), host);
        }

        let store: Arc<dyn EventStore> = if self.persistent_store {
            Arc::new(DirStore::open(dir.path().join("jobs")).unwrap())
        } else {
            Arc::new(MemStore::new())
        };

        let mut rig = Rig {
            dir,
            clock,
            store,
            hosts,
            clusters,
            accounts,
            credentials,
            endpoints,
            registry,
            options: self.options,
            container_digest,
            bundle_digest,
            transfer_log: TransferLog::new(),
            transport: Arc::new(SwitchableTransport {
                inner: Arc::new(LocalTransport::default()) as _,
                broken: std::sync::atomic::AtomicBool::new(false),
            }),
            broker: None,
            notifications: Arc::new(Mutex::new(Vec::new())),
            store_dir,
        };
        rig.open_broker();
        rig
    }
}

pub struct Rig {
    pub dir: tempfile::TempDir,
    pub clock: VirtualClock,
    pub store: Arc<dyn EventStore>,
    pub hosts: BTreeMap<String, Arc<SimHost>>,
    pub clusters: Vec<ClusterProfile>,
    pub accounts: Vec<RobotAccount>,
    pub credentials: BTreeMap<String, Credential>,
    pub endpoints: BTreeMap<String, ObjectStoreEndpoint>,
    pub registry: ToolRegistry,
    pub options: BrokerOptions,
    pub container_digest: Digest,
    pub bundle_digest: Digest,
    pub transfer_log: TransferLog,
    pub transport: Arc<SwitchableTransport>,
    pub notifications: Arc<Mutex<Vec<Notification>>>,
    pub store_dir: PathBuf,
    broker: Option<Broker>,
}

impl Rig {
    pub fn builder() -> RigBuilder {
        RigBuilder::default()
    }

    pub fn new() -> Rig {
        RigBuilder::default().build()
    }

    pub fn broker(&self) -> &Broker {
        self.broker.as_ref().expect("broker is open")
    }

    pub fn host(&self, cluster_id: &str) -> &Arc<SimHost> {
        &self.hosts[cluster_id]
    }

    fn open_broker(&mut self) {
        let transfer_log = TransferLog::new();
        let local = Arc::new(LocalTransport::new(
            transfer_log.clone(),
            self.clock.clone(),
        ));
        for (cluster_id, host) in &self.hosts {
            local.register_host(format!("sim://{cluster_id}"), host.clone() as _);
        }
        let transport = Arc::new(SwitchableTransport {
            inner: local as _,
            broken: std::sync::atomic::AtomicBool::new(false),
        });
        let notifications = Arc::new(Mutex::new(Vec::new()));
        let sink_view = Arc::clone(&notifications);
        let sink = NotificationSink::Custom(Box::new(move |n: &Notification| {
            sink_view.lock().unwrap().push(n.clone());
        }));
        let mut options = self.options.clone();
        options.outputs_dir = Some(self.dir.path().join("outputs"));
        let broker = Broker::open(
            BrokerSetup {
                store: Arc::clone(&self.store),
                transport: transport.clone() as _,
                artifacts: ArtifactStore::open(self.dir.path().join("artifacts")).unwrap(),
                transfer_log: transfer_log.clone(),
                registry: self.registry.clone(),
                clusters: self.clusters.clone(),
                accounts: self.accounts.clone(),
                credentials: self.credentials.clone(),
                endpoints: self.endpoints.clone(),
                sink,
                options,
            },
            self.clock.now(),
        )
        .expect("broker opens");
        self.transfer_log = transfer_log;
        self.transport = transport;
        self.notifications = notifications;
        self.broker = Some(broker);
    }

    /// Model a broker crash: drop the engine and all in-memory state, then
    /// open a fresh broker over the same event store. The simulated
    /// clusters live on, as real remote machines would.
    pub fn restart_broker(&mut self) {
        self.broker = None;
        self.open_broker();
    }

    /// Advance the shared virtual clock and every cluster in lockstep.
    pub fn tick(&self, seconds: u64) {
        self.clock.advance(seconds);
        for host in self.hosts.values() {
            host.advance_clock(seconds);
        }
    }

    /// Tick-and-poll until the job is terminal; panics if it never is.
    pub fn run_to_terminal(&self, job_id: &str, step_s: u64) -> crossbound::JobRecord {
        for _ in 0..10_000 {
            let record = self.broker().status(job_id).unwrap();
            if record.state.is_terminal() {
                return record;
            }
            self.tick(step_s);
            self.broker().poll_once(self.clock.now()).unwrap();
        }
        panic!("job {job_id} never reached a terminal state");
    }

    /// An inline input file with the given content, created under the rig.
    pub fn inline_input(&self, name: &str, content: &[u8]) -> DataRef {
        let inputs = self.dir.path().join("inputs");
        fs::create_dir_all(&inputs).unwrap();
        // Content-addressed local file name, so drafts with different
        // payloads never race on one path.
        let digest = Digest::of_bytes(content);
        let path = inputs.join(&digest.as_hex()[..16]);
        fs::write(&path, content).unwrap();
        DataRef {
            name: name.to_string(),
            source: DataSource::Inline {
                path,
                size_bytes: content.len() as u64,
            },
            digest: Some(Digest::of_bytes(content)),
        }
    }

    /// A draft for the standard tool over one inline input.
    pub fn draft(&self, content: &[u8]) -> JobDraft {
        JobDraft {
            tool_id: "shmatch".into(),
            tool_version: "1.0".into(),
            inputs: vec![self.inline_input("seqs.fa", content)],
            parameters: vec![Parameter {
                name: "records".into(),
                value: "10".into(),
            }],
            resources: None,
            output_names: vec![],
            notify_to: "user@example.org".into(),
        }
    }

    /// Place an object into the stand-in object store.
    pub fn put_object(&self, key: &str, content: &[u8]) {
        let path = self.store_dir.join(key);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, content).unwrap();
    }
}

pub fn standard_tool(container_digest: &Digest, bundles: &[Digest]) -> ToolDescriptor {
    ToolDescriptor {
        tool_id: "shmatch".into(),
        version: "1.0".into(),
        container_image: "shmatch.sif".into(),
        container_digest: container_digest.clone(),
        command_template:
            "shmatch --records {param:records} --in {input:seqs.fa} --out {output:result.txt}"
                .into(),
        declared_inputs: vec![DeclaredInput {
            name: "seqs.fa".into(),
            kind: DataKind::Inline,
        }],
        declared_params: vec![DeclaredParam {
            name: "records".into(),
            default: Some("10".into()),
        }],
        declared_outputs: vec!["result.txt".into()],
        default_resources: ResourceRequest {
            cpus: 2,
            mem_mb: 1024,
            gpus: 0,
            walltime_s: 7200,
        },
        reference_bundles: bundles.to_vec(),
    }
}
