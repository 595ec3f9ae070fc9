//! Shared wiring for the examples: a broker connected to one or more
//! simulated clusters through the local transport, with a registered tool
//! and a funded robot account, all under a single virtual clock.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
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
use crossbound::simcluster::{RuntimeModel, SimClusterConfig, SimHost};
use crossbound::staging::ArtifactStore;
use crossbound::transport::{Credential, LocalTransport, TransferLog};
use crossbound::{JobRecord, VirtualClock};

pub struct Demo {
    pub dir: tempfile::TempDir,
    pub clock: VirtualClock,
    pub broker: Broker,
    pub hosts: BTreeMap<String, Arc<SimHost>>,
    pub transfer_log: TransferLog,
    pub notifications: Arc<Mutex<Vec<Notification>>>,
    pub container_digest: Digest,
    pub bundle_digest: Digest,
}

pub struct DemoConfig {
    pub cluster_ids: Vec<String>,
    pub gpus_by_cluster: BTreeMap<String, u32>,
    pub runtime_s: u64,
    pub slots: u32,
    pub budget_core_hours: u64,
    pub max_concurrent_jobs: u32,
    pub with_bundle: bool,
    pub persistent: bool,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            cluster_ids: vec!["alpha".into()],
            gpus_by_cluster: BTreeMap::new(),
            runtime_s: 300,
            slots: 4,
            budget_core_hours: 10_000,
            max_concurrent_jobs: 64,
            with_bundle: false,
            persistent: false,
        }
    }
}

pub fn demo() -> Demo {
    demo_with(DemoConfig::default())
}

pub fn demo_with(config: DemoConfig) -> Demo {
    let dir = tempfile::tempdir().expect("tempdir");
    let clock = VirtualClock::new(0);

    let artifacts = ArtifactStore::open(dir.path().join("artifacts")).unwrap();
    let container_digest = artifacts.put(b"demo container image").unwrap();
    let bundle_digest = artifacts.put(b"demo reference bundle").unwrap();

    let mut registry = ToolRegistry::new();
    let bundles = if config.with_bundle {
        vec![bundle_digest.clone()]
    } else {
        vec![]
    };
    registry.install(demo_tool(&container_digest, &bundles), 0).unwrap();

    let transfer_log = TransferLog::new();
    let transport = Arc::new(LocalTransport::new(transfer_log.clone(), clock.clone()));

    let mut clusters = Vec::new();
    let mut accounts = Vec::new();
    let mut credentials = BTreeMap::new();
    let mut hosts = BTreeMap::new();
    for cluster_id in &config.cluster_ids {
        clusters.push(ClusterProfile {
            cluster_id: cluster_id.clone(),
            endpoint: format!("sim://{cluster_id}"),
            auth_mode: AuthMode::Key,
            queue_kind: QueueKind::SlurmLike,
            scratch_root: "/scratch".into(),
            capabilities: ClusterCaps {
                max_cpus: 64,
                max_mem_mb: 262_144,
                gpus_total: config.gpus_by_cluster.get(cluster_id).copied().unwrap_or(0),
                max_walltime_s: 30 * 86_400,
            },
            container_runtime_cmd: "singularity".into(),
            availability: Availability::Up,
        });
        accounts.push(RobotAccount {
            account_id: format!("robot-{cluster_id}"),
            cluster_id: cluster_id.clone(),
            user_group: "unite".into(),
            budget_core_hours: config.budget_core_hours,
            max_concurrent_jobs: config.max_concurrent_jobs,
            valid_from: 0,
            valid_until: u64::MAX,
        });
        credentials.insert(cluster_id.clone(), Credential::key());
        let host = Arc::new(
            SimHost::new(
                SimClusterConfig {
                    cluster_id: cluster_id.clone(),
                    slots: config.slots,
                    runtime_model: RuntimeModel::Fixed {
                        default_s: config.runtime_s,
                        per_tool: BTreeMap::new(),
                    },
                    failure_injections: vec![],
                },
                dir.path().join("sandbox").join(cluster_id),
            )
            .unwrap(),
        );
        transport.register_host(format!("sim://{cluster_id}"), host.clone() as _);
        hosts.insert(cluster_id.clone(), host);
    }

    let store: Arc<dyn EventStore> = if config.persistent {
        Arc::new(DirStore::open(dir.path().join("jobs")).unwrap())
    } else {
        Arc::new(MemStore::new())
    };

    let notifications = Arc::new(Mutex::new(Vec::new()));
    let sink_view = Arc::clone(&notifications);
    let broker = Broker::open(
        BrokerSetup {
            store,
            transport: transport as _,
            artifacts,
            transfer_log: transfer_log.clone(),
            registry,
            clusters,
            accounts,
            credentials,
            endpoints: BTreeMap::new(),
            sink: NotificationSink::Custom(Box::new(move |n| {
                sink_view.lock().unwrap().push(n.clone());
            })),
            options: BrokerOptions {
                outputs_dir: Some(dir.path().join("outputs")),
                ..BrokerOptions::default()
            },
        },
        clock.now(),
    )
    .expect("broker opens");

    Demo {
        dir,
        clock,
        broker,
        hosts,
        transfer_log,
        notifications,
        container_digest,
        bundle_digest,
    }
}

impl Demo {
    /// Advance the virtual clock and every simulated cluster in lockstep.
    pub fn tick(&self, seconds: u64) {
        self.clock.advance(seconds);
        for host in self.hosts.values() {
            host.advance_clock(seconds);
        }
    }

    /// Tick-and-poll until the job is terminal.
    pub fn run_to_terminal(&self, job_id: &str, step_s: u64) -> JobRecord {
        loop {
            let record = self.broker.status(job_id).unwrap();
            if record.state.is_terminal() {
                return record;
            }
            self.tick(step_s);
            self.broker.poll_once(self.clock.now()).unwrap();
        }
    }

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

    /// A draft for the demo tool over one inline input.
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
}

/// Rebuild a broker over an existing persistent demo directory, as if the
/// process had restarted: fresh transport, fresh transfer log, same event
/// store, same simulated clusters.
pub fn reopen(
    dir: tempfile::TempDir,
    clock: VirtualClock,
    hosts: BTreeMap<String, Arc<SimHost>>,
    notifications: Arc<Mutex<Vec<Notification>>>,
    container_digest: Digest,
    bundle_digest: Digest,
) -> Demo {
    let transfer_log = TransferLog::new();
    let transport = Arc::new(LocalTransport::new(transfer_log.clone(), clock.clone()));
    let mut clusters = Vec::new();
    let mut accounts = Vec::new();
    let mut credentials = BTreeMap::new();
    for cluster_id in hosts.keys() {
        transport.register_host(format!("sim://{cluster_id}"), hosts[cluster_id].clone() as _);
        clusters.push(ClusterProfile {
            cluster_id: cluster_id.clone(),
            endpoint: format!("sim://{cluster_id}"),
            auth_mode: AuthMode::Key,
            queue_kind: QueueKind::SlurmLike,
            scratch_root: "/scratch".into(),
            capabilities: ClusterCaps {
                max_cpus: 64,
                max_mem_mb: 262_144,
                gpus_total: 0,
                max_walltime_s: 30 * 86_400,
            },
            container_runtime_cmd: "singularity".into(),
            availability: Availability::Up,
        });
        accounts.push(RobotAccount {
            account_id: format!("robot-{cluster_id}"),
            cluster_id: cluster_id.clone(),
            user_group: "unite".into(),
            budget_core_hours: 10_000,
            max_concurrent_jobs: 64,
            valid_from: 0,
            valid_until: u64::MAX,
        });
        credentials.insert(cluster_id.clone(), Credential::key());
    }
    let mut registry = ToolRegistry::new();
    registry
        .install(demo_tool(&container_digest, &[]), 0)
        .unwrap();
    let sink_view = Arc::clone(&notifications);
    let broker = Broker::open(
        BrokerSetup {
            store: Arc::new(DirStore::open(dir.path().join("jobs")).unwrap()),
            transport: transport as _,
            artifacts: ArtifactStore::open(dir.path().join("artifacts")).unwrap(),
            transfer_log: transfer_log.clone(),
            registry,
            clusters,
            accounts,
            credentials,
            endpoints: BTreeMap::new(),
            sink: NotificationSink::Custom(Box::new(move |n| {
                sink_view.lock().unwrap().push(n.clone());
            })),
            options: BrokerOptions {
                outputs_dir: Some(dir.path().join("outputs")),
                ..BrokerOptions::default()
            },
        },
        clock.now(),
    )
    .expect("broker reopens");
    Demo {
        dir,
        clock,
        broker,
        hosts,
        transfer_log,
        notifications,
        container_digest,
        bundle_digest,
    }
}

pub fn demo_tool(container_digest: &Digest, bundles: &[Digest]) -> ToolDescriptor {
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
