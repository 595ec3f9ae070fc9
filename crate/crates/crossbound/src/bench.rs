//! Benchmark harness: runs a ladder of synthetic workloads end to end on
//! a simulated cluster and reports the three-phase decomposition
//! (pre-processing, processing, post-processing) per workload size.
//!
//! Workloads run sequentially so phase attribution stays clean, each
//! starting on a fresh minute boundary. Input bytes are pseudorandom from
//! a fixed seed and sized to the configured kilobyte column; the
//! simulator's runtime model keys on the declared record count, not the
//! content.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::cluster::{
    AuthMode, Availability, ClusterCaps, ClusterProfile, QueueKind, RobotAccount,
};
use crate::eventlog::{JobState, MemStore};
use crate::lifecycle::{Broker, BrokerOptions, BrokerSetup, NotificationSink};
use crate::model::{
    DataKind, DataRef, DataSource, DeclaredInput, DeclaredParam, JobDraft, Parameter,
    ResourceRequest, ToolDescriptor,
};
use crate::registry::ToolRegistry;
use crate::simcluster::{RuntimeModel, SimClusterConfig, SimHost};
use crate::staging::ArtifactStore;
use crate::transport::{Credential, LocalTransport, TransferLog};
use crate::VirtualClock;
use crate::Digest;

fn default_seed() -> u64 {
    42
}

fn default_poll_step() -> u64 {
    60
}

fn default_records_flag() -> String {
    "--records".into()
}

/// One benchmark workload: how many records the tool is told to process
/// and how large the uploaded input file is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub records: u64,
    pub size_kb: f64,
}

/// Processing-minutes table driving the simulated cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeTable {
    #[serde(default = "default_records_flag")]
    pub records_flag: String,
    /// (records, minutes), strictly increasing in records.
    pub points: Vec<(u64, u64)>,
}

/// Parsed benchfile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Virtual seconds between queue polls while driving each workload.
    #[serde(default = "default_poll_step")]
    pub poll_step_s: u64,
    pub workloads: Vec<Workload>,
    pub runtime_table: RuntimeTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub records: u64,
    pub file_size_kb: f64,
    pub pre_proc_min: u64,
    pub proc_min: u64,
    pub post_proc_min: u64,
}

/// Rows sorted by record count ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("benchfile: {0}")]
    Spec(String),
    #[error("workload of {records} records failed: {reason}")]
    WorkloadFailed { records: u64, reason: String },
    #[error("bench io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bench broker: {0}")]
    Broker(String),
}

/// Run every workload end to end on a private simulated cluster and
/// collect the per-phase minutes from the job records.
pub fn run_bench(spec: &BenchSpec, workdir: &Path) -> Result<BenchReport, BenchError> {
    if spec.workloads.is_empty() {
        return Ok(BenchReport::default());
    }
    let runtime_model = RuntimeModel::Table {
        records_flag: spec.runtime_table.records_flag.clone(),
        points: spec.runtime_table.points.clone(),
    };
    runtime_model.validate().map_err(BenchError::Spec)?;
    if spec.poll_step_s == 0 {
        return Err(BenchError::Spec("poll_step_s must be positive".into()));
    }

    let clock = VirtualClock::new(0);
    let transfer_log = TransferLog::new();
    let transport = Arc::new(LocalTransport::new(transfer_log.clone(), clock.clone()));
    let host = Arc::new(
        SimHost::new(
            SimClusterConfig {
                cluster_id: "bench".into(),
                slots: 1,
                runtime_model,
                failure_injections: vec![],
            },
            workdir.join("sandbox"),
        )
        .map_err(|e| BenchError::Spec(e.to_string()))?,
    );
    transport.register_host("sim://bench", host.clone() as _);

    let artifacts = ArtifactStore::open(workdir.join("artifacts"))?;
    let mut seed_bytes = [0u8; 32];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    rng.fill_bytes(&mut seed_bytes);
    let container_digest = artifacts.put(&seed_bytes)?;

    let mut registry = ToolRegistry::new();
    registry
        .install(bench_tool(&container_digest, &spec.runtime_table.records_flag), 0)
        .map_err(|e| BenchError::Spec(e.to_string()))?;

    // Walltime must dominate the slowest table row.
    let max_minutes = spec
        .runtime_table
        .points
        .iter()
        .map(|(_, m)| *m)
        .max()
        .unwrap_or(1);
    let walltime_s = (max_minutes + 60) * 60;

    let broker = Broker::open(
        BrokerSetup {
            store: Arc::new(MemStore::new()),
            transport: transport as _,
            artifacts,
            transfer_log,
            registry,
            clusters: vec![ClusterProfile {
                cluster_id: "bench".into(),
                endpoint: "sim://bench".into(),
                auth_mode: AuthMode::Key,
                queue_kind: QueueKind::SlurmLike,
                scratch_root: "/scratch".into(),
                capabilities: ClusterCaps {
                    max_cpus: 64,
                    max_mem_mb: 1 << 20,
                    gpus_total: 0,
                    max_walltime_s: walltime_s,
                },
                container_runtime_cmd: "singularity".into(),
                availability: Availability::Up,
            }],
            accounts: vec![RobotAccount {
                account_id: "robot-bench".into(),
                cluster_id: "bench".into(),
                user_group: "bench".into(),
                budget_core_hours: u64::MAX / (2 * 3600),
                max_concurrent_jobs: 1,
                valid_from: 0,
                valid_until: u64::MAX,
            }],
            credentials: BTreeMap::from([("bench".to_string(), Credential::key())]),
            endpoints: BTreeMap::new(),
            sink: NotificationSink::Custom(Box::new(|_| {})),
            options: BrokerOptions::default(),
        },
        clock.now(),
    )
    .map_err(|e| BenchError::Broker(e.to_string()))?;

    let inputs_dir = workdir.join("inputs");
    std::fs::create_dir_all(&inputs_dir)?;

    let mut rows = Vec::new();
    for workload in &spec.workloads {
        // Fresh minute boundary so detection aligns with whole minutes.
        let misalign = clock.now() % 60;
        if misalign != 0 {
            clock.advance(60 - misalign);
            host.advance_clock(60 - misalign);
        }

        let size_bytes = (workload.size_kb * 1000.0).round().max(0.0) as usize;
        let mut payload = vec![0u8; size_bytes];
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed ^ workload.records.rotate_left(17));
        rng.fill_bytes(&mut payload);
        let input_path = inputs_dir.join(format!("records-{}.dat", workload.records));
        std::fs::write(&input_path, &payload)?;

        let draft = JobDraft {
            tool_id: "shbench".into(),
            tool_version: "1.0".into(),
            inputs: vec![DataRef {
                name: "records.dat".into(),
                source: DataSource::Inline {
                    path: input_path,
                    size_bytes: size_bytes as u64,
                },
                digest: Some(Digest::of_bytes(&payload)),
            }],
            parameters: vec![Parameter {
                name: "records".into(),
                value: workload.records.to_string(),
            }],
            resources: Some(ResourceRequest {
                cpus: 2,
                mem_mb: 4096,
                gpus: 0,
                walltime_s,
            }),
            output_names: vec![],
            notify_to: "bench@localhost".into(),
        };
        let job_id = broker
            .submit_job(draft, "bench", clock.now())
            .map_err(|e| BenchError::Broker(e.to_string()))?;

        let deadline_ticks = walltime_s / spec.poll_step_s + 10;
        let mut record = broker
            .status(&job_id)
            .map_err(|e| BenchError::Broker(e.to_string()))?;
        for _ in 0..deadline_ticks {
            if record.state.is_terminal() {
                break;
            }
            clock.advance(spec.poll_step_s);
            host.advance_clock(spec.poll_step_s);
            broker
                .poll_once(clock.now())
                .map_err(|e| BenchError::Broker(e.to_string()))?;
            record = broker
                .status(&job_id)
                .map_err(|e| BenchError::Broker(e.to_string()))?;
        }
        if record.state != JobState::Notified {
            let reason = match &record.failure {
                Some((phase, reason)) => format!("{phase}: {reason}"),
                None => format!("stuck in state {}", record.state),
            };
            return Err(BenchError::WorkloadFailed {
                records: workload.records,
                reason,
            });
        }
        let durations = record.phase_durations();
        rows.push(BenchRow {
            records: workload.records,
            file_size_kb: workload.size_kb,
            pre_proc_min: durations.pre_proc_s.unwrap_or(0) / 60,
            proc_min: durations.proc_s.unwrap_or(0) / 60,
            post_proc_min: durations.post_proc_s.unwrap_or(0) / 60,
        });
    }
    rows.sort_by_key(|r| r.records);
    Ok(BenchReport { rows })
}

fn bench_tool(container_digest: &Digest, records_flag: &str) -> ToolDescriptor {
    ToolDescriptor {
        tool_id: "shbench".into(),
        version: "1.0".into(),
        container_image: "shbench.sif".into(),
        container_digest: container_digest.clone(),
        command_template: format!(
            "shbench {records_flag} {{param:records}} --in {{input:records.dat}} --out {{output:result.txt}}"
        ),
        declared_inputs: vec![DeclaredInput {
            name: "records.dat".into(),
            kind: DataKind::Inline,
        }],
        declared_params: vec![DeclaredParam {
            name: "records".into(),
            default: None,
        }],
        declared_outputs: vec!["result.txt".into()],
        default_resources: ResourceRequest {
            cpus: 2,
            mem_mb: 4096,
            gpus: 0,
            walltime_s: 3600,
        },
        reference_bundles: vec![],
    }
}

/// Fixed-width text report: `RECORDS SIZE_KB PRE PROC POST`, one row per
/// workload, byte-deterministic.
pub fn render_report(report: &BenchReport) -> String {
    let mut cells = vec![[
        "RECORDS".to_string(),
        "SIZE_KB".to_string(),
        "PRE".to_string(),
        "PROC".to_string(),
        "POST".to_string(),
    ]];
    for row in &report.rows {
        cells.push([
            row.records.to_string(),
            format!("{}", row.file_size_kb),
            row.pre_proc_min.to_string(),
            row.proc_min.to_string(),
            row.post_proc_min.to_string(),
        ]);
    }
    let mut widths = [0usize; 5];
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &cells {
        let mut line = String::new();
        for (i, (cell, width)) in row.iter().zip(widths).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let _ = write!(line, "{cell:>width$}");
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_renders_header_only() {
        let text = render_report(&BenchReport::default());
        assert_eq!(text, "RECORDS  SIZE_KB  PRE  PROC  POST\n");
    }

    #[test]
    fn single_row_renders_two_lines() {
        let report = BenchReport {
            rows: vec![BenchRow {
                records: 10,
                file_size_kb: 5.542,
                pre_proc_min: 0,
                proc_min: 12,
                post_proc_min: 0,
            }],
        };
        let text = render_report(&report);
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().contains("5.542"));
    }

    #[test]
    fn benchfile_parses_from_toml() {
        let text = r#"
seed = 7
[[workloads]]
records = 10
size_kb = 5.542
[[workloads]]
records = 100
size_kb = 58.108
[runtime_table]
points = [[10, 12], [100, 118]]
"#;
        let spec: BenchSpec = toml::from_str(text).unwrap();
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.poll_step_s, 60);
        assert_eq!(spec.workloads.len(), 2);
        assert_eq!(spec.runtime_table.records_flag, "--records");
    }

    #[test]
    fn small_ladder_reports_exact_proc_minutes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BenchSpec {
            seed: 42,
            poll_step_s: 60,
            workloads: vec![
                Workload {
                    records: 10,
                    size_kb: 5.542,
                },
                Workload {
                    records: 100,
                    size_kb: 58.108,
                },
            ],
            runtime_table: RuntimeTable {
                records_flag: "--records".into(),
                points: vec![(10, 2), (100, 5)],
            },
        };
        let report = run_bench(&spec, dir.path()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].proc_min, 2);
        assert_eq!(report.rows[1].proc_min, 5);
        assert_eq!(report.rows[0].pre_proc_min, 0);
        assert!(report.rows[0].post_proc_min <= 10);
    }
}
