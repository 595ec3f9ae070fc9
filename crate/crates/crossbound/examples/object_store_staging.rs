//! Deferred dataset resolution: an object-store input is fetched by the
//! target cluster itself. The bytes never pass through the broker, which
//! the transfer log proves.
//!
//! Run with: `cargo run --example object_store_staging`

mod support;

use std::fs;

use crossbound::model::{DataRef, DataSource};
use crossbound::staging::{ArtifactStore, ObjectStoreEndpoint, Stager, StagingLocks};
use crossbound::transport::{Credential, Transport};
use std::collections::BTreeMap;

fn main() {
    let demo = support::demo();

    // A directory tree standing in for an S3-compatible store.
    let store_dir = demo.dir.path().join("object-store");
    fs::create_dir_all(store_dir.join("datasets")).unwrap();
    fs::write(store_dir.join("datasets/reference.fa"), b"NNNNACGTNNNN").unwrap();

    let endpoints = BTreeMap::from([(
        "store1".to_string(),
        ObjectStoreEndpoint {
            endpoint_id: "store1".into(),
            base_url: store_dir.display().to_string(),
            access: Default::default(),
        },
    )]);

    // Stage a job whose input lives in the store: the broker issues a
    // fetch command, the target pulls the object, and the digest is
    // resolved remotely.
    let artifacts = ArtifactStore::open(demo.dir.path().join("artifacts")).unwrap();
    let locks = StagingLocks::new();
    let stager = Stager {
        scratch_root: "/scratch",
        artifacts: &artifacts,
        endpoints: &endpoints,
        log: &demo.transfer_log,
        locks: &locks,
    };

    let mut draft = demo.draft(b"ACGT");
    draft.inputs.push(DataRef {
        name: "reference.fa".into(),
        source: DataSource::ObjectStore {
            endpoint: "store1".into(),
            key: "datasets/reference.fa".into(),
        },
        digest: None,
    });
    let spec = draft.into_spec("j-demo".into());
    let registry = {
        let mut r = crossbound::registry::ToolRegistry::new();
        r.install(support::demo_tool(&demo.container_digest, &[]), 0)
            .unwrap();
        r
    };
    let job = crossbound::validate_jobspec(&spec, &registry).unwrap();

    let transport = crossbound::transport::LocalTransport::new(
        demo.transfer_log.clone(),
        demo.clock.clone(),
    );
    transport.register_host("sim://alpha", demo.hosts["alpha"].clone() as _);
    let profile = crossbound::cluster::ClusterProfile {
        cluster_id: "alpha".into(),
        endpoint: "sim://alpha".into(),
        auth_mode: crossbound::cluster::AuthMode::Key,
        queue_kind: crossbound::cluster::QueueKind::SlurmLike,
        scratch_root: "/scratch".into(),
        capabilities: crossbound::cluster::ClusterCaps {
            max_cpus: 64,
            max_mem_mb: 262_144,
            gpus_total: 0,
            max_walltime_s: 86_400,
        },
        container_runtime_cmd: "singularity".into(),
        availability: crossbound::cluster::Availability::Up,
    };
    let mut session = transport.connect(&profile, &Credential::key(), 0).unwrap();
    let outcome = stager.stage_job(&job, session.as_mut()).unwrap();

    println!("staged layout:");
    for (name, path) in &outcome.layout.staged {
        println!("  {name} -> {path}");
    }
    println!("\nresolved input digests:");
    for (name, digest) in &outcome.input_digests {
        println!("  {name} sha256:{digest}");
    }

    let broker_moved_object = demo
        .transfer_log
        .snapshot()
        .iter()
        .any(|t| t.remote_path.contains("reference.fa"));
    println!(
        "\nobject bytes in the broker-side transfer log: {}",
        if broker_moved_object { "YES" } else { "NO" }
    );
    assert!(!broker_moved_object, "deferred resolution keeps bytes off the broker");
}
