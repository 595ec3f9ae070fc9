//! Cluster selection: capability filtering (GPUs), least-loaded
//! preference, and the deterministic lexicographic tie-break.
//!
//! Run with: `cargo run --example cluster_selection`

mod support;

use crossbound::model::ResourceRequest;
use std::collections::BTreeMap;
use support::DemoConfig;

fn main() {
    let demo = support::demo_with(DemoConfig {
        cluster_ids: vec!["alpha".into(), "beta".into()],
        gpus_by_cluster: BTreeMap::from([("beta".to_string(), 4)]),
        runtime_s: 3600,
        ..DemoConfig::default()
    });

    // Equal load: the lexicographically smaller cluster id wins.
    let job = demo
        .broker
        .submit_job(demo.draft(b"cpu job"), "unite", demo.clock.now())
        .unwrap();
    let chosen = demo.broker.status(&job).unwrap().cluster_id().unwrap().to_string();
    println!("cpu job landed on {chosen} (tie-break)");
    assert_eq!(chosen, "alpha");

    // A GPU demand filters alpha out.
    let mut gpu_draft = demo.draft(b"gpu job");
    gpu_draft.resources = Some(ResourceRequest {
        cpus: 4,
        mem_mb: 8192,
        gpus: 1,
        walltime_s: 3600,
    });
    let job = demo
        .broker
        .submit_job(gpu_draft, "unite", demo.clock.now())
        .unwrap();
    let chosen = demo.broker.status(&job).unwrap().cluster_id().unwrap().to_string();
    println!("gpu job landed on {chosen} (capability filter)");
    assert_eq!(chosen, "beta");

    // With one job active on each cluster, the next submission goes to the
    // least-loaded eligible cluster.
    let job = demo
        .broker
        .submit_job(demo.draft(b"third"), "unite", demo.clock.now())
        .unwrap();
    let chosen = demo.broker.status(&job).unwrap().cluster_id().unwrap().to_string();
    println!("third job landed on {chosen} (least-loaded among equals)");

    println!("\n{}", demo.broker.quota_report());
}
