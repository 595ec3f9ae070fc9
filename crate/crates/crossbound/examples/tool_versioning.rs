//! Version retention: installing a new tool version never removes old
//! ones, so a stored workflow pinned to an earlier version keeps running
//! unchanged.
//!
//! Run with: `cargo run --example tool_versioning`

mod support;

use crossbound::eventlog::JobState;
use crossbound::registry::{parse_descriptor, serialize_descriptor};

fn main() {
    let demo = support::demo();

    // A second version of the same tool, with its own pinned container.
    let v2_container = demo.broker.artifacts().put(b"demo container image v2").unwrap();
    let mut v2 = support::demo_tool(&v2_container, &[]);
    v2.version = "2.0".into();
    v2.command_template =
        "shmatch2 --records {param:records} --in {input:seqs.fa} --out {output:result.txt}".into();

    // Descriptors round-trip through their XML wrapper form.
    let xml = serialize_descriptor(&v2);
    println!("descriptor for 2.0:\n{xml}");
    let v2 = parse_descriptor(xml.as_bytes()).unwrap();
    demo.broker.install_tool(v2, demo.clock.now()).unwrap();

    // A workflow pinned to 1.0 still validates and runs after the upgrade.
    let mut pinned = demo.draft(b"ACGT");
    pinned.tool_version = "1.0".into();
    let job_id = demo
        .broker
        .submit_job(pinned, "unite", demo.clock.now())
        .unwrap();
    let record = demo.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Notified);
    println!("job pinned to shmatch 1.0 finished: {}", record.state);

    // And 2.0 is there for new workflows.
    let mut latest = demo.draft(b"ACGT");
    latest.tool_version = "2.0".into();
    let job_id = demo
        .broker
        .submit_job(latest, "unite", demo.clock.now())
        .unwrap();
    let record = demo.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Notified);
    println!("job on shmatch 2.0 finished: {}", record.state);
}
