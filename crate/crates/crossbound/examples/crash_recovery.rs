//! Crash recovery: the broker's state is an append-only event log per
//! job, so dropping the broker mid-flight and reopening it over the same
//! store resumes every job where it left off, with the quota ledger
//! rebuilt exactly.
//!
//! Run with: `cargo run --example crash_recovery`

mod support;

use crossbound::eventlog::JobState;
use support::DemoConfig;

fn main() {
    let demo = support::demo_with(DemoConfig {
        persistent: true,
        runtime_s: 900,
        ..DemoConfig::default()
    });

    let job_id = demo
        .broker
        .submit_job(demo.draft(b"ACGT"), "unite", demo.clock.now())
        .unwrap();
    println!("submitted {job_id}, state SUBMITTED, then the broker dies");
    let reserved_before = demo.broker.quota("alpha", "unite").unwrap().reserved_cs;

    // "Crash": throw away the broker and all its memory. The simulated
    // cluster (the remote side) keeps running; the event log survives.
    let support::Demo {
        dir,
        clock,
        broker,
        hosts,
        notifications,
        container_digest,
        bundle_digest,
        transfer_log: _,
    } = demo;
    drop(broker);
    let demo = support::reopen(
        dir,
        clock,
        hosts,
        notifications,
        container_digest,
        bundle_digest,
    );
    println!("broker restarted over the same event store");

    let record = demo.broker.status(&job_id).unwrap();
    println!("recovered state: {}", record.state);
    assert_eq!(record.state, JobState::Submitted);
    let reserved_after = demo.broker.quota("alpha", "unite").unwrap().reserved_cs;
    assert_eq!(
        reserved_before, reserved_after,
        "reservation recovered from the log"
    );

    let record = demo.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Notified);
    assert_eq!(demo.broker.quota("alpha", "unite").unwrap().reserved_cs, 0);
    println!(
        "job finished after restart: {} (post-proc {}s), ledger settled",
        record.state,
        record.phase_durations().post_proc_s.unwrap()
    );
}
