//! Group-scoped quota accounting: core-hours are reserved up front,
//! unused time is refunded at settlement, and an exhausted budget fails
//! the job before any data moves.
//!
//! Run with: `cargo run --example quota_accounting`

mod support;

use crossbound::eventlog::{JobState, Phase};
use support::DemoConfig;

fn main() {
    // Budget of 10 core-hours; the demo tool requests 2 cpus × 2 h = 4 ch.
    let demo = support::demo_with(DemoConfig {
        budget_core_hours: 10,
        runtime_s: 1800,
        ..DemoConfig::default()
    });

    let first = demo
        .broker
        .submit_job(demo.draft(b"one"), "unite", demo.clock.now())
        .unwrap();
    let second = demo
        .broker
        .submit_job(demo.draft(b"two"), "unite", demo.clock.now())
        .unwrap();
    println!("after two submissions:\n{}", demo.broker.quota_report());

    // 8 of 10 core-hours are reserved; a third job does not fit.
    let third = demo
        .broker
        .submit_job(demo.draft(b"three"), "unite", demo.clock.now())
        .unwrap();
    let record = demo.broker.status(&third).unwrap();
    assert_eq!(record.state, JobState::Failed);
    let (phase, reason) = record.failure.unwrap();
    assert_eq!(phase, Phase::Reserve);
    println!("third job failed in {phase}: {reason}\n");

    demo.run_to_terminal(&first, 600);
    demo.run_to_terminal(&second, 600);
    println!("after both jobs settled:\n{}", demo.broker.quota_report());

    let quota = demo.broker.quota("alpha", "unite").unwrap();
    assert_eq!(quota.reserved_cs, 0, "reservations always return to zero");
    assert!(quota.spent_cs > 0);
}
