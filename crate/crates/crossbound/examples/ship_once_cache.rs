//! Ship-once staging: a reference bundle and the container image travel
//! to a cluster exactly once, however many jobs use them. Later jobs find
//! them in the per-cluster content-addressed cache.
//!
//! Run with: `cargo run --example ship_once_cache`

mod support;

use support::DemoConfig;

fn main() {
    let demo = support::demo_with(DemoConfig {
        with_bundle: true,
        ..DemoConfig::default()
    });

    for i in 0..5 {
        let job_id = demo
            .broker
            .submit_job(
                demo.draft(format!("sample-{i}").as_bytes()),
                "unite",
                demo.clock.now(),
            )
            .unwrap();
        demo.run_to_terminal(&job_id, 600);
    }

    let bundle_prefix = format!("/scratch/.bundles/{}/", demo.bundle_digest);
    let container_prefix = format!("/scratch/.bundles/{}/", demo.container_digest);
    let bundle_transfers = demo.transfer_log.puts_under("alpha", &bundle_prefix);
    let container_transfers = demo.transfer_log.puts_under("alpha", &container_prefix);

    println!("jobs run: 5");
    println!("bundle transfers:    {bundle_transfers}");
    println!("container transfers: {container_transfers}");
    assert_eq!(bundle_transfers, 1);
    assert_eq!(container_transfers, 1);

    println!("\nfull transfer log:");
    for record in demo.transfer_log.snapshot() {
        println!(
            "  t={:>5} {:?} {} ({} bytes)",
            record.timestamp, record.direction, record.remote_path, record.bytes
        );
    }
}
