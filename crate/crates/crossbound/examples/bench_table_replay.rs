//! Benchmark replay: run the five-workload ladder end to end on the
//! simulated cluster and print the three-phase report. Processing time
//! follows the configured records → minutes table; input transfer happens
//! at simulated speed, so pre-processing rounds to zero.
//!
//! Run with: `cargo run --example bench_table_replay`

use crossbound::bench::{render_report, run_bench, BenchSpec, RuntimeTable, Workload};

fn main() {
    let spec = BenchSpec {
        seed: 42,
        poll_step_s: 60,
        workloads: vec![
            Workload { records: 10, size_kb: 5.542 },
            Workload { records: 100, size_kb: 58.108 },
            Workload { records: 1_000, size_kb: 585.87 },
            Workload { records: 10_000, size_kb: 5827.32 },
            Workload { records: 100_000, size_kb: 16380.5 },
        ],
        runtime_table: RuntimeTable {
            records_flag: "--records".into(),
            points: vec![
                (10, 12),
                (100, 118),
                (1_000, 148),
                (10_000, 205),
                (100_000, 552),
            ],
        },
    };

    let workdir = tempfile::tempdir().unwrap();
    let started = std::time::Instant::now();
    let report = run_bench(&spec, workdir.path()).unwrap();
    let elapsed = started.elapsed();

    print!("{}", render_report(&report));
    println!(
        "\n(virtual hours of compute in {} ms of wall time)",
        elapsed.as_millis()
    );
}
