//! Bit-to-bit reproducibility: the same job submitted twice produces
//! byte-identical outputs, witnessed by comparing the two runs'
//! manifests.
//!
//! Run with: `cargo run --example reproducibility`

mod support;

use crossbound::verify_reproduction;

fn main() {
    let demo = support::demo();

    let first = demo
        .broker
        .submit_job(demo.draft(b"ACGT"), "unite", demo.clock.now())
        .unwrap();
    let second = demo
        .broker
        .submit_job(demo.draft(b"ACGT"), "unite", demo.clock.now())
        .unwrap();
    demo.run_to_terminal(&first, 600);
    demo.run_to_terminal(&second, 600);

    let manifest_a = demo.broker.manifest(&first).unwrap();
    let manifest_b = demo.broker.manifest(&second).unwrap();
    println!("run A outputs: {:?}", manifest_a.output_digests);
    println!("run B outputs: {:?}", manifest_b.output_digests);

    let report = verify_reproduction(&manifest_a, &manifest_b);
    println!(
        "verdict: {}",
        if report.bit_identical {
            "BIT_IDENTICAL"
        } else {
            "NOT_BIT_IDENTICAL"
        }
    );
    assert!(report.bit_identical);

    // Change one input byte and the outputs diverge.
    let third = demo
        .broker
        .submit_job(demo.draft(b"ACGX"), "unite", demo.clock.now())
        .unwrap();
    demo.run_to_terminal(&third, 600);
    let manifest_c = demo.broker.manifest(&third).unwrap();
    let report = verify_reproduction(&manifest_a, &manifest_c);
    assert!(!report.bit_identical);
    println!("after flipping one input byte:");
    for diff in &report.diffs {
        println!("  diff {}: {} != {}", diff.field, diff.left, diff.right);
    }
}
