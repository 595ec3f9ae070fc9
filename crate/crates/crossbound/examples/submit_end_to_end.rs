//! Submit one containerized analysis job to a simulated remote cluster
//! and follow it through the full lifecycle: validate → reserve → stage →
//! submit → poll → fetch → settle → notify.
//!
//! Run with: `cargo run --example submit_end_to_end`

mod support;

use crossbound::eventlog::JobState;

fn main() {
    let demo = support::demo();

    let job_id = demo
        .broker
        .submit_job(demo.draft(b"ACGTACGTACGT"), "unite", demo.clock.now())
        .expect("submission is accepted");
    println!("submitted {job_id}");

    let record = demo.broker.status(&job_id).unwrap();
    println!(
        "state {} on cluster {} (remote job {})",
        record.state,
        record.cluster_id().unwrap(),
        record.remote_job_id.unwrap()
    );

    // The job runs under virtual time; poll every 10 minutes, like the
    // crontab a portal backend would use.
    let mut polls = 0;
    let record = loop {
        demo.tick(600);
        let changes = demo.broker.poll_once(demo.clock.now()).unwrap();
        polls += 1;
        for change in &changes {
            println!("poll {polls}: {} {} -> {}", change.job_id, change.from, change.to);
        }
        let record = demo.broker.status(&job_id).unwrap();
        if record.state.is_terminal() {
            break record;
        }
    };

    assert_eq!(record.state, JobState::Notified);
    let durations = record.phase_durations();
    println!(
        "phases: pre {}s, proc {}s, post {}s",
        durations.pre_proc_s.unwrap(),
        durations.proc_s.unwrap(),
        durations.post_proc_s.unwrap()
    );
    for (name, digest) in &record.output_digests {
        println!("output {name} sha256:{digest}");
    }
    for notification in demo.notifications.lock().unwrap().iter() {
        println!("notification: {}", notification.render());
    }
}
