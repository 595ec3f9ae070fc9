//! End-to-end lifecycle tests against the simulated cluster: submission,
//! polling, failure routing, cancellation, recovery, and the quota ledger.

mod common;

use common::Rig;
use crossbound::cluster::core_hours;
use crossbound::eventlog::{JobState, Phase};
use crossbound::lifecycle::BrokerOptions;
use crossbound::model::{DataRef, DataSource, Parameter};
use crossbound::simcluster::FailureRule;
use crossbound::transport::Credential;
use crossbound::cluster::AuthMode;

#[test]
fn valid_spec_reaches_submitted_with_a_remote_id() {
    let rig = Rig::new();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Submitted);
    assert!(record.remote_job_id.is_some());
    assert!(record.script_digest.is_some());
}

#[test]
fn job_completes_and_notifies_through_polling() {
    let rig = Rig::builder().runtime_s(300).build();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    let record = rig.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Notified);
    assert_eq!(record.exit_code, Some(0));
    assert_eq!(record.output_digests.len(), 1);
    assert_eq!(record.output_digests[0].0, "result.txt");

    let durations = record.phase_durations();
    assert_eq!(durations.pre_proc_s, Some(0));
    assert!(durations.proc_s.unwrap() >= 300);
    assert!(durations.proc_s.unwrap() <= 300 + 600);

    let notifications = rig.notifications.lock().unwrap();
    assert_eq!(notifications.len(), 1);
    assert_eq!(notifications[0].job_id, job_id);
    assert_eq!(notifications[0].state, JobState::Notified);

    // Phase additivity: the three phases partition created → notified.
    let total = record.entered_at(JobState::Notified).unwrap()
        - record.entered_at(JobState::Created).unwrap();
    assert_eq!(
        durations.pre_proc_s.unwrap() + durations.proc_s.unwrap() + durations.post_proc_s.unwrap(),
        total
    );

    // Outputs are kept broker-side after the remote work dir is collected.
    let bytes = rig.broker().output_bytes(&job_id, "result.txt").unwrap();
    assert!(!bytes.is_empty());
}

#[test]
fn unknown_tool_fails_in_validate_phase() {
    let rig = Rig::new();
    let mut draft = rig.draft(b"ACGT");
    draft.tool_version = "9.9.9".into();
    let job_id = rig
        .broker()
        .submit_job(draft, "unite", rig.clock.now())
        .unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Failed);
    let (phase, reason) = record.failure.unwrap();
    assert_eq!(phase, Phase::Validate);
    assert!(reason.contains("unknown tool"), "{reason}");
    // Failed jobs still notify.
    assert_eq!(rig.notifications.lock().unwrap().len(), 1);
}

#[test]
fn quota_exhaustion_fails_in_reserve_phase_with_zero_bytes_moved() {
    let rig = Rig::builder();
    let rig = {
        let mut b = rig;
        b.budget_core_hours = 1; // default request is 2 cpus × 2 h = 4 ch
        b.build()
    };
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Failed);
    assert_eq!(record.failure.as_ref().unwrap().0, Phase::Reserve);
    assert_eq!(rig.transfer_log.len(), 0, "reserve precedes any transfer");
    let quota = rig.broker().quota("alpha", "unite").unwrap();
    assert_eq!(quota.reserved_cs, 0);
}

#[test]
fn auth_mismatch_fails_in_stage_phase_with_zero_bytes_moved() {
    let mut builder = Rig::builder();
    builder.auth_mode = AuthMode::Ticket;
    builder.credential = Some(Credential::key());
    let rig = builder.build();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Failed);
    let (phase, reason) = record.failure.unwrap();
    assert_eq!(phase, Phase::Stage);
    assert!(reason.contains("auth mode mismatch"), "{reason}");
    assert_eq!(rig.transfer_log.len(), 0);
    // The failed reservation was released.
    let quota = rig.broker().quota("alpha", "unite").unwrap();
    assert_eq!(quota.reserved_cs, 0);
}

#[test]
fn remote_nonzero_exit_fails_in_proc_phase_and_settles() {
    let mut builder = Rig::builder();
    builder.failure_injections.push(FailureRule {
        command_contains: "--records 13".into(),
        exit_code: 7,
    });
    let rig = builder.build();
    let mut draft = rig.draft(b"ACGT");
    draft.parameters = vec![Parameter {
        name: "records".into(),
        value: "13".into(),
    }];
    let job_id = rig
        .broker()
        .submit_job(draft, "unite", rig.clock.now())
        .unwrap();
    let record = rig.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Failed);
    let (phase, reason) = record.failure.unwrap();
    assert_eq!(phase, Phase::Proc);
    assert!(reason.contains('7'), "{reason}");
    assert!(record.settled);
    let quota = rig.broker().quota("alpha", "unite").unwrap();
    assert_eq!(quota.reserved_cs, 0);
}

#[test]
fn cancel_in_staged_releases_the_reservation() {
    let rig = Rig::new();
    let job_id = rig
        .broker()
        .create_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    for _ in 0..3 {
        rig.broker().step_job(&job_id, rig.clock.now()).unwrap();
    }
    assert_eq!(rig.broker().status(&job_id).unwrap().state, JobState::Staged);
    let reserved = rig.broker().quota("alpha", "unite").unwrap().reserved_cs;
    assert!(reserved > 0);

    rig.broker().cancel(&job_id, rig.clock.now()).unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Cancelled);
    assert!(record.settled);
    assert_eq!(rig.broker().quota("alpha", "unite").unwrap().reserved_cs, 0);
    // Zero observed runtime: nothing charged.
    assert_eq!(rig.broker().quota("alpha", "unite").unwrap().spent_cs, 0);
}

#[test]
fn cancel_in_running_removes_the_remote_job() {
    let rig = Rig::builder().runtime_s(10_000).build();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    rig.tick(600);
    rig.broker().poll_once(rig.clock.now()).unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Running);
    let remote_id = record.remote_job_id.unwrap();

    rig.broker().cancel(&job_id, rig.clock.now()).unwrap();
    let sim = rig.host("alpha").sim();
    assert_eq!(
        sim.squeue(remote_id).unwrap().0,
        crossbound::simcluster::SimJobState::Cancelled
    );
    drop(sim);
    assert_eq!(rig.host("alpha").sim().running_count(), 0);
    assert_eq!(rig.broker().quota("alpha", "unite").unwrap().reserved_cs, 0);
}

#[test]
fn cancel_of_terminal_job_is_already_terminal() {
    let rig = Rig::builder().runtime_s(60).build();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    rig.run_to_terminal(&job_id, 600);
    let err = rig.broker().cancel(&job_id, rig.clock.now()).unwrap_err();
    assert!(matches!(
        err,
        crossbound::lifecycle::BrokerError::AlreadyTerminal { .. }
    ));
}

#[test]
fn status_of_unknown_job_errors() {
    let rig = Rig::new();
    assert!(matches!(
        rig.broker().status("j999999"),
        Err(crossbound::lifecycle::BrokerError::UnknownJob(_))
    ));
}

#[test]
fn poll_with_no_active_jobs_changes_nothing() {
    let rig = Rig::new();
    let changes = rig.broker().poll_once(rig.clock.now()).unwrap();
    assert!(changes.is_empty());
}

#[test]
fn expired_account_blocks_selection() {
    let mut builder = Rig::builder();
    builder.valid_until = 100;
    let rig = builder.build();
    rig.clock.advance(200);
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Failed);
    let (phase, reason) = record.failure.unwrap();
    assert_eq!(phase, Phase::Reserve);
    assert!(reason.contains("expired"), "{reason}");
}

#[test]
fn settled_charge_reflects_observed_runtime() {
    let rig = Rig::builder().runtime_s(3600).build();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    let record = rig.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Notified);
    let quota = rig.broker().quota("alpha", "unite").unwrap();
    assert_eq!(quota.reserved_cs, 0);
    // 2 cpus × the observed RUNNING → REMOTE_COMPLETE span; polling
    // quantizes both ends to the 600 s grid.
    let observed = record.entered_at(JobState::RemoteComplete).unwrap()
        - record.entered_at(JobState::Running).unwrap();
    assert_eq!(quota.spent_cs, 2 * observed);
    assert!(core_hours(quota.spent_cs) > 0.0);
}

#[test]
fn object_store_input_resolves_on_target() {
    let rig = Rig::new();
    rig.put_object("refs/extra.bin", b"remote reference data");
    let mut draft = rig.draft(b"ACGT");
    draft.inputs.push(DataRef {
        name: "extra.bin".into(),
        source: DataSource::ObjectStore {
            endpoint: "store1".into(),
            key: "refs/extra.bin".into(),
        },
        digest: None,
    });
    let job_id = rig
        .broker()
        .submit_job(draft, "unite", rig.clock.now())
        .unwrap();
    let record = rig.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Notified);
    // The resolved digest is recorded, and the object bytes never appear
    // in the broker-side transfer log.
    assert!(record
        .input_digests
        .iter()
        .any(|(name, digest)| name == "extra.bin"
            && *digest == crossbound::Digest::of_bytes(b"remote reference data")));
    for transfer in rig.transfer_log.snapshot() {
        assert!(!transfer.remote_path.contains("extra.bin"));
    }
}

#[test]
fn restart_after_submitted_still_reaches_notified() {
    let mut rig = Rig::builder().persistent().runtime_s(300).build();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    assert_eq!(
        rig.broker().status(&job_id).unwrap().state,
        JobState::Submitted
    );

    rig.restart_broker();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Submitted);
    let quota = rig.broker().quota("alpha", "unite").unwrap();
    assert!(quota.reserved_cs > 0, "reservation recovered from the log");

    let record = rig.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Notified);
    assert_eq!(rig.broker().quota("alpha", "unite").unwrap().reserved_cs, 0);
    let durations = record.phase_durations();
    assert!(durations.pre_proc_s.is_some());
    assert!(durations.proc_s.is_some());
    assert!(durations.post_proc_s.is_some());
}

#[test]
fn restart_with_empty_store_is_a_noop() {
    let mut rig = Rig::builder().persistent().build();
    rig.restart_broker();
    assert!(rig.broker().job_ids().is_empty());
}

#[test]
fn restart_after_failure_does_not_reexecute() {
    let mut rig = Rig::builder().persistent().build();
    let mut draft = rig.draft(b"ACGT");
    draft.tool_version = "9.9.9".into();
    let job_id = rig
        .broker()
        .submit_job(draft, "unite", rig.clock.now())
        .unwrap();
    assert_eq!(rig.broker().status(&job_id).unwrap().state, JobState::Failed);

    rig.restart_broker();
    rig.tick(600);
    rig.broker().poll_once(rig.clock.now()).unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Failed);
    assert_eq!(rig.host("alpha").sim().pending_count(), 0);
    assert_eq!(rig.host("alpha").sim().running_count(), 0);
}

#[test]
fn corrupt_store_refuses_to_start() {
    let rig = Rig::builder().persistent().build();
    rig.broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    std::fs::write(rig.dir.path().join("jobs/j000001.log"), "garbage\n").unwrap();

    use crossbound::eventlog::EventStore;
    let store = crossbound::eventlog::DirStore::open(rig.dir.path().join("jobs")).unwrap();
    let err = store.load_all().map(|_| ()).expect_err("corrupt log must not load");
    assert!(matches!(err, crossbound::eventlog::StoreError::Corrupt(_)));
}

#[test]
fn manifest_requires_fetched_state() {
    let rig = Rig::builder().runtime_s(10_000).build();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    rig.tick(60);
    rig.broker().poll_once(rig.clock.now()).unwrap();
    let err = rig.broker().manifest(&job_id).unwrap_err();
    assert!(matches!(err, crossbound::lifecycle::BrokerError::WrongState(_)));
    // Mid-run, the processing and post-processing phases are still open.
    let durations = rig.broker().status(&job_id).unwrap().phase_durations();
    assert_eq!(durations.pre_proc_s, Some(0));
    assert!(durations.proc_s.is_none());
    assert!(durations.post_proc_s.is_none());

    let record = rig.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Notified);
    let a = rig.broker().manifest(&job_id).unwrap();
    let b = rig.broker().manifest(&job_id).unwrap();
    assert_eq!(a, b, "manifest is a pure function of the record");
    assert!(!a.input_digests.is_empty());
    assert!(!a.output_digests.is_empty());
}

#[test]
fn detection_latency_is_bounded_by_the_poll_interval() {
    let rig = Rig::builder().runtime_s(430).build();
    let poll_interval = BrokerOptions::default().poll_interval_s;
    assert_eq!(poll_interval, 600);
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    let record = rig.run_to_terminal(&job_id, poll_interval);
    let remote_id = record.remote_job_id.unwrap();
    let finish = rig
        .host("alpha")
        .sim()
        .job(remote_id)
        .unwrap()
        .finish_at
        .unwrap();
    let detected = record.entered_at(JobState::RemoteComplete).unwrap();
    assert!(detected >= finish);
    assert!(
        detected - finish <= poll_interval,
        "detected {detected}, finished {finish}"
    );
}

#[test]
fn transient_poll_failures_leave_state_then_fail_at_the_limit() {
    let rig = Rig::builder().runtime_s(10_000).build();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    rig.tick(600);
    rig.broker().poll_once(rig.clock.now()).unwrap();
    assert_eq!(rig.broker().status(&job_id).unwrap().state, JobState::Running);

    // The cluster drops off the network.
    rig.transport.set_broken(true);
    for expected_failures in 1..=2u32 {
        rig.tick(600);
        rig.broker().poll_once(rig.clock.now()).unwrap();
        let record = rig.broker().status(&job_id).unwrap();
        assert_eq!(record.state, JobState::Running, "state unchanged");
        assert_eq!(record.consecutive_poll_failures, expected_failures);
    }
    // Third consecutive failure crosses the default limit.
    rig.tick(600);
    rig.broker().poll_once(rig.clock.now()).unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.state, JobState::Failed);
    assert_eq!(record.failure.as_ref().unwrap().0, Phase::Poll);
    assert!(record.settled, "quota settled after a poll-failure death");
    assert_eq!(rig.broker().quota("alpha", "unite").unwrap().reserved_cs, 0);
}

#[test]
fn a_recovered_connection_resets_the_failure_count() {
    let rig = Rig::builder().runtime_s(10_000).build();
    let job_id = rig
        .broker()
        .submit_job(rig.draft(b"ACGT"), "unite", rig.clock.now())
        .unwrap();
    rig.transport.set_broken(true);
    rig.tick(600);
    rig.broker().poll_once(rig.clock.now()).unwrap();
    rig.tick(600);
    rig.broker().poll_once(rig.clock.now()).unwrap();
    assert_eq!(
        rig.broker().status(&job_id).unwrap().consecutive_poll_failures,
        2
    );

    rig.transport.set_broken(false);
    rig.tick(600);
    rig.broker().poll_once(rig.clock.now()).unwrap();
    let record = rig.broker().status(&job_id).unwrap();
    assert_eq!(record.consecutive_poll_failures, 0);
    assert_eq!(record.state, JobState::Running);

    let record = rig.run_to_terminal(&job_id, 600);
    assert_eq!(record.state, JobState::Notified);
}

#[test]
fn each_terminal_job_notifies_exactly_once_by_content() {
    let rig = Rig::builder().runtime_s(60).build();
    // One success, one validation failure, one cancel.
    let ok = rig
        .broker()
        .submit_job(rig.draft(b"fine"), "unite", rig.clock.now())
        .unwrap();
    let mut bad = rig.draft(b"broken");
    bad.tool_version = "0.0".into();
    let failed = rig
        .broker()
        .submit_job(bad, "unite", rig.clock.now())
        .unwrap();
    let doomed = rig
        .broker()
        .submit_job(rig.draft(b"doomed"), "unite", rig.clock.now())
        .unwrap();
    rig.broker().cancel(&doomed, rig.clock.now()).unwrap();
    rig.run_to_terminal(&ok, 600);

    // Extra polls must not duplicate notifications.
    for _ in 0..5 {
        rig.tick(600);
        rig.broker().poll_once(rig.clock.now()).unwrap();
    }
    let notifications = rig.notifications.lock().unwrap();
    let mut by_job: std::collections::BTreeMap<&str, Vec<&crossbound::lifecycle::Notification>> =
        Default::default();
    for n in notifications.iter() {
        by_job.entry(n.job_id.as_str()).or_default().push(n);
    }
    assert_eq!(by_job.len(), 3, "one record per terminal job");
    assert_eq!(by_job[ok.as_str()].len(), 1);
    assert_eq!(by_job[ok.as_str()][0].state, JobState::Notified);
    assert_eq!(by_job[failed.as_str()].len(), 1);
    assert_eq!(by_job[failed.as_str()][0].state, JobState::Failed);
    assert_eq!(by_job[doomed.as_str()].len(), 1);
    assert_eq!(by_job[doomed.as_str()][0].state, JobState::Cancelled);
}

#[test]
fn selection_is_stable_on_a_frozen_snapshot() {
    let rig = Rig::builder().build();
    let job = {
        let mut registry = crossbound::registry::ToolRegistry::new();
        registry
            .install(common::standard_tool(&rig.container_digest, &[]), 0)
            .unwrap();
        crossbound::validate_jobspec(
            &rig.draft(b"x").into_spec("j-probe".into()),
            &registry,
        )
        .unwrap()
    };
    let ledger = {
        let mut l = crossbound::cluster::AccountLedger::new();
        for account in &rig.accounts {
            l.add_account(account.clone()).unwrap();
        }
        l
    };
    let first = crossbound::cluster::select_cluster(&job, "unite", &rig.clusters, &ledger, 5)
        .unwrap()
        .0
        .cluster_id
        .clone();
    for _ in 0..10 {
        let again = crossbound::cluster::select_cluster(&job, "unite", &rig.clusters, &ledger, 5)
            .unwrap()
            .0
            .cluster_id
            .clone();
        assert_eq!(first, again);
    }
}

#[test]
fn concurrent_submissions_race_safely_for_the_last_slot() {
    use std::sync::Arc;
    // Budget fits exactly one standard job (4 core-hours).
    let mut builder = Rig::builder();
    builder.budget_core_hours = 4;
    let rig = Arc::new(builder.build());

    let mut handles = Vec::new();
    for i in 0..6 {
        let rig = Arc::clone(&rig);
        handles.push(std::thread::spawn(move || {
            let draft = rig.draft(format!("payload-{i}").as_bytes());
            rig.broker().submit_job(draft, "unite", rig.clock.now()).unwrap()
        }));
    }
    let ids: Vec<String> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let submitted = ids
        .iter()
        .filter(|id| rig.broker().status(id).unwrap().state == JobState::Submitted)
        .count();
    let failed = ids
        .iter()
        .filter(|id| rig.broker().status(id).unwrap().state == JobState::Failed)
        .count();
    assert_eq!(submitted, 1, "exactly one submission wins the last slot");
    assert_eq!(failed, 5);
}
