//! Pluggable file-transfer and remote-command abstraction.
//!
//! Only the contract plus a local-filesystem backend ship here: the local
//! backend maps each cluster's filesystem under a sandbox directory and
//! hands commands to an in-process host, so the whole pipeline runs with
//! zero external infrastructure. A real ssh backend would implement the
//! same traits.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::VirtualClock;
use crate::cluster::{AuthMode, Availability, ClusterProfile};
use crate::digest::Digest;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("auth mode mismatch: cluster requires {required:?}, credential offers {offered:?}")]
    AuthModeMismatch { required: AuthMode, offered: AuthMode },
    #[error("credential expired at t={expired_at}, now t={now}")]
    CredentialExpired { expired_at: u64, now: u64 },
    #[error("cluster {0:?} is unreachable")]
    Unreachable(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("remote path {0:?} not found")]
    NotFound(String),
    #[error("remote io error: {0}")]
    RemoteIo(String),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            TransportError::NotFound(e.to_string())
        } else {
            TransportError::RemoteIo(e.to_string())
        }
    }
}

/// What the broker holds to authenticate against one cluster. A ticket is
/// a tag with an expiry; no real exchange is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub kind: AuthMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expires_at: Option<u64>,
}

impl Credential {
    pub fn key() -> Self {
        Credential {
            kind: AuthMode::Key,
            expires_at: None,
        }
    }

    pub fn ticket(expires_at: u64) -> Self {
        Credential {
            kind: AuthMode::Ticket,
            expires_at: Some(expires_at),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl ExecResult {
    pub fn ok(stdout: impl Into<String>) -> Self {
        ExecResult {
            exit_code: 0,
            stdout: stdout.into(),
            stderr: String::new(),
        }
    }

    pub fn fail(exit_code: i32, stderr: impl Into<String>) -> Self {
        ExecResult {
            exit_code,
            stdout: String::new(),
            stderr: stderr.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Put,
    Get,
}

/// One logged transfer. The log is the evidence base for the ship-once
/// property: bundle and container uploads appear here exactly once per
/// cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub timestamp: u64,
    pub direction: Direction,
    pub cluster_id: String,
    pub remote_path: String,
    pub bytes: u64,
    pub digest: Digest,
}

/// Append-only broker-side transfer log, shared across sessions.
#[derive(Debug, Clone, Default)]
pub struct TransferLog(Arc<Mutex<Vec<TransferRecord>>>);

impl TransferLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, record: TransferRecord) {
        self.0.lock().unwrap().push(record);
    }

    pub fn snapshot(&self) -> Vec<TransferRecord> {
        self.0.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count successful uploads of paths under `prefix` on one cluster.
    pub fn puts_under(&self, cluster_id: &str, prefix: &str) -> usize {
        self.0
            .lock()
            .unwrap()
            .iter()
            .filter(|r| {
                r.direction == Direction::Put
                    && r.cluster_id == cluster_id
                    && r.remote_path.starts_with(prefix)
            })
            .count()
    }

    /// Has any upload to this cluster already landed under `prefix`?
    pub fn has_put_under(&self, cluster_id: &str, prefix: &str) -> bool {
        self.puts_under(cluster_id, prefix) > 0
    }

    pub fn total_bytes(&self) -> u64 {
        self.0.lock().unwrap().iter().map(|r| r.bytes).sum()
    }
}

/// An established connection to one cluster. Operations are only permitted
/// while connected; a closed session rejects everything.
pub trait Session: Send {
    fn cluster_id(&self) -> &str;
    fn is_connected(&self) -> bool;
    /// Write exactly `bytes` at `remote_path` (parents created, whole-file
    /// atomic) and return their digest.
    fn put_file(&mut self, bytes: &[u8], remote_path: &str) -> Result<Digest, TransportError>;
    fn get_file(&mut self, remote_path: &str) -> Result<(Vec<u8>, Digest), TransportError>;
    fn exec_command(&mut self, command: &str) -> Result<ExecResult, TransportError>;
    /// Recursively delete a remote directory; absent paths are fine.
    fn remove_tree(&mut self, remote_path: &str) -> Result<(), TransportError>;
    fn close(&mut self);
}

pub trait Transport: Send + Sync {
    fn connect(
        &self,
        profile: &ClusterProfile,
        credential: &Credential,
        now: u64,
    ) -> Result<Box<dyn Session>, TransportError>;
}

/// Gate shared by every backend: availability, auth-mode match, ticket
/// expiry.
pub fn check_connect(
    profile: &ClusterProfile,
    credential: &Credential,
    now: u64,
) -> Result<(), TransportError> {
    if profile.availability == Availability::Down {
        return Err(TransportError::Unreachable(profile.cluster_id.clone()));
    }
    if credential.kind != profile.auth_mode {
        return Err(TransportError::AuthModeMismatch {
            required: profile.auth_mode,
            offered: credential.kind,
        });
    }
    if let Some(expired_at) = credential.expires_at {
        if now >= expired_at {
            return Err(TransportError::CredentialExpired { expired_at, now });
        }
    }
    Ok(())
}

/// The in-process stand-in for a remote machine: a sandbox directory as
/// its filesystem plus a command interpreter.
pub trait RemoteHost: Send + Sync {
    fn fs_root(&self) -> &Path;
    fn exec(&self, command: &str) -> ExecResult;
}

/// Map a remote absolute path into the host's sandbox directory.
pub fn map_remote_path(root: &Path, remote_path: &str) -> Result<PathBuf, TransportError> {
    if !remote_path.starts_with('/') || remote_path.split('/').any(|c| c == "..") {
        return Err(TransportError::RemoteIo(format!(
            "remote path {remote_path:?} must be absolute and free of '..'"
        )));
    }
    Ok(root.join(remote_path.trim_start_matches('/')))
}

/// Local-filesystem transport backend: each endpoint resolves to a
/// registered in-process host.
#[derive(Default)]
pub struct LocalTransport {
    hosts: Mutex<HashMap<String, Arc<dyn RemoteHost>>>,
    log: TransferLog,
    clock: VirtualClock,
}

impl LocalTransport {
    pub fn new(log: TransferLog, clock: VirtualClock) -> Self {
        LocalTransport {
            hosts: Mutex::new(HashMap::new()),
            log,
            clock,
        }
    }

    pub fn register_host(&self, endpoint: impl Into<String>, host: Arc<dyn RemoteHost>) {
        self.hosts.lock().unwrap().insert(endpoint.into(), host);
    }

    pub fn log(&self) -> &TransferLog {
        &self.log
    }
}

impl Transport for LocalTransport {
    fn connect(
        &self,
        profile: &ClusterProfile,
        credential: &Credential,
        now: u64,
    ) -> Result<Box<dyn Session>, TransportError> {
        check_connect(profile, credential, now)?;
        let host = self
            .hosts
            .lock()
            .unwrap()
            .get(&profile.endpoint)
            .cloned()
            .ok_or_else(|| TransportError::Unreachable(profile.cluster_id.clone()))?;
        Ok(Box::new(LocalSession {
            cluster_id: profile.cluster_id.clone(),
            host,
            log: self.log.clone(),
            clock: self.clock.clone(),
            connected: true,
        }))
    }
}

struct LocalSession {
    cluster_id: String,
    host: Arc<dyn RemoteHost>,
    log: TransferLog,
    clock: VirtualClock,
    connected: bool,
}

impl LocalSession {
    fn ensure_connected(&self) -> Result<(), TransportError> {
        if self.connected {
            Ok(())
        } else {
            Err(TransportError::SessionClosed)
        }
    }
}

impl Session for LocalSession {
    fn cluster_id(&self) -> &str {
        &self.cluster_id
    }

    fn is_connected(&self) -> bool {
        self.connected
    }

    fn put_file(&mut self, bytes: &[u8], remote_path: &str) -> Result<Digest, TransportError> {
        self.ensure_connected()?;
        let target = map_remote_path(self.host.fs_root(), remote_path)?;
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        // Write-then-rename: a concurrent reader sees the old content or
        // the new, never a torn file.
        let tmp = target.with_extension("crossbound-tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &target)?;
        let digest = Digest::of_bytes(bytes);
        self.log.append(TransferRecord {
            timestamp: self.clock.now(),
            direction: Direction::Put,
            cluster_id: self.cluster_id.clone(),
            remote_path: remote_path.to_string(),
            bytes: bytes.len() as u64,
            digest: digest.clone(),
        });
        Ok(digest)
    }

    fn get_file(&mut self, remote_path: &str) -> Result<(Vec<u8>, Digest), TransportError> {
        self.ensure_connected()?;
        let source = map_remote_path(self.host.fs_root(), remote_path)?;
        let bytes =
            fs::read(&source).map_err(|_| TransportError::NotFound(remote_path.to_string()))?;
        let digest = Digest::of_bytes(&bytes);
        self.log.append(TransferRecord {
            timestamp: self.clock.now(),
            direction: Direction::Get,
            cluster_id: self.cluster_id.clone(),
            remote_path: remote_path.to_string(),
            bytes: bytes.len() as u64,
            digest: digest.clone(),
        });
        Ok((bytes, digest))
    }

    fn exec_command(&mut self, command: &str) -> Result<ExecResult, TransportError> {
        self.ensure_connected()?;
        Ok(self.host.exec(command))
    }

    fn remove_tree(&mut self, remote_path: &str) -> Result<(), TransportError> {
        self.ensure_connected()?;
        let target = map_remote_path(self.host.fs_root(), remote_path)?;
        match fs::remove_dir_all(&target) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn close(&mut self) {
        self.connected = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterCaps, QueueKind};
    use crate::digest::EMPTY_DIGEST;
    use proptest::prelude::*;

    struct BareHost(PathBuf);

    impl RemoteHost for BareHost {
        fn fs_root(&self) -> &Path {
            &self.0
        }

        fn exec(&self, command: &str) -> ExecResult {
            match command.trim() {
                "true" => ExecResult::ok(""),
                other => ExecResult::fail(127, format!("unknown command: {other}")),
            }
        }
    }

    fn profile(auth: AuthMode, availability: Availability) -> ClusterProfile {
        ClusterProfile {
            cluster_id: "alpha".into(),
            endpoint: "local://alpha".into(),
            auth_mode: auth,
            queue_kind: QueueKind::Shell,
            scratch_root: "/scratch".into(),
            capabilities: ClusterCaps {
                max_cpus: 8,
                max_mem_mb: 8192,
                gpus_total: 0,
                max_walltime_s: 86_400,
            },
            container_runtime_cmd: "singularity".into(),
            availability,
        }
    }

    fn transport(dir: &Path) -> LocalTransport {
        let t = LocalTransport::new(TransferLog::new(), VirtualClock::new(0));
        t.register_host("local://alpha", Arc::new(BareHost(dir.to_path_buf())));
        t
    }

    #[test]
    fn key_credential_connects_to_key_cluster() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let session = t
            .connect(&profile(AuthMode::Key, Availability::Up), &Credential::key(), 0)
            .unwrap();
        assert!(session.is_connected());
    }

    #[test]
    fn key_credential_is_rejected_by_ticket_cluster() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let err = t
            .connect(
                &profile(AuthMode::Ticket, Availability::Up),
                &Credential::key(),
                0,
            )
            .err()
            .expect("connect must fail");
        assert!(matches!(err, TransportError::AuthModeMismatch { .. }));
    }

    #[test]
    fn expired_ticket_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let err = t
            .connect(
                &profile(AuthMode::Ticket, Availability::Up),
                &Credential::ticket(100),
                100,
            )
            .err()
            .expect("connect must fail");
        assert!(matches!(err, TransportError::CredentialExpired { .. }));
    }

    #[test]
    fn down_cluster_is_unreachable() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let err = t
            .connect(
                &profile(AuthMode::Key, Availability::Down),
                &Credential::key(),
                0,
            )
            .err()
            .expect("connect must fail");
        assert!(matches!(err, TransportError::Unreachable(_)));
    }

    #[test]
    fn put_then_get_round_trips_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let mut s = t
            .connect(&profile(AuthMode::Key, Availability::Up), &Credential::key(), 0)
            .unwrap();
        let payload = b"hello";
        let put_digest = s.put_file(payload, "/scratch/j1/in.txt").unwrap();
        assert_eq!(put_digest, Digest::of_bytes(payload));
        let (bytes, get_digest) = s.get_file("/scratch/j1/in.txt").unwrap();
        assert_eq!(bytes, payload);
        assert_eq!(get_digest, put_digest);
        assert_eq!(t.log().len(), 2);
    }

    #[test]
    fn empty_file_digest_is_the_known_constant() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let mut s = t
            .connect(&profile(AuthMode::Key, Availability::Up), &Credential::key(), 0)
            .unwrap();
        let digest = s.put_file(b"", "/scratch/empty").unwrap();
        assert_eq!(digest.as_hex(), EMPTY_DIGEST);
    }

    #[test]
    fn closed_session_rejects_everything() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let mut s = t
            .connect(&profile(AuthMode::Key, Availability::Up), &Credential::key(), 0)
            .unwrap();
        s.close();
        assert!(matches!(
            s.put_file(b"x", "/scratch/x").unwrap_err(),
            TransportError::SessionClosed
        ));
        assert!(matches!(
            s.get_file("/scratch/x").unwrap_err(),
            TransportError::SessionClosed
        ));
        assert!(matches!(
            s.exec_command("true").unwrap_err(),
            TransportError::SessionClosed
        ));
    }

    #[test]
    fn get_of_missing_path_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let mut s = t
            .connect(&profile(AuthMode::Key, Availability::Up), &Credential::key(), 0)
            .unwrap();
        assert!(matches!(
            s.get_file("/scratch/nope").unwrap_err(),
            TransportError::NotFound(_)
        ));
    }

    #[test]
    fn exec_runs_noop_and_rejects_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let mut s = t
            .connect(&profile(AuthMode::Key, Availability::Up), &Credential::key(), 0)
            .unwrap();
        assert_eq!(s.exec_command("true").unwrap().exit_code, 0);
        let r = s.exec_command("frobnicate --now").unwrap();
        assert_ne!(r.exit_code, 0);
        assert!(!r.stderr.is_empty());
    }

    #[test]
    fn log_counts_only_successful_transfers() {
        let dir = tempfile::tempdir().unwrap();
        let t = transport(dir.path());
        let mut s = t
            .connect(&profile(AuthMode::Key, Availability::Up), &Credential::key(), 0)
            .unwrap();
        let _ = s.get_file("/scratch/missing");
        s.put_file(b"a", "/scratch/a").unwrap();
        assert_eq!(t.log().len(), 1);
    }

    proptest! {
        #[test]
        fn put_get_digest_equality(payload in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let dir = tempfile::tempdir().unwrap();
            let t = transport(dir.path());
            let mut s = t
                .connect(&profile(AuthMode::Key, Availability::Up), &Credential::key(), 0)
                .unwrap();
            let put_digest = s.put_file(&payload, "/scratch/j1/blob").unwrap();
            let (bytes, get_digest) = s.get_file("/scratch/j1/blob").unwrap();
            prop_assert_eq!(bytes, payload.clone());
            prop_assert_eq!(&put_digest, &get_digest);
            // Independent recomputation of the digest from the input bytes.
            prop_assert_eq!(put_digest, Digest::of_bytes(&payload));
        }
    }
}
