//! Staging: materializing a job's inputs on the target cluster.
//!
//! Inline data is uploaded through the broker and digest-verified.
//! Object-store references are resolved on the target itself — the bytes
//! never pass through the broker. Reference bundles and the container
//! image go into a per-cluster content-addressed cache and are transferred
//! at most once per digest (ship-once), guarded per digest so concurrent
//! stagings cannot double-transfer.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::model::{DataSource, ValidatedJob};
use crate::transport::{Session, TransferLog, TransportError};

/// Where every piece of a job landed on the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedLayout {
    pub job_id: String,
    /// `<scratch_root>/<job_id>`, the job's work directory.
    pub work_dir: String,
    /// Data-reference name → remote absolute path.
    pub staged: BTreeMap<String, String>,
    /// Bundle digest → remote cache path.
    pub bundle_paths: BTreeMap<Digest, String>,
    pub container_path: String,
}

/// An S3-compatible endpoint the target can fetch from directly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectStoreEndpoint {
    pub endpoint_id: String,
    pub base_url: String,
    #[serde(default)]
    pub access: EndpointAccess,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointAccess {
    #[default]
    Public,
    Private {
        credential_ref: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum StagingError {
    #[error("digest mismatch for {name:?}: declared {declared}, actual {actual}")]
    DigestMismatch {
        name: String,
        declared: Digest,
        actual: Digest,
    },
    #[error("endpoint {endpoint:?} unreachable: {detail}")]
    EndpointUnreachable { endpoint: String, detail: String },
    #[error("unknown object-store endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("no artifact with digest {0} in the broker store")]
    MissingArtifact(Digest),
    #[error("declared output {0:?} missing from the work directory")]
    MissingOutput(String),
    #[error("cannot read local input {path:?}: {detail}")]
    LocalInput { path: PathBuf, detail: String },
    #[error("work directory not collectable: {0}")]
    WrongState(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Broker-side content-addressed store holding the bytes of reference
/// bundles and container images, one file per digest.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ArtifactStore { dir })
    }

    pub fn put(&self, bytes: &[u8]) -> std::io::Result<Digest> {
        let digest = Digest::of_bytes(bytes);
        let path = self.dir.join(digest.as_hex());
        if !path.exists() {
            fs::write(path, bytes)?;
        }
        Ok(digest)
    }

    pub fn get(&self, digest: &Digest) -> Result<Vec<u8>, StagingError> {
        fs::read(self.dir.join(digest.as_hex()))
            .map_err(|_| StagingError::MissingArtifact(digest.clone()))
    }

    pub fn has(&self, digest: &Digest) -> bool {
        self.dir.join(digest.as_hex()).exists()
    }
}

type DigestLockMap = HashMap<(String, String), Arc<Mutex<()>>>;

/// Per-(cluster, digest) mutual exclusion: the first stager of a digest
/// transfers it, racers wait for the cache to be populated.
#[derive(Debug, Default)]
pub struct StagingLocks {
    inner: Mutex<DigestLockMap>,
}

impl StagingLocks {
    pub fn new() -> Self {
        Self::default()
    }

    fn for_digest(&self, cluster_id: &str, digest: &Digest) -> Arc<Mutex<()>> {
        self.inner
            .lock()
            .unwrap()
            .entry((cluster_id.to_string(), digest.as_hex().to_string()))
            .or_default()
            .clone()
    }
}

/// One fetched output: name, bytes, and the digest of those bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedOutput {
    pub name: String,
    pub bytes: Vec<u8>,
    pub digest: Digest,
}

/// A staged job: the layout plus the resolved digest of every input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub layout: StagedLayout,
    /// (name, digest), sorted by name; object-store digests resolved on
    /// fetch.
    pub input_digests: Vec<(String, Digest)>,
}

/// Whether a work directory may be collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcState {
    /// Outputs fetched (or there were none to fetch).
    Fetched,
    Cancelled,
    Failed,
    /// Anything still in flight.
    Active,
}

/// Staging engine over one broker's artifact store, endpoints, transfer
/// log, and cache locks.
pub struct Stager<'a> {
    pub scratch_root: &'a str,
    pub artifacts: &'a ArtifactStore,
    pub endpoints: &'a BTreeMap<String, ObjectStoreEndpoint>,
    pub log: &'a TransferLog,
    pub locks: &'a StagingLocks,
}

impl Stager<'_> {
    /// Materialize everything the job needs on the target: the container
    /// image and the tool's reference bundles through the ship-once cache,
    /// inline inputs uploaded and digest-verified, object-store inputs
    /// fetched by the target itself.
    pub fn stage_job(
        &self,
        job: &ValidatedJob,
        session: &mut dyn Session,
    ) -> Result<StageOutcome, StagingError> {
        let work_dir = format!("{}/{}", self.scratch_root, job.spec.job_id);
        let mut staged = BTreeMap::new();
        let mut input_digests: Vec<(String, Digest)> = Vec::new();
        let mut bundle_paths = BTreeMap::new();

        let container_path = self.ensure_cached(
            session,
            &job.descriptor.container_digest,
            "image.sif",
            &job.descriptor.container_image,
        )?;

        for bundle in &job.descriptor.reference_bundles {
            let path = self.ensure_cached(session, bundle, "data", "reference bundle")?;
            bundle_paths.insert(bundle.clone(), path);
        }

        for input in &job.spec.inputs {
            match &input.source {
                DataSource::Inline { path, .. } => {
                    let bytes = fs::read(path).map_err(|e| StagingError::LocalInput {
                        path: path.clone(),
                        detail: e.to_string(),
                    })?;
                    let declared = input.digest.clone().expect("validated: inline has digest");
                    let actual = Digest::of_bytes(&bytes);
                    if actual != declared {
                        return Err(StagingError::DigestMismatch {
                            name: input.name.clone(),
                            declared,
                            actual,
                        });
                    }
                    let dest = format!("{work_dir}/{}", input.name);
                    let uploaded = session.put_file(&bytes, &dest)?;
                    debug_assert_eq!(uploaded, actual);
                    staged.insert(input.name.clone(), dest);
                    input_digests.push((input.name.clone(), actual));
                }
                DataSource::ObjectStore { endpoint, key } => {
                    let ep = self
                        .endpoints
                        .get(endpoint)
                        .ok_or_else(|| StagingError::UnknownEndpoint(endpoint.clone()))?;
                    let dest = format!("{work_dir}/{}", input.name);
                    let fetch = session
                        .exec_command(&format!("fetch-object {} {key} {dest}", ep.base_url))?;
                    if fetch.exit_code != 0 {
                        return Err(StagingError::EndpointUnreachable {
                            endpoint: endpoint.clone(),
                            detail: fetch.stderr.trim().to_string(),
                        });
                    }
                    let actual = self.remote_digest(session, &dest)?.ok_or_else(|| {
                        StagingError::EndpointUnreachable {
                            endpoint: endpoint.clone(),
                            detail: format!("fetched object vanished at {dest}"),
                        }
                    })?;
                    if let Some(declared) = &input.digest {
                        if actual != *declared {
                            return Err(StagingError::DigestMismatch {
                                name: input.name.clone(),
                                declared: declared.clone(),
                                actual,
                            });
                        }
                    }
                    staged.insert(input.name.clone(), dest);
                    input_digests.push((input.name.clone(), actual));
                }
                DataSource::ReferenceBundle => {
                    let digest = input.digest.clone().expect("validated: bundle has digest");
                    let path = self.ensure_cached(session, &digest, "data", &input.name)?;
                    bundle_paths.insert(digest.clone(), path.clone());
                    staged.insert(input.name.clone(), path);
                    input_digests.push((input.name.clone(), digest));
                }
            }
        }

        input_digests.sort();
        Ok(StageOutcome {
            layout: StagedLayout {
                job_id: job.spec.job_id.clone(),
                work_dir,
                staged,
                bundle_paths,
                container_path,
            },
            input_digests,
        })
    }

    /// Place a content-addressed artifact in the cluster cache, shipping
    /// it only if no prior transfer landed it there.
    fn ensure_cached(
        &self,
        session: &mut dyn Session,
        digest: &Digest,
        filename: &str,
        what: &str,
    ) -> Result<String, StagingError> {
        let cache_dir = format!("{}/.bundles/{digest}", self.scratch_root);
        let path = format!("{cache_dir}/{filename}");
        let lock = self.locks.for_digest(session.cluster_id(), digest);
        let _guard = lock.lock().unwrap();

        // Fast path: this broker already shipped the digest.
        if self.log.has_put_under(session.cluster_id(), &format!("{cache_dir}/")) {
            return Ok(path);
        }
        // A previous broker incarnation may have shipped it; probe the
        // target before transferring.
        if self.remote_digest(session, &path)?.as_ref() == Some(digest) {
            return Ok(path);
        }
        let bytes = self.artifacts.get(digest)?;
        let actual = Digest::of_bytes(&bytes);
        if actual != *digest {
            return Err(StagingError::DigestMismatch {
                name: what.to_string(),
                declared: digest.clone(),
                actual,
            });
        }
        session.put_file(&bytes, &path)?;
        Ok(path)
    }

    /// Digest of a remote file computed on the target, `None` if absent.
    fn remote_digest(
        &self,
        session: &mut dyn Session,
        remote_path: &str,
    ) -> Result<Option<Digest>, StagingError> {
        let result = session.exec_command(&format!("sha256 {remote_path}"))?;
        if result.exit_code != 0 {
            return Ok(None);
        }
        let hex = result.stdout.split_whitespace().next().unwrap_or("");
        Ok(Digest::parse(hex).ok())
    }

    /// Retrieve every declared output from the work directory. A missing
    /// declared output is an error naming the file; surplus files are
    /// ignored.
    pub fn fetch_outputs(
        &self,
        job: &ValidatedJob,
        layout: &StagedLayout,
        session: &mut dyn Session,
    ) -> Result<Vec<FetchedOutput>, StagingError> {
        let mut outputs = Vec::new();
        for name in job.output_names() {
            let path = format!("{}/{name}", layout.work_dir);
            let (bytes, digest) = match session.get_file(&path) {
                Ok(ok) => ok,
                Err(TransportError::NotFound(_)) => {
                    return Err(StagingError::MissingOutput(name.clone()))
                }
                Err(e) => return Err(e.into()),
            };
            outputs.push(FetchedOutput {
                name: name.clone(),
                bytes,
                digest,
            });
        }
        Ok(outputs)
    }
}

/// Remove a job's work directory, leaving the bundle cache untouched.
/// Idempotent; rejected while the job is still in flight.
pub fn gc_workdir(
    state: GcState,
    layout: &StagedLayout,
    session: &mut dyn Session,
) -> Result<(), StagingError> {
    if state == GcState::Active {
        return Err(StagingError::WrongState(format!(
            "job {} has not fetched its outputs",
            layout.job_id
        )));
    }
    session.remove_tree(&layout.work_dir)?;
    Ok(())
}
