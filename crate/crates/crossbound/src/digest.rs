//! SHA-256 content digests.
//!
//! Every artifact the broker moves (inputs, bundles, container images,
//! batch scripts, outputs) is identified by a SHA-256 digest, encoded as
//! 64 lowercase hex characters. Manifest comparison and the ship-once
//! cache both key on this representation.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::fmt;

/// A SHA-256 digest in canonical lowercase-hex form.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Digest(String);

impl TryFrom<String> for Digest {
    type Error = MalformedDigest;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Digest::parse(&s)
    }
}

impl From<Digest> for String {
    fn from(d: Digest) -> String {
        d.0
    }
}

/// Digest of the empty byte string.
pub const EMPTY_DIGEST: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("malformed digest {0:?}: expected 64 lowercase hex characters")]
pub struct MalformedDigest(pub String);

impl Digest {
    /// Parse a digest from its hex form, rejecting anything that is not
    /// exactly 64 lowercase hex characters.
    pub fn parse(s: &str) -> Result<Self, MalformedDigest> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Digest(s.to_string()))
        } else {
            Err(MalformedDigest(s.to_string()))
        }
    }

    /// Compute the digest of a byte string.
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Digest(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.0)
    }
}

/// Incremental SHA-256 hasher for keyed derivations and large files.
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Hasher(Sha256::new())
    }

    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update(bytes);
        self
    }

    pub fn finish(self) -> Digest {
        Digest(hex::encode(self.0.finalize()))
    }

    /// Finalize into the raw 32-byte block, for hash-chain construction.
    pub fn finish_raw(self) -> [u8; 32] {
        self.0.finalize().into()
    }
}

impl Default for Hasher {
    fn default() -> Self {
        Self::new()
    }
}
