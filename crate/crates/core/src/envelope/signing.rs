use std::collections::BTreeMap;

use ed25519_dalek::{Signature, Signer as _, SigningKey, VerifyingKey};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{canonical_bytes, Envelope, EnvelopeError, SignatureBlock};

/// Signature algorithms understood by the framework, keyed by the
/// identifier carried in `security.algorithm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "ed25519")]
    Ed25519,
}

impl Algorithm {
    pub fn id(&self) -> &'static str {
        match self {
            Algorithm::Ed25519 => "ed25519",
        }
    }

    pub fn from_id(id: &str) -> Option<Algorithm> {
        match id {
            "ed25519" => Some(Algorithm::Ed25519),
            _ => None,
        }
    }

    pub fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
        match self {
            Algorithm::Ed25519 => {
                let Ok(pk) = <[u8; 32]>::try_from(public_key) else {
                    return false;
                };
                let Ok(vk) = VerifyingKey::from_bytes(&pk) else {
                    return false;
                };
                let Ok(sig) = Signature::from_slice(signature) else {
                    return false;
                };
                vk.verify_strict(message, &sig).is_ok()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub key_id: String,
    pub algorithm: Algorithm,
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
    pub status: KeyStatus,
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let raw = String::deserialize(d)?;
        STANDARD.decode(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("key {admin_id}/{key_id} already registered")]
    DuplicateKey { admin_id: String, key_id: String },
    #[error("unknown key {admin_id}/{key_id}")]
    UnknownKey { admin_id: String, key_id: String },
}

/// On-disk form of a key directory: admin_id → keys.
pub type KeyDirectoryDocument = BTreeMap<String, Vec<KeyEntry>>;

/// Public keys of every administration, by `(admin_id, key_id)`.
#[derive(Debug, Default)]
pub struct KeyDirectory {
    keys: RwLock<KeyDirectoryDocument>,
}

impl KeyDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_document(doc: KeyDirectoryDocument) -> Result<Self, KeyError> {
        let dir = KeyDirectory::new();
        for (admin, entries) in doc {
            for e in entries {
                dir.insert(&admin, e)?;
            }
        }
        Ok(dir)
    }

    pub fn to_document(&self) -> KeyDirectoryDocument {
        self.keys.read().clone()
    }

    fn insert(&self, admin_id: &str, entry: KeyEntry) -> Result<(), KeyError> {
        let mut keys = self.keys.write();
        let list = keys.entry(admin_id.to_string()).or_default();
        if list.iter().any(|k| k.key_id == entry.key_id) {
            return Err(KeyError::DuplicateKey {
                admin_id: admin_id.to_string(),
                key_id: entry.key_id,
            });
        }
        list.push(entry);
        Ok(())
    }

    pub fn add_key(
        &self,
        admin_id: &str,
        key_id: &str,
        algorithm: Algorithm,
        public_key: Vec<u8>,
    ) -> Result<(), KeyError> {
        self.insert(
            admin_id,
            KeyEntry {
                key_id: key_id.to_string(),
                algorithm,
                public_key,
                status: KeyStatus::Active,
            },
        )
    }

    /// Registers `signer`'s public key, or does nothing if the identical key
    /// is already present and active.
    pub fn ensure_signer(&self, signer: &Signer) -> Result<(), KeyError> {
        if let Some(existing) = self.lookup(&signer.admin_id, &signer.key_id) {
            if existing.public_key == signer.public_key_bytes() && existing.status == KeyStatus::Active {
                return Ok(());
            }
            return Err(KeyError::DuplicateKey {
                admin_id: signer.admin_id.clone(),
                key_id: signer.key_id.clone(),
            });
        }
        self.add_key(&signer.admin_id, &signer.key_id, Algorithm::Ed25519, signer.public_key_bytes())
    }

    pub fn revoke(&self, admin_id: &str, key_id: &str) -> Result<(), KeyError> {
        let mut keys = self.keys.write();
        let entry = keys
            .get_mut(admin_id)
            .and_then(|l| l.iter_mut().find(|k| k.key_id == key_id))
            .ok_or_else(|| KeyError::UnknownKey {
                admin_id: admin_id.to_string(),
                key_id: key_id.to_string(),
            })?;
        entry.status = KeyStatus::Revoked;
        Ok(())
    }

    pub fn lookup(&self, admin_id: &str, key_id: &str) -> Option<KeyEntry> {
        self.keys
            .read()
            .get(admin_id)
            .and_then(|l| l.iter().find(|k| k.key_id == key_id))
            .cloned()
    }

    pub fn admins(&self) -> Vec<String> {
        self.keys.read().keys().cloned().collect()
    }
}

/// An administration's private signing key.
#[derive(Clone)]
pub struct Signer {
    pub admin_id: String,
    pub key_id: String,
    key: SigningKey,
}

impl std::fmt::Debug for Signer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Signer")
            .field("admin_id", &self.admin_id)
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

impl Signer {
    pub fn from_seed(admin_id: impl Into<String>, key_id: impl Into<String>, seed: [u8; 32]) -> Self {
        Signer {
            admin_id: admin_id.into(),
            key_id: key_id.into(),
            key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn generate(admin_id: impl Into<String>, key_id: impl Into<String>) -> Self {
        Self::from_seed(admin_id, key_id, rand::random())
    }

    pub fn public_key_bytes(&self) -> Vec<u8> {
        self.key.verifying_key().to_bytes().to_vec()
    }

    pub fn sign_bytes(&self, message: &[u8]) -> Vec<u8> {
        self.key.sign(message).to_bytes().to_vec()
    }
}

/// Attaches a signature over the canonical bytes of `envelope`.
pub fn sign_envelope(envelope: &Envelope, signer: &Signer, directory: &KeyDirectory) -> Result<Envelope, EnvelopeError> {
    if envelope.security.is_some() {
        return Err(EnvelopeError::AlreadySigned(envelope.envelope_id.clone()));
    }
    let unknown = || EnvelopeError::UnknownKey {
        admin_id: signer.admin_id.clone(),
        key_id: signer.key_id.clone(),
    };
    let entry = directory.lookup(&signer.admin_id, &signer.key_id).ok_or_else(unknown)?;
    if entry.status != KeyStatus::Active || entry.public_key != signer.public_key_bytes() {
        return Err(unknown());
    }
    let signature = signer.sign_bytes(&canonical_bytes(envelope));
    Ok(Envelope {
        security: Some(SignatureBlock {
            signer_admin_id: signer.admin_id.clone(),
            key_id: signer.key_id.clone(),
            algorithm: entry.algorithm.id().to_string(),
            signature,
        }),
        ..envelope.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyReason {
    Ok,
    MissingSignature,
    SignerMismatch,
    UnknownKey,
    RevokedKey,
    UnsupportedAlgorithm,
    BadSignature,
}

impl VerifyReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            VerifyReason::Ok => "ok",
            VerifyReason::MissingSignature => "missing_signature",
            VerifyReason::SignerMismatch => "signer_mismatch",
            VerifyReason::UnknownKey => "unknown_key",
            VerifyReason::RevokedKey => "revoked_key",
            VerifyReason::UnsupportedAlgorithm => "unsupported_algorithm",
            VerifyReason::BadSignature => "bad_signature",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub valid: bool,
    pub reason: VerifyReason,
}

impl VerificationReport {
    fn fail(reason: VerifyReason) -> Self {
        VerificationReport { valid: false, reason }
    }
}

/// Checks the envelope's signature. The signer must be the sending
/// administration and the key must be active in `directory`.
pub fn verify_envelope(envelope: &Envelope, directory: &KeyDirectory) -> VerificationReport {
    let Some(sec) = &envelope.security else {
        return VerificationReport::fail(VerifyReason::MissingSignature);
    };
    if sec.signer_admin_id != envelope.sender.admin_id {
        return VerificationReport::fail(VerifyReason::SignerMismatch);
    }
    let Some(entry) = directory.lookup(&sec.signer_admin_id, &sec.key_id) else {
        return VerificationReport::fail(VerifyReason::UnknownKey);
    };
    if entry.status == KeyStatus::Revoked {
        return VerificationReport::fail(VerifyReason::RevokedKey);
    }
    match Algorithm::from_id(&sec.algorithm) {
        Some(alg) if alg == entry.algorithm => {
            if alg.verify(&entry.public_key, &canonical_bytes(envelope), &sec.signature) {
                VerificationReport {
                    valid: true,
                    reason: VerifyReason::Ok,
                }
            } else {
                VerificationReport::fail(VerifyReason::BadSignature)
            }
        }
        _ => VerificationReport::fail(VerifyReason::UnsupportedAlgorithm),
    }
}
