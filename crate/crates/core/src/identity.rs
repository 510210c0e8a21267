//! Accounts, single sign-on tokens, authorization and user profiles.
//!
//! Weak authentication checks a password against a salted argon2 hash.
//! Strong authentication has the user sign a one-time server nonce with a
//! registered Ed25519 key. Either path yields a self-contained token signed
//! by the framework key, so any endpoint or portal can validate it without
//! shared session state.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Argon2, Params, Version};
use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditError, AuditLog, Category, Entry, Outcome};
use crate::clock::{self, Clock, SystemClock};
use crate::envelope::{Algorithm, Signer};
use crate::registry::ServiceDescriptor;
use crate::store::{Journal, StoreError};

pub const TOKEN_SCOPE: &str = "ssc";
pub const MIN_PASSWORD_LEN: usize = 8;
const CHALLENGE_DOMAIN: &[u8] = b"ssc-auth-challenge:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthLevel {
    None,
    Weak,
    Strong,
}

impl AuthLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            AuthLevel::None => "none",
            AuthLevel::Weak => "weak",
            AuthLevel::Strong => "strong",
        }
    }

    pub fn parse(s: &str) -> Option<AuthLevel> {
        match s {
            "none" => Some(AuthLevel::None),
            "weak" => Some(AuthLevel::Weak),
            "strong" => Some(AuthLevel::Strong),
            _ => None,
        }
    }
}

/// Argon2id cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashParams {
    pub memory_kib: u32,
    pub iterations: u32,
    pub parallelism: u32,
}

impl Default for HashParams {
    fn default() -> Self {
        HashParams {
            memory_kib: 19 * 1024,
            iterations: 2,
            parallelism: 1,
        }
    }
}

impl HashParams {
    /// Cheap parameters for tests and demos.
    pub fn light() -> Self {
        HashParams {
            memory_kib: 256,
            iterations: 1,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdentityConfig {
    pub token_ttl: Duration,
    pub challenge_ttl: Duration,
    pub hash: HashParams,
    /// Keys that belong to the static profile and can never be set as
    /// preferences, in addition to whatever keys an account's static
    /// profile already holds.
    pub static_attributes: BTreeSet<String>,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        IdentityConfig {
            token_ttl: Duration::hours(8),
            challenge_ttl: Duration::minutes(5),
            hash: HashParams::default(),
            static_attributes: ["full_name", "fiscal_code", "residence_admin_id"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user_id: String,
    password_hash: String,
    #[serde(default, with = "opt_b64")]
    pub public_key: Option<Vec<u8>>,
    pub roles: BTreeSet<String>,
    pub static_profile: BTreeMap<String, String>,
    pub dynamic_preferences: BTreeMap<String, String>,
}

impl std::fmt::Debug for UserAccount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserAccount")
            .field("user_id", &self.user_id)
            .field("strong_capable", &self.public_key.is_some())
            .field("roles", &self.roles)
            .field("static_profile", &self.static_profile)
            .field("dynamic_preferences", &self.dynamic_preferences)
            .finish_non_exhaustive()
    }
}

mod opt_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(bytes) => s.serialize_some(&STANDARD.encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|raw| STANDARD.decode(raw).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// What API callers may see of an account.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountView {
    pub user_id: String,
    pub strong_capable: bool,
    pub roles: BTreeSet<String>,
    pub static_profile: BTreeMap<String, String>,
    pub dynamic_preferences: BTreeMap<String, String>,
}

impl From<&UserAccount> for AccountView {
    fn from(a: &UserAccount) -> Self {
        AccountView {
            user_id: a.user_id.clone(),
            strong_capable: a.public_key.is_some(),
            roles: a.roles.clone(),
            static_profile: a.static_profile.clone(),
            dynamic_preferences: a.dynamic_preferences.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub static_profile: BTreeMap<String, String>,
    pub dynamic_preferences: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub token_id: String,
    pub subject: String,
    pub level: AuthLevel,
    #[serde(with = "clock::millis")]
    pub issued_at: DateTime<Utc>,
    #[serde(with = "clock::millis")]
    pub expires_at: DateTime<Utc>,
    pub scope: String,
}

/// A token in its bearer form together with its decoded claims.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsoToken {
    pub token: String,
    pub claims: TokenClaims,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub nonce: String,
    #[serde(with = "clock::millis")]
    pub expires_at: DateTime<Utc>,
}

/// The bytes a user signs to answer a challenge.
pub fn challenge_message(nonce: &str) -> Vec<u8> {
    [CHALLENGE_DOMAIN, nonce.as_bytes()].concat()
}

pub enum Credential {
    Password(String),
    SignedChallenge { nonce: String, signature: Vec<u8> },
}

impl std::fmt::Debug for Credential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Credential::Password(_) => f.write_str("Password(..)"),
            Credential::SignedChallenge { nonce, .. } => f.debug_struct("SignedChallenge").field("nonce", nonce).finish_non_exhaustive(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    InvalidToken,
    Expired,
    Level,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("user `{0}` already exists")]
    DuplicateUser(String),
    #[error("password must be at least {MIN_PASSWORD_LEN} characters")]
    WeakPassword,
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("bad credential")]
    BadCredential,
    #[error("user `{0}` has no registered strong credential")]
    NoStrongCredential(String),
    #[error("invalid public key: {0}")]
    InvalidPublicKey(String),
    #[error("invalid token")]
    InvalidToken,
    #[error("token expired")]
    ExpiredToken,
    #[error("`{0}` is a static profile attribute")]
    StaticAttributeViolation(String),
    #[error("password hashing failed: {0}")]
    Hashing(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AccountRecord {
    UserRegistered { account: UserAccount },
    PreferencesUpdated { user_id: String, delta: BTreeMap<String, Option<String>> },
}

pub struct NewUser {
    pub user_id: String,
    pub password: String,
    pub public_key: Option<Vec<u8>>,
    pub roles: BTreeSet<String>,
    pub static_profile: BTreeMap<String, String>,
}

pub struct Identity {
    accounts: RwLock<BTreeMap<String, UserAccount>>,
    challenges: Mutex<HashMap<String, (String, DateTime<Utc>)>>,
    framework: Signer,
    config: IdentityConfig,
    audit: Arc<AuditLog>,
    clock: Arc<dyn Clock>,
    journal: Option<Journal>,
}

impl Identity {
    pub fn new(framework: Signer, config: IdentityConfig, audit: Arc<AuditLog>) -> Self {
        Identity {
            accounts: RwLock::new(BTreeMap::new()),
            challenges: Mutex::new(HashMap::new()),
            framework,
            config,
            audit,
            clock: Arc::new(SystemClock),
            journal: None,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn recover(mut self, journal: Journal, records: Vec<AccountRecord>) -> Result<Self, IdentityError> {
        {
            let mut accounts = self.accounts.write();
            for rec in records {
                match rec {
                    AccountRecord::UserRegistered { account } => {
                        if accounts.contains_key(&account.user_id) {
                            return Err(IdentityError::DuplicateUser(account.user_id));
                        }
                        accounts.insert(account.user_id.clone(), account);
                    }
                    AccountRecord::PreferencesUpdated { user_id, delta } => {
                        let acct = accounts
                            .get_mut(&user_id)
                            .ok_or_else(|| IdentityError::UnknownUser(user_id.clone()))?;
                        apply_delta(&mut acct.dynamic_preferences, &delta);
                    }
                }
            }
        }
        self.journal = Some(journal);
        Ok(self)
    }

    fn persist(&self, rec: &AccountRecord) -> Result<(), IdentityError> {
        if let Some(j) = &self.journal {
            j.append(rec)?;
        }
        Ok(())
    }

    fn auth_event(&self, actor: &str, subject: &str, outcome: Outcome, detail: &str) -> Result<(), IdentityError> {
        let mut e = Entry::new(Category::AuthEvent, actor, subject).outcome(outcome);
        if !detail.is_empty() {
            e = e.detail(detail);
        }
        self.audit.record(e)?;
        Ok(())
    }

    fn hasher(&self) -> Result<Argon2<'static>, IdentityError> {
        let p = self.config.hash;
        let params = Params::new(p.memory_kib, p.iterations, p.parallelism, None)
            .map_err(|e| IdentityError::Hashing(e.to_string()))?;
        Ok(Argon2::new(argon2::Algorithm::Argon2id, Version::V0x13, params))
    }

    pub fn register_user(&self, user: NewUser) -> Result<AccountView, IdentityError> {
        if user.user_id.trim().is_empty() {
            return Err(IdentityError::UnknownUser(user.user_id));
        }
        if self.accounts.read().contains_key(&user.user_id) {
            self.auth_event(&user.user_id, "register", Outcome::Fault, "duplicate user")?;
            return Err(IdentityError::DuplicateUser(user.user_id));
        }
        if user.password.chars().count() < MIN_PASSWORD_LEN {
            self.auth_event(&user.user_id, "register", Outcome::Fault, "weak password")?;
            return Err(IdentityError::WeakPassword);
        }
        if let Some(pk) = &user.public_key {
            ed25519_dalek::VerifyingKey::from_bytes(
                pk.as_slice()
                    .try_into()
                    .map_err(|_| IdentityError::InvalidPublicKey("expected 32 bytes".into()))?,
            )
            .map_err(|e| IdentityError::InvalidPublicKey(e.to_string()))?;
        }
        let salt = SaltString::encode_b64(&rand::random::<[u8; 16]>()).map_err(|e| IdentityError::Hashing(e.to_string()))?;
        let password_hash = self
            .hasher()?
            .hash_password(user.password.as_bytes(), &salt)
            .map_err(|e| IdentityError::Hashing(e.to_string()))?
            .to_string();
        let account = UserAccount {
            user_id: user.user_id,
            password_hash,
            public_key: user.public_key,
            roles: user.roles,
            static_profile: user.static_profile,
            dynamic_preferences: BTreeMap::new(),
        };
        let mut accounts = self.accounts.write();
        if accounts.contains_key(&account.user_id) {
            drop(accounts);
            self.auth_event(&account.user_id, "register", Outcome::Fault, "duplicate user")?;
            return Err(IdentityError::DuplicateUser(account.user_id));
        }
        self.auth_event(&account.user_id, "register", Outcome::Ok, "")?;
        self.persist(&AccountRecord::UserRegistered {
            account: account.clone(),
        })?;
        let view = AccountView::from(&account);
        accounts.insert(account.user_id.clone(), account);
        Ok(view)
    }

    pub fn account(&self, user_id: &str) -> Result<AccountView, IdentityError> {
        self.accounts
            .read()
            .get(user_id)
            .map(AccountView::from)
            .ok_or_else(|| IdentityError::UnknownUser(user_id.to_string()))
    }

    pub fn user_exists(&self, user_id: &str) -> bool {
        self.accounts.read().contains_key(user_id)
    }

    pub fn user_count(&self) -> usize {
        self.accounts.read().len()
    }

    pub fn has_role(&self, user_id: &str, role: &str) -> bool {
        self.accounts.read().get(user_id).is_some_and(|a| a.roles.contains(role))
    }

    /// Issues a single-use nonce for the strong path.
    pub fn issue_challenge(&self, user_id: &str) -> Result<Challenge, IdentityError> {
        let strong = match self.accounts.read().get(user_id) {
            None => return Err(IdentityError::UnknownUser(user_id.to_string())),
            Some(a) => a.public_key.is_some(),
        };
        if !strong {
            self.auth_event(user_id, "challenge", Outcome::Fault, "no strong credential")?;
            return Err(IdentityError::NoStrongCredential(user_id.to_string()));
        }
        let nonce = URL_SAFE_NO_PAD.encode(rand::random::<[u8; 32]>());
        let expires_at = clock::to_millis(self.clock.now() + self.config.challenge_ttl);
        self.challenges
            .lock()
            .insert(nonce.clone(), (user_id.to_string(), expires_at));
        self.auth_event(user_id, "challenge", Outcome::Ok, "")?;
        Ok(Challenge { nonce, expires_at })
    }

    pub fn authenticate(&self, user_id: &str, credential: Credential) -> Result<SsoToken, IdentityError> {
        let (subject, result) = match &credential {
            Credential::Password(_) => ("login:weak", self.check_password(user_id, &credential)),
            Credential::SignedChallenge { .. } => ("login:strong", self.check_challenge(user_id, &credential)),
        };
        match result {
            Ok(level) => {
                self.auth_event(user_id, subject, Outcome::Ok, "")?;
                Ok(self.issue_token(user_id, level))
            }
            Err(e) => {
                let reason = match &e {
                    IdentityError::NoStrongCredential(_) => "no strong credential",
                    _ => "bad credential",
                };
                self.auth_event(user_id, subject, Outcome::Fault, reason)?;
                Err(e)
            }
        }
    }

    fn check_password(&self, user_id: &str, credential: &Credential) -> Result<AuthLevel, IdentityError> {
        let Credential::Password(password) = credential else {
            unreachable!()
        };
        let hash = self
            .accounts
            .read()
            .get(user_id)
            .map(|a| a.password_hash.clone())
            .ok_or(IdentityError::BadCredential)?;
        let parsed = PasswordHash::new(&hash).map_err(|e| IdentityError::Hashing(e.to_string()))?;
        Argon2::default()
            .verify_password(password.as_bytes(), &parsed)
            .map_err(|_| IdentityError::BadCredential)?;
        Ok(AuthLevel::Weak)
    }

    fn check_challenge(&self, user_id: &str, credential: &Credential) -> Result<AuthLevel, IdentityError> {
        let Credential::SignedChallenge { nonce, signature } = credential else {
            unreachable!()
        };
        let key = match self.accounts.read().get(user_id) {
            None => return Err(IdentityError::BadCredential),
            Some(a) => a
                .public_key
                .clone()
                .ok_or_else(|| IdentityError::NoStrongCredential(user_id.to_string()))?,
        };
        let (owner, expires_at) = self
            .challenges
            .lock()
            .remove(nonce)
            .ok_or(IdentityError::BadCredential)?;
        if owner != user_id || self.clock.now() >= expires_at {
            return Err(IdentityError::BadCredential);
        }
        if !Algorithm::Ed25519.verify(&key, &challenge_message(nonce), signature) {
            return Err(IdentityError::BadCredential);
        }
        Ok(AuthLevel::Strong)
    }

    fn issue_token(&self, user_id: &str, level: AuthLevel) -> SsoToken {
        let issued_at = clock::to_millis(self.clock.now());
        let claims = TokenClaims {
            token_id: uuid::Uuid::new_v4().to_string(),
            subject: user_id.to_string(),
            level,
            issued_at,
            expires_at: issued_at + self.config.token_ttl,
            scope: TOKEN_SCOPE.to_string(),
        };
        let body = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&claims).expect("claims encode"));
        let sig = URL_SAFE_NO_PAD.encode(self.framework.sign_bytes(body.as_bytes()));
        SsoToken {
            token: format!("{body}.{sig}"),
            claims,
        }
    }

    /// Checks signature, scope and expiry. Needs nothing but the framework
    /// public key, so every endpoint validates the same way.
    pub fn validate_token(&self, token: &str) -> Result<TokenClaims, IdentityError> {
        let claims = decode_token(token, &self.framework.public_key_bytes())?;
        if self.clock.now() >= claims.expires_at {
            return Err(IdentityError::ExpiredToken);
        }
        Ok(claims)
    }

    pub fn authorize(&self, token: &str, descriptor: &ServiceDescriptor) -> Decision {
        match self.validate_token(token) {
            Err(IdentityError::ExpiredToken) => Decision::Deny(DenyReason::Expired),
            Err(_) => Decision::Deny(DenyReason::InvalidToken),
            Ok(claims) if claims.level >= descriptor.min_auth_level => Decision::Allow,
            Ok(_) => Decision::Deny(DenyReason::Level),
        }
    }

    pub fn get_profile(&self, user_id: &str) -> Result<UserProfile, IdentityError> {
        self.accounts
            .read()
            .get(user_id)
            .map(|a| UserProfile {
                static_profile: a.static_profile.clone(),
                dynamic_preferences: a.dynamic_preferences.clone(),
            })
            .ok_or_else(|| IdentityError::UnknownUser(user_id.to_string()))
    }

    /// Applies a preference delta; `None` removes a key.
    pub fn update_preferences(
        &self,
        user_id: &str,
        delta: BTreeMap<String, Option<String>>,
    ) -> Result<BTreeMap<String, String>, IdentityError> {
        let mut accounts = self.accounts.write();
        let acct = accounts
            .get_mut(user_id)
            .ok_or_else(|| IdentityError::UnknownUser(user_id.to_string()))?;
        if let Some(k) = delta
            .keys()
            .find(|k| self.config.static_attributes.contains(*k) || acct.static_profile.contains_key(*k))
        {
            return Err(IdentityError::StaticAttributeViolation(k.clone()));
        }
        if delta.is_empty() {
            return Ok(acct.dynamic_preferences.clone());
        }
        self.persist(&AccountRecord::PreferencesUpdated {
            user_id: user_id.to_string(),
            delta: delta.clone(),
        })?;
        apply_delta(&mut acct.dynamic_preferences, &delta);
        Ok(acct.dynamic_preferences.clone())
    }
}

fn apply_delta(prefs: &mut BTreeMap<String, String>, delta: &BTreeMap<String, Option<String>>) {
    for (k, v) in delta {
        match v {
            Some(v) => prefs.insert(k.clone(), v.clone()),
            None => prefs.remove(k),
        };
    }
}

/// Decodes and verifies a token against a framework public key without
/// checking expiry.
pub fn decode_token(token: &str, framework_public_key: &[u8]) -> Result<TokenClaims, IdentityError> {
    let (body, sig) = token.split_once('.').ok_or(IdentityError::InvalidToken)?;
    let sig = URL_SAFE_NO_PAD.decode(sig).map_err(|_| IdentityError::InvalidToken)?;
    if !Algorithm::Ed25519.verify(framework_public_key, body.as_bytes(), &sig) {
        return Err(IdentityError::InvalidToken);
    }
    let raw = URL_SAFE_NO_PAD.decode(body).map_err(|_| IdentityError::InvalidToken)?;
    let claims: TokenClaims = serde_json::from_slice(&raw).map_err(|_| IdentityError::InvalidToken)?;
    if claims.scope != TOKEN_SCOPE || claims.level == AuthLevel::None {
        return Err(IdentityError::InvalidToken);
    }
    Ok(claims)
}

/// Standard base64 of a public key, the form accepted over the API.
pub fn encode_public_key(key: &[u8]) -> String {
    STANDARD.encode(key)
}
