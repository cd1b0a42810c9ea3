//! Credentials, bearer tokens and the role policy matrix.
//!
//! Passwords are stored as Argon2id digests in a self-describing string
//! `$argon2id$m=<kib>,t=<passes>,p=<lanes>$<salt-b64>$<digest-b64>`.
//!
//! Tokens are RFC 7519 compact JWTs signed with HMAC-SHA-256. They are signed,
//! not encrypted: the claims are readable by anyone holding the token. Only
//! `HS256` is accepted on verification; `none` and every other algorithm are
//! rejected before the signature is even looked at.

use std::fmt;

use argon2::{Algorithm, Argon2, Params, Version};
use base64::engine::general_purpose::{STANDARD_NO_PAD, URL_SAFE_NO_PAD};
use base64::Engine;
use hmac::{KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::domain::Role;
use crate::id::{Entropy, Id};

pub const MIN_PASSWORD_LEN: usize = 8;
pub const MAX_PASSWORD_LEN: usize = 128;
pub const MIN_KEY_LEN: usize = 32;
const SALT_LEN: usize = 16;
const DIGEST_LEN: usize = 32;
const ALG_ID: &str = "argon2id";
/// Header segment of every issued token, byte for byte.
const TOKEN_HEADER: &str = r#"{"alg":"HS256","typ":"JWT"}"#;

type HmacSha256 = hmac::Hmac<Sha256>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("password must be at least {MIN_PASSWORD_LEN} characters")]
    PasswordTooShort,
    #[error("password must be at most {MAX_PASSWORD_LEN} characters")]
    PasswordTooLong,
    #[error("signing key must be at least {MIN_KEY_LEN} bytes")]
    WeakKey,
    #[error("token expiry must be after its issue time")]
    InvalidClaims,
    #[error("password hashing failed: {0}")]
    Hashing(String),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum TokenError {
    #[error("malformed token")]
    Malformed,
    #[error("token algorithm rejected")]
    AlgRejected,
    #[error("bad token signature")]
    BadSignature,
    #[error("token expired")]
    Expired,
}

/// Argon2id cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashParams {
    pub memory_kib: u32,
    pub iterations: u32,
    pub lanes: u32,
}

impl Default for HashParams {
    fn default() -> Self {
        HashParams {
            memory_kib: Params::DEFAULT_M_COST,
            iterations: Params::DEFAULT_T_COST,
            lanes: Params::DEFAULT_P_COST,
        }
    }
}

impl HashParams {
    /// Minimal cost, for tests only.
    pub fn insecure_fast() -> Self {
        HashParams {
            memory_kib: 64,
            iterations: 1,
            lanes: 1,
        }
    }

    fn encode(&self) -> String {
        format!("m={},t={},p={}", self.memory_kib, self.iterations, self.lanes)
    }

    fn decode(s: &str) -> Option<Self> {
        let mut m = None;
        let mut t = None;
        let mut p = None;
        for kv in s.split(',') {
            let (k, v) = kv.split_once('=')?;
            let v: u32 = v.parse().ok()?;
            match k {
                "m" => m = Some(v),
                "t" => t = Some(v),
                "p" => p = Some(v),
                _ => return None,
            }
        }
        Some(HashParams {
            memory_kib: m?,
            iterations: t?,
            lanes: p?,
        })
    }

    fn argon2(&self) -> Result<Argon2<'static>, AuthError> {
        let params = Params::new(self.memory_kib, self.iterations, self.lanes, Some(DIGEST_LEN))
            .map_err(|e| AuthError::Hashing(e.to_string()))?;
        Ok(Argon2::new(Algorithm::Argon2id, Version::V0x13, params))
    }
}

/// A stored password digest in its serialized string form.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HashRecord(String);

impl HashRecord {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn parts(&self) -> Option<(HashParams, Vec<u8>, Vec<u8>)> {
        let mut it = self.0.split('$');
        if !it.next()?.is_empty() || it.next()? != ALG_ID {
            return None;
        }
        let params = HashParams::decode(it.next()?)?;
        let salt = STANDARD_NO_PAD.decode(it.next()?).ok()?;
        let digest = STANDARD_NO_PAD.decode(it.next()?).ok()?;
        if it.next().is_some() || salt.len() < SALT_LEN {
            return None;
        }
        Some((params, salt, digest))
    }
}

impl fmt::Debug for HashRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("HashRecord(..)")
    }
}

fn check_password_len(plaintext: &str) -> Result<(), AuthError> {
    let n = plaintext.chars().count();
    if n < MIN_PASSWORD_LEN {
        Err(AuthError::PasswordTooShort)
    } else if n > MAX_PASSWORD_LEN {
        Err(AuthError::PasswordTooLong)
    } else {
        Ok(())
    }
}

pub fn hash_password(plaintext: &str, params: HashParams) -> Result<HashRecord, AuthError> {
    hash_password_with(plaintext, params, &Entropy::from_os())
}

/// Like [`hash_password`] but draws the salt from the given entropy source.
pub fn hash_password_with(
    plaintext: &str,
    params: HashParams,
    entropy: &Entropy,
) -> Result<HashRecord, AuthError> {
    check_password_len(plaintext)?;
    let mut salt = [0u8; SALT_LEN];
    entropy.fill(&mut salt);
    let mut digest = [0u8; DIGEST_LEN];
    params
        .argon2()?
        .hash_password_into(plaintext.as_bytes(), &salt, &mut digest)
        .map_err(|e| AuthError::Hashing(e.to_string()))?;
    Ok(HashRecord(format!(
        "${ALG_ID}${}${}${}",
        params.encode(),
        STANDARD_NO_PAD.encode(salt),
        STANDARD_NO_PAD.encode(digest)
    )))
}

pub fn verify_password(plaintext: &str, record: &HashRecord) -> bool {
    if check_password_len(plaintext).is_err() {
        return false;
    }
    let Some((params, salt, expected)) = record.parts() else {
        return false;
    };
    let Ok(argon) = params.argon2() else {
        return false;
    };
    let mut digest = vec![0u8; expected.len().max(1)];
    if argon
        .hash_password_into(plaintext.as_bytes(), &salt, &mut digest)
        .is_err()
    {
        return false;
    }
    constant_time_eq(&digest, &expected)
}

/// Compares two byte strings without short-circuiting on the first
/// differing byte. Lengths are not secret.
pub fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && bool::from(a.ct_eq(b))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub sub: Id,
    pub role: Role,
    pub iat: i64,
    pub exp: i64,
    pub jti: String,
}

/// HMAC signing secret; at least [`MIN_KEY_LEN`] bytes.
#[derive(Clone)]
pub struct TokenKey(Vec<u8>);

impl TokenKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, AuthError> {
        let bytes = bytes.into();
        if bytes.len() < MIN_KEY_LEN {
            return Err(AuthError::WeakKey);
        }
        Ok(TokenKey(bytes))
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("hmac accepts keys of any length")
    }
}

impl fmt::Debug for TokenKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TokenKey({} bytes)", self.0.len())
    }
}

pub fn issue_token(claims: &TokenClaims, key: &TokenKey) -> Result<String, AuthError> {
    if claims.exp <= claims.iat {
        return Err(AuthError::InvalidClaims);
    }
    let payload = serde_json::to_vec(claims).expect("claims serialize");
    let signing_input = format!(
        "{}.{}",
        URL_SAFE_NO_PAD.encode(TOKEN_HEADER),
        URL_SAFE_NO_PAD.encode(payload)
    );
    let mut mac = key.mac();
    mac.update(signing_input.as_bytes());
    let sig = mac.finalize().into_bytes();
    Ok(format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(sig)))
}

#[derive(Deserialize)]
struct Header {
    alg: String,
}

pub fn verify_token(token: &str, key: &TokenKey, now_secs: i64) -> Result<TokenClaims, TokenError> {
    let mut parts = token.split('.');
    let (Some(h), Some(p), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(TokenError::Malformed);
    };
    let header_bytes = URL_SAFE_NO_PAD.decode(h).map_err(|_| TokenError::Malformed)?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|_| TokenError::Malformed)?;
    if header.alg != "HS256" {
        return Err(TokenError::AlgRejected);
    }
    let sig = URL_SAFE_NO_PAD.decode(s).map_err(|_| TokenError::BadSignature)?;
    let mut mac = key.mac();
    mac.update(h.as_bytes());
    mac.update(b".");
    mac.update(p.as_bytes());
    mac.verify_slice(&sig).map_err(|_| TokenError::BadSignature)?;
    let payload = URL_SAFE_NO_PAD.decode(p).map_err(|_| TokenError::Malformed)?;
    let claims: TokenClaims = serde_json::from_slice(&payload).map_err(|_| TokenError::Malformed)?;
    if now_secs >= claims.exp {
        return Err(TokenError::Expired);
    }
    Ok(claims)
}

/// Everything a caller can be authorized to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    TaskRead,
    TaskCreate,
    TaskEdit,
    TaskTrash,
    TaskRestore,
    TrashPurge,
    AssetUpload,
    DashboardRead,
    UserList,
    UserCreate,
    UserEditRole,
    UserDeactivate,
    ExportImport,
}

impl Action {
    pub const ALL: [Action; 13] = [
        Action::TaskRead,
        Action::TaskCreate,
        Action::TaskEdit,
        Action::TaskTrash,
        Action::TaskRestore,
        Action::TrashPurge,
        Action::AssetUpload,
        Action::DashboardRead,
        Action::UserList,
        Action::UserCreate,
        Action::UserEditRole,
        Action::UserDeactivate,
        Action::ExportImport,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

/// Total mapping from (role, action) to a decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyMatrix {
    admin: [Decision; 13],
    user: [Decision; 13],
}

impl Default for PolicyMatrix {
    fn default() -> Self {
        use Action::*;
        const USER_ALLOWED: [Action; 8] = [
            TaskRead,
            TaskCreate,
            TaskEdit,
            TaskTrash,
            TaskRestore,
            AssetUpload,
            DashboardRead,
            UserList,
        ];
        let mut user = [Decision::Deny; 13];
        for a in USER_ALLOWED {
            user[a.index()] = Decision::Allow;
        }
        PolicyMatrix {
            admin: [Decision::Allow; 13],
            user,
        }
    }
}

impl PolicyMatrix {
    pub fn decide(&self, role: Role, action: Action) -> Decision {
        match role {
            Role::Admin => self.admin[action.index()],
            Role::User => self.user[action.index()],
        }
    }
}

pub fn authorize(role: Role, action: Action) -> Decision {
    PolicyMatrix::default().decide(role, action)
}
