//! Opaque identifiers.
//!
//! Every entity id is a 26-character Crockford base32 ULID: a 48-bit
//! millisecond timestamp followed by 80 random bits. Sorting ids as strings
//! therefore sorts them by creation time, which gives stable tie-breaking for
//! listings that order on `(created_at, id)`.

use std::fmt;

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize};
use ulid::Ulid;

use crate::clock::Timestamp;

pub const ID_LEN: usize = 26;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Id(String);

impl Id {
    /// Parses an id, rejecting anything that is not a well-formed ULID.
    pub fn parse(s: &str) -> Option<Id> {
        if s.len() != ID_LEN {
            return None;
        }
        Ulid::from_string(s).ok().map(|u| Id(u.to_string()))
    }

    /// The reserved all-zero id used as the actor of system-originated events
    /// (bootstrap, log reconciliation).
    pub fn system() -> Id {
        Id(Ulid::nil().to_string())
    }

    pub fn from_parts(timestamp_ms: u64, random: u128) -> Id {
        Id(Ulid::from_parts(timestamp_ms, random).to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Id({})", self.0)
    }
}

impl AsRef<str> for Id {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl<'de> Deserialize<'de> for Id {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Id::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid id `{s}`")))
    }
}

/// Source of randomness for ids and password salts.
///
/// Production instances are seeded from the OS; seeded instances make demo
/// fixtures reproducible byte for byte.
pub struct Entropy {
    rng: Mutex<ChaCha20Rng>,
}

impl Entropy {
    pub fn from_os() -> Self {
        Entropy {
            rng: Mutex::new(ChaCha20Rng::from_os_rng()),
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Entropy {
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
        }
    }

    pub fn next_id(&self, now: Timestamp) -> Id {
        let random = {
            let mut rng = self.rng.lock();
            let hi = u128::from(rng.next_u64());
            let lo = u128::from(rng.next_u64());
            ((hi << 64) | lo) & ((1u128 << 80) - 1)
        };
        Id::from_parts(now.millis().max(0) as u64, random)
    }

    pub fn fill(&self, buf: &mut [u8]) {
        self.rng.lock().fill_bytes(buf);
    }
}

impl fmt::Debug for Entropy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Entropy")
    }
}
