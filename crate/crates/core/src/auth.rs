//! Salted password hashes, constant-time checks and random tokens.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

/// Shared CSPRNG. Services seed it from the OS; the test mesh seeds it
/// from the scenario so tokens and boundaries replay identically.
#[derive(Debug)]
pub struct SecureRng(Mutex<ChaCha20Rng>);

impl SecureRng {
    pub fn from_entropy() -> Self {
        SecureRng(Mutex::new(ChaCha20Rng::from_entropy()))
    }

    pub fn seeded(seed: u64) -> Self {
        SecureRng(Mutex::new(ChaCha20Rng::seed_from_u64(seed)))
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut ChaCha20Rng) -> T) -> T {
        let mut rng = self.0.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut rng)
    }

    pub fn bytes<const N: usize>(&self) -> [u8; N] {
        let mut out = [0u8; N];
        self.with(|r| r.fill_bytes(&mut out));
        out
    }
}

/// `hex(salt)$hex(sha256(salt || secret))`.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretHash {
    salt: [u8; 16],
    digest: [u8; 32],
}

impl SecretHash {
    pub fn new(rng: &SecureRng, secret: &str) -> Self {
        let salt = rng.bytes::<16>();
        SecretHash {
            salt,
            digest: digest(&salt, secret),
        }
    }

    pub fn verify(&self, secret: &str) -> bool {
        digest(&self.salt, secret).ct_eq(&self.digest).into()
    }
}

fn digest(salt: &[u8], secret: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(secret.as_bytes());
    h.finalize().into()
}

impl fmt::Display for SecretHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}${}", hex::encode(self.salt), hex::encode(self.digest))
    }
}

impl fmt::Debug for SecretHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretHash(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("expected `hex-salt$hex-sha256`")]
pub struct BadSecretHash;

impl FromStr for SecretHash {
    type Err = BadSecretHash;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (salt, dig) = s.trim().split_once('$').ok_or(BadSecretHash)?;
        let salt = hex::decode(salt).map_err(|_| BadSecretHash)?;
        let dig = hex::decode(dig).map_err(|_| BadSecretHash)?;
        Ok(SecretHash {
            salt: salt.try_into().map_err(|_| BadSecretHash)?,
            digest: dig.try_into().map_err(|_| BadSecretHash)?,
        })
    }
}

/// Opaque 128-bit session token.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token([u8; 16]);

impl Token {
    pub fn generate(rng: &SecureRng) -> Self {
        Token(rng.bytes())
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Token({self})")
    }
}

impl FromStr for Token {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Token(out))
    }
}
