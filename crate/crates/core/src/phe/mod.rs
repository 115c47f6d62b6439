//! Paillier partially homomorphic encryption.
//!
//! Ciphertexts add under multiplication modulo n² and can be scaled by
//! plaintext integers. There is no ciphertext-by-ciphertext product, so
//! similarity measures that need one (cosine) cannot be evaluated under
//! encryption; encrypted search works on differences instead and leaves
//! the final L1 step to the private-key holder.

pub mod bench;
mod cipher;
mod encoding;
mod keys;
pub mod mmi;
mod prime;
mod vector;

use thiserror::Error;

pub use cipher::PheCiphertext;
pub use encoding::{quantize, signed_residue, EncodedNumber, DEFAULT_SCALE};
pub use keys::{KeyId, Keypair, PrivateKeyFile, PublicKey, PublicKeyFile, DEFAULT_KEY_BITS, MIN_KEY_BITS};
pub use mmi::{batch_mod_inverse, mod_inverse, naive_mod_inverse, MmiCounters, MmiError};
pub use prime::{is_probable_prime, random_prime, MILLER_RABIN_ROUNDS};
pub use vector::{
    add_templates, decrypt_mantissas, decrypt_template, encode_vector, encrypt_template, encrypted_difference,
    encrypted_inner_product, negate_template, EncryptedTemplate,
};

#[derive(Debug, Error)]
pub enum PheError {
    #[error("ciphertext was produced under a different key")]
    KeyMismatch,
    #[error("fixed-point scales differ ({left} vs {right})")]
    ScaleMismatch { left: u64, right: u64 },
    #[error("blinding value must lie in [1, n-1] and be coprime to n")]
    BadBlinding,
    #[error("plaintext must lie in [0, n)")]
    PlaintextOutOfRange,
    #[error("value does not fit the plaintext space{}", match .index { Some(i) => format!(" (index {i})"), None => String::new() })]
    Overflow { index: Option<usize> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("key size {0} is below the minimum of {MIN_KEY_BITS} bits")]
    KeySize(u64),
    #[error("invalid primes: {0}")]
    InvalidPrimes(String),
    #[error("malformed ciphertext")]
    MalformedCiphertext,
    #[error(transparent)]
    Mmi(#[from] MmiError),
    #[error("key file: {0}")]
    KeyFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
