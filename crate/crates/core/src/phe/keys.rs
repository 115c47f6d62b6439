use std::fmt;
use std::fs;
use std::path::Path;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::One;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mmi::mod_inverse;
use super::prime::random_prime;
use super::PheError;

/// Smallest modulus accepted by [`Keypair::generate`].
pub const MIN_KEY_BITS: u64 = 16;
pub const DEFAULT_KEY_BITS: u64 = 2048;

/// SHA-256 digest of the modulus, big-endian bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 32]);

impl KeyId {
    pub fn of_modulus(n: &BigUint) -> Self {
        KeyId(Sha256::digest(n.to_bytes_be()).into())
    }

    pub fn short(&self) -> String {
        self.to_string()[..16].to_string()
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", self.short())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    pub n: BigUint,
    pub n_squared: BigUint,
    /// Always n + 1.
    pub g: BigUint,
    pub bits: u64,
    pub key_id: KeyId,
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Self {
        let n_squared = &n * &n;
        let g = &n + 1u32;
        let bits = n.bits();
        let key_id = KeyId::of_modulus(&n);
        Self { n, n_squared, g, bits, key_id }
    }

    pub fn to_file(&self) -> PublicKeyFile {
        PublicKeyFile { kind: PUBLIC_KIND.into(), bits: self.bits, n: self.n.to_str_radix(10) }
    }

    pub fn save(&self, path: &Path) -> Result<(), PheError> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("key serializes");
        fs::write(path, text)?;
        Ok(())
    }

    /// Loads a public key from either a public or a private key file.
    pub fn load(path: &Path) -> Result<Self, PheError> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| PheError::KeyFile(e.to_string()))?;
        let n = value
            .get("n")
            .and_then(|v| v.as_str())
            .ok_or_else(|| PheError::KeyFile("missing modulus `n`".into()))?;
        Ok(Self::from_modulus(parse_decimal("n", n)?))
    }
}

/// Paillier private key together with its public half. Decryption uses the
/// CRT split over p and q; the textbook λ/μ form is kept alongside.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keypair {
    pub public: PublicKey,
    pub p: BigUint,
    pub q: BigUint,
    pub lambda: BigUint,
    pub mu: BigUint,
    pub(crate) crt: CrtParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct CrtParams {
    pub p_squared: BigUint,
    pub q_squared: BigUint,
    pub p_minus_1: BigUint,
    pub q_minus_1: BigUint,
    pub hp: BigUint,
    pub hq: BigUint,
    pub p_inv_q: BigUint,
}

fn l_function(x: &BigUint, n: &BigUint) -> BigUint {
    (x - 1u32) / n
}

impl Keypair {
    /// Fresh keypair with a modulus of exactly `bits` bits.
    pub fn generate<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<Self, PheError> {
        if bits < MIN_KEY_BITS {
            return Err(PheError::KeySize(bits));
        }
        let p_bits = bits - bits / 2;
        let q_bits = bits / 2;
        loop {
            let p = random_prime(p_bits, rng);
            let q = random_prime(q_bits, rng);
            if p == q {
                continue;
            }
            let n = &p * &q;
            if n.bits() != bits {
                continue;
            }
            if let Ok(kp) = Self::from_primes(p, q) {
                return Ok(kp);
            }
        }
    }

    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self, PheError> {
        if p == q {
            return Err(PheError::InvalidPrimes("p and q must differ".into()));
        }
        if p < BigUint::from(3u32) || q < BigUint::from(3u32) {
            return Err(PheError::InvalidPrimes("primes must be odd and at least 3".into()));
        }
        let n = &p * &q;
        let p_minus_1 = &p - 1u32;
        let q_minus_1 = &q - 1u32;
        let phi = &p_minus_1 * &q_minus_1;
        if !n.gcd(&phi).is_one() {
            return Err(PheError::InvalidPrimes("gcd(n, (p-1)(q-1)) != 1".into()));
        }
        let public = PublicKey::from_modulus(n);
        let n = &public.n;
        let lambda = p_minus_1.lcm(&q_minus_1);
        let g_lambda = public.g.modpow(&lambda, &public.n_squared);
        let mu = mod_inverse(&l_function(&g_lambda, n), n)
            .map_err(|_| PheError::InvalidPrimes("L(g^lambda) not invertible".into()))?;

        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let hp = mod_inverse(&l_function(&public.g.modpow(&p_minus_1, &p_squared), &p), &p)
            .map_err(|_| PheError::InvalidPrimes("hp not invertible".into()))?;
        let hq = mod_inverse(&l_function(&public.g.modpow(&q_minus_1, &q_squared), &q), &q)
            .map_err(|_| PheError::InvalidPrimes("hq not invertible".into()))?;
        let p_inv_q = mod_inverse(&p, &q).map_err(|_| PheError::InvalidPrimes("p not invertible mod q".into()))?;

        Ok(Self {
            public,
            p,
            q,
            lambda,
            mu,
            crt: CrtParams { p_squared, q_squared, p_minus_1, q_minus_1, hp, hq, p_inv_q },
        })
    }

    pub fn key_id(&self) -> KeyId {
        self.public.key_id
    }

    /// Checks μ·L(g^λ mod n²) ≡ 1 (mod n).
    pub fn check(&self) -> bool {
        let pk = &self.public;
        let l = l_function(&pk.g.modpow(&self.lambda, &pk.n_squared), &pk.n);
        ((&self.mu * l) % &pk.n).is_one()
    }

    pub fn to_file(&self) -> PrivateKeyFile {
        PrivateKeyFile {
            kind: PRIVATE_KIND.into(),
            bits: self.public.bits,
            n: self.public.n.to_str_radix(10),
            p: self.p.to_str_radix(10),
            q: self.q.to_str_radix(10),
            lambda: self.lambda.to_str_radix(10),
            mu: self.mu.to_str_radix(10),
        }
    }

    /// Writes the private key file, readable by the owner only.
    pub fn save(&self, path: &Path) -> Result<(), PheError> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("key serializes");
        write_private(path, text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PheError> {
        let text = fs::read_to_string(path)?;
        let file: PrivateKeyFile = serde_json::from_str(&text).map_err(|e| PheError::KeyFile(e.to_string()))?;
        if file.kind != PRIVATE_KIND {
            return Err(PheError::KeyFile(format!("expected {PRIVATE_KIND}, found {}", file.kind)));
        }
        let kp = Self::from_primes(parse_decimal("p", &file.p)?, parse_decimal("q", &file.q)?)?;
        if kp.public.n != parse_decimal("n", &file.n)? {
            return Err(PheError::KeyFile("modulus does not match p*q".into()));
        }
        Ok(kp)
    }
}

#[cfg(unix)]
fn write_private(path: &Path, data: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    let mut f = fs::OpenOptions::new().write(true).create(true).truncate(true).mode(0o600).open(path)?;
    f.write_all(data)
}

#[cfg(not(unix))]
fn write_private(path: &Path, data: &[u8]) -> std::io::Result<()> {
    fs::write(path, data)
}

fn parse_decimal(field: &str, s: &str) -> Result<BigUint, PheError> {
    BigUint::parse_bytes(s.as_bytes(), 10).ok_or_else(|| PheError::KeyFile(format!("field `{field}` is not a decimal integer")))
}

const PUBLIC_KIND: &str = "faro-paillier-public";
const PRIVATE_KIND: &str = "faro-paillier-private";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublicKeyFile {
    pub kind: String,
    pub bits: u64,
    pub n: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivateKeyFile {
    pub kind: String,
    pub bits: u64,
    pub n: String,
    pub p: String,
    pub q: String,
    pub lambda: String,
    pub mu: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn toy_key_parameters() {
        let kp = Keypair::from_primes(5u32.into(), 7u32.into()).unwrap();
        assert_eq!(kp.public.n, BigUint::from(35u32));
        assert_eq!(kp.public.g, BigUint::from(36u32));
        assert_eq!(kp.public.n_squared, BigUint::from(1225u32));
        assert_eq!(kp.lambda, BigUint::from(12u32));
        assert_eq!(kp.mu, BigUint::from(3u32));
        assert!(kp.check());
    }

    #[test]
    fn generated_modulus_has_exact_size() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for bits in [16u64, 17, 64, 256, 512] {
            let kp = Keypair::generate(bits, &mut rng).unwrap();
            assert_eq!(kp.public.n.bits(), bits);
            assert!(kp.check());
            assert_ne!(kp.p, kp.q);
        }
    }

    #[test]
    fn rejects_tiny_keys() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        assert!(matches!(Keypair::generate(8, &mut rng), Err(PheError::KeySize(8))));
    }

    #[test]
    fn key_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let kp = Keypair::generate(128, &mut rng).unwrap();
        let priv_path = dir.path().join("k.json");
        let pub_path = dir.path().join("k.pub.json");
        kp.save(&priv_path).unwrap();
        kp.public.save(&pub_path).unwrap();
        assert_eq!(Keypair::load(&priv_path).unwrap(), kp);
        assert_eq!(PublicKey::load(&pub_path).unwrap(), kp.public);
        assert_eq!(PublicKey::load(&priv_path).unwrap(), kp.public);
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mode = fs::metadata(&priv_path).unwrap().permissions().mode();
            assert_eq!(mode & 0o077, 0);
        }
    }
}
