use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

use super::keys::{KeyId, Keypair, PublicKey};
use super::mmi::{batch_mod_inverse, mod_inverse};
use super::PheError;

/// A Paillier ciphertext. `scale` is the fixed-point scale of the
/// underlying plaintext (1 for raw integers).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PheCiphertext {
    pub value: BigUint,
    pub key_id: KeyId,
    pub scale: u64,
}

impl PublicKey {
    fn check_key(&self, c: &PheCiphertext) -> Result<(), PheError> {
        if c.key_id != self.key_id {
            return Err(PheError::KeyMismatch);
        }
        Ok(())
    }

    /// g^m mod n², which for g = n + 1 is 1 + m·n.
    pub fn g_pow(&self, m: &BigUint) -> BigUint {
        (BigUint::one() + (m % &self.n) * &self.n) % &self.n_squared
    }

    /// Uniform blinding value in [1, n-1] coprime to n.
    pub fn random_blinding<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// rⁿ mod n² for `count` fresh blinding values.
    pub fn blinding_factors<R: RngCore + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<BigUint> {
        (0..count)
            .map(|_| self.random_blinding(rng).modpow(&self.n, &self.n_squared))
            .collect()
    }

    /// Combines a plaintext with a precomputed blinding factor rⁿ mod n².
    pub fn encrypt_with_factor(&self, m: &BigUint, factor: &BigUint, scale: u64) -> PheCiphertext {
        PheCiphertext {
            value: (self.g_pow(m) * factor) % &self.n_squared,
            key_id: self.key_id,
            scale,
        }
    }

    /// c = gᵐ·rⁿ mod n². A supplied `r` must lie in [1, n-1] and be coprime
    /// to n; otherwise a fresh one is drawn from `rng`.
    pub fn encrypt<R: RngCore + ?Sized>(
        &self,
        m: &BigUint,
        r: Option<&BigUint>,
        rng: &mut R,
    ) -> Result<PheCiphertext, PheError> {
        self.encrypt_scaled(m, r, 1, rng)
    }

    pub fn encrypt_scaled<R: RngCore + ?Sized>(
        &self,
        m: &BigUint,
        r: Option<&BigUint>,
        scale: u64,
        rng: &mut R,
    ) -> Result<PheCiphertext, PheError> {
        if m >= &self.n {
            return Err(PheError::PlaintextOutOfRange);
        }
        let r = match r {
            Some(r) => {
                if r.is_zero() || r >= &self.n || !r.gcd(&self.n).is_one() {
                    return Err(PheError::BadBlinding);
                }
                r.clone()
            }
            None => self.random_blinding(rng),
        };
        let factor = r.modpow(&self.n, &self.n_squared);
        Ok(self.encrypt_with_factor(m, &factor, scale))
    }

    /// Enc(m1 + m2): c1·c2 mod n².
    pub fn add(&self, c1: &PheCiphertext, c2: &PheCiphertext) -> Result<PheCiphertext, PheError> {
        self.check_key(c1)?;
        self.check_key(c2)?;
        if c1.scale != c2.scale {
            return Err(PheError::ScaleMismatch { left: c1.scale, right: c2.scale });
        }
        Ok(PheCiphertext {
            value: (&c1.value * &c2.value) % &self.n_squared,
            key_id: self.key_id,
            scale: c1.scale,
        })
    }

    /// Enc(k·m): cᵏ mod n² with k reduced modulo n.
    pub fn scalar_mul(&self, c: &PheCiphertext, k: &BigInt) -> Result<PheCiphertext, PheError> {
        self.check_key(c)?;
        let k = reduce(k, &self.n);
        Ok(PheCiphertext {
            value: c.value.modpow(&k, &self.n_squared),
            key_id: self.key_id,
            scale: c.scale,
        })
    }

    /// Enc(m - k): c·g^(n-k mod n) mod n².
    pub fn sub_plain(&self, c: &PheCiphertext, k: &BigInt) -> Result<PheCiphertext, PheError> {
        self.check_key(c)?;
        let neg_k = reduce(&-k, &self.n);
        Ok(PheCiphertext {
            value: (&c.value * self.g_pow(&neg_k)) % &self.n_squared,
            key_id: self.key_id,
            scale: c.scale,
        })
    }

    /// Enc(-m): the inverse of c modulo n².
    pub fn negate(&self, c: &PheCiphertext) -> Result<PheCiphertext, PheError> {
        self.check_key(c)?;
        let value = mod_inverse(&c.value, &self.n_squared)?;
        Ok(PheCiphertext { value, key_id: self.key_id, scale: c.scale })
    }

    /// Negates every ciphertext with one batched inversion.
    pub fn negate_batch(&self, cs: &[PheCiphertext]) -> Result<Vec<PheCiphertext>, PheError> {
        for c in cs {
            self.check_key(c)?;
        }
        let values: Vec<BigUint> = cs.iter().map(|c| c.value.clone()).collect();
        let inverses = batch_mod_inverse(&values, &self.n_squared)?;
        Ok(inverses
            .into_iter()
            .zip(cs)
            .map(|(value, c)| PheCiphertext { value, key_id: self.key_id, scale: c.scale })
            .collect())
    }

    /// Multiplies by a fresh encryption of zero.
    pub fn rerandomize<R: RngCore + ?Sized>(&self, c: &PheCiphertext, rng: &mut R) -> Result<PheCiphertext, PheError> {
        self.check_key(c)?;
        let factor = self.blinding_factors(1, rng).pop().unwrap();
        Ok(PheCiphertext { value: (&c.value * factor) % &self.n_squared, key_id: self.key_id, scale: c.scale })
    }
}

/// k mod n as a non-negative integer.
pub(crate) fn reduce(k: &BigInt, n: &BigUint) -> BigUint {
    let n = BigInt::from_biguint(Sign::Plus, n.clone());
    k.mod_floor(&n).magnitude().clone()
}

impl Keypair {
    fn check_ciphertext(&self, c: &PheCiphertext) -> Result<(), PheError> {
        if c.key_id != self.public.key_id {
            return Err(PheError::KeyMismatch);
        }
        Ok(())
    }

    /// m = L(c^λ mod n²)·μ mod n.
    pub fn decrypt_textbook(&self, c: &PheCiphertext) -> Result<BigUint, PheError> {
        self.check_ciphertext(c)?;
        let pk = &self.public;
        let x = c.value.modpow(&self.lambda, &pk.n_squared);
        if x.is_zero() {
            return Err(PheError::MalformedCiphertext);
        }
        let l = (x - 1u32) / &pk.n;
        Ok((l * &self.mu) % &pk.n)
    }

    /// Decryption split over p² and q², recombined by CRT.
    pub fn decrypt(&self, c: &PheCiphertext) -> Result<BigUint, PheError> {
        self.check_ciphertext(c)?;
        let crt = &self.crt;
        let xp = (&c.value % &crt.p_squared).modpow(&crt.p_minus_1, &crt.p_squared);
        let xq = (&c.value % &crt.q_squared).modpow(&crt.q_minus_1, &crt.q_squared);
        if xp.is_zero() || xq.is_zero() {
            return Err(PheError::MalformedCiphertext);
        }
        let mp = (((xp - 1u32) / &self.p) * &crt.hp) % &self.p;
        let mq = (((xq - 1u32) / &self.q) * &crt.hq) % &self.q;
        // m = mp + p·((mq - mp)·p⁻¹ mod q)
        let diff = (&mq + &self.q - (&mp % &self.q)) % &self.q;
        let t = (diff * &crt.p_inv_q) % &self.q;
        Ok(mp + &self.p * t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy() -> Keypair {
        Keypair::from_primes(5u32.into(), 7u32.into()).unwrap()
    }

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn toy_encryption_vector() {
        let kp = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let c = kp.public.encrypt(&big(4), Some(&big(2)), &mut rng).unwrap();
        assert_eq!(c.value, big(88));
        assert_eq!(kp.decrypt(&c).unwrap(), big(4));
        assert_eq!(kp.decrypt_textbook(&c).unwrap(), big(4));
    }

    #[test]
    fn zero_with_unit_blinding_is_one() {
        let kp = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let c = kp.public.encrypt(&big(0), Some(&big(1)), &mut rng).unwrap();
        assert_eq!(c.value, big(1));
    }

    #[test]
    fn exhaustive_toy_round_trip() {
        let kp = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for m in 0..35u64 {
            let c = kp.public.encrypt(&big(m), None, &mut rng).unwrap();
            assert_eq!(kp.decrypt(&c).unwrap(), big(m));
            assert_eq!(kp.decrypt_textbook(&c).unwrap(), big(m));
        }
    }

    #[test]
    fn blinding_must_be_coprime() {
        let kp = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for r in [0u64, 5, 7, 35, 40] {
            assert!(matches!(kp.public.encrypt(&big(1), Some(&big(r)), &mut rng), Err(PheError::BadBlinding)), "{r}");
        }
    }

    #[test]
    fn toy_homomorphisms() {
        let kp = toy();
        let pk = &kp.public;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let enc = |m: u64, rng: &mut ChaCha20Rng| pk.encrypt(&big(m), None, rng).unwrap();
        let sum = pk.add(&enc(3, &mut rng), &enc(4, &mut rng)).unwrap();
        assert_eq!(kp.decrypt(&sum).unwrap(), big(7));
        let c = enc(4, &mut rng);
        assert_eq!(kp.decrypt(&pk.scalar_mul(&c, &BigInt::from(3)).unwrap()).unwrap(), big(12));
        assert_eq!(kp.decrypt(&pk.scalar_mul(&c, &BigInt::from(1)).unwrap()).unwrap(), big(4));
        assert_eq!(kp.decrypt(&pk.scalar_mul(&c, &BigInt::from(0)).unwrap()).unwrap(), big(0));
        assert_eq!(kp.decrypt(&pk.sub_plain(&c, &BigInt::from(4)).unwrap()).unwrap(), big(0));
        let three = enc(3, &mut rng);
        assert_eq!(kp.decrypt(&pk.sub_plain(&three, &BigInt::from(5)).unwrap()).unwrap(), big(33));
        assert_eq!(kp.decrypt(&pk.negate(&c).unwrap()).unwrap(), big(31));
        let zero = enc(0, &mut rng);
        assert_eq!(kp.decrypt(&pk.add(&c, &zero).unwrap()).unwrap(), big(4));
    }

    #[test]
    fn foreign_key_is_rejected() {
        let kp = toy();
        let other = Keypair::from_primes(11u32.into(), 13u32.into()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let c = other.public.encrypt(&big(2), None, &mut rng).unwrap();
        assert!(matches!(kp.decrypt(&c), Err(PheError::KeyMismatch)));
        assert!(matches!(kp.public.add(&c, &c), Err(PheError::KeyMismatch)));
        assert!(matches!(kp.public.scalar_mul(&c, &BigInt::from(2)), Err(PheError::KeyMismatch)));
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        let kp = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = kp.public.encrypt_scaled(&big(1), None, 1, &mut rng).unwrap();
        let b = kp.public.encrypt_scaled(&big(1), None, 4, &mut rng).unwrap();
        assert!(matches!(kp.public.add(&a, &b), Err(PheError::ScaleMismatch { left: 1, right: 4 })));
    }

    #[test]
    fn fresh_blinding_differs() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let kp = Keypair::generate(256, &mut rng).unwrap();
        let m = big(42);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            let c = kp.public.encrypt(&m, None, &mut rng).unwrap();
            assert!(seen.insert(c.value));
        }
    }

    #[test]
    fn batch_negation_matches_single() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let kp = Keypair::generate(128, &mut rng).unwrap();
        let cs: Vec<_> = (0..6u64).map(|m| kp.public.encrypt(&big(m * 1000), None, &mut rng).unwrap()).collect();
        let batch = kp.public.negate_batch(&cs).unwrap();
        for (c, neg) in cs.iter().zip(&batch) {
            assert_eq!(neg, &kp.public.negate(c).unwrap());
            let sum = kp.public.add(c, neg).unwrap();
            assert!(kp.decrypt(&sum).unwrap().is_zero());
        }
    }
}
