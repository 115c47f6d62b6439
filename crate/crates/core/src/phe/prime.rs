//! Probable-prime generation for key material.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::RngCore;

/// Miller-Rabin rounds used for key generation.
pub const MILLER_RABIN_ROUNDS: usize = 40;

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }

    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;

    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random probable prime with exactly `bits` bits whose two leading bits
/// are set, so the product of two such primes has exactly twice the bits.
pub fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 3, "prime size too small");
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn classifies_small_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let primes: Vec<u32> = (0..400u32)
            .filter(|&v| is_probable_prime(&BigUint::from(v), 20, &mut rng))
            .collect();
        // Trial division oracle.
        let expected: Vec<u32> = (0..400u32)
            .filter(|&v| v >= 2 && (2..v).take_while(|d| d * d <= v).all(|d| v % d != 0))
            .collect();
        assert_eq!(primes, expected);
    }

    #[test]
    fn rejects_carmichael_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for c in [561u32, 1105, 1729, 2465, 2821, 6601, 8911] {
            assert!(!is_probable_prime(&BigUint::from(c), 20, &mut rng), "{c}");
        }
    }

    #[test]
    fn generated_primes_have_requested_size() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for bits in [8u64, 16, 64, 128] {
            let p = random_prime(bits, &mut rng);
            assert_eq!(p.bits(), bits);
        }
    }
}
