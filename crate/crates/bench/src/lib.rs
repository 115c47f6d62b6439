//! Deterministic inputs shared by the benchmarks.

use faro_core::phe::Keypair;
use faro_core::Template;
use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An odd modulus of exactly `bits` bits.
pub fn odd_modulus(bits: u64, seed: u64) -> BigUint {
    let mut m = rng(seed).gen_biguint(bits);
    m.set_bit(bits - 1, true);
    m.set_bit(0, true);
    m
}

/// `count` residues coprime to `modulus`.
pub fn units(modulus: &BigUint, count: usize, seed: u64) -> Vec<BigUint> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = r.gen_biguint_below(modulus);
        if a.gcd(modulus) == BigUint::from(1u32) {
            out.push(a);
        }
    }
    out
}

pub fn keypair(bits: u64, seed: u64) -> Keypair {
    Keypair::generate(bits, &mut rng(seed)).expect("benchmark key sizes are valid")
}

pub fn template(dims: usize, seed: u64) -> Template {
    let mut r = rng(seed);
    Template::new((0..dims).map(|_| r.gen_range(-1.0..1.0)).collect(), "bench")
}
