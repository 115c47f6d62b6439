//! Modular multiplicative inverses.
//!
//! [`mod_inverse`] is the iterative extended Euclidean algorithm.
//! [`batch_mod_inverse`] inverts a whole vector with a single call to it
//! using prefix products, trading N-1 inversions for 3(N-1) modular
//! multiplications. Thread-local counters record both so callers can check
//! the cost model.

use std::cell::Cell;

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MmiError {
    #[error("value at index {index} is not invertible (gcd = {gcd})")]
    NotInvertible { index: usize, gcd: BigUint },
    #[error("modulus must be at least 2")]
    BadModulus,
}

thread_local! {
    static EEA_CALLS: Cell<u64> = const { Cell::new(0) };
    static MOD_MULS: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the per-thread inversion counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MmiCounters {
    pub eea_calls: u64,
    pub mod_muls: u64,
}

impl MmiCounters {
    pub fn read() -> Self {
        Self {
            eea_calls: EEA_CALLS.with(Cell::get),
            mod_muls: MOD_MULS.with(Cell::get),
        }
    }

    /// Counts accumulated on this thread since `self` was read.
    pub fn since(self) -> Self {
        let now = Self::read();
        Self {
            eea_calls: now.eea_calls - self.eea_calls,
            mod_muls: now.mod_muls - self.mod_muls,
        }
    }
}

fn bump(counter: &'static std::thread::LocalKey<Cell<u64>>) {
    counter.with(|c| c.set(c.get() + 1));
}

#[inline]
fn mul_mod(a: &BigUint, b: &BigUint, m: &BigUint) -> BigUint {
    bump(&MOD_MULS);
    (a * b) % m
}

/// Inverse of `a` modulo `modulus` by the iterative extended Euclidean
/// algorithm. On failure the error carries gcd(a, modulus).
pub fn mod_inverse(a: &BigUint, modulus: &BigUint) -> Result<BigUint, MmiError> {
    if modulus < &BigUint::from(2u32) {
        return Err(MmiError::BadModulus);
    }
    bump(&EEA_CALLS);
    let m = BigInt::from_biguint(Sign::Plus, modulus.clone());
    let mut old_r = BigInt::from_biguint(Sign::Plus, a % modulus);
    let mut r = m.clone();
    let mut old_s = BigInt::one();
    let mut s = BigInt::zero();
    while !r.is_zero() {
        let (q, rem) = old_r.div_rem(&r);
        old_r = std::mem::replace(&mut r, rem);
        let next_s = &old_s - &q * &s;
        old_s = std::mem::replace(&mut s, next_s);
    }
    // old_r holds gcd(a, m); it is zero only when a ≡ 0.
    if !old_r.is_one() {
        let gcd = if old_r.is_zero() { modulus.clone() } else { old_r.magnitude().clone() };
        return Err(MmiError::NotInvertible { index: 0, gcd });
    }
    let inv = old_s.mod_floor(&m);
    Ok(inv.magnitude().clone())
}

/// Textbook recursive extended Euclid, allocating at every level. Kept as
/// the slow reference point for benchmarks.
pub fn naive_mod_inverse(a: &BigUint, modulus: &BigUint) -> Result<BigUint, MmiError> {
    fn egcd(a: &BigInt, b: &BigInt) -> (BigInt, BigInt, BigInt) {
        if a.is_zero() {
            (b.clone(), BigInt::zero(), BigInt::one())
        } else {
            let (g, x, y) = egcd(&(b % a), a);
            let q = b / a;
            (g, y - q * &x, x)
        }
    }
    if modulus < &BigUint::from(2u32) {
        return Err(MmiError::BadModulus);
    }
    let m = BigInt::from(modulus.clone());
    let (g, x, _) = egcd(&BigInt::from(a % modulus), &m);
    if !g.is_one() {
        let gcd = if g.is_zero() { modulus.clone() } else { g.magnitude().clone() };
        return Err(MmiError::NotInvertible { index: 0, gcd });
    }
    Ok(x.mod_floor(&m).magnitude().clone())
}

/// Element-wise inverses of `values` modulo `modulus` with exactly one
/// extended-Euclidean inversion and 3(N-1) modular multiplications.
pub fn batch_mod_inverse(values: &[BigUint], modulus: &BigUint) -> Result<Vec<BigUint>, MmiError> {
    if modulus < &BigUint::from(2u32) {
        return Err(MmiError::BadModulus);
    }
    let n = values.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let reduced: Vec<BigUint> = values.iter().map(|v| v % modulus).collect();

    // prefix[i] = v0 * v1 * ... * vi
    let mut prefix = Vec::with_capacity(n);
    prefix.push(reduced[0].clone());
    for v in &reduced[1..] {
        let next = mul_mod(prefix.last().unwrap(), v, modulus);
        prefix.push(next);
    }

    let mut acc = match mod_inverse(&prefix[n - 1], modulus) {
        Ok(inv) => inv,
        Err(_) => return Err(first_non_invertible(&reduced, modulus)),
    };

    let mut out = vec![BigUint::zero(); n];
    for i in (1..n).rev() {
        out[i] = mul_mod(&acc, &prefix[i - 1], modulus);
        acc = mul_mod(&acc, &reduced[i], modulus);
    }
    out[0] = acc;
    Ok(out)
}

fn first_non_invertible(values: &[BigUint], modulus: &BigUint) -> MmiError {
    for (index, v) in values.iter().enumerate() {
        let gcd = v.gcd(modulus);
        if !gcd.is_one() {
            return MmiError::NotInvertible { index, gcd };
        }
    }
    unreachable!("product of units is a unit")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn inverse_of_twelve_mod_thirty_five() {
        assert_eq!(mod_inverse(&big(12), &big(35)).unwrap(), big(3));
        assert_eq!(naive_mod_inverse(&big(12), &big(35)).unwrap(), big(3));
    }

    #[test]
    fn inverse_of_one_is_one() {
        for m in [2u64, 3, 35, 1_000_003, 1 << 40] {
            assert_eq!(mod_inverse(&big(1), &big(m)).unwrap(), big(1));
        }
    }

    #[test]
    fn shared_factor_reports_gcd() {
        assert_eq!(
            mod_inverse(&big(5), &big(35)),
            Err(MmiError::NotInvertible { index: 0, gcd: big(5) })
        );
        assert_eq!(
            mod_inverse(&big(0), &big(35)),
            Err(MmiError::NotInvertible { index: 0, gcd: big(35) })
        );
    }

    #[test]
    fn small_batch() {
        let got = batch_mod_inverse(&[big(2), big(3), big(4)], &big(35)).unwrap();
        assert_eq!(got, vec![big(18), big(12), big(9)]);
    }

    #[test]
    fn batch_cost_model() {
        let before = MmiCounters::read();
        let values: Vec<_> = (1..=10u64).map(|v| big(v * 2 + 1)).collect();
        batch_mod_inverse(&values, &big(1_000_003)).unwrap();
        let used = before.since();
        assert_eq!(used.eea_calls, 1);
        assert_eq!(used.mod_muls, 3 * 9);
    }

    #[test]
    fn batch_identifies_first_offender() {
        let err = batch_mod_inverse(&[big(2), big(14), big(10)], &big(35)).unwrap_err();
        assert_eq!(err, MmiError::NotInvertible { index: 1, gcd: big(7) });
    }

    #[test]
    fn empty_batch_does_no_work() {
        let before = MmiCounters::read();
        assert!(batch_mod_inverse(&[], &big(35)).unwrap().is_empty());
        assert_eq!(before.since(), MmiCounters::default());
    }

    proptest! {
        #[test]
        fn batch_matches_single(values in prop::collection::vec(1u64..u64::MAX, 1..20)) {
            // 2^61 - 1 is prime, so every nonzero residue is invertible.
            let m = big((1u64 << 61) - 1);
            let vals: Vec<BigUint> = values.iter().map(|&v| big(v % ((1u64 << 61) - 2) + 1)).collect();
            let batch = batch_mod_inverse(&vals, &m).unwrap();
            for (v, inv) in vals.iter().zip(&batch) {
                prop_assert_eq!(inv, &mod_inverse(v, &m).unwrap());
                prop_assert_eq!((v * inv) % &m, big(1));
            }
        }
    }
}
