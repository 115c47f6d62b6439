//! Fixed-point bridge between real-valued embeddings and the integer
//! plaintext space. The residues mod n are split in thirds: the low third
//! holds non-negative values, the high third holds negatives, and the
//! middle third is overflow.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::ToPrimitive;

use super::PheError;

/// Default fixed-point scale, 2¹⁶.
pub const DEFAULT_SCALE: u64 = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedNumber {
    pub mantissa: BigUint,
    pub scale: u64,
}

impl EncodedNumber {
    /// round(x·scale) embedded modulo n.
    pub fn encode(x: f64, scale: u64, n: &BigUint) -> Result<Self, PheError> {
        if !x.is_finite() || scale == 0 {
            return Err(PheError::Overflow { index: None });
        }
        let scaled = (x * scale as f64).round();
        if scaled.abs() >= i128::MAX as f64 {
            return Err(PheError::Overflow { index: None });
        }
        Self::from_signed(&BigInt::from(scaled as i128), scale, n)
    }

    pub fn from_signed(value: &BigInt, scale: u64, n: &BigUint) -> Result<Self, PheError> {
        if value.magnitude() * 3u32 >= *n {
            return Err(PheError::Overflow { index: None });
        }
        let mantissa = match value.sign() {
            Sign::Minus => n - value.magnitude(),
            _ => value.magnitude().clone(),
        };
        Ok(Self { mantissa, scale })
    }

    pub fn signed(&self, n: &BigUint) -> Result<BigInt, PheError> {
        signed_residue(&self.mantissa, n)
    }

    pub fn decode(&self, n: &BigUint) -> Result<f64, PheError> {
        let v = self.signed(n)?;
        Ok(v.to_f64().unwrap_or(f64::NAN) / self.scale as f64)
    }
}

/// Interprets a residue mod n under the thirds partition.
pub fn signed_residue(m: &BigUint, n: &BigUint) -> Result<BigInt, PheError> {
    let m = m % n;
    let three_m = &m * 3u32;
    if three_m < *n {
        Ok(BigInt::from_biguint(Sign::Plus, m))
    } else if three_m >= n * 2u32 {
        Ok(BigInt::from_biguint(Sign::Plus, m) - BigInt::from_biguint(Sign::Plus, n.clone()))
    } else {
        Err(PheError::Overflow { index: None })
    }
}

/// Integer mantissas of a real vector at `scale`, without modular
/// embedding. Shared by the key holder and plaintext oracles.
pub fn quantize(values: &[f64], scale: u64) -> Vec<i128> {
    values.iter().map(|&x| (x * scale as f64).round() as i128).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Zero;
    use proptest::prelude::*;

    fn modulus() -> BigUint {
        // An arbitrary large odd modulus; encoding does not need primality.
        BigUint::parse_bytes(b"340282366920938463463374607431768211507", 10).unwrap()
    }

    #[test]
    fn zero_encodes_to_zero() {
        let e = EncodedNumber::encode(0.0, DEFAULT_SCALE, &modulus()).unwrap();
        assert!(e.mantissa.is_zero());
    }

    #[test]
    fn dyadic_values_are_exact() {
        let n = modulus();
        for x in [-1.5, 1.5, -0.25, 3.0, -1024.0078125] {
            let e = EncodedNumber::encode(x, DEFAULT_SCALE, &n).unwrap();
            assert_eq!(e.decode(&n).unwrap(), x);
        }
    }

    #[test]
    fn negatives_use_upper_range() {
        let n = BigUint::from(35u32);
        let e = EncodedNumber::encode(-2.0, 1, &n).unwrap();
        assert_eq!(e.mantissa, BigUint::from(33u32));
        assert_eq!(e.signed(&n).unwrap(), BigInt::from(-2));
    }

    #[test]
    fn thirds_partition_on_toy_modulus() {
        let n = BigUint::from(35u32);
        // 3m < 35 → m <= 11 positive; 3m >= 70 → m >= 24 negative.
        assert_eq!(signed_residue(&BigUint::from(11u32), &n).unwrap(), BigInt::from(11));
        assert!(signed_residue(&BigUint::from(12u32), &n).is_err());
        assert!(signed_residue(&BigUint::from(23u32), &n).is_err());
        assert_eq!(signed_residue(&BigUint::from(24u32), &n).unwrap(), BigInt::from(-11));
        assert!(EncodedNumber::encode(12.0, 1, &n).is_err());
        assert!(EncodedNumber::encode(-12.0, 1, &n).is_err());
        assert!(EncodedNumber::encode(11.0, 1, &n).is_ok());
    }

    #[test]
    fn non_finite_is_overflow() {
        assert!(EncodedNumber::encode(f64::NAN, DEFAULT_SCALE, &modulus()).is_err());
        assert!(EncodedNumber::encode(f64::INFINITY, DEFAULT_SCALE, &modulus()).is_err());
    }

    proptest! {
        #[test]
        fn rounding_bound(x in -10.0f64..10.0) {
            let n = modulus();
            let e = EncodedNumber::encode(x, DEFAULT_SCALE, &n).unwrap();
            let back = e.decode(&n).unwrap();
            prop_assert!((back - x).abs() <= 0.5 / DEFAULT_SCALE as f64 + 1e-15);
            prop_assert_eq!(back, (x * DEFAULT_SCALE as f64).round() / DEFAULT_SCALE as f64);
        }
    }
}
