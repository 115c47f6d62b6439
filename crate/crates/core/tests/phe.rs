use std::sync::OnceLock;

use faro_core::phe::{
    batch_mod_inverse, decrypt_mantissas, encrypt_template, encrypted_difference, mod_inverse, quantize, Keypair,
    MmiCounters, MmiError, DEFAULT_SCALE,
};
use faro_core::Template;
use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn key() -> &'static Keypair {
    static KEY: OnceLock<Keypair> = OnceLock::new();
    KEY.get_or_init(|| Keypair::generate(256, &mut ChaCha8Rng::seed_from_u64(11)).unwrap())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn modn(v: i128) -> BigUint {
    BigInt::from(v).mod_floor(&BigInt::from(key().public.n.clone())).to_biguint().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ciphertext_arithmetic_matches_integers(a in any::<u64>(), b in any::<u64>(), k in any::<i64>(), seed in any::<u64>()) {
        let kp = key();
        let pk = &kp.public;
        let mut rng = rng(seed);
        let ca = pk.encrypt(&BigUint::from(a), None, &mut rng).unwrap();
        let cb = pk.encrypt(&BigUint::from(b), None, &mut rng).unwrap();
        prop_assert_eq!(kp.decrypt(&pk.add(&ca, &cb).unwrap()).unwrap(), modn(a as i128 + b as i128));
        prop_assert_eq!(kp.decrypt(&pk.scalar_mul(&ca, &BigInt::from(k)).unwrap()).unwrap(), modn(a as i128 * k as i128));
        prop_assert_eq!(kp.decrypt(&pk.sub_plain(&ca, &BigInt::from(k)).unwrap()).unwrap(), modn(a as i128 - k as i128));
        prop_assert_eq!(kp.decrypt(&pk.negate(&ca).unwrap()).unwrap(), modn(-(a as i128)));
        let fresh = pk.rerandomize(&ca, &mut rng).unwrap();
        prop_assert_ne!(&fresh.value, &ca.value);
        prop_assert_eq!(kp.decrypt(&fresh).unwrap(), kp.decrypt_textbook(&ca).unwrap());
    }

    #[test]
    fn template_differences_decrypt_to_quantized_differences(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..12),
        seed in any::<u64>(),
    ) {
        let kp = key();
        let (stored, probe): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let enc = encrypt_template(&kp.public, &Template::new(stored.clone(), "t"), DEFAULT_SCALE, &mut rng(seed)).unwrap();
        let diff = encrypted_difference(&kp.public, &enc, &Template::new(probe.clone(), "t")).unwrap();
        let got = decrypt_mantissas(kp, &diff).unwrap();
        let want: Vec<BigInt> = quantize(&stored, DEFAULT_SCALE)
            .iter()
            .zip(quantize(&probe, DEFAULT_SCALE))
            .map(|(s, p)| BigInt::from(s - p))
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn batch_inverse_agrees_with_single_inverses(values in prop::collection::vec(1u64..u64::MAX, 1..40)) {
        // a prime modulus keeps every nonzero residue invertible
        let p = BigUint::from(18_446_744_073_709_551_557u64);
        let values: Vec<BigUint> = values.into_iter().map(BigUint::from).collect();
        let before = MmiCounters::read();
        let batch = batch_mod_inverse(&values, &p).unwrap();
        prop_assert_eq!(before.since().eea_calls, 1);
        for (a, inv) in values.iter().zip(&batch) {
            prop_assert_eq!(&mod_inverse(a, &p).unwrap(), inv);
        }
    }
}

#[test]
fn key_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.json");
    key().save(&path).unwrap();
    let back = Keypair::load(&path).unwrap();
    assert_eq!(&back, key());
    let c = back.public.encrypt(&BigUint::from(42u32), None, &mut rng(1)).unwrap();
    assert_eq!(key().decrypt(&c).unwrap(), BigUint::from(42u32));
}

#[test]
fn non_invertible_batch_reports_the_element() {
    let m = BigUint::from(15u32);
    let values: Vec<BigUint> = [2u32, 4, 6, 7].into_iter().map(BigUint::from).collect();
    match batch_mod_inverse(&values, &m) {
        Err(MmiError::NotInvertible { index, gcd }) => assert_eq!((index, gcd), (2, BigUint::from(3u32))),
        other => panic!("{other:?}"),
    }
}
