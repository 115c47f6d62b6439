//! Encrypted templates and the vector operations used by encrypted search.

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Signed, Zero};
use rand::RngCore;

use super::cipher::PheCiphertext;
use super::encoding::{signed_residue, EncodedNumber};
use super::keys::{KeyId, Keypair, PublicKey};
use super::mmi::batch_mod_inverse;
use super::PheError;
use crate::message::Template;

/// A template whose entries are Paillier ciphertexts sharing one key and
/// one fixed-point scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedTemplate {
    pub ciphertexts: Vec<PheCiphertext>,
    pub key_id: KeyId,
    pub scale: u64,
    pub modality: String,
    pub subject_id: Option<String>,
}

impl EncryptedTemplate {
    pub fn dims(&self) -> usize {
        self.ciphertexts.len()
    }

    /// True when every ciphertext carries the template's key and scale.
    pub fn is_consistent(&self) -> bool {
        self.ciphertexts.iter().all(|c| c.key_id == self.key_id && c.scale == self.scale)
    }

    fn check_against(&self, pk: &PublicKey) -> Result<(), PheError> {
        if self.key_id != pk.key_id || !self.is_consistent() {
            return Err(PheError::KeyMismatch);
        }
        Ok(())
    }
}

/// Encodes every entry at `scale`, reporting the first index that does not fit.
pub fn encode_vector(pk: &PublicKey, values: &[f64], scale: u64) -> Result<Vec<EncodedNumber>, PheError> {
    values
        .iter()
        .enumerate()
        .map(|(i, &x)| EncodedNumber::encode(x, scale, &pk.n).map_err(|_| PheError::Overflow { index: Some(i) }))
        .collect()
}

/// Encrypts a plaintext template entry by entry. Blinding factors are
/// produced in one batch before the plaintexts are folded in.
pub fn encrypt_template<R: RngCore + ?Sized>(
    pk: &PublicKey,
    template: &Template,
    scale: u64,
    rng: &mut R,
) -> Result<EncryptedTemplate, PheError> {
    let encoded = encode_vector(pk, &template.vector, scale)?;
    let factors = pk.blinding_factors(encoded.len(), rng);
    let ciphertexts = encoded
        .iter()
        .zip(&factors)
        .map(|(e, f)| pk.encrypt_with_factor(&e.mantissa, f, scale))
        .collect();
    Ok(EncryptedTemplate {
        ciphertexts,
        key_id: pk.key_id,
        scale,
        modality: template.modality.clone(),
        subject_id: template.subject_id.clone(),
    })
}

/// Signed integer plaintexts of every entry.
pub fn decrypt_mantissas(kp: &Keypair, enc: &EncryptedTemplate) -> Result<Vec<BigInt>, PheError> {
    enc.check_against(&kp.public)?;
    enc.ciphertexts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let m = kp.decrypt(c)?;
            signed_residue(&m, &kp.public.n).map_err(|_| PheError::Overflow { index: Some(i) })
        })
        .collect()
}

pub fn decrypt_template(kp: &Keypair, enc: &EncryptedTemplate) -> Result<Template, PheError> {
    let scale = enc.scale as f64;
    let vector = decrypt_mantissas(kp, enc)?
        .into_iter()
        .map(|m| num_traits::ToPrimitive::to_f64(&m).unwrap_or(f64::NAN) / scale)
        .collect();
    Ok(Template { vector, modality: enc.modality.clone(), subject_id: enc.subject_id.clone() })
}

fn check_dims(expected: usize, got: usize) -> Result<(), PheError> {
    if expected != got {
        return Err(PheError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Enc(Σ gᵢ·pᵢ) over the encoded integers, at scale S². Entries with a
/// negative probe coefficient are inverted in one batch and raised to |pᵢ|.
pub fn encrypted_inner_product(
    pk: &PublicKey,
    enc: &EncryptedTemplate,
    probe: &Template,
) -> Result<PheCiphertext, PheError> {
    enc.check_against(pk)?;
    check_dims(enc.dims(), probe.vector.len())?;
    let coeffs: Vec<BigInt> = encode_vector(pk, &probe.vector, enc.scale)?
        .iter()
        .map(|e| e.signed(&pk.n))
        .collect::<Result<_, _>>()?;

    let max = coeffs.iter().map(|c| c.abs()).max().unwrap_or_default();
    let bound = BigInt::from(coeffs.len()) * &max * &max * 3u32;
    if bound >= BigInt::from(pk.n.clone()) {
        return Err(PheError::Overflow { index: None });
    }

    let negative: Vec<usize> = (0..coeffs.len()).filter(|&i| coeffs[i].is_negative()).collect();
    let to_invert: Vec<BigUint> = negative.iter().map(|&i| enc.ciphertexts[i].value.clone()).collect();
    let inverted = batch_mod_inverse(&to_invert, &pk.n_squared)?;
    let mut inverse_of = vec![None; coeffs.len()];
    for (slot, inv) in negative.iter().zip(inverted) {
        inverse_of[*slot] = Some(inv);
    }

    let mut acc = BigUint::one();
    for (i, k) in coeffs.iter().enumerate() {
        if k.is_zero() {
            continue;
        }
        let base = inverse_of[i].as_ref().unwrap_or(&enc.ciphertexts[i].value);
        acc = (acc * base.modpow(k.magnitude(), &pk.n_squared)) % &pk.n_squared;
    }
    Ok(PheCiphertext { value: acc, key_id: pk.key_id, scale: enc.scale.saturating_mul(enc.scale) })
}

/// Element-wise Enc(encode(gᵢ) - encode(pᵢ)) against a plaintext probe.
pub fn encrypted_difference(
    pk: &PublicKey,
    enc: &EncryptedTemplate,
    probe: &Template,
) -> Result<EncryptedTemplate, PheError> {
    enc.check_against(pk)?;
    check_dims(enc.dims(), probe.vector.len())?;
    let encoded = encode_vector(pk, &probe.vector, enc.scale)?;
    let ciphertexts = enc
        .ciphertexts
        .iter()
        .zip(&encoded)
        .map(|(c, e)| pk.sub_plain(c, &BigInt::from(e.mantissa.clone())))
        .collect::<Result<_, _>>()?;
    Ok(EncryptedTemplate { ciphertexts, ..enc.clone() })
}

/// Enc(-pᵢ) for every entry, computed with one batched inversion.
pub fn negate_template(pk: &PublicKey, enc: &EncryptedTemplate) -> Result<EncryptedTemplate, PheError> {
    enc.check_against(pk)?;
    let ciphertexts = pk.negate_batch(&enc.ciphertexts)?;
    Ok(EncryptedTemplate { ciphertexts, ..enc.clone() })
}

/// Element-wise homomorphic sum, e.g. a gallery template plus a negated
/// encrypted probe.
pub fn add_templates(
    pk: &PublicKey,
    a: &EncryptedTemplate,
    b: &EncryptedTemplate,
) -> Result<EncryptedTemplate, PheError> {
    a.check_against(pk)?;
    b.check_against(pk)?;
    check_dims(a.dims(), b.dims())?;
    if a.scale != b.scale {
        return Err(PheError::ScaleMismatch { left: a.scale, right: b.scale });
    }
    let ciphertexts = a
        .ciphertexts
        .iter()
        .zip(&b.ciphertexts)
        .map(|(x, y)| pk.add(x, y))
        .collect::<Result<_, _>>()?;
    Ok(EncryptedTemplate { ciphertexts, ..a.clone() })
}
