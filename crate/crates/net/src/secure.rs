//! TLS identities and channel configuration.
//!
//! Identities are self-signed certificates; a trust root file is a PEM
//! bundle of every certificate a peer is willing to accept. Sessions are
//! TLS 1.3 only.

use std::fmt;
use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rcgen::{CertificateParams, DnType, ExtendedKeyUsagePurpose, KeyPair, KeyUsagePurpose};
use rustls::pki_types::{CertificateDer, PrivateKeyDer};
use rustls::server::WebPkiClientVerifier;
use rustls::{ClientConfig, RootCertStore, ServerConfig};
use serde::{Deserialize, Serialize};

/// Certificate validity in days.
pub const VALIDITY_DAYS: i64 = 825;

#[derive(Debug, thiserror::Error)]
pub enum SecurityError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad credentials: {0}")]
    BadCredentials(String),
    #[error("tls: {0}")]
    Tls(#[from] rustls::Error),
    #[error("certificate generation: {0}")]
    Generate(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SecurityError + '_ {
    move |source| SecurityError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KeyAlgo {
    #[serde(rename = "RSA_2048")]
    Rsa2048,
    #[serde(rename = "RSA_4096")]
    Rsa4096,
    #[default]
    #[serde(rename = "ED25519")]
    Ed25519,
}

impl FromStr for KeyAlgo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "RSA_2048" | "RSA2048" => Ok(Self::Rsa2048),
            "RSA_4096" | "RSA4096" => Ok(Self::Rsa4096),
            "ED25519" => Ok(Self::Ed25519),
            other => Err(format!("unknown key algorithm {other:?} (RSA_2048, RSA_4096, ED25519)")),
        }
    }
}

impl fmt::Display for KeyAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rsa2048 => "RSA_2048",
            Self::Rsa4096 => "RSA_4096",
            Self::Ed25519 => "ED25519",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecurityConfig {
    pub enabled: bool,
    pub key_algo: KeyAlgo,
    pub cert_path: Option<PathBuf>,
    pub key_path: Option<PathBuf>,
    pub trust_root_path: Option<PathBuf>,
    pub require_client_auth: bool,
    /// Name expected in the server certificate; defaults to the host
    /// part of the endpoint being dialled.
    pub server_name: Option<String>,
}

impl SecurityConfig {
    pub fn plaintext() -> Self {
        Self::default()
    }

    pub fn tls(cert: impl Into<PathBuf>, key: impl Into<PathBuf>, trust_root: impl Into<PathBuf>) -> Self {
        Self {
            enabled: true,
            cert_path: Some(cert.into()),
            key_path: Some(key.into()),
            trust_root_path: Some(trust_root.into()),
            ..Self::default()
        }
    }

    pub fn with_client_auth(mut self, on: bool) -> Self {
        self.require_client_auth = on;
        self
    }

    fn required(&self, p: &Option<PathBuf>, what: &str) -> Result<PathBuf, SecurityError> {
        p.clone().ok_or_else(|| SecurityError::BadCredentials(format!("{what} path not set")))
    }

    /// Builds the acceptor side; `None` when security is disabled.
    pub fn server_config(&self) -> Result<Option<Arc<ServerConfig>>, SecurityError> {
        if !self.enabled {
            log::warn!("channel security disabled; sessions are plaintext");
            return Ok(None);
        }
        let certs = load_certs(&self.required(&self.cert_path, "certificate")?)?;
        let key = load_key(&self.required(&self.key_path, "key")?)?;
        let provider = provider();
        let builder = ServerConfig::builder_with_provider(provider.clone())
            .with_protocol_versions(&[&rustls::version::TLS13])?;
        let builder = if self.require_client_auth {
            let roots = load_roots(&self.required(&self.trust_root_path, "trust root")?)?;
            let verifier = WebPkiClientVerifier::builder_with_provider(Arc::new(roots), provider)
                .build()
                .map_err(|e| SecurityError::BadCredentials(e.to_string()))?;
            builder.with_client_cert_verifier(verifier)
        } else {
            builder.with_no_client_auth()
        };
        let config = builder
            .with_single_cert(certs, key)
            .map_err(|e| SecurityError::BadCredentials(format!("certificate/key: {e}")))?;
        Ok(Some(Arc::new(config)))
    }

    /// Builds the dialling side; `None` when security is disabled. The
    /// client presents its own certificate when one is configured.
    pub fn client_config(&self) -> Result<Option<Arc<ClientConfig>>, SecurityError> {
        if !self.enabled {
            log::warn!("channel security disabled; sessions are plaintext");
            return Ok(None);
        }
        let roots = load_roots(&self.required(&self.trust_root_path, "trust root")?)?;
        let builder = ClientConfig::builder_with_provider(provider())
            .with_protocol_versions(&[&rustls::version::TLS13])?
            .with_root_certificates(roots);
        let config = match (&self.cert_path, &self.key_path) {
            (Some(c), Some(k)) => builder
                .with_client_auth_cert(load_certs(c)?, load_key(k)?)
                .map_err(|e| SecurityError::BadCredentials(format!("certificate/key: {e}")))?,
            _ => builder.with_no_client_auth(),
        };
        Ok(Some(Arc::new(config)))
    }
}

fn provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

pub fn load_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>, SecurityError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let certs = rustls_pemfile::certs(&mut BufReader::new(file))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(path))?;
    if certs.is_empty() {
        return Err(SecurityError::BadCredentials(format!("no certificates in {}", path.display())));
    }
    Ok(certs)
}

pub fn load_key(path: &Path) -> Result<PrivateKeyDer<'static>, SecurityError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    rustls_pemfile::private_key(&mut BufReader::new(file))
        .map_err(io_err(path))?
        .ok_or_else(|| SecurityError::BadCredentials(format!("no private key in {}", path.display())))
}

pub fn load_roots(path: &Path) -> Result<RootCertStore, SecurityError> {
    let mut roots = RootCertStore::empty();
    for cert in load_certs(path)? {
        roots.add(cert)?;
    }
    Ok(roots)
}

/// Paths of a generated identity.
#[derive(Debug, Clone)]
pub struct Identity {
    pub cert_path: PathBuf,
    pub key_path: PathBuf,
}

/// Writes `<name>.crt.pem` and `<name>.key.pem` into `dir`: a
/// self-signed certificate with subject CN=`name`, usable for both
/// server and client authentication.
pub fn generate_identity(name: &str, algo: KeyAlgo, dir: &Path) -> Result<Identity, SecurityError> {
    let key = match algo {
        KeyAlgo::Ed25519 => KeyPair::generate_for(&rcgen::PKCS_ED25519).map_err(gen_err)?,
        KeyAlgo::Rsa2048 => rsa_key(2048)?,
        KeyAlgo::Rsa4096 => rsa_key(4096)?,
    };
    let mut sans = vec![name.to_string()];
    for extra in ["localhost", "127.0.0.1"] {
        if !sans.iter().any(|s| s == extra) {
            sans.push(extra.to_string());
        }
    }
    let mut params = CertificateParams::new(sans).map_err(gen_err)?;
    params.distinguished_name.push(DnType::CommonName, name);
    let now = time::OffsetDateTime::now_utc();
    params.not_before = now - time::Duration::minutes(5);
    params.not_after = now + time::Duration::days(VALIDITY_DAYS);
    params.key_usages = vec![KeyUsagePurpose::DigitalSignature];
    params.extended_key_usages = vec![ExtendedKeyUsagePurpose::ServerAuth, ExtendedKeyUsagePurpose::ClientAuth];
    let cert = params.self_signed(&key).map_err(gen_err)?;

    let cert_path = dir.join(format!("{name}.crt.pem"));
    let key_path = dir.join(format!("{name}.key.pem"));
    fs::write(&cert_path, cert.pem()).map_err(io_err(&cert_path))?;
    write_private(&key_path, key.serialize_pem().as_bytes())?;
    Ok(Identity { cert_path, key_path })
}

fn gen_err(e: rcgen::Error) -> SecurityError {
    SecurityError::Generate(e.to_string())
}

fn rsa_key(bits: usize) -> Result<KeyPair, SecurityError> {
    use rsa::pkcs8::{EncodePrivateKey, LineEnding};
    let key = rsa::RsaPrivateKey::new(&mut rand::rngs::OsRng, bits).map_err(|e| SecurityError::Generate(e.to_string()))?;
    let pem = key.to_pkcs8_pem(LineEnding::LF).map_err(|e| SecurityError::Generate(e.to_string()))?;
    KeyPair::from_pem_and_sign_algo(&pem, &rcgen::PKCS_RSA_SHA256).map_err(gen_err)
}

fn write_private(path: &Path, data: &[u8]) -> Result<(), SecurityError> {
    #[cfg(unix)]
    {
        use std::io::Write;
        use std::os::unix::fs::OpenOptionsExt;
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .mode(0o600)
            .open(path)
            .map_err(io_err(path))?;
        f.write_all(data).map_err(io_err(path))
    }
    #[cfg(not(unix))]
    fs::write(path, data).map_err(io_err(path))
}

/// Concatenates certificate files into one trust bundle.
pub fn write_trust_bundle(out: &Path, certs: &[&Path]) -> Result<(), SecurityError> {
    let mut bundle = String::new();
    for c in certs {
        bundle.push_str(&fs::read_to_string(c).map_err(io_err(c))?);
        if !bundle.ends_with('\n') {
            bundle.push('\n');
        }
    }
    fs::write(out, bundle).map_err(io_err(out))
}
