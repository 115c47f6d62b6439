//! Persistent template galleries.
//!
//! A plaintext gallery scores probes by cosine similarity. A PHE gallery
//! holds only the public key and encrypted templates; searching it yields
//! encrypted difference vectors that the private-key holder decrypts and
//! turns into negative L1 scores ([`finish_search`]).
//!
//! Store files (`.fgal`) are append-only logs of records framed as
//! `[u32 len][body][u64 digest]`, where the digest is the first eight bytes
//! of the body's SHA-256. The first record is a header; later records
//! enroll or delete entries. [`Gallery::persist`] rewrites the log as a
//! compacted snapshot through a temporary file and an atomic rename.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use num_bigint::BigUint;
use num_traits::{Signed, ToPrimitive};
use parking_lot::{Mutex, RwLock};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use crate::message::{
    now_micros, read_encrypted_template, read_template, write_encrypted_template, write_template, MessageError,
    Template,
};
use crate::phe::{
    add_templates, decrypt_mantissas, encrypt_template, encrypted_difference, negate_template, EncryptedTemplate,
    Keypair, PheError, PublicKey, DEFAULT_SCALE,
};
use crate::wire::{Reader, WireError, Writer};
use crate::worker::cosine;

pub const STORE_EXTENSION: &str = "fgal";
const STORE_MAGIC: &[u8; 8] = b"FGAL\x01\0\0\0";
const REC_HEADER: u8 = 1;
const REC_ENROLL: u8 = 2;
const REC_DELETE: u8 = 3;

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("dimension mismatch: gallery holds {expected}-dim templates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no private key holder is available for this encrypted gallery")]
    KeyHolderUnavailable,
    #[error("corrupt gallery store: {0}")]
    CorruptStore(String),
    #[error("storage error: {0}")]
    Storage(#[from] io::Error),
    #[error("{0}")]
    WrongTemplateKind(String),
    #[error(transparent)]
    Phe(#[from] PheError),
}

impl From<WireError> for GalleryError {
    fn from(e: WireError) -> Self {
        GalleryError::CorruptStore(e.0)
    }
}

impl From<MessageError> for GalleryError {
    fn from(e: MessageError) -> Self {
        GalleryError::CorruptStore(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backend {
    Plain,
    Phe { public: PublicKey, scale: u64 },
}

impl Backend {
    pub fn phe(public: PublicKey) -> Self {
        Backend::Phe { public, scale: DEFAULT_SCALE }
    }

    pub fn is_encrypted(&self) -> bool {
        matches!(self, Backend::Phe { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTemplate {
    Plain(Template),
    Encrypted(EncryptedTemplate),
}

impl StoredTemplate {
    pub fn dims(&self) -> usize {
        match self {
            StoredTemplate::Plain(t) => t.dims(),
            StoredTemplate::Encrypted(t) => t.dims(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub entry_id: Uuid,
    pub subject_id: String,
    pub template: StoredTemplate,
    pub modality: String,
    /// Microseconds since the Unix epoch.
    pub enrolled_at: i64,
    pub source_meta: BTreeMap<String, String>,
}

/// Listing view of an entry, without the template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntrySummary {
    pub entry_id: Uuid,
    pub subject_id: String,
    pub modality: String,
    pub enrolled_at: i64,
    pub encrypted: bool,
    pub source_meta: BTreeMap<String, String>,
}

impl From<&GalleryEntry> for EntrySummary {
    fn from(e: &GalleryEntry) -> Self {
        Self {
            entry_id: e.entry_id,
            subject_id: e.subject_id.clone(),
            modality: e.modality.clone(),
            enrolled_at: e.enrolled_at,
            encrypted: matches!(e.template, StoredTemplate::Encrypted(_)),
            source_meta: e.source_meta.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoreKind {
    Cosine,
    NegL1,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub subject_id: String,
    pub entry_id: Uuid,
    pub score: f64,
}

/// Hits in non-increasing score order, ties broken by entry id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
    pub score_kind: ScoreKind,
}

/// One gallery entry's encrypted difference from the probe, as handed to
/// the key holder. Entry order within `diff` is shuffled per entry; L1 is
/// unaffected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub entry_id: Uuid,
    pub subject_id: String,
    pub diff: EncryptedTemplate,
}

/// Probe forms accepted by an encrypted gallery.
#[derive(Debug, Clone)]
pub enum Probe<'a> {
    Plain(&'a Template),
    /// Encrypted under the gallery's key; the service never sees it in the clear.
    Encrypted(&'a EncryptedTemplate),
}

pub enum Selector {
    Entry(Uuid),
    Subject(String),
}

struct State {
    dims: Option<usize>,
    entries: BTreeMap<(i64, Uuid), GalleryEntry>,
}

pub struct Gallery {
    name: String,
    backend: Backend,
    state: RwLock<State>,
    store: Mutex<Option<Store>>,
}

struct Store {
    path: PathBuf,
    file: File,
}

impl std::fmt::Debug for Gallery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gallery").field("name", &self.name).field("len", &self.len()).finish()
    }
}

impl Gallery {
    /// An in-memory gallery.
    pub fn new(name: &str, backend: Backend) -> Self {
        Self {
            name: name.into(),
            backend,
            state: RwLock::new(State { dims: None, entries: BTreeMap::new() }),
            store: Mutex::new(None),
        }
    }

    /// Loads `path` if it exists, otherwise creates it. An existing store
    /// must use the same backend.
    pub fn open(name: &str, backend: Backend, path: &Path) -> Result<Self, GalleryError> {
        if path.exists() {
            let g = Self::load(path)?;
            if g.backend != backend {
                return Err(GalleryError::CorruptStore(format!(
                    "{} was created with a different backend or key",
                    path.display()
                )));
            }
            return Ok(g);
        }
        let g = Self::new(name, backend);
        g.persist_to(path)?;
        Ok(g)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn dims(&self) -> Option<usize> {
        self.state.read().dims
    }

    pub fn len(&self) -> usize {
        self.state.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.store.lock().as_ref().map(|s| s.path.clone())
    }

    pub fn entries(&self) -> Vec<GalleryEntry> {
        self.state.read().entries.values().cloned().collect()
    }

    /// Adds a template. Plain templates enrolled into an encrypted gallery
    /// are encrypted here and not retained.
    pub fn enroll(
        &self,
        subject_id: &str,
        template: StoredTemplate,
        source_meta: BTreeMap<String, String>,
    ) -> Result<Uuid, GalleryError> {
        let template = match (&self.backend, template) {
            (Backend::Plain, StoredTemplate::Plain(t)) => {
                t.validate().map_err(|e| GalleryError::WrongTemplateKind(e.to_string()))?;
                StoredTemplate::Plain(t)
            }
            (Backend::Plain, StoredTemplate::Encrypted(_)) => {
                return Err(GalleryError::WrongTemplateKind("plaintext gallery cannot store encrypted templates".into()))
            }
            (Backend::Phe { public, scale }, StoredTemplate::Plain(t)) => {
                t.validate().map_err(|e| GalleryError::WrongTemplateKind(e.to_string()))?;
                StoredTemplate::Encrypted(encrypt_template(public, &t, *scale, &mut rand::thread_rng())?)
            }
            (Backend::Phe { public, scale }, StoredTemplate::Encrypted(t)) => {
                if t.key_id != public.key_id || !t.is_consistent() || t.ciphertexts.is_empty() {
                    return Err(PheError::KeyMismatch.into());
                }
                if t.scale != *scale {
                    return Err(PheError::ScaleMismatch { left: *scale, right: t.scale }.into());
                }
                StoredTemplate::Encrypted(t)
            }
        };
        let modality = match &template {
            StoredTemplate::Plain(t) => t.modality.clone(),
            StoredTemplate::Encrypted(t) => t.modality.clone(),
        };
        let mut state = self.state.write();
        if let Some(expected) = state.dims {
            if expected != template.dims() {
                return Err(GalleryError::DimensionMismatch { expected, got: template.dims() });
            }
        }
        let last = state.entries.keys().next_back().map_or(i64::MIN, |k| k.0);
        let entry = GalleryEntry {
            entry_id: Uuid::new_v4(),
            subject_id: subject_id.into(),
            template,
            modality,
            enrolled_at: now_micros().max(last),
            source_meta,
        };
        let mut body = Writer::new();
        body.u8(REC_ENROLL);
        write_entry(&mut body, &entry);
        self.append(body.as_bytes())?;
        let id = entry.entry_id;
        state.dims.get_or_insert(entry.template.dims());
        state.entries.insert((entry.enrolled_at, id), entry);
        Ok(id)
    }

    pub fn delete(&self, selector: &Selector) -> Result<usize, GalleryError> {
        let mut state = self.state.write();
        let doomed: Vec<(i64, Uuid)> = state
            .entries
            .iter()
            .filter(|(_, e)| match selector {
                Selector::Entry(id) => e.entry_id == *id,
                Selector::Subject(s) => &e.subject_id == s,
            })
            .map(|(k, _)| *k)
            .collect();
        for key in &doomed {
            let mut body = Writer::new();
            body.u8(REC_DELETE).raw(key.1.as_bytes());
            self.append(body.as_bytes())?;
            state.entries.remove(key);
        }
        Ok(doomed.len())
    }

    /// One page of entries ordered by enrollment time then entry id, and
    /// the total entry count.
    pub fn list_entries(&self, page: usize, page_size: usize) -> (Vec<EntrySummary>, usize) {
        let state = self.state.read();
        let items = state
            .entries
            .values()
            .skip(page.saturating_mul(page_size))
            .take(page_size)
            .map(EntrySummary::from)
            .collect();
        (items, state.entries.len())
    }

    fn check_dims(&self, dims: Option<usize>, got: usize) -> Result<(), GalleryError> {
        match dims {
            Some(expected) if expected != got => Err(GalleryError::DimensionMismatch { expected, got }),
            _ => Ok(()),
        }
    }

    /// Cosine search of a plaintext gallery. For an encrypted gallery,
    /// `key_holder` must be supplied to finish the scores.
    pub fn search(
        &self,
        probe: &Template,
        top_k: usize,
        key_holder: Option<&Keypair>,
    ) -> Result<SearchResult, GalleryError> {
        match &self.backend {
            Backend::Plain => {
                let state = self.state.read();
                self.check_dims(state.dims, probe.dims())?;
                let mut hits: Vec<SearchHit> = state
                    .entries
                    .values()
                    .map(|e| {
                        let StoredTemplate::Plain(t) = &e.template else { unreachable!("plain gallery") };
                        SearchHit {
                            subject_id: e.subject_id.clone(),
                            entry_id: e.entry_id,
                            score: cosine(&t.vector, &probe.vector),
                        }
                    })
                    .collect();
                hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry_id.cmp(&b.entry_id)));
                hits.truncate(top_k);
                Ok(SearchResult { hits, score_kind: ScoreKind::Cosine })
            }
            Backend::Phe { .. } => {
                let kp = key_holder.ok_or(GalleryError::KeyHolderUnavailable)?;
                let candidates = self.encrypted_candidates(Probe::Plain(probe))?;
                finish_search(kp, &candidates, top_k)
            }
        }
    }

    /// Matcher side of an encrypted search: the encrypted difference of
    /// every entry from the probe. An encrypted probe is negated with one
    /// batched inversion and added to each entry.
    pub fn encrypted_candidates(&self, probe: Probe<'_>) -> Result<Vec<Candidate>, GalleryError> {
        let Backend::Phe { public, scale } = &self.backend else {
            return Err(GalleryError::WrongTemplateKind("plaintext gallery has no encrypted search".into()));
        };
        let state = self.state.read();
        let negated = match probe {
            Probe::Plain(t) => {
                self.check_dims(state.dims, t.dims())?;
                None
            }
            Probe::Encrypted(t) => {
                self.check_dims(state.dims, t.dims())?;
                if t.scale != *scale {
                    return Err(PheError::ScaleMismatch { left: *scale, right: t.scale }.into());
                }
                Some(negate_template(public, t)?)
            }
        };
        let mut rng = rand::thread_rng();
        let mut out = Vec::with_capacity(state.entries.len());
        for e in state.entries.values() {
            let StoredTemplate::Encrypted(stored) = &e.template else { unreachable!("encrypted gallery") };
            let mut diff = match (&probe, &negated) {
                (_, Some(neg)) => add_templates(public, stored, neg)?,
                (Probe::Plain(t), None) => encrypted_difference(public, stored, t)?,
                (Probe::Encrypted(_), None) => unreachable!(),
            };
            diff.ciphertexts.shuffle(&mut rng);
            diff.subject_id = None;
            out.push(Candidate { entry_id: e.entry_id, subject_id: e.subject_id.clone(), diff });
        }
        Ok(out)
    }

    /// Writes a compacted snapshot to `path` and appends there from now on.
    pub fn persist_to(&self, path: &Path) -> Result<(), GalleryError> {
        let state = self.state.read();
        let mut store = self.store.lock();
        let tmp = path.with_extension(format!("{STORE_EXTENSION}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            let mut buf = STORE_MAGIC.to_vec();
            let mut header = Writer::new();
            header.u8(REC_HEADER);
            write_header(&mut header, &self.name, &self.backend, state.dims);
            frame_record(&mut buf, header.as_bytes());
            for e in state.entries.values() {
                let mut body = Writer::new();
                body.u8(REC_ENROLL);
                write_entry(&mut body, e);
                frame_record(&mut buf, body.as_bytes());
            }
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        *store = Some(Store { path: path.to_path_buf(), file });
        Ok(())
    }

    /// Compacts the backing store, if any.
    pub fn persist(&self) -> Result<(), GalleryError> {
        match self.path() {
            Some(path) => self.persist_to(&path),
            None => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, GalleryError> {
        let bytes = fs::read(path)?;
        if bytes.len() < STORE_MAGIC.len() || &bytes[..STORE_MAGIC.len()] != STORE_MAGIC {
            return Err(GalleryError::CorruptStore("bad magic".into()));
        }
        let mut r = Reader::new(&bytes[STORE_MAGIC.len()..]);
        let mut gallery: Option<Gallery> = None;
        while !r.is_empty() {
            let len = r.u32().map_err(|_| GalleryError::CorruptStore("truncated record length".into()))? as usize;
            let body = r.take(len).map_err(|_| GalleryError::CorruptStore("truncated record".into()))?;
            let digest = r.u64().map_err(|_| GalleryError::CorruptStore("truncated digest".into()))?;
            if digest != body_digest(body) {
                return Err(GalleryError::CorruptStore("record digest mismatch".into()));
            }
            let mut b = Reader::new(body);
            match (b.u8()?, &gallery) {
                (REC_HEADER, None) => {
                    let (name, backend, dims) = read_header(&mut b)?;
                    let g = Gallery::new(&name, backend);
                    g.state.write().dims = dims;
                    gallery = Some(g);
                }
                (REC_ENROLL, Some(g)) => {
                    let e = read_entry(&mut b)?;
                    let mut st = g.state.write();
                    st.dims.get_or_insert(e.template.dims());
                    st.entries.insert((e.enrolled_at, e.entry_id), e);
                }
                (REC_DELETE, Some(g)) => {
                    let id = Uuid::from_bytes(b.array::<16>()?);
                    g.state.write().entries.retain(|_, e| e.entry_id != id);
                }
                (kind, _) => return Err(GalleryError::CorruptStore(format!("unexpected record type {kind}"))),
            }
            b.finish()?;
        }
        let g = gallery.ok_or_else(|| GalleryError::CorruptStore("missing header".into()))?;
        let file = OpenOptions::new().append(true).open(path)?;
        *g.store.lock() = Some(Store { path: path.to_path_buf(), file });
        Ok(g)
    }

    fn append(&self, body: &[u8]) -> Result<(), GalleryError> {
        if let Some(store) = self.store.lock().as_mut() {
            let mut buf = Vec::with_capacity(body.len() + 12);
            frame_record(&mut buf, body);
            store.file.write_all(&buf)?;
            store.file.flush()?;
        }
        Ok(())
    }
}

/// Key-holder side of an encrypted search: decrypt each difference vector,
/// score it by negative L1 distance at the template scale and rank.
pub fn finish_search(kp: &Keypair, candidates: &[Candidate], top_k: usize) -> Result<SearchResult, GalleryError> {
    let mut scored: Vec<(BigUint, f64, &Candidate)> = Vec::with_capacity(candidates.len());
    for c in candidates {
        let l1: BigUint = decrypt_mantissas(kp, &c.diff)?.iter().map(|d| d.abs().magnitude().clone()).sum();
        let magnitude = l1.to_f64().unwrap_or(f64::INFINITY) / c.diff.scale as f64;
        let score = if magnitude == 0.0 { 0.0 } else { -magnitude };
        scored.push((l1, score, c));
    }
    scored.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.entry_id.cmp(&b.2.entry_id)));
    let hits = scored
        .into_iter()
        .take(top_k)
        .map(|(_, score, c)| SearchHit { subject_id: c.subject_id.clone(), entry_id: c.entry_id, score })
        .collect();
    Ok(SearchResult { hits, score_kind: ScoreKind::NegL1 })
}

/// Wire form of a candidate list, used between matcher and key holder.
pub fn encode_candidates(candidates: &[Candidate]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(candidates.len() as u32);
    for c in candidates {
        w.raw(c.entry_id.as_bytes()).str(&c.subject_id);
        write_encrypted_template(&mut w, &c.diff);
    }
    w.into_bytes()
}

pub fn decode_candidates(data: &[u8]) -> Result<Vec<Candidate>, MessageError> {
    let mut r = Reader::new(data);
    let n = r.count(16 + 4 + 32)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let entry_id = Uuid::from_bytes(r.array::<16>()?);
        let subject_id = r.str()?;
        let diff = read_encrypted_template(&mut r)?;
        out.push(Candidate { entry_id, subject_id, diff });
    }
    r.finish()?;
    Ok(out)
}

fn body_digest(body: &[u8]) -> u64 {
    let d = Sha256::digest(body);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn frame_record(buf: &mut Vec<u8>, body: &[u8]) {
    buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
    buf.extend_from_slice(body);
    buf.extend_from_slice(&body_digest(body).to_le_bytes());
}

fn write_header(w: &mut Writer, name: &str, backend: &Backend, dims: Option<usize>) {
    w.str(name).u32(dims.unwrap_or(0) as u32);
    match backend {
        Backend::Plain => {
            w.u8(0);
        }
        Backend::Phe { public, scale } => {
            w.u8(1).bytes(&public.n.to_bytes_be()).u64(*scale);
        }
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<(String, Backend, Option<usize>), GalleryError> {
    let name = r.str()?;
    let dims = match r.u32()? {
        0 => None,
        d => Some(d as usize),
    };
    let backend = match r.u8()? {
        0 => Backend::Plain,
        1 => {
            let n = BigUint::from_bytes_be(r.bytes()?);
            Backend::Phe { public: PublicKey::from_modulus(n), scale: r.u64()? }
        }
        other => return Err(GalleryError::CorruptStore(format!("unknown backend {other}"))),
    };
    Ok((name, backend, dims))
}

fn write_entry(w: &mut Writer, e: &GalleryEntry) {
    w.raw(e.entry_id.as_bytes()).str(&e.subject_id).str(&e.modality).i64(e.enrolled_at);
    w.u32(e.source_meta.len() as u32);
    for (k, v) in &e.source_meta {
        w.str(k).str(v);
    }
    match &e.template {
        StoredTemplate::Plain(t) => {
            w.u8(0);
            write_template(w, t);
        }
        StoredTemplate::Encrypted(t) => {
            w.u8(1);
            write_encrypted_template(w, t);
        }
    }
}

fn read_entry(r: &mut Reader<'_>) -> Result<GalleryEntry, GalleryError> {
    let entry_id = Uuid::from_bytes(r.array::<16>()?);
    let subject_id = r.str()?;
    let modality = r.str()?;
    let enrolled_at = r.i64()?;
    let n = r.count(8)?;
    let mut source_meta = BTreeMap::new();
    for _ in 0..n {
        source_meta.insert(r.str()?, r.str()?);
    }
    let template = match r.u8()? {
        0 => StoredTemplate::Plain(read_template(r)?),
        1 => StoredTemplate::Encrypted(read_encrypted_template(r)?),
        other => return Err(GalleryError::CorruptStore(format!("unknown template kind {other}"))),
    };
    Ok(GalleryEntry { entry_id, subject_id, template, modality, enrolled_at, source_meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn keypair() -> Keypair {
        Keypair::generate(256, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    fn random_template(rng: &mut impl Rng, d: usize) -> Template {
        Template::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(), "test")
    }

    fn plain(t: &Template) -> StoredTemplate {
        StoredTemplate::Plain(t.clone())
    }

    #[test]
    fn first_enrollment_fixes_dims() {
        let g = Gallery::new("g", Backend::Plain);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        g.enroll("a", plain(&random_template(&mut rng, 64)), BTreeMap::new()).unwrap();
        assert_eq!(g.dims(), Some(64));
        let err = g.enroll("b", plain(&random_template(&mut rng, 32)), BTreeMap::new()).unwrap_err();
        assert!(matches!(err, GalleryError::DimensionMismatch { expected: 64, got: 32 }));
    }

    #[test]
    fn delete_by_entry_and_subject() {
        let g = Gallery::new("g", Backend::Plain);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let id = g.enroll("a", plain(&random_template(&mut rng, 4)), BTreeMap::new()).unwrap();
        for _ in 0..3 {
            g.enroll("b", plain(&random_template(&mut rng, 4)), BTreeMap::new()).unwrap();
        }
        assert_eq!(g.delete(&Selector::Entry(id)).unwrap(), 1);
        assert_eq!(g.delete(&Selector::Entry(Uuid::new_v4())).unwrap(), 0);
        assert_eq!(g.delete(&Selector::Subject("b".into())).unwrap(), 3);
        assert!(g.is_empty());
    }

    #[test]
    fn paging() {
        let g = Gallery::new("g", Backend::Plain);
        assert_eq!(g.list_entries(0, 2).1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in ["a", "b", "c"] {
            g.enroll(s, plain(&random_template(&mut rng, 4)), BTreeMap::new()).unwrap();
        }
        let (p0, total) = g.list_entries(0, 2);
        let (p1, _) = g.list_entries(1, 2);
        assert_eq!((p0.len(), p1.len(), total), (2, 1, 3));
        let subjects: Vec<_> = p0.iter().chain(&p1).map(|e| e.subject_id.as_str()).collect();
        assert_eq!(subjects, vec!["a", "b", "c"]);
    }

    #[test]
    fn plain_self_match() {
        let g = Gallery::new("g", Backend::Plain);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ts: Vec<_> = (0..5).map(|_| random_template(&mut rng, 16)).collect();
        for (i, t) in ts.iter().enumerate() {
            g.enroll(&format!("s{i}"), plain(t), BTreeMap::new()).unwrap();
        }
        let r = g.search(&ts[3], 3, None).unwrap();
        assert_eq!(r.hits.len(), 3);
        assert_eq!(r.hits[0].subject_id, "s3");
        assert!((r.hits[0].score - 1.0).abs() < 1e-9);
        assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn phe_requires_key_holder() {
        let kp = keypair();
        let g = Gallery::new("g", Backend::phe(kp.public.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_template(&mut rng, 8);
        g.enroll("a", plain(&t), BTreeMap::new()).unwrap();
        assert!(matches!(g.search(&t, 1, None), Err(GalleryError::KeyHolderUnavailable)));
        let r = g.search(&t, 1, Some(&kp)).unwrap();
        assert_eq!(r.hits[0].score, 0.0);
        assert!(r.hits[0].score.is_sign_positive());
    }

    #[test]
    fn encrypted_probe_matches_plain_probe() {
        let kp = keypair();
        let g = Gallery::new("g", Backend::phe(kp.public.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..6 {
            g.enroll(&format!("s{i}"), plain(&random_template(&mut rng, 8)), BTreeMap::new()).unwrap();
        }
        let probe = random_template(&mut rng, 8);
        let by_plain = g.search(&probe, 6, Some(&kp)).unwrap();
        let enc = encrypt_template(&kp.public, &probe, DEFAULT_SCALE, &mut rng).unwrap();
        let cands = g.encrypted_candidates(Probe::Encrypted(&enc)).unwrap();
        let cands = decode_candidates(&encode_candidates(&cands)).unwrap();
        let by_enc = finish_search(&kp, &cands, 6).unwrap();
        assert_eq!(by_plain, by_enc);
    }

    #[test]
    fn persist_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.fgal");
        let g = Gallery::open("g", Backend::Plain, &path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut meta = BTreeMap::new();
        meta.insert("camera".to_string(), "3".to_string());
        let id = g.enroll("a", plain(&random_template(&mut rng, 4)), meta).unwrap();
        g.enroll("b", plain(&random_template(&mut rng, 4)), BTreeMap::new()).unwrap();
        g.enroll("c", plain(&random_template(&mut rng, 4)), BTreeMap::new()).unwrap();
        g.delete(&Selector::Entry(id)).unwrap();

        let reloaded = Gallery::load(&path).unwrap();
        assert_eq!(reloaded.entries(), g.entries());
        assert_eq!(reloaded.list_entries(0, 10), g.list_entries(0, 10));

        g.persist().unwrap();
        assert_eq!(Gallery::load(&path).unwrap().entries(), g.entries());

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(Gallery::load(&path), Err(GalleryError::CorruptStore(_))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 20;
        flipped[last] ^= 0xff;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(Gallery::load(&path), Err(GalleryError::CorruptStore(_))));
    }

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.fgal");
        let kp = keypair();
        let g = Gallery::open("e", Backend::phe(kp.public.clone()), &path).unwrap();
        assert!(g.is_empty());
        let back = Gallery::load(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.backend(), g.backend());
        assert!(Gallery::open("e", Backend::Plain, &path).is_err());
    }
}
