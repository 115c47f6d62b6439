//! Record/reply envelopes and their canonical binary encoding.
//!
//! Every message opens with the magic `FAR2`, a kind byte (1 = record,
//! 2 = reply) and a 32-bit little-endian body length, so messages are
//! self-delimiting on a byte stream. The body is a fixed sequence of
//! tag/length/value fields:
//!
//! | tag  | record field     | reply field        |
//! |------|------------------|--------------------|
//! | 0x01 | record_id        | record_id          |
//! | 0x02 | sequence_no      |                    |
//! | 0x03 | source_id        |                    |
//! | 0x04 | timestamp (µs)   |                    |
//! | 0x05 | target           |                    |
//! | 0x06 | payload          | payload            |
//! | 0x07 | options          |                    |
//! | 0x10 |                  | status             |
//! | 0x11 |                  | stage_timings      |
//! | 0x12 |                  | error (if present) |
//!
//! Payloads start with a variant tag followed by the variant body.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine as _;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::phe::{EncryptedTemplate, KeyId, PheCiphertext};
use crate::wire::{Reader, WireError, Writer};

pub const MAGIC: &[u8; 4] = b"FAR2";
const KIND_RECORD: u8 = 1;
const KIND_REPLY: u8 = 2;
const HEADER_LEN: usize = 4 + 1 + 4;

/// Ordered option map carried by records.
pub type Options = BTreeMap<String, String>;

/// Option key holding the comma-separated list of services a record has
/// been forwarded through.
pub const HOPS_OPTION: &str = "faro.hops";
/// Option key carrying the pipeline input frame to downstream stages.
pub const ORIGIN_FRAME_OPTION: &str = "origin_frame";
/// Content type of a [`Payload::Generic`] that bundles named payloads.
pub const BUNDLE_CONTENT_TYPE: &str = "application/x-faro-bundle";

/// Error codes carried in [`ReplyError::code`].
pub mod codes {
    pub const INPUT_KIND: &str = "INPUT_KIND";
    pub const UNKNOWN_TARGET: &str = "UNKNOWN_TARGET";
    pub const PEER_UNAVAILABLE: &str = "PEER_UNAVAILABLE";
    pub const LOOP_DETECTED: &str = "LOOP_DETECTED";
    pub const MALFORMED: &str = "MALFORMED";
    pub const PANIC: &str = "PANIC";
    pub const INVALID_OPTIONS: &str = "INVALID_OPTIONS";
    pub const GALLERY: &str = "GALLERY";
    pub const SESSION: &str = "SESSION";
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("malformed message: {0}")]
    Malformed(String),
}

impl From<WireError> for MessageError {
    fn from(e: WireError) -> Self {
        MessageError::Malformed(e.0)
    }
}

pub fn now_micros() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as i64).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PixelFormat {
    Gray8,
    Rgb24,
}

impl PixelFormat {
    pub fn bytes_per_pixel(self) -> usize {
        match self {
            PixelFormat::Gray8 => 1,
            PixelFormat::Rgb24 => 3,
        }
    }

    fn code(self) -> u8 {
        match self {
            PixelFormat::Gray8 => 1,
            PixelFormat::Rgb24 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, MessageError> {
        match code {
            1 => Ok(PixelFormat::Gray8),
            2 => Ok(PixelFormat::Rgb24),
            other => Err(MessageError::Malformed(format!("unknown pixel format {other}"))),
        }
    }
}

/// Raw image, row-major without padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub pixel_format: PixelFormat,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: u32, height: u32, pixel_format: PixelFormat, data: Vec<u8>) -> Result<Self, MessageError> {
        let frame = Self { width, height, pixel_format, data };
        frame.validate()?;
        Ok(frame)
    }

    pub fn gray(width: u32, height: u32, data: Vec<u8>) -> Result<Self, MessageError> {
        Self::new(width, height, PixelFormat::Gray8, data)
    }

    pub fn expected_len(&self) -> usize {
        self.width as usize * self.height as usize * self.pixel_format.bytes_per_pixel()
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        if self.data.len() != self.expected_len() {
            return Err(MessageError::InvariantViolation(format!(
                "frame {}x{} {:?} needs {} bytes, has {}",
                self.width,
                self.height,
                self.pixel_format,
                self.expected_len(),
                self.data.len()
            )));
        }
        Ok(())
    }

    /// Intensity at (x, y); RGB pixels use integer Rec.601 luma.
    pub fn luma(&self, x: u32, y: u32) -> u8 {
        let idx = y as usize * self.width as usize + x as usize;
        match self.pixel_format {
            PixelFormat::Gray8 => self.data[idx],
            PixelFormat::Rgb24 => {
                let p = &self.data[idx * 3..idx * 3 + 3];
                ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32) / 1000) as u8
            }
        }
    }

    pub fn to_gray(&self) -> Vec<u8> {
        match self.pixel_format {
            PixelFormat::Gray8 => self.data.clone(),
            PixelFormat::Rgb24 => (0..self.height)
                .flat_map(|y| (0..self.width).map(move |x| (x, y)))
                .map(|(x, y)| self.luma(x, y))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// In [0, 1].
    pub score: f64,
    pub label: String,
    pub detection_id: u64,
}

impl Detection {
    pub fn validate(&self) -> Result<(), MessageError> {
        if self.bbox.w == 0 || self.bbox.h == 0 {
            return Err(MessageError::InvariantViolation("detection box must have positive size".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(MessageError::InvariantViolation(format!("detection score {} outside [0,1]", self.score)));
        }
        Ok(())
    }
}

/// A fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub vector: Vec<f64>,
    pub modality: String,
    pub subject_id: Option<String>,
}

impl Template {
    pub fn new(vector: Vec<f64>, modality: impl Into<String>) -> Self {
        Self { vector, modality: modality.into(), subject_id: None }
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject_id = Some(subject.into());
        self
    }

    pub fn dims(&self) -> usize {
        self.vector.len()
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        if self.vector.is_empty() {
            return Err(MessageError::InvariantViolation("template must have at least one dimension".into()));
        }
        if let Some(i) = self.vector.iter().position(|v| !v.is_finite()) {
            return Err(MessageError::InvariantViolation(format!("template entry {i} is not finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major, rows × cols.
    pub scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.cols.len() + col]
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        if self.scores.len() != self.rows.len() * self.cols.len() {
            return Err(MessageError::InvariantViolation(format!(
                "score matrix {}x{} has {} scores",
                self.rows.len(),
                self.cols.len(),
                self.scores.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Frame(Frame),
    DetectionList(Vec<Detection>),
    TemplateList(Vec<Template>),
    EncryptedTemplateList(Vec<EncryptedTemplate>),
    ScoreMatrix(ScoreMatrix),
    Generic { content_type: String, data: Vec<u8> },
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PayloadKind {
    Frame,
    DetectionList,
    TemplateList,
    EncryptedTemplateList,
    ScoreMatrix,
    Generic,
    Empty,
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Frame(_) => PayloadKind::Frame,
            Payload::DetectionList(_) => PayloadKind::DetectionList,
            Payload::TemplateList(_) => PayloadKind::TemplateList,
            Payload::EncryptedTemplateList(_) => PayloadKind::EncryptedTemplateList,
            Payload::ScoreMatrix(_) => PayloadKind::ScoreMatrix,
            Payload::Generic { .. } => PayloadKind::Generic,
            Payload::Empty => PayloadKind::Empty,
        }
    }

    pub fn generic(content_type: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        Payload::Generic { content_type: content_type.into(), data: data.into() }
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        match self {
            Payload::Frame(f) => f.validate(),
            Payload::DetectionList(ds) => ds.iter().try_for_each(Detection::validate),
            Payload::TemplateList(ts) => ts.iter().try_for_each(Template::validate),
            Payload::EncryptedTemplateList(ts) => ts.iter().try_for_each(|t| {
                if t.ciphertexts.is_empty() || !t.is_consistent() {
                    Err(MessageError::InvariantViolation(
                        "encrypted template must be non-empty and share one key and scale".into(),
                    ))
                } else {
                    Ok(())
                }
            }),
            Payload::ScoreMatrix(m) => m.validate(),
            Payload::Generic { .. } | Payload::Empty => Ok(()),
        }
    }

    /// Packs named payloads into one Generic payload, preserving order.
    pub fn bundle(entries: &[(String, Payload)]) -> Result<Payload, MessageError> {
        let mut w = Writer::new();
        w.u32(entries.len() as u32);
        for (name, payload) in entries {
            payload.validate()?;
            w.str(name);
            let mut inner = Writer::new();
            write_payload(&mut inner, payload);
            w.bytes(inner.as_bytes());
        }
        Ok(Payload::generic(BUNDLE_CONTENT_TYPE, w.into_bytes()))
    }

    /// Unpacks a bundle produced by [`Payload::bundle`]; `None` for any
    /// other payload.
    pub fn as_bundle(&self) -> Option<Result<Vec<(String, Payload)>, MessageError>> {
        match self {
            Payload::Generic { content_type, data } if content_type == BUNDLE_CONTENT_TYPE => Some(read_bundle(data)),
            _ => None,
        }
    }
}

fn read_bundle(data: &[u8]) -> Result<Vec<(String, Payload)>, MessageError> {
    let mut r = Reader::new(data);
    let n = r.count(8)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let body = r.bytes()?;
        out.push((name, decode_payload(body)?));
    }
    r.finish()?;
    Ok(out)
}

/// The universal request envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct FaroRecord {
    pub record_id: Uuid,
    pub sequence_no: u64,
    pub source_id: String,
    /// Microseconds since the Unix epoch, UTC.
    pub timestamp: i64,
    /// `"service/name"` or `"name"`.
    pub target: String,
    pub payload: Payload,
    pub options: Options,
}

impl FaroRecord {
    pub fn new(payload: Payload) -> Self {
        Self {
            record_id: Uuid::new_v4(),
            sequence_no: 0,
            source_id: String::new(),
            timestamp: now_micros(),
            target: String::new(),
            payload,
            options: Options::new(),
        }
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Self {
        self.target = target.into();
        self
    }

    pub fn with_sequence(mut self, sequence_no: u64) -> Self {
        self.sequence_no = sequence_no;
        self
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn with_option(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.options.insert(key.into(), value.into());
        self
    }

    /// Services this record has been forwarded through, oldest first.
    pub fn hops(&self) -> Vec<String> {
        self.options
            .get(HOPS_OPTION)
            .map(|h| h.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect())
            .unwrap_or_default()
    }

    pub fn push_hop(&mut self, service: &str) {
        let mut hops = self.hops();
        hops.push(service.to_string());
        self.options.insert(HOPS_OPTION.into(), hops.join(","));
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        self.payload.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplyStatus {
    Ok,
    Error,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub micros: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplyError {
    pub code: String,
    pub message: String,
}

/// The universal response envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct FaroReply {
    pub record_id: Uuid,
    pub status: ReplyStatus,
    pub stage_timings: Vec<StageTiming>,
    pub payload: Payload,
    pub error: Option<ReplyError>,
}

impl FaroReply {
    pub fn ok(record_id: Uuid, payload: Payload) -> Self {
        Self { record_id, status: ReplyStatus::Ok, stage_timings: Vec::new(), payload, error: None }
    }

    pub fn error(record_id: Uuid, code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            record_id,
            status: ReplyStatus::Error,
            stage_timings: Vec::new(),
            payload: Payload::Empty,
            error: Some(ReplyError { code: code.into(), message: message.into() }),
        }
    }

    pub fn with_timing(mut self, stage: impl Into<String>, micros: u64) -> Self {
        self.stage_timings.push(StageTiming { stage: stage.into(), micros });
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status == ReplyStatus::Ok
    }

    pub fn error_code(&self) -> Option<&str> {
        self.error.as_ref().map(|e| e.code.as_str())
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        match (self.status, &self.error) {
            (ReplyStatus::Error, None) => {
                return Err(MessageError::InvariantViolation("ERROR reply without error detail".into()))
            }
            (ReplyStatus::Ok, Some(_)) => {
                return Err(MessageError::InvariantViolation("OK reply carrying an error".into()))
            }
            _ => {}
        }
        self.payload.validate()
    }
}

/// Either envelope, as read from a byte stream.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Record(FaroRecord),
    Reply(FaroReply),
}

fn write_payload(w: &mut Writer, payload: &Payload) {
    match payload {
        Payload::Empty => {
            w.u8(0);
        }
        Payload::Frame(f) => {
            w.u8(1).u32(f.width).u32(f.height).u8(f.pixel_format.code()).raw(&f.data);
        }
        Payload::DetectionList(ds) => {
            w.u8(2).u32(ds.len() as u32);
            for d in ds {
                w.u32(d.bbox.x).u32(d.bbox.y).u32(d.bbox.w).u32(d.bbox.h);
                w.f64(d.score).str(&d.label).u64(d.detection_id);
            }
        }
        Payload::TemplateList(ts) => {
            w.u8(3).u32(ts.len() as u32);
            for t in ts {
                write_template(w, t);
            }
        }
        Payload::EncryptedTemplateList(ts) => {
            w.u8(4).u32(ts.len() as u32);
            for t in ts {
                write_encrypted_template(w, t);
            }
        }
        Payload::ScoreMatrix(m) => {
            w.u8(5).u32(m.rows.len() as u32);
            for r in &m.rows {
                w.str(r);
            }
            w.u32(m.cols.len() as u32);
            for c in &m.cols {
                w.str(c);
            }
            for s in &m.scores {
                w.f64(*s);
            }
        }
        Payload::Generic { content_type, data } => {
            w.u8(6).str(content_type).raw(data);
        }
    }
}

pub(crate) fn write_template(w: &mut Writer, t: &Template) {
    w.u32(t.vector.len() as u32);
    for v in &t.vector {
        w.f64(*v);
    }
    w.str(&t.modality).opt_str(t.subject_id.as_deref());
}

pub(crate) fn read_template(r: &mut Reader<'_>) -> Result<Template, MessageError> {
    let d = r.count(8)?;
    let vector = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    Ok(Template { vector, modality: r.str()?, subject_id: r.opt_str()? })
}

/// Ciphertext wire form: key id and scale once, then each value as
/// length-prefixed big-endian magnitude bytes.
pub(crate) fn write_encrypted_template(w: &mut Writer, t: &EncryptedTemplate) {
    w.raw(&t.key_id.0).u64(t.scale).u32(t.ciphertexts.len() as u32);
    for c in &t.ciphertexts {
        w.bytes(&c.value.to_bytes_be());
    }
    w.str(&t.modality).opt_str(t.subject_id.as_deref());
}

pub(crate) fn read_encrypted_template(r: &mut Reader<'_>) -> Result<EncryptedTemplate, MessageError> {
    let key_id = KeyId(r.array::<32>()?);
    let scale = r.u64()?;
    let n = r.count(4)?;
    let mut ciphertexts = Vec::with_capacity(n);
    for _ in 0..n {
        let value = BigUint::from_bytes_be(r.bytes()?);
        ciphertexts.push(PheCiphertext { value, key_id, scale });
    }
    Ok(EncryptedTemplate { ciphertexts, key_id, scale, modality: r.str()?, subject_id: r.opt_str()? })
}

fn read_payload(r: &mut Reader<'_>) -> Result<Payload, MessageError> {
    let tag = r.u8()?;
    let payload = match tag {
        0 => Payload::Empty,
        1 => {
            let width = r.u32()?;
            let height = r.u32()?;
            let pixel_format = PixelFormat::from_code(r.u8()?)?;
            let data = r.rest().to_vec();
            let frame = Frame { width, height, pixel_format, data };
            if frame.data.len() != frame.expected_len() {
                return Err(MessageError::Malformed(format!(
                    "frame data length {} does not match {}x{}",
                    frame.data.len(),
                    width,
                    height
                )));
            }
            Payload::Frame(frame)
        }
        2 => {
            let n = r.count(16 + 8 + 4 + 8)?;
            let mut ds = Vec::with_capacity(n);
            for _ in 0..n {
                let bbox = BoundingBox { x: r.u32()?, y: r.u32()?, w: r.u32()?, h: r.u32()? };
                ds.push(Detection { bbox, score: r.f64()?, label: r.str()?, detection_id: r.u64()? });
            }
            Payload::DetectionList(ds)
        }
        3 => {
            let n = r.count(4)?;
            Payload::TemplateList((0..n).map(|_| read_template(r)).collect::<Result<_, _>>()?)
        }
        4 => {
            let n = r.count(32)?;
            Payload::EncryptedTemplateList((0..n).map(|_| read_encrypted_template(r)).collect::<Result<_, _>>()?)
        }
        5 => {
            let nr = r.count(4)?;
            let rows = (0..nr).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
            let nc = r.count(4)?;
            let cols = (0..nc).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
            let total = nr
                .checked_mul(nc)
                .filter(|t| t.saturating_mul(8) <= r.remaining())
                .ok_or_else(|| MessageError::Malformed("score matrix larger than message".into()))?;
            let scores = (0..total).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            Payload::ScoreMatrix(ScoreMatrix { rows, cols, scores })
        }
        6 => {
            let content_type = r.str()?;
            Payload::Generic { content_type, data: r.rest().to_vec() }
        }
        other => return Err(MessageError::Malformed(format!("unknown payload tag {other}"))),
    };
    r.finish()?;
    payload.validate().map_err(|e| MessageError::Malformed(e.to_string()))?;
    Ok(payload)
}

/// Canonical bytes of a payload alone (no envelope).
pub fn encode_payload(payload: &Payload) -> Result<Vec<u8>, MessageError> {
    payload.validate()?;
    let mut w = Writer::new();
    write_payload(&mut w, payload);
    Ok(w.into_bytes())
}

pub fn decode_payload(data: &[u8]) -> Result<Payload, MessageError> {
    read_payload(&mut Reader::new(data))
}

/// Frame reference carried in [`ORIGIN_FRAME_OPTION`]: the canonical frame
/// payload, base64 encoded.
pub fn encode_origin_frame(frame: &Frame) -> Result<String, MessageError> {
    let bytes = encode_payload(&Payload::Frame(frame.clone()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

pub fn decode_origin_frame(value: &str) -> Result<Frame, MessageError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(value)
        .map_err(|e| MessageError::Malformed(format!("origin frame: {e}")))?;
    match decode_payload(&bytes)? {
        Payload::Frame(f) => Ok(f),
        other => Err(MessageError::Malformed(format!("origin frame holds {:?}", other.kind()))),
    }
}

fn envelope(kind: u8, body: Writer) -> Vec<u8> {
    let body = body.into_bytes();
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.push(kind);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn serialize_record(record: &FaroRecord) -> Result<Vec<u8>, MessageError> {
    record.validate()?;
    let mut w = Writer::with_capacity(64);
    w.field(0x01, |w| {
        w.raw(record.record_id.as_bytes());
    });
    w.field(0x02, |w| {
        w.u64(record.sequence_no);
    });
    w.field(0x03, |w| {
        w.raw(record.source_id.as_bytes());
    });
    w.field(0x04, |w| {
        w.i64(record.timestamp);
    });
    w.field(0x05, |w| {
        w.raw(record.target.as_bytes());
    });
    w.field(0x06, |w| write_payload(w, &record.payload));
    w.field(0x07, |w| {
        for (k, v) in &record.options {
            w.str(k).str(v);
        }
    });
    Ok(envelope(KIND_RECORD, w))
}

pub fn serialize_reply(reply: &FaroReply) -> Result<Vec<u8>, MessageError> {
    reply.validate()?;
    let mut w = Writer::with_capacity(64);
    w.field(0x01, |w| {
        w.raw(reply.record_id.as_bytes());
    });
    w.field(0x10, |w| {
        w.u8(match reply.status {
            ReplyStatus::Ok => 0,
            ReplyStatus::Error => 1,
            ReplyStatus::Partial => 2,
        });
    });
    w.field(0x11, |w| {
        w.u32(reply.stage_timings.len() as u32);
        for t in &reply.stage_timings {
            w.str(&t.stage).u64(t.micros);
        }
    });
    w.field(0x06, |w| write_payload(w, &reply.payload));
    if let Some(err) = &reply.error {
        w.field(0x12, |w| {
            w.str(&err.code).str(&err.message);
        });
    }
    Ok(envelope(KIND_REPLY, w))
}

fn utf8(bytes: &[u8], what: &str) -> Result<String, MessageError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| MessageError::Malformed(format!("{what} is not UTF-8")))
}

fn read_uuid(r: &mut Reader<'_>) -> Result<Uuid, MessageError> {
    let mut f = r.field(0x01)?;
    let id = Uuid::from_bytes(f.array::<16>()?);
    f.finish()?;
    Ok(id)
}

fn decode_record_body(body: &[u8]) -> Result<FaroRecord, MessageError> {
    let mut r = Reader::new(body);
    let record_id = read_uuid(&mut r)?;
    let mut f = r.field(0x02)?;
    let sequence_no = f.u64()?;
    f.finish()?;
    let source_id = utf8(r.field(0x03)?.rest(), "source_id")?;
    let mut f = r.field(0x04)?;
    let timestamp = f.i64()?;
    f.finish()?;
    let target = utf8(r.field(0x05)?.rest(), "target")?;
    let payload = read_payload(&mut r.field(0x06)?)?;
    let mut f = r.field(0x07)?;
    let mut options = Options::new();
    let mut last: Option<String> = None;
    while !f.is_empty() {
        let k = f.str()?;
        let v = f.str()?;
        if last.as_ref().is_some_and(|prev| prev >= &k) {
            return Err(MessageError::Malformed(format!("option keys out of order at `{k}`")));
        }
        last = Some(k.clone());
        options.insert(k, v);
    }
    r.finish()?;
    Ok(FaroRecord { record_id, sequence_no, source_id, timestamp, target, payload, options })
}

fn decode_reply_body(body: &[u8]) -> Result<FaroReply, MessageError> {
    let mut r = Reader::new(body);
    let record_id = read_uuid(&mut r)?;
    let mut f = r.field(0x10)?;
    let status = match f.u8()? {
        0 => ReplyStatus::Ok,
        1 => ReplyStatus::Error,
        2 => ReplyStatus::Partial,
        other => return Err(MessageError::Malformed(format!("unknown reply status {other}"))),
    };
    f.finish()?;
    let mut f = r.field(0x11)?;
    let n = f.count(12)?;
    let mut stage_timings = Vec::with_capacity(n);
    for _ in 0..n {
        stage_timings.push(StageTiming { stage: f.str()?, micros: f.u64()? });
    }
    f.finish()?;
    let payload = read_payload(&mut r.field(0x06)?)?;
    let error = if r.is_empty() {
        None
    } else {
        let mut f = r.field(0x12)?;
        let e = ReplyError { code: f.str()?, message: f.str()? };
        f.finish()?;
        Some(e)
    };
    r.finish()?;
    let reply = FaroReply { record_id, status, stage_timings, payload, error };
    reply.validate().map_err(|e| MessageError::Malformed(e.to_string()))?;
    Ok(reply)
}

/// Length of the first complete message in `data`, if one is present.
pub fn message_len(data: &[u8]) -> Result<Option<usize>, MessageError> {
    if data.len() < HEADER_LEN {
        return Ok(None);
    }
    if &data[..4] != MAGIC {
        return Err(MessageError::Malformed("bad magic".into()));
    }
    let body = u32::from_le_bytes(data[5..9].try_into().unwrap()) as usize;
    let total = HEADER_LEN + body;
    Ok((data.len() >= total).then_some(total))
}

/// Decodes the first message in `data`, returning it with the number of
/// bytes consumed.
pub fn decode_message(data: &[u8]) -> Result<(Message, usize), MessageError> {
    let total = message_len(data)?.ok_or_else(|| MessageError::Malformed("truncated message".into()))?;
    let body = &data[HEADER_LEN..total];
    let msg = match data[4] {
        KIND_RECORD => Message::Record(decode_record_body(body)?),
        KIND_REPLY => Message::Reply(decode_reply_body(body)?),
        other => return Err(MessageError::Malformed(format!("unknown message kind {other}"))),
    };
    Ok((msg, total))
}

fn exactly_one(data: &[u8]) -> Result<Message, MessageError> {
    let (msg, used) = decode_message(data)?;
    if used != data.len() {
        return Err(MessageError::Malformed(format!("{} trailing bytes", data.len() - used)));
    }
    Ok(msg)
}

pub fn deserialize_record(data: &[u8]) -> Result<FaroRecord, MessageError> {
    match exactly_one(data)? {
        Message::Record(r) => Ok(r),
        Message::Reply(_) => Err(MessageError::Malformed("expected a record, found a reply".into())),
    }
}

pub fn deserialize_reply(data: &[u8]) -> Result<FaroReply, MessageError> {
    match exactly_one(data)? {
        Message::Reply(r) => Ok(r),
        Message::Record(_) => Err(MessageError::Malformed("expected a reply, found a record".into())),
    }
}

/// Findings from comparing sent records against received replies.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairingReport {
    /// Sent records with no reply, in send order.
    pub unmatched: Vec<Uuid>,
    /// Replies whose id was never sent.
    pub unexpected: Vec<Uuid>,
    /// Replies received more than once.
    pub duplicates: Vec<Uuid>,
    /// Matched replies arrived in the same relative order as their records.
    pub in_order: bool,
}

impl PairingReport {
    pub fn is_clean(&self) -> bool {
        self.unmatched.is_empty() && self.unexpected.is_empty() && self.duplicates.is_empty() && self.in_order
    }
}

pub fn validate_reply_pairing(sent: &[FaroRecord], received: &[FaroReply]) -> PairingReport {
    let position: HashMap<Uuid, usize> = sent.iter().enumerate().map(|(i, r)| (r.record_id, i)).collect();
    let mut seen = HashSet::new();
    let mut report = PairingReport { in_order: true, ..Default::default() };
    let mut last = None;
    for reply in received {
        let Some(&pos) = position.get(&reply.record_id) else {
            report.unexpected.push(reply.record_id);
            continue;
        };
        if !seen.insert(reply.record_id) {
            report.duplicates.push(reply.record_id);
            continue;
        }
        if last.is_some_and(|l| pos < l) {
            report.in_order = false;
        }
        last = Some(pos);
    }
    report.unmatched = sent.iter().map(|r| r.record_id).filter(|id| !seen.contains(id)).collect();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_2x2() -> Frame {
        Frame::gray(2, 2, vec![0, 1, 2, 3]).unwrap()
    }

    #[test]
    fn empty_record_round_trip() {
        let r = FaroRecord::new(Payload::Empty);
        let bytes = serialize_record(&r).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(deserialize_record(&bytes).unwrap(), r);
    }

    #[test]
    fn frame_payload_section_length() {
        let r = FaroRecord::new(Payload::Frame(frame_2x2()));
        let bytes = serialize_record(&r).unwrap();
        let empty = serialize_record(&FaroRecord { payload: Payload::Empty, ..r.clone() }).unwrap();
        // Frame adds width, height and format (9 bytes) plus 4 data bytes.
        assert_eq!(bytes.len() - empty.len(), 9 + 4);
        let (msg, _) = decode_message(&bytes).unwrap();
        match msg {
            Message::Record(rec) => match rec.payload {
                Payload::Frame(f) => assert_eq!(f.data.len(), 4),
                other => panic!("{other:?}"),
            },
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_is_malformed() {
        let bytes = serialize_record(&FaroRecord::new(Payload::Frame(frame_2x2()))).unwrap();
        for cut in [0, 3, 8, bytes.len() - 1] {
            assert!(matches!(deserialize_record(&bytes[..cut]), Err(MessageError::Malformed(_))), "cut {cut}");
        }
    }

    #[test]
    fn unknown_payload_tag_is_named() {
        let r = FaroRecord::new(Payload::Empty);
        let mut bytes = serialize_record(&r).unwrap();
        // The empty payload is a single tag byte inside field 0x06.
        let pos = bytes.windows(6).position(|w| w == [0x06, 1, 0, 0, 0, 0]).unwrap();
        bytes[pos + 5] = 255;
        let err = deserialize_record(&bytes).unwrap_err();
        assert!(err.to_string().contains("255"), "{err}");
    }

    #[test]
    fn inconsistent_frame_is_rejected() {
        let bad = Frame { width: 3, height: 3, pixel_format: PixelFormat::Gray8, data: vec![0; 4] };
        let r = FaroRecord::new(Payload::Frame(bad));
        assert!(matches!(serialize_record(&r), Err(MessageError::InvariantViolation(_))));
        let m = ScoreMatrix { rows: vec!["a".into()], cols: vec!["b".into(), "c".into()], scores: vec![1.0] };
        assert!(serialize_record(&FaroRecord::new(Payload::ScoreMatrix(m))).is_err());
    }

    #[test]
    fn reply_status_invariants() {
        let id = Uuid::new_v4();
        let mut bad = FaroReply::ok(id, Payload::Empty);
        bad.status = ReplyStatus::Error;
        assert!(serialize_reply(&bad).is_err());
        let err = FaroReply::error(id, codes::INPUT_KIND, "nope").with_timing("x", 5);
        assert_eq!(deserialize_reply(&serialize_reply(&err).unwrap()).unwrap(), err);
    }

    #[test]
    fn concatenated_messages_decode_in_turn() {
        let a = FaroRecord::new(Payload::Frame(frame_2x2())).with_option("k", "v");
        let b = FaroReply::ok(a.record_id, Payload::generic("text/plain", b"hi".to_vec()));
        let mut stream = serialize_record(&a).unwrap();
        stream.extend(serialize_reply(&b).unwrap());
        let (first, used) = decode_message(&stream).unwrap();
        assert_eq!(first, Message::Record(a));
        let (second, used2) = decode_message(&stream[used..]).unwrap();
        assert_eq!(second, Message::Reply(b));
        assert_eq!(used + used2, stream.len());
    }

    #[test]
    fn bundles_round_trip() {
        let entries = vec![
            ("a".to_string(), Payload::Frame(frame_2x2())),
            ("b".to_string(), Payload::Empty),
        ];
        let bundle = Payload::bundle(&entries).unwrap();
        assert_eq!(bundle.as_bundle().unwrap().unwrap(), entries);
        assert!(Payload::Empty.as_bundle().is_none());
    }

    #[test]
    fn origin_frame_reference_round_trip() {
        let f = frame_2x2();
        assert_eq!(decode_origin_frame(&encode_origin_frame(&f).unwrap()).unwrap(), f);
        assert!(decode_origin_frame("!!").is_err());
    }

    #[test]
    fn hop_list() {
        let mut r = FaroRecord::new(Payload::Empty);
        assert!(r.hops().is_empty());
        r.push_hop("a");
        r.push_hop("b");
        assert_eq!(r.hops(), vec!["a", "b"]);
        assert_eq!(r.options[HOPS_OPTION], "a,b");
    }

    fn rec() -> FaroRecord {
        FaroRecord::new(Payload::Empty)
    }

    #[test]
    fn pairing_in_order() {
        let (a, b) = (rec(), rec());
        let replies = vec![FaroReply::ok(a.record_id, Payload::Empty), FaroReply::ok(b.record_id, Payload::Empty)];
        let report = validate_reply_pairing(&[a, b], &replies);
        assert!(report.in_order);
        assert!(report.unmatched.is_empty());
        assert!(report.is_clean());
    }

    #[test]
    fn pairing_out_of_order() {
        let (a, b) = (rec(), rec());
        let replies = vec![FaroReply::ok(b.record_id, Payload::Empty), FaroReply::ok(a.record_id, Payload::Empty)];
        let report = validate_reply_pairing(&[a, b], &replies);
        assert!(!report.in_order);
        assert!(report.unmatched.is_empty());
    }

    #[test]
    fn pairing_unmatched() {
        let (a, b, c) = (rec(), rec(), rec());
        let replies = vec![FaroReply::ok(a.record_id, Payload::Empty), FaroReply::ok(c.record_id, Payload::Empty)];
        let b_id = b.record_id;
        let report = validate_reply_pairing(&[a, b, c], &replies);
        assert_eq!(report.unmatched, vec![b_id]);
        assert!(report.in_order);
    }
}
