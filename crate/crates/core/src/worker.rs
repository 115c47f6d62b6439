//! The worker contract, option schemas, the worker registry and the
//! deterministic demo workers.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{
    codes, decode_origin_frame, BoundingBox, Detection, FaroRecord, FaroReply, Frame, Payload, ScoreMatrix,
    Template, ORIGIN_FRAME_OPTION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MicroserviceKind {
    Detect,
    Extract,
    Score,
    Enroll,
    Search,
    Transform,
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionType {
    Int,
    Float,
    Bool,
    String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: OptionType,
    pub default: String,
    pub description: String,
}

impl OptionSpec {
    pub fn new(name: &str, ty: OptionType, default: &str, description: &str) -> Self {
        Self { name: name.into(), ty, default: default.into(), description: description.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub worker_type: String,
    pub microservice_kind: MicroserviceKind,
    pub resources: BTreeMap<String, String>,
    pub options_schema: Vec<OptionSpec>,
    pub reentrant: bool,
    /// Effective option values of this instance.
    #[serde(default)]
    pub options: BTreeMap<String, String>,
}

impl WorkerInfo {
    pub fn new(worker_type: &str, kind: MicroserviceKind) -> Self {
        let threads = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self {
            worker_type: worker_type.into(),
            microservice_kind: kind,
            resources: BTreeMap::from([("cpu_threads".to_string(), threads.to_string())]),
            options_schema: Vec::new(),
            reentrant: true,
            options: BTreeMap::new(),
        }
    }

    pub fn option(mut self, spec: OptionSpec) -> Self {
        self.options_schema.push(spec);
        self
    }

    pub fn reentrant(mut self, reentrant: bool) -> Self {
        self.reentrant = reentrant;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkerError {
    #[error("unknown worker type `{0}`")]
    UnknownWorkerType(String),
    #[error("invalid option `{key}`: {reason}")]
    InvalidOptions { key: String, reason: String },
    #[error("worker type `{0}` is already registered")]
    DuplicateType(String),
}

fn invalid(key: &str, reason: impl Into<String>) -> WorkerError {
    WorkerError::InvalidOptions { key: key.into(), reason: reason.into() }
}

/// Option values checked against a schema, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WorkerOptions(BTreeMap<String, String>);

impl WorkerOptions {
    pub fn resolve(schema: &[OptionSpec], raw: &BTreeMap<String, String>) -> Result<Self, WorkerError> {
        if let Some(key) = raw.keys().find(|k| !schema.iter().any(|s| &s.name == *k)) {
            return Err(invalid(key, "not a known option"));
        }
        let mut values = BTreeMap::new();
        for spec in schema {
            let value = raw.get(&spec.name).unwrap_or(&spec.default);
            let ok = match spec.ty {
                OptionType::Int => value.parse::<i64>().is_ok(),
                OptionType::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
                OptionType::Bool => value.parse::<bool>().is_ok(),
                OptionType::String => true,
            };
            if !ok {
                return Err(invalid(&spec.name, format!("`{value}` is not a valid {:?}", spec.ty)));
            }
            values.insert(spec.name.clone(), value.clone());
        }
        Ok(Self(values))
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.0
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn int(&self, key: &str) -> Result<i64, WorkerError> {
        self.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| invalid(key, "missing integer"))
    }

    pub fn float(&self, key: &str) -> Result<f64, WorkerError> {
        self.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| invalid(key, "missing number"))
    }

    pub fn string(&self, key: &str) -> Result<&str, WorkerError> {
        self.get(key).ok_or_else(|| invalid(key, "missing value"))
    }
}

/// A compute unit turning records into replies. Implementations must
/// report failures as ERROR replies; the registry's guard additionally
/// converts panics.
pub trait Worker: Send + Sync {
    fn info(&self) -> WorkerInfo;
    fn process(&self, record: &FaroRecord) -> FaroReply;
}

/// Builds a worker from a closure; handy for tests and small adapters.
pub struct FnWorker<F> {
    info: WorkerInfo,
    f: F,
}

impl<F> FnWorker<F>
where
    F: Fn(&FaroRecord) -> FaroReply + Send + Sync,
{
    pub fn new(info: WorkerInfo, f: F) -> Self {
        Self { info, f }
    }
}

impl<F> Worker for FnWorker<F>
where
    F: Fn(&FaroRecord) -> FaroReply + Send + Sync,
{
    fn info(&self) -> WorkerInfo {
        self.info.clone()
    }

    fn process(&self, record: &FaroRecord) -> FaroReply {
        (self.f)(record)
    }
}

/// Enforces the contract around any worker: non-reentrant workers see one
/// call at a time, panics become ERROR replies, the reply id matches the
/// record and a timing entry named after the worker type is appended.
pub struct Guarded {
    inner: Arc<dyn Worker>,
    info: WorkerInfo,
    exclusive: Option<Mutex<()>>,
}

impl Guarded {
    pub fn wrap(inner: Arc<dyn Worker>) -> Arc<dyn Worker> {
        let info = inner.info();
        let exclusive = (!info.reentrant).then(|| Mutex::new(()));
        Arc::new(Self { inner, info, exclusive })
    }
}

impl Worker for Guarded {
    fn info(&self) -> WorkerInfo {
        self.info.clone()
    }

    fn process(&self, record: &FaroRecord) -> FaroReply {
        let _turn = self.exclusive.as_ref().map(|m| m.lock());
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| self.inner.process(record)));
        let mut reply = match outcome {
            Ok(reply) => reply,
            Err(cause) => {
                let msg = cause
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| cause.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "worker panicked".into());
                FaroReply::error(record.record_id, codes::PANIC, msg)
            }
        };
        reply.record_id = record.record_id;
        reply.stage_timings.push(crate::message::StageTiming {
            stage: self.info.worker_type.clone(),
            micros: start.elapsed().as_micros() as u64,
        });
        reply
    }
}

pub type WorkerFactory = Arc<dyn Fn(&WorkerOptions) -> Result<Arc<dyn Worker>, WorkerError> + Send + Sync>;

struct Registration {
    info: WorkerInfo,
    factory: WorkerFactory,
}

/// Constructible worker types plus named ready-made instances (declared
/// pipelines, for instance).
#[derive(Default)]
pub struct WorkerRegistry {
    types: RwLock<BTreeMap<String, Arc<Registration>>>,
    instances: RwLock<BTreeMap<String, Arc<dyn Worker>>>,
}

impl WorkerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_demo_workers() -> Self {
        let r = Self::new();
        register_demo_workers(&r).expect("demo worker names are unique");
        r
    }

    /// `info` describes the type with default options.
    pub fn register(&self, info: WorkerInfo, factory: WorkerFactory) -> Result<(), WorkerError> {
        let mut types = self.types.write();
        if types.contains_key(&info.worker_type) {
            return Err(WorkerError::DuplicateType(info.worker_type));
        }
        types.insert(info.worker_type.clone(), Arc::new(Registration { info, factory }));
        Ok(())
    }

    /// Adds or replaces a named instance.
    pub fn register_instance(&self, name: &str, worker: Arc<dyn Worker>) {
        self.instances.write().insert(name.to_string(), worker);
    }

    pub fn remove_instance(&self, name: &str) -> Option<Arc<dyn Worker>> {
        self.instances.write().remove(name)
    }

    pub fn worker_types(&self) -> Vec<String> {
        self.types.read().keys().cloned().collect()
    }

    pub fn instance_names(&self) -> Vec<String> {
        self.instances.read().keys().cloned().collect()
    }

    pub fn info(&self, name: &str) -> Option<WorkerInfo> {
        if let Some(reg) = self.types.read().get(name) {
            return Some(reg.info.clone());
        }
        self.instances.read().get(name).map(|w| w.info())
    }

    pub fn construct(&self, name: &str, raw: &BTreeMap<String, String>) -> Result<Arc<dyn Worker>, WorkerError> {
        let reg = self.types.read().get(name).cloned();
        if let Some(reg) = reg {
            let options = WorkerOptions::resolve(&reg.info.options_schema, raw)?;
            return Ok(Guarded::wrap((reg.factory)(&options)?));
        }
        if let Some(inst) = self.instances.read().get(name) {
            if let Some(key) = raw.keys().next() {
                return Err(invalid(key, format!("`{name}` is a declared instance and takes no options")));
            }
            return Ok(inst.clone());
        }
        Err(WorkerError::UnknownWorkerType(name.to_string()))
    }
}

// ---------------------------------------------------------------- demo

pub const DEMO_DETECT: &str = "demo-detect";
pub const DEMO_EXTRACT: &str = "demo-extract";
pub const DEMO_SCORE: &str = "demo-score";
pub const ECHO: &str = "echo";
pub const DELAY: &str = "delay";

pub fn register_demo_workers(r: &WorkerRegistry) -> Result<(), WorkerError> {
    r.register(DemoDetect::describe(), Arc::new(|o| Ok(Arc::new(DemoDetect::from_options(o)?) as Arc<dyn Worker>)))?;
    r.register(DemoExtract::describe(), Arc::new(|o| Ok(Arc::new(DemoExtract::from_options(o)?) as Arc<dyn Worker>)))?;
    r.register(DemoScore::describe(), Arc::new(|_| Ok(Arc::new(DemoScore) as Arc<dyn Worker>)))?;
    r.register(Echo::describe(), Arc::new(|_| Ok(Arc::new(Echo) as Arc<dyn Worker>)))?;
    r.register(Delay::describe(), Arc::new(|o| Ok(Arc::new(Delay::from_options(o)?) as Arc<dyn Worker>)))?;
    Ok(())
}

fn input_kind_error(record: &FaroRecord, expected: &str) -> FaroReply {
    FaroReply::error(
        record.record_id,
        codes::INPUT_KIND,
        format!("expected {expected}, got {:?}", record.payload.kind()),
    )
}

/// Threshold plus 4-connected component labeling.
pub struct DemoDetect {
    pub threshold: u8,
    pub min_area: u64,
}

impl DemoDetect {
    pub fn describe() -> WorkerInfo {
        WorkerInfo::new(DEMO_DETECT, MicroserviceKind::Detect)
            .option(OptionSpec::new("threshold", OptionType::Int, "128", "pixels at or above this are foreground"))
            .option(OptionSpec::new("min_area", OptionType::Int, "25", "smallest component reported, in pixels"))
    }

    pub fn from_options(o: &WorkerOptions) -> Result<Self, WorkerError> {
        let threshold = o.int("threshold")?;
        let min_area = o.int("min_area")?;
        if !(0..=255).contains(&threshold) {
            return Err(invalid("threshold", "must be within 0..=255"));
        }
        if min_area < 1 {
            return Err(invalid("min_area", "must be at least 1"));
        }
        Ok(Self { threshold: threshold as u8, min_area: min_area as u64 })
    }

    pub fn detect(&self, frame: &Frame) -> Vec<Detection> {
        let (w, h) = (frame.width as usize, frame.height as usize);
        let gray = frame.to_gray();
        let mut seen = vec![false; w * h];
        let mut found = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            if seen[start] || gray[start] < self.threshold {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
            let (mut area, mut sum) = (0u64, 0u64);
            while let Some(p) = queue.pop_front() {
                let (x, y) = (p % w, p / w);
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
                area += 1;
                sum += gray[p] as u64;
                let mut visit = |q: usize| {
                    if !seen[q] && gray[q] >= self.threshold {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
            }
            if area >= self.min_area {
                let bbox = BoundingBox {
                    x: min_x as u32,
                    y: min_y as u32,
                    w: (max_x - min_x + 1) as u32,
                    h: (max_y - min_y + 1) as u32,
                };
                found.push((bbox, sum as f64 / area as f64 / 255.0));
            }
        }
        found.sort_by_key(|(b, _)| (b.y, b.x));
        found
            .into_iter()
            .enumerate()
            .map(|(i, (bbox, score))| Detection { bbox, score, label: "object".into(), detection_id: i as u64 })
            .collect()
    }
}

impl Worker for DemoDetect {
    fn info(&self) -> WorkerInfo {
        let mut info = Self::describe();
        info.options = BTreeMap::from([
            ("threshold".into(), self.threshold.to_string()),
            ("min_area".into(), self.min_area.to_string()),
        ]);
        info
    }

    fn process(&self, record: &FaroRecord) -> FaroReply {
        match &record.payload {
            Payload::Frame(frame) => FaroReply::ok(record.record_id, Payload::DetectionList(self.detect(frame))),
            _ => input_kind_error(record, "Frame"),
        }
    }
}

/// Crops each detection, block-mean resamples it to √D×√D and
/// L2-normalizes the flattened result.
pub struct DemoExtract {
    pub dims: usize,
    side: usize,
}

pub const DEMO_MODALITY: &str = "demo";

impl DemoExtract {
    pub fn describe() -> WorkerInfo {
        WorkerInfo::new(DEMO_EXTRACT, MicroserviceKind::Extract).option(OptionSpec::new(
            "dims",
            OptionType::Int,
            "64",
            "template length; must be a perfect square",
        ))
    }

    pub fn new(dims: usize) -> Result<Self, WorkerError> {
        let side = (dims as f64).sqrt().round() as usize;
        if dims == 0 || side * side != dims {
            return Err(invalid("dims", format!("{dims} is not a positive perfect square")));
        }
        Ok(Self { dims, side })
    }

    pub fn from_options(o: &WorkerOptions) -> Result<Self, WorkerError> {
        let dims = o.int("dims")?;
        Self::new(usize::try_from(dims).map_err(|_| invalid("dims", "must be positive"))?)
    }

    /// Template of one box; `None` when the box misses the frame.
    pub fn extract(&self, frame: &Frame, bbox: &BoundingBox) -> Option<Template> {
        let x0 = bbox.x.min(frame.width) as usize;
        let y0 = bbox.y.min(frame.height) as usize;
        let x1 = (bbox.x as u64 + bbox.w as u64).min(frame.width as u64) as usize;
        let y1 = (bbox.y as u64 + bbox.h as u64).min(frame.height as u64) as usize;
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        let (cw, ch, s) = (x1 - x0, y1 - y0, self.side);
        let span = |i: usize, len: usize| {
            let lo = i * len / s;
            (lo, ((i + 1) * len / s).max(lo + 1))
        };
        let mut vector = Vec::with_capacity(self.dims);
        for by in 0..s {
            let (ry0, ry1) = span(by, ch);
            for bx in 0..s {
                let (rx0, rx1) = span(bx, cw);
                let mut sum = 0u64;
                for y in ry0..ry1 {
                    for x in rx0..rx1 {
                        sum += frame.luma((x0 + x) as u32, (y0 + y) as u32) as u64;
                    }
                }
                vector.push(sum as f64 / ((ry1 - ry0) * (rx1 - rx0)) as f64);
            }
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            vector.fill(1.0 / (self.dims as f64).sqrt());
        } else {
            vector.iter_mut().for_each(|v| *v /= norm);
        }
        Some(Template::new(vector, DEMO_MODALITY))
    }
}

impl Worker for DemoExtract {
    fn info(&self) -> WorkerInfo {
        let mut info = Self::describe();
        info.options = BTreeMap::from([("dims".into(), self.dims.to_string())]);
        info
    }

    fn process(&self, record: &FaroRecord) -> FaroReply {
        let Payload::DetectionList(detections) = &record.payload else {
            return input_kind_error(record, "DetectionList with an origin frame");
        };
        let Some(encoded) = record.options.get(ORIGIN_FRAME_OPTION) else {
            return FaroReply::error(record.record_id, codes::INPUT_KIND, "record carries no origin frame");
        };
        let frame = match decode_origin_frame(encoded) {
            Ok(f) => f,
            Err(e) => return FaroReply::error(record.record_id, codes::INPUT_KIND, e.to_string()),
        };
        let mut templates = Vec::with_capacity(detections.len());
        for d in detections {
            match self.extract(&frame, &d.bbox) {
                Some(t) => templates.push(t),
                None => {
                    return FaroReply::error(
                        record.record_id,
                        codes::INPUT_KIND,
                        format!("detection {} lies outside the frame", d.detection_id),
                    )
                }
            }
        }
        FaroReply::ok(record.record_id, Payload::TemplateList(templates))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// All-pairs cosine similarity of a template list.
pub struct DemoScore;

impl DemoScore {
    pub fn describe() -> WorkerInfo {
        WorkerInfo::new(DEMO_SCORE, MicroserviceKind::Score)
    }
}

impl Worker for DemoScore {
    fn info(&self) -> WorkerInfo {
        Self::describe()
    }

    fn process(&self, record: &FaroRecord) -> FaroReply {
        let Payload::TemplateList(ts) = &record.payload else {
            return input_kind_error(record, "TemplateList");
        };
        if ts.windows(2).any(|w| w[0].dims() != w[1].dims()) {
            return FaroReply::error(record.record_id, codes::INPUT_KIND, "templates differ in dimension");
        }
        let labels: Vec<String> =
            ts.iter().enumerate().map(|(i, t)| t.subject_id.clone().unwrap_or_else(|| format!("t{i}"))).collect();
        let scores = ts.iter().flat_map(|a| ts.iter().map(move |b| cosine(&a.vector, &b.vector))).collect();
        let m = ScoreMatrix { rows: labels.clone(), cols: labels, scores };
        FaroReply::ok(record.record_id, Payload::ScoreMatrix(m))
    }
}

/// Returns the payload unchanged.
pub struct Echo;

impl Echo {
    pub fn describe() -> WorkerInfo {
        WorkerInfo::new(ECHO, MicroserviceKind::Generic)
    }
}

impl Worker for Echo {
    fn info(&self) -> WorkerInfo {
        Self::describe()
    }

    fn process(&self, record: &FaroRecord) -> FaroReply {
        FaroReply::ok(record.record_id, record.payload.clone())
    }
}

/// Echo after a fixed delay plus uniform random jitter.
pub struct Delay {
    pub delay: Duration,
    pub jitter: Duration,
}

impl Delay {
    pub fn describe() -> WorkerInfo {
        WorkerInfo::new(DELAY, MicroserviceKind::Generic)
            .option(OptionSpec::new("delay_ms", OptionType::Int, "0", "fixed latency per record"))
            .option(OptionSpec::new("jitter_ms", OptionType::Int, "0", "extra uniform random latency bound"))
    }

    pub fn from_options(o: &WorkerOptions) -> Result<Self, WorkerError> {
        let ms = |key: &str| -> Result<Duration, WorkerError> {
            let v = o.int(key)?;
            u64::try_from(v).map(Duration::from_millis).map_err(|_| invalid(key, "must not be negative"))
        };
        Ok(Self { delay: ms("delay_ms")?, jitter: ms("jitter_ms")? })
    }
}

impl Worker for Delay {
    fn info(&self) -> WorkerInfo {
        let mut info = Self::describe();
        info.options = BTreeMap::from([
            ("delay_ms".into(), self.delay.as_millis().to_string()),
            ("jitter_ms".into(), self.jitter.as_millis().to_string()),
        ]);
        info
    }

    fn process(&self, record: &FaroRecord) -> FaroReply {
        let extra = if self.jitter.is_zero() {
            Duration::ZERO
        } else {
            Duration::from_micros(rand::thread_rng().gen_range(0..=self.jitter.as_micros() as u64))
        };
        thread::sleep(self.delay + extra);
        FaroReply::ok(record.record_id, record.payload.clone())
    }
}
