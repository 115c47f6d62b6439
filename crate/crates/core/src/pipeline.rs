//! DAG pipelines of workers. A pipeline instance is itself a worker, so
//! pipelines nest.
//!
//! Data flow between stages: a node with one parent receives the parent's
//! output payload; a node with several parents receives a bundle keyed by
//! parent name. Every non-source stage also receives the pipeline input
//! frame in the `origin_frame` option when the input was a frame.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{
    encode_origin_frame, FaroRecord, FaroReply, Payload, PayloadKind, ReplyError, ReplyStatus, StageTiming,
    ORIGIN_FRAME_OPTION,
};
use crate::worker::{MicroserviceKind, Worker, WorkerError, WorkerInfo, WorkerRegistry};

pub const LOCAL_SERVICE: &str = "local";
/// Bounded queue depth used by [`PipelineInstance::run_stream`].
pub const STREAM_QUEUE_DEPTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PipelineMode {
    #[default]
    #[serde(rename = "FIFO", alias = "fifo")]
    Fifo,
    #[serde(rename = "UNORDERED", alias = "unordered")]
    Unordered,
}

fn local() -> String {
    LOCAL_SERVICE.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default = "local")]
    pub service: String,
    pub worker: String,
    #[serde(default)]
    pub options: BTreeMap<String, String>,
}

impl NodeSpec {
    pub fn local(name: &str, worker: &str) -> Self {
        Self { name: name.into(), service: local(), worker: worker.into(), options: BTreeMap::new() }
    }

    pub fn with_option(mut self, key: &str, value: &str) -> Self {
        self.options.insert(key.into(), value.into());
        self
    }

    pub fn is_local(&self) -> bool {
        self.service == LOCAL_SERVICE || self.service.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub name: String,
    #[serde(default)]
    pub mode: PipelineMode,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    /// Records in flight during streaming; defaults to the widest level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_inflight: Option<usize>,
}

impl PipelineSpec {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::InvalidSpec(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// A linear chain `n0 → n1 → …`.
    pub fn chain(name: &str, nodes: Vec<NodeSpec>) -> Self {
        let edges = nodes.windows(2).map(|w| (w[0].name.clone(), w[1].name.clone())).collect();
        Self { name: name.into(), mode: PipelineMode::Fifo, nodes, edges, max_inflight: None }
    }

    pub fn sources(&self) -> Vec<&str> {
        let targets: HashSet<&str> = self.edges.iter().map(|(_, t)| t.as_str()).collect();
        self.nodes.iter().map(|n| n.name.as_str()).filter(|n| !targets.contains(n)).collect()
    }

    pub fn sinks(&self) -> Vec<&str> {
        let origins: HashSet<&str> = self.edges.iter().map(|(f, _)| f.as_str()).collect();
        self.nodes.iter().map(|n| n.name.as_str()).filter(|n| !origins.contains(n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum Issue {
    EmptyPipeline,
    DuplicateNode { node: String },
    DanglingEdge { from: String, to: String, missing: String },
    Cycle { path: Vec<String> },
    NoSource,
    NoSink,
    Unreachable { node: String },
    KindMismatch { from: String, to: String, produced: String, expected: String },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::EmptyPipeline => write!(f, "pipeline has no nodes"),
            Issue::DuplicateNode { node } => write!(f, "duplicate node name `{node}`"),
            Issue::DanglingEdge { from, to, missing } => {
                write!(f, "edge {from} -> {to} references unknown node `{missing}`")
            }
            Issue::Cycle { path } => write!(f, "cycle {}", path.join(" -> ")),
            Issue::NoSource => write!(f, "no source node (every node has an in-edge)"),
            Issue::NoSink => write!(f, "no sink node (every node has an out-edge)"),
            Issue::Unreachable { node } => write!(f, "node `{node}` is unreachable from any source"),
            Issue::KindMismatch { from, to, produced, expected } => {
                write!(f, "{from} produces {produced} but {to} expects {expected}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn cycles(&self) -> Vec<&[String]> {
        self.issues
            .iter()
            .filter_map(|i| match i {
                Issue::Cycle { path } => Some(path.as_slice()),
                _ => None,
            })
            .collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.issues.iter().map(Issue::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Payload kind a microservice kind consumes; `None` accepts anything.
pub fn input_kind(kind: MicroserviceKind) -> Option<PayloadKind> {
    match kind {
        MicroserviceKind::Detect | MicroserviceKind::Transform => Some(PayloadKind::Frame),
        MicroserviceKind::Extract => Some(PayloadKind::DetectionList),
        MicroserviceKind::Score | MicroserviceKind::Enroll | MicroserviceKind::Search => {
            Some(PayloadKind::TemplateList)
        }
        MicroserviceKind::Generic => None,
    }
}

/// Payload kind a microservice kind produces; `None` may be anything.
pub fn output_kind(kind: MicroserviceKind) -> Option<PayloadKind> {
    match kind {
        MicroserviceKind::Detect => Some(PayloadKind::DetectionList),
        MicroserviceKind::Extract => Some(PayloadKind::TemplateList),
        MicroserviceKind::Score => Some(PayloadKind::ScoreMatrix),
        MicroserviceKind::Transform => Some(PayloadKind::Frame),
        MicroserviceKind::Enroll | MicroserviceKind::Search | MicroserviceKind::Generic => None,
    }
}

fn kind_name(k: PayloadKind) -> String {
    serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Checks graph structure and adjacent kinds. `kind_of` reports the
/// microservice kind of a node when known.
pub fn validate_spec(spec: &PipelineSpec, kind_of: &dyn Fn(&NodeSpec) -> Option<MicroserviceKind>) -> ValidationReport {
    let mut issues = Vec::new();
    if spec.nodes.is_empty() {
        issues.push(Issue::EmptyPipeline);
        return ValidationReport { issues };
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        if index.insert(n.name.as_str(), i).is_some() {
            issues.push(Issue::DuplicateNode { node: n.name.clone() });
        }
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); spec.nodes.len()];
    let mut has_in = vec![false; spec.nodes.len()];
    let mut has_out = vec![false; spec.nodes.len()];
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); spec.nodes.len()];
    for (from, to) in &spec.edges {
        match (index.get(from.as_str()), index.get(to.as_str())) {
            (Some(&a), Some(&b)) => {
                if !adj[a].contains(&b) {
                    adj[a].push(b);
                    parents[b].push(a);
                }
                has_out[a] = true;
                has_in[b] = true;
            }
            (a, _) => issues.push(Issue::DanglingEdge {
                from: from.clone(),
                to: to.clone(),
                missing: if a.is_none() { from.clone() } else { to.clone() },
            }),
        }
    }

    // Cycles: depth-first search, reporting each back edge's loop.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark = vec![Mark::New; spec.nodes.len()];
    let mut stack: Vec<usize> = Vec::new();
    fn dfs(
        v: usize,
        adj: &[Vec<usize>],
        mark: &mut [Mark],
        stack: &mut Vec<usize>,
        spec: &PipelineSpec,
        issues: &mut Vec<Issue>,
    ) {
        mark[v] = Mark::Open;
        stack.push(v);
        for &w in &adj[v] {
            match mark[w] {
                Mark::New => dfs(w, adj, mark, stack, spec, issues),
                Mark::Open => {
                    let at = stack.iter().position(|&s| s == w).unwrap();
                    let mut path: Vec<String> = stack[at..].iter().map(|&i| spec.nodes[i].name.clone()).collect();
                    path.push(spec.nodes[w].name.clone());
                    issues.push(Issue::Cycle { path });
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        mark[v] = Mark::Done;
    }
    for v in 0..spec.nodes.len() {
        if mark[v] == Mark::New {
            dfs(v, &adj, &mut mark, &mut stack, spec, &mut issues);
        }
    }

    let sources: Vec<usize> = (0..spec.nodes.len()).filter(|&i| !has_in[i]).collect();
    if sources.is_empty() {
        issues.push(Issue::NoSource);
    }
    if !has_out.iter().any(|o| !o) {
        issues.push(Issue::NoSink);
    }
    let mut reached = vec![false; spec.nodes.len()];
    let mut todo = sources.clone();
    while let Some(v) = todo.pop() {
        if !std::mem::replace(&mut reached[v], true) {
            todo.extend(&adj[v]);
        }
    }
    for (i, n) in spec.nodes.iter().enumerate() {
        // Duplicates are already reported; only judge the first occurrence.
        if !reached[i] && index.get(n.name.as_str()) == Some(&i) {
            issues.push(Issue::Unreachable { node: n.name.clone() });
        }
    }

    let kinds: Vec<Option<MicroserviceKind>> = spec.nodes.iter().map(kind_of).collect();
    for (child, ps) in parents.iter().enumerate() {
        let Some(expected) = kinds[child].and_then(input_kind) else { continue };
        if ps.len() > 1 {
            issues.push(Issue::KindMismatch {
                from: ps.iter().map(|&p| spec.nodes[p].name.clone()).collect::<Vec<_>>().join("+"),
                to: spec.nodes[child].name.clone(),
                produced: "BUNDLE".into(),
                expected: kind_name(expected),
            });
            continue;
        }
        for &p in ps {
            if let Some(produced) = kinds[p].and_then(output_kind) {
                if produced != expected {
                    issues.push(Issue::KindMismatch {
                        from: spec.nodes[p].name.clone(),
                        to: spec.nodes[child].name.clone(),
                        produced: kind_name(produced),
                        expected: kind_name(expected),
                    });
                }
            }
        }
    }
    ValidationReport { issues }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline spec: {0}")]
    InvalidSpec(String),
    #[error("pipeline failed validation: {0}")]
    ValidationFailed(ValidationReport),
    #[error("node `{node}`: {source}")]
    Worker { node: String, source: WorkerError },
    #[error("unresolved service `{0}`")]
    UnresolvedService(String),
}

/// Supplies workers hosted by other services.
pub trait PeerResolver: Send + Sync {
    /// True when `service` names the local service.
    fn is_local(&self, service: &str) -> bool;
    fn remote_info(&self, service: &str, worker: &str) -> Option<WorkerInfo>;
    fn resolve(&self, service: &str, node: &NodeSpec) -> Result<Arc<dyn Worker>, PipelineError>;
}

/// An executable pipeline.
pub struct PipelineInstance {
    spec: PipelineSpec,
    workers: Vec<Arc<dyn Worker>>,
    /// Node indices grouped into dependency levels, in plan order.
    levels: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    sinks: Vec<usize>,
    max_inflight: usize,
}

impl fmt::Debug for PipelineInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PipelineInstance").field("name", &self.spec.name).field("levels", &self.levels).finish()
    }
}

pub fn instantiate(
    spec: &PipelineSpec,
    registry: &WorkerRegistry,
    peers: Option<&dyn PeerResolver>,
) -> Result<PipelineInstance, PipelineError> {
    let is_local = |n: &NodeSpec| n.is_local() || peers.is_some_and(|p| p.is_local(&n.service));
    let kind_of = |n: &NodeSpec| {
        if is_local(n) {
            registry.info(&n.worker).map(|i| i.microservice_kind)
        } else {
            peers.and_then(|p| p.remote_info(&n.service, &n.worker)).map(|i| i.microservice_kind)
        }
    };
    let report = validate_spec(spec, &kind_of);
    if !report.is_ok() {
        return Err(PipelineError::ValidationFailed(report));
    }
    let mut workers = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        let w = if is_local(node) {
            registry
                .construct(&node.worker, &node.options)
                .map_err(|source| PipelineError::Worker { node: node.name.clone(), source })?
        } else {
            match peers {
                Some(p) => p.resolve(&node.service, node)?,
                None => return Err(PipelineError::UnresolvedService(node.service.clone())),
            }
        };
        workers.push(w);
    }
    Ok(PipelineInstance::from_parts(spec.clone(), workers))
}

impl PipelineInstance {
    /// Builds an instance over an already validated spec.
    fn from_parts(spec: PipelineSpec, workers: Vec<Arc<dyn Worker>>) -> Self {
        let index: HashMap<&str, usize> = spec.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); spec.nodes.len()];
        for (from, to) in &spec.edges {
            let (a, b) = (index[from.as_str()], index[to.as_str()]);
            if !parents[b].contains(&a) {
                parents[b].push(a);
            }
        }
        // Level of a node = longest path from a source.
        let mut level = vec![usize::MAX; spec.nodes.len()];
        let mut remaining: Vec<usize> = (0..spec.nodes.len()).collect();
        while !remaining.is_empty() {
            remaining.retain(|&v| {
                if parents[v].iter().all(|&p| level[p] != usize::MAX) {
                    level[v] = parents[v].iter().map(|&p| level[p] + 1).max().unwrap_or(0);
                    false
                } else {
                    true
                }
            });
        }
        let depth = level.iter().max().map_or(0, |m| m + 1);
        let mut levels = vec![Vec::new(); depth];
        for (v, &l) in level.iter().enumerate() {
            levels[l].push(v);
        }
        let has_out: HashSet<usize> = spec.edges.iter().map(|(f, _)| index[f.as_str()]).collect();
        let sinks = (0..spec.nodes.len()).filter(|v| !has_out.contains(v)).collect();
        let widest = levels.iter().map(Vec::len).max().unwrap_or(1);
        let max_inflight = spec.max_inflight.unwrap_or(widest).max(1);
        drop(index);
        Self { spec, workers, levels, parents, sinks, max_inflight }
    }

    pub fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn mode(&self) -> PipelineMode {
        self.spec.mode
    }

    pub fn max_inflight(&self) -> usize {
        self.max_inflight
    }

    /// Node names in execution order.
    pub fn plan(&self) -> Vec<&str> {
        self.levels.iter().flatten().map(|&v| self.spec.nodes[v].name.as_str()).collect()
    }

    pub fn stage_count(&self) -> usize {
        self.workers.len()
    }

    /// Info of each stage's worker, keyed by node name.
    pub fn stage_infos(&self) -> Vec<(String, WorkerInfo)> {
        self.spec.nodes.iter().zip(&self.workers).map(|(n, w)| (n.name.clone(), w.info())).collect()
    }

    fn stage_input(&self, v: usize, record: &FaroRecord, origin: Option<&str>, outputs: &[Option<Payload>]) -> FaroRecord {
        let ps = &self.parents[v];
        if ps.is_empty() {
            return record.clone();
        }
        let payload = if ps.len() == 1 {
            outputs[ps[0]].clone().expect("parent ran")
        } else {
            let entries: Vec<(String, Payload)> = ps
                .iter()
                .map(|&p| (self.spec.nodes[p].name.clone(), outputs[p].clone().expect("parent ran")))
                .collect();
            Payload::bundle(&entries).expect("stage outputs are valid payloads")
        };
        let mut input = FaroRecord { payload, ..record.clone() };
        if let Some(origin) = origin {
            input.options.entry(ORIGIN_FRAME_OPTION.to_string()).or_insert_with(|| origin.to_string());
        }
        input
    }

    /// Runs one record through every stage.
    pub fn run(&self, record: &FaroRecord) -> FaroReply {
        let origin = match &record.payload {
            Payload::Frame(f) if !record.options.contains_key(ORIGIN_FRAME_OPTION) && self.levels.len() > 1 => {
                encode_origin_frame(f).ok()
            }
            _ => None,
        };
        let mut outputs: Vec<Option<Payload>> = vec![None; self.workers.len()];
        let mut timings = Vec::with_capacity(self.workers.len());
        for level in &self.levels {
            let inputs: Vec<FaroRecord> =
                level.iter().map(|&v| self.stage_input(v, record, origin.as_deref(), &outputs)).collect();
            let timed = |v: usize, input: &FaroRecord| {
                let start = Instant::now();
                let reply = self.workers[v].process(input);
                (reply, start.elapsed().as_micros() as u64)
            };
            let results: Vec<(FaroReply, u64)> = if level.len() == 1 {
                vec![timed(level[0], &inputs[0])]
            } else {
                thread::scope(|s| {
                    let handles: Vec<_> =
                        level.iter().zip(&inputs).map(|(&v, input)| s.spawn(move || timed(v, input))).collect();
                    handles.into_iter().map(|h| h.join().expect("guarded stages do not panic")).collect()
                })
            };
            let mut failure: Option<(usize, ReplyError)> = None;
            for (&v, (reply, micros)) in level.iter().zip(results) {
                timings.push(StageTiming { stage: self.spec.nodes[v].name.clone(), micros });
                if reply.status == ReplyStatus::Error {
                    if failure.is_none() {
                        let err = reply.error.unwrap_or(ReplyError { code: "UNKNOWN".into(), message: String::new() });
                        failure = Some((v, err));
                    }
                } else {
                    outputs[v] = Some(reply.payload);
                }
            }
            if let Some((v, err)) = failure {
                return FaroReply {
                    record_id: record.record_id,
                    status: ReplyStatus::Error,
                    stage_timings: timings,
                    payload: Payload::Empty,
                    error: Some(ReplyError {
                        code: format!("STAGE:{}:{}", self.spec.nodes[v].name, err.code),
                        message: err.message,
                    }),
                };
            }
        }
        let payload = if self.sinks.len() == 1 {
            outputs[self.sinks[0]].take().expect("sink ran")
        } else {
            let entries: Vec<(String, Payload)> = self
                .sinks
                .iter()
                .map(|&v| (self.spec.nodes[v].name.clone(), outputs[v].take().expect("sink ran")))
                .collect();
            Payload::bundle(&entries).expect("sink outputs are valid payloads")
        };
        FaroReply { record_id: record.record_id, status: ReplyStatus::Ok, stage_timings: timings, payload, error: None }
    }

    /// Streams records through the pipeline with up to `max_inflight`
    /// records in progress, calling `emit` for each reply. FIFO mode emits
    /// replies in input order; UNORDERED emits them as they complete.
    /// Intake blocks when the bounded queues are full.
    pub fn run_stream<I>(&self, records: I, emit: impl FnMut(FaroReply))
    where
        I: IntoIterator<Item = FaroRecord>,
        I::IntoIter: Send,
    {
        self.run_stream_with(records, self.max_inflight, emit)
    }

    pub fn run_stream_with<I>(&self, records: I, inflight: usize, emit: impl FnMut(FaroReply))
    where
        I: IntoIterator<Item = FaroRecord>,
        I::IntoIter: Send,
    {
        stream_map(records, inflight, self.spec.mode, |r| self.run(&r), emit)
    }
}

/// Applies `f` to a stream of items on `inflight` threads with bounded
/// queues. FIFO mode emits results in input order through a reorder
/// buffer; UNORDERED emits them as they complete. Intake blocks while the
/// queues are full.
pub fn stream_map<T, I, F>(items: I, inflight: usize, mode: PipelineMode, f: F, mut emit: impl FnMut(FaroReply))
where
    T: Send,
    I: IntoIterator<Item = T>,
    I::IntoIter: Send,
    F: Fn(T) -> FaroReply + Sync,
{
    let items = items.into_iter();
    let (in_tx, in_rx) = bounded::<(u64, T)>(STREAM_QUEUE_DEPTH);
    let (out_tx, out_rx) = bounded::<(u64, FaroReply)>(STREAM_QUEUE_DEPTH);
    let f = &f;
    thread::scope(|s| {
        s.spawn(move || {
            for (i, item) in items.enumerate() {
                if in_tx.send((i as u64, item)).is_err() {
                    break;
                }
            }
        });
        for _ in 0..inflight.max(1) {
            let (in_rx, out_tx) = (in_rx.clone(), out_tx.clone());
            s.spawn(move || {
                for (i, item) in in_rx {
                    if out_tx.send((i, f(item))).is_err() {
                        break;
                    }
                }
            });
        }
        drop(out_tx);
        drop(in_rx);
        match mode {
            PipelineMode::Unordered => out_rx.iter().for_each(|(_, reply)| emit(reply)),
            PipelineMode::Fifo => {
                let mut pending = BTreeMap::new();
                let mut next = 0u64;
                for (i, reply) in out_rx {
                    pending.insert(i, reply);
                    while let Some(reply) = pending.remove(&next) {
                        emit(reply);
                        next += 1;
                    }
                }
            }
        }
    });
}

impl Worker for PipelineInstance {
    fn info(&self) -> WorkerInfo {
        let mut info = WorkerInfo::new(&self.spec.name, MicroserviceKind::Generic);
        info.resources.insert("stages".into(), self.workers.len().to_string());
        info.options.insert("mode".into(), format!("{:?}", self.spec.mode).to_uppercase());
        info
    }

    fn process(&self, record: &FaroRecord) -> FaroReply {
        self.run(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{codes, Frame};
    use crate::worker::{DEMO_DETECT, DEMO_EXTRACT, DEMO_SCORE, ECHO};

    fn kinds(n: &NodeSpec) -> Option<MicroserviceKind> {
        WorkerRegistry::with_demo_workers().info(&n.worker).map(|i| i.microservice_kind)
    }

    fn spec(nodes: &[(&str, &str)], edges: &[(&str, &str)]) -> PipelineSpec {
        PipelineSpec {
            name: "p".into(),
            mode: PipelineMode::Fifo,
            nodes: nodes.iter().map(|(n, w)| NodeSpec::local(n, w)).collect(),
            edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            max_inflight: None,
        }
    }

    #[test]
    fn chain_is_valid() {
        let s = spec(&[("a", ECHO), ("b", ECHO), ("c", ECHO)], &[("a", "b"), ("b", "c")]);
        assert!(validate_spec(&s, &kinds).is_ok());
    }

    #[test]
    fn two_cycle_path() {
        let s = spec(&[("A", ECHO), ("B", ECHO)], &[("A", "B"), ("B", "A")]);
        let r = validate_spec(&s, &kinds);
        assert_eq!(r.cycles(), vec![&["A".to_string(), "B".into(), "A".into()][..]]);
        assert!(r.issues.contains(&Issue::NoSource));
    }

    #[test]
    fn detect_to_score_mismatch() {
        let s = spec(&[("detect", DEMO_DETECT), ("score", DEMO_SCORE)], &[("detect", "score")]);
        let r = validate_spec(&s, &kinds);
        assert_eq!(
            r.issues,
            vec![Issue::KindMismatch {
                from: "detect".into(),
                to: "score".into(),
                produced: "DETECTION_LIST".into(),
                expected: "TEMPLATE_LIST".into()
            }]
        );
    }

    #[test]
    fn dangling_duplicate_unreachable() {
        let s = spec(&[("a", ECHO), ("a", ECHO)], &[("a", "zz")]);
        let r = validate_spec(&s, &kinds);
        assert!(r.issues.contains(&Issue::DuplicateNode { node: "a".into() }));
        assert!(r.issues.contains(&Issue::DanglingEdge { from: "a".into(), to: "zz".into(), missing: "zz".into() }));
        let s = spec(&[("a", ECHO), ("b", ECHO), ("c", ECHO)], &[("b", "c"), ("c", "b")]);
        let r = validate_spec(&s, &kinds);
        assert!(r.issues.contains(&Issue::Unreachable { node: "b".into() }));
        assert!(r.issues.contains(&Issue::Unreachable { node: "c".into() }));
    }

    #[test]
    fn spec_json_syntax() {
        let s = PipelineSpec::from_json(
            r#"{"name":"x","mode":"unordered","nodes":[{"name":"a","worker":"echo"}],"edges":[]}"#,
        )
        .unwrap();
        assert_eq!(s.mode, PipelineMode::Unordered);
        assert_eq!(s.nodes[0].service, "local");
        assert_eq!(PipelineSpec::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn remote_node_without_peers() {
        let mut s = spec(&[("a", ECHO)], &[]);
        s.nodes[0].service = "edge-b".into();
        let err = instantiate(&s, &WorkerRegistry::with_demo_workers(), None).unwrap_err();
        assert!(matches!(err, PipelineError::UnresolvedService(n) if n == "edge-b"));
    }

    #[test]
    fn unknown_worker_type() {
        let s = spec(&[("a", "nosuch")], &[]);
        let err = instantiate(&s, &WorkerRegistry::with_demo_workers(), None).unwrap_err();
        assert!(matches!(err, PipelineError::Worker { source: WorkerError::UnknownWorkerType(_), .. }));
    }

    #[test]
    fn levels_follow_edges() {
        let s = spec(
            &[("d", ECHO), ("a", ECHO), ("b", ECHO), ("c", ECHO)],
            &[("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")],
        );
        let p = instantiate(&s, &WorkerRegistry::with_demo_workers(), None).unwrap();
        assert_eq!(p.plan(), vec!["a", "b", "c", "d"]);
        assert_eq!(p.max_inflight(), 2);
    }

    #[test]
    fn empty_payload_into_detect() {
        let s = spec(&[("detect", DEMO_DETECT), ("extract", DEMO_EXTRACT)], &[("detect", "extract")]);
        let p = instantiate(&s, &WorkerRegistry::with_demo_workers(), None).unwrap();
        let reply = p.run(&FaroRecord::new(Payload::Empty));
        assert_eq!(reply.error_code(), Some("STAGE:detect:INPUT_KIND"));
    }

    #[test]
    fn detect_extract_one_square() {
        let s = spec(&[("detect", DEMO_DETECT), ("extract", DEMO_EXTRACT)], &[("detect", "extract")]);
        let p = instantiate(&s, &WorkerRegistry::with_demo_workers(), None).unwrap();
        let mut data = vec![0u8; 32 * 32];
        for y in 4..14 {
            for x in 6..16 {
                data[y * 32 + x] = 220;
            }
        }
        let reply = p.run(&FaroRecord::new(Payload::Frame(Frame::gray(32, 32, data).unwrap())));
        assert!(reply.is_ok(), "{reply:?}");
        assert!(matches!(&reply.payload, Payload::TemplateList(ts) if ts.len() == 1));
        let stages: Vec<_> = reply.stage_timings.iter().map(|t| t.stage.as_str()).collect();
        assert_eq!(stages, vec!["detect", "extract"]);
    }

    #[test]
    fn multi_sink_bundle_and_fan_in() {
        let s = spec(&[("a", ECHO), ("b", ECHO), ("c", ECHO)], &[("a", "b"), ("a", "c")]);
        let p = instantiate(&s, &WorkerRegistry::with_demo_workers(), None).unwrap();
        let input = Payload::generic("text/plain", b"x".to_vec());
        let reply = p.run(&FaroRecord::new(input.clone()));
        let bundle = reply.payload.as_bundle().unwrap().unwrap();
        assert_eq!(bundle, vec![("b".to_string(), input.clone()), ("c".to_string(), input.clone())]);

        let s = spec(&[("a", ECHO), ("b", ECHO), ("j", ECHO)], &[("a", "j"), ("b", "j")]);
        let p = instantiate(&s, &WorkerRegistry::with_demo_workers(), None).unwrap();
        let reply = p.run(&FaroRecord::new(input.clone()));
        let joined = reply.payload.as_bundle().unwrap().unwrap();
        assert_eq!(joined.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn pipeline_as_worker_surfaces_errors() {
        let s = spec(&[("score", DEMO_SCORE)], &[]);
        let p = instantiate(&s, &WorkerRegistry::with_demo_workers(), None).unwrap();
        let w: &dyn Worker = &p;
        assert_eq!(w.info().worker_type, "p");
        let reply = w.process(&FaroRecord::new(Payload::Empty));
        assert_eq!(reply.error_code(), Some(format!("STAGE:score:{}", codes::INPUT_KIND).as_str()));
    }

    #[test]
    fn stream_fifo_order() {
        let mut s = spec(&[("a", "delay"), ("b", "delay")], &[("a", "b")]);
        s.nodes[0].options.insert("jitter_ms".into(), "3".into());
        s.nodes[1].options.insert("jitter_ms".into(), "3".into());
        s.max_inflight = Some(6);
        let p = instantiate(&s, &WorkerRegistry::with_demo_workers(), None).unwrap();
        let records: Vec<FaroRecord> = (0..40).map(|i| FaroRecord::new(Payload::Empty).with_sequence(i)).collect();
        let ids: Vec<_> = records.iter().map(|r| r.record_id).collect();
        let mut seen = Vec::new();
        p.run_stream(records, |r| seen.push(r.record_id));
        assert_eq!(seen, ids);
    }
}
