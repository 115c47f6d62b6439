//! Client for one service: unary calls over a small pool of connections
//! to that service, and record streams over a dedicated connection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use faro_core::gallery::{decode_candidates, finish_search, SearchResult};
use faro_core::message::{
    deserialize_reply, encode_origin_frame, serialize_record, Detection, FaroRecord, FaroReply, Frame, Payload,
    ORIGIN_FRAME_OPTION,
};
use faro_core::phe::{EncryptedTemplate, Keypair};
use faro_core::pipeline::{PipelineMode, PipelineSpec, ValidationReport};
use faro_core::Template;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use uuid::Uuid;

use crate::discovery::{Browser, Directory, DiscoveryConfig};
use crate::proto::{self, *};
use crate::rpc::{from_json, to_json, CallError, Channel, Kind, RpcError};
use crate::secure::{SecurityConfig, SecurityError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    /// `host:port`; discovery is not consulted.
    Endpoint(String),
    /// Service name resolved through discovery.
    Name(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total tries per call, including the first.
    pub attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 1, backoff_ms: 250 }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub target: Target,
    pub security: SecurityConfig,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub discovery: DiscoveryConfig,
    /// How long name resolution may wait for an announcement; two
    /// announce intervals plus a second when unset.
    pub resolve_wait_ms: Option<u64>,
}

impl ClientConfig {
    pub fn endpoint(endpoint: &str) -> Self {
        Self::new(Target::Endpoint(endpoint.to_string()))
    }

    pub fn name(service: &str) -> Self {
        Self::new(Target::Name(service.to_string()))
    }

    fn new(target: Target) -> Self {
        Self {
            target,
            security: SecurityConfig::plaintext(),
            timeout_ms: 30_000,
            retry: RetryPolicy::default(),
            discovery: DiscoveryConfig::default(),
            resolve_wait_ms: None,
        }
    }

    pub fn with_security(mut self, security: SecurityConfig) -> Self {
        self.security = security;
        self
    }

    pub fn with_timeout_ms(mut self, ms: u64) -> Self {
        self.timeout_ms = ms;
        self
    }

    pub fn with_retry(mut self, attempts: u32, backoff_ms: u64) -> Self {
        self.retry = RetryPolicy { attempts, backoff_ms };
        self
    }

    pub fn with_discovery(mut self, discovery: DiscoveryConfig) -> Self {
        self.discovery = discovery;
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.timeout_ms == 0 {
            return Err(ClientError::Config("timeout must be positive".into()));
        }
        if self.retry.attempts == 0 {
            return Err(ClientError::Config("retry attempts must be at least 1".into()));
        }
        match &self.target {
            Target::Endpoint(e) if e.is_empty() => Err(ClientError::Config("empty endpoint".into())),
            Target::Name(n) if n.is_empty() => Err(ClientError::Config("empty service name".into())),
            _ => Ok(()),
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot resolve {0}")]
    Resolve(String),
    #[error("cannot connect to {endpoint}: {source}")]
    Connect { endpoint: String, source: io::Error },
    #[error("handshake with {endpoint} failed: {reason}")]
    Handshake { endpoint: String, reason: String },
    #[error("transport: {0}")]
    Transport(io::Error),
    #[error("service error {}: {}", .0.code, .0.message)]
    Remote(RpcError),
    #[error("worker error {code}: {message}")]
    Worker { code: String, message: String },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Security(#[from] SecurityError),
}

impl ClientError {
    /// Process exit status for command-line use: 2 transport, 3 remote
    /// error, 4 local validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Resolve(_) | Self::Connect { .. } | Self::Handshake { .. } | Self::Transport(_) | Self::Protocol(_) => 2,
            Self::Remote(_) | Self::Worker { .. } => 3,
            Self::Config(_) | Self::Security(_) => 4,
        }
    }

    /// Validation diagnostics of a refused pipeline declaration.
    pub fn validation_report(&self) -> Option<ValidationReport> {
        match self {
            Self::Remote(e) if e.code == proto::codes::VALIDATION_FAILED => {
                e.detail.clone().and_then(|d| serde_json::from_value(d).ok())
            }
            _ => None,
        }
    }

    pub fn is_transport(&self) -> bool {
        self.exit_code() == 2
    }
}

/// Opens a channel to `endpoint`, completing the TLS handshake when `tls`
/// is set.
pub fn dial(
    endpoint: &str,
    tls: Option<&Arc<rustls::ClientConfig>>,
    server_name: Option<&str>,
    timeout: Duration,
) -> Result<Channel, ClientError> {
    let connect_err = |source| ClientError::Connect { endpoint: endpoint.to_string(), source };
    let addr = endpoint
        .to_socket_addrs()
        .map_err(connect_err)?
        .next()
        .ok_or_else(|| ClientError::Resolve(endpoint.to_string()))?;
    let sock = TcpStream::connect_timeout(&addr, timeout).map_err(connect_err)?;
    sock.set_read_timeout(Some(timeout)).map_err(connect_err)?;
    sock.set_write_timeout(Some(timeout)).map_err(connect_err)?;
    match tls {
        None => Channel::plain(sock).map_err(connect_err),
        Some(cfg) => {
            let host = server_name.map(str::to_string).unwrap_or_else(|| host_of(endpoint));
            Channel::tls_client(sock, cfg.clone(), &host)
                .map_err(|e| ClientError::Handshake { endpoint: endpoint.to_string(), reason: e.to_string() })
        }
    }
}

fn host_of(endpoint: &str) -> String {
    let host = endpoint.rsplit_once(':').map_or(endpoint, |(h, _)| h);
    host.trim_start_matches('[').trim_end_matches(']').to_string()
}

/// Waits for `name` to appear in `directory`.
pub fn wait_for_name(directory: &Directory, name: &str, wait: Duration) -> Result<String, ClientError> {
    let start = Instant::now();
    loop {
        if let Ok(ep) = directory.resolve(name) {
            return Ok(ep);
        }
        if start.elapsed() >= wait {
            return Err(ClientError::Resolve(format!("service {name:?} (not announced)")));
        }
        thread::sleep(Duration::from_millis(20));
    }
}

/// Outcome of a record stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamSummary {
    /// Distinct records sent.
    pub sent: u64,
    pub ok: u64,
    /// ERROR replies plus records never answered or never sent.
    pub error: u64,
    pub duplicates: u64,
    pub wall: Duration,
    pub mean_latency: Duration,
    /// Why the stream ended early, if it did.
    pub failure: Option<String>,
}

pub struct Client {
    config: ClientConfig,
    endpoint: Mutex<String>,
    tls: Option<Arc<rustls::ClientConfig>>,
    browser: Option<Browser>,
    pool: Mutex<Vec<Channel>>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("endpoint", &*self.endpoint.lock()).finish()
    }
}

impl Client {
    /// Resolves the target, opens a channel and checks it with a status call.
    pub fn connect(config: ClientConfig) -> Result<Self, ClientError> {
        let client = Self::lazy(config)?;
        client.status()?;
        Ok(client)
    }

    /// Like [`Client::connect`] but opens the channel on first use.
    pub fn lazy(config: ClientConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let tls = config.security.client_config()?;
        let (endpoint, browser) = match &config.target {
            Target::Endpoint(e) => (e.clone(), None),
            Target::Name(name) => {
                let browser = Browser::start(&config.discovery, Directory::new())
                    .map_err(|e| ClientError::Resolve(format!("{name}: {e}")))?;
                let wait = config
                    .resolve_wait_ms
                    .map(Duration::from_millis)
                    .unwrap_or_else(|| config.discovery.interval() * 2 + Duration::from_secs(1));
                let ep = wait_for_name(browser.directory(), name, wait)?;
                (ep, Some(browser))
            }
        };
        Ok(Self { config, endpoint: Mutex::new(endpoint), tls, browser, pool: Mutex::new(Vec::new()) })
    }

    pub fn endpoint(&self) -> String {
        self.endpoint.lock().clone()
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn open(&self) -> Result<Channel, ClientError> {
        if let (Some(b), Target::Name(name)) = (&self.browser, &self.config.target) {
            if let Ok(ep) = b.directory().resolve(name) {
                let mut cur = self.endpoint.lock();
                if *cur != ep {
                    log::info!("{name} moved from {cur} to {ep}");
                    *cur = ep;
                    self.pool.lock().clear();
                }
            }
        }
        let endpoint = self.endpoint();
        dial(&endpoint, self.tls.as_ref(), self.config.security.server_name.as_deref(), self.config.timeout())
    }

    fn backoff(&self, attempt: u32) {
        let ms = self.config.retry.backoff_ms.saturating_mul(1 << attempt.min(5));
        thread::sleep(Duration::from_millis(ms));
    }

    /// One request/response exchange with retries on transport failure.
    pub fn request(&self, kind: Kind, body: &[u8]) -> Result<Vec<u8>, ClientError> {
        let mut attempt = 0;
        loop {
            let pooled = self.pool.lock().pop();
            let outcome = match pooled {
                Some(ch) => Ok(ch),
                None => self.open(),
            }
            .and_then(|mut ch| {
                let r = ch.request(kind, body);
                match r {
                    Ok(b) => {
                        self.pool.lock().push(ch);
                        Ok(b)
                    }
                    Err(CallError::Remote(e)) => {
                        self.pool.lock().push(ch);
                        Err(ClientError::Remote(e))
                    }
                    Err(CallError::Transport(e)) => Err(ClientError::Transport(e)),
                }
            });
            match outcome {
                Err(e) if e.is_transport() && attempt + 1 < self.config.retry.attempts => {
                    log::warn!("request to {} failed ({e}); retrying", self.endpoint());
                    self.backoff(attempt);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn request_json<T: DeserializeOwned>(&self, kind: Kind, body: &[u8]) -> Result<T, ClientError> {
        let out = self.request(kind, body)?;
        from_json(&out).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn status(&self) -> Result<StatusInfo, ClientError> {
        self.request_json(Kind::Status, &[])
    }

    /// Sends `record` verbatim and returns the reply, ERROR or not.
    pub fn call(&self, record: &FaroRecord) -> Result<FaroReply, ClientError> {
        let body = serialize_record(record).map_err(|e| ClientError::Config(e.to_string()))?;
        let out = self.request(Kind::Call, &body)?;
        deserialize_reply(&out).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn call_generic(
        &self,
        target: &str,
        payload: Payload,
        options: BTreeMap<String, String>,
    ) -> Result<FaroReply, ClientError> {
        self.call(&build_record(target, payload, options))
    }

    fn call_ok(&self, record: &FaroRecord) -> Result<Payload, ClientError> {
        reply_payload(self.call(record)?)
    }

    pub fn detect(&self, target: &str, frame: &Frame) -> Result<Vec<Detection>, ClientError> {
        match self.call_ok(&build_record(target, Payload::Frame(frame.clone()), BTreeMap::new()))? {
            Payload::DetectionList(d) => Ok(d),
            other => Err(unexpected("DETECTION_LIST", &other)),
        }
    }

    /// Templates for `detections` in `frame`.
    pub fn extract(&self, target: &str, frame: &Frame, detections: &[Detection]) -> Result<Vec<Template>, ClientError> {
        let origin = encode_origin_frame(frame).map_err(|e| ClientError::Config(e.to_string()))?;
        let options = BTreeMap::from([(ORIGIN_FRAME_OPTION.to_string(), origin)]);
        match self.call_ok(&build_record(target, Payload::DetectionList(detections.to_vec()), options))? {
            Payload::TemplateList(t) => Ok(t),
            other => Err(unexpected("TEMPLATE_LIST", &other)),
        }
    }

    fn gallery_record(&self, kind: Kind, record: &FaroRecord) -> Result<Payload, ClientError> {
        let body = serialize_record(record).map_err(|e| ClientError::Config(e.to_string()))?;
        let out = self.request(kind, &body)?;
        reply_payload(deserialize_reply(&out).map_err(|e| ClientError::Protocol(e.to_string()))?)
    }

    pub fn enroll(
        &self,
        gallery: &str,
        subject: &str,
        template: &Template,
        meta: &BTreeMap<String, String>,
    ) -> Result<Uuid, ClientError> {
        self.enroll_payload(gallery, subject, Payload::TemplateList(vec![template.clone()]), meta)
    }

    /// Enrolls a template already encrypted under the gallery's key.
    pub fn enroll_encrypted(
        &self,
        gallery: &str,
        subject: &str,
        template: &EncryptedTemplate,
        meta: &BTreeMap<String, String>,
    ) -> Result<Uuid, ClientError> {
        self.enroll_payload(gallery, subject, Payload::EncryptedTemplateList(vec![template.clone()]), meta)
    }

    fn enroll_payload(
        &self,
        gallery: &str,
        subject: &str,
        payload: Payload,
        meta: &BTreeMap<String, String>,
    ) -> Result<Uuid, ClientError> {
        let mut options = BTreeMap::from([
            (GALLERY_OPTION.to_string(), gallery.to_string()),
            (SUBJECT_OPTION.to_string(), subject.to_string()),
        ]);
        options.extend(meta.iter().map(|(k, v)| (format!("{META_PREFIX}{k}"), v.clone())));
        let payload = self.gallery_record(Kind::GalleryEnroll, &build_record("", payload, options))?;
        let res: EnrollResponse = json_payload(&payload)?;
        res.entry_ids.first().copied().ok_or_else(|| ClientError::Protocol("no entry id returned".into()))
    }

    /// Searches with a plaintext probe. For an encrypted gallery whose
    /// service holds no private key, `key` finishes the scores locally.
    pub fn search(
        &self,
        gallery: &str,
        probe: &Template,
        top_k: usize,
        key: Option<&Keypair>,
    ) -> Result<SearchResult, ClientError> {
        self.search_payload(gallery, Payload::TemplateList(vec![probe.clone()]), top_k, key)
    }

    /// Searches with a probe encrypted under the gallery key, so the
    /// service never sees it in the clear.
    pub fn search_encrypted(
        &self,
        gallery: &str,
        probe: &EncryptedTemplate,
        top_k: usize,
        key: &Keypair,
    ) -> Result<SearchResult, ClientError> {
        self.search_payload(gallery, Payload::EncryptedTemplateList(vec![probe.clone()]), top_k, Some(key))
    }

    fn search_payload(
        &self,
        gallery: &str,
        payload: Payload,
        top_k: usize,
        key: Option<&Keypair>,
    ) -> Result<SearchResult, ClientError> {
        let options = BTreeMap::from([
            (GALLERY_OPTION.to_string(), gallery.to_string()),
            (TOP_K_OPTION.to_string(), top_k.to_string()),
        ]);
        match self.gallery_record(Kind::GallerySearch, &build_record("", payload, options))? {
            Payload::Generic { content_type, data } if content_type == CANDIDATES_CONTENT_TYPE => {
                let kp = key.ok_or_else(|| {
                    ClientError::Config(format!("gallery {gallery:?} is encrypted; a private key is needed to finish the search"))
                })?;
                let candidates = decode_candidates(&data).map_err(|e| ClientError::Protocol(e.to_string()))?;
                finish_search(kp, &candidates, top_k).map_err(|e| ClientError::Config(e.to_string()))
            }
            other => json_payload(&other),
        }
    }

    pub fn gallery_list(&self, request: &GalleryListRequest) -> Result<GalleryListResponse, ClientError> {
        self.request_json(Kind::GalleryList, &to_json(request))
    }

    pub fn gallery_delete(&self, request: &GalleryDeleteRequest) -> Result<usize, ClientError> {
        let r: GalleryDeleteResponse = self.request_json(Kind::GalleryDelete, &to_json(request))?;
        Ok(r.deleted)
    }

    pub fn declare_pipeline(&self, spec: &PipelineSpec) -> Result<DeclareResult, ClientError> {
        self.request_json(Kind::DeclarePipeline, &to_json(spec))
    }

    pub fn list_capabilities(&self, recursive: bool, max_depth: u32) -> Result<CapabilityTree, ClientError> {
        let q = CapabilityQuery { recursive, max_depth, visited: vec![] };
        self.request_json(Kind::ListCapabilities, &to_json(&q))
    }

    /// Streams `records` to `target` over a dedicated connection, calling
    /// `on_reply` as replies arrive. Replies are matched to records by id
    /// and repeats are dropped. On a broken connection the unanswered
    /// records are resent, up to the retry policy. `expected_total`, when
    /// known, lets records never sent count as errors.
    pub fn stream<I>(
        &self,
        target: &str,
        mode: PipelineMode,
        records: I,
        expected_total: Option<u64>,
        mut on_reply: impl FnMut(&FaroReply),
    ) -> Result<StreamSummary, ClientError>
    where
        I: Iterator<Item = FaroRecord> + Send,
    {
        let open = StreamOpen { target: target.to_string(), mode, inflight: None };
        let started = Instant::now();
        let source = Mutex::new(records);
        let st = Mutex::new(StreamState::default());
        let mut summary = StreamSummary::default();
        let mut attempt = 0;
        loop {
            let failure = match self.open_stream(&open) {
                Ok(ch) => self.stream_once(ch, &source, &st, &mut on_reply),
                Err(e) if e.is_transport() => Some(e.to_string()),
                Err(e) => return Err(e),
            };
            match failure {
                None => break,
                Some(f) if attempt + 1 < self.config.retry.attempts => {
                    log::warn!("stream to {target} broke ({f}); retrying");
                    self.backoff(attempt);
                    attempt += 1;
                }
                Some(f) => {
                    summary.failure = Some(f);
                    break;
                }
            }
        }
        let st = st.into_inner();
        let unanswered = (st.unanswered.len() as u64).saturating_sub(st.anonymous_errors);
        let unsent = expected_total.map_or(0, |t| t.saturating_sub(st.pulled));
        summary.sent = st.pulled;
        summary.ok = st.ok;
        summary.error = st.errors + unanswered + if summary.failure.is_some() { unsent } else { 0 };
        summary.duplicates = st.duplicates;
        summary.wall = started.elapsed();
        let answered = st.ok + st.errors;
        if answered > 0 {
            summary.mean_latency = st.latency_total / answered as u32;
        }
        Ok(summary)
    }

    fn open_stream(&self, open: &StreamOpen) -> Result<Channel, ClientError> {
        let mut ch = self.open()?;
        ch.request(Kind::StreamCall, &to_json(open)).map_err(|e| match e {
            CallError::Transport(e) => ClientError::Transport(e),
            CallError::Remote(e) => ClientError::Remote(e),
        })?;
        // Replies may be far apart on a slow pipeline.
        ch.writer.set_read_timeout(None);
        Ok(ch)
    }

    /// Runs one connection's worth of a stream; `Some(reason)` on failure.
    fn stream_once<I>(
        &self,
        ch: Channel,
        source: &Mutex<I>,
        st: &Mutex<StreamState>,
        on_reply: &mut impl FnMut(&FaroReply),
    ) -> Option<String>
    where
        I: Iterator<Item = FaroRecord> + Send,
    {
        let Channel { mut reader, writer } = ch;
        thread::scope(|s| {
            let w = writer.clone();
            let sender = s.spawn(move || -> io::Result<()> {
                let resend: Vec<FaroRecord> = st.lock().unanswered.values().map(|(r, _)| r.clone()).collect();
                for r in resend {
                    let body = serialize_record(&r).map_err(io::Error::other)?;
                    w.send(Kind::StreamRecord, &body)?;
                }
                loop {
                    let Some(record) = source.lock().next() else { break };
                    let body = serialize_record(&record).map_err(io::Error::other)?;
                    {
                        let mut g = st.lock();
                        g.pulled += 1;
                        let idx = g.pulled;
                        g.index.insert(record.record_id, idx);
                        g.unanswered.insert(idx, (record, Instant::now()));
                    }
                    w.send(Kind::StreamRecord, &body)?;
                }
                w.send(Kind::StreamEnd, &[])
            });
            let result = loop {
                match reader.read_frame() {
                    Ok(Some((Kind::StreamReply, body))) => {
                        let reply = match deserialize_reply(&body) {
                            Ok(r) => r,
                            Err(e) => break Some(format!("bad reply: {e}")),
                        };
                        if st.lock().accept(&reply) {
                            on_reply(&reply);
                        }
                    }
                    Ok(Some((Kind::StreamEnd, _))) => break None,
                    Ok(Some((Kind::Err, body))) => {
                        let msg = from_json::<RpcError>(&body)
                            .map(|e| format!("{}: {}", e.code, e.message))
                            .unwrap_or_else(|_| "session error".into());
                        break Some(msg);
                    }
                    Ok(Some((other, _))) => break Some(format!("unexpected {other:?} frame")),
                    Ok(None) => break Some("connection closed".into()),
                    Err(e) => break Some(e.to_string()),
                }
            };
            writer.shutdown();
            let sent = sender.join().expect("stream sender does not panic");
            match (result, sent) {
                (None, _) => None,
                (Some(r), Err(e)) => Some(format!("{r} (send: {e})")),
                (Some(r), Ok(())) => Some(r),
            }
        })
    }
}

#[derive(Default)]
struct StreamState {
    pulled: u64,
    index: HashMap<Uuid, u64>,
    unanswered: BTreeMap<u64, (FaroRecord, Instant)>,
    seen: HashSet<Uuid>,
    ok: u64,
    errors: u64,
    anonymous_errors: u64,
    duplicates: u64,
    latency_total: Duration,
}

impl StreamState {
    /// Books a reply; false for a repeat.
    fn accept(&mut self, reply: &FaroReply) -> bool {
        if reply.record_id.is_nil() {
            self.errors += 1;
            self.anonymous_errors += 1;
            return true;
        }
        if !self.seen.insert(reply.record_id) {
            self.duplicates += 1;
            return false;
        }
        if let Some(idx) = self.index.get(&reply.record_id) {
            if let Some((_, t)) = self.unanswered.remove(idx) {
                self.latency_total += t.elapsed();
            }
        }
        if reply.is_ok() {
            self.ok += 1;
        } else {
            self.errors += 1;
        }
        true
    }
}

/// The record a typed call or `call_generic` sends for the same inputs.
pub fn build_record(target: &str, payload: Payload, options: BTreeMap<String, String>) -> FaroRecord {
    let mut r = FaroRecord::new(payload).with_target(target).with_source("faro-client");
    r.options = options;
    r
}

fn reply_payload(reply: FaroReply) -> Result<Payload, ClientError> {
    if reply.is_ok() {
        return Ok(reply.payload);
    }
    let (code, message) = reply.error.map(|e| (e.code, e.message)).unwrap_or_else(|| ("UNKNOWN".into(), String::new()));
    Err(ClientError::Worker { code, message })
}

fn unexpected(want: &str, got: &Payload) -> ClientError {
    ClientError::Protocol(format!("expected {want} payload, got {:?}", got.kind()))
}

fn json_payload<T: DeserializeOwned>(p: &Payload) -> Result<T, ClientError> {
    match p {
        Payload::Generic { content_type, data } if content_type == JSON_CONTENT_TYPE => {
            serde_json::from_slice(data).map_err(|e| ClientError::Protocol(e.to_string()))
        }
        other => Err(unexpected(JSON_CONTENT_TYPE, other)),
    }
}
