//! The service node: hosts workers, declared pipelines and galleries,
//! answers RPCs, and forwards records addressed to peer services.
//!
//! Records addressed `svc/name` are forwarded to `svc` over a cached peer
//! connection; every forward appends the forwarding service to the
//! `faro.hops` option. A pipeline stage calling out appends a
//! `svc/pipeline` marker instead. The hops after the last marker form the
//! current forwarding chain; a service meeting itself in that chain, or a
//! pipeline meeting its own marker, answers LOOP_DETECTED.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::bounded;
use faro_core::gallery::{encode_candidates, finish_search, Probe};
use faro_core::message::{
    codes as reply_codes, deserialize_record, serialize_record, serialize_reply, FaroRecord, FaroReply, Payload,
    StageTiming,
};
use faro_core::phe::{Keypair, PublicKey, DEFAULT_SCALE};
use faro_core::pipeline::{
    instantiate, stream_map, NodeSpec, PeerResolver, PipelineError, PipelineInstance, PipelineSpec, LOCAL_SERVICE,
    STREAM_QUEUE_DEPTH,
};
use faro_core::{Backend, Gallery, GalleryError, MicroserviceKind, Selector, StoredTemplate, Worker, WorkerInfo, WorkerRegistry};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::client::dial;
use crate::discovery::{valid_service_name, Announcer, Browser, Capabilities, Directory, DiscoveryConfig};
use crate::proto::*;
use crate::rpc::{from_json, to_json, CallError, Channel, FrameReader, FrameWriter, Kind, RpcError};
use crate::secure::SecurityConfig;

pub const SERVICE_NAME_ENV: &str = "FARO_SERVICE_NAME";
pub const DEFAULT_TOP_K: usize = 5;
const PEER_BACKOFF_BASE: Duration = Duration::from_millis(250);
const PEER_BACKOFF_CAP: Duration = Duration::from_secs(8);
/// Record-level parallelism of a stream session whose target is not a
/// local pipeline.
const DEFAULT_SESSION_INFLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GalleryBackendKind {
    #[default]
    Plain,
    Phe,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryConfig {
    pub name: String,
    /// Store file; the gallery is in-memory when unset.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub backend: GalleryBackendKind,
    /// Paillier public key for a `phe` gallery.
    #[serde(default)]
    pub public_key_path: Option<PathBuf>,
    /// Private key, when this service may finish encrypted searches
    /// itself. Without it, search results go back to the caller as
    /// encrypted candidates.
    #[serde(default)]
    pub private_key_path: Option<PathBuf>,
    #[serde(default)]
    pub scale: Option<u64>,
}

impl GalleryConfig {
    pub fn plain(name: &str) -> Self {
        Self {
            name: name.into(),
            path: None,
            backend: GalleryBackendKind::Plain,
            public_key_path: None,
            private_key_path: None,
            scale: None,
        }
    }

    pub fn phe(name: &str, public_key_path: &Path) -> Self {
        Self { backend: GalleryBackendKind::Phe, public_key_path: Some(public_key_path.into()), ..Self::plain(name) }
    }

    pub fn with_path(mut self, path: &Path) -> Self {
        self.path = Some(path.into());
        self
    }

    pub fn with_private_key(mut self, path: &Path) -> Self {
        self.private_key_path = Some(path.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub service_name: String,
    /// `host:port`; port 0 picks a free port.
    pub bind_address: String,
    /// Host placed in announcements; the bind host (or 127.0.0.1 for a
    /// wildcard bind) when unset.
    pub advertise_host: Option<String>,
    /// Worker types callable on this service; all registered types when
    /// empty.
    pub worker_types_enabled: Vec<String>,
    pub galleries: Vec<GalleryConfig>,
    pub security: SecurityConfig,
    pub announce: bool,
    /// Listen for other services' announcements.
    pub browse: bool,
    pub discovery: DiscoveryConfig,
    /// Fixed `name -> host:port` entries for networks without multicast.
    pub static_peers: BTreeMap<String, String>,
    /// Pipelines declared at start-up.
    pub pipelines: Vec<PipelineSpec>,
    pub peer_timeout_ms: u64,
    pub handshake_timeout_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            service_name: "faro".into(),
            bind_address: "127.0.0.1:0".into(),
            advertise_host: None,
            worker_types_enabled: Vec::new(),
            galleries: Vec::new(),
            security: SecurityConfig::plaintext(),
            announce: false,
            browse: true,
            discovery: DiscoveryConfig::default(),
            static_peers: BTreeMap::new(),
            pipelines: Vec::new(),
            peer_timeout_ms: 30_000,
            handshake_timeout_ms: 10_000,
        }
    }
}

impl ServiceConfig {
    pub fn named(name: &str) -> Self {
        Self { service_name: name.into(), ..Self::default() }
    }

    /// Reads a JSON config file and applies environment overrides.
    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| ServiceError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.with_env()
    }

    /// Applies `FARO_SERVICE_NAME` and `FARO_MCAST_GROUP`.
    pub fn with_env(mut self) -> Result<Self, ServiceError> {
        if let Ok(name) = std::env::var(SERVICE_NAME_ENV) {
            if !name.is_empty() {
                self.service_name = name;
            }
        }
        self.discovery = self.discovery.with_env().map_err(|e| ServiceError::InvalidConfig(e.to_string()))?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::InvalidConfig(m));
        if !valid_service_name(&self.service_name) {
            return bad(format!("service name {:?} must match [a-z0-9-]{{1,63}}", self.service_name));
        }
        match self.bind_address.rsplit_once(':').map(|(_, p)| p.parse::<u16>()) {
            Some(Ok(_)) => {}
            _ => return bad(format!("bind address {:?} is not host:port", self.bind_address)),
        }
        if self.announce || self.browse {
            self.discovery.validate().map_err(|e| ServiceError::InvalidConfig(e.to_string()))?;
        }
        for (name, ep) in &self.static_peers {
            if !valid_service_name(name) {
                return bad(format!("static peer name {name:?} is invalid"));
            }
            crate::discovery::split_endpoint(ep).map_err(|e| ServiceError::InvalidConfig(e.to_string()))?;
        }
        if self.peer_timeout_ms == 0 || self.handshake_timeout_ms == 0 {
            return bad("timeouts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("bad credentials: {0}")]
    BadCredentials(String),
    #[error("invalid service config: {0}")]
    InvalidConfig(String),
    #[error("gallery {name}: {source}")]
    Gallery { name: String, source: GalleryError },
    #[error("pipeline {name}: {error}")]
    Pipeline { name: String, error: RpcError },
}

/// Live gauges of a running service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServiceStats {
    pub sessions: usize,
    pub inflight: usize,
    pub connections: usize,
}

struct Hosted {
    gallery: Gallery,
    key: Option<Keypair>,
}

impl Hosted {
    fn info(&self) -> GalleryInfo {
        GalleryInfo {
            name: self.gallery.name().to_string(),
            encrypted: self.gallery.backend().is_encrypted(),
            dims: self.gallery.dims(),
            entries: self.gallery.len(),
            key_holder: self.key.is_some(),
        }
    }
}

#[derive(Default)]
struct PeerState {
    endpoint: Option<String>,
    pool: Vec<Channel>,
    failures: u32,
    retry_at: Option<Instant>,
}

struct Inner {
    name: String,
    config: ServiceConfig,
    local_addr: SocketAddr,
    advertised: Mutex<(String, u16)>,
    registry: WorkerRegistry,
    workers: RwLock<HashMap<String, Arc<dyn Worker>>>,
    pipelines: RwLock<BTreeMap<String, Arc<PipelineInstance>>>,
    galleries: RwLock<BTreeMap<String, Arc<Hosted>>>,
    directory: Directory,
    peers: Mutex<HashMap<String, Arc<Mutex<PeerState>>>>,
    client_tls: Option<Arc<rustls::ClientConfig>>,
    server_tls: Option<Arc<rustls::ServerConfig>>,
    announcer: Mutex<Option<Announcer>>,
    browser: Mutex<Option<Browser>>,
    sessions: AtomicUsize,
    inflight: AtomicUsize,
    conns: Mutex<HashMap<u64, Arc<FrameWriter>>>,
    next_conn: AtomicU64,
    stopping: AtomicBool,
}

/// A running service; shuts down when dropped.
pub struct ServiceHandle {
    inner: Arc<Inner>,
    accept: Option<thread::JoinHandle<()>>,
}

impl std::fmt::Debug for ServiceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceHandle").field("name", &self.inner.name).field("addr", &self.inner.local_addr).finish()
    }
}

/// Starts a service with the demo workers registered.
pub fn start_service(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    start_with_registry(config, WorkerRegistry::with_demo_workers())
}

pub fn start_with_registry(config: ServiceConfig, registry: WorkerRegistry) -> Result<ServiceHandle, ServiceError> {
    config.validate()?;
    for w in &config.worker_types_enabled {
        if registry.info(w).is_none() {
            return Err(ServiceError::InvalidConfig(format!("enabled worker type {w:?} is not registered")));
        }
    }
    let server_tls = config.security.server_config().map_err(|e| ServiceError::BadCredentials(e.to_string()))?;
    let client_tls = config.security.client_config().map_err(|e| ServiceError::BadCredentials(e.to_string()))?;

    let listener = TcpListener::bind(&config.bind_address)
        .map_err(|source| ServiceError::BindFailure { addr: config.bind_address.clone(), source })?;
    let local_addr = listener.local_addr().map_err(|source| ServiceError::BindFailure {
        addr: config.bind_address.clone(),
        source,
    })?;
    let host = config.advertise_host.clone().unwrap_or_else(|| {
        if local_addr.ip().is_unspecified() {
            "127.0.0.1".into()
        } else {
            local_addr.ip().to_string()
        }
    });

    let directory = Directory::new();
    for (name, ep) in &config.static_peers {
        directory.add_static(name, ep).map_err(|e| ServiceError::InvalidConfig(e.to_string()))?;
    }

    let mut galleries = BTreeMap::new();
    for g in &config.galleries {
        let hosted = load_gallery(g).map_err(|source| ServiceError::Gallery { name: g.name.clone(), source })?;
        galleries.insert(g.name.clone(), Arc::new(hosted));
    }

    let inner = Arc::new(Inner {
        name: config.service_name.clone(),
        local_addr,
        advertised: Mutex::new((host, local_addr.port())),
        registry,
        workers: RwLock::new(HashMap::new()),
        pipelines: RwLock::new(BTreeMap::new()),
        galleries: RwLock::new(galleries),
        directory,
        peers: Mutex::new(HashMap::new()),
        client_tls,
        server_tls,
        announcer: Mutex::new(None),
        browser: Mutex::new(None),
        sessions: AtomicUsize::new(0),
        inflight: AtomicUsize::new(0),
        conns: Mutex::new(HashMap::new()),
        next_conn: AtomicU64::new(0),
        stopping: AtomicBool::new(false),
        config,
    });

    if inner.config.browse {
        match Browser::start(&inner.config.discovery, inner.directory.clone()) {
            Ok(b) => *inner.browser.lock() = Some(b),
            Err(e) => log::warn!("{}: discovery browsing unavailable ({e}); static peers only", inner.name),
        }
    }
    for spec in inner.config.pipelines.clone() {
        let name = spec.name.clone();
        inner.declare(spec).map_err(|error| ServiceError::Pipeline { name, error })?;
    }

    let accept_inner = inner.clone();
    let accept = thread::Builder::new()
        .name(format!("accept-{}", inner.name))
        .spawn(move || accept_loop(accept_inner, listener))
        .map_err(|source| ServiceError::BindFailure { addr: local_addr.to_string(), source })?;

    if inner.config.announce {
        let weak = Arc::downgrade(&inner);
        let caps: crate::discovery::CapabilityFn = Arc::new(move || match weak.upgrade() {
            Some(i) => i.announced_capabilities(),
            None => Capabilities::default(),
        });
        let (host, port) = inner.advertised.lock().clone();
        match Announcer::start(&inner.config.discovery, &inner.name, &host, port, caps) {
            Ok(a) => *inner.announcer.lock() = Some(a),
            Err(e) => log::warn!("{}: announcements unavailable ({e})", inner.name),
        }
    }
    log::info!(
        "service {} listening on {} ({})",
        inner.name,
        local_addr,
        if inner.server_tls.is_some() { "tls" } else { "plaintext" }
    );
    Ok(ServiceHandle { inner, accept: Some(accept) })
}

fn load_gallery(cfg: &GalleryConfig) -> Result<Hosted, GalleryError> {
    let key = match &cfg.private_key_path {
        Some(p) => Some(Keypair::load(p)?),
        None => None,
    };
    let backend = match cfg.backend {
        GalleryBackendKind::Plain => Backend::Plain,
        GalleryBackendKind::Phe => {
            let public = match (&cfg.public_key_path, &key) {
                (Some(p), _) => PublicKey::load(p)?,
                (None, Some(k)) => k.public.clone(),
                (None, None) => {
                    return Err(GalleryError::WrongTemplateKind("a phe gallery needs public_key_path".into()))
                }
            };
            if let Some(k) = &key {
                if k.public != public {
                    return Err(GalleryError::Phe(faro_core::phe::PheError::KeyMismatch));
                }
            }
            Backend::Phe { public, scale: cfg.scale.unwrap_or(DEFAULT_SCALE) }
        }
    };
    let gallery = match &cfg.path {
        Some(p) => Gallery::open(&cfg.name, backend, p)?,
        None => Gallery::new(&cfg.name, backend),
    };
    Ok(Hosted { gallery, key })
}

fn accept_loop(inner: Arc<Inner>, listener: TcpListener) {
    for conn in listener.incoming() {
        if inner.stopping.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(sock) => {
                let i = inner.clone();
                let _ = thread::Builder::new().name(format!("conn-{}", inner.name)).spawn(move || i.serve(sock));
            }
            Err(e) => {
                log::warn!("{}: accept failed: {e}", inner.name);
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

impl ServiceHandle {
    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local_addr
    }

    /// The advertised `host:port`.
    pub fn endpoint(&self) -> String {
        self.inner.endpoint()
    }

    pub fn directory(&self) -> Directory {
        self.inner.directory.clone()
    }

    pub fn route(&self, record: FaroRecord) -> FaroReply {
        self.inner.route(record)
    }

    pub fn declare_pipeline(&self, spec: PipelineSpec) -> Result<DeclareResult, RpcError> {
        self.inner.declare(spec)
    }

    pub fn capabilities(&self, recursive: bool, max_depth: u32) -> CapabilityTree {
        self.inner.capabilities(&CapabilityQuery { recursive, max_depth, visited: vec![] })
    }

    pub fn stats(&self) -> ServiceStats {
        ServiceStats {
            sessions: self.inner.sessions.load(Ordering::SeqCst),
            inflight: self.inner.inflight.load(Ordering::SeqCst),
            connections: self.inner.conns.lock().len(),
        }
    }

    /// Changes the advertised endpoint and re-announces.
    pub fn readvertise(&self, host: &str, port: u16) {
        *self.inner.advertised.lock() = (host.to_string(), port);
        if let Some(a) = &*self.inner.announcer.lock() {
            a.set_endpoint(host, port);
        }
    }

    /// Entries of a hosted gallery, for inspection.
    pub fn gallery_len(&self, name: &str) -> Option<usize> {
        self.inner.galleries.read().get(name).map(|h| h.gallery.len())
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(accept) = self.accept.take() else { return };
        let inner = &self.inner;
        inner.stopping.store(true, Ordering::SeqCst);
        if let Some(a) = inner.announcer.lock().take() {
            a.stop();
        }
        if let Some(b) = inner.browser.lock().take() {
            b.stop();
        }
        let mut wake = inner.local_addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
        let _ = accept.join();
        for (_, w) in inner.conns.lock().drain() {
            w.shutdown();
        }
        inner.peers.lock().clear();
        log::info!("service {} stopped", inner.name);
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Hops after the last pipeline marker.
fn forwarding_chain(hops: &[String]) -> &[String] {
    let start = hops.iter().rposition(|h| h.contains('/')).map_or(0, |i| i + 1);
    &hops[start..]
}

fn rpc_err(code: &str, message: impl Into<String>) -> RpcError {
    RpcError::new(code, message)
}

fn json_payload<T: Serialize>(v: &T) -> Payload {
    Payload::generic(JSON_CONTENT_TYPE, to_json(v))
}

impl Inner {
    fn endpoint(&self) -> String {
        let (h, p) = self.advertised.lock().clone();
        format!("{h}:{p}")
    }

    fn enabled(&self, worker_type: &str) -> bool {
        self.config.worker_types_enabled.is_empty() || self.config.worker_types_enabled.iter().any(|w| w == worker_type)
    }

    fn worker_names(&self) -> Vec<String> {
        let pipelines = self.pipelines.read();
        self.registry
            .worker_types()
            .into_iter()
            .filter(|w| self.enabled(w) && !pipelines.contains_key(w))
            .collect()
    }

    fn announced_capabilities(&self) -> Capabilities {
        Capabilities { workers: self.worker_names(), pipelines: self.pipelines.read().keys().cloned().collect() }
    }

    fn local_worker(&self, name: &str) -> Option<Arc<dyn Worker>> {
        if let Some(w) = self.workers.read().get(name) {
            return Some(w.clone());
        }
        if !self.enabled(name) {
            return None;
        }
        if self.registry.worker_types().iter().all(|t| t != name) {
            // ready-made instances supplied by the embedding program
            return self.registry.construct(name, &BTreeMap::new()).ok();
        }
        let w = self.registry.construct(name, &BTreeMap::new()).ok()?;
        Some(self.workers.write().entry(name.to_string()).or_insert(w).clone())
    }

    // ------------------------------------------------------------ routing

    fn route(&self, mut record: FaroRecord) -> FaroReply {
        let start = Instant::now();
        let reply = if forwarding_chain(&record.hops()).iter().any(|h| h == &self.name) {
            FaroReply::error(
                record.record_id,
                reply_codes::LOOP_DETECTED,
                format!("{} already forwarded this record (hops: {})", self.name, record.hops().join(",")),
            )
        } else {
            let target = record.target.clone();
            match parse_target(&target) {
                (Some(svc), _) if svc != self.name && svc != LOCAL_SERVICE => {
                    record.push_hop(&self.name);
                    self.forward(svc, &record)
                }
                (_, name) => self.dispatch_local(name, &record),
            }
        };
        let mut reply = reply;
        reply.record_id = record.record_id;
        reply.stage_timings.push(StageTiming {
            stage: format!("route@{}", self.name),
            micros: start.elapsed().as_micros() as u64,
        });
        reply
    }

    fn dispatch_local(&self, name: &str, record: &FaroRecord) -> FaroReply {
        let pipeline = self.pipelines.read().get(name).cloned();
        if let Some(p) = pipeline {
            let marker = format!("{}/{}", self.name, name);
            if record.hops().contains(&marker) {
                return FaroReply::error(
                    record.record_id,
                    reply_codes::LOOP_DETECTED,
                    format!("pipeline {marker} re-entered (hops: {})", record.hops().join(",")),
                );
            }
            let mut r = record.clone();
            r.push_hop(&marker);
            return p.run(&r);
        }
        match self.local_worker(name) {
            Some(w) => w.process(record),
            None => FaroReply::error(
                record.record_id,
                reply_codes::UNKNOWN_TARGET,
                format!("{} hosts no worker or pipeline named {name:?}", self.name),
            ),
        }
    }

    fn forward(&self, svc: &str, record: &FaroRecord) -> FaroReply {
        let body = match serialize_record(record) {
            Ok(b) => b,
            Err(e) => return FaroReply::error(record.record_id, reply_codes::MALFORMED, e.to_string()),
        };
        match self.peer_request(svc, Kind::Call, &body) {
            Ok(out) => match faro_core::message::deserialize_reply(&out) {
                Ok(reply) => reply,
                Err(e) => FaroReply::error(record.record_id, reply_codes::PEER_UNAVAILABLE, format!("{svc}: {e}")),
            },
            Err(e) => FaroReply::error(record.record_id, reply_codes::PEER_UNAVAILABLE, e),
        }
    }

    fn peer_slot(&self, svc: &str) -> Arc<Mutex<PeerState>> {
        self.peers.lock().entry(svc.to_string()).or_default().clone()
    }

    /// One exchange with a peer, over a cached connection when possible.
    fn peer_request(&self, svc: &str, kind: Kind, body: &[u8]) -> Result<Vec<u8>, String> {
        let endpoint = self.directory.resolve(svc).map_err(|e| e.to_string())?;
        let slot = self.peer_slot(svc);
        for _ in 0..2 {
            let (mut ch, pooled) = {
                let mut st = slot.lock();
                if st.endpoint.as_deref() != Some(endpoint.as_str()) {
                    if let Some(old) = &st.endpoint {
                        log::info!("{}: peer {svc} moved from {old} to {endpoint}", self.name);
                    }
                    *st = PeerState { endpoint: Some(endpoint.clone()), ..PeerState::default() };
                }
                match st.pool.pop() {
                    Some(ch) => (ch, true),
                    None => {
                        if let Some(at) = st.retry_at {
                            if Instant::now() < at {
                                return Err(format!("{svc} unreachable at {endpoint}; retrying later"));
                            }
                        }
                        drop(st);
                        let timeout = Duration::from_millis(self.config.peer_timeout_ms);
                        match dial(&endpoint, self.client_tls.as_ref(), self.config.security.server_name.as_deref(), timeout) {
                            Ok(ch) => {
                                let mut st = slot.lock();
                                st.failures = 0;
                                st.retry_at = None;
                                (ch, false)
                            }
                            Err(e) => {
                                let mut st = slot.lock();
                                st.failures += 1;
                                let backoff = PEER_BACKOFF_BASE
                                    .saturating_mul(1 << (st.failures - 1).min(6))
                                    .min(PEER_BACKOFF_CAP);
                                st.retry_at = Some(Instant::now() + backoff);
                                return Err(format!("{svc} at {endpoint}: {e}"));
                            }
                        }
                    }
                }
            };
            match ch.request(kind, body) {
                Ok(out) => {
                    slot.lock().pool.push(ch);
                    return Ok(out);
                }
                Err(CallError::Remote(e)) => {
                    slot.lock().pool.push(ch);
                    return Err(format!("{svc}: {}: {}", e.code, e.message));
                }
                // A cached connection may have gone stale; try once on a fresh one.
                Err(CallError::Transport(_)) if pooled => continue,
                Err(CallError::Transport(e)) => return Err(format!("{svc} at {endpoint}: {e}")),
            }
        }
        Err(format!("{svc} at {endpoint}: connection lost"))
    }

    fn peer_capabilities(&self, svc: &str, q: &CapabilityQuery) -> Result<CapabilityTree, String> {
        let out = self.peer_request(svc, Kind::ListCapabilities, &to_json(q))?;
        from_json(&out).map_err(|e| e.to_string())
    }

    // ----------------------------------------------------------- pipelines

    fn declare(self: &Arc<Self>, spec: PipelineSpec) -> Result<DeclareResult, RpcError> {
        let valid_name = !spec.name.is_empty()
            && spec.name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
        if !valid_name {
            return Err(rpc_err(codes::INVALID_REQUEST, format!("pipeline name {:?} is invalid", spec.name)));
        }
        if self.registry.worker_types().contains(&spec.name) {
            return Err(rpc_err(codes::INVALID_REQUEST, format!("{:?} is already a worker type", spec.name)));
        }
        for n in &spec.nodes {
            let local = n.is_local() || n.service == self.name;
            if !local && !n.options.is_empty() {
                return Err(rpc_err(
                    codes::INVALID_REQUEST,
                    format!("node {:?} runs on {} and cannot take options", n.name, n.service),
                ));
            }
        }
        let resolver = Resolver { inner: Arc::downgrade(self), pipeline: spec.name.clone() };
        let instance = instantiate(&spec, &self.registry, Some(&resolver)).map_err(|e| match e {
            PipelineError::ValidationFailed(report) => RpcError {
                code: codes::VALIDATION_FAILED.into(),
                message: report.to_string(),
                detail: serde_json::to_value(&report).ok(),
            },
            PipelineError::UnresolvedService(s) => rpc_err(codes::UNRESOLVED_SERVICE, format!("service {s:?} is not known")),
            other => rpc_err(codes::INVALID_REQUEST, other.to_string()),
        })?;
        let plan = instance.plan().into_iter().map(str::to_string).collect();
        let instance = Arc::new(instance);
        let replaced = self.pipelines.write().insert(spec.name.clone(), instance.clone()).is_some();
        self.registry.register_instance(&spec.name, instance);
        log::info!("{}: pipeline {} {}", self.name, spec.name, if replaced { "replaced" } else { "declared" });
        if let Some(a) = &*self.announcer.lock() {
            a.trigger();
        }
        Ok(DeclareResult { name: spec.name, plan, replaced })
    }

    // -------------------------------------------------------- capabilities

    fn capabilities(&self, q: &CapabilityQuery) -> CapabilityTree {
        let workers = self.worker_names().iter().filter_map(|w| self.registry.info(w)).collect();
        let pipelines = self.pipelines.read().values().map(|p| p.info()).collect();
        let galleries = self.galleries.read().values().map(|h| h.info()).collect();
        let mut tree = CapabilityTree {
            service_name: self.name.clone(),
            endpoint: self.endpoint(),
            workers,
            pipelines,
            galleries,
            peers: Vec::new(),
        };
        if q.recursive && q.max_depth == 0 {
            return tree;
        }
        let snapshot = self.directory.snapshot();
        let names: Vec<String> =
            snapshot.names().into_iter().filter(|n| n != &self.name && !q.visited.contains(n)).collect();
        let mut visited = q.visited.clone();
        visited.push(self.name.clone());
        visited.extend(names.iter().cloned());
        for name in names {
            let endpoint = snapshot.resolve(&name).unwrap_or_default();
            let mut peer = PeerCapabilities { service_name: name.clone(), endpoint, tree: None, error: None };
            if q.recursive {
                let sub = CapabilityQuery { recursive: true, max_depth: q.max_depth - 1, visited: visited.clone() };
                match self.peer_capabilities(&name, &sub) {
                    Ok(t) => peer.tree = Some(Box::new(t)),
                    Err(e) => peer.error = Some(e),
                }
            }
            tree.peers.push(peer);
        }
        tree
    }

    fn status(&self) -> StatusInfo {
        StatusInfo {
            service_name: self.name.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
            endpoint: self.endpoint(),
            tls: self.server_tls.is_some(),
            workers: self.worker_names(),
            pipelines: self.pipelines.read().keys().cloned().collect(),
            galleries: self.galleries.read().keys().cloned().collect(),
            peers: self.directory.snapshot().names().into_iter().filter(|n| n != &self.name).collect(),
            sessions: self.sessions.load(Ordering::SeqCst),
            inflight: self.inflight.load(Ordering::SeqCst),
        }
    }

    // ----------------------------------------------------------- galleries

    fn hosted(&self, record: &FaroRecord) -> Result<Arc<Hosted>, Box<FaroReply>> {
        let name = record.options.get(GALLERY_OPTION).ok_or_else(|| {
            Box::new(FaroReply::error(record.record_id, reply_codes::INVALID_OPTIONS, "missing `gallery` option"))
        })?;
        self.galleries.read().get(name).cloned().ok_or_else(|| {
            let msg = format!("{} hosts no gallery {name:?}", self.name);
            Box::new(FaroReply::error(record.record_id, codes::UNKNOWN_GALLERY, msg))
        })
    }

    fn gallery_enroll(&self, record: &FaroRecord) -> FaroReply {
        let hosted = match self.hosted(record) {
            Ok(h) => h,
            Err(reply) => return *reply,
        };
        let id = record.record_id;
        let meta: BTreeMap<String, String> = record
            .options
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(META_PREFIX).map(|k| (k.to_string(), v.clone())))
            .collect();
        let subject_opt = record.options.get(SUBJECT_OPTION);
        let templates: Vec<(Option<String>, StoredTemplate)> = match &record.payload {
            Payload::TemplateList(ts) => ts.iter().map(|t| (t.subject_id.clone(), StoredTemplate::Plain(t.clone()))).collect(),
            Payload::EncryptedTemplateList(ts) => {
                ts.iter().map(|t| (t.subject_id.clone(), StoredTemplate::Encrypted(t.clone()))).collect()
            }
            other => {
                return FaroReply::error(
                    id,
                    reply_codes::INPUT_KIND,
                    format!("enroll expects a template list, got {:?}", other.kind()),
                )
            }
        };
        if templates.is_empty() {
            return FaroReply::error(id, reply_codes::INPUT_KIND, "no template to enroll");
        }
        let mut entry_ids = Vec::new();
        for (subject, t) in templates {
            let Some(subject) = subject_opt.cloned().or(subject) else {
                return FaroReply::error(id, reply_codes::INVALID_OPTIONS, "no subject id given");
            };
            match hosted.gallery.enroll(&subject, t, meta.clone()) {
                Ok(e) => entry_ids.push(e),
                Err(e) => return FaroReply::error(id, codes::GALLERY, e.to_string()),
            }
        }
        FaroReply::ok(id, json_payload(&EnrollResponse { entry_ids }))
    }

    fn gallery_search(&self, record: &FaroRecord) -> FaroReply {
        let hosted = match self.hosted(record) {
            Ok(h) => h,
            Err(reply) => return *reply,
        };
        let id = record.record_id;
        let top_k = match record.options.get(TOP_K_OPTION).map(|v| v.parse::<usize>()) {
            None => DEFAULT_TOP_K,
            Some(Ok(k)) => k,
            Some(Err(_)) => return FaroReply::error(id, reply_codes::INVALID_OPTIONS, "`top_k` must be an integer"),
        };
        let g = &hosted.gallery;
        let outcome = match (&record.payload, g.backend().is_encrypted()) {
            (Payload::TemplateList(ts), false) if ts.len() == 1 => g.search(&ts[0], top_k, None).map(|r| json_payload(&r)),
            (Payload::TemplateList(ts), true) if ts.len() == 1 => match &hosted.key {
                Some(k) => g.search(&ts[0], top_k, Some(k)).map(|r| json_payload(&r)),
                None => g
                    .encrypted_candidates(Probe::Plain(&ts[0]))
                    .map(|c| Payload::generic(CANDIDATES_CONTENT_TYPE, encode_candidates(&c))),
            },
            (Payload::EncryptedTemplateList(ts), true) if ts.len() == 1 => {
                g.encrypted_candidates(Probe::Encrypted(&ts[0])).and_then(|c| match &hosted.key {
                    Some(k) => finish_search(k, &c, top_k).map(|r| json_payload(&r)),
                    None => Ok(Payload::generic(CANDIDATES_CONTENT_TYPE, encode_candidates(&c))),
                })
            }
            (Payload::EncryptedTemplateList(_), false) => {
                return FaroReply::error(id, codes::GALLERY, "plaintext gallery cannot take an encrypted probe")
            }
            (other, _) => {
                return FaroReply::error(
                    id,
                    reply_codes::INPUT_KIND,
                    format!("search expects one probe template, got {:?}", other.kind()),
                )
            }
        };
        match outcome {
            Ok(p) => FaroReply::ok(id, p),
            Err(e) => FaroReply::error(id, codes::GALLERY, e.to_string()),
        }
    }

    fn gallery_list(&self, req: &GalleryListRequest) -> Result<GalleryListResponse, RpcError> {
        let galleries = self.galleries.read();
        let infos = galleries.values().map(|h| h.info()).collect();
        let (entries, total) = match &req.gallery {
            None => (Vec::new(), galleries.len()),
            Some(name) => {
                let h = galleries.get(name).ok_or_else(|| rpc_err(codes::UNKNOWN_GALLERY, format!("no gallery {name:?}")))?;
                h.gallery.list_entries(req.page, req.page_size.max(1))
            }
        };
        Ok(GalleryListResponse { galleries: infos, entries, total })
    }

    fn gallery_delete(&self, req: &GalleryDeleteRequest) -> Result<GalleryDeleteResponse, RpcError> {
        let h = self
            .galleries
            .read()
            .get(&req.gallery)
            .cloned()
            .ok_or_else(|| rpc_err(codes::UNKNOWN_GALLERY, format!("no gallery {:?}", req.gallery)))?;
        let selector = match (&req.entry_id, &req.subject_id) {
            (Some(e), None) => Selector::Entry(*e),
            (None, Some(s)) => Selector::Subject(s.clone()),
            _ => return Err(rpc_err(codes::INVALID_REQUEST, "give exactly one of entry_id or subject_id")),
        };
        let deleted = h.gallery.delete(&selector).map_err(|e| rpc_err(codes::GALLERY, e.to_string()))?;
        Ok(GalleryDeleteResponse { deleted })
    }

    // --------------------------------------------------------- connections

    fn serve(self: Arc<Self>, sock: TcpStream) {
        let peer = sock.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        if self.stopping.load(Ordering::SeqCst) {
            return;
        }
        let _ = sock.set_read_timeout(Some(Duration::from_millis(self.config.handshake_timeout_ms)));
        let ch = match &self.server_tls {
            Some(cfg) => match Channel::tls_server(sock, cfg.clone()) {
                Ok(ch) => ch,
                Err(e) => {
                    log::warn!("{}: refused {peer}: {e}", self.name);
                    return;
                }
            },
            None => match Channel::plain(sock) {
                Ok(ch) => ch,
                Err(_) => return,
            },
        };
        ch.writer.set_read_timeout(None);
        let id = self.next_conn.fetch_add(1, Ordering::SeqCst);
        self.conns.lock().insert(id, ch.writer.clone());
        let Channel { mut reader, writer } = ch;
        loop {
            match reader.read_frame() {
                Ok(Some((kind, body))) => {
                    if !self.handle(kind, body, &mut reader, &writer) {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    log::debug!("{}: connection from {peer} closed: {e}", self.name);
                    break;
                }
            }
        }
        self.conns.lock().remove(&id);
        writer.shutdown();
    }

    /// Answers one request; false when the connection should close.
    fn handle(self: &Arc<Self>, kind: Kind, body: Vec<u8>, reader: &mut FrameReader, writer: &Arc<FrameWriter>) -> bool {
        if self.stopping.load(Ordering::SeqCst) {
            let _ = writer.send_json(Kind::Err, &rpc_err(codes::SHUTTING_DOWN, "service is stopping"));
            return false;
        }
        let result: Result<Vec<u8>, RpcError> = match kind {
            Kind::Status => Ok(to_json(&self.status())),
            Kind::Call => self.with_record(&body, |r| self.counted(|| self.route(r))),
            Kind::GalleryEnroll => self.with_record(&body, |r| self.gallery_enroll(&r)),
            Kind::GallerySearch => self.with_record(&body, |r| self.gallery_search(&r)),
            Kind::GalleryList => parse(&body).and_then(|q| self.gallery_list(&q)).map(|r| to_json(&r)),
            Kind::GalleryDelete => parse(&body).and_then(|q| self.gallery_delete(&q)).map(|r| to_json(&r)),
            Kind::DeclarePipeline => parse(&body).and_then(|s| self.declare(s)).map(|r| to_json(&r)),
            Kind::ListCapabilities => parse(&body).map(|q| to_json(&self.capabilities(&q))),
            Kind::StreamCall => match parse::<StreamOpen>(&body) {
                Ok(open) => return self.stream_session(open, reader, writer),
                Err(e) => Err(e),
            },
            other => Err(rpc_err(codes::INVALID_REQUEST, format!("{other:?} is not a request"))),
        };
        let sent = match result {
            Ok(out) => writer.send(Kind::Ok, &out),
            Err(e) => writer.send_json(Kind::Err, &e),
        };
        sent.is_ok()
    }

    fn with_record(&self, body: &[u8], f: impl FnOnce(FaroRecord) -> FaroReply) -> Result<Vec<u8>, RpcError> {
        let record = deserialize_record(body).map_err(|e| rpc_err(codes::MALFORMED, e.to_string()))?;
        serialize_reply(&f(record)).map_err(|e| rpc_err(codes::MALFORMED, e.to_string()))
    }

    fn counted<T>(&self, f: impl FnOnce() -> T) -> T {
        self.inflight.fetch_add(1, Ordering::SeqCst);
        let out = f();
        self.inflight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    /// Runs a record stream until the client ends it; false when the
    /// connection is no longer usable.
    fn stream_session(self: &Arc<Self>, open: StreamOpen, reader: &mut FrameReader, writer: &Arc<FrameWriter>) -> bool {
        if writer.send(Kind::Ok, &[]).is_err() {
            return false;
        }
        self.sessions.fetch_add(1, Ordering::SeqCst);
        let peer = writer.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        let inflight = open.inflight.filter(|&n| n > 0).unwrap_or_else(|| {
            let local = match parse_target(&open.target) {
                (Some(svc), name) if svc == self.name => Some(name),
                (None, name) => Some(name),
                _ => None,
            };
            local
                .and_then(|n| self.pipelines.read().get(n).map(|p| p.max_inflight()))
                .unwrap_or(DEFAULT_SESSION_INFLIGHT)
        });
        let cancelled = AtomicBool::new(false);
        let released = AtomicUsize::new(0);
        let (tx, rx) = bounded::<Result<FaroRecord, String>>(STREAM_QUEUE_DEPTH);
        let clean = thread::scope(|s| {
            let cancelled = &cancelled;
            let intake = s.spawn(move || {
                let clean = loop {
                    match reader.read_frame() {
                        Ok(Some((Kind::StreamRecord, body))) => {
                            let item = deserialize_record(&body).map_err(|e| e.to_string());
                            if tx.send(item).is_err() {
                                break false;
                            }
                        }
                        Ok(Some((Kind::StreamEnd, _))) => break true,
                        Ok(Some((other, _))) => {
                            if tx.send(Err(format!("unexpected {other:?} frame in stream"))).is_err() {
                                break false;
                            }
                        }
                        Ok(None) | Err(_) => break false,
                    }
                };
                if !clean {
                    cancelled.store(true, Ordering::SeqCst);
                }
                clean
            });
            stream_map(
                rx,
                inflight,
                open.mode,
                |item| {
                    if cancelled.load(Ordering::SeqCst) {
                        released.fetch_add(1, Ordering::SeqCst);
                        let id = item.map(|r| r.record_id).unwrap_or_default();
                        return FaroReply::error(id, reply_codes::SESSION, "session closed");
                    }
                    match item {
                        Ok(mut record) => {
                            if record.target.is_empty() {
                                record.target = open.target.clone();
                            }
                            self.counted(|| self.route(record))
                        }
                        Err(msg) => FaroReply::error(Uuid::nil(), reply_codes::MALFORMED, msg),
                    }
                },
                |reply| {
                    if cancelled.load(Ordering::SeqCst) {
                        return;
                    }
                    let sent = serialize_reply(&reply)
                        .map_err(io::Error::other)
                        .and_then(|b| writer.send(Kind::StreamReply, &b));
                    if sent.is_err() {
                        cancelled.store(true, Ordering::SeqCst);
                        writer.shutdown();
                    }
                },
            );
            intake.join().unwrap_or(false)
        });
        self.sessions.fetch_sub(1, Ordering::SeqCst);
        let usable = clean && !cancelled.load(Ordering::SeqCst) && writer.send(Kind::StreamEnd, &[]).is_ok();
        if !usable {
            log::info!(
                "{}: stream session from {peer} torn down ({} queued records released)",
                self.name,
                released.load(Ordering::SeqCst)
            );
        }
        usable
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, RpcError> {
    from_json(body).map_err(|e| rpc_err(codes::MALFORMED, e.to_string()))
}

/// Resolves pipeline nodes placed on other services.
struct Resolver {
    inner: Weak<Inner>,
    pipeline: String,
}

impl PeerResolver for Resolver {
    fn is_local(&self, service: &str) -> bool {
        service == LOCAL_SERVICE || self.inner.upgrade().is_some_and(|i| i.name == service)
    }

    fn remote_info(&self, service: &str, worker: &str) -> Option<WorkerInfo> {
        let inner = self.inner.upgrade()?;
        let q = CapabilityQuery { recursive: true, max_depth: 0, visited: vec![] };
        let tree = inner.peer_capabilities(service, &q).ok()?;
        tree.find_worker(worker).cloned()
    }

    fn resolve(&self, service: &str, node: &NodeSpec) -> Result<Arc<dyn Worker>, PipelineError> {
        let inner = self.inner.upgrade().ok_or_else(|| PipelineError::UnresolvedService(service.to_string()))?;
        if inner.directory.resolve(service).is_err() {
            return Err(PipelineError::UnresolvedService(service.to_string()));
        }
        let info = self
            .remote_info(service, &node.worker)
            .unwrap_or_else(|| WorkerInfo::new(&node.worker, MicroserviceKind::Generic));
        Ok(Arc::new(RemoteWorker {
            inner: self.inner.clone(),
            service: service.to_string(),
            worker: node.worker.clone(),
            info,
            pipeline: self.pipeline.clone(),
        }))
    }
}

/// A pipeline stage running on a peer service.
struct RemoteWorker {
    inner: Weak<Inner>,
    service: String,
    worker: String,
    info: WorkerInfo,
    pipeline: String,
}

impl Worker for RemoteWorker {
    fn info(&self) -> WorkerInfo {
        let mut info = self.info.clone();
        info.resources.insert("service".into(), self.service.clone());
        info.reentrant = true;
        info
    }

    fn process(&self, record: &FaroRecord) -> FaroReply {
        let Some(inner) = self.inner.upgrade() else {
            return FaroReply::error(record.record_id, reply_codes::PEER_UNAVAILABLE, "service stopped");
        };
        let mut r = record.clone();
        r.target = format!("{}/{}", self.service, self.worker);
        let marker = format!("{}/{}", inner.name, self.pipeline);
        if r.hops().last() != Some(&marker) {
            r.push_hop(&marker);
        }
        r.push_hop(&inner.name);
        let mut reply = inner.forward(&self.service, &r);
        reply.record_id = record.record_id;
        reply
    }
}
