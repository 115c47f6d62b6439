//! Zero-configuration announcement and browsing over UDP multicast.
//!
//! Each service periodically multicasts a small JSON datagram naming
//! itself and its endpoint. Browsers keep the latest unexpired
//! announcement per name, so a service that moves to a new address is
//! found again after its next announcement.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, UdpSocket};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{bounded, select, tick, Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use socket2::{Domain, Protocol, SockAddr, Socket, Type};

pub const MAGIC: &str = "FARO-ZC1";
pub const DEFAULT_GROUP: Ipv4Addr = Ipv4Addr::new(239, 255, 42, 99);
pub const DEFAULT_PORT: u16 = 5354;
pub const DEFAULT_INTERVAL_MS: u64 = 5000;
pub const DEFAULT_TTL_SECONDS: u32 = 15;
pub const MAX_DATAGRAM: usize = 1400;
pub const GROUP_ENV: &str = "FARO_MCAST_GROUP";

#[derive(Debug, thiserror::Error)]
pub enum DiscoveryError {
    #[error("multicast socket unavailable: {0}")]
    SocketUnavailable(#[from] io::Error),
    #[error("malformed announcement: {0}")]
    Malformed(String),
    #[error("service {0:?} not found")]
    NotFound(String),
    #[error("invalid discovery config: {0}")]
    InvalidConfig(String),
}

/// Service names are lowercase DNS-label style: `[a-z0-9-]{1,63}`.
pub fn valid_service_name(name: &str) -> bool {
    (1..=63).contains(&name.len()) && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub group: Ipv4Addr,
    pub port: u16,
    pub interval_ms: u64,
    pub ttl_seconds: u32,
    /// Interface address for joining and sending; default route plus
    /// loopback when unset.
    pub interface: Option<Ipv4Addr>,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            group: DEFAULT_GROUP,
            port: DEFAULT_PORT,
            interval_ms: DEFAULT_INTERVAL_MS,
            ttl_seconds: DEFAULT_TTL_SECONDS,
            interface: None,
        }
    }
}

impl DiscoveryConfig {
    /// Applies `FARO_MCAST_GROUP` (`a.b.c.d` or `a.b.c.d:port`) if set.
    pub fn with_env(mut self) -> Result<Self, DiscoveryError> {
        if let Ok(v) = std::env::var(GROUP_ENV) {
            self.apply_group(&v)?;
        }
        Ok(self)
    }

    pub fn apply_group(&mut self, v: &str) -> Result<(), DiscoveryError> {
        let bad = || DiscoveryError::InvalidConfig(format!("bad multicast group {v:?}"));
        let (ip, port) = match v.rsplit_once(':') {
            Some((ip, port)) => (ip, Some(port.parse::<u16>().map_err(|_| bad())?)),
            None => (v, None),
        };
        let ip: Ipv4Addr = ip.trim().parse().map_err(|_| bad())?;
        if !ip.is_multicast() {
            return Err(bad());
        }
        self.group = ip;
        if let Some(p) = port {
            self.port = p;
        }
        Ok(())
    }

    pub fn interval(&self) -> Duration {
        Duration::from_millis(self.interval_ms)
    }

    pub fn validate(&self) -> Result<(), DiscoveryError> {
        if !self.group.is_multicast() {
            return Err(DiscoveryError::InvalidConfig(format!("{} is not a multicast group", self.group)));
        }
        if self.interval_ms == 0 {
            return Err(DiscoveryError::InvalidConfig("interval must be positive".into()));
        }
        if (self.ttl_seconds as u64) * 1000 < 2 * self.interval_ms {
            return Err(DiscoveryError::InvalidConfig(format!(
                "ttl {}s is shorter than two announce intervals ({} ms)",
                self.ttl_seconds, self.interval_ms
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceAnnouncement {
    pub magic: String,
    pub service_name: String,
    pub host: String,
    pub port: u16,
    pub version: String,
    pub workers: Vec<String>,
    pub pipelines: Vec<String>,
    pub ttl_seconds: u32,
    /// Seconds since the Unix epoch.
    pub announce_time: f64,
    #[serde(default)]
    pub truncated: bool,
}

impl ServiceAnnouncement {
    pub fn new(service_name: &str, host: &str, port: u16, caps: &Capabilities, ttl_seconds: u32) -> Self {
        Self {
            magic: MAGIC.to_string(),
            service_name: service_name.to_string(),
            host: host.to_string(),
            port,
            version: env!("CARGO_PKG_VERSION").to_string(),
            workers: caps.workers.clone(),
            pipelines: caps.pipelines.clone(),
            ttl_seconds,
            announce_time: unix_now(),
            truncated: false,
        }
    }

    pub fn endpoint(&self) -> String {
        if self.host.contains(':') {
            format!("[{}]:{}", self.host, self.port)
        } else {
            format!("{}:{}", self.host, self.port)
        }
    }

    pub fn expires_at(&self) -> f64 {
        self.announce_time + self.ttl_seconds as f64
    }

    pub fn is_expired(&self, now: f64) -> bool {
        self.expires_at() < now
    }

    /// Serializes to at most [`MAX_DATAGRAM`] bytes, dropping trailing
    /// capability names (and setting `truncated`) when needed.
    pub fn encode(&self) -> Vec<u8> {
        let mut a = self.clone();
        loop {
            let bytes = serde_json::to_vec(&a).expect("announcement serializes");
            if bytes.len() <= MAX_DATAGRAM || (a.workers.is_empty() && a.pipelines.is_empty()) {
                return bytes;
            }
            a.truncated = true;
            if a.pipelines.len() >= a.workers.len() {
                a.pipelines.pop();
            } else {
                a.workers.pop();
            }
        }
    }

    pub fn decode(data: &[u8]) -> Result<Self, DiscoveryError> {
        if data.len() > MAX_DATAGRAM {
            return Err(DiscoveryError::Malformed(format!("{} byte datagram", data.len())));
        }
        let a: Self = serde_json::from_slice(data).map_err(|e| DiscoveryError::Malformed(e.to_string()))?;
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), DiscoveryError> {
        let bad = |m: String| Err(DiscoveryError::Malformed(m));
        if self.magic != MAGIC {
            return bad(format!("bad magic {:?}", self.magic));
        }
        if !valid_service_name(&self.service_name) {
            return bad(format!("bad service name {:?}", self.service_name));
        }
        if self.host.is_empty() || self.port == 0 {
            return bad(format!("bad endpoint {}:{}", self.host, self.port));
        }
        if !self.announce_time.is_finite() || self.ttl_seconds == 0 {
            return bad("bad timing fields".into());
        }
        Ok(())
    }
}

/// What a service currently offers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub workers: Vec<String>,
    pub pipelines: Vec<String>,
}

pub type CapabilityFn = Arc<dyn Fn() -> Capabilities + Send + Sync>;

fn recv_socket(cfg: &DiscoveryConfig) -> io::Result<UdpSocket> {
    let sock = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
    sock.set_reuse_address(true)?;
    #[cfg(unix)]
    sock.set_reuse_port(true)?;
    sock.bind(&SockAddr::from(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, cfg.port)))?;
    let ifaces: Vec<Ipv4Addr> = match cfg.interface {
        Some(i) => vec![i],
        None => vec![Ipv4Addr::UNSPECIFIED, Ipv4Addr::LOCALHOST],
    };
    let mut joined = 0;
    let mut last_err = None;
    for iface in ifaces {
        match sock.join_multicast_v4(&cfg.group, &iface) {
            Ok(()) => joined += 1,
            Err(e) => last_err = Some(e),
        }
    }
    if joined == 0 {
        return Err(last_err.unwrap_or_else(|| io::Error::other("no interface joined")));
    }
    sock.set_multicast_loop_v4(true)?;
    Ok(sock.into())
}

fn send_socket(cfg: &DiscoveryConfig, iface: Option<Ipv4Addr>) -> io::Result<UdpSocket> {
    let sock = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
    sock.set_multicast_loop_v4(true)?;
    sock.set_multicast_ttl_v4(1)?;
    if let Some(i) = iface.or(cfg.interface) {
        sock.set_multicast_if_v4(&i)?;
    }
    sock.bind(&SockAddr::from(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0)))?;
    Ok(sock.into())
}

/// Sends one datagram, falling back to the loopback interface when the
/// default route cannot carry multicast.
struct Sender4 {
    cfg: DiscoveryConfig,
    sock: UdpSocket,
    loopback: Option<UdpSocket>,
}

impl Sender4 {
    fn new(cfg: &DiscoveryConfig) -> io::Result<Self> {
        Ok(Self { cfg: cfg.clone(), sock: send_socket(cfg, None)?, loopback: None })
    }

    fn send(&mut self, data: &[u8]) -> io::Result<()> {
        let dest = SocketAddr::V4(SocketAddrV4::new(self.cfg.group, self.cfg.port));
        if let Some(lo) = &self.loopback {
            return lo.send_to(data, dest).map(|_| ());
        }
        match self.sock.send_to(data, dest) {
            Ok(_) => Ok(()),
            Err(e) if self.cfg.interface.is_none() => {
                log::debug!("multicast send on default route failed ({e}); using loopback");
                let lo = send_socket(&self.cfg, Some(Ipv4Addr::LOCALHOST))?;
                lo.send_to(data, dest)?;
                self.loopback = Some(lo);
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// Sends one announcement right away; handy for tests and one-shot tools.
pub fn send_announcement(cfg: &DiscoveryConfig, ann: &ServiceAnnouncement) -> Result<(), DiscoveryError> {
    Sender4::new(cfg)?.send(&ann.encode())?;
    Ok(())
}

enum AnnouncerCmd {
    Now,
    Stop,
}

/// Background announcer; stops when dropped.
pub struct Announcer {
    cmd: Sender<AnnouncerCmd>,
    endpoint: Arc<Mutex<(String, u16)>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl Announcer {
    pub fn start(
        cfg: &DiscoveryConfig,
        service_name: &str,
        host: &str,
        port: u16,
        capabilities: CapabilityFn,
    ) -> Result<Self, DiscoveryError> {
        cfg.validate()?;
        if !valid_service_name(service_name) {
            return Err(DiscoveryError::InvalidConfig(format!("bad service name {service_name:?}")));
        }
        let mut sender = Sender4::new(cfg)?;
        let endpoint = Arc::new(Mutex::new((host.to_string(), port)));
        let (tx, rx) = bounded::<AnnouncerCmd>(8);
        let name = service_name.to_string();
        let ttl = cfg.ttl_seconds;
        let ticker = tick(cfg.interval());
        let ep = endpoint.clone();
        let thread = thread::Builder::new()
            .name(format!("announce-{name}"))
            .spawn(move || {
                let mut announce = || {
                    let (host, port) = ep.lock().clone();
                    let ann = ServiceAnnouncement::new(&name, &host, port, &capabilities(), ttl);
                    if let Err(e) = sender.send(&ann.encode()) {
                        log::warn!("announcement for {name} not sent: {e}");
                    }
                };
                announce();
                loop {
                    select! {
                        recv(ticker) -> _ => announce(),
                        recv(rx) -> cmd => match cmd {
                            Ok(AnnouncerCmd::Now) => announce(),
                            Ok(AnnouncerCmd::Stop) | Err(_) => break,
                        },
                    }
                }
            })
            .map_err(DiscoveryError::SocketUnavailable)?;
        Ok(Self { cmd: tx, endpoint, thread: Some(thread) })
    }

    /// Sends an announcement now, e.g. after the capability set changed.
    pub fn trigger(&self) {
        let _ = self.cmd.try_send(AnnouncerCmd::Now);
    }

    /// Changes the advertised endpoint and re-announces immediately.
    pub fn set_endpoint(&self, host: &str, port: u16) {
        *self.endpoint.lock() = (host.to_string(), port);
        self.trigger();
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.cmd.send(AnnouncerCmd::Stop);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Announcer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Point-in-time view of the directory: unexpired entries only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DirectorySnapshot {
    pub entries: BTreeMap<String, ServiceAnnouncement>,
}

impl DirectorySnapshot {
    pub fn resolve(&self, service_name: &str) -> Result<String, DiscoveryError> {
        self.entries
            .get(service_name)
            .map(ServiceAnnouncement::endpoint)
            .ok_or_else(|| DiscoveryError::NotFound(service_name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

/// Shared name table fed by browsers and static configuration.
#[derive(Clone, Default)]
pub struct Directory {
    entries: Arc<RwLock<HashMap<String, ServiceAnnouncement>>>,
    statics: Arc<RwLock<HashMap<String, ServiceAnnouncement>>>,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an announcement unless a newer one for the name is held.
    pub fn observe(&self, ann: ServiceAnnouncement) -> bool {
        let mut entries = self.entries.write();
        match entries.get(&ann.service_name) {
            Some(old) if old.announce_time > ann.announce_time => false,
            _ => {
                entries.insert(ann.service_name.clone(), ann);
                true
            }
        }
    }

    /// Adds a fixed endpoint that never expires; live announcements for
    /// the same name take precedence.
    pub fn add_static(&self, service_name: &str, endpoint: &str) -> Result<(), DiscoveryError> {
        let (host, port) = split_endpoint(endpoint)?;
        let mut ann = ServiceAnnouncement::new(service_name, &host, port, &Capabilities::default(), u32::MAX);
        ann.announce_time = 0.0;
        self.statics.write().insert(service_name.to_string(), ann);
        Ok(())
    }

    pub fn snapshot(&self) -> DirectorySnapshot {
        let now = unix_now();
        let mut out: BTreeMap<String, ServiceAnnouncement> = self.statics.read().clone().into_iter().collect();
        let mut entries = self.entries.write();
        entries.retain(|_, a| !a.is_expired(now));
        for (k, v) in entries.iter() {
            out.insert(k.clone(), v.clone());
        }
        DirectorySnapshot { entries: out }
    }

    pub fn resolve(&self, service_name: &str) -> Result<String, DiscoveryError> {
        let now = unix_now();
        if let Some(a) = self.entries.read().get(service_name) {
            if !a.is_expired(now) {
                return Ok(a.endpoint());
            }
        }
        self.statics
            .read()
            .get(service_name)
            .map(ServiceAnnouncement::endpoint)
            .ok_or_else(|| DiscoveryError::NotFound(service_name.to_string()))
    }
}

pub fn split_endpoint(endpoint: &str) -> Result<(String, u16), DiscoveryError> {
    let bad = || DiscoveryError::InvalidConfig(format!("bad endpoint {endpoint:?}"));
    let (host, port) = endpoint.rsplit_once(':').ok_or_else(bad)?;
    let port: u16 = port.parse().map_err(|_| bad())?;
    let host = host.trim_start_matches('[').trim_end_matches(']');
    if host.is_empty() || port == 0 {
        return Err(bad());
    }
    Ok((host.to_string(), port))
}

/// Background listener feeding a [`Directory`]; stops when dropped.
pub struct Browser {
    directory: Directory,
    stop: Sender<()>,
    thread: Option<thread::JoinHandle<()>>,
    received: Arc<std::sync::atomic::AtomicU64>,
}

impl Browser {
    pub fn start(cfg: &DiscoveryConfig, directory: Directory) -> Result<Self, DiscoveryError> {
        let sock = recv_socket(cfg)?;
        sock.set_read_timeout(Some(Duration::from_millis(100)))?;
        let (tx, rx): (Sender<()>, Receiver<()>) = bounded(1);
        let dir = directory.clone();
        let received = Arc::new(std::sync::atomic::AtomicU64::new(0));
        let count = received.clone();
        let thread = thread::Builder::new()
            .name("discovery-browse".into())
            .spawn(move || {
                let mut buf = vec![0u8; 65536];
                while rx.try_recv().is_err() {
                    let n = match sock.recv_from(&mut buf) {
                        Ok((n, _)) => n,
                        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
                        Err(e) => {
                            log::warn!("discovery receive failed: {e}");
                            thread::sleep(Duration::from_millis(100));
                            continue;
                        }
                    };
                    match ServiceAnnouncement::decode(&buf[..n]) {
                        Ok(ann) => {
                            count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                            dir.observe(ann);
                        }
                        Err(e) => log::debug!("dropped datagram: {e}"),
                    }
                }
            })
            .map_err(DiscoveryError::SocketUnavailable)?;
        Ok(Self { directory, stop: tx, thread: Some(thread), received })
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    pub fn snapshot(&self) -> DirectorySnapshot {
        self.directory.snapshot()
    }

    /// Valid announcements accepted so far.
    pub fn received(&self) -> u64 {
        self.received.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.stop.try_send(());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Browser {
    fn drop(&mut self) {
        self.shutdown();
    }
}
