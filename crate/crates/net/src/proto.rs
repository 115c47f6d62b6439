//! Control bodies exchanged over the RPC transport.

use faro_core::gallery::EntrySummary;
use faro_core::pipeline::PipelineMode;
use faro_core::WorkerInfo;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// Error codes carried by `Err` frames, next to the reply codes of
/// `faro_core::message::codes`.
pub mod codes {
    pub const MALFORMED: &str = "MALFORMED";
    pub const INVALID_REQUEST: &str = "INVALID_REQUEST";
    pub const VALIDATION_FAILED: &str = "VALIDATION_FAILED";
    pub const UNRESOLVED_SERVICE: &str = "UNRESOLVED_SERVICE";
    pub const UNKNOWN_GALLERY: &str = "UNKNOWN_GALLERY";
    pub const GALLERY: &str = "GALLERY";
    pub const SHUTTING_DOWN: &str = "SHUTTING_DOWN";
}

/// Content type of a JSON body inside a Generic payload.
pub const JSON_CONTENT_TYPE: &str = "application/json";
/// Content type of encrypted search candidates awaiting the key holder.
pub const CANDIDATES_CONTENT_TYPE: &str = "application/x-faro-candidates";

pub const GALLERY_OPTION: &str = "gallery";
pub const SUBJECT_OPTION: &str = "subject";
pub const TOP_K_OPTION: &str = "top_k";
pub const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusInfo {
    pub service_name: String,
    pub version: String,
    pub endpoint: String,
    pub tls: bool,
    pub workers: Vec<String>,
    pub pipelines: Vec<String>,
    pub galleries: Vec<String>,
    pub peers: Vec<String>,
    pub sessions: usize,
    pub inflight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamOpen {
    pub target: String,
    pub mode: PipelineMode,
    #[serde(default)]
    pub inflight: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclareResult {
    pub name: String,
    pub plan: Vec<String>,
    pub replaced: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityQuery {
    pub recursive: bool,
    pub max_depth: u32,
    /// Services already present higher up in the tree.
    #[serde(default)]
    pub visited: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryInfo {
    pub name: String,
    pub encrypted: bool,
    pub dims: Option<usize>,
    pub entries: usize,
    /// True when the service can finish encrypted searches itself.
    pub key_holder: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityTree {
    pub service_name: String,
    pub endpoint: String,
    pub workers: Vec<WorkerInfo>,
    pub pipelines: Vec<WorkerInfo>,
    pub galleries: Vec<GalleryInfo>,
    pub peers: Vec<PeerCapabilities>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerCapabilities {
    pub service_name: String,
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<Box<CapabilityTree>>,
    /// Set when the peer could not be queried.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CapabilityTree {
    /// Number of times `service` appears anywhere in the tree.
    pub fn occurrences(&self, service: &str) -> usize {
        let own = usize::from(self.service_name == service);
        own + self
            .peers
            .iter()
            .map(|p| match &p.tree {
                Some(t) => t.occurrences(service),
                None => usize::from(p.service_name == service),
            })
            .sum::<usize>()
    }

    pub fn find_worker(&self, name: &str) -> Option<&WorkerInfo> {
        self.workers.iter().chain(&self.pipelines).find(|w| w.worker_type == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryListRequest {
    #[serde(default)]
    pub gallery: Option<String>,
    #[serde(default)]
    pub page: usize,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
}

fn default_page_size() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryListResponse {
    pub galleries: Vec<GalleryInfo>,
    pub entries: Vec<EntrySummary>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryDeleteRequest {
    pub gallery: String,
    #[serde(default)]
    pub entry_id: Option<Uuid>,
    #[serde(default)]
    pub subject_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryDeleteResponse {
    pub deleted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollResponse {
    pub entry_ids: Vec<Uuid>,
}

/// Splits `svc/name` into its parts; a bare name has no service.
pub fn parse_target(target: &str) -> (Option<&str>, &str) {
    match target.split_once('/') {
        Some((svc, name)) if !svc.is_empty() => (Some(svc), name),
        Some((_, name)) => (None, name),
        None => (None, target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets() {
        assert_eq!(parse_target("b/demo-detect"), (Some("b"), "demo-detect"));
        assert_eq!(parse_target("echo"), (None, "echo"));
        assert_eq!(parse_target("/echo"), (None, "echo"));
    }

    #[test]
    fn occurrences_walk_the_tree() {
        let leaf = |n: &str| CapabilityTree {
            service_name: n.into(),
            endpoint: String::new(),
            workers: vec![],
            pipelines: vec![],
            galleries: vec![],
            peers: vec![],
        };
        let mut a = leaf("a");
        a.peers.push(PeerCapabilities {
            service_name: "b".into(),
            endpoint: String::new(),
            tree: Some(Box::new(leaf("b"))),
            error: None,
        });
        a.peers.push(PeerCapabilities { service_name: "c".into(), endpoint: String::new(), tree: None, error: Some("down".into()) });
        assert_eq!(a.occurrences("b"), 1);
        assert_eq!(a.occurrences("c"), 1);
        assert_eq!(a.occurrences("a"), 1);
    }
}
