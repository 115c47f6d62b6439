//! Core of the FaRO distributed inference framework: message envelopes,
//! frame sources, workers, DAG pipelines, template galleries and Paillier
//! encryption. Networking lives in `faro-net`.

pub mod gallery;
pub mod media;
pub mod message;
pub mod phe;
pub mod pipeline;
pub mod wire;
pub mod worker;

pub use gallery::{Backend, Gallery, GalleryError, ScoreKind, SearchHit, SearchResult, Selector, StoredTemplate};
pub use media::{open_source, MediaError, Source, SourceConfig, SourceKind, SyntheticScene, SyntheticSquare};
pub use message::{
    BoundingBox, Detection, FaroRecord, FaroReply, Frame, Message, MessageError, Options, Payload, PayloadKind,
    PixelFormat, ReplyError, ReplyStatus, ScoreMatrix, StageTiming, Template,
};
pub use pipeline::{
    instantiate, validate_spec, NodeSpec, PeerResolver, PipelineError, PipelineInstance, PipelineMode, PipelineSpec,
    ValidationReport,
};
pub use worker::{MicroserviceKind, Worker, WorkerError, WorkerInfo, WorkerOptions, WorkerRegistry};
