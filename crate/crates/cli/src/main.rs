//! `faro`: run a service, or talk to one.

mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faro_net::{ClientError, KeyAlgo};

#[derive(Parser, Debug)]
#[command(name = "faro", version, about = "Distributed face recognition services and client")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Service to talk to, resolved through discovery.
    #[arg(long, global = true, env = "FARO_SERVICE", conflicts_with = "endpoint")]
    pub service: Option<String>,
    /// Service address `host:port`; skips discovery.
    #[arg(long, global = true, env = "FARO_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Use TLS to reach the service.
    #[arg(long, global = true)]
    pub tls: bool,
    /// PEM bundle of trusted certificates.
    #[arg(long, global = true, value_name = "PEM")]
    pub trust_root: Option<PathBuf>,
    /// Client certificate, for services that require one.
    #[arg(long, global = true, value_name = "PEM", requires = "key")]
    pub cert: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PEM", requires = "cert")]
    pub key: Option<PathBuf>,
    /// Name expected in the service certificate.
    #[arg(long, global = true)]
    pub server_name: Option<String>,
    /// Per-request timeout in milliseconds.
    #[arg(long, global = true, default_value_t = 30_000)]
    pub timeout: u64,
    /// Tries per request, including the first.
    #[arg(long, global = true, default_value_t = 1)]
    pub retries: u32,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a service.
    Serve(ServeArgs),
    /// Show the service's status.
    Status {
        #[arg(long)]
        json: bool,
    },
    /// List services announcing on the local network.
    Discover {
        /// How long to listen, in milliseconds; two announce intervals by default.
        #[arg(long)]
        wait_ms: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Detect faces in a PGM/PPM image.
    Detect {
        image: PathBuf,
        #[arg(long, default_value = "demo-detect")]
        target: String,
    },
    /// Extract templates from a PGM/PPM image; prints one CSV line each.
    Extract {
        image: PathBuf,
        #[arg(long, default_value = "demo-detect")]
        detector: String,
        #[arg(long, default_value = "demo-extract")]
        target: String,
    },
    /// Enroll an image or a template CSV into a gallery.
    Enroll(EnrollArgs),
    /// Search a gallery with an image or a template CSV.
    Search(SearchArgs),
    /// Inspect or edit galleries.
    Gallery {
        #[command(subcommand)]
        action: GalleryAction,
    },
    /// Declare (or replace) a pipeline from a JSON spec.
    Pdeclare { spec: PathBuf },
    /// List workers, pipelines and galleries, optionally across peers.
    Plist {
        #[arg(long)]
        recursive: bool,
        #[arg(long, default_value_t = 3)]
        depth: u32,
        #[arg(long)]
        json: bool,
    },
    /// Send one record to any worker or pipeline.
    Call(CallArgs),
    /// Stream a source through a worker or pipeline.
    Stream(StreamArgs),
    /// Stream a source, writing annotated frames and match scores.
    Watch(WatchArgs),
    /// Generate a Paillier key pair.
    KeygenPhe {
        #[arg(long, default_value_t = faro_core::phe::DEFAULT_KEY_BITS)]
        bits: u64,
        /// Private key file; the public key goes next to it as `<stem>.pub.json`.
        #[arg(long, default_value = "phe-key.json")]
        out: PathBuf,
    },
    /// Generate a self-signed TLS identity.
    KeygenTls {
        #[arg(long, default_value_t = KeyAlgo::Ed25519)]
        algo: KeyAlgo,
        #[arg(long)]
        name: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Also write a trust bundle of these certificates plus the new one.
        #[arg(long, value_name = "PEM")]
        trust: Vec<PathBuf>,
    },
    /// Time template encryption across dimensionalities.
    BenchPhe {
        /// Range `lo..hi`; powers of two in between are measured.
        #[arg(long, default_value = "1..1024")]
        dims: String,
        #[arg(long, default_value_t = faro_core::phe::DEFAULT_KEY_BITS)]
        bits: u64,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured service name.
    #[arg(long)]
    pub name: Option<String>,
    /// Overrides the configured bind address.
    #[arg(long)]
    pub bind: Option<String>,
    /// Announce on the local network.
    #[arg(long)]
    pub announce: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TemplateSource {
    /// PGM/PPM image, or a CSV of template values.
    pub input: PathBuf,
    #[arg(long, default_value = "demo-detect")]
    pub detector: String,
    #[arg(long, default_value = "demo-extract")]
    pub extractor: String,
    /// Paillier key file: encrypt the template before it leaves this host.
    #[arg(long)]
    pub phe_key: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnrollArgs {
    #[command(flatten)]
    pub source: TemplateSource,
    #[arg(long)]
    pub subject: String,
    #[arg(long)]
    pub gallery: String,
    /// Extra metadata, `key=value`.
    #[arg(long, value_parser = inputs::key_value)]
    pub meta: Vec<(String, String)>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub source: TemplateSource,
    #[arg(long)]
    pub gallery: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Subcommand, Debug)]
pub enum GalleryAction {
    List {
        #[arg(long)]
        gallery: Option<String>,
        #[arg(long, default_value_t = 0)]
        page: usize,
        #[arg(long, default_value_t = 50)]
        page_size: usize,
    },
    Delete {
        #[arg(long)]
        gallery: String,
        #[arg(long, conflicts_with = "subject", required_unless_present = "subject")]
        entry: Option<String>,
        #[arg(long)]
        subject: Option<String>,
    },
}

#[derive(Args, Debug)]
pub struct CallArgs {
    /// `service/name` or `name`.
    #[arg(long)]
    pub target: String,
    /// PGM/PPM image, template CSV, or any other file sent as raw bytes.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "application/octet-stream")]
    pub content_type: String,
    #[arg(long = "option", value_parser = inputs::key_value)]
    pub options: Vec<(String, String)>,
    /// Write a generic reply payload here instead of describing it.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    /// Image file or directory of PGM/PPM frames, or `synthetic[:seed]`.
    #[arg(long)]
    pub source: String,
    /// Stop after this many frames.
    #[arg(long)]
    pub frames: Option<u64>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long = "loop")]
    pub looping: bool,
}

#[derive(Args, Debug)]
pub struct StreamArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub target: String,
    /// Replies in submission order (the default).
    #[arg(long, conflicts_with = "unordered")]
    pub fifo: bool,
    /// Replies as soon as they are ready.
    #[arg(long)]
    pub unordered: bool,
    /// Print only the summary.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct WatchArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Worker or pipeline producing detections for each frame.
    #[arg(long, default_value = "demo-detect")]
    pub target: String,
    #[arg(long, default_value = "demo-extract")]
    pub extractor: String,
    /// Search each detected face in this gallery.
    #[arg(long)]
    pub gallery: Option<String>,
    #[arg(long)]
    pub phe_key: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// A command failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_TRANSPORT: u8 = 2;
pub const EXIT_REMOTE: u8 = 3;
pub const EXIT_LOCAL: u8 = 4;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn local(message: impl Into<String>) -> Self {
        Self { code: EXIT_LOCAL, message: message.into() }
    }

    pub fn remote(message: impl Into<String>) -> Self {
        Self { code: EXIT_REMOTE, message: message.into() }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let mut message = e.to_string();
        if let Some(report) = e.validation_report() {
            for issue in &report.issues {
                message.push_str(&format!("\n  - {issue}"));
            }
        }
        Self { code: e.exit_code() as u8, message }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("faro: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
