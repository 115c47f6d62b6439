use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use faro_core::media::{annotate, open_source, write_pnm, SourceConfig};
use faro_core::phe::bench::{encryption_sweep, linear_fit, power_of_two_dims, sweep_csv};
use faro_core::phe::{encrypt_template, Keypair, PublicKey, DEFAULT_SCALE};
use faro_core::{FaroRecord, FaroReply, Frame, Payload, PipelineMode, PipelineSpec, SearchResult, Template};
use faro_net::discovery::{Browser, Directory, DiscoveryConfig};
use faro_net::proto::{CapabilityTree, GalleryDeleteRequest, GalleryListRequest};
use faro_net::secure::write_trust_bundle;
use faro_net::{generate_identity, start_service, Client, ClientConfig, SecurityConfig, ServiceConfig, StreamSummary};
use rand::SeedableRng;

use crate::inputs::{format_template, read_payload, template_from};
use crate::{Cli, Command, Failure, GalleryAction, Global, SourceArgs, TemplateSource};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Serve(a) => serve(a),
        Command::Status { json } => {
            let s = connect(g)?.status()?;
            if *json {
                print_json(&s);
            } else {
                println!("service   {} ({})", s.service_name, s.version);
                println!("endpoint  {}{}", s.endpoint, if s.tls { " tls" } else { "" });
                println!("workers   {}", s.workers.join(" "));
                println!("pipelines {}", s.pipelines.join(" "));
                println!("galleries {}", s.galleries.join(" "));
                println!("peers     {}", s.peers.join(" "));
                println!("sessions  {} inflight {}", s.sessions, s.inflight);
            }
            Ok(())
        }
        Command::Discover { wait_ms, json } => discover(*wait_ms, *json),
        Command::Detect { image, target } => {
            let frame = crate::inputs::read_image(image)?;
            for d in connect(g)?.detect(target, &frame)? {
                println!("{} {} {} {} {} {:.4} {}", d.detection_id, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score, d.label);
            }
            Ok(())
        }
        Command::Extract { image, detector, target } => {
            let frame = crate::inputs::read_image(image)?;
            let client = connect(g)?;
            let detections = client.detect(detector, &frame)?;
            for t in client.extract(target, &frame, &detections)? {
                println!("{}", format_template(&t));
            }
            Ok(())
        }
        Command::Enroll(a) => {
            let client = connect(g)?;
            let t = template_from(&client, &a.source)?;
            let meta: BTreeMap<String, String> = a.meta.iter().cloned().collect();
            let id = match &a.source.phe_key {
                Some(path) => {
                    let pk = PublicKey::load(path).map_err(|e| Failure::local(e.to_string()))?;
                    let enc = encrypt_template(&pk, &t, DEFAULT_SCALE, &mut rand::thread_rng())
                        .map_err(|e| Failure::local(e.to_string()))?;
                    client.enroll_encrypted(&a.gallery, &a.subject, &enc, &meta)?
                }
                None => client.enroll(&a.gallery, &a.subject, &t, &meta)?,
            };
            println!("{id}");
            Ok(())
        }
        Command::Search(a) => {
            let client = connect(g)?;
            let res = search(&client, &a.source, &a.gallery, a.top_k)?;
            if a.json {
                print_json(&res);
            } else {
                for (rank, h) in res.hits.iter().enumerate() {
                    println!("{} {} {:.6} {}", rank + 1, h.subject_id, h.score, h.entry_id);
                }
            }
            Ok(())
        }
        Command::Gallery { action } => gallery(g, action),
        Command::Pdeclare { spec } => {
            let text = fs::read_to_string(spec).map_err(|e| Failure::local(format!("{}: {e}", spec.display())))?;
            let spec = PipelineSpec::from_json(&text).map_err(|e| Failure::local(e.to_string()))?;
            let r = connect(g)?.declare_pipeline(&spec)?;
            println!("{} {}: {}", if r.replaced { "replaced" } else { "declared" }, r.name, r.plan.join(" "));
            Ok(())
        }
        Command::Plist { recursive, depth, json } => {
            let tree = connect(g)?.list_capabilities(*recursive, *depth)?;
            if *json {
                print_json(&tree);
            } else {
                print_tree(&tree, 0);
            }
            Ok(())
        }
        Command::Call(a) => {
            let payload = match &a.input {
                Some(p) => read_payload(p, &a.content_type)?,
                None => Payload::Empty,
            };
            let options = a.options.iter().cloned().collect();
            let reply = connect(g)?.call_generic(&a.target, payload, options)?;
            report_reply(&reply, a.output.as_deref())
        }
        Command::Stream(a) => {
            let mode = if a.unordered { PipelineMode::Unordered } else { PipelineMode::Fifo };
            let (records, expected) = records(&a.source)?;
            let quiet = a.quiet;
            let summary = connect(g)?.stream(&a.target, mode, records, expected, |r| {
                if !quiet {
                    println!("{}", reply_line(r));
                }
            })?;
            finish_stream(&summary)
        }
        Command::Watch(a) => watch(g, a),
        Command::KeygenPhe { bits, out } => {
            let kp = Keypair::generate(*bits, &mut rand::rngs::OsRng).map_err(|e| Failure::local(e.to_string()))?;
            let public = public_path(out);
            kp.save(out).map_err(|e| Failure::local(e.to_string()))?;
            kp.public.save(&public).map_err(|e| Failure::local(e.to_string()))?;
            println!("private {}\npublic  {}\nkey id  {}", out.display(), public.display(), kp.public.key_id.short());
            Ok(())
        }
        Command::KeygenTls { algo, name, out_dir, trust } => {
            fs::create_dir_all(out_dir).map_err(|e| Failure::local(format!("{}: {e}", out_dir.display())))?;
            let id = generate_identity(name, *algo, out_dir).map_err(|e| Failure::local(e.to_string()))?;
            println!("cert {}\nkey  {}", id.cert_path.display(), id.key_path.display());
            if !trust.is_empty() {
                let bundle = out_dir.join(format!("{name}.trust.pem"));
                let mut certs: Vec<&Path> = trust.iter().map(|p| p.as_path()).collect();
                certs.push(&id.cert_path);
                write_trust_bundle(&bundle, &certs).map_err(|e| Failure::local(e.to_string()))?;
                println!("trust {}", bundle.display());
            }
            Ok(())
        }
        Command::BenchPhe { dims, bits, reps, seed, out } => bench_phe(dims, *bits, *reps, *seed, out.as_deref()),
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn client_config(g: &Global) -> Result<ClientConfig, Failure> {
    let mut cfg = match (&g.endpoint, &g.service) {
        (Some(ep), _) => ClientConfig::endpoint(ep),
        (None, Some(name)) => ClientConfig::name(name),
        (None, None) => return Err(Failure::usage("give --service <name> or --endpoint <host:port>")),
    };
    if g.tls {
        cfg.security = SecurityConfig {
            enabled: true,
            cert_path: g.cert.clone(),
            key_path: g.key.clone(),
            trust_root_path: g.trust_root.clone(),
            server_name: g.server_name.clone(),
            ..SecurityConfig::default()
        };
    }
    cfg.discovery = DiscoveryConfig::default().with_env().map_err(|e| Failure::local(e.to_string()))?;
    cfg = cfg.with_timeout_ms(g.timeout).with_retry(g.retries.max(1), 250);
    Ok(cfg)
}

fn connect(g: &Global) -> Result<Client, Failure> {
    Ok(Client::connect(client_config(g)?)?)
}

fn serve(a: &crate::ServeArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::from_file(p).map_err(|e| Failure::local(e.to_string()))?,
        None => ServiceConfig::default().with_env().map_err(|e| Failure::local(e.to_string()))?,
    };
    if let Some(n) = &a.name {
        cfg.service_name = n.clone();
    }
    if let Some(b) = &a.bind {
        cfg.bind_address = b.clone();
    }
    cfg.announce |= a.announce;
    let svc = start_service(cfg).map_err(|e| match e {
        faro_net::ServiceError::BindFailure { .. } => Failure { code: crate::EXIT_TRANSPORT, message: e.to_string() },
        other => Failure::local(other.to_string()),
    })?;
    println!("{} listening on {}", svc.name(), svc.endpoint());
    let _ = std::io::stdout().flush();
    loop {
        thread::park();
    }
}

fn discover(wait_ms: Option<u64>, json: bool) -> Result<(), Failure> {
    let cfg = DiscoveryConfig::default().with_env().map_err(|e| Failure::local(e.to_string()))?;
    let wait = wait_ms.map(Duration::from_millis).unwrap_or(cfg.interval() * 2);
    let browser = Browser::start(&cfg, Directory::new()).map_err(|e| Failure { code: crate::EXIT_TRANSPORT, message: e.to_string() })?;
    thread::sleep(wait);
    let snap = browser.snapshot();
    if json {
        print_json(&snap.entries.values().collect::<Vec<_>>());
    } else {
        for a in snap.entries.values() {
            println!("{} {} workers={} pipelines={}", a.service_name, a.endpoint(), a.workers.join(","), a.pipelines.join(","));
        }
    }
    Ok(())
}

fn search(client: &Client, src: &TemplateSource, gallery: &str, top_k: usize) -> Result<SearchResult, Failure> {
    let t = template_from(client, src)?;
    search_template(client, &t, gallery, top_k, src.phe_key.as_deref())
}

fn search_template(client: &Client, t: &Template, gallery: &str, top_k: usize, key: Option<&Path>) -> Result<SearchResult, Failure> {
    match key {
        Some(path) => {
            let kp = Keypair::load(path).map_err(|e| Failure::local(format!("{}: {e} (searching needs the private key)", path.display())))?;
            let enc = encrypt_template(&kp.public, t, DEFAULT_SCALE, &mut rand::thread_rng())
                .map_err(|e| Failure::local(e.to_string()))?;
            Ok(client.search_encrypted(gallery, &enc, top_k, &kp)?)
        }
        None => Ok(client.search(gallery, t, top_k, None)?),
    }
}

fn gallery(g: &Global, action: &GalleryAction) -> Result<(), Failure> {
    let client = connect(g)?;
    match action {
        GalleryAction::List { gallery, page, page_size } => {
            let req = GalleryListRequest { gallery: gallery.clone(), page: *page, page_size: *page_size };
            let r = client.gallery_list(&req)?;
            if gallery.is_none() {
                for i in &r.galleries {
                    let dims = i.dims.map_or("-".to_string(), |d| d.to_string());
                    let kind = if i.encrypted { "phe" } else { "plain" };
                    println!("{} {kind} dims={dims} entries={}", i.name, i.entries);
                }
            } else {
                for e in &r.entries {
                    println!("{} {} {}{}", e.entry_id, e.subject_id, e.modality, if e.encrypted { " encrypted" } else { "" });
                }
                println!("{} of {} entries", r.entries.len(), r.total);
            }
        }
        GalleryAction::Delete { gallery, entry, subject } => {
            let entry_id = match entry {
                Some(e) => Some(e.parse().map_err(|_| Failure::usage(format!("{e:?} is not an entry id")))?),
                None => None,
            };
            let req = GalleryDeleteRequest { gallery: gallery.clone(), entry_id, subject_id: subject.clone() };
            println!("deleted {}", client.gallery_delete(&req)?);
        }
    }
    Ok(())
}

fn print_tree(t: &CapabilityTree, depth: usize) {
    let pad = "  ".repeat(depth);
    println!("{pad}{} {}", t.service_name, t.endpoint);
    for w in &t.workers {
        println!("{pad}  worker   {} {:?}", w.worker_type, w.microservice_kind);
    }
    for p in &t.pipelines {
        println!("{pad}  pipeline {}", p.worker_type);
    }
    for g in &t.galleries {
        println!("{pad}  gallery  {} entries={}{}", g.name, g.entries, if g.encrypted { " phe" } else { "" });
    }
    for peer in &t.peers {
        match (&peer.tree, &peer.error) {
            (Some(sub), _) => print_tree(sub, depth + 1),
            (None, Some(e)) => println!("{pad}  {} {} unreachable: {e}", peer.service_name, peer.endpoint),
            (None, None) => println!("{pad}  peer {} {}", peer.service_name, peer.endpoint),
        }
    }
}

fn describe(p: &Payload) -> String {
    match p {
        Payload::Frame(f) => format!("FRAME {}x{} {:?}", f.width, f.height, f.pixel_format),
        Payload::DetectionList(d) => format!("DETECTION_LIST {}", d.len()),
        Payload::TemplateList(t) => format!("TEMPLATE_LIST {}", t.len()),
        Payload::EncryptedTemplateList(t) => format!("ENCRYPTED_TEMPLATE_LIST {}", t.len()),
        Payload::ScoreMatrix(m) => format!("SCORE_MATRIX {}x{}", m.rows.len(), m.cols.len()),
        Payload::Generic { content_type, data } => format!("GENERIC {content_type} {} bytes", data.len()),
        Payload::Empty => "EMPTY".into(),
    }
}

fn reply_line(r: &FaroReply) -> String {
    match &r.error {
        Some(e) => format!("{} ERROR {} {}", r.record_id, e.code, e.message),
        None => format!("{} OK {}", r.record_id, describe(&r.payload)),
    }
}

fn report_reply(reply: &FaroReply, output: Option<&Path>) -> Result<(), Failure> {
    if let Some(e) = &reply.error {
        return Err(Failure::remote(format!("{}: {}", e.code, e.message)));
    }
    for t in &reply.stage_timings {
        eprintln!("{:>10} us  {}", t.micros, t.stage);
    }
    if let Some(path) = output {
        let bytes = match &reply.payload {
            Payload::Generic { data, .. } => data.clone(),
            Payload::Frame(f) => faro_core::media::encode_pnm(f),
            Payload::TemplateList(ts) => ts.iter().map(|t| format_template(t) + "\n").collect::<String>().into_bytes(),
            other => return Err(Failure::local(format!("cannot write a {} payload to a file", describe(other)))),
        };
        fs::write(path, bytes).map_err(|e| Failure::local(format!("{}: {e}", path.display())))?;
        return Ok(());
    }
    match &reply.payload {
        Payload::DetectionList(ds) => {
            for d in ds {
                println!("{} {} {} {} {} {:.4} {}", d.detection_id, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score, d.label);
            }
        }
        Payload::TemplateList(ts) => ts.iter().for_each(|t| println!("{}", format_template(t))),
        Payload::Generic { data, .. } => match std::str::from_utf8(data) {
            Ok(text) => println!("{text}"),
            Err(_) => println!("{}", describe(&reply.payload)),
        },
        other => println!("{}", describe(other)),
    }
    Ok(())
}

/// Records from a source, with the count when it is known up front.
type Records = Box<dyn Iterator<Item = FaroRecord> + Send>;

fn records(a: &SourceArgs) -> Result<(Records, Option<u64>), Failure> {
    let mut cfg = SourceConfig::parse(&a.source).with_loop(a.looping);
    if let Some(fps) = a.fps {
        cfg = cfg.with_fps(fps);
    }
    let source = open_source(&cfg).map_err(|e| Failure::local(e.to_string()))?;
    Ok(match a.frames {
        Some(n) => (Box::new(source.take(n as usize)), Some(n)),
        None => (Box::new(source), None),
    })
}

fn finish_stream(s: &StreamSummary) -> Result<(), Failure> {
    let fps = if s.wall.as_secs_f64() > 0.0 { (s.ok + s.error) as f64 / s.wall.as_secs_f64() } else { 0.0 };
    println!(
        "sent={} ok={} error={} duplicates={} wall={:.3}s mean_latency={:.3}ms fps={:.1}",
        s.sent,
        s.ok,
        s.error,
        s.duplicates,
        s.wall.as_secs_f64(),
        s.mean_latency.as_secs_f64() * 1e3,
        fps
    );
    match &s.failure {
        Some(f) => Err(Failure { code: crate::EXIT_TRANSPORT, message: format!("stream failed: {f}") }),
        None if s.error > 0 => Err(Failure::remote(format!("{} records failed", s.error))),
        None => Ok(()),
    }
}

fn watch(g: &Global, a: &crate::WatchArgs) -> Result<(), Failure> {
    fs::create_dir_all(&a.out).map_err(|e| Failure::local(format!("{}: {e}", a.out.display())))?;
    let client = connect(g)?;
    let (source, expected) = records(&a.source)?;
    let frames: Arc<Mutex<HashMap<_, (u64, Frame)>>> = Arc::default();
    let keep = frames.clone();
    let source = source.inspect(move |r| {
        if let Payload::Frame(f) = &r.payload {
            keep.lock().expect("frame map").insert(r.record_id, (r.sequence_no, f.clone()));
        }
    });
    let scores_path = a.out.join("scores.csv");
    let mut scores = fs::File::create(&scores_path).map_err(|e| Failure::local(format!("{}: {e}", scores_path.display())))?;
    writeln!(scores, "frame_seq,subject_id,score").map_err(|e| Failure::local(e.to_string()))?;
    let mut problem: Option<Failure> = None;
    let summary = client.stream(&a.target, PipelineMode::Fifo, source, expected, |reply| {
        let Some((seq, frame)) = frames.lock().expect("frame map").remove(&reply.record_id) else { return };
        let detections = match &reply.payload {
            Payload::DetectionList(d) => d.clone(),
            _ => Vec::new(),
        };
        let path = a.out.join(format!("frame_{seq:06}.ppm"));
        if let Err(e) = write_pnm(&path, &annotate(&frame, &detections, [255, 0, 0])) {
            problem.get_or_insert(Failure::local(format!("{}: {e}", path.display())));
        }
        let (Some(gallery), false) = (&a.gallery, detections.is_empty()) else { return };
        let outcome = client.extract(&a.extractor, &frame, &detections).map_err(Failure::from).and_then(|ts| {
            for t in &ts {
                let res = search_template(&client, t, gallery, 1, a.phe_key.as_deref())?;
                if let Some(h) = res.hits.first() {
                    writeln!(scores, "{seq},{},{}", h.subject_id, h.score).map_err(|e| Failure::local(e.to_string()))?;
                }
            }
            Ok(())
        });
        if let Err(e) = outcome {
            problem.get_or_insert(e);
        }
    })?;
    if let Some(p) = problem {
        return Err(p);
    }
    finish_stream(&summary)
}

fn public_path(private: &Path) -> std::path::PathBuf {
    let stem = private.file_stem().and_then(|s| s.to_str()).unwrap_or("phe-key");
    private.with_file_name(format!("{stem}.pub.json"))
}

fn parse_dims(spec: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::usage(format!("--dims expects lo..hi or a comma list, got {spec:?}"));
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if lo == 0 || lo > hi {
            return Err(bad());
        }
        return Ok(power_of_two_dims(lo, hi));
    }
    spec.split(',').map(|d| d.trim().parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(bad)).collect()
}

fn bench_phe(dims: &str, bits: u64, reps: usize, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let dims = parse_dims(dims)?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let kp = Keypair::generate(bits, &mut rng).map_err(|e| Failure::local(e.to_string()))?;
    let rows = encryption_sweep(&kp.public, &dims, reps, DEFAULT_SCALE, &mut rng).map_err(|e| Failure::local(e.to_string()))?;
    let csv = sweep_csv(&rows);
    match out {
        Some(p) => fs::write(p, &csv).map_err(|e| Failure::local(format!("{}: {e}", p.display())))?,
        None => print!("{csv}"),
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.dims as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.encrypt_secs).collect();
    if let Some(fit) = linear_fit(&xs, &ys) {
        eprintln!("linear fit: {:.3} us/element, r2={:.4}", fit.slope * 1e6, fit.r_squared);
    }
    Ok(())
}
