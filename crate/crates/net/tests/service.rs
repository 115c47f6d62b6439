use std::collections::{BTreeMap, HashSet};
use std::net::{TcpListener, UdpSocket};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use faro_core::message::{codes, serialize_record, FaroRecord, Payload};
use faro_core::phe::{encrypt_template, Keypair};
use faro_core::pipeline::{Issue, NodeSpec, PipelineMode, PipelineSpec};
use faro_core::Template;
use faro_net::client::build_record;
use faro_net::discovery::DiscoveryConfig;
use faro_net::proto::{GalleryDeleteRequest, GalleryListRequest, StreamOpen};
use faro_net::rpc::{to_json, Channel, Kind};
use faro_net::{
    generate_identity, start_service, Client, ClientConfig, ClientError, GalleryConfig, KeyAlgo, SecurityConfig,
    ServiceConfig, ServiceError, ServiceHandle,
};
use parking_lot::Mutex;
use rand::SeedableRng;

fn quiet(name: &str) -> ServiceConfig {
    ServiceConfig { browse: false, ..ServiceConfig::named(name) }
}

fn client(svc: &ServiceHandle) -> Client {
    Client::connect(ClientConfig::endpoint(&svc.endpoint()).with_timeout_ms(10_000)).unwrap()
}

fn text(s: &str) -> Payload {
    Payload::generic("text/plain", s.as_bytes().to_vec())
}

fn wait_for(deadline: Duration, mut f: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < deadline {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(10));
    }
    false
}

fn remote(name: &str, service: &str, worker: &str) -> NodeSpec {
    NodeSpec { service: service.into(), ..NodeSpec::local(name, worker) }
}

#[test]
fn records_are_forwarded_between_services() {
    let c = start_service(quiet("node-c")).unwrap();
    let mut b_cfg = quiet("node-b");
    b_cfg.static_peers.insert("node-c".into(), c.endpoint());
    let b = start_service(b_cfg).unwrap();
    let mut a_cfg = quiet("node-a");
    a_cfg.static_peers.insert("node-b".into(), b.endpoint());
    let a = start_service(a_cfg).unwrap();

    let cl = client(&a);
    let reply = cl.call(&build_record("node-b/echo", text("hello"), BTreeMap::new())).unwrap();
    assert!(reply.is_ok(), "{reply:?}");
    assert_eq!(reply.payload, text("hello"));
    let stages: Vec<&str> = reply.stage_timings.iter().map(|t| t.stage.as_str()).collect();
    assert!(stages.ends_with(&["route@node-b", "route@node-a"]), "{stages:?}");

    // b forwards on to c; a does not know c at all
    let via_b = cl.call(&build_record("node-b/relay", text("x"), BTreeMap::new())).unwrap();
    assert_eq!(via_b.error_code(), Some(codes::UNKNOWN_TARGET));
    let unknown = cl.call(&build_record("node-c/echo", text("x"), BTreeMap::new())).unwrap();
    assert_eq!(unknown.error_code(), Some(codes::PEER_UNAVAILABLE));

    b.declare_pipeline(PipelineSpec::chain("relay", vec![remote("e", "node-c", "echo")])).unwrap();
    let relayed = cl.call(&build_record("node-b/relay", text("far"), BTreeMap::new())).unwrap();
    assert!(relayed.is_ok(), "{relayed:?}");
    assert_eq!(relayed.payload, text("far"));
    assert!(relayed.stage_timings.iter().any(|t| t.stage == "e"), "{relayed:?}");
}

#[test]
fn pipelines_calling_each_other_are_stopped() {
    let b = start_service(quiet("loop-b")).unwrap();
    let mut a_cfg = quiet("loop-a");
    a_cfg.static_peers.insert("loop-b".into(), b.endpoint());
    let a = start_service(a_cfg).unwrap();
    b.directory().add_static("loop-a", &a.endpoint()).unwrap();

    a.declare_pipeline(PipelineSpec::chain("p", vec![remote("q", "loop-b", "echo")])).unwrap();
    b.declare_pipeline(PipelineSpec::chain("q", vec![remote("p", "loop-a", "p")])).unwrap();
    a.declare_pipeline(PipelineSpec::chain("p", vec![remote("q", "loop-b", "q")])).unwrap();

    let cl = client(&a);
    let reply = cl.call(&build_record("p", text("spin"), BTreeMap::new())).unwrap();
    // stage failures carry the failing stage chain as a prefix
    assert!(reply.error_code().is_some_and(|c| c.ends_with(codes::LOOP_DETECTED)), "{reply:?}");

    // a pipeline on b calling back into a plain worker on a is not a loop
    b.declare_pipeline(PipelineSpec::chain("back", vec![remote("e", "loop-a", "echo")])).unwrap();
    a.declare_pipeline(PipelineSpec::chain("out", vec![remote("b", "loop-b", "back")])).unwrap();
    let ok = cl.call(&build_record("out", text("round trip"), BTreeMap::new())).unwrap();
    assert!(ok.is_ok(), "{ok:?}");
    assert_eq!(ok.payload, text("round trip"));
}

#[test]
fn declare_reports_validation_issues_and_remote_options() {
    let svc = start_service(quiet("decl")).unwrap();
    let cl = client(&svc);
    let mut spec = PipelineSpec::chain("cyc", vec![NodeSpec::local("x", "echo"), NodeSpec::local("y", "echo")]);
    spec.edges.push(("y".into(), "x".into()));
    let err = cl.declare_pipeline(&spec).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let report = err.validation_report().expect("report in detail");
    assert!(report.issues.iter().any(|i| matches!(i, Issue::Cycle { .. })), "{report:?}");

    let unknown_svc = PipelineSpec::chain("far", vec![remote("r", "nowhere", "echo")]);
    match cl.declare_pipeline(&unknown_svc).unwrap_err() {
        ClientError::Remote(e) => assert_eq!(e.code, "UNRESOLVED_SERVICE"),
        other => panic!("{other:?}"),
    }
    let opts = PipelineSpec::chain("o", vec![remote("r", "nowhere", "delay").with_option("delay_ms", "5")]);
    assert!(matches!(cl.declare_pipeline(&opts), Err(ClientError::Remote(e)) if e.code == "INVALID_REQUEST"));

    let first = cl.declare_pipeline(&PipelineSpec::chain("ok", vec![NodeSpec::local("e", "echo")])).unwrap();
    assert!(!first.replaced);
    assert_eq!(first.plan, vec!["e".to_string()]);
    let again = cl.declare_pipeline(&PipelineSpec::chain("ok", vec![NodeSpec::local("e", "echo")])).unwrap();
    assert!(again.replaced);
    assert!(cl.status().unwrap().pipelines.contains(&"ok".to_string()));
}

#[test]
fn hot_swap_during_a_stream_loses_nothing() {
    let svc = start_service(quiet("swap")).unwrap();
    let slow = |ms: &str| PipelineSpec::chain("p", vec![NodeSpec::local("d", "delay").with_option("delay_ms", ms)]);
    svc.declare_pipeline(slow("3")).unwrap();
    let cl = client(&svc);
    let records: Vec<FaroRecord> = (0..200u64)
        .map(|i| build_record("p", text(&i.to_string()), BTreeMap::new()).with_sequence(i))
        .collect();
    let ids: HashSet<_> = records.iter().map(|r| r.record_id).collect();
    let svc = Arc::new(svc);
    let swapper = {
        let svc = svc.clone();
        thread::spawn(move || {
            for ms in ["1", "2", "0", "4"] {
                thread::sleep(Duration::from_millis(60));
                assert!(svc.declare_pipeline(slow(ms)).unwrap().replaced);
            }
        })
    };
    let mut seen = Vec::new();
    let summary = cl.stream("p", PipelineMode::Fifo, records.into_iter(), Some(200), |r| seen.push(r.clone())).unwrap();
    swapper.join().unwrap();
    assert_eq!((summary.sent, summary.ok, summary.error), (200, 200, 0), "{summary:?}");
    assert_eq!(seen.len(), 200);
    assert!(seen.iter().all(|r| r.is_ok() && ids.contains(&r.record_id)));
    // FIFO keeps submission order
    let order: Vec<String> = seen
        .iter()
        .map(|r| match &r.payload {
            Payload::Generic { data, .. } => String::from_utf8(data.clone()).unwrap(),
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(order, (0..200).map(|i| i.to_string()).collect::<Vec<_>>());
}

#[test]
fn dropped_stream_releases_session_and_work() {
    let svc = start_service(quiet("drop")).unwrap();
    svc.declare_pipeline(PipelineSpec::chain("slow", vec![NodeSpec::local("d", "delay").with_option("delay_ms", "50")]))
        .unwrap();
    let sock = std::net::TcpStream::connect(svc.local_addr()).unwrap();
    let mut ch = Channel::plain(sock).unwrap();
    let open = StreamOpen { target: "slow".into(), mode: PipelineMode::Unordered, inflight: Some(2) };
    ch.request(Kind::StreamCall, &to_json(&open)).unwrap();
    for i in 0..40 {
        let r = build_record("", text("x"), BTreeMap::new()).with_sequence(i);
        ch.writer.send(Kind::StreamRecord, &serialize_record(&r).unwrap()).unwrap();
    }
    assert!(wait_for(Duration::from_secs(2), || svc.stats().sessions == 1 && svc.stats().inflight > 0));
    let started = Instant::now();
    ch.writer.shutdown();
    drop(ch);
    // 40 records at 50 ms over 2 lanes would take a second; released work
    // finishes much sooner
    assert!(wait_for(Duration::from_secs(5), || {
        let s = svc.stats();
        s.sessions == 0 && s.inflight == 0 && s.connections == 0
    }));
    assert!(started.elapsed() < Duration::from_millis(800), "{:?}", started.elapsed());
}

#[test]
fn malformed_stream_records_get_anonymous_errors() {
    let svc = start_service(quiet("junk")).unwrap();
    let sock = std::net::TcpStream::connect(svc.local_addr()).unwrap();
    let mut ch = Channel::plain(sock).unwrap();
    let open = StreamOpen { target: "echo".into(), mode: PipelineMode::Fifo, inflight: None };
    ch.request(Kind::StreamCall, &to_json(&open)).unwrap();
    let good = build_record("", text("fine"), BTreeMap::new());
    ch.writer.send(Kind::StreamRecord, b"not a record").unwrap();
    ch.writer.send(Kind::StreamRecord, &serialize_record(&good).unwrap()).unwrap();
    ch.writer.send(Kind::StreamEnd, &[]).unwrap();
    let mut replies = Vec::new();
    loop {
        match ch.reader.read_frame().unwrap() {
            Some((Kind::StreamReply, body)) => replies.push(faro_core::message::deserialize_reply(&body).unwrap()),
            Some((Kind::StreamEnd, _)) => break,
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(replies.len(), 2);
    assert!(replies[0].record_id.is_nil());
    assert_eq!(replies[0].error_code(), Some(codes::MALFORMED));
    assert_eq!(replies[1].record_id, good.record_id);
    // the connection remains usable
    assert!(ch.request(Kind::Status, b"").is_ok());
}

#[test]
fn stream_summary_counts_a_failed_service() {
    let svc = start_service(quiet("dying")).unwrap();
    svc.declare_pipeline(PipelineSpec::chain("p", vec![NodeSpec::local("d", "delay").with_option("delay_ms", "10")]))
        .unwrap();
    let cl = client(&svc);
    let holder = Arc::new(Mutex::new(Some(svc)));
    let killer = {
        let holder = holder.clone();
        thread::spawn(move || {
            thread::sleep(Duration::from_millis(300));
            holder.lock().take().unwrap().shutdown();
        })
    };
    let records = (0..500u64).map(|i| build_record("p", text("x"), BTreeMap::new()).with_sequence(i));
    let summary = cl.stream("p", PipelineMode::Unordered, records, Some(500), |_| {}).unwrap();
    killer.join().unwrap();
    assert!(summary.failure.is_some(), "{summary:?}");
    assert!(summary.ok > 0 && summary.ok < 500, "{summary:?}");
    assert_eq!(summary.ok + summary.error, 500);
}

#[test]
fn capability_listing_visits_each_service_once() {
    let names = ["cap-a", "cap-b", "cap-c"];
    let svcs: Vec<ServiceHandle> = names.iter().map(|n| start_service(quiet(n)).unwrap()).collect();
    for s in &svcs {
        for t in &svcs {
            if s.name() != t.name() {
                s.directory().add_static(t.name(), &t.endpoint()).unwrap();
            }
        }
    }
    svcs[1].declare_pipeline(PipelineSpec::chain("only-b", vec![NodeSpec::local("e", "echo")])).unwrap();
    let cl = client(&svcs[0]);
    let tree = cl.list_capabilities(true, 5).unwrap();
    for n in names {
        assert_eq!(tree.occurrences(n), 1, "{n} in {tree:#?}");
    }
    let b = tree.peers.iter().find(|p| p.service_name == "cap-b").unwrap();
    assert!(b.tree.as_ref().unwrap().find_worker("only-b").is_some());

    let flat = cl.list_capabilities(false, 0).unwrap();
    assert_eq!(flat.peers.len(), 2);
    assert!(flat.peers.iter().all(|p| p.tree.is_none()));
    let local = cl.list_capabilities(true, 0).unwrap();
    assert!(local.peers.is_empty());
    assert!(local.find_worker("demo-detect").is_some());
}

#[test]
fn occupied_port_is_a_bind_failure() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let cfg = ServiceConfig { bind_address: taken.local_addr().unwrap().to_string(), ..quiet("busy") };
    assert!(matches!(start_service(cfg), Err(ServiceError::BindFailure { .. })));
}

#[test]
fn enabled_worker_types_limit_what_is_callable() {
    let cfg = ServiceConfig { worker_types_enabled: vec!["echo".into()], ..quiet("narrow") };
    let svc = start_service(cfg).unwrap();
    let cl = client(&svc);
    assert_eq!(cl.status().unwrap().workers, vec!["echo".to_string()]);
    let r = cl.call(&build_record("demo-score", text("x"), BTreeMap::new())).unwrap();
    assert_eq!(r.error_code(), Some(codes::UNKNOWN_TARGET));
}

#[test]
fn plaintext_gallery_over_rpc() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("people.fgal");
    let cfg = ServiceConfig { galleries: vec![GalleryConfig::plain("people").with_path(&store)], ..quiet("gal") };
    let svc = start_service(cfg.clone()).unwrap();
    let cl = client(&svc);
    let t = |v: &[f64]| Template::new(v.to_vec(), "demo");
    let alice = cl.enroll("people", "alice", &t(&[1.0, 0.0, 0.0]), &BTreeMap::from([("site".into(), "gate".into())])).unwrap();
    cl.enroll("people", "bob", &t(&[0.0, 1.0, 0.0]), &BTreeMap::new()).unwrap();
    let res = cl.search("people", &t(&[0.9, 0.1, 0.0]), 2, None).unwrap();
    assert_eq!(res.hits[0].subject_id, "alice");
    assert_eq!(res.hits[0].entry_id, alice);
    assert_eq!(res.hits.len(), 2);

    let listed = cl.gallery_list(&GalleryListRequest { gallery: Some("people".into()), page: 0, page_size: 10 }).unwrap();
    assert_eq!(listed.total, 2);
    assert!(matches!(
        cl.enroll("nobody", "x", &t(&[1.0, 0.0, 0.0]), &BTreeMap::new()),
        Err(ClientError::Worker { code, .. }) if code == "UNKNOWN_GALLERY"
    ));
    let deleted = cl
        .gallery_delete(&GalleryDeleteRequest { gallery: "people".into(), entry_id: None, subject_id: Some("bob".into()) })
        .unwrap();
    assert_eq!(deleted, 1);
    drop(cl);
    svc.shutdown();

    // entries survive a restart
    let svc = start_service(cfg).unwrap();
    assert_eq!(svc.gallery_len("people"), Some(1));
}

#[test]
fn encrypted_gallery_search_with_and_without_key_on_service() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let kp = Keypair::generate(512, &mut rng).unwrap();
    let key_path = dir.path().join("k.json");
    kp.save(&key_path).unwrap();
    let blind = GalleryConfig::phe("blind", &key_path);
    let holder = GalleryConfig::phe("holder", &key_path).with_private_key(&key_path);
    let svc = start_service(ServiceConfig { galleries: vec![blind, holder], ..quiet("phe") }).unwrap();
    let cl = client(&svc);
    let t = |v: &[f64]| Template::new(v.to_vec(), "demo");
    let scale = faro_core::phe::DEFAULT_SCALE;
    for g in ["blind", "holder"] {
        for (who, v) in [("near", [0.5, 0.5, 0.1]), ("far", [-3.0, 2.0, 7.0])] {
            let enc = encrypt_template(&kp.public, &t(&v), scale, &mut rng).unwrap();
            cl.enroll_encrypted(g, who, &enc, &BTreeMap::new()).unwrap();
        }
    }
    let probe = t(&[0.4, 0.6, 0.0]);
    // the service lacks the key: the client finishes
    assert!(matches!(cl.search("blind", &probe, 1, None), Err(ClientError::Config(_))));
    let r = cl.search("blind", &probe, 2, Some(&kp)).unwrap();
    assert_eq!(r.hits[0].subject_id, "near");
    // oracle: L1 distance of the fixed-point values
    let q = |x: f64| (x * scale as f64).round();
    let l1: f64 = [(0.5, 0.4), (0.5, 0.6), (0.1, 0.0)].iter().map(|&(a, b)| (q(a) - q(b)).abs()).sum::<f64>() / scale as f64;
    assert!((r.hits[0].score + l1).abs() < 1e-9, "{} vs {}", r.hits[0].score, -l1);

    let enc_probe = encrypt_template(&kp.public, &probe, scale, &mut rng).unwrap();
    let r2 = cl.search_encrypted("holder", &enc_probe, 2, &kp).unwrap();
    assert_eq!(r2.hits[0].subject_id, "near");
    assert!((r2.hits[0].score + l1).abs() < 1e-9);
    let r3 = cl.search("holder", &probe, 2, None).unwrap();
    assert_eq!(r3.hits.iter().map(|h| &h.subject_id).collect::<Vec<_>>(), ["near", "far"]);
}

#[test]
fn name_mode_client_finds_announced_service() {
    let port = UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let disc = DiscoveryConfig { port, interval_ms: 300, ttl_seconds: 2, ..DiscoveryConfig::default() };
    let cfg = ServiceConfig { announce: true, discovery: disc.clone(), ..ServiceConfig::named("named-svc") };
    let svc = start_service(cfg).unwrap();
    let cl = Client::connect(ClientConfig::name("named-svc").with_discovery(disc.clone())).unwrap();
    assert_eq!(cl.endpoint(), svc.endpoint());
    assert_eq!(cl.status().unwrap().service_name, "named-svc");
    let missing = Client::connect(ClientConfig::name("not-there").with_discovery(disc));
    assert!(matches!(missing, Err(ClientError::Resolve(_))));
}

#[test]
fn mutual_tls_service() {
    let dir = tempfile::tempdir().unwrap();
    let server = generate_identity("tls-svc", KeyAlgo::Ed25519, dir.path()).unwrap();
    let user = generate_identity("user", KeyAlgo::Ed25519, dir.path()).unwrap();
    let bundle = dir.path().join("trust.pem");
    faro_net::secure::write_trust_bundle(&bundle, &[&server.cert_path, &user.cert_path]).unwrap();
    let security = SecurityConfig::tls(&server.cert_path, &server.key_path, &bundle).with_client_auth(true);
    let svc = start_service(ServiceConfig { security, ..quiet("tls-svc") }).unwrap();

    let good = SecurityConfig::tls(&user.cert_path, &user.key_path, &bundle);
    let cl = Client::connect(ClientConfig::endpoint(&svc.endpoint()).with_security(good)).unwrap();
    assert!(cl.status().unwrap().tls);
    let r = cl.call(&build_record("echo", text("sealed"), BTreeMap::new())).unwrap();
    assert_eq!(r.payload, text("sealed"));

    let anonymous = SecurityConfig { cert_path: None, key_path: None, ..SecurityConfig::tls(&user.cert_path, &user.key_path, &bundle) };
    let refused = Client::connect(ClientConfig::endpoint(&svc.endpoint()).with_security(anonymous).with_timeout_ms(3000));
    assert!(refused.is_err());
    let plain = Client::connect(ClientConfig::endpoint(&svc.endpoint()).with_timeout_ms(3000));
    assert!(plain.is_err());
}
