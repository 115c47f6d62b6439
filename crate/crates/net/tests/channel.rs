use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use faro_net::rpc::{Channel, Kind};
use faro_net::secure::{generate_identity, load_certs, write_trust_bundle, KeyAlgo, SecurityConfig};

fn echo_server(cfg: Arc<rustls::ServerConfig>) -> (std::net::SocketAddr, thread::JoinHandle<Result<usize, String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let h = thread::spawn(move || {
        let (sock, _) = listener.accept().unwrap();
        let mut ch = Channel::tls_server(sock, cfg).map_err(|e| e.to_string())?;
        let mut seen = 0;
        while let Some((kind, body)) = ch.reader.read_frame().map_err(|e| e.to_string())? {
            seen += 1;
            let back = if kind == Kind::StreamRecord { Kind::StreamReply } else { Kind::Ok };
            ch.writer.send(back, &body).map_err(|e| e.to_string())?;
        }
        Ok(seen)
    });
    (addr, h)
}

#[test]
fn tls_channel_carries_large_and_concurrent_frames() {
    let dir = tempfile::tempdir().unwrap();
    let id = generate_identity("svc", KeyAlgo::Ed25519, dir.path()).unwrap();
    let cfg = SecurityConfig::tls(&id.cert_path, &id.key_path, &id.cert_path).with_client_auth(true);
    let (addr, server) = echo_server(cfg.server_config().unwrap().unwrap());

    let sock = TcpStream::connect(addr).unwrap();
    let mut ch = Channel::tls_client(sock, cfg.client_config().unwrap().unwrap(), "127.0.0.1").unwrap();
    let big: Vec<u8> = (0..3_000_000u32).map(|i| (i * 7) as u8).collect();
    assert_eq!(ch.request(Kind::Status, &big).unwrap(), big);

    // Writer on one thread, reader on another, as stream sessions do.
    let writer = ch.writer.clone();
    let n = 300;
    let sender = thread::spawn(move || {
        for i in 0..n {
            writer.send(Kind::StreamRecord, &vec![i as u8; 1000 + i * 37]).unwrap();
        }
    });
    for i in 0..n {
        let (kind, body) = ch.reader.read_frame().unwrap().unwrap();
        assert_eq!(kind, Kind::StreamReply);
        assert_eq!(body, vec![i as u8; 1000 + i * 37]);
    }
    sender.join().unwrap();
    ch.writer.shutdown();
    assert_eq!(server.join().unwrap().unwrap(), n + 1);
}

#[test]
fn mismatched_roots_refuse_handshake() {
    let dir = tempfile::tempdir().unwrap();
    let x = generate_identity("root-x", KeyAlgo::Ed25519, dir.path()).unwrap();
    let y = generate_identity("root-y", KeyAlgo::Ed25519, dir.path()).unwrap();
    let server_cfg = SecurityConfig::tls(&y.cert_path, &y.key_path, &y.cert_path);
    let client_cfg = SecurityConfig::tls(&x.cert_path, &x.key_path, &x.cert_path);
    let (addr, server) = echo_server(server_cfg.server_config().unwrap().unwrap());
    let sock = TcpStream::connect(addr).unwrap();
    let res = Channel::tls_client(sock, client_cfg.client_config().unwrap().unwrap(), "127.0.0.1");
    assert!(res.is_err());
    assert!(server.join().unwrap().is_err());
}

#[test]
fn plaintext_client_cannot_talk_to_secured_service() {
    let dir = tempfile::tempdir().unwrap();
    let id = generate_identity("svc", KeyAlgo::Ed25519, dir.path()).unwrap();
    let cfg = SecurityConfig::tls(&id.cert_path, &id.key_path, &id.cert_path);
    let (addr, server) = echo_server(cfg.server_config().unwrap().unwrap());
    let mut ch = Channel::plain(TcpStream::connect(addr).unwrap()).unwrap();
    assert!(ch.request(Kind::Status, b"hi").is_err());
    assert!(server.join().unwrap().is_err());
}

#[test]
fn rsa_identity_and_trust_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let r = generate_identity("rsa-node", KeyAlgo::Rsa2048, dir.path()).unwrap();
    let e = generate_identity("ed-node", KeyAlgo::Ed25519, dir.path()).unwrap();
    let cert = load_certs(&r.cert_path).unwrap().remove(0);
    // SubjectPublicKeyInfo of a 2048-bit RSA key carries a 257-byte
    // INTEGER (leading zero) for the modulus.
    let der = cert.as_ref();
    let marker = [0x02u8, 0x82, 0x01, 0x01, 0x00];
    assert!(der.windows(marker.len()).any(|w| w == marker));

    let bundle = dir.path().join("roots.pem");
    write_trust_bundle(&bundle, &[&r.cert_path, &e.cert_path]).unwrap();
    let server_cfg = SecurityConfig::tls(&r.cert_path, &r.key_path, &bundle).with_client_auth(true);
    let client_cfg = SecurityConfig::tls(&e.cert_path, &e.key_path, &bundle);
    let (addr, server) = echo_server(server_cfg.server_config().unwrap().unwrap());
    let sock = TcpStream::connect(addr).unwrap();
    let mut ch = Channel::tls_client(sock, client_cfg.client_config().unwrap().unwrap(), "localhost").unwrap();
    assert_eq!(ch.request(Kind::Status, b"ping").unwrap(), b"ping");
    ch.writer.shutdown();
    assert_eq!(server.join().unwrap().unwrap(), 1);
}
