//! Frame transport shared by services and clients.
//!
//! Every frame is `[kind u8][len u32 LE][body]`. Requests carry a method
//! kind; the peer answers with [`Kind::Ok`] or [`Kind::Err`]. Records and
//! replies travel as message-core canonical bytes, control bodies as JSON.
//! After a `StreamCall` the connection carries `StreamRecord` frames one
//! way and `StreamReply` frames the other until both sides send
//! `StreamEnd`.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::Arc;

use parking_lot::Mutex;
use rustls::{ClientConnection, Connection, ServerConnection};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

/// Frames larger than this are rejected.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Status = 1,
    Call = 2,
    StreamCall = 3,
    DeclarePipeline = 4,
    ListCapabilities = 5,
    GalleryEnroll = 6,
    GallerySearch = 7,
    GalleryDelete = 8,
    GalleryList = 9,
    StreamRecord = 0x20,
    StreamReply = 0x21,
    StreamEnd = 0x22,
    Ok = 0x40,
    Err = 0x41,
}

impl Kind {
    pub fn from_u8(v: u8) -> Option<Self> {
        use Kind::*;
        Some(match v {
            1 => Status,
            2 => Call,
            3 => StreamCall,
            4 => DeclarePipeline,
            5 => ListCapabilities,
            6 => GalleryEnroll,
            7 => GallerySearch,
            8 => GalleryDelete,
            9 => GalleryList,
            0x20 => StreamRecord,
            0x21 => StreamReply,
            0x22 => StreamEnd,
            0x40 => Ok,
            0x41 => Err,
            _ => return None,
        })
    }
}

/// Body of a [`Kind::Err`] frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpcError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

impl RpcError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into(), detail: None }
    }
}

impl std::fmt::Display for RpcError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for RpcError {}

pub fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("control bodies serialize")
}

pub fn from_json<T: DeserializeOwned>(body: &[u8]) -> io::Result<T> {
    serde_json::from_slice(body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Reads one frame; `None` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<(Kind, Vec<u8>)>> {
    let mut head = [0u8; 5];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let kind = Kind::from_u8(head[0])
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("unknown frame kind {:#04x}", head[0])))?;
    let len = u32::from_le_bytes(head[1..5].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some((kind, body)))
}

struct TlsState {
    conn: Connection,
    /// Ciphertext read from the socket but not yet accepted by rustls.
    pending: Vec<u8>,
}

struct TlsShared {
    state: Mutex<TlsState>,
    /// Held across extracting and writing ciphertext so records leave in order.
    sock: Mutex<TcpStream>,
}

impl TlsShared {
    fn flush_locked(&self, sock: &mut TcpStream) -> io::Result<()> {
        let mut out = Vec::new();
        {
            let mut st = self.state.lock();
            while st.conn.wants_write() {
                st.conn.write_tls(&mut out)?;
            }
        }
        sock.write_all(&out)
    }
}

enum ReadSide {
    Plain(TcpStream),
    Tls { shared: Arc<TlsShared>, sock: TcpStream },
}

enum WriteSide {
    Plain(Mutex<TcpStream>),
    Tls(Arc<TlsShared>),
}

/// Receiving half of a channel.
pub struct FrameReader {
    side: ReadSide,
    buf: Vec<u8>,
}

impl Read for FrameReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        match &mut self.side {
            ReadSide::Plain(s) => s.read(out),
            ReadSide::Tls { shared, sock } => loop {
                {
                    let mut st = shared.state.lock();
                    match st.conn.reader().read(out) {
                        Ok(n) => return Ok(n),
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
                        Err(e) => return Err(e),
                    }
                    if !st.pending.is_empty() {
                        let TlsState { conn, pending } = &mut *st;
                        let mut slice = &pending[..];
                        let used = conn.read_tls(&mut slice).map(|_| pending.len() - slice.len());
                        let used = used?;
                        pending.drain(..used);
                        let processed = conn.process_new_packets();
                        let wants_write = conn.wants_write();
                        drop(st);
                        if wants_write {
                            let mut sock = shared.sock.lock();
                            let _ = shared.flush_locked(&mut sock);
                        }
                        processed.map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                        continue;
                    }
                }
                self.buf.resize(16 * 1024, 0);
                let n = sock.read(&mut self.buf)?;
                if n == 0 {
                    return Ok(0);
                }
                shared.state.lock().pending.extend_from_slice(&self.buf[..n]);
            },
        }
    }
}

impl FrameReader {
    pub fn read_frame(&mut self) -> io::Result<Option<(Kind, Vec<u8>)>> {
        read_frame(self)
    }
}

/// Sending half of a channel; cheap to share between threads.
pub struct FrameWriter {
    side: WriteSide,
    raw: TcpStream,
}

impl FrameWriter {
    pub fn send(&self, kind: Kind, body: &[u8]) -> io::Result<()> {
        if body.len() > MAX_FRAME {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
        }
        let mut frame = Vec::with_capacity(body.len() + 5);
        frame.push(kind as u8);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(body);
        match &self.side {
            WriteSide::Plain(s) => s.lock().write_all(&frame),
            WriteSide::Tls(shared) => {
                let mut sock = shared.sock.lock();
                shared.state.lock().conn.writer().write_all(&frame)?;
                shared.flush_locked(&mut sock)
            }
        }
    }

    pub fn send_json<T: Serialize>(&self, kind: Kind, value: &T) -> io::Result<()> {
        self.send(kind, &to_json(value))
    }

    /// Closes both directions, unblocking any reader.
    pub fn shutdown(&self) {
        if let WriteSide::Tls(shared) = &self.side {
            if let Some(mut sock) = shared.sock.try_lock() {
                shared.state.lock().conn.send_close_notify();
                let _ = shared.flush_locked(&mut sock);
            }
        }
        let _ = self.raw.shutdown(Shutdown::Both);
    }

    pub fn set_read_timeout(&self, timeout: Option<std::time::Duration>) {
        let _ = self.raw.set_read_timeout(timeout);
    }

    pub fn peer_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.raw.peer_addr()
    }
}

/// A connected, possibly encrypted, duplex frame channel.
pub struct Channel {
    pub reader: FrameReader,
    pub writer: Arc<FrameWriter>,
}

impl Channel {
    pub fn plain(sock: TcpStream) -> io::Result<Self> {
        let _ = sock.set_nodelay(true);
        let read = sock.try_clone()?;
        let raw = sock.try_clone()?;
        Ok(Self {
            reader: FrameReader { side: ReadSide::Plain(read), buf: Vec::new() },
            writer: Arc::new(FrameWriter { side: WriteSide::Plain(Mutex::new(sock)), raw }),
        })
    }

    /// Completes a TLS handshake on `sock` before any frame is exchanged.
    pub fn tls_server(mut sock: TcpStream, config: Arc<rustls::ServerConfig>) -> io::Result<Self> {
        let mut conn = ServerConnection::new(config).map_err(io::Error::other)?;
        handshake(&mut sock, &mut conn)?;
        Self::tls(sock, conn.into())
    }

    pub fn tls_client(
        mut sock: TcpStream,
        config: Arc<rustls::ClientConfig>,
        server_name: &str,
    ) -> io::Result<Self> {
        let name = rustls::pki_types::ServerName::try_from(server_name.to_string())
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let mut conn = ClientConnection::new(config, name).map_err(io::Error::other)?;
        handshake(&mut sock, &mut conn)?;
        Self::tls(sock, conn.into())
    }

    fn tls(sock: TcpStream, mut conn: Connection) -> io::Result<Self> {
        let _ = sock.set_nodelay(true);
        conn.set_buffer_limit(None);
        let read = sock.try_clone()?;
        let raw = sock.try_clone()?;
        let shared = Arc::new(TlsShared { state: Mutex::new(TlsState { conn, pending: Vec::new() }), sock: Mutex::new(sock) });
        Ok(Self {
            reader: FrameReader { side: ReadSide::Tls { shared: shared.clone(), sock: read }, buf: Vec::new() },
            writer: Arc::new(FrameWriter { side: WriteSide::Tls(shared), raw }),
        })
    }

    /// One request/response exchange.
    pub fn request(&mut self, kind: Kind, body: &[u8]) -> Result<Vec<u8>, CallError> {
        self.writer.send(kind, body).map_err(CallError::Transport)?;
        match self.reader.read_frame().map_err(CallError::Transport)? {
            Some((Kind::Ok, body)) => Ok(body),
            Some((Kind::Err, body)) => Err(CallError::Remote(from_json(&body).map_err(CallError::Transport)?)),
            Some((other, _)) => Err(CallError::Transport(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unexpected {other:?} frame"),
            ))),
            None => Err(CallError::Transport(io::ErrorKind::UnexpectedEof.into())),
        }
    }
}

fn handshake<D>(sock: &mut TcpStream, conn: &mut rustls::ConnectionCommon<D>) -> io::Result<()>
where
    D: rustls::SideData,
{
    while conn.is_handshaking() {
        if let Err(e) = conn.complete_io(sock) {
            // Deliver any alert before giving up.
            let _ = conn.write_tls(sock);
            return Err(io::Error::new(io::ErrorKind::ConnectionRefused, format!("TLS handshake failed: {e}")));
        }
    }
    // Flush post-handshake messages such as session tickets.
    while conn.wants_write() {
        conn.write_tls(sock)?;
    }
    Ok(())
}

/// Failure of a request: the transport broke, or the peer answered with
/// an error frame.
#[derive(Debug, thiserror::Error)]
pub enum CallError {
    #[error("transport: {0}")]
    Transport(io::Error),
    #[error("{}: {}", .0.code, .0.message)]
    Remote(RpcError),
}
