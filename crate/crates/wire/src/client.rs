//! Remote [`Backend`]: one pipelined connection shared by every caller.
//!
//! Callers on different threads send concurrently; a reader thread routes
//! each response to its caller by request id. When the connection drops,
//! every in-flight call fails with `ConnectionLost`. Idempotent requests
//! are then resent on a fresh connection, up to [`RETRIES`] times.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};

use forge_core::api::{Backend, Request, Response};
use forge_core::modelstore::ModelCache;
use forge_core::{Error, Result};
use parking_lot::Mutex;

use crate::frame::{self, Frame};

pub const RETRIES: u32 = 3;

type Reply = mpsc::Sender<Result<Frame>>;

struct Conn {
    writer: Mutex<TcpStream>,
    /// `None` once the connection is dead.
    pending: Mutex<Option<HashMap<u64, Reply>>>,
}

impl Conn {
    fn open(addr: &str) -> Result<Arc<Conn>> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::ConnectionLost(format!("connect {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let read_half = stream
            .try_clone()
            .map_err(|e| Error::ConnectionLost(e.to_string()))?;
        let conn = Arc::new(Conn {
            writer: Mutex::new(stream),
            pending: Mutex::new(Some(HashMap::new())),
        });
        let c = conn.clone();
        std::thread::Builder::new()
            .name("forge-client-reader".into())
            .spawn(move || c.read_loop(read_half))
            .map_err(|e| Error::ConnectionLost(e.to_string()))?;
        Ok(conn)
    }

    fn read_loop(&self, stream: TcpStream) {
        let mut r = BufReader::new(stream);
        let reason = loop {
            match frame::read_frame(&mut r) {
                Ok(f) => {
                    let tx = self.pending.lock().as_mut().and_then(|p| p.remove(&f.request_id));
                    match tx {
                        Some(tx) => {
                            let _ = tx.send(Ok(f));
                        }
                        // The server only sends unsolicited frames right
                        // before it closes the connection.
                        None => {
                            break match frame::decode_response(f) {
                                Err(e) => e.to_string(),
                                Ok(_) => "unexpected response".into(),
                            }
                        }
                    }
                }
                Err(e) => break e.to_string(),
            }
        };
        self.kill(&reason);
    }

    fn kill(&self, reason: &str) {
        let pending = self.pending.lock().take();
        for (_, tx) in pending.into_iter().flatten() {
            let _ = tx.send(Err(Error::ConnectionLost(reason.to_owned())));
        }
        let _ = self.writer.lock().shutdown(Shutdown::Both);
    }

    fn is_dead(&self) -> bool {
        self.pending.lock().is_none()
    }

    fn round_trip(&self, f: &Frame) -> Result<Frame> {
        let (tx, rx) = mpsc::channel();
        match self.pending.lock().as_mut() {
            Some(p) => p.insert(f.request_id, tx),
            None => return Err(Error::ConnectionLost("connection closed".into())),
        };
        let written = {
            let mut w = self.writer.lock();
            frame::write_frame(&mut *w, f)
        };
        if let Err(e) = written {
            self.kill(&e.to_string());
        }
        rx.recv()
            .unwrap_or_else(|_| Err(Error::ConnectionLost("reader stopped".into())))
    }
}

pub struct RemoteBackend {
    addr: String,
    conn: Mutex<Option<Arc<Conn>>>,
    next_id: AtomicU64,
    cache: ModelCache,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl RemoteBackend {
    /// Connects eagerly so a bad address fails here rather than on first use.
    pub fn connect(addr: impl Into<String>) -> Result<RemoteBackend> {
        let addr = addr.into();
        let conn = Conn::open(&addr)?;
        Ok(RemoteBackend {
            addr,
            conn: Mutex::new(Some(conn)),
            next_id: AtomicU64::new(1),
            cache: ModelCache::default(),
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn conn(&self) -> Result<Arc<Conn>> {
        let mut slot = self.conn.lock();
        match &*slot {
            Some(c) if !c.is_dead() => Ok(c.clone()),
            _ => {
                let c = Conn::open(&self.addr)?;
                *slot = Some(c.clone());
                Ok(c)
            }
        }
    }

    fn send(&self, f: &Frame) -> Result<Response> {
        let reply = self.conn()?.round_trip(f)?;
        frame::decode_response(reply)
    }
}

impl Drop for RemoteBackend {
    fn drop(&mut self) {
        if let Some(c) = self.conn.lock().take() {
            c.kill("client dropped");
        }
    }
}

impl Backend for RemoteBackend {
    fn call(&self, req: Request) -> Result<Response> {
        let idempotent = req.is_idempotent();
        let mut f = frame::request_frame(0, req)?;
        if f.body_len() > frame::MAX_FRAME {
            return Err(Error::Protocol(format!(
                "request of {} bytes exceeds the {}-byte frame limit",
                f.body_len(),
                frame::MAX_FRAME
            )));
        }
        let mut retries = 0;
        loop {
            f.request_id = self.next_id.fetch_add(1, Ordering::SeqCst);
            match self.send(&f) {
                Err(Error::ConnectionLost(_)) if idempotent && retries < RETRIES => retries += 1,
                r => return r,
            }
        }
    }

    fn cache(&self) -> &ModelCache {
        &self.cache
    }

    fn transport(&self) -> &'static str {
        "wire"
    }
}
