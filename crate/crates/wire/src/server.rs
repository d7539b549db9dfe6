//! Threaded TCP service in front of one engine.
//!
//! Each connection gets a reader thread; each request runs on its own
//! scoped thread, so a slow request never holds up the ones behind it and
//! responses may leave out of order. Blob uploads begun on a connection
//! are aborted when it closes.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use forge_core::api::{Request, Response};
use forge_core::engine::Engine;
use forge_core::Error;
use parking_lot::Mutex;

use crate::frame::{self, FrameError};

type Registry = Arc<Mutex<HashMap<u64, TcpStream>>>;

pub struct Server {
    listener: TcpListener,
    engine: Arc<Engine>,
}

impl Server {
    pub fn bind(engine: Arc<Engine>, addr: impl ToSocketAddrs) -> io::Result<Server> {
        Ok(Server {
            listener: TcpListener::bind(addr)?,
            engine,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Serves until the process exits.
    pub fn run(self) -> io::Result<()> {
        let stop = Arc::new(AtomicBool::new(false));
        accept_loop(self.listener, self.engine, stop, Registry::default());
        Ok(())
    }

    /// Serves on a background thread until the handle is shut down or
    /// dropped.
    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Registry::default();
        let thread = {
            let (stop, conns) = (stop.clone(), conns.clone());
            std::thread::Builder::new()
                .name("forge-accept".into())
                .spawn(move || accept_loop(self.listener, self.engine, stop, conns))
                .expect("spawn accept thread")
        };
        ServerHandle {
            addr,
            stop,
            conns,
            thread: Some(thread),
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Registry,
    thread: Option<JoinHandle<Vec<JoinHandle<()>>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Closes every connection as if the network went away; the listener
    /// keeps accepting.
    pub fn drop_connections(&self) {
        for s in self.conns.lock().values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    /// Stops accepting, closes every connection and waits for in-flight
    /// requests to finish.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        let Some(thread) = self.thread.take() else {
            return;
        };
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        let workers = thread.join().unwrap_or_default();
        self.drop_connections();
        for w in workers {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn accept_loop(
    listener: TcpListener,
    engine: Arc<Engine>,
    stop: Arc<AtomicBool>,
    conns: Registry,
) -> Vec<JoinHandle<()>> {
    let next = AtomicU64::new(0);
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let id = next.fetch_add(1, Ordering::SeqCst);
        if let Ok(clone) = stream.try_clone() {
            conns.lock().insert(id, clone);
        }
        let (engine, conns) = (engine.clone(), conns.clone());
        let spawned = std::thread::Builder::new()
            .name(format!("forge-conn-{id}"))
            .spawn(move || {
                serve_connection(&engine, stream);
                conns.lock().remove(&id);
            });
        if let Ok(h) = spawned {
            workers.push(h);
        }
        workers.retain(|h| !h.is_finished());
    }
    workers
}

fn serve_connection(engine: &Engine, stream: TcpStream) {
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let writer = Mutex::new(write_half);
    let uploads: Mutex<HashSet<u64>> = Mutex::new(HashSet::new());
    let send = |f: frame::Frame| {
        let mut w = writer.lock();
        // A failed write means the peer is gone; the reader notices.
        let _ = frame::write_frame(&mut *w, &f);
    };
    let mut reader = BufReader::new(&stream);
    std::thread::scope(|s| loop {
        let f = match frame::read_frame(&mut reader) {
            Ok(f) => f,
            Err(FrameError::Closed) | Err(FrameError::Io(_)) => break,
            Err(e @ FrameError::TooLarge { request_id, .. })
            | Err(e @ FrameError::Malformed { request_id, .. }) => {
                send(frame::error_frame(request_id, &Error::Protocol(e.to_string())));
                break;
            }
        };
        let id = f.request_id;
        let req = match frame::decode_request(f) {
            Ok(r) => r,
            Err(message) => {
                send(frame::error_frame(id, &Error::Protocol(message)));
                break;
            }
        };
        let (send, uploads) = (&send, &uploads);
        s.spawn(move || {
            let result = req.and_then(|req| {
                let done = match &req {
                    Request::BlobFinish { upload } | Request::BlobAbort { upload } => Some(*upload),
                    _ => None,
                };
                let r = engine.handle(req);
                if let Some(u) = done {
                    uploads.lock().remove(&u);
                }
                if let Ok(Response::Upload(u)) = &r {
                    uploads.lock().insert(*u);
                }
                r
            });
            send(frame::response_frame(id, result));
        });
    });
    for u in uploads.into_inner() {
        engine.blob_abort(u);
    }
    let _ = stream.shutdown(Shutdown::Both);
}
