//! Conformance harness that runs the engine behind a loopback server.

use std::sync::Arc;

use forge_core::testkit::{open_engine, Harness};

use crate::{RemoteBackend, Server};

pub fn remote_harness() -> Harness {
    let (engine, clock, dir) = open_engine();
    let server = Server::bind(engine, "127.0.0.1:0").expect("bind").spawn();
    let backend = RemoteBackend::connect(server.addr().to_string()).expect("connect");
    Harness {
        backend: Arc::new(backend),
        clock,
        // Server first, so the store is closed before its directory goes.
        guard: Box::new((server, dir)),
    }
}
