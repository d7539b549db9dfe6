//! Spawning `forge` processes from tests.

#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};

pub const BIN: &str = env!("CARGO_BIN_EXE_forge");

/// A `forge serve` child on an ephemeral port, killed on drop.
pub struct Service {
    pub addr: String,
    child: Child,
}

impl Service {
    pub fn start(dir: &Path, extra: &[&str]) -> Service {
        let mut child = Command::new(BIN)
            .args(["--json", "--addr", "127.0.0.1:0", "serve"])
            .arg(dir)
            .args(["--no-sync"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn forge serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .expect("read listening line");
        let v: serde_json::Value = serde_json::from_str(&line).unwrap_or_else(|e| panic!("{e}: {line:?}"));
        Service {
            addr: v["listening"].as_str().expect("listening address").to_owned(),
            child,
        }
    }

    pub fn forge(&self, args: &[&str]) -> Run {
        forge(&self.addr, args)
    }

    /// Starts a long-running command against this service.
    pub fn spawn(&self, args: &[&str]) -> Child {
        Command::new(BIN)
            .env(forge_wire::ADDR_ENV, &self.addr)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .expect("spawn forge")
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug)]
pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    /// Every JSON document on stdout; one value unless the command streams lines.
    pub fn json(&self) -> serde_json::Value {
        let mut docs: Vec<serde_json::Value> = serde_json::Deserializer::from_str(&self.stdout)
            .into_iter()
            .collect::<Result<_, _>>()
            .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", self.stdout));
        if docs.len() == 1 {
            docs.remove(0)
        } else {
            serde_json::Value::Array(docs)
        }
    }

    pub fn ok(self) -> Run {
        assert_eq!(self.code, 0, "stdout: {}\nstderr: {}", self.stdout, self.stderr);
        self
    }
}

pub fn forge(addr: &str, args: &[&str]) -> Run {
    let out = Command::new(BIN)
        .env(forge_wire::ADDR_ENV, addr)
        .args(args)
        .output()
        .expect("run forge");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}
