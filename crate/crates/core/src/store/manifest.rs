//! The `MANIFEST` file: `"FGMF"`, `u32` format version, `u32` inline
//! threshold, `u32` segment count + `u32` ids, `u32` index count + each tag
//! name as `u16` length + UTF-8, then a trailing `u32` crc32 of everything
//! before it. All integers little-endian. Replaced atomically via rename.

use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "MANIFEST";
pub const MANIFEST_MAGIC: &[u8; 4] = b"FGMF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub format_version: u32,
    pub inline_threshold: u32,
    pub segments: Vec<u32>,
    pub indexes: Vec<String>,
}

impl Manifest {
    pub fn new(inline_threshold: u32) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            inline_threshold,
            segments: vec![1],
            indexes: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MANIFEST_MAGIC)
            .u32(self.format_version)
            .u32(self.inline_threshold)
            .u32(self.segments.len() as u32);
        for id in &self.segments {
            w.u32(*id);
        }
        w.u32(self.indexes.len() as u32);
        for name in &self.indexes {
            w.u16(name.len() as u16).raw(name.as_bytes());
        }
        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MANIFEST_MAGIC {
            return Err(Error::Corrupt("manifest magic mismatch".into()));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(Error::Corrupt("manifest checksum mismatch".into()));
        }
        let mut r = Reader::new(&body[4..]);
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported store format version {format_version}"
            )));
        }
        let inline_threshold = r.u32()?;
        let nseg = r.u32()?;
        let mut segments = Vec::new();
        for _ in 0..nseg {
            segments.push(r.u32()?);
        }
        let nidx = r.u32()?;
        let mut indexes = Vec::new();
        for _ in 0..nidx {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Corrupt("index name is not utf-8".into()))?;
            indexes.push(name.to_owned());
        }
        r.finish()?;
        Ok(Manifest {
            format_version,
            inline_threshold,
            segments,
            indexes,
        })
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        match fs::read(dir.join(MANIFEST_FILE)) {
            Ok(bytes) => Self::decode(&bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn store(&self, dir: &Path, sync: bool) -> Result<()> {
        let tmp = dir.join("MANIFEST.tmp");
        fs::write(&tmp, self.encode())?;
        if sync {
            fs::File::open(&tmp)?.sync_all()?;
        }
        fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        if sync {
            fs::File::open(dir)?.sync_all()?;
        }
        Ok(())
    }
}
