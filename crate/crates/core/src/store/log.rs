//! Append-only log segments.
//!
//! Segment layout: `"FGLG"`, `u32` format version, then records. Each record
//! is `u32 body_len`, `u32 crc32(body)`, body. A body is `u64 seq`,
//! `u64 written_at_ms`, `u32 op_count`, ops. A record whose length or
//! checksum does not verify ends the segment; everything after it is
//! discarded on open.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};
use crate::store::document::Document;

pub const SEGMENT_MAGIC: &[u8; 4] = b"FGLG";
pub const SEGMENT_VERSION: u32 = 1;
const SEGMENT_HEADER: u64 = 8;
/// Upper bound on a single record body; guards replay against garbage lengths.
pub const MAX_RECORD: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Visible user document.
    PutDoc(Document),
    /// Document staged under a commit group; invisible until the group commits.
    StageDoc { group: String, doc: Document },
    ClearGroup(String),
    CommitGroup(String),
    DeleteDoc(String),
    PutSys {
        key: String,
        value: Vec<u8>,
        blob_refs: Vec<String>,
    },
    DeleteSys(String),
}

impl Op {
    fn tag(&self) -> u8 {
        match self {
            Op::PutDoc(_) => 1,
            Op::StageDoc { .. } => 2,
            Op::ClearGroup(_) => 3,
            Op::CommitGroup(_) => 4,
            Op::DeleteDoc(_) => 5,
            Op::PutSys { .. } => 6,
            Op::DeleteSys(_) => 7,
        }
    }
}

impl Encode for Op {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.tag());
        match self {
            Op::PutDoc(d) => d.encode(w),
            Op::StageDoc { group, doc } => {
                w.str(group);
                doc.encode(w);
            }
            Op::ClearGroup(g) | Op::CommitGroup(g) | Op::DeleteDoc(g) | Op::DeleteSys(g) => {
                w.str(g);
            }
            Op::PutSys {
                key,
                value,
                blob_refs,
            } => {
                w.str(key).bytes(value).str_list(blob_refs);
            }
        }
    }
}

impl Decode for Op {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(match r.u8()? {
            1 => Op::PutDoc(Document::decode(r)?),
            2 => Op::StageDoc {
                group: r.string()?,
                doc: Document::decode(r)?,
            },
            3 => Op::ClearGroup(r.string()?),
            4 => Op::CommitGroup(r.string()?),
            5 => Op::DeleteDoc(r.string()?),
            6 => Op::PutSys {
                key: r.string()?,
                value: r.bytes()?.to_vec(),
                blob_refs: r.str_list()?,
            },
            7 => Op::DeleteSys(r.string()?),
            t => return Err(Error::Corrupt(format!("unknown log op {t}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub seq: u64,
    pub written_at: u64,
    pub ops: Vec<Op>,
}

impl Record {
    /// Full on-disk framing including the length and checksum words.
    pub fn frame(&self) -> Vec<u8> {
        let mut body = Writer::with_capacity(64);
        body.u64(self.seq).u64(self.written_at).u32(self.ops.len() as u32);
        for op in &self.ops {
            op.encode(&mut body);
        }
        let body = body.into_inner();
        let mut out = Writer::with_capacity(body.len() + 8);
        out.u32(body.len() as u32)
            .u32(crc32fast::hash(&body))
            .raw(&body);
        out.into_inner()
    }

    fn decode_body(body: &[u8]) -> Result<Record> {
        let mut r = Reader::new(body);
        let seq = r.u64()?;
        let written_at = r.u64()?;
        let n = r.u32()? as usize;
        let mut ops = Vec::with_capacity(n.min(body.len()));
        for _ in 0..n {
            ops.push(Op::decode(&mut r)?);
        }
        r.finish()?;
        Ok(Record {
            seq,
            written_at,
            ops,
        })
    }
}

pub fn segment_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("log-{id:08}.seg"))
}

pub fn parse_segment_name(name: &str) -> Option<u32> {
    name.strip_prefix("log-")?.strip_suffix(".seg")?.parse().ok()
}

/// Result of replaying one segment.
pub struct Replay {
    pub records: Vec<Record>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    /// True when trailing bytes failed to verify.
    pub torn: bool,
}

pub fn read_segment(path: &Path) -> Result<Replay> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < SEGMENT_HEADER as usize {
        // A crash while creating the segment may leave a short header.
        return Ok(Replay {
            records: Vec::new(),
            valid_len: 0,
            torn: !bytes.is_empty(),
        });
    }
    if &bytes[..4] != SEGMENT_MAGIC {
        return Err(Error::Corrupt(format!("{} is not a log segment", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SEGMENT_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported segment version {version}"
        )));
    }
    let mut pos = SEGMENT_HEADER as usize;
    let mut records = Vec::new();
    let mut torn = false;
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            torn = true;
            break;
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes"));
        if len > MAX_RECORD || bytes.len() - pos - 8 < len {
            torn = true;
            break;
        }
        let body = &bytes[pos + 8..pos + 8 + len];
        if crc32fast::hash(body) != crc {
            torn = true;
            break;
        }
        match Record::decode_body(body) {
            Ok(rec) => records.push(rec),
            Err(_) => {
                torn = true;
                break;
            }
        }
        pos += 8 + len;
    }
    Ok(Replay {
        records,
        valid_len: pos as u64,
        torn,
    })
}

/// Appender for the active segment.
pub struct SegmentWriter {
    pub id: u32,
    file: File,
    len: u64,
    sync: bool,
}

impl SegmentWriter {
    pub fn create(dir: &Path, id: u32, sync: bool) -> Result<Self> {
        let path = segment_path(dir, id);
        let mut file = OpenOptions::new()
            .create(true)
            .truncate(true)
            .write(true)
            .read(true)
            .open(&path)?;
        let mut header = Writer::new();
        header.raw(SEGMENT_MAGIC).u32(SEGMENT_VERSION);
        file.write_all(header.as_slice())?;
        if sync {
            file.sync_all()?;
        }
        Ok(SegmentWriter {
            id,
            file,
            len: SEGMENT_HEADER,
            sync,
        })
    }

    /// Opens an existing segment for append, truncating to `valid_len`.
    pub fn reopen(dir: &Path, id: u32, valid_len: u64, sync: bool) -> Result<Self> {
        if valid_len < SEGMENT_HEADER {
            return Self::create(dir, id, sync);
        }
        let path = segment_path(dir, id);
        let mut file = OpenOptions::new().write(true).read(true).open(&path)?;
        file.set_len(valid_len)?;
        file.seek(SeekFrom::Start(valid_len))?;
        if sync {
            file.sync_all()?;
        }
        Ok(SegmentWriter {
            id,
            file,
            len: valid_len,
            sync,
        })
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len <= SEGMENT_HEADER
    }

    pub fn append(&mut self, framed: &[u8]) -> Result<()> {
        self.file.write_all(framed)?;
        self.len += framed.len() as u64;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    /// Writes a prefix of a record without syncing; used to simulate a crash
    /// in the middle of a write.
    pub fn append_torn(&mut self, framed: &[u8], keep: usize) -> Result<()> {
        self.file.write_all(&framed[..keep.min(framed.len())])?;
        self.file.flush()?;
        Ok(())
    }

    pub fn sync(&mut self) -> Result<()> {
        self.file.sync_all()?;
        Ok(())
    }
}
