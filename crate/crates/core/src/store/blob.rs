//! Chunked blob files under `blobs/`, one file per chunk named
//! `<blob_id>.<chunk_index>`. Each chunk is encoded independently with the
//! blob's codec; the pointer's checksum is the SHA-256 of the raw bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::document::BlobPointer;

pub const BLOB_DIR: &str = "blobs";
pub const MIN_CHUNK: u32 = 4 * 1024;
pub const MAX_CHUNK: u32 = 4 * 1024 * 1024;
pub const DEFAULT_CHUNK: u32 = 256 * 1024;

/// Chunk codecs recognised by the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Codec {
    None = 0,
    /// Raw deflate.
    Deflate = 1,
}

impl Codec {
    pub const DEFAULT: Codec = Codec::Deflate;

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Codec::None),
            1 => Ok(Codec::Deflate),
            other => Err(Error::InvalidArgument(format!("unknown codec id {other}"))),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn encode(self, raw: &[u8]) -> Vec<u8> {
        match self {
            Codec::None => raw.to_vec(),
            Codec::Deflate => {
                let mut enc = flate2::write::DeflateEncoder::new(
                    Vec::with_capacity(raw.len() / 2 + 64),
                    flate2::Compression::fast(),
                );
                enc.write_all(raw).expect("in-memory write");
                enc.finish().expect("in-memory write")
            }
        }
    }

    /// Decodes one chunk, failing unless it yields exactly `expected_len`
    /// bytes.
    pub fn decode(self, encoded: &[u8], expected_len: usize) -> std::result::Result<Vec<u8>, ()> {
        let raw = match self {
            Codec::None => encoded.to_vec(),
            Codec::Deflate => {
                let mut out = Vec::with_capacity(expected_len);
                // Read one byte past the expected size so oversize output
                // is detected without unbounded allocation.
                flate2::read::DeflateDecoder::new(encoded)
                    .take(expected_len as u64 + 1)
                    .read_to_end(&mut out)
                    .map_err(|_| ())?;
                out
            }
        };
        if raw.len() == expected_len {
            Ok(raw)
        } else {
            Err(())
        }
    }
}

pub fn validate_chunk_size(chunk_size: u32) -> Result<()> {
    if (MIN_CHUNK..=MAX_CHUNK).contains(&chunk_size) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "chunk size {chunk_size} outside [{MIN_CHUNK}, {MAX_CHUNK}]"
        )))
    }
}

pub fn chunk_path(dir: &Path, blob_id: &str, index: u32) -> PathBuf {
    dir.join(BLOB_DIR).join(format!("{blob_id}.{index}"))
}

/// Splits a chunk file name into blob id and chunk index.
pub fn parse_chunk_name(name: &str) -> Option<(&str, u32)> {
    let (id, idx) = name.rsplit_once('.')?;
    Some((id, idx.parse().ok()?))
}

pub fn new_blob_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

/// Incremental blob writer. Raw bytes are buffered into `chunk_size` chunks;
/// pre-encoded chunks (from the wire) can be pushed directly.
pub struct BlobWriter {
    dir: PathBuf,
    pub blob_id: String,
    chunk_size: u32,
    codec: Codec,
    hasher: Sha256,
    buf: Vec<u8>,
    next_index: u32,
    total: u64,
    written_bytes: u64,
    sync: bool,
}

impl BlobWriter {
    pub fn new(dir: &Path, chunk_size: u32, codec_id: u8, sync: bool) -> Result<Self> {
        validate_chunk_size(chunk_size)?;
        let codec = Codec::from_id(codec_id)?;
        fs::create_dir_all(dir.join(BLOB_DIR))?;
        Ok(BlobWriter {
            dir: dir.to_path_buf(),
            blob_id: new_blob_id(),
            chunk_size,
            codec,
            hasher: Sha256::new(),
            buf: Vec::new(),
            next_index: 0,
            total: 0,
            written_bytes: 0,
            sync,
        })
    }

    pub fn chunk_size(&self) -> u32 {
        self.chunk_size
    }

    pub fn next_index(&self) -> u32 {
        self.next_index
    }

    /// Bytes written to chunk files so far (post-encoding).
    pub fn written_bytes(&self) -> u64 {
        self.written_bytes
    }

    /// Returns the encoded chunks that are ready to be flushed, leaving any
    /// partial chunk buffered.
    pub fn push_raw(&mut self, mut data: &[u8]) -> Vec<(u32, Vec<u8>)> {
        let cs = self.chunk_size as usize;
        let mut ready = Vec::new();
        while !data.is_empty() {
            let take = (cs - self.buf.len()).min(data.len());
            self.buf.extend_from_slice(&data[..take]);
            data = &data[take..];
            if self.buf.len() == cs {
                let chunk = std::mem::take(&mut self.buf);
                ready.push(self.seal(&chunk));
            }
        }
        ready
    }

    fn seal(&mut self, raw: &[u8]) -> (u32, Vec<u8>) {
        self.hasher.update(raw);
        self.total += raw.len() as u64;
        let idx = self.next_index;
        self.next_index += 1;
        (idx, self.codec.encode(raw))
    }

    /// Accepts a chunk already encoded with this blob's codec. Every chunk but
    /// the last must decode to exactly `chunk_size` bytes.
    pub fn push_encoded(&mut self, index: u32, raw_len: u32, encoded: Vec<u8>) -> Result<(u32, Vec<u8>)> {
        if !self.buf.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot mix raw and encoded chunk uploads".into(),
            ));
        }
        if index != self.next_index {
            return Err(Error::InvalidArgument(format!(
                "expected chunk {}, got {index}",
                self.next_index
            )));
        }
        if raw_len == 0 || raw_len > self.chunk_size {
            return Err(Error::InvalidArgument(format!("invalid chunk length {raw_len}")));
        }
        if self.total % self.chunk_size as u64 != 0 {
            return Err(Error::InvalidArgument(
                "only the final chunk may be shorter than chunk_size".into(),
            ));
        }
        let raw = self
            .codec
            .decode(&encoded, raw_len as usize)
            .map_err(|_| Error::ChecksumMismatch(self.blob_id.clone()))?;
        self.hasher.update(&raw);
        self.total += raw.len() as u64;
        self.next_index += 1;
        Ok((index, encoded))
    }

    /// Writes one encoded chunk to its file.
    pub fn write_chunk(&mut self, index: u32, encoded: &[u8]) -> Result<()> {
        let path = chunk_path(&self.dir, &self.blob_id, index);
        let mut f = fs::File::create(&path)?;
        f.write_all(encoded)?;
        if self.sync {
            f.sync_data()?;
        }
        self.written_bytes += encoded.len() as u64;
        Ok(())
    }

    /// Seals the trailing partial chunk, if any.
    pub fn flush_tail(&mut self) -> Option<(u32, Vec<u8>)> {
        if self.buf.is_empty() {
            None
        } else {
            let chunk = std::mem::take(&mut self.buf);
            Some(self.seal(&chunk))
        }
    }

    pub fn pointer(self) -> Result<BlobPointer> {
        if self.total == 0 {
            return Err(Error::EmptyBlob);
        }
        Ok(BlobPointer {
            blob_id: self.blob_id,
            total_size: self.total,
            chunk_count: self.next_index,
            chunk_size: self.chunk_size,
            codec_id: self.codec.id(),
            checksum: self.hasher.finalize().into(),
        })
    }

    /// Removes every chunk written so far.
    pub fn abort(self) {
        remove_blob(&self.dir, &self.blob_id, self.next_index);
    }
}

pub fn remove_blob(dir: &Path, blob_id: &str, chunk_count: u32) {
    for i in 0..chunk_count {
        let _ = fs::remove_file(chunk_path(dir, blob_id, i));
    }
}

/// Reads one chunk file as stored (still encoded).
pub fn read_chunk_encoded(dir: &Path, ptr: &BlobPointer, index: u32) -> Result<Vec<u8>> {
    if index >= ptr.chunk_count {
        return Err(Error::InvalidArgument(format!(
            "chunk {index} out of range for blob `{}`",
            ptr.blob_id
        )));
    }
    match fs::read(chunk_path(dir, &ptr.blob_id, index)) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if index == 0 {
                Err(Error::NotFound(format!("blob `{}`", ptr.blob_id)))
            } else {
                Err(Error::ChecksumMismatch(ptr.blob_id.clone()))
            }
        }
        Err(e) => Err(e.into()),
    }
}

pub fn decode_chunk(ptr: &BlobPointer, index: u32, encoded: &[u8]) -> Result<Vec<u8>> {
    Codec::from_id(ptr.codec_id)?
        .decode(encoded, ptr.chunk_len(index) as usize)
        .map_err(|_| Error::ChecksumMismatch(ptr.blob_id.clone()))
}

/// Incremental verifier for a full read assembled chunk by chunk.
pub struct BlobAssembler<'a> {
    ptr: &'a BlobPointer,
    hasher: Sha256,
    out: Vec<u8>,
}

impl<'a> BlobAssembler<'a> {
    pub fn new(ptr: &'a BlobPointer) -> Self {
        BlobAssembler {
            ptr,
            hasher: Sha256::new(),
            out: Vec::with_capacity(ptr.total_size.min(1 << 30) as usize),
        }
    }

    pub fn push_encoded(&mut self, index: u32, encoded: &[u8]) -> Result<()> {
        let raw = decode_chunk(self.ptr, index, encoded)?;
        self.hasher.update(&raw);
        self.out.extend_from_slice(&raw);
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<u8>> {
        let digest: [u8; 32] = self.hasher.finalize().into();
        if self.out.len() as u64 != self.ptr.total_size || digest != self.ptr.checksum {
            return Err(Error::ChecksumMismatch(self.ptr.blob_id.clone()));
        }
        Ok(self.out)
    }
}

pub fn read_blob(dir: &Path, ptr: &BlobPointer) -> Result<Vec<u8>> {
    let mut asm = BlobAssembler::new(ptr);
    for i in 0..ptr.chunk_count {
        let enc = read_chunk_encoded(dir, ptr, i)?;
        asm.push_encoded(i, &enc)?;
    }
    asm.finish()
}
