//! Tag secondary indexes.
//!
//! Index file (`index-<hex tag name>.idx`): `"FGIX"`, `u32` version,
//! `u64` covered seq, `u32` value count, then per value the encoded
//! `TagValue`, `u32` key count and the keys, then `u32` crc32 of everything
//! before it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Bound;
use std::path::{Path, PathBuf};

use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};
use crate::store::document::{IndexKey, TagValue};
use crate::tagquery::{CmpOp, Predicate, Test};

const INDEX_MAGIC: &[u8; 4] = b"FGIX";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TagIndex {
    pub tag_name: String,
    pub entries: BTreeMap<IndexKey, BTreeSet<String>>,
}

impl TagIndex {
    pub fn new(tag_name: impl Into<String>) -> Self {
        TagIndex {
            tag_name: tag_name.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, value: &TagValue, key: &str) {
        self.entries
            .entry(IndexKey::new(value))
            .or_default()
            .insert(key.to_owned());
    }

    pub fn remove(&mut self, value: &TagValue, key: &str) {
        let k = IndexKey::new(value);
        if let Some(set) = self.entries.get_mut(&k) {
            set.remove(key);
            if set.is_empty() {
                self.entries.remove(&k);
            }
        }
    }

    pub fn lookup(&self, value: &TagValue) -> Option<&BTreeSet<String>> {
        self.entries.get(&IndexKey::new(value))
    }

    /// Keys selected by `pred`, or `None` if the index cannot answer it
    /// selectively (`!=`).
    pub fn candidates(&self, pred: &Predicate) -> Option<Vec<&BTreeSet<String>>> {
        match &pred.test {
            Test::In(values) => Some(values.iter().filter_map(|v| self.lookup(v)).collect()),
            Test::Cmp(CmpOp::Eq, v) => Some(self.lookup(v).into_iter().collect()),
            Test::Cmp(CmpOp::Ne, _) => None,
            Test::Cmp(op, v) => {
                let key = IndexKey::new(v);
                let (lo, hi) = variant_bounds(v);
                let range = match op {
                    CmpOp::Lt => (lo, Bound::Excluded(key)),
                    CmpOp::Le => (lo, Bound::Included(key)),
                    CmpOp::Gt => (Bound::Excluded(key), hi),
                    CmpOp::Ge => (Bound::Included(key), hi),
                    CmpOp::Eq | CmpOp::Ne => unreachable!(),
                };
                Some(
                    self.entries
                        .range(range)
                        .filter(|(k, _)| k.0.variant() == v.variant())
                        .map(|(_, set)| set)
                        .collect(),
                )
            }
        }
    }

    pub fn file_path(dir: &Path, tag_name: &str) -> PathBuf {
        dir.join(format!("index-{}.idx", hex::encode(tag_name)))
    }

    pub fn save(&self, dir: &Path, seq: u64) -> Result<()> {
        let mut w = Writer::new();
        w.raw(INDEX_MAGIC)
            .u32(INDEX_VERSION)
            .u64(seq)
            .u32(self.entries.len() as u32);
        for (value, keys) in &self.entries {
            value.0.encode(&mut w);
            w.u32(keys.len() as u32);
            for k in keys {
                w.str(k);
            }
        }
        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        let path = Self::file_path(dir, &self.tag_name);
        let tmp = path.with_extension("idx.tmp");
        fs::write(&tmp, w.as_slice())?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Loads a snapshot; returns it with the seq it covers.
    pub fn load(dir: &Path, tag_name: &str) -> Result<Option<(TagIndex, u64)>> {
        let bytes = match fs::read(Self::file_path(dir, tag_name)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if bytes.len() < 24 || &bytes[..4] != INDEX_MAGIC {
            return Err(Error::Corrupt(format!("index file for `{tag_name}`")));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(Error::Corrupt(format!("index checksum for `{tag_name}`")));
        }
        let mut r = Reader::new(&body[4..]);
        if r.u32()? != INDEX_VERSION {
            return Err(Error::Corrupt("index version".into()));
        }
        let seq = r.u64()?;
        let n = r.u32()?;
        let mut idx = TagIndex::new(tag_name);
        for _ in 0..n {
            let v = TagValue::decode(&mut r)?;
            let count = r.u32()?;
            let mut keys = BTreeSet::new();
            for _ in 0..count {
                keys.insert(r.string()?);
            }
            idx.entries.insert(IndexKey::new(&v), keys);
        }
        r.finish()?;
        Ok(Some((idx, seq)))
    }
}

/// Index-key bounds spanning exactly the variant of `v`.
fn variant_bounds(v: &TagValue) -> (Bound<IndexKey>, Bound<IndexKey>) {
    match v {
        TagValue::Str(_) => (
            Bound::Included(IndexKey(TagValue::Str(String::new()))),
            Bound::Excluded(IndexKey(TagValue::Int(i64::MIN))),
        ),
        TagValue::Int(_) => (
            Bound::Included(IndexKey(TagValue::Int(i64::MIN))),
            Bound::Included(IndexKey(TagValue::Int(i64::MAX))),
        ),
        TagValue::Float(_) => (
            Bound::Included(IndexKey(TagValue::Float(f64::NEG_INFINITY))),
            Bound::Included(IndexKey(TagValue::Float(f64::INFINITY))),
        ),
        TagValue::Bool(_) => (
            Bound::Included(IndexKey(TagValue::Bool(false))),
            Bound::Included(IndexKey(TagValue::Bool(true))),
        ),
    }
}
