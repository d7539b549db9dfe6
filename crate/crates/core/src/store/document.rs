use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};

pub type DocumentKey = String;
pub type TagMap = BTreeMap<String, TagValue>;

/// Maximum number of tags a document may carry.
pub const MAX_TAGS: usize = 64;
/// Maximum key length in bytes.
pub const MAX_KEY_LEN: usize = 1024;
/// Keys under this prefix belong to the engine and are never user documents.
pub const SYS_PREFIX: &str = "__sys/";

/// A scalar tag value.
///
/// Ordering is only meaningful within one variant; comparing across
/// variants is a query error. `Int` and `Float` are distinct variants.
#[derive(Debug, Clone, PartialEq)]
pub enum TagValue {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Str,
    Int,
    Float,
    Bool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Str, Variant::Int, Variant::Float, Variant::Bool];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Str => "string",
            Variant::Int => "integer",
            Variant::Float => "float",
            Variant::Bool => "boolean",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TagValue {
    pub fn variant(&self) -> Variant {
        match self {
            TagValue::Str(_) => Variant::Str,
            TagValue::Int(_) => Variant::Int,
            TagValue::Float(_) => Variant::Float,
            TagValue::Bool(_) => Variant::Bool,
        }
    }

    /// Same-variant comparison; `None` when the variants differ.
    pub fn partial_cmp_same(&self, other: &TagValue) -> Option<Ordering> {
        match (self, other) {
            (TagValue::Str(a), TagValue::Str(b)) => Some(a.as_bytes().cmp(b.as_bytes())),
            (TagValue::Int(a), TagValue::Int(b)) => Some(a.cmp(b)),
            (TagValue::Float(a), TagValue::Float(b)) => a.partial_cmp(b),
            (TagValue::Bool(a), TagValue::Bool(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            TagValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            TagValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            TagValue::Float(v) => Some(*v),
            TagValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }
}

impl fmt::Display for TagValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagValue::Str(s) => write!(f, "{s:?}"),
            TagValue::Int(v) => write!(f, "{v}"),
            TagValue::Float(v) => write!(f, "{v:?}"),
            TagValue::Bool(v) => write!(f, "{v}"),
        }
    }
}

impl From<&str> for TagValue {
    fn from(s: &str) -> Self {
        TagValue::Str(s.to_owned())
    }
}

impl From<String> for TagValue {
    fn from(s: String) -> Self {
        TagValue::Str(s)
    }
}

impl From<i64> for TagValue {
    fn from(v: i64) -> Self {
        TagValue::Int(v)
    }
}

impl From<f64> for TagValue {
    fn from(v: f64) -> Self {
        TagValue::Float(v)
    }
}

impl From<bool> for TagValue {
    fn from(v: bool) -> Self {
        TagValue::Bool(v)
    }
}

impl Serialize for TagValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TagValue::Str(v) => s.serialize_str(v),
            TagValue::Int(v) => s.serialize_i64(*v),
            TagValue::Float(v) => s.serialize_f64(*v),
            TagValue::Bool(v) => s.serialize_bool(*v),
        }
    }
}

impl<'de> Deserialize<'de> for TagValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => Ok(TagValue::Str(s)),
            serde_json::Value::Bool(b) => Ok(TagValue::Bool(b)),
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    // serde_json only reports integers for literals without
                    // a fraction or exponent.
                    Ok(TagValue::Int(i))
                } else if let Some(f) = n.as_f64() {
                    Ok(TagValue::Float(f))
                } else {
                    Err(D::Error::custom("tag number out of range"))
                }
            }
            other => Err(D::Error::custom(format!(
                "tag values must be string, number or boolean, got {other}"
            ))),
        }
    }
}

/// Total order used as the key of tag indexes: variant first, then value.
/// Floats are ordered numerically, with `-0.0` folded into `0.0`.
#[derive(Debug, Clone)]
pub struct IndexKey(pub TagValue);

impl IndexKey {
    pub fn new(v: &TagValue) -> Self {
        match v {
            TagValue::Float(f) if *f == 0.0 => IndexKey(TagValue::Float(0.0)),
            other => IndexKey(other.clone()),
        }
    }
}

impl PartialEq for IndexKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for IndexKey {}

impl PartialOrd for IndexKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for IndexKey {
    fn cmp(&self, other: &Self) -> Ordering {
        match (&self.0, &other.0) {
            (TagValue::Float(a), TagValue::Float(b)) => a.total_cmp(b),
            (a, b) => a
                .variant()
                .cmp(&b.variant())
                .then_with(|| a.partial_cmp_same(b).unwrap_or(Ordering::Equal)),
        }
    }
}

/// Reference into the chunked blob store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlobPointer {
    pub blob_id: String,
    pub total_size: u64,
    pub chunk_count: u32,
    pub chunk_size: u32,
    pub codec_id: u8,
    #[serde(with = "hex_digest")]
    pub checksum: [u8; 32],
}

impl BlobPointer {
    pub fn chunk_len(&self, index: u32) -> u64 {
        let start = index as u64 * self.chunk_size as u64;
        (self.total_size - start).min(self.chunk_size as u64)
    }
}

mod hex_digest {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        use serde::de::Error;
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(D::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| D::Error::custom("checksum must be 32 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Inline(#[serde(with = "hex_bytes")] Vec<u8>),
    Blob(BlobPointer),
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        use serde::de::Error;
        hex::decode(String::deserialize(d)?).map_err(D::Error::custom)
    }
}

/// One sample or prediction row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub key: DocumentKey,
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub tags: TagMap,
}

impl Document {
    pub fn inline(key: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        Document {
            key: key.into(),
            payload: Payload::Inline(data.into()),
            label: None,
            tags: TagMap::new(),
        }
    }

    pub fn blob(key: impl Into<String>, ptr: BlobPointer) -> Self {
        Document {
            key: key.into(),
            payload: Payload::Blob(ptr),
            label: None,
            tags: TagMap::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_tag(mut self, name: impl Into<String>, value: impl Into<TagValue>) -> Self {
        self.tags.insert(name.into(), value.into());
        self
    }

    pub fn blob_id(&self) -> Option<&str> {
        match &self.payload {
            Payload::Blob(p) => Some(&p.blob_id),
            Payload::Inline(_) => None,
        }
    }

    /// Checks every structural invariant except uniqueness and size limits.
    pub fn validate(&self) -> Result<()> {
        validate_key(&self.key)?;
        if self.key.starts_with(SYS_PREFIX) {
            return Err(Error::InvalidDocument(format!(
                "key prefix `{SYS_PREFIX}` is reserved"
            )));
        }
        if self.tags.len() > MAX_TAGS {
            return Err(Error::InvalidDocument(format!(
                "{} tags exceed the limit of {MAX_TAGS}",
                self.tags.len()
            )));
        }
        for (name, value) in &self.tags {
            validate_tag_name(name)?;
            if let TagValue::Float(f) = value {
                if !f.is_finite() {
                    return Err(Error::InvalidDocument(format!(
                        "tag `{name}` holds a non-finite float"
                    )));
                }
            }
        }
        if let Payload::Blob(p) = &self.payload {
            if p.chunk_size == 0
                || p.chunk_count as u64 != p.total_size.div_ceil(p.chunk_size as u64)
            {
                return Err(Error::InvalidDocument(format!(
                    "blob pointer `{}` has inconsistent chunk geometry",
                    p.blob_id
                )));
            }
        }
        Ok(())
    }
}

pub fn validate_key(key: &str) -> Result<()> {
    if key.is_empty() {
        return Err(Error::InvalidDocument("empty key".into()));
    }
    if key.len() > MAX_KEY_LEN {
        return Err(Error::InvalidDocument(format!(
            "key longer than {MAX_KEY_LEN} bytes"
        )));
    }
    Ok(())
}

pub fn validate_tag_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.bytes().all(|b| b.is_ascii_graphic()) {
        return Err(Error::InvalidDocument(format!(
            "tag name {name:?} must be non-empty ASCII without whitespace"
        )));
    }
    Ok(())
}

impl Encode for TagValue {
    fn encode(&self, w: &mut Writer) {
        match self {
            TagValue::Str(s) => w.u8(0).str(s),
            TagValue::Int(v) => w.u8(1).i64(*v),
            TagValue::Float(v) => w.u8(2).f64(*v),
            TagValue::Bool(v) => w.u8(3).bool(*v),
        };
    }
}

impl Decode for TagValue {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(match r.u8()? {
            0 => TagValue::Str(r.string()?),
            1 => TagValue::Int(r.i64()?),
            2 => TagValue::Float(r.f64()?),
            3 => TagValue::Bool(r.bool()?),
            t => return Err(Error::Corrupt(format!("unknown tag variant {t}"))),
        })
    }
}

impl Encode for TagMap {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.len() as u32);
        for (k, v) in self {
            w.str(k);
            v.encode(w);
        }
    }
}

impl Decode for TagMap {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.u32()?;
        let mut tags = TagMap::new();
        for _ in 0..n {
            let k = r.string()?;
            tags.insert(k, TagValue::decode(r)?);
        }
        Ok(tags)
    }
}

impl Encode for BlobPointer {
    fn encode(&self, w: &mut Writer) {
        w.str(&self.blob_id)
            .u64(self.total_size)
            .u32(self.chunk_count)
            .u32(self.chunk_size)
            .u8(self.codec_id)
            .raw(&self.checksum);
    }
}

impl Decode for BlobPointer {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(BlobPointer {
            blob_id: r.string()?,
            total_size: r.u64()?,
            chunk_count: r.u32()?,
            chunk_size: r.u32()?,
            codec_id: r.u8()?,
            checksum: r.take(32)?.try_into().expect("32 bytes"),
        })
    }
}

impl Encode for Document {
    fn encode(&self, w: &mut Writer) {
        w.str(&self.key);
        match &self.payload {
            Payload::Inline(b) => {
                w.u8(0).bytes(b);
            }
            Payload::Blob(p) => {
                w.u8(1);
                p.encode(w);
            }
        }
        w.opt_str(self.label.as_deref());
        self.tags.encode(w);
    }
}

impl Decode for Document {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let key = r.string()?;
        let payload = match r.u8()? {
            0 => Payload::Inline(r.bytes()?.to_vec()),
            1 => Payload::Blob(BlobPointer::decode(r)?),
            t => return Err(Error::Corrupt(format!("unknown payload kind {t}"))),
        };
        let label = r.opt_string()?;
        let tags = TagMap::decode(r)?;
        Ok(Document {
            key,
            payload,
            label,
            tags,
        })
    }
}
