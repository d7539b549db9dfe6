//! Model registry: immutable network specs, versioned parameter states and
//! an append-only event log.

pub mod cache;
pub mod fgts;

use serde::{Deserialize, Serialize};

use crate::compute::NetworkSpec;
use crate::engine::{part, Engine};
use crate::error::{Error, Result};
use crate::store::{BlobPointer, TagMap, Txn, SYS_PREFIX};

pub use cache::ModelCache;
pub use fgts::NamedTensors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_key: String,
    pub spec: NetworkSpec,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub model_key: String,
    pub version_id: String,
    pub step: u64,
    pub state: BlobPointer,
    pub metrics: TagMap,
    pub parent_version: Option<String>,
    /// Task whose attempt produced this version; a later save for the same
    /// task replaces it.
    #[serde(default)]
    pub origin_task: Option<String>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvent {
    pub model_key: String,
    pub step: u64,
    pub name: String,
    pub value: f64,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionSelector {
    Latest,
    Id(String),
}

impl std::str::FromStr for VersionSelector {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s == "latest" {
            VersionSelector::Latest
        } else {
            VersionSelector::Id(s.to_owned())
        })
    }
}

/// `s<step>-<first 8 hex digits of the state's SHA-256>`.
pub fn version_id(step: u64, checksum: &[u8; 32]) -> String {
    format!("s{step}-{}", &hex::encode(checksum)[..8])
}

fn model_key(model: &str) -> String {
    format!("{SYS_PREFIX}model/{}", part(model))
}

fn versions_prefix(model: &str) -> String {
    format!("{SYS_PREFIX}version/{}/", part(model))
}

fn version_key(model: &str, step: u64, id: &str) -> String {
    format!("{}{step:020}/{id}", versions_prefix(model))
}

fn events_prefix(model: &str) -> String {
    format!("{SYS_PREFIX}event/{}/", part(model))
}

pub(crate) fn model_exists(t: &Txn<'_>, model: &str) -> bool {
    t.sys_get(&model_key(model)).is_some()
}

fn versions_in(t: &Txn<'_>, model: &str) -> Result<Vec<ModelVersion>> {
    t.sys_range(&versions_prefix(model))
        .into_iter()
        .map(|(_, v)| Ok(serde_json::from_slice(&v)?))
        .collect()
}

impl Engine {
    pub fn register_model(&self, model: &str, spec: NetworkSpec) -> Result<ModelRecord> {
        if model.is_empty() {
            return Err(Error::InvalidArgument("model key is empty".into()));
        }
        spec.validate()?;
        self.store.transact(|t| {
            if model_exists(t, model) {
                return Err(Error::DuplicateKey(model.to_owned()));
            }
            let r = ModelRecord {
                model_key: model.to_owned(),
                spec,
                created_at: t.now_ms(),
            };
            t.sys_put_json(&model_key(model), &r)?;
            Ok(r)
        })
    }

    pub fn get_model(&self, model: &str) -> Result<ModelRecord> {
        self.store
            .sys_get_json(&model_key(model))?
            .ok_or_else(|| Error::ModelNotFound(model.to_owned()))
    }

    pub fn list_models(&self) -> Result<Vec<ModelRecord>> {
        self.store
            .sys_range(&format!("{SYS_PREFIX}model/"))
            .into_iter()
            .map(|(_, v)| Ok(serde_json::from_slice(&v)?))
            .collect()
    }

    /// Publishes an uploaded state blob as a version. Re-committing the same
    /// content at the same step returns the existing version.
    pub fn commit_version(
        &self,
        model: &str,
        step: u64,
        state: BlobPointer,
        metrics: TagMap,
        parent_version: Option<String>,
        origin_task: Option<String>,
    ) -> Result<ModelVersion> {
        self.store.transact(|t| {
            if !model_exists(t, model) {
                return Err(Error::ModelNotFound(model.to_owned()));
            }
            if !t.blob_exists(&state.blob_id) {
                return Err(Error::NotFound(format!("blob `{}`", state.blob_id)));
            }
            let id = version_id(step, &state.checksum);
            let existing = versions_in(t, model)?;
            if let Some(v) = existing.iter().find(|v| v.version_id == id) {
                return Ok(v.clone());
            }
            if let Some(task) = &origin_task {
                for v in existing.iter().filter(|v| v.origin_task.as_ref() == Some(task)) {
                    t.sys_delete(&version_key(model, v.step, &v.version_id));
                }
            }
            let v = ModelVersion {
                model_key: model.to_owned(),
                version_id: id,
                step,
                metrics,
                parent_version,
                origin_task,
                created_at: t.now_ms(),
                state,
            };
            t.sys_put(
                &version_key(model, step, &v.version_id),
                serde_json::to_vec(&v)?,
                vec![v.state.blob_id.clone()],
            );
            Ok(v)
        })
    }

    /// Versions ordered by step, then id.
    pub fn list_versions(&self, model: &str) -> Result<Vec<ModelVersion>> {
        self.get_model(model)?;
        self.store
            .sys_range(&versions_prefix(model))
            .into_iter()
            .map(|(_, v)| Ok(serde_json::from_slice(&v)?))
            .collect()
    }

    pub fn get_version(&self, model: &str, selector: &VersionSelector) -> Result<ModelVersion> {
        let versions = self.list_versions(model)?;
        let found = match selector {
            VersionSelector::Latest => versions.into_iter().next_back(),
            VersionSelector::Id(id) => versions.into_iter().find(|v| &v.version_id == id),
        };
        found.ok_or_else(|| {
            Error::VersionNotFound(match selector {
                VersionSelector::Latest => format!("{model}: no versions"),
                VersionSelector::Id(id) => format!("{model}@{id}"),
            })
        })
    }

    pub fn record_event(
        &self,
        model: &str,
        step: u64,
        name: &str,
        value: f64,
        at: Option<u64>,
    ) -> Result<ModelEvent> {
        if name.is_empty() {
            return Err(Error::InvalidArgument("event name is empty".into()));
        }
        self.record_events(model, &[(step, name.to_owned(), value)], at)
            .map(|mut v| v.remove(0))
    }

    /// Appends several events in one record.
    pub fn record_events(
        &self,
        model: &str,
        events: &[(u64, String, f64)],
        at: Option<u64>,
    ) -> Result<Vec<ModelEvent>> {
        self.store.transact(|t| {
            if !model_exists(t, model) {
                return Err(Error::ModelNotFound(model.to_owned()));
            }
            let at = at.unwrap_or_else(|| t.now_ms());
            let seq = t.next_seq();
            let mut out = Vec::with_capacity(events.len());
            for (i, (step, name, value)) in events.iter().enumerate() {
                let e = ModelEvent {
                    model_key: model.to_owned(),
                    step: *step,
                    name: name.clone(),
                    value: *value,
                    at,
                };
                let key = format!(
                    "{}{step:020}/{at:016x}/{seq:016x}{i:08x}",
                    events_prefix(model)
                );
                t.sys_put_json(&key, &e)?;
                out.push(e);
            }
            Ok(out)
        })
    }

    /// Events with `lo <= step < hi`, optionally only those named `name`,
    /// ordered by `(step, at, insertion)`.
    pub fn query_events(
        &self,
        model: &str,
        name: Option<&str>,
        lo: u64,
        hi: u64,
    ) -> Result<Vec<ModelEvent>> {
        self.get_model(model)?;
        let mut out = Vec::new();
        for (_, v) in self.store.sys_range(&events_prefix(model)) {
            let e: ModelEvent = serde_json::from_slice(&v)?;
            if e.step >= lo && e.step < hi && name.is_none_or(|n| n == e.name) {
                out.push(e);
            }
        }
        Ok(out)
    }
}
