//! Declarative network description.
//!
//! JSON form:
//!
//! ```json
//! {
//!   "input_dims": [2],
//!   "layers": [
//!     {"name": "h1", "kind": "dense", "out_units": 16, "param_key": "shared"},
//!     {"name": "a1", "kind": "tanh"},
//!     {"name": "drop", "kind": "dropout", "keep_prob": 0.9},
//!     {"name": "sq", "kind": "lambda", "registry_name": "square"},
//!     {"name": "out", "kind": "dense", "out_units": 1}
//!   ]
//! }
//! ```
//!
//! `kind` is one of `dense`, `relu`, `sigmoid`, `tanh`, `dropout`, `lambda`.
//! `param_key` is optional and only valid on `dense`; it defaults to the
//! layer name. Layers with the same key share one weight/bias pair.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense { out_units: usize },
    Relu,
    Sigmoid,
    Tanh,
    Dropout { keep_prob: f64 },
    Lambda { registry_name: String },
}

impl LayerKind {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_key: Option<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            param_key: None,
        }
    }

    pub fn dense(name: impl Into<String>, out_units: usize) -> Self {
        Self::new(name, LayerKind::Dense { out_units })
    }

    pub fn shared(mut self, key: impl Into<String>) -> Self {
        self.param_key = Some(key.into());
        self
    }

    /// Key of the parameter set this layer binds to.
    pub fn param_key(&self) -> Option<&str> {
        match self.kind {
            LayerKind::Dense { .. } => Some(self.param_key.as_deref().unwrap_or(&self.name)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dims: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Result of shape inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecShapes {
    /// Per-sample width entering each layer.
    pub layer_inputs: Vec<usize>,
    pub output_width: usize,
    /// `(fan_in, fan_out)` per parameter key.
    pub params: BTreeMap<String, (usize, usize)>,
}

impl SpecShapes {
    /// Expected `(name, dims)` of every serialized parameter tensor.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for (key, (fan_in, fan_out)) in &self.params {
            out.insert(format!("{key}/weight"), vec![*fan_in, *fan_out]);
            out.insert(format!("{key}/bias"), vec![*fan_out]);
        }
        out
    }
}

impl NetworkSpec {
    pub fn new(input_dims: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { input_dims, layers }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn input_width(&self) -> usize {
        self.input_dims.iter().product()
    }

    /// Structural validation and shape inference. Lambda names are resolved
    /// separately at build time.
    pub fn validate(&self) -> Result<SpecShapes> {
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "input_dims must be non-empty and positive, got {:?}",
                self.input_dims
            )));
        }
        let mut names = BTreeSet::new();
        let mut params: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut width = self.input_width();
        for layer in &self.layers {
            if layer.name.is_empty() {
                return Err(Error::InvalidSpec("layer name is empty".into()));
            }
            if !names.insert(layer.name.as_str()) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            if layer.param_key.is_some() && !layer.kind.is_parameterized() {
                return Err(Error::InvalidSpec(format!(
                    "layer `{}` has a param_key but no parameters",
                    layer.name
                )));
            }
            if let Some(k) = &layer.param_key {
                if k.is_empty() || k.contains('/') {
                    return Err(Error::InvalidSpec(format!(
                        "param_key `{k}` must be non-empty and contain no `/`"
                    )));
                }
            }
            layer_inputs.push(width);
            match &layer.kind {
                LayerKind::Dense { out_units } => {
                    if *out_units == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer `{}` has zero out_units",
                            layer.name
                        )));
                    }
                    let key = layer.param_key().expect("dense has a key").to_owned();
                    if key.contains('/') {
                        return Err(Error::InvalidSpec(format!(
                            "parameter key `{key}` contains `/`"
                        )));
                    }
                    let shape = (width, *out_units);
                    match params.get(&key) {
                        Some(prev) if *prev != shape => {
                            return Err(Error::InvalidSpec(format!(
                                "layers sharing `{key}` need {prev:?} but `{}` infers {shape:?}",
                                layer.name
                            )));
                        }
                        _ => {
                            params.insert(key, shape);
                        }
                    }
                    width = *out_units;
                }
                LayerKind::Dropout { keep_prob } => {
                    if !(*keep_prob > 0.0 && *keep_prob <= 1.0) {
                        return Err(Error::InvalidSpec(format!(
                            "keep_prob {keep_prob} outside (0, 1]"
                        )));
                    }
                }
                LayerKind::Lambda { registry_name } => {
                    if registry_name.is_empty() {
                        return Err(Error::InvalidSpec(format!(
                            "lambda layer `{}` has no registry_name",
                            layer.name
                        )));
                    }
                }
                LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Tanh => {}
            }
        }
        Ok(SpecShapes {
            layer_inputs,
            output_width: width,
            params,
        })
    }
}
