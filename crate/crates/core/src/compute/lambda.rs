//! Registry of user-supplied layer functions.
//!
//! A lambda maps one sample row to a row of the same width. Both directions
//! run in `f64` regardless of the network's scalar type.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{Error, Result};

pub type LambdaForward = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// `(input_row, grad_output_row) -> grad_input_row`
pub type LambdaBackward = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct LambdaFns {
    pub forward: LambdaForward,
    pub backward: LambdaBackward,
}

impl std::fmt::Debug for LambdaFns {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LambdaFns")
    }
}

#[derive(Default)]
pub struct LambdaRegistry {
    fns: RwLock<HashMap<String, LambdaFns>>,
}

impl std::fmt::Debug for LambdaRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut names: Vec<_> = self.fns.read().keys().cloned().collect();
        names.sort();
        f.debug_struct("LambdaRegistry").field("names", &names).finish()
    }
}

impl LambdaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &self,
        name: &str,
        forward: Option<LambdaForward>,
        backward: Option<LambdaBackward>,
    ) -> Result<()> {
        let (Some(forward), Some(backward)) = (forward, backward) else {
            return Err(Error::MissingBackward(name.to_owned()));
        };
        let mut fns = self.fns.write();
        if fns.contains_key(name) {
            return Err(Error::DuplicateName(name.to_owned()));
        }
        fns.insert(name.to_owned(), LambdaFns { forward, backward });
        Ok(())
    }

    /// Registers an elementwise function `f` with derivative `df`.
    pub fn register_elementwise(
        &self,
        name: &str,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<()> {
        self.register(
            name,
            Some(Arc::new(move |x: &[f64]| x.iter().map(|v| f(*v)).collect())),
            Some(Arc::new(move |x: &[f64], g: &[f64]| {
                x.iter().zip(g).map(|(v, g)| g * df(*v)).collect()
            })),
        )
    }

    pub fn get(&self, name: &str) -> Option<LambdaFns> {
        self.fns.read().get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.fns.read().contains_key(name)
    }
}
