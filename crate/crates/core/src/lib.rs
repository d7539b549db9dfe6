pub mod api;
pub mod clock;
pub mod codec;
pub mod compute;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod modelstore;
pub mod store;
pub mod tagquery;
#[cfg(feature = "testkit")]
pub mod testkit;
pub mod workflow;

pub use error::{Error, Result};

pub type Tensor32 = compute::Tensor<f32>;
pub type Tensor64 = compute::Tensor<f64>;
pub type NetworkState32 = compute::NetworkState<f32>;
pub type NetworkState64 = compute::NetworkState<f64>;
