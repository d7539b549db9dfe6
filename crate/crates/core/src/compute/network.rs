use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_xorshift::XorShiftRng;
use sha2::{Digest, Sha256};

use crate::compute::lambda::{LambdaFns, LambdaRegistry};
use crate::compute::spec::{LayerKind, NetworkSpec, SpecShapes};
use crate::compute::{Scalar, Tensor};
use crate::error::{Error, Result};

/// The project-wide PRNG.
pub type Prng = XorShiftRng;

pub fn prng(seed: u64) -> Prng {
    XorShiftRng::seed_from_u64(seed)
}

/// Seed for the dropout mask of `layer` at `step`.
pub fn dropout_seed(seed: u64, step: u64, layer: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(layer.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<S> {
    /// `[fan_in, fan_out]`
    pub weight: Tensor<S>,
    /// `[fan_out]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> DenseParams<S> {
    pub fn zeros_like(&self) -> Self {
        DenseParams {
            weight: Tensor::zeros(self.weight.dims().to_vec()),
            bias: Tensor::zeros(self.bias.dims().to_vec()),
        }
    }

    pub fn add_assign(&mut self, other: &DenseParams<S>) {
        self.weight.add_assign(&other.weight);
        self.bias.add_assign(&other.bias);
    }
}

/// Parameters plus the bookkeeping that makes training replayable.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<S> {
    pub params: BTreeMap<String, DenseParams<S>>,
    pub seed: u64,
    /// Optimizer steps taken; feeds the dropout mask.
    pub step: u64,
    pub mode: Mode,
}

impl<S: Scalar> NetworkState<S> {
    /// Named tensors in serialization order.
    pub fn to_named(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::with_capacity(self.params.len() * 2);
        for (k, p) in &self.params {
            out.push((format!("{k}/weight"), p.weight.clone()));
            out.push((format!("{k}/bias"), p.bias.clone()));
        }
        out
    }

    /// Inverse of [`to_named`](Self::to_named); shapes are checked by
    /// [`Network::check_state`].
    pub fn from_named(tensors: Vec<(String, Tensor<S>)>, seed: u64, step: u64) -> Result<Self> {
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        for (name, t) in tensors {
            match name.rsplit_once('/') {
                Some((k, "weight")) => {
                    weights.insert(k.to_owned(), t);
                }
                Some((k, "bias")) => {
                    biases.insert(k.to_owned(), t);
                }
                _ => return Err(Error::ShapeMismatch(format!("unexpected tensor `{name}`"))),
            }
        }
        let mut params = BTreeMap::new();
        for (k, weight) in weights {
            let bias = biases
                .remove(&k)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing `{k}/bias`")))?;
            params.insert(k, DenseParams { weight, bias });
        }
        if let Some(k) = biases.keys().next() {
            return Err(Error::ShapeMismatch(format!("missing `{k}/weight`")));
        }
        Ok(NetworkState {
            params,
            seed,
            step,
            mode: Mode::Eval,
        })
    }

    pub fn cast<T: Scalar>(&self) -> NetworkState<T> {
        NetworkState {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        DenseParams {
                            weight: p.weight.cast(),
                            bias: p.bias.cast(),
                        },
                    )
                })
                .collect(),
            seed: self.seed,
            step: self.step,
            mode: self.mode,
        }
    }
}

pub type Gradients<S> = BTreeMap<String, DenseParams<S>>;

#[derive(Debug, Clone)]
enum Op {
    Dense { key: String },
    Relu,
    Sigmoid,
    Tanh,
    Dropout { keep: f64 },
    Lambda(LambdaFns),
}

/// A validated spec with lambdas resolved.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    shapes: SpecShapes,
    ops: Vec<Op>,
}

/// Per-layer values recorded by `forward` for `backward`.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    inputs: Vec<Tensor<S>>,
    output: Tensor<S>,
    masks: Vec<Option<Vec<S>>>,
    batch: usize,
}

impl<S> Tape<S> {
    pub fn output(&self) -> &Tensor<S> {
        &self.output
    }
}

#[derive(Debug, Clone)]
pub struct Backward<S> {
    pub params: Gradients<S>,
    /// Gradient with respect to the network input, shaped `[batch, width]`.
    pub input: Tensor<S>,
}

impl Network {
    pub fn build(spec: &NetworkSpec, lambdas: &LambdaRegistry) -> Result<Network> {
        let shapes = spec.validate()?;
        let mut ops = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            ops.push(match &layer.kind {
                LayerKind::Dense { .. } => Op::Dense {
                    key: layer.param_key().expect("dense").to_owned(),
                },
                LayerKind::Relu => Op::Relu,
                LayerKind::Sigmoid => Op::Sigmoid,
                LayerKind::Tanh => Op::Tanh,
                LayerKind::Dropout { keep_prob } => Op::Dropout { keep: *keep_prob },
                LayerKind::Lambda { registry_name } => {
                    Op::Lambda(lambdas.get(registry_name).ok_or_else(|| {
                        Error::InvalidSpec(format!(
                            "layer `{}` uses unregistered lambda `{registry_name}`",
                            layer.name
                        ))
                    })?)
                }
            });
        }
        Ok(Network {
            spec: spec.clone(),
            shapes,
            ops,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &SpecShapes {
        &self.shapes
    }

    pub fn output_width(&self) -> usize {
        self.shapes.output_width
    }

    /// Initializes parameters from `seed`: Dense weights uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases zero. Keys are initialized in
    /// first-use order, once each.
    pub fn init<S: Scalar>(&self, seed: u64) -> NetworkState<S> {
        let mut rng = prng(seed);
        let mut params = BTreeMap::new();
        for op in &self.ops {
            let Op::Dense { key } = op else { continue };
            if params.contains_key(key) {
                continue;
            }
            let (fan_in, fan_out) = self.shapes.params[key];
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<S> = (0..fan_in * fan_out)
                .map(|_| S::of((rng.random::<f64>() * 2.0 - 1.0) * limit))
                .collect();
            params.insert(
                key.clone(),
                DenseParams {
                    weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
                    bias: Tensor::zeros(vec![fan_out]),
                },
            );
        }
        NetworkState {
            params,
            seed,
            step: 0,
            mode: Mode::Train,
        }
    }

    /// Verifies that `state` holds exactly the tensors the network spec implies.
    pub fn check_state<S: Scalar>(&self, state: &NetworkState<S>) -> Result<()> {
        let named: Vec<(String, Vec<usize>)> = state
            .to_named()
            .into_iter()
            .map(|(n, t)| (n, t.dims().to_vec()))
            .collect();
        check_shapes(&self.shapes, named.iter().map(|(n, d)| (n.as_str(), d.as_slice())))
    }

    fn as_batch<S: Scalar>(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let width = self.spec.input_width();
        let dims = input.dims();
        let batch = if dims == self.spec.input_dims.as_slice() {
            1
        } else if dims.len() == self.spec.input_dims.len() + 1 && dims[1..] == self.spec.input_dims[..] {
            dims[0]
        } else {
            return Err(Error::ShapeMismatch(format!(
                "input {dims:?} does not match input_dims {:?}",
                self.spec.input_dims
            )));
        };
        input.clone().reshape(vec![batch, width])
    }

    /// Runs the network on `[batch, ..input_dims]` (or a single sample).
    /// Dropout draws its mask from `(state.seed, state.step, layer name)`.
    pub fn forward<S: Scalar>(
        &self,
        state: &NetworkState<S>,
        input: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Tape<S>)> {
        let mut x = self.as_batch(input)?;
        let batch = x.rows();
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut masks = Vec::with_capacity(self.ops.len());
        for (op, layer) in self.ops.iter().zip(&self.spec.layers) {
            let mut mask = None;
            let y = match op {
                Op::Dense { key } => {
                    let p = state.params.get(key).ok_or_else(|| {
                        Error::ShapeMismatch(format!("state has no parameters for `{key}`"))
                    })?;
                    let mut y = x.matmul(&p.weight)?;
                    let out = p.bias.len();
                    for r in 0..batch {
                        for (v, b) in y.data_mut()[r * out..(r + 1) * out]
                            .iter_mut()
                            .zip(p.bias.data())
                        {
                            *v = *v + *b;
                        }
                    }
                    y
                }
                Op::Relu => x.map(|v| if v > S::zero() { v } else { S::zero() }),
                Op::Sigmoid => x.map(|v| S::one() / (S::one() + (-v).exp())),
                Op::Tanh => x.map(|v| v.tanh()),
                Op::Dropout { keep } => {
                    if mode == Mode::Eval || *keep >= 1.0 {
                        x.clone()
                    } else {
                        let mut rng = prng(dropout_seed(state.seed, state.step, &layer.name));
                        let scale = S::of(1.0 / keep);
                        let m: Vec<S> = (0..x.len())
                            .map(|_| {
                                if rng.random::<f64>() < *keep {
                                    scale
                                } else {
                                    S::zero()
                                }
                            })
                            .collect();
                        let mut y = x.clone();
                        for (v, k) in y.data_mut().iter_mut().zip(&m) {
                            *v = *v * *k;
                        }
                        mask = Some(m);
                        y
                    }
                }
                Op::Lambda(f) => {
                    let w = x.row_len();
                    let mut out = Vec::with_capacity(x.len());
                    for r in 0..batch {
                        let row: Vec<f64> = x.row(r).iter().map(|v| v.to_f64_lossy()).collect();
                        let y = (f.forward)(&row);
                        if y.len() != w {
                            return Err(Error::ShapeMismatch(format!(
                                "lambda layer `{}` changed row width {w} to {}",
                                layer.name,
                                y.len()
                            )));
                        }
                        out.extend(y.into_iter().map(S::of));
                    }
                    Tensor::new(vec![batch, w], out)?
                }
            };
            inputs.push(x);
            masks.push(mask);
            x = y;
        }
        let tape = Tape {
            inputs,
            output: x.clone(),
            masks,
            batch,
        };
        Ok((x, tape))
    }

    /// Reverse pass. Gradients of layers sharing a key are summed.
    pub fn backward<S: Scalar>(
        &self,
        state: &NetworkState<S>,
        tape: &Tape<S>,
        loss_grad: &Tensor<S>,
    ) -> Result<Backward<S>> {
        if loss_grad.dims() != tape.output.dims() {
            return Err(Error::ShapeMismatch(format!(
                "loss gradient {:?} does not match output {:?}",
                loss_grad.dims(),
                tape.output.dims()
            )));
        }
        let mut grads: Gradients<S> = BTreeMap::new();
        let mut g = loss_grad.clone();
        for i in (0..self.ops.len()).rev() {
            let x = &tape.inputs[i];
            // The layer's output is the next layer's input, or the tape's.
            let y = tape.inputs.get(i + 1).unwrap_or(&tape.output);
            g = match &self.ops[i] {
                Op::Dense { key } => {
                    let p = &state.params[key];
                    let dw = x.t_matmul(&g);
                    let out = p.bias.len();
                    let mut db = vec![S::zero(); out];
                    for r in 0..tape.batch {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d = *d + *v;
                        }
                    }
                    let contrib = DenseParams {
                        weight: dw,
                        bias: Tensor::new(vec![out], db)?,
                    };
                    match grads.get_mut(key) {
                        Some(acc) => acc.add_assign(&contrib),
                        None => {
                            grads.insert(key.clone(), contrib);
                        }
                    }
                    g.matmul_t(&p.weight)
                }
                Op::Relu => x.zip_map(&g, |xv, gv| if xv > S::zero() { gv } else { S::zero() }),
                Op::Sigmoid => y.zip_map(&g, |yv, gv| gv * yv * (S::one() - yv)),
                Op::Tanh => y.zip_map(&g, |yv, gv| gv * (S::one() - yv * yv)),
                Op::Dropout { .. } => match &tape.masks[i] {
                    Some(m) => {
                        let mut out = g.clone();
                        for (v, k) in out.data_mut().iter_mut().zip(m) {
                            *v = *v * *k;
                        }
                        out
                    }
                    None => g,
                },
                Op::Lambda(f) => {
                    let w = x.row_len();
                    let mut out = Vec::with_capacity(x.len());
                    for r in 0..tape.batch {
                        let xr: Vec<f64> = x.row(r).iter().map(|v| v.to_f64_lossy()).collect();
                        let gr: Vec<f64> = g.row(r).iter().map(|v| v.to_f64_lossy()).collect();
                        let d = (f.backward)(&xr, &gr);
                        if d.len() != w {
                            return Err(Error::ShapeMismatch(format!(
                                "lambda backward returned width {} for {w}",
                                d.len()
                            )));
                        }
                        out.extend(d.into_iter().map(S::of));
                    }
                    Tensor::new(vec![tape.batch, w], out)?
                }
            };
        }
        // Keys never reached still get a zero gradient.
        for (k, p) in &state.params {
            grads.entry(k.clone()).or_insert_with(|| p.zeros_like());
        }
        Ok(Backward {
            params: grads,
            input: g,
        })
    }

    /// Output of the layer named `layer` (inclusive), in eval mode.
    pub fn features<S: Scalar>(
        &self,
        state: &NetworkState<S>,
        input: &Tensor<S>,
        layer: &str,
    ) -> Result<Tensor<S>> {
        let idx = self
            .spec
            .layers
            .iter()
            .position(|l| l.name == layer)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer named `{layer}`")))?;
        let (out, tape) = self.forward(state, input, Mode::Eval)?;
        Ok(tape.inputs.get(idx + 1).cloned().unwrap_or(out))
    }
}

pub(crate) fn check_shapes<'a>(
    shapes: &SpecShapes,
    tensors: impl Iterator<Item = (&'a str, &'a [usize])>,
) -> Result<()> {
    let mut expected = shapes.tensor_shapes();
    for (name, dims) in tensors {
        match expected.remove(name) {
            Some(want) if want.as_slice() == dims => {}
            Some(want) => {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{name}` has dims {dims:?}, spec requires {want:?}"
                )))
            }
            None => return Err(Error::ShapeMismatch(format!("unexpected tensor `{name}`"))),
        }
    }
    if let Some(name) = expected.keys().next() {
        return Err(Error::ShapeMismatch(format!("missing tensor `{name}`")));
    }
    Ok(())
}

/// `p ← p − lr·g` for every parameter; advances the step counter.
pub fn sgd_step<S: Scalar>(state: &mut NetworkState<S>, grads: &Gradients<S>, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
    }
    let lr = S::of(lr);
    for (k, p) in state.params.iter_mut() {
        let Some(g) = grads.get(k) else { continue };
        for (v, d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *v = *v - lr * *d;
        }
        for (v, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *v = *v - lr * *d;
        }
    }
    state.step += 1;
    Ok(())
}

/// Builds a network and initializes its state from `seed`.
pub fn build_network<S: Scalar>(
    spec: &NetworkSpec,
    seed: u64,
    lambdas: &LambdaRegistry,
) -> Result<(Network, NetworkState<S>)> {
    let net = Network::build(spec, lambdas)?;
    let state = net.init(seed);
    Ok((net, state))
}

/// Shared handle used by callers that keep one registry per process.
pub type SharedLambdas = Arc<LambdaRegistry>;
