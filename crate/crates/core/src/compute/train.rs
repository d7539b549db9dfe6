use serde::{Deserialize, Serialize};

use crate::compute::network::{sgd_step, Mode, Network, NetworkState};
use crate::compute::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `(1 / 2n) · Σ (y − t)²` over a batch of `n` rows.
    Mse,
    /// Mean softmax cross-entropy against class indices.
    SoftmaxXent,
}

impl Loss {
    pub fn parse(name: &str) -> Result<Loss> {
        match name {
            "mse" => Ok(Loss::Mse),
            "xent" | "softmax-xent" | "softmax_xent" => Ok(Loss::SoftmaxXent),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Loss::Mse => "mse",
            Loss::SoftmaxXent => "softmax-xent",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<S> {
    Values(Tensor<S>),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub inputs: Tensor<S>,
    pub targets: Targets<S>,
}

/// Loss value and its gradient with respect to `output` (`[n, width]`).
pub fn loss_and_grad<S: Scalar>(
    loss: Loss,
    output: &Tensor<S>,
    targets: &Targets<S>,
) -> Result<(S, Tensor<S>)> {
    let n = output.rows();
    let w = output.row_len();
    let inv_n = S::one() / S::of(n as f64);
    match (loss, targets) {
        (Loss::Mse, Targets::Values(t)) => {
            if t.len() != output.len() {
                return Err(Error::ShapeMismatch(format!(
                    "targets {:?} do not match output {:?}",
                    t.dims(),
                    output.dims()
                )));
            }
            let half = S::of(0.5);
            let mut total = S::zero();
            let mut grad = Vec::with_capacity(output.len());
            for (y, t) in output.data().iter().zip(t.data()) {
                let d = *y - *t;
                total = total + half * d * d;
                grad.push(d * inv_n);
            }
            Ok((total * inv_n, Tensor::new(output.dims().to_vec(), grad)?))
        }
        (Loss::SoftmaxXent, Targets::Classes(c)) => {
            if c.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {n} rows",
                    c.len()
                )));
            }
            let mut total = S::zero();
            let mut grad = Vec::with_capacity(output.len());
            for (r, &class) in c.iter().enumerate() {
                if class >= w {
                    return Err(Error::ShapeMismatch(format!(
                        "class {class} out of range for width {w}"
                    )));
                }
                let row = output.row(r);
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let exps: Vec<S> = row.iter().map(|v| (*v - max).exp()).collect();
                let sum: S = exps.iter().copied().sum();
                total = total - ((row[class] - max) - sum.ln());
                for (j, e) in exps.iter().enumerate() {
                    let p = *e / sum;
                    let onehot = if j == class { S::one() } else { S::zero() };
                    grad.push((p - onehot) * inv_n);
                }
            }
            Ok((total * inv_n, Tensor::new(output.dims().to_vec(), grad)?))
        }
        (l, _) => Err(Error::InvalidArgument(format!(
            "loss `{}` does not accept these targets",
            l.name()
        ))),
    }
}

/// Fraction of rows whose arg-max matches the class (xent) or whose
/// rounded outputs all equal the targets (mse).
pub fn accuracy<S: Scalar>(output: &Tensor<S>, targets: &Targets<S>) -> f64 {
    let n = output.rows();
    if n == 0 {
        return 0.0;
    }
    let hits = match targets {
        Targets::Classes(c) => (0..n)
            .filter(|&r| {
                let row = output.row(r);
                let best = (0..row.len())
                    .max_by(|a, b| row[*a].partial_cmp(&row[*b]).unwrap_or(std::cmp::Ordering::Equal))
                    .unwrap_or(0);
                c.get(r) == Some(&best)
            })
            .count(),
        Targets::Values(t) => (0..n)
            .filter(|&r| {
                output
                    .row(r)
                    .iter()
                    .zip(t.row(r))
                    .all(|(y, t)| (y.to_f64_lossy() - t.to_f64_lossy()).abs() < 0.5)
            })
            .count(),
    };
    hits as f64 / n as f64
}

/// A rewindable stream of training batches.
pub trait BatchSource<S> {
    fn next_batch(&mut self) -> Result<Option<Batch<S>>>;
    fn rewind(&mut self) -> Result<()>;
}

/// Batches held in memory.
pub struct MemorySource<S> {
    batches: Vec<Batch<S>>,
    pos: usize,
}

impl<S: Clone> MemorySource<S> {
    pub fn new(batches: Vec<Batch<S>>) -> Self {
        MemorySource { batches, pos: 0 }
    }
}

impl<S: Clone> BatchSource<S> for MemorySource<S> {
    fn next_batch(&mut self) -> Result<Option<Batch<S>>> {
        let b = self.batches.get(self.pos).cloned();
        self.pos += 1;
        Ok(b)
    }

    fn rewind(&mut self) -> Result<()> {
        self.pos = 0;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: u32,
    /// Optimizer step count after the epoch.
    pub step: u64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step<S: Scalar>(
    net: &Network,
    state: &mut NetworkState<S>,
    batch: &Batch<S>,
    loss: Loss,
    lr: f64,
) -> Result<f64> {
    let (out, tape) = net.forward(state, &batch.inputs, Mode::Train)?;
    let (l, g) = loss_and_grad(loss, &out, &batch.targets)?;
    let lv = l.to_f64_lossy();
    if !lv.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!("{} loss is {lv}", loss.name()),
        });
    }
    let grads = net.backward(state, &tape, &g)?;
    sgd_step(state, &grads.params, lr)?;
    Ok(lv)
}

/// Runs `epochs` passes over `source`, one SGD step per batch.
pub fn train_epochs<S: Scalar>(
    net: &Network,
    state: &mut NetworkState<S>,
    source: &mut dyn BatchSource<S>,
    loss: Loss,
    lr: f64,
    epochs: u32,
) -> Result<Vec<EpochLoss>> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
    }
    state.mode = Mode::Train;
    let mut out = Vec::with_capacity(epochs as usize);
    for epoch in 0..epochs {
        source.rewind()?;
        let mut sum = 0.0;
        let mut count = 0usize;
        while let Some(batch) = source.next_batch()? {
            sum += train_step(net, state, &batch, loss, lr)?;
            count += 1;
        }
        out.push(EpochLoss {
            epoch,
            step: state.step,
            loss: if count == 0 { 0.0 } else { sum / count as f64 },
        });
    }
    state.mode = Mode::Eval;
    Ok(out)
}
