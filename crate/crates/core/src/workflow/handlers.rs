//! Built-in `train` handler.
//!
//! Parameters (all optional): `lr` (0.1), `epochs` (10), `batch_size`
//! (32), `loss` (`softmax_xent` or `mse`, default `softmax_xent`), `seed`
//! (0), and `emit_layer`: when set, every input sample is passed through
//! the trained network and the output of that layer is written to the
//! task's output dataset as a feature document carrying the sample's label.

use crate::api::Ops;
use crate::compute::{accuracy, train_epochs, Loss, MemorySource, Mode, Network, NetworkState};
use crate::dataset::sample;
use crate::error::{Error, Result};
use crate::modelstore::VersionSelector;
use crate::store::{Document, TagMap, TagValue};
use crate::workflow::agent::{CrashPoint, TaskContext};

pub fn train(ctx: &mut TaskContext<'_>) -> Result<()> {
    let lr = ctx.param_f64("lr", 0.1)?;
    let epochs = ctx.param_u64("epochs", 10)? as u32;
    let batch_size = ctx.param_u64("batch_size", 32)?.max(1) as usize;
    let loss = Loss::parse(ctx.param_str("loss")?.unwrap_or("softmax_xent"))?;
    let seed = ctx.param_u64("seed", 0)?;
    let emit_layer = ctx.param_str("emit_layer")?.map(str::to_owned);

    let model = ctx.task.spec.model_key.clone();
    let task_id = ctx.task.spec.task_id.clone();
    let record = ctx.backend.get_model(&model)?;
    let net = Network::build(&record.spec, ctx.lambdas)?;

    let docs = ctx.read_input(batch_size as u32)?;
    if docs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "input view `{}` is empty",
            ctx.task.spec.input_dataset
        )));
    }
    let dims = record.spec.input_dims.clone();
    let batches = docs
        .chunks(batch_size)
        .map(|c| sample::to_batch(c, &dims, loss))
        .collect::<Result<Vec<_>>>()?;

    let mut state = start_state(ctx, &net, &model, &task_id, seed)?;
    let history = train_epochs(&net, &mut state, &mut MemorySource::new(batches.clone()), loss, lr, epochs)?;

    let mut hits = 0.0;
    for b in &batches {
        let (out, _) = net.forward(&state, &b.inputs, Mode::Eval)?;
        hits += accuracy(&out, &b.targets) * b.inputs.rows() as f64;
    }
    let acc = hits / docs.len() as f64;

    let events: Vec<(u64, String, f64)> = history
        .iter()
        .map(|e| (e.step, "loss".to_owned(), e.loss))
        .chain(std::iter::once((state.step, "accuracy".to_owned(), acc)))
        .collect();
    ctx.backend.record_events(&model, events, None)?;

    let mut metrics = TagMap::new();
    if let Some(last) = history.last() {
        metrics.insert("loss".into(), TagValue::Float(last.loss));
    }
    metrics.insert("accuracy".into(), TagValue::Float(acc));
    ctx.backend.save_state(&model, &state, metrics, Some(&task_id))?;
    ctx.checkpoint(CrashPoint::AfterSaveState)?;

    if let Some(layer) = emit_layer {
        let mut out = Vec::with_capacity(docs.len());
        for chunk in docs.chunks(batch_size) {
            let b = sample::to_batch(chunk, &dims, loss)?;
            let f = net.features(&state, &b.inputs, &layer)?;
            for (i, d) in chunk.iter().enumerate() {
                let mut o = Document::inline("", sample::encode_features(f.row(i)));
                o.label = d.label.clone();
                o.tags.insert("source".into(), TagValue::Str(d.key.clone()));
                out.push(o);
            }
        }
        ctx.emit(out)?;
        ctx.checkpoint(CrashPoint::AfterAllOutputs)?;
    }
    Ok(())
}

/// Latest version not produced by this task (so a replay restarts from the
/// same parameters as the first attempt), else a fresh seeded state.
fn start_state(
    ctx: &TaskContext<'_>,
    net: &Network,
    model: &str,
    task_id: &str,
    seed: u64,
) -> Result<NetworkState<f32>> {
    let versions = ctx.backend.list_versions(model)?;
    let base = versions
        .iter()
        .rev()
        .find(|v| v.origin_task.as_deref() != Some(task_id));
    match base {
        Some(v) => {
            let (_, mut state) = ctx
                .backend
                .load_state(model, VersionSelector::Id(v.version_id.clone()))?;
            net.check_state(&state)?;
            state.seed = seed;
            Ok(state)
        }
        None => Ok(net.init(seed)),
    }
}
