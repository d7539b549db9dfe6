//! Training-sample encoding used by the built-in train handler.
//!
//! A sample document's payload is its feature vector as little-endian
//! `f32`s. Its label is the class index (`"3"`) for cross-entropy or a
//! comma-separated list of floats (`"0.5,1"`) for squared loss.

use crate::compute::{Batch, Loss, Targets, Tensor};
use crate::error::{Error, Result};
use crate::store::{Document, Payload};

pub fn encode_features(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidDocument(format!(
            "feature payload of {} bytes is not a whole number of f32s",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn class_label(doc: &Document) -> Result<usize> {
    let label = doc
        .label
        .as_deref()
        .ok_or_else(|| Error::InvalidDocument(format!("`{}` has no label", doc.key)))?;
    label
        .trim()
        .parse()
        .map_err(|_| Error::InvalidDocument(format!("`{}`: label `{label}` is not a class index", doc.key)))
}

pub fn value_label(doc: &Document) -> Result<Vec<f32>> {
    let label = doc
        .label
        .as_deref()
        .ok_or_else(|| Error::InvalidDocument(format!("`{}` has no label", doc.key)))?;
    label
        .split(',')
        .map(|s| {
            s.trim().parse::<f32>().map_err(|_| {
                Error::InvalidDocument(format!("`{}`: label `{label}` is not a float list", doc.key))
            })
        })
        .collect()
}

/// Features of a resolved (inline) document.
pub fn features(doc: &Document) -> Result<Vec<f32>> {
    match &doc.payload {
        Payload::Inline(b) => decode_features(b),
        Payload::Blob(_) => Err(Error::InvalidArgument(format!(
            "`{}` still holds a blob pointer",
            doc.key
        ))),
    }
}

/// Stacks documents into one batch for `loss`.
pub fn to_batch(docs: &[Document], input_dims: &[usize], loss: Loss) -> Result<Batch<f32>> {
    let width: usize = input_dims.iter().product();
    let mut data = Vec::with_capacity(docs.len() * width);
    for d in docs {
        let f = features(d)?;
        if f.len() != width {
            return Err(Error::ShapeMismatch(format!(
                "`{}` has {} features, network expects {width}",
                d.key,
                f.len()
            )));
        }
        data.extend(f);
    }
    let mut dims = vec![docs.len()];
    dims.extend_from_slice(input_dims);
    let inputs = Tensor::new(dims, data)?;
    let targets = match loss {
        Loss::SoftmaxXent => Targets::Classes(docs.iter().map(class_label).collect::<Result<_>>()?),
        Loss::Mse => {
            let rows: Vec<Vec<f32>> = docs.iter().map(value_label).collect::<Result<_>>()?;
            Targets::Values(Tensor::from_rows(&rows)?)
        }
    };
    Ok(Batch { inputs, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_round_trip() {
        let v = [1.5f32, -2.0, 0.0];
        assert_eq!(decode_features(&encode_features(&v)).unwrap(), v);
        assert!(decode_features(&[0, 1, 2]).is_err());
    }

    #[test]
    fn batches() {
        let docs = vec![
            Document::inline("a", encode_features(&[1.0, 2.0])).with_label("1"),
            Document::inline("b", encode_features(&[3.0, 4.0])).with_label("0"),
        ];
        let b = to_batch(&docs, &[2], Loss::SoftmaxXent).unwrap();
        assert_eq!(b.inputs.dims(), &[2, 2]);
        assert_eq!(b.targets, Targets::Classes(vec![1, 0]));
        let docs = vec![Document::inline("a", encode_features(&[1.0])).with_label("0.5, 2")];
        let b = to_batch(&docs, &[1], Loss::Mse).unwrap();
        assert_eq!(b.targets, Targets::Values(Tensor::new(vec![1, 2], vec![0.5, 2.0]).unwrap()));
    }
}
