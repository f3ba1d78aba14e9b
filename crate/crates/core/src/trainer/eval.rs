//! Evaluation protocol: predict with the final (level-2) memory-fused head,
//! bilinearly resized to label resolution, argmax with ties to the lowest
//! class index, scored per-pixel against the validation labels.

use super::{TrainError, TrainResult};
use crate::data::{DomainDataset, IGNORE_LABEL};
use crate::metrics::{miou, ConfusionMatrix};
use crate::models::{SegNet, TmPair};
use crate::nn::{Graph, Tensor};

/// Predicted class map for a batch of images, at input resolution.
/// For a target domain `tms` is that domain's stored pair; the source and
/// the no-memory ablation evaluate the bare network.
pub fn predict_labels(
    segnet: &SegNet,
    tms: Option<&TmPair>,
    images: &Tensor,
) -> TrainResult<Vec<u8>> {
    let shape = images.shape().to_vec();
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let mut g = Graph::new();
    let x = g.constant(images);
    let out = segnet.forward(&mut g, x, false)?;
    let logits = match tms {
        Some(pair) => {
            let t2 = pair.level2.forward(&mut g, out.feat_top, false)?;
            g.add(out.logits2, t2)?
        }
        None => out.logits2,
    };
    let up = g.resize_bilinear(logits, h, w)?;
    let v = g.value(up);
    let c = segnet.config.classes;
    let px = h * w;
    let mut pred = vec![0u8; b * px];
    for bi in 0..b {
        let base = bi * c * px;
        for p in 0..px {
            let mut best = 0usize;
            let mut best_v = v[base + p];
            for ci in 1..c {
                let val = v[base + ci * px + p];
                if val > best_v {
                    best_v = val;
                    best = ci;
                }
            }
            pred[bi * px + p] = best as u8;
        }
    }
    Ok(pred)
}

/// Per-class IoU (present classes only) and mIoU of the model on a labeled
/// dataset. Images are processed in deterministic order; results do not
/// depend on `batch`.
pub fn evaluate_domain(
    segnet: &SegNet,
    tms: Option<&TmPair>,
    ds: &DomainDataset,
    batch: usize,
) -> TrainResult<(Vec<Option<f64>>, f64)> {
    if !ds.has_labels() {
        return Err(TrainError::Config(format!(
            "dataset '{}' has no labels to evaluate against",
            ds.name
        )));
    }
    let (h, w) = (ds.height, ds.width);
    let mut cm = ConfusionMatrix::zeros(ds.class_count);
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch.max(1)).min(ds.len());
        let mut data = Vec::with_capacity((end - start) * 3 * h * w);
        let mut labels = Vec::with_capacity((end - start) * h * w);
        for i in start..end {
            data.extend_from_slice(ds.image(i));
            labels.extend_from_slice(ds.label(i).expect("checked above"));
        }
        let images = Tensor::new(vec![end - start, 3, h, w], data).expect("sized buffer");
        let pred = predict_labels(segnet, tms, &images)?;
        cm.accumulate(&pred, &labels, IGNORE_LABEL)?;
        start = end;
    }
    Ok(miou(&cm, true)?)
}
