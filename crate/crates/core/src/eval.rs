//! Running a pipeline over test volumes and scoring the predictions.

use candle_core::Tensor;

use crate::config::EvalConfig;
use crate::data::VolumeRecord;
use crate::error::{Error, Result};
use crate::metrics::{score_slices, MetricReport, Scope};
use crate::pipeline::Pipeline;
use crate::raster::{GrayImage, Mask, Raster};
use crate::segmenter::{images_tensor, tensor_to_rasters};

/// `(N, 1, H, W)` model-input and image tensors for one batch.
pub fn batch_tensors(pipeline: &Pipeline, inputs: &[&Raster<f32>], images: &[&GrayImage]) -> Result<(Tensor, Tensor)> {
    let store = pipeline.net().store();
    let first = inputs
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = first.shape();
    let flat: Vec<f32> = inputs.iter().flat_map(|r| r.data().iter().copied()).collect();
    let x = Tensor::from_vec(flat, (inputs.len(), 1, h, w), store.device())?.to_dtype(store.dtype())?;
    let imgs = images_tensor(images, store.dtype(), store.device())?;
    Ok((x, imgs))
}

/// Model inputs of every slice of a volume.
pub fn model_inputs(pipeline: &Pipeline, record: &VolumeRecord) -> Result<Vec<Raster<f32>>> {
    record.slices.iter().map(|s| pipeline.model_input(s)).collect()
}

/// Eval-mode prediction logits for precomputed inputs, in batches.
pub fn predict_logits(
    pipeline: &Pipeline,
    inputs: &[Raster<f32>],
    images: &[GrayImage],
    batch_size: usize,
) -> Result<Vec<Raster<f32>>> {
    if inputs.len() != images.len() {
        return Err(Error::Contract(format!("{} inputs for {} images", inputs.len(), images.len())));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for (xs, ims) in inputs.chunks(batch_size.max(1)).zip(images.chunks(batch_size.max(1))) {
        let xs: Vec<&Raster<f32>> = xs.iter().collect();
        let ims: Vec<&GrayImage> = ims.iter().collect();
        let (x, imgs) = batch_tensors(pipeline, &xs, &ims)?;
        let fwd = pipeline.forward_t(&x, &imgs, false)?;
        out.extend(tensor_to_rasters(&fwd.logits)?);
    }
    Ok(out)
}

/// Binary predictions (probability >= 0.5) for every slice of a volume.
pub fn predict_volume(pipeline: &Pipeline, record: &VolumeRecord, batch_size: usize) -> Result<Vec<Mask>> {
    let inputs = model_inputs(pipeline, record)?;
    Ok(predict_logits(pipeline, &inputs, &record.slices, batch_size)?
        .into_iter()
        .map(|l| l.map(|v| u8::from(v >= 0.0)))
        .collect())
}

/// Identification of the evaluated model in a report.
#[derive(Clone, Debug)]
pub struct ReportLabels<'a> {
    pub protocol: &'a str,
    pub pipeline: &'a str,
    pub label: &'a str,
    pub scope: Scope,
}

/// Scores any predictor over `volumes`.
pub fn evaluate_with(
    volumes: &[VolumeRecord],
    labels: &ReportLabels,
    cfg: &EvalConfig,
    mut predict: impl FnMut(&VolumeRecord) -> Result<Vec<Mask>>,
) -> Result<MetricReport> {
    if volumes.is_empty() {
        return Err(Error::Evaluation(format!("{} {} test set is empty", labels.protocol, labels.scope)));
    }
    let mut scored = Vec::with_capacity(volumes.len());
    for record in volumes {
        let preds = predict(record)?;
        scored.push((record.volume_id.clone(), score_slices(&record.volume_id, &preds, &record.masks)?));
        log::debug!("evaluated {}", record.volume_id);
    }
    MetricReport::from_slices(
        labels.protocol,
        labels.pipeline,
        labels.label,
        labels.scope,
        cfg.aggregation,
        scored,
    )
}

pub fn evaluate(
    pipeline: &Pipeline,
    volumes: &[VolumeRecord],
    labels: &ReportLabels,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    evaluate_with(volumes, labels, cfg, |r| predict_volume(pipeline, r, cfg.batch_size))
}
