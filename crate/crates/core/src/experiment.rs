//! Wiring a configuration into a pipeline, and running train and evaluation end to end.

use std::path::Path;
use std::sync::Arc;

use crate::checkpoint::{git_describe, load_checkpoint, CheckpointMeta};
use crate::config::ExperimentConfig;
use crate::data::VolumeRecord;
use crate::error::{Error, Result};
use crate::eval::{evaluate, ReportLabels};
use crate::metrics::{MetricReport, Scope};
use crate::pipeline::{Pipeline, PipelineKind};
use crate::prompt_net::PromptNet;
use crate::protocol::{build_protocol, ProtocolName, ProtocolSpec};
use crate::raster::Modality;
use crate::segmenter::{load_backend, Segmenter};
use crate::trainer::{train, TrainOutcome, TrainOutput};

/// Label of main-experiment reports; ablation rows carry their variant name instead.
pub const MAIN_LABEL: &str = "main";

/// Loads the backend when the configured pipeline needs one.
pub fn backend_for(cfg: &ExperimentConfig) -> Result<Option<Arc<dyn Segmenter>>> {
    if !cfg.train.pipeline.uses_backend() {
        return Ok(None);
    }
    Ok(Some(Arc::from(load_backend(&cfg.backend, cfg.train.precision.dtype())?)))
}

/// A freshly initialized pipeline for `cfg`.
pub fn build_pipeline(cfg: &ExperimentConfig, backend: Option<Arc<dyn Segmenter>>) -> Result<Pipeline> {
    cfg.validate()?;
    let device = cfg.backend.device()?;
    let net = PromptNet::new(&cfg.prompt_net, cfg.train.seed, cfg.train.precision.dtype(), &device)?;
    let backend = if cfg.train.pipeline.uses_backend() {
        match backend {
            Some(b) => Some(b),
            None => backend_for(cfg)?,
        }
    } else {
        None
    };
    Pipeline::new(
        cfg.train.pipeline,
        net,
        Arc::new(cfg.edm.module()?),
        backend,
        cfg.backend.prompt_tanh_scale,
    )
}

pub fn inventory(volumes: &[VolumeRecord]) -> Vec<(String, Modality)> {
    volumes.iter().map(|v| (v.volume_id.clone(), v.modality)).collect()
}

pub fn protocol_for(cfg: &ExperimentConfig, name: ProtocolName, volumes: &[VolumeRecord]) -> Result<ProtocolSpec> {
    build_protocol(name, &inventory(volumes), cfg.train.seed)
}

/// The records named by `ids`, in that order.
pub fn select<'a>(volumes: &'a [VolumeRecord], ids: &[String]) -> Result<Vec<VolumeRecord>> {
    ids.iter()
        .map(|id| {
            volumes
                .iter()
                .find(|v| &v.volume_id == id)
                .cloned()
                .ok_or_else(|| Error::Protocol(format!("volume `{id}` is not in the dataset")))
        })
        .collect()
}

/// Trains a fresh pipeline on the protocol's train split with validation on its val split.
pub fn train_protocol(
    cfg: &ExperimentConfig,
    protocol: &ProtocolSpec,
    volumes: &[VolumeRecord],
    backend: Option<Arc<dyn Segmenter>>,
    out_dir: Option<&Path>,
) -> Result<(Pipeline, TrainOutcome)> {
    let pipeline = build_pipeline(cfg, backend)?;
    let train_set = select(volumes, &protocol.train_ids)?;
    let val_set = select(volumes, &protocol.val_ids)?;
    let out = out_dir
        .map(|dir| -> Result<TrainOutput> {
            Ok(TrainOutput {
                dir,
                meta: CheckpointMeta {
                    prompt_net: cfg.prompt_net.clone(),
                    pipeline: cfg.train.pipeline,
                    protocol: Some(protocol.name.as_str().to_string()),
                    seed: cfg.train.seed,
                    git_describe: git_describe(),
                    epoch: 0,
                    experiment: Some(cfg.to_toml()?),
                },
            })
        })
        .transpose()?;
    let outcome = train(&pipeline, &train_set, &val_set, &cfg.train, &cfg.loss, out)?;
    Ok((pipeline, outcome))
}

/// Scores a trained pipeline on the ID or OOD test split.
pub fn evaluate_protocol(
    pipeline: &Pipeline,
    cfg: &ExperimentConfig,
    protocol: &ProtocolSpec,
    volumes: &[VolumeRecord],
    scope: Scope,
    label: &str,
) -> Result<MetricReport> {
    let test = select(volumes, protocol.test_ids_for(scope))?;
    evaluate(
        pipeline,
        &test,
        &ReportLabels {
            protocol: protocol.name.as_str(),
            pipeline: pipeline.kind().as_str(),
            label,
            scope,
        },
        &cfg.eval,
    )
}

/// Rebuilds a trained pipeline and its experiment configuration from a checkpoint.
pub fn load_trained(path: &Path) -> Result<(Pipeline, ExperimentConfig, CheckpointMeta)> {
    let (tensors, meta) = load_checkpoint(path, &candle_core::Device::Cpu)?;
    let mut cfg = match &meta.experiment {
        Some(text) => ExperimentConfig::from_toml_str(text)?,
        None => ExperimentConfig::default(),
    };
    cfg.prompt_net = meta.prompt_net.clone();
    cfg.train.pipeline = meta.pipeline;
    let pipeline = build_pipeline(&cfg, None)?;
    pipeline.net().store().load(&tensors)?;
    Ok((pipeline, cfg, meta))
}

/// Display names used in report tables.
pub fn table_label(kind: PipelineKind) -> &'static str {
    match kind {
        PipelineKind::ImUnet => "imU-Net",
        PipelineKind::EmUnet => "emU-Net",
        PipelineKind::SUnet => "sU-Net",
        PipelineKind::Edge2Prompt => "Edge2Prompt",
    }
}
