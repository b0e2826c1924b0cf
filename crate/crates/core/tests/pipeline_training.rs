use std::sync::Arc;

use candle_core::{DType, Device};

use edgeprompt::checkpoint::{load_checkpoint, CheckpointMeta};
use edgeprompt::config::{ExperimentConfig, TrainConfig};
use edgeprompt::data::{phantom_volume, PhantomConfig, VolumeRecord};
use edgeprompt::eval::{batch_tensors, model_inputs};
use edgeprompt::experiment::{build_pipeline, load_trained};
use edgeprompt::pipeline::PipelineKind;
use edgeprompt::raster::{Modality, WORKING_SIZE};
use edgeprompt::segmenter::{ReferenceSegmenter, Segmenter};
use edgeprompt::trainer::{train, TrainOutput, BEST_CHECKPOINT, DIVERGED_CHECKPOINT, EPOCH_LOG, STEP_LOG};
use edgeprompt::Error;

fn small_volume(id: &str, seed: u64) -> VolumeRecord {
    let cfg = PhantomConfig { slices_per_volume: 2, ..PhantomConfig::default() };
    phantom_volume(id, Modality::Ct, &cfg, seed).unwrap()
}

fn reference() -> Arc<dyn Segmenter> {
    Arc::new(ReferenceSegmenter::new(7, DType::F32, &Device::Cpu).unwrap())
}

fn config(kind: PipelineKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::tiny();
    cfg.train.pipeline = kind;
    cfg.train.batch_size = 2;
    cfg
}

#[test]
fn raw_image_pipeline_never_extracts_edges() {
    let vol = small_volume("a", 1);
    let pipeline = build_pipeline(&config(PipelineKind::ImUnet), None).unwrap();
    let refs: Vec<_> = vol.slices.iter().collect();
    let out = pipeline.predict(&refs).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].logits().shape(), (WORKING_SIZE, WORKING_SIZE));
    assert_eq!(pipeline.edges().calls(), 0);
    assert!(pipeline.backend().is_none());
}

#[test]
fn edge_pipelines_extract_one_map_per_slice() {
    let vol = small_volume("a", 1);
    for kind in [PipelineKind::EmUnet, PipelineKind::Edge2Prompt] {
        let pipeline = build_pipeline(&config(kind), Some(reference())).unwrap();
        let refs: Vec<_> = vol.slices.iter().collect();
        pipeline.predict(&refs).unwrap();
        assert_eq!(pipeline.edges().calls(), 2, "{kind}");
    }
}

#[test]
fn unet_baselines_predict_their_prompt_logits() {
    let vol = small_volume("a", 2);
    let pipeline = build_pipeline(&config(PipelineKind::EmUnet), None).unwrap();
    let inputs = model_inputs(&pipeline, &vol).unwrap();
    let (x, imgs) = batch_tensors(&pipeline, &inputs.iter().collect::<Vec<_>>(), &vol.slices.iter().collect::<Vec<_>>())
        .unwrap();
    let out = pipeline.forward_t(&x, &imgs, false).unwrap();
    let diff = (out.logits - out.prompt_logits).unwrap().abs().unwrap().max_all().unwrap();
    assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
}

#[test]
fn backend_pipelines_route_the_prompt_through_the_segmenter() {
    let vol = small_volume("a", 3);
    let backend = reference();
    let pipeline = build_pipeline(&config(PipelineKind::Edge2Prompt), Some(backend.clone())).unwrap();
    let inputs = model_inputs(&pipeline, &vol).unwrap();
    let (x, imgs) = batch_tensors(&pipeline, &inputs.iter().collect::<Vec<_>>(), &vol.slices.iter().collect::<Vec<_>>())
        .unwrap();
    let out = pipeline.forward_t(&x, &imgs, false).unwrap();
    assert_eq!(out.logits.dims(), &[2, 1, WORKING_SIZE, WORKING_SIZE]);
    let direct = backend.segment_t(&imgs, &out.prompt_logits).unwrap();
    let diff = (out.logits - direct).unwrap().abs().unwrap().max_all().unwrap();
    assert!(diff.to_scalar::<f32>().unwrap() < 1e-6);
}

#[test]
fn missing_backend_is_rejected() {
    let cfg = config(PipelineKind::SUnet);
    let net = edgeprompt::prompt_net::PromptNet::new(&cfg.prompt_net, 0, DType::F32, &Device::Cpu).unwrap();
    let edges = Arc::new(cfg.edm.module().unwrap());
    assert!(matches!(
        edgeprompt::pipeline::Pipeline::new(PipelineKind::SUnet, net, edges, None, None),
        Err(Error::Backend(_))
    ));
}

fn train_cfg(cfg: &ExperimentConfig, epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig { epochs, patience, ..cfg.train.clone() }
}

#[test]
fn patience_one_stops_after_first_non_improving_epoch() {
    let cfg = config(PipelineKind::ImUnet);
    let (tr, va) = (small_volume("t", 4), small_volume("v", 5));
    let pipeline = build_pipeline(&cfg, None).unwrap();
    let out = train(&pipeline, &[tr], &[va], &train_cfg(&cfg, 6, 1), &cfg.loss, None).unwrap();
    let n = out.epochs.len();
    assert!(n <= 6);
    if out.stopped_early {
        // The last epoch did not beat the best; every earlier one did.
        assert_eq!(out.best_epoch, n - 1);
    }
    let best = out.epochs.iter().map(|e| e.val_dice).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_dice, best);
}

#[test]
fn one_epoch_is_deterministic_for_a_seed() {
    let cfg = config(PipelineKind::Edge2Prompt);
    let (tr, va) = (small_volume("t", 6), small_volume("v", 7));
    let run = || {
        let pipeline = build_pipeline(&cfg, Some(reference())).unwrap();
        train(&pipeline, std::slice::from_ref(&tr), std::slice::from_ref(&va), &train_cfg(&cfg, 1, 1), &cfg.loss, None)
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.net_checksum_after, b.net_checksum_after);
    assert_eq!(a.epochs[0].train, b.epochs[0].train);
    assert_eq!(a.backend_checksum, b.backend_checksum);
    assert_ne!(a.net_checksum_before, a.net_checksum_after);
}

#[test]
fn huge_learning_rate_reports_divergence_and_keeps_finite_weights() {
    let mut cfg = config(PipelineKind::ImUnet);
    cfg.train.learning_rate = 1e30;
    let (tr, va) = (small_volume("t", 8), small_volume("v", 9));
    let dir = tempfile::tempdir().unwrap();
    let pipeline = build_pipeline(&cfg, None).unwrap();
    let meta = CheckpointMeta {
        prompt_net: cfg.prompt_net.clone(),
        pipeline: cfg.train.pipeline,
        protocol: None,
        seed: 0,
        git_describe: "test".into(),
        epoch: 0,
        experiment: Some(cfg.to_toml().unwrap()),
    };
    let out = TrainOutput { dir: dir.path(), meta };
    let res = train(&pipeline, &[tr], &[va], &train_cfg(&cfg, 20, 20), &cfg.loss, Some(out));
    assert!(matches!(res, Err(Error::Diverged { .. })), "{res:?}");
    let (tensors, _) = load_checkpoint(&dir.path().join(DIVERGED_CHECKPOINT), &Device::Cpu).unwrap();
    for t in tensors.values() {
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn best_checkpoint_round_trips_into_identical_predictions() {
    let cfg = config(PipelineKind::ImUnet);
    let (tr, va) = (small_volume("t", 10), small_volume("v", 11));
    let dir = tempfile::tempdir().unwrap();
    let pipeline = build_pipeline(&cfg, None).unwrap();
    let meta = CheckpointMeta {
        prompt_net: cfg.prompt_net.clone(),
        pipeline: cfg.train.pipeline,
        protocol: Some("FULL_MIXED".into()),
        seed: cfg.train.seed,
        git_describe: "test".into(),
        epoch: 0,
        experiment: Some(cfg.to_toml().unwrap()),
    };
    let out = TrainOutput { dir: dir.path(), meta };
    let outcome =
        train(&pipeline, &[tr], std::slice::from_ref(&va), &train_cfg(&cfg, 2, 2), &cfg.loss, Some(out)).unwrap();
    assert_eq!(outcome.checkpoint.as_deref(), Some(dir.path().join(BEST_CHECKPOINT).as_path()));
    for log in [STEP_LOG, EPOCH_LOG] {
        let text = std::fs::read_to_string(dir.path().join(log)).unwrap();
        assert!(text.lines().count() >= 2, "{log} has no rows");
    }

    let (loaded, loaded_cfg, meta) = load_trained(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(meta.epoch, outcome.best_epoch);
    assert_eq!(loaded_cfg.prompt_net, cfg.prompt_net);
    let refs: Vec<_> = va.slices.iter().collect();
    let a = pipeline.predict(&refs).unwrap();
    let b = loaded.predict(&refs).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.logits(), y.logits());
    }
}
