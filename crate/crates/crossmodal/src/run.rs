//! Pretraining and evaluation drivers shared by the command line and the
//! acceptance suite.

use std::path::{Path, PathBuf};

use crossmodal_core::datasets::{build_eval_pairs, GeneratedStore, PairKind};
use crossmodal_core::encoders::{EncoderParams, Encoders};
use crossmodal_core::evalkit::{
    cross_modality_accuracy, object_cloud_features, object_image_features, pair_distance_stats, recognition_probe,
    retrieval_topk, segment_objects, segmentation_metrics,
};
use crossmodal_core::mesh::Split;
use crossmodal_core::trainer::{finetune_segmentation, pretrain, Regime, TraceRow};
use crossmodal_core::{derive_seed, rng_from_seed};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::report::{Report, TraceWriter};

pub const TRACE_FILE: &str = "trace.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const PAIR_STREAM: u64 = 0xe7a1;

pub fn periodic_checkpoint(out: &Path, iteration: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("ckpt_{iteration:07}.ckpt"))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub trace: Vec<TraceRow>,
    pub params: EncoderParams<f32>,
    pub final_checkpoint: PathBuf,
}

/// Runs the joint loop on the training split of `store`, writing the trace,
/// periodic checkpoints every `checkpoint_every` iterations and a final
/// checkpoint into `out`. With `resume`, training continues from that
/// checkpoint and the trace is appended.
pub fn run_pretrain(store: &GeneratedStore, out: &Path, config: &RunConfig, resume: Option<&Path>) -> Result<PretrainOutcome> {
    let encoders = Encoders::new(config.encoder_config()?)?;
    let train = config.train_config()?;
    let mut params = match resume {
        Some(p) => load_checkpoint(p, &encoders.config)?,
        None => EncoderParams::init(&encoders.config, config.seed()?)?,
    };
    let pool = store.indices(Split::Train);
    std::fs::create_dir_all(out.join(CHECKPOINT_DIR)).at(out)?;
    config.echo(out)?;
    let mut writer = TraceWriter::open(&out.join(TRACE_FILE), resume.is_some())?;
    let every = train.checkpoint_every;
    let trace = pretrain(
        store,
        &pool,
        &encoders,
        &mut params,
        &config.loss_config()?,
        &train,
        &config.sample_options()?,
        |row, p| {
            writer.push(row).map_err(|e| crossmodal_core::Error::Dataset(e.to_string()))?;
            if every > 0 && p.iteration % every == 0 && p.iteration < train.iterations {
                save_checkpoint(&periodic_checkpoint(out, p.iteration), p)
                    .map_err(|e| crossmodal_core::Error::Dataset(e.to_string()))?;
            }
            Ok(())
        },
    )?;
    writer.flush()?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &params)?;
    Ok(PretrainOutcome { trace, params, final_checkpoint })
}

/// Train objects, test objects and their class labels.
type Splits = (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>);

fn split_labels(store: &GeneratedStore) -> Result<Splits> {
    let train = store.indices(Split::Train);
    let test = store.indices(Split::Test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Usage("evaluation needs objects in both the train and the test split".into()));
    }
    let (ytr, yte) = (store.labels(&train), store.labels(&test));
    Ok((train, test, ytr, yte))
}

/// Linear probes on frozen features: 2D from `views` max-pooled views per
/// object, 3D from the point encoder.
pub fn eval_probe(store: &GeneratedStore, params: &EncoderParams<f32>, config: &RunConfig, views: usize) -> Result<Report> {
    let encoders = Encoders::new(config.encoder_config()?)?;
    let (train, test, ytr, yte) = split_labels(store)?;
    let probe = config.probe_config()?;
    let k = store.num_classes();
    let a = object_image_features(&encoders, &params.store, store, &train, views)?;
    let b = object_image_features(&encoders, &params.store, store, &test, views)?;
    let acc_2d = recognition_probe(&a, &ytr, &b, &yte, k, &probe)?;
    let a = object_cloud_features(&encoders, &params.store, store, &train)?;
    let b = object_cloud_features(&encoders, &params.store, store, &test)?;
    let acc_3d = recognition_probe(&a, &ytr, &b, &yte, k, &probe)?;
    Ok(Report::new("probe")
        .int("views", views as u64)
        .num("accuracy_2d", acc_2d)
        .num("accuracy_3d", acc_3d)
        .int("train_objects", train.len() as u64)
        .int("test_objects", test.len() as u64))
}

/// Leave-one-out retrieval among test objects by point-encoder features.
pub fn eval_retrieve(store: &GeneratedStore, params: &EncoderParams<f32>, config: &RunConfig) -> Result<Report> {
    let encoders = Encoders::new(config.encoder_config()?)?;
    let (_, test, _, yte) = split_labels(store)?;
    let ks = config.topk()?;
    let features = object_cloud_features(&encoders, &params.store, store, &test)?;
    let hits = retrieval_topk(&features, &yte, &ks)?;
    let mut r = Report::new("retrieve").int("queries", test.len() as u64);
    for (k, h) in ks.iter().zip(hits) {
        r = r.num(&format!("top{k}"), h);
    }
    Ok(r)
}

/// Balanced held-out pairs: cross-modality accuracy on image/cloud pairs and
/// feature distance statistics on image/image pairs.
pub fn eval_pairs(store: &GeneratedStore, params: &EncoderParams<f32>, config: &RunConfig) -> Result<Report> {
    let encoders = Encoders::new(config.encoder_config()?)?;
    let (_, test, _, _) = split_labels(store)?;
    let mut rng = rng_from_seed(derive_seed(config.seed()?, PAIR_STREAM));
    let cross = build_eval_pairs(store, &test, PairKind::ImageCloud, &mut rng)?;
    let views = build_eval_pairs(store, &test, PairKind::ImageImage, &mut rng)?;
    let acc = cross_modality_accuracy(&encoders, &params.store, store, &cross)?;
    let s = pair_distance_stats(&encoders, &params.store, store, &views)?;
    Ok(Report::new("pairs")
        .num("cross_modality_accuracy", acc)
        .int("cross_modality_pairs", cross.pairs.len() as u64)
        .num("positive_mpd", s.positive_mpd)
        .num("positive_std", s.positive_std)
        .num("negative_mpd", s.negative_mpd)
        .num("negative_std", s.negative_std)
        .int("view_pairs", views.pairs.len() as u64))
}

/// Fine-tunes a segmentation head under `regime` on the configured fraction
/// of training shapes and scores the test shapes.
pub fn eval_segment(
    store: &GeneratedStore,
    partition: &[Vec<u8>],
    base: Option<&EncoderParams<f32>>,
    config: &RunConfig,
    regime: Regime,
) -> Result<Report> {
    let encoders = Encoders::new(config.encoder_config()?)?;
    let (train, test, _, _) = split_labels(store)?;
    let seg = config.seg_config()?;
    let num_parts = partition.iter().flatten().map(|&p| p as usize + 1).max().unwrap_or(0);
    let run = finetune_segmentation(base, &encoders, store, &train, num_parts, regime, &seg)?;
    let shapes = segment_objects(&encoders, &run.params.store, store, &test, partition)?;
    let m = segmentation_metrics(&shapes, partition)?;
    Ok(Report::new("segment")
        .text("regime", regime.name())
        .num("fraction", seg.fraction)
        .int("train_shapes", run.train_objects.len() as u64)
        .num("overall_accuracy", m.overall_accuracy)
        .num("class_miou", m.class_miou)
        .num("instance_miou", m.instance_miou)
        .num("final_loss", run.epoch_loss.last().copied().unwrap_or(f64::NAN)))
}
