//! Evaluation protocols: cross-modality accuracy, pair-distance statistics,
//! multi-view recognition probes, retrieval and segmentation metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{Graph, ParamStore, Real, Tensor};
use crate::datasets::{EvalPairSet, GeneratedStore, PairKind};
use crate::encoders::{clouds_to_tensor, images_to_tensor, Encoders, Mode};
use crate::pointcloud::PointCloud;
use crate::render::Image;
use crate::trainer::{train_linear_probe, ProbeConfig};
use crate::{Error, Result};

/// Items per forward pass during feature extraction. Evaluation uses running
/// statistics, so the batch size never changes a feature.
pub const EVAL_BATCH: usize = 64;

/// Decision threshold on the fusion probability.
pub const SAME_OBJECT_THRESHOLD: f64 = 0.5;

pub const DEFAULT_TOP_K: [usize; 5] = [1, 5, 10, 20, 50];

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f32]>::to_vec).collect()
}

/// Eval-mode image-encoder features, one per image.
pub fn image_features(encoders: &Encoders, store: &ParamStore<f32>, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(chunk)?);
        let f = encoders.forward_image(&mut g, store, x, Mode::Eval)?;
        out.extend(rows(g.value(f)));
    }
    Ok(out)
}

/// Eval-mode global point-encoder features, one per cloud.
pub fn cloud_features(encoders: &Encoders, store: &ParamStore<f32>, clouds: &[&PointCloud]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let x = g.input(clouds_to_tensor(chunk)?);
        let f = encoders.forward_point(&mut g, store, x, Mode::Eval)?.global;
        out.extend(rows(g.value(f)));
    }
    Ok(out)
}

fn stack(features: &[&[f32]]) -> Result<Tensor<f32>> {
    let d = features.first().map_or(0, |f| f.len());
    let data: Vec<f32> = features.iter().flat_map(|f| f.iter().copied()).collect();
    Tensor::new(vec![features.len(), d], data)
}

/// Same-object probabilities for aligned image/cloud feature rows.
pub fn fusion_probabilities(
    encoders: &Encoders,
    store: &ParamStore<f32>,
    image: &[&[f32]],
    cloud: &[&[f32]],
) -> Result<Vec<f64>> {
    if image.len() != cloud.len() {
        return Err(Error::Shape(format!("{} image rows against {} cloud rows", image.len(), cloud.len())));
    }
    let mut out = Vec::with_capacity(image.len());
    for (a, b) in image.chunks(EVAL_BATCH).zip(cloud.chunks(EVAL_BATCH)) {
        let mut g = Graph::new();
        let fi = g.input(stack(a)?);
        let fp = g.input(stack(b)?);
        let p = encoders.forward_fusion(&mut g, store, fi, fp)?;
        out.extend(g.value(p).data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Fraction of pairs where `p > threshold` agrees with the label.
pub fn thresholded_accuracy(probs: &[f64], same: &[bool], threshold: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptySet);
    }
    if probs.len() != same.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", probs.len(), same.len())));
    }
    let hits = probs.iter().zip(same).filter(|(&p, &s)| (p > threshold) == s).count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Features of every distinct `(object, view)` referenced by `keys`.
fn view_feature_map(
    encoders: &Encoders,
    store: &ParamStore<f32>,
    data: &GeneratedStore,
    keys: impl Iterator<Item = (usize, usize)>,
) -> Result<BTreeMap<(usize, usize), Vec<f32>>> {
    let mut keys: Vec<(usize, usize)> = keys.collect();
    keys.sort_unstable();
    keys.dedup();
    let images = keys
        .iter()
        .map(|&(o, v)| {
            data.objects.get(o).and_then(|ob| ob.views.get(v)).ok_or_else(|| Error::Dataset(format!("no view {v} of object {o}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(keys.into_iter().zip(image_features(encoders, store, &images)?).collect())
}

/// Held-out accuracy of the fusion classifier on image/cloud pairs.
pub fn cross_modality_accuracy(
    encoders: &Encoders,
    store: &ParamStore<f32>,
    data: &GeneratedStore,
    pairs: &EvalPairSet,
) -> Result<f64> {
    if pairs.kind != PairKind::ImageCloud {
        return Err(Error::Config("cross-modality accuracy needs image/cloud pairs".into()));
    }
    if pairs.pairs.is_empty() {
        return Err(Error::EmptySet);
    }
    let views = view_feature_map(encoders, store, data, pairs.pairs.iter().map(|p| (p.object_a, p.view_a)))?;
    let mut objects: Vec<usize> = pairs.pairs.iter().map(|p| p.object_b).collect();
    objects.sort_unstable();
    objects.dedup();
    let clouds: Vec<&PointCloud> = objects.iter().map(|&o| &data.objects[o].cloud).collect();
    let cloud_map: BTreeMap<usize, Vec<f32>> = objects.into_iter().zip(cloud_features(encoders, store, &clouds)?).collect();
    let fi: Vec<&[f32]> = pairs.pairs.iter().map(|p| views[&(p.object_a, p.view_a)].as_slice()).collect();
    let fp: Vec<&[f32]> = pairs.pairs.iter().map(|p| cloud_map[&p.object_b].as_slice()).collect();
    let probs = fusion_probabilities(encoders, store, &fi, &fp)?;
    let same: Vec<bool> = pairs.pairs.iter().map(|p| p.same).collect();
    thresholded_accuracy(&probs, &same, SAME_OBJECT_THRESHOLD)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub positive_mpd: f64,
    pub positive_std: f64,
    pub negative_mpd: f64,
    pub negative_std: f64,
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    Float::sqrt(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64) * (x as f64 - y as f64)).sum::<f64>())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, Float::sqrt(var))
}

/// Mean and population standard deviation of distances, split by label.
pub fn pair_stats_from_distances(distances: &[f64], same: &[bool]) -> Result<PairStats> {
    if distances.len() != same.len() {
        return Err(Error::Shape(format!("{} distances for {} labels", distances.len(), same.len())));
    }
    let pos: Vec<f64> = distances.iter().zip(same).filter(|(_, &s)| s).map(|(&d, _)| d).collect();
    let neg: Vec<f64> = distances.iter().zip(same).filter(|(_, &s)| !s).map(|(&d, _)| d).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptySet);
    }
    let (positive_mpd, positive_std) = mean_std(&pos);
    let (negative_mpd, negative_std) = mean_std(&neg);
    Ok(PairStats { positive_mpd, positive_std, negative_mpd, negative_std })
}

/// Single-view image-feature distances over image/image pairs.
pub fn pair_distance_stats(
    encoders: &Encoders,
    store: &ParamStore<f32>,
    data: &GeneratedStore,
    pairs: &EvalPairSet,
) -> Result<PairStats> {
    if pairs.kind != PairKind::ImageImage {
        return Err(Error::Config("pair distances need image/image pairs".into()));
    }
    let keys = pairs.pairs.iter().flat_map(|p| [(p.object_a, p.view_a), (p.object_b, p.view_b.unwrap_or(0))]);
    let f = view_feature_map(encoders, store, data, keys)?;
    let d: Vec<f64> = pairs
        .pairs
        .iter()
        .map(|p| euclidean(&f[&(p.object_a, p.view_a)], &f[&(p.object_b, p.view_b.unwrap_or(0))]))
        .collect();
    let same: Vec<bool> = pairs.pairs.iter().map(|p| p.same).collect();
    pair_stats_from_distances(&d, &same)
}

/// Elementwise maximum over per-view features.
pub fn multiview_feature(views: &[&[f32]]) -> Result<Vec<f32>> {
    let first = views.first().ok_or(Error::EmptySet)?;
    if views.iter().any(|v| v.len() != first.len()) {
        return Err(Error::Shape("per-view features differ in length".into()));
    }
    let mut out = first.to_vec();
    for v in &views[1..] {
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

/// Max-pooled image features of each object over its first `v` views.
pub fn object_image_features(
    encoders: &Encoders,
    store: &ParamStore<f32>,
    data: &GeneratedStore,
    objects: &[usize],
    v: usize,
) -> Result<Vec<Vec<f32>>> {
    if v == 0 {
        return Err(Error::Config("at least one test view is needed".into()));
    }
    if let Some(&o) = objects.iter().find(|&&o| data.objects[o].views.len() < v) {
        return Err(Error::Config(format!("object {o} has {} views, fewer than v = {v}", data.objects[o].views.len())));
    }
    let images: Vec<&Image> = objects.iter().flat_map(|&o| data.objects[o].views[..v].iter()).collect();
    let per_view = image_features(encoders, store, &images)?;
    per_view
        .chunks(v)
        .map(|c| multiview_feature(&c.iter().map(Vec::as_slice).collect::<Vec<_>>()))
        .collect()
}

pub fn object_cloud_features(
    encoders: &Encoders,
    store: &ParamStore<f32>,
    data: &GeneratedStore,
    objects: &[usize],
) -> Result<Vec<Vec<f32>>> {
    let clouds: Vec<&PointCloud> = objects.iter().map(|&o| &data.objects[o].cloud).collect();
    cloud_features(encoders, store, &clouds)
}

/// Linear-probe accuracy on frozen features.
pub fn recognition_probe(
    train: &[Vec<f32>],
    train_labels: &[usize],
    test: &[Vec<f32>],
    test_labels: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    if let Some(&c) = test_labels.iter().find(|c| !train_labels.contains(c)) {
        return Err(Error::Dataset(format!("class {c} is absent from the probe's training features")));
    }
    let probe = train_linear_probe(train, train_labels, num_classes, config)?;
    probe.accuracy(test, test_labels)
}

/// Leave-one-out retrieval: every item queries all others by ascending
/// Euclidean distance (ties to the lower index); hit@k when any of the `k`
/// nearest shares its label.
pub fn retrieval_topk(features: &[Vec<f32>], labels: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    let n = features.len();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} features for {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::EmptySet);
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n - 1) {
        return Err(Error::Size(format!("k = {k} with a gallery of {}", n - 1)));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let mut hits = vec![0usize; ks.len()];
    for q in 0..n {
        let mut ranked: Vec<(f64, usize)> =
            (0..n).filter(|&i| i != q).map(|i| (euclidean(&features[q], &features[i]), i)).collect();
        ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let first = ranked[..kmax].iter().position(|&(_, i)| labels[i] == labels[q]);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSegmentation {
    pub category: usize,
    pub predictions: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub overall_accuracy: f64,
    pub class_miou: f64,
    pub instance_miou: f64,
}

/// Mean part IoU of one shape over the parts of its category; a part absent
/// from both prediction and label counts as IoU 1.
pub fn shape_iou(predictions: &[u8], labels: &[u8], parts: &[u8]) -> f64 {
    let ious = parts.iter().map(|&p| {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&y_hat, &y) in predictions.iter().zip(labels) {
            match (y_hat == p, y == p) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let union = tp + fp + fn_;
        if union == 0 {
            1.0
        } else {
            tp as f64 / union as f64
        }
    });
    ious.sum::<f64>() / parts.len() as f64
}

/// `partition[c]` lists the part ids of category `c`.
pub fn segmentation_metrics(shapes: &[ShapeSegmentation], partition: &[Vec<u8>]) -> Result<SegMetrics> {
    if shapes.is_empty() {
        return Err(Error::EmptySet);
    }
    let (mut correct, mut total) = (0usize, 0usize);
    let mut per_category: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut instance = 0.0;
    for s in shapes {
        let parts = partition
            .get(s.category)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Dataset(format!("category {} has no part set", s.category)))?;
        if s.predictions.len() != s.labels.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", s.predictions.len(), s.labels.len())));
        }
        if let Some(&bad) = s.labels.iter().find(|y| !parts.contains(y)) {
            return Err(Error::Dataset(format!("label {bad} is not a part of category {}", s.category)));
        }
        correct += s.predictions.iter().zip(&s.labels).filter(|(a, b)| a == b).count();
        total += s.labels.len();
        let iou = shape_iou(&s.predictions, &s.labels, parts);
        instance += iou;
        let e = per_category.entry(s.category).or_insert((0.0, 0));
        e.0 += iou;
        e.1 += 1;
    }
    if total == 0 {
        return Err(Error::EmptySet);
    }
    let class_miou = per_category.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_category.len() as f64;
    Ok(SegMetrics { overall_accuracy: correct as f64 / total as f64, class_miou, instance_miou: instance / shapes.len() as f64 })
}

/// Highest-scoring part among `allowed`; ties go to the earlier entry.
pub fn predict_part<T: Real>(logits: &[T], allowed: &[u8]) -> u8 {
    let mut best = allowed[0];
    for &p in &allowed[1..] {
        if logits[p as usize] > logits[best as usize] {
            best = p;
        }
    }
    best
}

/// Eval-mode part predictions for `objects`, restricted to each object's
/// category parts.
pub fn segment_objects(
    encoders: &Encoders,
    store: &ParamStore<f32>,
    data: &GeneratedStore,
    objects: &[usize],
    partition: &[Vec<u8>],
) -> Result<Vec<ShapeSegmentation>> {
    let mut out = Vec::with_capacity(objects.len());
    for chunk in objects.chunks(EVAL_BATCH / 4) {
        let clouds: Vec<&PointCloud> = chunk.iter().map(|&o| &data.objects[o].cloud).collect();
        let mut g = Graph::new();
        let x = g.input(clouds_to_tensor(&clouds)?);
        let logits = encoders.forward_segmentation(&mut g, store, x, Mode::Eval)?;
        let shape = g.shape(logits).to_vec();
        let (n, parts) = (shape[1], shape[2]);
        let values = g.value(logits).data();
        for (b, &o) in chunk.iter().enumerate() {
            let obj = &data.objects[o];
            let category = obj.class as usize;
            let allowed = partition.get(category).ok_or_else(|| Error::Dataset(format!("category {category} has no part set")))?;
            if let Some(&p) = allowed.iter().find(|&&p| p as usize >= parts) {
                return Err(Error::Dataset(format!("part {p} exceeds the head's {parts} outputs")));
            }
            let predictions =
                (0..n).map(|i| predict_part(&values[(b * n + i) * parts..(b * n + i + 1) * parts], allowed)).collect();
            let labels = obj.point_parts.clone().ok_or_else(|| Error::Dataset(format!("object {o} has no part labels")))?;
            out.push(ShapeSegmentation { category, predictions, labels });
        }
    }
    Ok(out)
}
