//! The joint self-supervised loop, its optimizers and schedules, supervised
//! part-segmentation fine-tuning and the one-vs-rest linear probe.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Gradients, Graph, ParamStore, Real, Var};
use crate::datasets::{assemble_sample, GeneratedStore, SampleOptions, TrainingSample};
use crate::encoders::{clouds_to_tensor, images_to_tensor, EncoderParams, Encoders, Mode, SEG_PREFIX};
use crate::objectives::{combined_loss, cross_modality_loss, triplet_loss, LossConfig};
use crate::pointcloud::{augment_cloud, CloudAugment};
use crate::render::Image;
use crate::{derive_seed, rng_from_seed, Error, Result};

/// Momentum of the batchnorm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Single-stream sample assembly. The core loop always assembles on one
    /// stream, so this only constrains callers that parallelize assembly.
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            batch_size: 32,
            iterations: 120_000,
            lr0: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay_every: 40_000,
            lr_decay_factor: 0.1,
            checkpoint_every: 10_000,
            seed: 0,
            deterministic: true,
        }
    }

    pub fn toy() -> Self {
        Self { batch_size: 16, iterations: 2_000, checkpoint_every: 500, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.lr0 > 0.0 && self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if !(self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// `lr0 · factor^⌊t / every⌋`
pub fn step_decay(lr0: f64, factor: f64, every: u64, t: u64) -> f64 {
    lr0 * Float::powi(factor, (t / every.max(1)) as i32)
}

pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    step_decay(config.lr0, config.lr_decay_factor, config.lr_decay_every, iteration)
}

fn check_finite<T: Real>(store: &ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
    for (id, g) in grads.params() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(store.entry(id).name.clone()));
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`; batchnorm affine terms skip decay.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Updates every trainable parameter that received a gradient. A
    /// non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        check_finite(store, grads)?;
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let decay = store.entry(id).kind.decays() && self.weight_decay != 0.0;
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let theta = store.value_mut(id).data_mut();
            for ((t, vi), &gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                let grad = if decay { gi + wd * *t } else { gi };
                *vi = mu * *vi + grad;
                *t -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: Vec::new() }
    }
}

impl<T: Real> Adam<T> {
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        check_finite(store, grads)?;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.t += 1;
        let c1 = 1.0 - Float::powi(self.beta1, self.t);
        let c2 = 1.0 - Float::powi(self.beta2, self.t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let (step, c2) = (T::of(lr / c1), T::of(c2));
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let theta = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                theta[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss nodes of one joint step.
#[derive(Debug, Clone, Copy)]
pub struct SelfLoss {
    pub triplet: Var,
    pub cross: Var,
    pub total: Var,
}

/// Forward pass of the joint objective on a batch: the three views of every
/// sample through the image encoder, the cloud through the point encoder, and
/// each (view, cloud) feature pair through the fusion classifier.
pub fn self_loss<T: Real>(
    g: &mut Graph<T>,
    encoders: &Encoders,
    store: &ParamStore<T>,
    batch: &[TrainingSample],
    loss: &LossConfig,
    mode: Mode,
) -> Result<SelfLoss> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::EmptySet);
    }
    let e = encoders.config.embed_dim;
    let images: Vec<&Image> = (0..3).flat_map(|j| batch.iter().map(move |s| &s.images[j])).collect();
    let clouds: Vec<_> = batch.iter().map(|s| &s.cloud).collect();
    let img_in = g.input(images_to_tensor(&images)?);
    let fi = encoders.forward_image(g, store, img_in, mode)?;
    let cloud_in = g.input(clouds_to_tensor(&clouds)?);
    let fp = encoders.forward_point(g, store, cloud_in, mode)?.global;

    let rows = |j: usize| (j * b..(j + 1) * b).collect::<Vec<_>>();
    let f1 = g.gather_rows(fi, &rows(0), &[b, e])?;
    let f2 = g.gather_rows(fi, &rows(1), &[b, e])?;
    let f3 = g.gather_rows(fi, &rows(2), &[b, e])?;
    let triplet = triplet_loss(g, f1, f2, f3, loss.margin)?;

    // sample-major order so the probabilities reshape to [B, 3]
    let img_rows: Vec<usize> = (0..b).flat_map(|i| (0..3).map(move |j| j * b + i)).collect();
    let cloud_rows: Vec<usize> = (0..b).flat_map(|i| [i; 3]).collect();
    let pi = g.gather_rows(fi, &img_rows, &[3 * b, e])?;
    let pp = g.gather_rows(fp, &cloud_rows, &[3 * b, e])?;
    let probs = encoders.forward_fusion(g, store, pi, pp)?;
    let probs = g.reshape(probs, &[b, 3])?;
    let labels: Vec<u8> = batch.iter().flat_map(|s| s.labels).collect();
    let cross = cross_modality_loss(g, probs, &labels, loss.prob_clamp)?;
    let total = combined_loss(g, triplet, cross, loss.cross_weight)?;
    Ok(SelfLoss { triplet, cross, total })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub l_triplet: f64,
    pub l_cross: f64,
    pub l_self: f64,
    pub lr: f64,
}

/// Draws the mini-batch of iteration `t`; every iteration owns an rng stream,
/// so a resumed run sees the same batches as an uninterrupted one.
pub fn draw_batch(
    store: &GeneratedStore,
    pool: &[usize],
    batch_size: usize,
    options: &SampleOptions,
    seed: u64,
    t: u64,
) -> Result<Vec<TrainingSample>> {
    if pool.len() < 2 {
        return Err(Error::Dataset("pretraining needs at least two objects".into()));
    }
    let mut rng = rng_from_seed(derive_seed(seed, t));
    let objects: Vec<usize> = if batch_size <= pool.len() {
        rand::seq::index::sample(&mut rng, pool.len(), batch_size).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    objects.iter().map(|&o| assemble_sample(store, pool, o, options, &mut rng)).collect()
}

/// Runs iterations `params.iteration .. config.iterations` of the joint loop.
/// `observer` sees every trace row with the parameters after that step.
#[allow(clippy::too_many_arguments)]
pub fn pretrain<F>(
    store: &GeneratedStore,
    pool: &[usize],
    encoders: &Encoders,
    params: &mut EncoderParams<f32>,
    loss: &LossConfig,
    config: &TrainConfig,
    options: &SampleOptions,
    mut observer: F,
) -> Result<Vec<TraceRow>>
where
    F: FnMut(&TraceRow, &EncoderParams<f32>) -> Result<()>,
{
    config.validate()?;
    loss.validate()?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut trace = Vec::new();
    while params.iteration < config.iterations {
        let t = params.iteration;
        let batch = draw_batch(store, pool, config.batch_size, options, config.seed, t)?;
        let mut g = Graph::new();
        let l = self_loss(&mut g, encoders, &params.store, &batch, loss, Mode::Train)?;
        let row = TraceRow {
            iteration: t,
            l_triplet: g.value(l.triplet).item().as_f64(),
            l_cross: g.value(l.cross).item().as_f64(),
            l_self: g.value(l.total).item().as_f64(),
            lr: lr_at(t, config),
        };
        if !row.l_self.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {t}")));
        }
        let grads = g.backward(l.total)?;
        sgd.step(&mut params.store, &grads, row.lr)?;
        params.store.apply_stat_updates(&g.take_stat_updates(), BN_MOMENTUM as f32);
        params.iteration += 1;
        trace.push(row);
        observer(&row, params)?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Pretrained encoder fixed; only the head learns.
    Frozen,
    /// Pretrained encoder fine-tuned together with the head.
    Unfrozen,
    /// Randomly initialized encoder trained together with the head.
    Scratch,
    /// Randomly initialized encoder fixed; only the head learns.
    RandomFrozen,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Frozen => "frozen",
            Regime::Unfrozen => "unfrozen",
            Regime::Scratch => "scratch",
            Regime::RandomFrozen => "random-frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Regime::Frozen, Regime::Unfrozen, Regime::Scratch, Regime::RandomFrozen]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }

    pub fn frozen_base(self) -> bool {
        matches!(self, Regime::Frozen | Regime::RandomFrozen)
    }

    /// Batchnorm mode of the point encoder while fine-tuning.
    pub fn base_mode(self) -> Mode {
        if self.frozen_base() {
            Mode::Eval
        } else {
            Mode::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    /// Share of the training objects used.
    pub fraction: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, lr0: 0.003, decay_every: 20, decay_factor: 0.1, fraction: 1.0, augment: true, seed: 0 }
    }
}

impl SegConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        step_decay(self.lr0, self.decay_factor, self.decay_every, epoch as u64)
    }
}

#[derive(Debug, Clone)]
pub struct SegRun {
    pub params: EncoderParams<f32>,
    /// Mean training loss of every epoch.
    pub epoch_loss: Vec<f64>,
    pub train_objects: Vec<usize>,
}

/// `round(fraction · n)` objects (at least one), drawn without replacement.
pub fn subsample<R: Rng + ?Sized>(objects: &[usize], fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("training fraction {fraction} is outside (0, 1]")));
    }
    let n = (Float::round(objects.len() as f64 * fraction) as usize).clamp(1, objects.len().max(1));
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, objects.len(), n).into_iter().map(|i| objects[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Per-point softmax cross-entropy fine-tuning of the segmentation head.
/// `base` is required for the pretrained regimes and ignored otherwise.
#[allow(clippy::too_many_arguments)]
pub fn finetune_segmentation(
    base: Option<&EncoderParams<f32>>,
    encoders: &Encoders,
    store: &GeneratedStore,
    train: &[usize],
    num_parts: usize,
    regime: Regime,
    config: &SegConfig,
) -> Result<SegRun> {
    let mut params = match (regime, base) {
        (Regime::Frozen | Regime::Unfrozen, Some(b)) => b.clone(),
        (Regime::Frozen | Regime::Unfrozen, None) => {
            return Err(Error::Config(format!("regime `{}` needs a pretrained checkpoint", regime.name())))
        }
        _ => EncoderParams::init(&encoders.config, derive_seed(config.seed, 1))?,
    };
    params.attach_segmentation_head(&encoders.config, num_parts, derive_seed(config.seed, 2))?;
    for id in params.store.ids().collect::<Vec<_>>() {
        let is_head = params.store.entry(id).name.starts_with(SEG_PREFIX);
        params.store.set_frozen(id, regime.frozen_base() && !is_head);
    }
    for &o in train {
        let obj = store.objects.get(o).ok_or_else(|| Error::Dataset(format!("object {o} out of range")))?;
        let parts = obj.point_parts.as_ref().ok_or_else(|| Error::Dataset(format!("object {o} has no part labels")))?;
        if parts.len() != obj.cloud.len() {
            return Err(Error::Dataset(format!("object {o}: {} labels for {} points", parts.len(), obj.cloud.len())));
        }
        if let Some(&p) = parts.iter().find(|&&p| p as usize >= num_parts) {
            return Err(Error::Dataset(format!("object {o}: part {p} but the head has {num_parts} outputs")));
        }
    }

    let mut rng = rng_from_seed(derive_seed(config.seed, 3));
    let objects = subsample(train, config.fraction, &mut rng)?;
    let mut adam = Adam::default();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mode = regime.base_mode();
    let aug = CloudAugment::default();
    let mut order = objects.clone();
    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let clouds: Vec<_> = chunk
                .iter()
                .map(|&o| {
                    let c = &store.objects[o].cloud;
                    if config.augment {
                        augment_cloud(c, &aug, &mut rng)
                    } else {
                        c.clone()
                    }
                })
                .collect();
            let labels: Vec<usize> =
                chunk.iter().flat_map(|&o| store.objects[o].point_parts.as_ref().unwrap().iter().map(|&p| p as usize)).collect();
            let mut g = Graph::new();
            let refs: Vec<_> = clouds.iter().collect();
            let input = g.input(clouds_to_tensor(&refs)?);
            let logits = encoders.forward_segmentation(&mut g, &params.store, input, mode)?;
            let n = labels.len();
            let flat = g.reshape(logits, &[n, num_parts])?;
            let loss = g.softmax_cross_entropy(flat, &labels)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("segmentation loss at epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            adam.step(&mut params.store, &grads, lr)?;
            if mode == Mode::Train {
                params.store.apply_stat_updates(&g.take_stat_updates(), BN_MOMENTUM as f32);
            }
            sum += value;
            batches += 1;
        }
        epoch_loss.push(sum / batches.max(1) as f64);
    }
    Ok(SegRun { params, epoch_loss, train_objects: objects })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    /// Hinge-loss weight C of `½‖w‖² + C·Σ hinge`.
    pub c: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { c: 1.0, epochs: 200, lr: 0.01, seed: 0 }
    }
}

/// One-vs-rest linear SVM on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub num_classes: usize,
    pub dim: usize,
    /// `[num_classes, dim]` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearProbe {
    fn standardize(&self, x: &[f32]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((&v, m), s)| (v as f64 - m) / s).collect()
    }

    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        let z = self.standardize(x);
        (0..self.num_classes)
            .map(|c| self.weights[c * self.dim..(c + 1) * self.dim].iter().zip(&z).map(|(w, v)| w * v).sum::<f64>() + self.bias[c])
            .collect()
    }

    /// Highest score; ties go to the lower class id.
    pub fn predict(&self, x: &[f32]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Shape(format!("{} features for {} labels", features.len(), labels.len())));
        }
        let hits = features.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Subgradient descent on `½‖w‖² + C·Σ max(0, 1 − y·(w·x + b))` per class,
/// one shuffled pass per epoch with step `lr / epoch`.
pub fn train_linear_probe(features: &[Vec<f32>], labels: &[usize], num_classes: usize, config: &ProbeConfig) -> Result<LinearProbe> {
    let n = features.len();
    if n == 0 || n != labels.len() {
        return Err(Error::Shape(format!("{n} features for {} labels", labels.len())));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("features must share one nonzero dimension".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Dataset(format!("label {bad} outside {num_classes} classes")));
    }
    let mut present = vec![false; num_classes];
    labels.iter().for_each(|&y| present[y] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Dataset("a linear probe needs at least two classes".into()));
    }

    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v as f64 / n as f64;
        }
    }
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, &v), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (v as f64 - m) * (v as f64 - m) / n as f64;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-12 { Float::sqrt(*s) } else { 1.0 };
    }
    let mut probe = LinearProbe { num_classes, dim, weights: vec![0.0; num_classes * dim], bias: vec![0.0; num_classes], mean, scale };
    let z: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();

    let lambda = 1.0 / (config.c * n as f64);
    let mut rng = rng_from_seed(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        let eta = config.lr / epoch as f64;
        order.shuffle(&mut rng);
        for &i in &order {
            for c in 0..num_classes {
                let y = if labels[i] == c { 1.0 } else { -1.0 };
                let w = &mut probe.weights[c * dim..(c + 1) * dim];
                let margin = y * (w.iter().zip(&z[i]).map(|(a, b)| a * b).sum::<f64>() + probe.bias[c]);
                let shrink = 1.0 - eta * lambda;
                if margin < 1.0 {
                    for (wk, xk) in w.iter_mut().zip(&z[i]) {
                        *wk = shrink * *wk + eta * y * xk;
                    }
                    probe.bias[c] += eta * y;
                } else {
                    w.iter_mut().for_each(|wk| *wk *= shrink);
                }
            }
        }
    }
    Ok(probe)
}

/// Per-point part labels of `objects`.
pub fn part_labels(store: &GeneratedStore, objects: &[usize]) -> Result<Vec<Vec<u8>>> {
    objects
        .iter()
        .map(|&o| {
            store.objects[o].point_parts.clone().ok_or_else(|| Error::Dataset(format!("object {o} has no part labels")))
        })
        .collect()
}
