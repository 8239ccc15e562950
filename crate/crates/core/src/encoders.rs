//! The image encoder, the dynamic-graph point encoder, the fusion classifier
//! and the part-segmentation head, all built on [`crate::autodiff`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{BnLayout, BnStats, Graph, ParamKind, ParamStore, Real, Tensor, Var};
use crate::pointcloud::PointCloud;
use crate::render::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics; a pure function of parameters and input.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Stem width followed by the widths of the residual blocks.
    pub image_channels: Vec<usize>,
    pub point_widths: Vec<usize>,
    pub embed_dim: usize,
    pub k: usize,
    pub fusion_hidden: usize,
    /// Hidden widths of the segmentation head; a final layer with one output
    /// per part is appended.
    pub seg_hidden: Vec<usize>,
    pub input_channels: usize,
    pub stem_stride: usize,
    pub leaky_slope: f64,
}

impl EncoderConfig {
    pub fn full() -> Self {
        Self {
            image_channels: vec![64, 128, 256, 512],
            point_widths: vec![64, 64, 64, 128],
            embed_dim: 512,
            k: 20,
            fusion_hidden: 256,
            seg_hidden: vec![256, 256, 128],
            input_channels: 1,
            stem_stride: 2,
            leaky_slope: 0.2,
        }
    }

    /// Every width divided by `divisor` (at least 1).
    pub fn scaled(&self, divisor: usize) -> Self {
        let d = |w: usize| (w / divisor.max(1)).max(1);
        Self {
            image_channels: self.image_channels.iter().map(|&w| d(w)).collect(),
            point_widths: self.point_widths.iter().map(|&w| d(w)).collect(),
            embed_dim: d(self.embed_dim),
            fusion_hidden: d(self.fusion_hidden),
            seg_hidden: self.seg_hidden.iter().map(|&w| d(w)).collect(),
            ..self.clone()
        }
    }

    /// Widths divided by 8, `k = 8`, stride-1 stem for 32×32 inputs.
    pub fn toy() -> Self {
        Self { k: 8, stem_stride: 1, ..Self::full().scaled(8) }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.image_channels.iter().chain(&self.point_widths).chain(&self.seg_hidden);
        if self.image_channels.is_empty() || self.point_widths.is_empty() {
            return Err(Error::Config("image and point encoders need at least one block".into()));
        }
        if all.copied().chain([self.embed_dim, self.fusion_hidden, self.input_channels]).any(|w| w == 0) {
            return Err(Error::Config("all widths must be at least 1".into()));
        }
        if self.k == 0 || self.stem_stride == 0 {
            return Err(Error::Config("k and stem_stride must be at least 1".into()));
        }
        if *self.image_channels.last().unwrap() != self.embed_dim {
            return Err(Error::Config(format!(
                "last image width {} must equal embed_dim {}",
                self.image_channels.last().unwrap(),
                self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Learnable state of all networks plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub store: ParamStore<T>,
    pub iteration: u64,
    pub seed: u64,
}

pub const IMAGE_PREFIX: &str = "img.";
pub const POINT_PREFIX: &str = "pt.";
pub const FUSION_PREFIX: &str = "fuse.";
pub const SEG_PREFIX: &str = "seg.";

struct Init<'a, T, R: ?Sized> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Real, R: rand::Rng + ?Sized> Init<'_, T, R> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = Float::sqrt(6.0 / fan_in as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?, ParamKind::Weight)?;
        Ok(())
    }

    fn bias(&mut self, name: &str, n: usize) -> Result<()> {
        self.store.insert(name, Tensor::zeros(&[n]), ParamKind::Bias)?;
        Ok(())
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.store.insert(&format!("{prefix}.gamma"), Tensor::filled(&[c], T::one()), ParamKind::BnScale)?;
        self.store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[c]), ParamKind::BnShift)?;
        self.store.insert(&format!("{prefix}.mean"), Tensor::zeros(&[c]), ParamKind::RunningMean)?;
        self.store.insert(&format!("{prefix}.var"), Tensor::filled(&[c], T::one()), ParamKind::RunningVar)?;
        Ok(())
    }
}

impl<T: Real> EncoderParams<T> {
    /// Fan-in scaled uniform weights `U(±√(6/fan_in))`, zero biases, identity
    /// batchnorm.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = crate::rng_from_seed(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };

        let ch = &config.image_channels;
        init.weight("img.stem.conv.w", &[ch[0], config.input_channels, 3, 3], config.input_channels * 9)?;
        init.bn("img.stem.bn", ch[0])?;
        for i in 1..ch.len() {
            let (cin, cout) = (ch[i - 1], ch[i]);
            init.weight(&format!("img.b{i}.conv1.w"), &[cout, cin, 3, 3], cin * 9)?;
            init.bn(&format!("img.b{i}.bn1"), cout)?;
            init.weight(&format!("img.b{i}.conv2.w"), &[cout, cout, 3, 3], cout * 9)?;
            init.bn(&format!("img.b{i}.bn2"), cout)?;
            init.weight(&format!("img.b{i}.proj.w"), &[cout, cin, 1, 1], cin)?;
            init.bias(&format!("img.b{i}.proj.b"), cout)?;
        }

        let mut din = 3;
        for (i, &w) in config.point_widths.iter().enumerate() {
            init.weight(&format!("pt.e{i}.l0.w"), &[w, 2 * din], 2 * din)?;
            init.bn(&format!("pt.e{i}.bn0"), w)?;
            init.weight(&format!("pt.e{i}.l1.w"), &[w, w], w)?;
            init.bn(&format!("pt.e{i}.bn1"), w)?;
            din = w;
        }
        let cat: usize = config.point_widths.iter().sum();
        init.weight("pt.fc.w", &[config.embed_dim, cat], cat)?;
        init.bn("pt.fc.bn", config.embed_dim)?;

        let (e, h) = (config.embed_dim, config.fusion_hidden);
        init.weight("fuse.l0.w", &[h, 2 * e], 2 * e)?;
        init.bias("fuse.l0.b", h)?;
        init.weight("fuse.l1.w", &[2, h], h)?;
        init.bias("fuse.l1.b", 2)?;

        Ok(Self { store, iteration: 0, seed })
    }

    /// Appends a freshly initialized segmentation head with `num_parts`
    /// outputs, replacing any existing head.
    pub fn attach_segmentation_head(&mut self, config: &EncoderConfig, num_parts: usize, seed: u64) -> Result<()> {
        if num_parts < 2 {
            return Err(Error::Config("segmentation needs at least two parts".into()));
        }
        let mut fresh = ParamStore::new();
        for e in self.store.entries().iter().filter(|e| !e.name.starts_with(SEG_PREFIX)) {
            let id = fresh.insert(&e.name, e.value.clone(), e.kind)?;
            fresh.set_frozen(id, e.frozen);
        }
        let mut rng = crate::rng_from_seed(seed);
        let mut init = Init { store: &mut fresh, rng: &mut rng };
        let mut din: usize = config.point_widths.iter().sum::<usize>() + config.embed_dim;
        let widths: Vec<usize> = config.seg_hidden.iter().copied().chain([num_parts]).collect();
        for (j, &w) in widths.iter().enumerate() {
            init.weight(&format!("seg.l{j}.w"), &[w, din], din)?;
            init.bias(&format!("seg.l{j}.b"), w)?;
            din = w;
        }
        self.store = fresh;
        Ok(())
    }

    pub fn num_parts(&self, config: &EncoderConfig) -> Option<usize> {
        let last = format!("seg.l{}.b", config.seg_hidden.len());
        self.store.get(&last).ok().map(|t| t.len())
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams { store: self.store.cast(), iteration: self.iteration, seed: self.seed }
    }

    /// Checks that every tensor the configuration expects exists with the
    /// expected shape, naming the first offender.
    pub fn check_against(&self, config: &EncoderConfig) -> Result<()> {
        let reference = EncoderParams::<T>::init(config, 0)?;
        for e in reference.store.entries() {
            let found = self
                .store
                .get(&e.name)
                .map_err(|_| Error::Config(format!("checkpoint is missing tensor `{}`", e.name)))?;
            if found.shape() != e.value.shape() {
                return Err(Error::Config(format!(
                    "tensor `{}` has shape {:?} but the configuration needs {:?}",
                    e.name,
                    found.shape(),
                    e.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `[B, C, H, W]` batch from single-channel images.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else { return Err(Error::EmptySet) };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Shape(format!("mixed image sizes {}x{} and {w}x{h}", img.width, img.height)));
        }
        data.extend(img.pixels.iter().map(|&p| T::of(p as f64)));
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// `[B, n, 3]` batch from equally sized clouds.
pub fn clouds_to_tensor<T: Real>(clouds: &[&PointCloud]) -> Result<Tensor<T>> {
    let Some(first) = clouds.first() else { return Err(Error::EmptySet) };
    let n = first.len();
    let mut data = Vec::with_capacity(clouds.len() * n * 3);
    for c in clouds {
        if c.len() != n {
            return Err(Error::Shape(format!("mixed cloud sizes {} and {n}", c.len())));
        }
        for p in &c.points {
            data.extend(p.iter().map(|&v| T::of(v)));
        }
    }
    Tensor::new(vec![clouds.len(), n, 3], data)
}

/// Indices of the `k` nearest neighbours (self excluded) of every point, by
/// squared Euclidean distance in feature space; ties go to the lower index.
/// `features` is `[B, n, D]`; the result is `[B, n, k]` flattened, holding
/// indices local to each batch element.
pub fn knn_graph<T: Real>(features: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("knn_graph needs [B,n,D], got {:?}", s)));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if k >= n || k == 0 {
        return Err(Error::Size(format!("k = {k} needs 1 ≤ k < n = {n}")));
    }
    let dist = crate::autodiff::pairwise_sq_dist_values(features.data(), b, n, d);
    let mut out = Vec::with_capacity(b * n * k);
    // Sorted insertion into a k-slot buffer; scanning j upwards and requiring
    // a strictly smaller distance keeps ties in index order.
    let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
    for bi in 0..b {
        for i in 0..n {
            best.clear();
            let row = &dist[(bi * n + i) * n..(bi * n + i + 1) * n];
            for (j, &v) in row.iter().enumerate() {
                if j == i || (best.len() == k && !(v < best[k - 1].0)) {
                    continue;
                }
                let pos = best.iter().position(|&(u, _)| v < u).unwrap_or(best.len());
                best.insert(pos, (v, j));
                best.truncate(k);
            }
            out.extend(best.iter().map(|&(_, j)| j));
        }
    }
    Ok(out)
}

/// Per-point output of [`Encoders::forward_point`].
#[derive(Debug, Clone)]
pub struct PointFeatures {
    pub per_point: Var,
    pub global: Var,
    pub blocks: Vec<Var>,
    pub concat: Var,
}

/// Stateless network definitions bound to a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub config: EncoderConfig,
}

impl Encoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn bn<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        prefix: &str,
        layout: BnLayout,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = g.param_named(store, &format!("{prefix}.gamma"))?;
        let beta = g.param_named(store, &format!("{prefix}.beta"))?;
        let mean_id = store.id(&format!("{prefix}.mean"))?;
        let var_id = store.id(&format!("{prefix}.var"))?;
        let stats = match mode {
            Mode::Train => BnStats::Batch { record: Some((mean_id, var_id)) },
            Mode::Eval => BnStats::Running { mean: store.value(mean_id).data(), var: store.value(var_id).data() },
        };
        g.batch_norm(x, gamma, beta, stats, layout)
    }

    /// `[B, 1, H, W] → [B, embed_dim]`
    pub fn forward_image<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.config.input_channels || s[2] < 16 || s[3] < 16 {
            return Err(Error::Shape(format!(
                "image batch must be [B,{},H≥16,W≥16], got {:?}",
                self.config.input_channels, s
            )));
        }
        let w = g.param_named(store, "img.stem.conv.w")?;
        let x = g.conv2d(images, w, None, self.config.stem_stride)?;
        let x = self.bn(g, store, x, "img.stem.bn", BnLayout::Channels2d, mode)?;
        let x = g.relu(x);
        let mut x = g.max_pool2(x)?;
        for i in 1..self.config.image_channels.len() {
            let w1 = g.param_named(store, &format!("img.b{i}.conv1.w"))?;
            let h = g.conv2d(x, w1, None, 2)?;
            let h = self.bn(g, store, h, &format!("img.b{i}.bn1"), BnLayout::Channels2d, mode)?;
            let h = g.relu(h);
            let w2 = g.param_named(store, &format!("img.b{i}.conv2.w"))?;
            let h = g.conv2d(h, w2, None, 1)?;
            let h = self.bn(g, store, h, &format!("img.b{i}.bn2"), BnLayout::Channels2d, mode)?;
            let pw = g.param_named(store, &format!("img.b{i}.proj.w"))?;
            let pb = g.param_named(store, &format!("img.b{i}.proj.b"))?;
            let shortcut = g.conv2d(x, pw, Some(pb), 2)?;
            let sum = g.add(h, shortcut)?;
            x = g.relu(sum);
        }
        g.global_avg_pool(x)
    }

    /// One EdgeConv block: a shared two-layer MLP on `(x_i, x_j − x_i)` for
    /// every neighbour `j`, max-aggregated over the neighbourhood.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_conv<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: usize,
        x: Var,
        neighbors: &[usize],
        k: usize,
        mode: Mode,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || neighbors.len() != s[0] * s[1] * k {
            return Err(Error::Shape(format!("edge_conv: features {:?} with {} neighbour slots", s, neighbors.len())));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let edges = b * n * k;
        let mut centers = Vec::with_capacity(edges);
        let mut others = Vec::with_capacity(edges);
        for bi in 0..b {
            for i in 0..n {
                for kk in 0..k {
                    centers.push(bi * n + i);
                    others.push(bi * n + neighbors[(bi * n + i) * k + kk]);
                }
            }
        }
        let xi = g.gather_rows(x, &centers, &[edges, d])?;
        let xj = g.gather_rows(x, &others, &[edges, d])?;
        let rel = g.sub(xj, xi)?;
        let e = g.concat(&[xi, rel], 1)?;
        let w0 = g.param_named(store, &format!("pt.e{block}.l0.w"))?;
        let h = g.linear(e, w0, None)?;
        let h = self.bn(g, store, h, &format!("pt.e{block}.bn0"), BnLayout::Features, mode)?;
        let h = g.leaky_relu(h, self.config.leaky_slope);
        let w1 = g.param_named(store, &format!("pt.e{block}.l1.w"))?;
        let h = g.linear(h, w1, None)?;
        let h = self.bn(g, store, h, &format!("pt.e{block}.bn1"), BnLayout::Features, mode)?;
        let h = g.leaky_relu(h, self.config.leaky_slope);
        let width = *g.shape(h).last().unwrap();
        let h = g.reshape(h, &[b * n, k, width])?;
        let pooled = g.max_over_set(h)?;
        g.reshape(pooled, &[b, n, width])
    }

    /// Dynamic-graph point encoder on `[B, n, 3]`; every block rebuilds its
    /// neighbourhood graph in the feature space of its input.
    pub fn forward_point<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        clouds: Var,
        mode: Mode,
    ) -> Result<PointFeatures> {
        let s = g.shape(clouds).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("cloud batch must be [B,n,3], got {:?}", s)));
        }
        let k = self.config.k;
        if s[1] < k + 1 {
            return Err(Error::Size(format!("{} points cannot support k = {k} neighbours", s[1])));
        }
        let mut x = clouds;
        let mut blocks = Vec::with_capacity(self.config.point_widths.len());
        for block in 0..self.config.point_widths.len() {
            let neighbors = knn_graph(g.value(x), k)?;
            x = self.edge_conv(g, store, block, x, &neighbors, k, mode)?;
            blocks.push(x);
        }
        let concat = g.concat(&blocks, 2)?;
        let w = g.param_named(store, "pt.fc.w")?;
        let h = g.linear(concat, w, None)?;
        let h = self.bn(g, store, h, "pt.fc.bn", BnLayout::Features, mode)?;
        let per_point = g.leaky_relu(h, self.config.leaky_slope);
        let global = g.max_over_set(per_point)?;
        Ok(PointFeatures { per_point, global, blocks, concat })
    }

    /// Two-class logits `[B, 2]` for image/cloud feature pairs.
    pub fn fusion_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fi: Var, fp: Var) -> Result<Var> {
        let (a, b) = (g.shape(fi).to_vec(), g.shape(fp).to_vec());
        let e = self.config.embed_dim;
        if a.len() != 2 || a != b || a[1] != e {
            return Err(Error::Shape(format!("fusion inputs {:?} and {:?} must both be [B,{e}]", a, b)));
        }
        let x = g.concat(&[fi, fp], 1)?;
        let w0 = g.param_named(store, "fuse.l0.w")?;
        let b0 = g.param_named(store, "fuse.l0.b")?;
        let h = g.linear(x, w0, Some(b0))?;
        let h = g.relu(h);
        let w1 = g.param_named(store, "fuse.l1.w")?;
        let b1 = g.param_named(store, "fuse.l1.b")?;
        g.linear(h, w1, Some(b1))
    }

    /// Probability `[B]` that each image/cloud pair shows the same object.
    pub fn forward_fusion<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fi: Var, fp: Var) -> Result<Var> {
        let logits = self.fusion_logits(g, store, fi, fp)?;
        let probs = g.softmax(logits)?;
        g.select_column(probs, 1)
    }

    /// Per-point part logits `[B, n, parts]`. `base_mode` controls the point
    /// encoder's batchnorm; the head itself has none.
    pub fn forward_segmentation<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        clouds: Var,
        base_mode: Mode,
    ) -> Result<Var> {
        let layers = self.config.seg_hidden.len() + 1;
        if !store.contains(&format!("seg.l{}.w", layers - 1)) {
            return Err(Error::Config("segmentation head is not initialized".into()));
        }
        let pf = self.forward_point(g, store, clouds, base_mode)?;
        let s = g.shape(pf.concat).to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        let local = g.reshape(pf.concat, &[b * n, c])?;
        let owner: Vec<usize> = (0..b).flat_map(|bi| core::iter::repeat_n(bi, n)).collect();
        let global = g.gather_rows(pf.global, &owner, &[b * n, self.config.embed_dim])?;
        let mut h = g.concat(&[local, global], 1)?;
        for j in 0..layers {
            let w = g.param_named(store, &format!("seg.l{j}.w"))?;
            let bias = g.param_named(store, &format!("seg.l{j}.b"))?;
            h = g.linear(h, w, Some(bias))?;
            if j + 1 < layers {
                h = g.relu(h);
            }
        }
        let parts = *g.shape(h).last().unwrap();
        g.reshape(h, &[b, n, parts])
    }
}

/// Names of parameters that belong to the network with the given prefix.
pub fn names_with_prefix<T: Real>(store: &ParamStore<T>, prefix: &str) -> Vec<String> {
    store.entries().iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.name.clone()).collect()
}
