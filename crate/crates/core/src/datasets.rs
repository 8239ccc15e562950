//! Generated-object store, training-sample assembly, evaluation pair sets and
//! the procedural toy-shape dataset with part labels.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::geom::{self, Vec3};
use crate::mesh::{MeshDataset, Split, TriangleMesh};
use crate::pointcloud::{augment_cloud, augment_image, sample_cloud, CloudAugment, PointCloud, SamplingConfig};
use crate::render::{render_view, sample_viewpoints, Camera, Image, RenderConfig};
use crate::{derive_seed, rng_from_seed, Error, Result};

/// One object after rendering and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub class: u32,
    pub split: Split,
    pub views: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub cloud: PointCloud,
    /// Part id of every cloud point, when the source mesh carries parts.
    pub point_parts: Option<Vec<u8>>,
}

/// Immutable index over generated objects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratedStore {
    pub objects: Vec<ObjectRecord>,
    pub class_names: Vec<String>,
}

impl GeneratedStore {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.objects.len()).filter(|&i| self.objects[i].split == split).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.objects[i].class as usize).collect()
    }

    pub fn num_classes(&self) -> usize {
        let seen = self.objects.iter().map(|o| o.class as usize + 1).max().unwrap_or(0);
        seen.max(self.class_names.len())
    }
}

/// Renders `render.view_count` views of the view-normalized mesh and samples
/// its point cloud. `face_parts` propagates to points through source faces.
pub fn generate_object(
    mesh: &TriangleMesh,
    face_parts: Option<&[u8]>,
    split: Split,
    render: &RenderConfig,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<ObjectRecord> {
    render.validate()?;
    if let Some(p) = face_parts {
        if p.len() != mesh.faces().len() {
            return Err(Error::Dataset(format!("{} part labels for {} faces", p.len(), mesh.faces().len())));
        }
    }
    let fitted = mesh.fit_to_view()?;
    let mut rng = rng_from_seed(seed);
    let cameras = sample_viewpoints(render.view_count, render, &mut rng);
    let views = cameras.iter().map(|c| render_view(&fitted, c, render)).collect::<Result<Vec<_>>>()?;
    let (cloud, faces) = sample_cloud(&fitted, sampling, &mut rng)?;
    let point_parts = face_parts.map(|p| faces.iter().map(|&f| p[f as usize]).collect());
    let class = mesh.label().unwrap_or(0);
    Ok(ObjectRecord { class, split, views, cameras, cloud, point_parts })
}

/// Training split: the first 80% of every class in generation order.
pub fn split_for(index_in_class: usize, class_size: usize) -> Split {
    if index_in_class < (class_size * 4).div_ceil(5) {
        Split::Train
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub cloud: PointCloud,
    pub images: [Image; 3],
    pub labels: [u8; 3],
    pub object: usize,
    pub negative_object: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSelection {
    /// Fresh views and negative at every draw.
    PerIteration,
    /// One fixed triplet per object, derived from the object index.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub augment: bool,
    pub cloud_augment: CloudAugment,
    pub views: ViewSelection,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { augment: true, cloud_augment: CloudAugment::default(), views: ViewSelection::PerIteration }
    }
}

const FIXED_TRIPLET_STREAM: u64 = 0x7e1f;

/// Builds one training sample for `object`; the negative image comes from a
/// uniformly drawn different object of `pool`.
pub fn assemble_sample<R: Rng>(
    store: &GeneratedStore,
    pool: &[usize],
    object: usize,
    options: &SampleOptions,
    rng: &mut R,
) -> Result<TrainingSample> {
    let anchor = store.objects.get(object).ok_or_else(|| Error::Dataset(format!("object {object} out of range")))?;
    if anchor.views.len() < 2 {
        return Err(Error::Config(format!("object {object} has {} views; at least 2 are needed", anchor.views.len())));
    }
    let others = pool.iter().filter(|&&i| i != object).count();
    if others == 0 {
        return Err(Error::Dataset("no other object to draw a negative from".into()));
    }

    let mut fixed;
    let pick: &mut dyn rand::RngCore = match options.views {
        ViewSelection::PerIteration => rng,
        ViewSelection::Fixed => {
            fixed = rng_from_seed(derive_seed(FIXED_TRIPLET_STREAM, object as u64));
            &mut fixed
        }
    };
    let chosen = rand::seq::index::sample(pick, anchor.views.len(), 2);
    let (v1, v2) = (chosen.index(0), chosen.index(1));
    let mut nth = pick.random_range(0..others);
    let mut negative_object = object;
    for &i in pool.iter().filter(|&&i| i != object) {
        if nth == 0 {
            negative_object = i;
            break;
        }
        nth -= 1;
    }
    let negative = &store.objects[negative_object];
    if negative.views.is_empty() {
        return Err(Error::Config(format!("object {negative_object} has no views")));
    }
    let v3 = pick.random_range(0..negative.views.len());

    let raw = [&anchor.views[v1], &anchor.views[v2], &negative.views[v3]];
    let (images, cloud) = if options.augment {
        let images = raw.map(|im| augment_image(im, rng));
        (images, augment_cloud(&anchor.cloud, &options.cloud_augment, rng))
    } else {
        (raw.map(Clone::clone), anchor.cloud.clone())
    };
    Ok(TrainingSample { cloud, images, labels: [1, 1, 0], object, negative_object })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PairKind {
    /// Two rendered views.
    ImageImage,
    /// A rendered view and a point cloud.
    ImageCloud,
}

/// `(object_a, view_a)` against `(object_b, view_b)`; `view_b` is `None` for
/// the cloud of `object_b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EvalPair {
    pub object_a: usize,
    pub view_a: usize,
    pub object_b: usize,
    pub view_b: Option<usize>,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPairSet {
    pub kind: PairKind,
    pub pairs: Vec<EvalPair>,
}

impl EvalPairSet {
    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.same).count()
    }
}

/// Ten pairs per test object, exactly half of them same-object, without
/// repeated pairs.
pub fn build_eval_pairs<R: Rng + ?Sized>(
    store: &GeneratedStore,
    test: &[usize],
    kind: PairKind,
    rng: &mut R,
) -> Result<EvalPairSet> {
    if test.is_empty() {
        return Err(Error::EmptySet);
    }
    let total = 10 * test.len();
    let half = total / 2;
    let views = |i: usize| store.objects[i].views.len();
    let positive_capacity: usize = test
        .iter()
        .map(|&i| match kind {
            PairKind::ImageImage => views(i) * views(i).saturating_sub(1) / 2,
            PairKind::ImageCloud => views(i),
        })
        .sum();
    if positive_capacity < half || test.len() < 2 || test.iter().any(|&i| views(i) == 0) {
        return Err(Error::Dataset(format!(
            "{} test objects cannot supply {half} distinct positive and negative pairs",
            test.len()
        )));
    }

    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(total);
    let mut positives = 0;
    while positives < half {
        let a = test[rng.random_range(0..test.len())];
        let pair = match kind {
            PairKind::ImageImage => {
                if views(a) < 2 {
                    continue;
                }
                let s = rand::seq::index::sample(rng, views(a), 2);
                let (x, y) = (s.index(0).min(s.index(1)), s.index(0).max(s.index(1)));
                EvalPair { object_a: a, view_a: x, object_b: a, view_b: Some(y), same: true }
            }
            PairKind::ImageCloud => {
                EvalPair { object_a: a, view_a: rng.random_range(0..views(a)), object_b: a, view_b: None, same: true }
            }
        };
        if seen.insert(pair) {
            pairs.push(pair);
            positives += 1;
        }
    }
    while pairs.len() < total {
        let s = rand::seq::index::sample(rng, test.len(), 2);
        let (a, b) = (test[s.index(0)], test[s.index(1)]);
        let view_a = rng.random_range(0..views(a));
        let pair = match kind {
            PairKind::ImageImage => {
                let view_b = rng.random_range(0..views(b));
                // unordered: store the smaller (object, view) first
                let (x, y) = if (a, view_a) <= (b, view_b) { ((a, view_a), (b, view_b)) } else { ((b, view_b), (a, view_a)) };
                EvalPair { object_a: x.0, view_a: x.1, object_b: y.0, view_b: Some(y.1), same: false }
            }
            PairKind::ImageCloud => EvalPair { object_a: a, view_a, object_b: b, view_b: None, same: false },
        };
        if seen.insert(pair) {
            pairs.push(pair);
        }
    }
    pairs.shuffle(rng);
    Ok(EvalPairSet { kind, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ToyClass {
    Sphere,
    Box,
    Cylinder,
    Cone,
}

impl ToyClass {
    pub const ALL: [ToyClass; 4] = [ToyClass::Sphere, ToyClass::Box, ToyClass::Cylinder, ToyClass::Cone];

    pub fn name(self) -> &'static str {
        match self {
            ToyClass::Sphere => "sphere",
            ToyClass::Box => "box",
            ToyClass::Cylinder => "cylinder",
            ToyClass::Cone => "cone",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::Dataset(format!("unknown toy class `{}`", s.trim())))
    }

    /// Global part ids: sphere upper/lower, box top/sides/bottom, cylinder
    /// caps/body, cone base/lateral.
    pub fn parts(self) -> &'static [u8] {
        match self {
            ToyClass::Sphere => &[0, 1],
            ToyClass::Box => &[2, 3, 4],
            ToyClass::Cylinder => &[5, 6],
            ToyClass::Cone => &[7, 8],
        }
    }
}

/// Total number of global part ids.
pub const TOY_PART_COUNT: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyShape {
    pub class: ToyClass,
    pub mesh: TriangleMesh,
    pub face_parts: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub classes: Vec<ToyClass>,
    pub shapes: Vec<ToyShape>,
}

impl ToyDataset {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| String::from(c.name())).collect()
    }

    /// Part ids per class label.
    pub fn partition(&self) -> Vec<Vec<u8>> {
        self.classes.iter().map(|c| c.parts().to_vec()).collect()
    }

    pub fn to_mesh_dataset(&self, split: Split) -> MeshDataset {
        MeshDataset::new(self.shapes.iter().map(|s| s.mesh.clone()).collect(), split)
    }
}

/// `per_class` procedural shapes of every class, with mesh labels equal to the
/// class position in `classes`.
pub fn generate_toy_dataset<R: Rng + ?Sized>(classes: &[ToyClass], per_class: usize, rng: &mut R) -> Result<ToyDataset> {
    if classes.is_empty() || per_class == 0 {
        return Err(Error::Config("toy dataset needs at least one class and one shape per class".into()));
    }
    let mut shapes = Vec::with_capacity(classes.len() * per_class);
    for (label, &class) in classes.iter().enumerate() {
        for _ in 0..per_class {
            let aspect = [rng.random_range(0.6..1.4), rng.random_range(0.6..1.4), rng.random_range(0.6..1.4)];
            let (mesh, face_parts) = toy_mesh(class, aspect, rng)?;
            shapes.push(ToyShape { class, mesh: mesh.with_label(Some(label as u32)), face_parts });
        }
    }
    Ok(ToyDataset { classes: classes.to_vec(), shapes })
}

#[derive(Default)]
struct Builder {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    parts: Vec<u8>,
}

impl Builder {
    fn vertex(&mut self, p: Vec3) -> u32 {
        self.vertices.push(p);
        (self.vertices.len() - 1) as u32
    }

    /// Adds a triangle oriented away from the origin; every toy shape is
    /// convex around it.
    fn tri(&mut self, a: u32, b: u32, c: u32, part: u8) {
        let [pa, pb, pc] = [a, b, c].map(|i| self.vertices[i as usize]);
        let n = geom::cross(geom::sub(pb, pa), geom::sub(pc, pa));
        let center = geom::scale(geom::add(geom::add(pa, pb), pc), 1.0 / 3.0);
        self.faces.push(if geom::dot(n, center) >= 0.0 { [a, b, c] } else { [a, c, b] });
        self.parts.push(part);
    }

    /// Surface of revolution about y through `profile` points `(radius, y)`;
    /// endpoints of zero radius collapse to a pole.
    fn revolve(&mut self, profile: &[(f64, f64)], segments: usize, part: u8) {
        let rings: Vec<Vec<u32>> = profile
            .iter()
            .map(|&(r, y)| {
                if r == 0.0 {
                    vec![self.vertex([0.0, y, 0.0])]
                } else {
                    (0..segments)
                        .map(|j| {
                            let phi = core::f64::consts::TAU * j as f64 / segments as f64;
                            self.vertex([r * num_traits::Float::cos(phi), y, r * num_traits::Float::sin(phi)])
                        })
                        .collect()
                }
            })
            .collect();
        for w in rings.windows(2) {
            let (lo, hi) = (&w[0], &w[1]);
            for j in 0..segments {
                let jn = (j + 1) % segments;
                match (lo.len(), hi.len()) {
                    (1, 1) => {}
                    (1, _) => self.tri(lo[0], hi[j], hi[jn], part),
                    (_, 1) => self.tri(lo[j], lo[jn], hi[0], part),
                    _ => {
                        self.tri(lo[j], lo[jn], hi[jn], part);
                        self.tri(lo[j], hi[jn], hi[j], part);
                    }
                }
            }
        }
    }

    /// `m × m` grid on the parallelogram `origin + s·u + t·v`.
    fn grid(&mut self, origin: Vec3, u: Vec3, v: Vec3, m: usize, part: u8) {
        let mut idx = Vec::with_capacity((m + 1) * (m + 1));
        for i in 0..=m {
            for j in 0..=m {
                let (s, t) = (i as f64 / m as f64, j as f64 / m as f64);
                idx.push(self.vertex(geom::add(origin, geom::add(geom::scale(u, s), geom::scale(v, t)))));
            }
        }
        for i in 0..m {
            for j in 0..m {
                let at = |a: usize, b: usize| idx[a * (m + 1) + b];
                self.tri(at(i, j), at(i + 1, j), at(i + 1, j + 1), part);
                self.tri(at(i, j), at(i + 1, j + 1), at(i, j + 1), part);
            }
        }
    }
}

fn disc_profile(radius: f64, y: f64, rings: usize, outward: bool) -> Vec<(f64, f64)> {
    let mut p: Vec<(f64, f64)> = (0..=rings).map(|i| (radius * i as f64 / rings as f64, y)).collect();
    if !outward {
        p.reverse();
    }
    p
}

fn toy_mesh<R: Rng + ?Sized>(class: ToyClass, aspect: [f64; 3], rng: &mut R) -> Result<(TriangleMesh, Vec<u8>)> {
    let mut b = Builder::default();
    let parts = class.parts();
    match class {
        ToyClass::Sphere => {
            let bands = 2 * rng.random_range(3..=6usize);
            let segments = rng.random_range(8..=16usize);
            let ring = |i: usize| {
                let theta = core::f64::consts::PI * i as f64 / bands as f64;
                (num_traits::Float::sin(theta), num_traits::Float::cos(theta))
            };
            let mut upper: Vec<(f64, f64)> = (0..=bands / 2).map(ring).collect();
            upper[0].0 = 0.0;
            let mut lower: Vec<(f64, f64)> = (bands / 2..=bands).map(ring).collect();
            let last = lower.len() - 1;
            lower[last].0 = 0.0;
            b.revolve(&upper, segments, parts[0]);
            b.revolve(&lower, segments, parts[1]);
        }
        ToyClass::Box => {
            let m = rng.random_range(1..=4usize);
            let (x, y, z) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
            let h = 0.5;
            let two = |a: Vec3| geom::scale(a, 2.0 * h);
            b.grid([-h, h, -h], two(x), two(z), m, parts[0]);
            b.grid([-h, -h, -h], two(x), two(z), m, parts[2]);
            b.grid([-h, -h, -h], two(x), two(y), m, parts[1]);
            b.grid([-h, -h, h], two(x), two(y), m, parts[1]);
            b.grid([-h, -h, -h], two(z), two(y), m, parts[1]);
            b.grid([h, -h, -h], two(z), two(y), m, parts[1]);
        }
        ToyClass::Cylinder => {
            let segments = rng.random_range(8..=20usize);
            let rows = rng.random_range(1..=4usize);
            let cap_rings = rng.random_range(1..=2usize);
            let (r, h) = (0.5, 0.5);
            b.revolve(&disc_profile(r, -h, cap_rings, true), segments, parts[0]);
            let body: Vec<(f64, f64)> = (0..=rows).map(|i| (r, -h + 2.0 * h * i as f64 / rows as f64)).collect();
            b.revolve(&body, segments, parts[1]);
            b.revolve(&disc_profile(r, h, cap_rings, false), segments, parts[0]);
        }
        ToyClass::Cone => {
            let segments = rng.random_range(8..=20usize);
            let rows = rng.random_range(1..=4usize);
            let base_rings = rng.random_range(1..=2usize);
            let (r, h) = (0.6, 0.5);
            b.revolve(&disc_profile(r, -h, base_rings, true), segments, parts[0]);
            let lateral: Vec<(f64, f64)> =
                (0..=rows).map(|i| i as f64 / rows as f64).map(|t| (r * (1.0 - t), -h + 2.0 * h * t)).collect();
            b.revolve(&lateral, segments, parts[1]);
        }
    }
    let vertices = b.vertices.iter().map(|p| [p[0] * aspect[0], p[1] * aspect[1], p[2] * aspect[2]]).collect();
    Ok((TriangleMesh::new(vertices, b.faces, None)?, b.parts))
}

/// Renders and samples every toy shape with per-object seeds derived from
/// `seed`; the first 80% of each class is the training split.
pub fn generate_toy_store(
    toy: &ToyDataset,
    render: &RenderConfig,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<GeneratedStore> {
    let splits = toy_splits(toy);
    let objects = toy
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| generate_object(&s.mesh, Some(&s.face_parts), splits[i], render, sampling, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedStore { objects, class_names: toy.class_names() })
}

/// Split of every toy shape, by position within its class.
pub fn toy_splits(toy: &ToyDataset) -> Vec<Split> {
    let mut counts = vec![0usize; toy.classes.len()];
    for s in &toy.shapes {
        counts[s.mesh.label().unwrap_or(0) as usize] += 1;
    }
    let mut seen = vec![0usize; toy.classes.len()];
    toy.shapes
        .iter()
        .map(|s| {
            let c = s.mesh.label().unwrap_or(0) as usize;
            seen[c] += 1;
            split_for(seen[c] - 1, counts[c])
        })
        .collect()
}
