//! Surface sampling, farthest point sampling, unit-sphere normalization and
//! training-time augmentation of clouds and images.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Normal;

use crate::geom::{self, Vec3};
use crate::mesh::TriangleMesh;
use crate::render::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len().max(1) as f64;
        let s = self.points.iter().fold([0.0; 3], |acc, &p| geom::add(acc, p));
        geom::scale(s, 1.0 / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|&p| geom::norm(p)).fold(0.0, Float::max)
    }

    /// Points that lie at indices `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self { points: indices.iter().map(|&i| self.points[i]).collect() }
    }
}

/// Uniform surface samples together with the face each point came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSamples {
    pub cloud: PointCloud,
    pub faces: Vec<u32>,
}

/// Draws `count` points uniformly over the mesh surface: faces are chosen
/// proportionally to area and positions by uniform barycentric sampling.
pub fn surface_oversample<R: rand::Rng + ?Sized>(mesh: &TriangleMesh, count: usize, rng: &mut R) -> Result<SurfaceSamples> {
    if count == 0 {
        return Err(Error::Size("sample count must be at least 1".into()));
    }
    let areas: Vec<f64> = (0..mesh.faces().len()).map(|f| mesh.face_area(f)).collect();
    let chooser = WeightedIndex::new(&areas).map_err(|_| Error::DegenerateMesh("surface area is zero"))?;
    let mut points = Vec::with_capacity(count);
    let mut faces = Vec::with_capacity(count);
    for _ in 0..count {
        let f = chooser.sample(rng);
        let [a, b, c] = mesh.face_vertices(f);
        let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let p = geom::add(a, geom::add(geom::scale(geom::sub(b, a), u), geom::scale(geom::sub(c, a), v)));
        points.push(p);
        faces.push(f as u32);
    }
    Ok(SurfaceSamples { cloud: PointCloud::new(points), faces })
}

/// Greedy farthest point sampling; returns the visiting order as indices into
/// `candidates`. Each new point maximizes its minimum squared distance to the
/// selected set, ties going to the lowest index.
pub fn farthest_point_indices(candidates: &PointCloud, n: usize, start_index: usize) -> Result<Vec<usize>> {
    let m = candidates.len();
    if n > m {
        return Err(Error::Size(format!("cannot select {n} points from {m} candidates")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if start_index >= m {
        return Err(Error::Size(format!("start index {start_index} out of range for {m} candidates")));
    }
    let pts = &candidates.points;
    let mut min_d = alloc::vec![f64::INFINITY; m];
    let mut chosen = alloc::vec![false; m];
    let mut order = Vec::with_capacity(n);
    let mut current = start_index;
    for _ in 0..n {
        order.push(current);
        chosen[current] = true;
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, d) in min_d.iter_mut().enumerate() {
            let di = geom::dist_sq(pts[i], c);
            if di < *d {
                *d = di;
            }
            if !chosen[i] && *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
    }
    Ok(order)
}

pub fn farthest_point_sample(candidates: &PointCloud, n: usize, start_index: usize) -> Result<PointCloud> {
    farthest_point_indices(candidates, n, start_index).map(|idx| candidates.select(&idx))
}

/// Subtracts the centroid and divides by the largest resulting norm.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::Size("cannot normalize an empty cloud".into()));
    }
    let c = cloud.centroid();
    let centered: Vec<Vec3> = cloud.points.iter().map(|&p| geom::sub(p, c)).collect();
    let max = centered.iter().map(|&p| geom::norm(p)).fold(0.0, Float::max);
    if !(max > 1e-12) {
        return Err(Error::DegenerateCloud);
    }
    Ok(PointCloud::new(centered.into_iter().map(|p| geom::scale(p, 1.0 / max)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub points: usize,
    /// Candidate surface samples per output point.
    pub oversample: usize,
}

impl SamplingConfig {
    pub fn full() -> Self {
        Self { points: 2048, oversample: 8 }
    }

    pub fn toy() -> Self {
        Self { points: 256, oversample: 8 }
    }
}

/// Oversampled surface points reduced by FPS (random start) and normalized to
/// the unit sphere. Returns the cloud and the source face of every point.
pub fn sample_cloud<R: rand::Rng + ?Sized>(
    mesh: &TriangleMesh,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<(PointCloud, Vec<u32>)> {
    let candidates = surface_oversample(mesh, config.points * config.oversample.max(1), rng)?;
    let start = rng.random_range(0..candidates.cloud.len());
    let order = farthest_point_indices(&candidates.cloud, config.points, start)?;
    let cloud = normalize_unit_sphere(&candidates.cloud.select(&order))?;
    let faces = order.iter().map(|&i| candidates.faces[i]).collect();
    Ok((cloud, faces))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudAugment {
    /// Coordinate axis treated as "up" (0=x, 1=y, 2=z).
    pub up_axis: usize,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for CloudAugment {
    fn default() -> Self {
        Self { up_axis: 1, jitter_sigma: 0.02, jitter_clip: 0.05 }
    }
}

/// Rotation by `angle` about the up axis followed by per-coordinate jitter.
pub fn rotate_and_jitter<R: rand::Rng + ?Sized>(
    cloud: &PointCloud,
    angle: f64,
    aug: &CloudAugment,
    rng: &mut R,
) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|&p| {
            let mut q = geom::rotate_about_axis(p, aug.up_axis, angle);
            if aug.jitter_sigma > 0.0 {
                let normal = Normal::new(0.0, aug.jitter_sigma).unwrap();
                for c in q.iter_mut() {
                    *c += normal.sample(rng).clamp(-aug.jitter_clip, aug.jitter_clip);
                }
            }
            q
        })
        .collect();
    PointCloud::new(points)
}

/// Random rotation in `[0, 2π)` about the up axis plus clipped Gaussian jitter.
pub fn augment_cloud<R: rand::Rng + ?Sized>(cloud: &PointCloud, aug: &CloudAugment, rng: &mut R) -> PointCloud {
    let angle = rng.random_range(0.0..core::f64::consts::TAU);
    rotate_and_jitter(cloud, angle, aug, rng)
}

/// Edge-replicated padding of 12.5% per side, for a 32-pixel image 4 pixels.
pub fn crop_padding(size: usize) -> usize {
    (size as f64 * 0.125).round() as usize
}

/// Crop at offset `(ox, oy)` inside the padded image, optionally mirrored.
/// An offset equal to the padding is the identity crop.
pub fn crop_flip(image: &Image, ox: usize, oy: usize, flip: bool) -> Image {
    let (w, h) = (image.width, image.height);
    let (px, py) = (crop_padding(w) as isize, crop_padding(h) as isize);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = (y as isize + oy as isize - py).clamp(0, h as isize - 1) as usize;
        for x in 0..w {
            let xx = if flip { w - 1 - x } else { x };
            let sx = (xx as isize + ox as isize - px).clamp(0, w as isize - 1) as usize;
            out.push(image.pixels[sy * w + sx]);
        }
    }
    Image { width: w, height: h, pixels: out }
}

pub fn augment_image<R: rand::Rng + ?Sized>(image: &Image, rng: &mut R) -> Image {
    let ox = rng.random_range(0..=2 * crop_padding(image.width));
    let oy = rng.random_range(0..=2 * crop_padding(image.height));
    let flip = rng.random_bool(0.5);
    crop_flip(image, ox, oy, flip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use alloc::vec;
    use rand::Rng;

    fn tri(a: Vec3, b: Vec3, c: Vec3) -> TriangleMesh {
        TriangleMesh::new(vec![a, b, c], vec![[0, 1, 2]], None).unwrap()
    }

    #[test]
    fn single_triangle_samples_center_on_centroid() {
        let m = tri([0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let s = surface_oversample(&m, 10_000, &mut rng_from_seed(1)).unwrap();
        let c = s.cloud.centroid();
        assert!((c[0] - 1.0 / 3.0).abs() < 0.02 && (c[1] - 1.0 / 3.0).abs() < 0.02 && c[2].abs() < 1e-12);
    }

    #[test]
    fn samples_split_by_area() {
        // areas 1 and 3
        let m = TriangleMesh::new(
            vec![[0.0; 3], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 5.0], [3.0, 0.0, 5.0], [0.0, 2.0, 5.0]],
            vec![[0, 1, 2], [3, 4, 5]],
            None,
        )
        .unwrap();
        let s = surface_oversample(&m, 20_000, &mut rng_from_seed(2)).unwrap();
        let first = s.faces.iter().filter(|&&f| f == 0).count() as f64 / 20_000.0;
        assert!((first - 0.25).abs() < 0.0125, "{first}");
    }

    #[test]
    fn single_sample_lies_on_plane() {
        let m = tri([0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]);
        let s = surface_oversample(&m, 1, &mut rng_from_seed(3)).unwrap();
        assert!((s.cloud.points[0][2] - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn fps_collinear() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_indices(&c, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_indices(&c, 4, 0).unwrap(), vec![0, 3, 2, 1]);
        assert!(matches!(farthest_point_indices(&c, 5, 0), Err(Error::Size(_))));
    }

    #[test]
    fn normalize_examples() {
        let c = PointCloud::new(vec![[0.0; 3], [0.0, 0.0, 4.0]]);
        let n = normalize_unit_sphere(&c).unwrap();
        assert_eq!(n.points, vec![[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(normalize_unit_sphere(&PointCloud::new(vec![[1.0; 3]; 3])), Err(Error::DegenerateCloud)));
        let mut rng = rng_from_seed(4);
        let raw = PointCloud::new((0..50).map(|_| [rng.random(), rng.random(), rng.random()]).collect());
        let a = normalize_unit_sphere(&raw).unwrap();
        let b = normalize_unit_sphere(&PointCloud::new(raw.points.iter().map(|&p| geom::scale(p, 7.0)).collect())).unwrap();
        let again = normalize_unit_sphere(&a).unwrap();
        for i in 0..50 {
            for k in 0..3 {
                assert!((a.points[i][k] - b.points[i][k]).abs() < 1e-12);
                assert!((a.points[i][k] - again.points[i][k]).abs() < 1e-12);
            }
        }
        assert!((a.max_norm() - 1.0).abs() < 1e-6);
        assert!(geom::norm(a.centroid()) < 1e-6);
    }

    #[test]
    fn augment_identity_and_isometry() {
        let mut rng = rng_from_seed(5);
        let raw = PointCloud::new((0..20).map(|_| [rng.random(), rng.random(), rng.random()]).collect());
        let none = CloudAugment { jitter_sigma: 0.0, ..Default::default() };
        assert_eq!(rotate_and_jitter(&raw, 0.0, &none, &mut rng).points, raw.points);
        let rotated = rotate_and_jitter(&raw, 1.234, &none, &mut rng);
        for i in 0..20 {
            for j in 0..20 {
                let d0 = geom::dist_sq(raw.points[i], raw.points[j]).sqrt();
                let d1 = geom::dist_sq(rotated.points[i], rotated.points[j]).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jitter_moments() {
        let mut rng = rng_from_seed(6);
        let one = PointCloud::new(vec![[0.0; 3]]);
        let aug = CloudAugment::default();
        let xs: Vec<f64> = (0..10_000).map(|_| rotate_and_jitter(&one, 0.0, &aug, &mut rng).points[0][0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        assert!((sd - 0.02).abs() < 0.002, "{sd}");
        assert!(xs.iter().all(|x| x.abs() <= 0.05));
    }

    #[test]
    fn image_crop_flip_contracts() {
        let mut rng = rng_from_seed(7);
        let img = Image { width: 16, height: 12, pixels: (0..192).map(|_| rng.random()).collect() };
        let p = crop_padding(16);
        let q = crop_padding(12);
        assert_eq!(crop_flip(&img, p, q, false), img);
        assert_eq!(crop_flip(&crop_flip(&img, p, q, true), p, q, true), img);
        for _ in 0..20 {
            let out = augment_image(&img, &mut rng);
            assert_eq!((out.width, out.height, out.pixels.len()), (16, 12, 192));
        }
    }
}
