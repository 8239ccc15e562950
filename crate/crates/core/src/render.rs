//! Randomized spherical cameras and a depth-buffered Gouraud/Phong rasterizer
//! producing single-channel shading images.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::geom::{self, Vec3};
use crate::mesh::TriangleMesh;
use crate::{Error, Result};

pub const AZIMUTH_RANGE: (f64, f64) = (10.0, 340.0);
pub const POLAR_RANGE: (f64, f64) = (10.0, 165.0);

/// Single-channel image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(alloc::format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Pinhole camera on a sphere around `look_at`. Angles in degrees; the polar
/// angle is measured from the up axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub azimuth: f64,
    pub polar: f64,
    pub radius: f64,
    pub look_at: Vec3,
    pub fov_y: f64,
    pub up: Vec3,
}

impl Camera {
    pub fn position(&self) -> Vec3 {
        let (az, po) = (self.azimuth.to_radians(), self.polar.to_radians());
        let (sp, cp) = (Float::sin(po), Float::cos(po));
        let dir = [sp * Float::cos(az), cp, sp * Float::sin(az)];
        geom::add(self.look_at, geom::scale(dir, self.radius))
    }

    /// Orthonormal (right, up, forward) basis.
    pub fn basis(&self) -> Result<[Vec3; 3]> {
        let forward = geom::normalize(geom::sub(self.look_at, self.position()))
            .ok_or(Error::Camera("camera coincides with its target"))?;
        let up = geom::normalize(self.up).ok_or(Error::Camera("zero up vector"))?;
        let right = geom::cross(forward, up);
        if geom::norm(right) < 1e-9 {
            return Err(Error::Camera("view direction is parallel to the up vector"));
        }
        let right = geom::normalize(right).unwrap();
        let true_up = geom::cross(right, forward);
        Ok([right, true_up, forward])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LightKind {
    /// Point light; `vector` is its position relative to the camera target,
    /// expressed in camera coordinates (right, up, forward).
    Point,
    /// Directional light; `vector` points from the surface towards the light,
    /// in camera coordinates.
    Directional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    pub kind: LightKind,
    pub vector: Vec3,
    pub diffuse: f64,
    pub specular: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub view_count: usize,
    pub radius: f64,
    pub fov_y: f64,
    pub lights: Vec<Light>,
    pub ambient_intensity: f64,
    pub ambient_coeff: f64,
    pub diffuse_coeff: f64,
    pub specular_coeff: f64,
    pub shininess: f64,
    pub background: f32,
}

impl RenderConfig {
    /// Two opposing point lights on the view axis, behind the object and
    /// behind the camera.
    pub fn opposing_lights() -> Vec<Light> {
        vec![
            Light { kind: LightKind::Point, vector: [0.0, 0.0, 3.0], diffuse: 1.0, specular: 1.0 },
            Light { kind: LightKind::Point, vector: [0.0, 0.0, -3.0], diffuse: 1.0, specular: 1.0 },
        ]
    }

    pub fn full() -> Self {
        Self {
            width: 224,
            height: 224,
            view_count: 180,
            radius: 2.5,
            fov_y: 35.0,
            lights: Self::opposing_lights(),
            ambient_intensity: 1.0,
            ambient_coeff: 0.1,
            diffuse_coeff: 0.6,
            specular_coeff: 0.3,
            shininess: 32.0,
            background: 0.0,
        }
    }

    pub fn toy() -> Self {
        Self { width: 32, height: 32, view_count: 8, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(alloc::format!("image size {}x{} is below 8x8", self.width, self.height)));
        }
        if self.view_count < 2 {
            return Err(Error::Config("view_count must be at least 2".into()));
        }
        let coeffs = [self.ambient_coeff, self.diffuse_coeff, self.specular_coeff, self.shininess];
        if coeffs.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::Config("shading coefficients must be non-negative".into()));
        }
        if !(self.radius > 0.0) || !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(Error::Config("radius must be positive and fov_y in (0, 180)".into()));
        }
        Ok(())
    }

    pub fn ambient(&self) -> f64 {
        self.ambient_coeff * self.ambient_intensity
    }
}

/// Draws `count` cameras uniformly in the azimuth/polar bands, all aimed at
/// the origin.
pub fn sample_viewpoints<R: rand::Rng + ?Sized>(count: usize, config: &RenderConfig, rng: &mut R) -> Vec<Camera> {
    (0..count)
        .map(|_| Camera {
            azimuth: rng.random_range(AZIMUTH_RANGE.0..=AZIMUTH_RANGE.1),
            polar: rng.random_range(POLAR_RANGE.0..=POLAR_RANGE.1),
            radius: config.radius,
            look_at: [0.0; 3],
            fov_y: config.fov_y,
            up: [0.0, 1.0, 0.0],
        })
        .collect()
}

/// Rendered image plus its coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub image: Image,
    pub coverage: Vec<bool>,
}

impl Rendering {
    /// Mean intensity over covered pixels, `None` if nothing was drawn.
    pub fn foreground_mean(&self) -> Option<f64> {
        let (sum, n) = self
            .image
            .pixels
            .iter()
            .zip(&self.coverage)
            .filter(|(_, c)| **c)
            .fold((0.0, 0usize), |(s, n), (p, _)| (s + *p as f64, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

pub fn render_view(mesh: &TriangleMesh, camera: &Camera, config: &RenderConfig) -> Result<Image> {
    render_view_with_coverage(mesh, camera, config).map(|r| r.image)
}

const NEAR: f64 = 1e-3;

pub fn render_view_with_coverage(mesh: &TriangleMesh, camera: &Camera, config: &RenderConfig) -> Result<Rendering> {
    let [right, up, forward] = camera.basis()?;
    let eye = camera.position();
    let (w, h) = (config.width, config.height);
    let to_world = |c: Vec3| geom::add(geom::add(geom::scale(right, c[0]), geom::scale(up, c[1])), geom::scale(forward, c[2]));

    let lights: Vec<(LightKind, Vec3, f64, f64)> = config
        .lights
        .iter()
        .map(|l| match l.kind {
            LightKind::Point => (l.kind, geom::add(camera.look_at, to_world(l.vector)), l.diffuse, l.specular),
            LightKind::Directional => (
                l.kind,
                geom::normalize(to_world(l.vector)).unwrap_or([0.0; 3]),
                l.diffuse,
                l.specular,
            ),
        })
        .collect();

    let normals = mesh.vertex_normals();
    let ambient = config.ambient();
    let intensities: Vec<f64> = mesh
        .vertices()
        .iter()
        .zip(&normals)
        .map(|(&p, &n)| {
            let view = geom::normalize(geom::sub(eye, p)).unwrap_or([0.0; 3]);
            // two-sided surfaces: orient the normal towards the viewer
            let n = if geom::dot(n, view) < 0.0 { geom::scale(n, -1.0) } else { n };
            let mut i = ambient;
            for &(kind, v, id, is) in &lights {
                let l = match kind {
                    LightKind::Point => match geom::normalize(geom::sub(v, p)) {
                        Some(l) => l,
                        None => continue,
                    },
                    LightKind::Directional => v,
                };
                let ln = geom::dot(l, n);
                if ln <= 0.0 {
                    continue;
                }
                i += config.diffuse_coeff * ln * id;
                let refl = geom::sub(geom::scale(n, 2.0 * ln), l);
                let rv = geom::dot(refl, view).max(0.0);
                if config.specular_coeff > 0.0 && rv > 0.0 {
                    i += config.specular_coeff * Float::powf(rv, config.shininess) * is;
                }
            }
            i
        })
        .collect();

    // camera-space positions and screen projection
    let tan_half = Float::tan(config.fov_y.to_radians() * 0.5);
    let aspect = w as f64 / h as f64;
    let projected: Vec<Option<(f64, f64, f64)>> = mesh
        .vertices()
        .iter()
        .map(|&p| {
            let d = geom::sub(p, eye);
            let (xc, yc, zc) = (geom::dot(d, right), geom::dot(d, up), geom::dot(d, forward));
            if zc <= NEAR {
                return None;
            }
            let nx = xc / (zc * tan_half * aspect);
            let ny = yc / (zc * tan_half);
            Some(((nx + 1.0) * 0.5 * w as f64, (1.0 - ny) * 0.5 * h as f64, zc))
        })
        .collect();

    let mut pixels = vec![config.background; w * h];
    let mut coverage = vec![false; w * h];
    let mut depth = vec![f64::INFINITY; w * h];

    for face in mesh.faces() {
        let idx = [face[0] as usize, face[1] as usize, face[2] as usize];
        let (Some(a), Some(b), Some(c)) = (projected[idx[0]], projected[idx[1]], projected[idx[2]]) else {
            continue;
        };
        let area = edge(a, b, c.0, c.1);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = Float::floor(a.0.min(b.0).min(c.0)).max(0.0) as usize;
        let min_y = Float::floor(a.1.min(b.1).min(c.1)).max(0.0) as usize;
        let max_x = (Float::ceil(a.0.max(b.0).max(c.0)) as i64).min(w as i64 - 1);
        let max_y = (Float::ceil(a.1.max(b.1).max(c.1)) as i64).min(h as i64 - 1);
        if max_x < 0 || max_y < 0 {
            continue;
        }
        let inv_z = [1.0 / a.2, 1.0 / b.2, 1.0 / c.2];
        let vi = [intensities[idx[0]], intensities[idx[1]], intensities[idx[2]]];
        for py in min_y..=max_y as usize {
            for px in min_x..=max_x as usize {
                let (sx, sy) = (px as f64 + 0.5, py as f64 + 0.5);
                let w0 = edge(b, c, sx, sy) / area;
                let w1 = edge(c, a, sx, sy) / area;
                let w2 = edge(a, b, sx, sy) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // perspective-correct interpolation
                let iz = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2];
                let z = 1.0 / iz;
                let slot = py * w + px;
                if z >= depth[slot] {
                    continue;
                }
                depth[slot] = z;
                let value = (w0 * inv_z[0] * vi[0] + w1 * inv_z[1] * vi[1] + w2 * inv_z[2] * vi[2]) * z;
                pixels[slot] = value.clamp(0.0, 1.0) as f32;
                coverage[slot] = true;
            }
        }
    }
    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(Rendering { image: Image { width: w, height: h, pixels }, coverage })
}

#[inline]
fn edge(a: (f64, f64, f64), b: (f64, f64, f64), px: f64, py: f64) -> f64 {
    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
}
