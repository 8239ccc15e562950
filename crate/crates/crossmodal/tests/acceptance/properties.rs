//! Geometry oracles, renderer analytics, loss identities, determinism and the
//! gradient structure of the joint objective.

use crossmodal::config::RunConfig;
use crossmodal::gendata::toy_dataset;
use crossmodal::run::{run_pretrain, TRACE_FILE};
use crossmodal_core::autodiff::{Gradients, Graph, ParamStore, Tensor};
use crossmodal_core::datasets::{generate_toy_dataset, generate_toy_store, GeneratedStore, SampleOptions, ToyClass};
use crossmodal_core::encoders::{knn_graph, EncoderParams, Encoders, Mode, FUSION_PREFIX, IMAGE_PREFIX, POINT_PREFIX};
use crossmodal_core::geom;
use crossmodal_core::mesh::{Split, TriangleMesh};
use crossmodal_core::objectives::{cross_modality_loss, triplet_loss, LossConfig};
use crossmodal_core::pointcloud::{farthest_point_indices, surface_oversample, PointCloud};
use crossmodal_core::render::{render_view, render_view_with_coverage, sample_viewpoints, Camera, Light, LightKind, RenderConfig};
use crossmodal_core::trainer::{draw_batch, self_loss};
use crossmodal_core::rng_from_seed;
use rand::Rng as _;

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Greedy farthest-point order recomputed from scratch at every step.
fn fps_oracle(pts: &[[f64; 3]], n: usize, start: usize) -> Vec<usize> {
    let mut order = vec![start];
    while order.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for (i, &p) in pts.iter().enumerate() {
            if order.contains(&i) {
                continue;
            }
            let d = order.iter().map(|&s| d2(p, pts[s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        order.push(best.unwrap().0);
    }
    order
}

pub fn geometry() -> Check {
    let mut rng = rng_from_seed(2024);
    let mut fps_ok = 0;
    for case in 0..200 {
        let n = rng.random_range(1..=64);
        // every other instance on a coarse lattice, where distances tie
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
                } else {
                    [0, 0, 0].map(|_| rng.random_range(-2i32..=2) as f64)
                }
            })
            .collect();
        let m = rng.random_range(1..=n);
        let start = rng.random_range(0..n);
        if farthest_point_indices(&PointCloud::new(pts.clone()), m, start).ok() == Some(fps_oracle(&pts, m, start)) {
            fps_ok += 1;
        }
    }

    let mut knn_ok = 0;
    for case in 0..200 {
        let (b, n, d) = (rng.random_range(1..3), rng.random_range(2..24), rng.random_range(1..5));
        let k = rng.random_range(1..n);
        let data: Vec<f64> = (0..b * n * d)
            .map(|_| if case % 2 == 0 { rng.random_range(-1.0..1.0) } else { rng.random_range(-2i32..=2) as f64 })
            .collect();
        let got = knn_graph(&Tensor::new(vec![b, n, d], data.clone()).unwrap(), k).unwrap();
        let mut expect = Vec::with_capacity(b * n * k);
        for bi in 0..b {
            let row = |i: usize| &data[(bi * n + i) * d..(bi * n + i + 1) * d];
            for i in 0..n {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (row(i).iter().zip(row(j)).map(|(u, v)| (u - v) * (u - v)).sum(), j))
                    .collect();
                all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                expect.extend(all[..k].iter().map(|&(_, j)| j));
            }
        }
        if got == expect {
            knn_ok += 1;
        }
    }

    let mesh = TriangleMesh::new(
        vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]],
        vec![[0, 1, 2], [3, 4, 5]],
        None,
    )
    .unwrap();
    let sampled = surface_oversample(&mesh, 200_000, &mut rng_from_seed(5)).unwrap();
    let count = sampled.cloud.len() as f64;
    let mc = sampled.cloud.points.iter().fold([0.0; 3], |a, p| [a[0] + p[0] / count, a[1] + p[1] / count, a[2] + p[2] / count]);
    let c = mesh.centroid().unwrap();
    let centroid_err = (0..3).map(|i| (mc[i] - c[i]).abs()).fold(0.0, f64::max);

    check(
        fps_ok == 200 && knn_ok == 200 && centroid_err < 1e-2,
        format!("fps {fps_ok}/200, knn {knn_ok}/200, centroid vs Monte-Carlo max error {centroid_err:.2e} (< 1e-2)"),
    )
}

fn facing_triangle(camera: &Camera) -> TriangleMesh {
    let [r, u, _] = camera.basis().unwrap();
    let p = |x: f64, y: f64| geom::add(geom::scale(r, x), geom::scale(u, y));
    TriangleMesh::new(vec![p(-0.8, -0.6), p(0.8, -0.6), p(0.0, 0.8)], vec![[0, 1, 2]], None).unwrap()
}

fn diffuse_only(light_dir: [f64; 3]) -> RenderConfig {
    RenderConfig {
        lights: vec![Light { kind: LightKind::Directional, vector: light_dir, diffuse: 1.0, specular: 1.0 }],
        ambient_coeff: 0.0,
        diffuse_coeff: 1.0,
        specular_coeff: 0.0,
        ..RenderConfig::toy()
    }
}

pub fn renderer() -> Check {
    let cam = Camera { azimuth: 30.0, polar: 70.0, radius: 2.5, look_at: [0.0; 3], fov_y: 35.0, up: [0.0, 1.0, 0.0] };
    let tri = facing_triangle(&cam);
    let head_on = render_view(&tri, &cam, &diffuse_only([0.0, 0.0, -1.0])).unwrap().get(16, 16) as f64;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let tilted = render_view(&tri, &cam, &diffuse_only([0.0, s, -s])).unwrap().get(16, 16) as f64;

    let config = RenderConfig::toy();
    let toy = generate_toy_dataset(&[ToyClass::Sphere, ToyClass::Box, ToyClass::Cylinder], 2, &mut rng_from_seed(8)).unwrap();
    let mut rng = rng_from_seed(21);
    let (mut lit, mut total) = (0, 0);
    for shape in &toy.shapes {
        let mesh = shape.mesh.fit_to_view().unwrap();
        for cam in sample_viewpoints(50, &config, &mut rng) {
            total += 1;
            let r = render_view_with_coverage(&mesh, &cam, &config).unwrap();
            if r.foreground_mean().is_some_and(|m| m > config.ambient()) {
                lit += 1;
            }
        }
    }
    check(
        (head_on - 1.0).abs() <= 1e-3 && (tilted - s).abs() <= 1e-3 && lit == total,
        format!("perpendicular {head_on:.5} (1 ± 1e-3), 45° {tilted:.5} (0.70711 ± 1e-3), convex renders above ambient {lit}/{total}"),
    )
}

/// Small toy store shared by the loss, determinism and gradient checks.
pub fn toy_store(config: &RunConfig) -> GeneratedStore {
    let toy = toy_dataset(config).unwrap();
    generate_toy_store(&toy, &config.render_config().unwrap(), &config.sampling_config().unwrap(), config.seed().unwrap()).unwrap()
}

pub fn small_config(extra: &[(&str, &str)]) -> RunConfig {
    let mut overrides: Vec<(String, String)> = vec![("per_class".into(), "10".into()), ("seed".into(), "7".into())];
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::resolve(&[], &overrides, None).unwrap()
}

/// Loss nodes of the joint objective on one fixed toy batch.
fn batch_losses(config: &RunConfig, store: &GeneratedStore, beta: f64) -> (f64, f64, f64, ParamStore<f32>, Gradients<f32>) {
    let enc = Encoders::new(config.encoder_config().unwrap()).unwrap();
    let params = EncoderParams::<f32>::init(&enc.config, 3).unwrap();
    let pool = store.indices(Split::Train);
    let batch = draw_batch(store, &pool, 16, &SampleOptions::default(), 5, 0).unwrap();
    let mut g = Graph::new();
    let loss = LossConfig { cross_weight: beta, ..config.loss_config().unwrap() };
    let l = self_loss(&mut g, &enc, &params.store, &batch, &loss, Mode::Train).unwrap();
    let values = (g.value(l.triplet).item() as f64, g.value(l.cross).item() as f64, g.value(l.total).item() as f64);
    let grads = g.backward(l.total).unwrap();
    (values.0, values.1, values.2, params.store, grads)
}

pub fn losses() -> Check {
    // triplet zero case: every negative clears the margin
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
    let p = g.input(Tensor::new(vec![2, 2], vec![0.1, 0.0, 1.0, 1.2]).unwrap());
    let n = g.input(Tensor::new(vec![2, 2], vec![2.0, 0.0, -1.0, 1.0]).unwrap());
    let l = triplet_loss(&mut g, a, p, n, 1.0).unwrap();
    let triplet_zero = g.value(l).item();

    let mut g = Graph::<f64>::new();
    let probs = g.input(Tensor::new(vec![4, 3], vec![0.5; 12]).unwrap());
    let l = cross_modality_loss(&mut g, probs, &[1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 0], 1e-7).unwrap();
    let uniform = g.value(l).item();
    let three_ln2 = 3.0 * std::f64::consts::LN_2;

    // L_self(β) on one network batch against l_triplet + β·l_cross
    let config = small_config(&[]);
    let store = toy_store(&config);
    let mut linear_err: f64 = 0.0;
    for beta in [0.0, 0.5, 1.0, 2.0] {
        let (lt, lc, total, _, _) = batch_losses(&config, &store, beta);
        linear_err = linear_err.max((total - (lt + beta * lc)).abs() / (1.0 + total.abs()));
    }

    let dir = tempfile::tempdir().unwrap();
    let trace_config = small_config(&[("beta", "0"), ("iters", "50")]);
    let trace = run_pretrain(&store, dir.path(), &trace_config, None).unwrap().trace;
    let equal = trace.iter().filter(|r| r.l_self == r.l_triplet).count();

    check(
        triplet_zero == 0.0 && (uniform - three_ln2).abs() <= 1e-9 && linear_err <= 1e-6 && equal == 50 && trace.len() == 50,
        format!(
            "triplet zero case {triplet_zero}, uniform prediction {uniform:.12} (3·ln2 ± 1e-9), β-linearity max rel. error {linear_err:.1e} (≤ 1e-6), β=0 trace rows with l_self = l_triplet {equal}/{}",
            trace.len()
        ),
    )
}

pub fn determinism() -> Check {
    let config = small_config(&[("iters", "10"), ("deterministic", "true")]);
    let store = toy_store(&config);
    let traces: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            run_pretrain(&store, dir.path(), &config, None).unwrap();
            std::fs::read(dir.path().join(TRACE_FILE)).unwrap()
        })
        .collect();
    let rows = String::from_utf8_lossy(&traces[0]).lines().count().saturating_sub(1);
    check(traces[0] == traces[1] && rows == 10, format!("two 10-iteration runs, {rows} trace rows, byte-identical: {}", traces[0] == traces[1]))
}

fn max_grad(store: &ParamStore<f32>, grads: &Gradients<f32>, prefix: &str) -> f32 {
    store
        .ids()
        .filter(|&id| store.entry(id).name.starts_with(prefix))
        .flat_map(|id| grads.param(id).unwrap_or(&[]).iter().map(|g| g.abs()))
        .fold(0.0, f32::max)
}

pub fn gradient_structure() -> Check {
    let config = small_config(&[]);
    let store = toy_store(&config);
    let (_, _, _, s, joint) = batch_losses(&config, &store, 1.0);
    let joint: Vec<f32> = [IMAGE_PREFIX, POINT_PREFIX, FUSION_PREFIX].iter().map(|p| max_grad(&s, &joint, p)).collect();
    let (_, _, _, s, only) = batch_losses(&config, &store, 0.0);
    let only: Vec<f32> = [IMAGE_PREFIX, POINT_PREFIX, FUSION_PREFIX].iter().map(|p| max_grad(&s, &only, p)).collect();
    check(
        joint.iter().all(|&g| g > 0.0) && only[0] > 0.0 && only[1] == 0.0 && only[2] == 0.0,
        format!(
            "β=1 max |grad| img {:.2e} pt {:.2e} fuse {:.2e}; β=0 img {:.2e} pt {:e} fuse {:e}",
            joint[0], joint[1], joint[2], only[0], only[1], only[2]
        ),
    )
}
