//! Central-difference gradient checks over every primitive and every network.

use crossmodal_core::autodiff::{grad_check, smoothness_gap, BnLayout, BnStats, Graph, ParamKind, ParamStore, Tensor, Var};
use crossmodal_core::encoders::{EncoderConfig, EncoderParams, Encoders, Mode};
use crossmodal_core::objectives::{cross_modality_loss, triplet_loss};
use crossmodal_core::{rng_from_seed, Result, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const SEEDS: [u64; 3] = [11, 22, 33];
/// Network fixtures are drawn from these seeds until three are kink-free.
const NETWORK_CANDIDATES: std::ops::Range<u64> = 1..13;
const PER_PARAM: usize = 50;

/// Worst relative error of one check group over its seeds.
pub struct GroupResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub fixtures: usize,
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn off_kink(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.2..1.2) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Distinct values on a 0.05 grid so max selections survive ±ε.
fn spaced(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    v
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, value) in entries {
        s.insert(name, value, ParamKind::Weight).unwrap();
    }
    s
}

fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n = g.value(v).len();
    let r = g.input(t(&shape, uniform(&mut rng_from_seed(seed ^ 0x5eed), n, -1.0, 1.0)));
    let m = g.mul(v, r)?;
    Ok(g.sum(m))
}

fn error<F>(s: &ParamStore<f64>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check(s, f, EPSILON, PER_PARAM, &mut rng_from_seed(seed)).map_or(f64::INFINITY, |r| r.max_rel_error)
}

struct Groups(Vec<GroupResult>);

impl Groups {
    fn record(&mut self, name: &'static str, e: f64) {
        match self.0.iter_mut().find(|g| g.name == name) {
            Some(g) => {
                g.max_rel_error = g.max_rel_error.max(e);
                g.fixtures += 1;
            }
            None => self.0.push(GroupResult { name, max_rel_error: e, fixtures: 1 }),
        }
    }
}

fn primitives(out: &mut Groups) {
    for seed in SEEDS {
        let mut rng = rng_from_seed(seed);
        let s = store(vec![
            ("x", t(&[4, 5], uniform(&mut rng, 20, -1.0, 1.0))),
            ("w", t(&[3, 5], uniform(&mut rng, 15, -1.0, 1.0))),
            ("b", t(&[3], uniform(&mut rng, 3, -1.0, 1.0))),
        ]);
        out.record("linear", error(&s, seed, |g, p| {
            let (x, w, b) = (g.param_named(p, "x")?, g.param_named(p, "w")?, g.param_named(p, "b")?);
            let y = g.linear(x, w, Some(b))?;
            probe(g, y, seed)
        }));

        for (k, stride) in [(3, 1), (3, 2), (1, 2)] {
            let mut rng = rng_from_seed(seed);
            let s = store(vec![
                ("x", t(&[2, 3, 5, 5], uniform(&mut rng, 150, -1.0, 1.0))),
                ("w", t(&[4, 3, k, k], uniform(&mut rng, 12 * k * k, -1.0, 1.0))),
                ("b", t(&[4], uniform(&mut rng, 4, -1.0, 1.0))),
            ]);
            out.record("conv2d", error(&s, seed, |g, p| {
                let (x, w, b) = (g.param_named(p, "x")?, g.param_named(p, "w")?, g.param_named(p, "b")?);
                let y = g.conv2d(x, w, Some(b), stride)?;
                probe(g, y, seed)
            }));
        }

        let mut rng = rng_from_seed(seed);
        let s = store(vec![
            ("x2d", t(&[3, 2, 3, 3], uniform(&mut rng, 54, -2.0, 2.0))),
            ("xf", t(&[6, 4], uniform(&mut rng, 24, -2.0, 2.0))),
            ("g2", t(&[2], uniform(&mut rng, 2, 0.5, 1.5))),
            ("b2", t(&[2], uniform(&mut rng, 2, -0.5, 0.5))),
            ("g4", t(&[4], uniform(&mut rng, 4, 0.5, 1.5))),
            ("b4", t(&[4], uniform(&mut rng, 4, -0.5, 0.5))),
        ]);
        let mean = uniform(&mut rng, 4, -0.5, 0.5);
        let var = uniform(&mut rng, 4, 0.5, 2.0);
        out.record("batch_norm", error(&s, seed, |g, p| {
            let (x, ga, be) = (g.param_named(p, "x2d")?, g.param_named(p, "g2")?, g.param_named(p, "b2")?);
            let y = g.batch_norm(x, ga, be, BnStats::Batch { record: None }, BnLayout::Channels2d)?;
            probe(g, y, seed)
        }));
        out.record("batch_norm", error(&s, seed, |g, p| {
            let (x, ga, be) = (g.param_named(p, "xf")?, g.param_named(p, "g4")?, g.param_named(p, "b4")?);
            let y = g.batch_norm(x, ga, be, BnStats::Batch { record: None }, BnLayout::Features)?;
            probe(g, y, seed)
        }));
        out.record("batch_norm", error(&s, seed, |g, p| {
            let (x, ga, be) = (g.param_named(p, "xf")?, g.param_named(p, "g4")?, g.param_named(p, "b4")?);
            let y = g.batch_norm(x, ga, be, BnStats::Running { mean: &mean, var: &var }, BnLayout::Features)?;
            probe(g, y, seed)
        }));

        let s = store(vec![("x", t(&[5, 6], off_kink(&mut rng, 30)))]);
        out.record("relu", error(&s, seed, |g, p| {
            let x = g.param_named(p, "x")?;
            let y = g.relu(x);
            probe(g, y, seed)
        }));
        out.record("leaky_relu", error(&s, seed, |g, p| {
            let x = g.param_named(p, "x")?;
            let y = g.leaky_relu(x, 0.2);
            probe(g, y, seed)
        }));

        let s = store(vec![("img", t(&[2, 2, 4, 5], spaced(&mut rng, 80))), ("set", t(&[2, 5, 4], spaced(&mut rng, 40)))]);
        out.record("max_pool2", error(&s, seed, |g, p| {
            let x = g.param_named(p, "img")?;
            let y = g.max_pool2(x)?;
            probe(g, y, seed)
        }));
        out.record("global_avg_pool", error(&s, seed, |g, p| {
            let x = g.param_named(p, "img")?;
            let y = g.global_avg_pool(x)?;
            probe(g, y, seed)
        }));
        out.record("max_over_set", error(&s, seed, |g, p| {
            let x = g.param_named(p, "set")?;
            let y = g.max_over_set(x)?;
            probe(g, y, seed)
        }));

        let s = store(vec![
            ("a", t(&[2, 3, 4], uniform(&mut rng, 24, -1.0, 1.0))),
            ("b", t(&[2, 3, 4], uniform(&mut rng, 24, -1.0, 1.0))),
            ("c", t(&[2, 2, 4], uniform(&mut rng, 16, -1.0, 1.0))),
        ]);
        out.record("concat", error(&s, seed, |g, p| {
            let (a, b, c) = (g.param_named(p, "a")?, g.param_named(p, "b")?, g.param_named(p, "c")?);
            let outer = g.concat(&[a, b], 0)?;
            let mid = g.concat(&[a, c, b], 1)?;
            let last = g.concat(&[a, b], 2)?;
            let (x, y, z) = (probe(g, outer, seed)?, probe(g, mid, seed + 1)?, probe(g, last, seed + 2)?);
            let xy = g.add(x, y)?;
            g.add(xy, z)
        }));
        out.record("gather_rows", error(&s, seed, |g, p| {
            let a = g.param_named(p, "a")?;
            let y = g.gather_rows(a, &[5, 0, 5, 2, 2, 2, 1], &[7, 4])?;
            probe(g, y, seed)
        }));
        out.record("reshape/select_column", error(&s, seed, |g, p| {
            let a = g.param_named(p, "a")?;
            let flat = g.reshape(a, &[6, 4])?;
            let y = g.select_column(flat, 2)?;
            let (x, y) = (probe(g, flat, seed)?, probe(g, y, seed + 1)?);
            g.add(x, y)
        }));
        out.record("pairwise_sq_dist", error(&s, seed, |g, p| {
            let a = g.param_named(p, "a")?;
            let y = g.pairwise_sq_dist(a)?;
            probe(g, y, seed)
        }));

        let s = store(vec![
            ("a", t(&[3, 4], uniform(&mut rng, 12, -1.0, 1.0))),
            ("b", t(&[3, 4], uniform(&mut rng, 12, -1.0, 1.0))),
            ("pos", t(&[3, 4], uniform(&mut rng, 12, 0.2, 2.0))),
            ("c", t(&[3, 4], vec![-0.9, -0.7, -0.3, 0.0, 0.2, 0.4, 0.6, 0.8, -0.45, 0.45, 1.5, -1.5])),
            ("z", t(&[4, 3], uniform(&mut rng, 12, -2.0, 2.0))),
        ]);
        out.record("add/sub/mul", error(&s, seed, |g, p| {
            let (a, b) = (g.param_named(p, "a")?, g.param_named(p, "b")?);
            let x = g.add(a, b)?;
            let y = g.sub(a, b)?;
            let z = g.mul(x, y)?;
            let w = g.mul(z, a)?;
            probe(g, w, seed)
        }));
        out.record("scale/offset/log", error(&s, seed, |g, p| {
            let x = g.param_named(p, "pos")?;
            let y = g.scale(x, 1.7);
            let y = g.offset(y, 0.3);
            let y = g.log(y);
            probe(g, y, seed)
        }));
        out.record("clamp", error(&s, seed, |g, p| {
            let x = g.param_named(p, "c")?;
            let y = g.clamp(x, -0.5, 0.5);
            probe(g, y, seed)
        }));
        out.record("sum/mean/sum_sq_rows", error(&s, seed, |g, p| {
            let (a, b) = (g.param_named(p, "a")?, g.param_named(p, "b")?);
            let rows = g.sum_sq_rows(a)?;
            let r = probe(g, rows, seed)?;
            let m = g.mean(b)?;
            let sb = g.sum(b);
            let rm = g.add(r, m)?;
            g.add(rm, sb)
        }));
        out.record("softmax", error(&s, seed, |g, p| {
            let z = g.param_named(p, "z")?;
            let y = g.softmax(z)?;
            probe(g, y, seed)
        }));
        out.record("softmax_cross_entropy", error(&s, seed, |g, p| {
            let z = g.param_named(p, "z")?;
            g.softmax_cross_entropy(z, &[2, 0, 1, 2])
        }));
    }
}

fn tiny() -> EncoderConfig {
    EncoderConfig {
        image_channels: vec![2, 3, 4],
        point_widths: vec![3, 3, 3, 4],
        embed_dim: 4,
        k: 3,
        fusion_hidden: 5,
        seg_hidden: vec![5, 4, 3],
        input_channels: 1,
        stem_stride: 1,
        leaky_slope: 0.2,
    }
}

/// Random running statistics and affine terms, so eval-mode batchnorm is a
/// genuine affine map and biases keep units off the relu kink.
fn network_params(config: &EncoderConfig, seed: u64, head: Option<usize>) -> EncoderParams<f64> {
    let mut p = EncoderParams::<f64>::init(config, seed).unwrap();
    if let Some(parts) = head {
        p.attach_segmentation_head(config, parts, seed).unwrap();
    }
    let mut rng = rng_from_seed(seed ^ 0xb7);
    for id in p.store.ids().collect::<Vec<_>>() {
        let kind = p.store.entry(id).kind;
        for v in p.store.value_mut(id).data_mut() {
            match kind {
                ParamKind::RunningMean => *v = rng.random_range(-0.3..0.3),
                ParamKind::RunningVar => *v = rng.random_range(0.5..1.5),
                ParamKind::BnScale => *v = rng.random_range(0.7..1.3),
                ParamKind::BnShift | ParamKind::Bias => *v = rng.random_range(-0.2..0.2),
                ParamKind::Weight => {}
            }
        }
    }
    p
}

/// Checks `f` on up to three kink-free fixtures; a fixture within ε of a
/// kink is skipped, detected by comparing differences at ε and ε/10.
fn networks_group<F>(out: &mut Groups, name: &'static str, mut build: F)
where
    F: FnMut(u64) -> Option<(ParamStore<f64>, Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>)>,
{
    let mut done = 0;
    for seed in NETWORK_CANDIDATES {
        if done == 3 {
            break;
        }
        let Some((s, f)) = build(seed) else { continue };
        let gap = smoothness_gap(&s, &f, EPSILON, PER_PARAM, &mut rng_from_seed(seed)).unwrap_or(f64::INFINITY);
        if gap > 1e-5 {
            continue;
        }
        out.record(name, error(&s, seed, f));
        done += 1;
    }
    if done < 3 {
        out.record(name, f64::INFINITY);
    }
}

fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, uniform(&mut rng_from_seed(seed), n, lo, hi))
}

fn networks(out: &mut Groups) {
    let enc = std::sync::Arc::new(Encoders::new(tiny()).unwrap());

    let e = enc.clone();
    networks_group(out, "image encoder", move |seed| {
        let images = random_tensor(&[2, 1, 16, 16], seed, 0.0, 1.0);
        let e = e.clone();
        Some((network_params(&e.config, seed, None).store, Box::new(move |g, s| {
            let x = g.input(images.clone());
            let f = e.forward_image(g, s, x, Mode::Eval)?;
            probe(g, f, seed)
        })))
    });

    let e = enc.clone();
    networks_group(out, "point encoder", move |seed| {
        let clouds = random_tensor(&[2, 12, 3], seed, -1.0, 1.0);
        let e = e.clone();
        Some((network_params(&e.config, seed, None).store, Box::new(move |g, s| {
            let x = g.input(clouds.clone());
            let f = e.forward_point(g, s, x, Mode::Eval)?;
            let a = probe(g, f.global, seed)?;
            let b = probe(g, f.per_point, seed + 1)?;
            g.add(a, b)
        })))
    });

    let e = enc.clone();
    networks_group(out, "fusion classifier", move |seed| {
        let mut p = network_params(&e.config, seed, None);
        p.store.insert("in.fi", random_tensor(&[3, 4], seed, 0.0, 1.0), ParamKind::Weight).unwrap();
        p.store.insert("in.fp", random_tensor(&[3, 4], seed + 1, -1.0, 1.0), ParamKind::Weight).unwrap();
        let e = e.clone();
        Some((p.store, Box::new(move |g, s| {
            let (fi, fp) = (g.param_named(s, "in.fi")?, g.param_named(s, "in.fp")?);
            let prob = e.forward_fusion(g, s, fi, fp)?;
            probe(g, prob, seed)
        })))
    });

    let e = enc.clone();
    networks_group(out, "segmentation head", move |seed| {
        let clouds = random_tensor(&[2, 10, 3], seed, -1.0, 1.0);
        let labels: Vec<usize> = (0..20).map(|i| (i * 7 + seed as usize) % 3).collect();
        let e = e.clone();
        Some((network_params(&e.config, seed, Some(3)).store, Box::new(move |g, s| {
            let x = g.input(clouds.clone());
            let logits = e.forward_segmentation(g, s, x, Mode::Eval)?;
            let flat = g.reshape(logits, &[20, 3])?;
            g.softmax_cross_entropy(flat, &labels)
        })))
    });

    let e = enc.clone();
    networks_group(out, "triplet loss", move |seed| {
        let p = network_params(&e.config, seed, None);
        let images = random_tensor(&[6, 1, 16, 16], seed, 0.0, 1.0);
        let margin = 0.05;
        // keep every hinge argument at least 1e-3 from zero
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let f = e.forward_image(&mut g, &p.store, x, Mode::Eval).ok()?;
        let rows: Vec<&[f64]> = g.value(f).data().chunks(4).collect();
        let d = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        for i in 0..2 {
            if (d(rows[i], rows[2 + i]) - d(rows[i], rows[4 + i]) + margin).abs() <= 1e-3 {
                return None;
            }
            if rows[2 + i].iter().zip(rows[4 + i]).any(|(x, y)| x == y) {
                return None;
            }
        }
        let e = e.clone();
        Some((p.store, Box::new(move |g, s| {
            let x = g.input(images.clone());
            let f = e.forward_image(g, s, x, Mode::Eval)?;
            let a = g.gather_rows(f, &[0, 1], &[2, 4])?;
            let pos = g.gather_rows(f, &[2, 3], &[2, 4])?;
            let neg = g.gather_rows(f, &[4, 5], &[2, 4])?;
            triplet_loss(g, a, pos, neg, margin)
        })))
    });

    let e = enc;
    networks_group(out, "cross-modality loss", move |seed| {
        let images = random_tensor(&[6, 1, 16, 16], seed, 0.0, 1.0);
        let clouds = random_tensor(&[2, 12, 3], seed + 7, -1.0, 1.0);
        let e = e.clone();
        Some((network_params(&e.config, seed, None).store, Box::new(move |g, s| {
            let x = g.input(images.clone());
            let fi = e.forward_image(g, s, x, Mode::Eval)?;
            let c = g.input(clouds.clone());
            let fp = e.forward_point(g, s, c, Mode::Eval)?.global;
            let fp = g.gather_rows(fp, &[0, 0, 0, 1, 1, 1], &[6, 4])?;
            let prob = e.forward_fusion(g, s, fi, fp)?;
            let prob = g.reshape(prob, &[2, 3])?;
            cross_modality_loss(g, prob, &[1, 1, 0, 1, 1, 0], 1e-7)
        })))
    });
}

pub fn run() -> Vec<GroupResult> {
    let mut out = Groups(Vec::new());
    primitives(&mut out);
    networks(&mut out);
    out.0
}
