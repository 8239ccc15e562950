use std::collections::BTreeSet;
use std::sync::OnceLock;

use crossmodal_core::datasets::{
    assemble_sample, build_eval_pairs, generate_toy_dataset, generate_toy_store, GeneratedStore, PairKind, SampleOptions, ToyClass,
};
use crossmodal_core::evalkit::{multiview_feature, retrieval_topk, segmentation_metrics, thresholded_accuracy, ShapeSegmentation};
use crossmodal_core::mesh::Split;
use crossmodal_core::pointcloud::SamplingConfig;
use crossmodal_core::render::RenderConfig;
use crossmodal_core::rng_from_seed;
use proptest::prelude::*;

fn small_store() -> &'static GeneratedStore {
    static STORE: OnceLock<GeneratedStore> = OnceLock::new();
    STORE.get_or_init(|| {
        let toy = generate_toy_dataset(&[ToyClass::Sphere, ToyClass::Box, ToyClass::Cylinder], 10, &mut rng_from_seed(1)).unwrap();
        let render = RenderConfig { width: 16, height: 16, view_count: 8, ..RenderConfig::toy() };
        generate_toy_store(&toy, &render, &SamplingConfig { points: 256, oversample: 4 }, 9).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn sample_assembly_is_reproducible(seed in any::<u64>(), object in 0usize..30, augment in any::<bool>()) {
        let store = small_store();
        let pool: Vec<usize> = (0..store.len()).collect();
        let options = SampleOptions { augment, ..SampleOptions::default() };
        let a = assemble_sample(store, &pool, object, &options, &mut rng_from_seed(seed)).unwrap();
        let b = assemble_sample(store, &pool, object, &options, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.labels, [1, 1, 0]);
        prop_assert_ne!(a.negative_object, object);
    }

    #[test]
    fn eval_pairs_are_balanced_and_distinct(seed in any::<u64>(), image_cloud in any::<bool>()) {
        let store = small_store();
        let test = store.indices(Split::Test);
        let kind = if image_cloud { PairKind::ImageCloud } else { PairKind::ImageImage };
        let set = build_eval_pairs(store, &test, kind, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(set.pairs.len(), 10 * test.len());
        prop_assert_eq!(2 * set.positives(), set.pairs.len());
        let distinct: BTreeSet<_> = set.pairs.iter().copied().collect();
        prop_assert_eq!(distinct.len(), set.pairs.len());
        for p in &set.pairs {
            prop_assert!(test.contains(&p.object_a) && test.contains(&p.object_b));
            prop_assert_eq!(p.same, p.object_a == p.object_b);
        }
    }
}

/// Part from the point position alone: each toy part is a height band of the
/// normalized cloud.
fn analytic_part(class: ToyClass, y: f64, lo: f64, hi: f64) -> u8 {
    let tol = 1e-6 * (hi - lo);
    let parts = class.parts();
    match class {
        ToyClass::Sphere => parts[if y > 0.5 * (lo + hi) { 0 } else { 1 }],
        ToyClass::Box if hi - y <= tol => parts[0],
        ToyClass::Box if y - lo <= tol => parts[2],
        ToyClass::Box => parts[1],
        ToyClass::Cylinder if hi - y <= tol || y - lo <= tol => parts[0],
        ToyClass::Cylinder => parts[1],
        ToyClass::Cone if y - lo <= tol => parts[0],
        ToyClass::Cone => parts[1],
    }
}

#[test]
fn toy_part_labels_agree_with_geometry() {
    let classes = [ToyClass::Sphere, ToyClass::Box, ToyClass::Cylinder, ToyClass::Cone];
    let toy = generate_toy_dataset(&classes, 4, &mut rng_from_seed(2)).unwrap();
    let store = generate_toy_store(&toy, &RenderConfig { width: 8, height: 8, view_count: 2, ..RenderConfig::toy() }, &SamplingConfig::toy(), 3).unwrap();
    for (shape, obj) in toy.shapes.iter().zip(&store.objects) {
        let ys: Vec<f64> = obj.cloud.points.iter().map(|p| p[1]).collect();
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let labels = obj.point_parts.as_ref().unwrap();
        let agree = ys.iter().zip(labels).filter(|(&y, &l)| analytic_part(shape.class, y, lo, hi) == l).count();
        let rate = agree as f64 / ys.len() as f64;
        assert!(rate >= 0.99, "{:?}: {rate}", shape.class);
    }
}

fn features(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-4.0f32..4.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn flipping_labels_complements_accuracy(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60),
        threshold in 0.0f64..1.0,
    ) {
        let (p, same): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let flipped: Vec<bool> = same.iter().map(|s| !s).collect();
        let a = thresholded_accuracy(&p, &same, threshold).unwrap();
        let b = thresholded_accuracy(&p, &flipped, threshold).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multiview_pooling_is_order_free_and_monotone(views in (1usize..8).prop_flat_map(|v| features(v, 6)), extra in features(1, 6), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let refs: Vec<&[f32]> = views.iter().map(Vec::as_slice).collect();
        let pooled = multiview_feature(&refs).unwrap();
        let mut shuffled = refs.clone();
        shuffled.shuffle(&mut rng_from_seed(seed));
        prop_assert_eq!(&multiview_feature(&shuffled).unwrap(), &pooled);
        let mut more = refs.clone();
        more.push(&extra[0]);
        let grown = multiview_feature(&more).unwrap();
        prop_assert!(grown.iter().zip(&pooled).all(|(g, p)| g >= p));
    }

    #[test]
    fn retrieval_ignores_feature_scale(
        feats in (3usize..20).prop_flat_map(|n| (features(n, 4), prop::collection::vec(0usize..3, n))),
        exponent in -4i32..5,
    ) {
        let (f, labels) = feats;
        // powers of two scale every distance exactly
        let s = 2f32.powi(exponent);
        let scaled: Vec<Vec<f32>> = f.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
        let ks = [1, f.len() - 1];
        let full = retrieval_topk(&f, &labels, &ks).unwrap();
        prop_assert_eq!(&retrieval_topk(&scaled, &labels, &ks).unwrap(), &full);
        let any_pair = (0..labels.len()).filter(|&i| labels.iter().filter(|&&l| l == labels[i]).count() > 1).count();
        prop_assert!((full[1] - any_pair as f64 / labels.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn overall_accuracy_is_one_minus_hamming(
        shapes in prop::collection::vec((0usize..2, prop::collection::vec((0u8..3, 0u8..3), 1..40)), 1..6),
    ) {
        let partition = vec![vec![0u8, 1, 2], vec![0u8, 1, 2]];
        let segs: Vec<ShapeSegmentation> = shapes
            .iter()
            .map(|(c, pts)| ShapeSegmentation { category: *c, predictions: pts.iter().map(|p| p.0).collect(), labels: pts.iter().map(|p| p.1).collect() })
            .collect();
        let m = segmentation_metrics(&segs, &partition).unwrap();
        let total: usize = segs.iter().map(|s| s.labels.len()).sum();
        let hamming: usize = segs.iter().map(|s| s.predictions.iter().zip(&s.labels).filter(|(a, b)| a != b).count()).sum();
        prop_assert!((m.overall_accuracy - (1.0 - hamming as f64 / total as f64)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.class_miou) && (0.0..=1.0).contains(&m.instance_miou));
        let perfect: Vec<ShapeSegmentation> = segs.iter().map(|s| ShapeSegmentation { predictions: s.labels.clone(), ..s.clone() }).collect();
        let p = segmentation_metrics(&perfect, &partition).unwrap();
        prop_assert_eq!((p.overall_accuracy, p.class_miou, p.instance_miou), (1.0, 1.0, 1.0));
    }
}
