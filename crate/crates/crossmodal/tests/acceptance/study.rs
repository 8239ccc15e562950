//! Toy-scale training study over three seeds.

use std::time::Instant;

use crossmodal::config::RunConfig;
use crossmodal::gendata::toy_dataset;
use crossmodal::report::Report;
use crossmodal::run::{eval_pairs, eval_probe, eval_retrieve, eval_segment, run_pretrain};
use crossmodal_core::datasets::generate_toy_store;
use crossmodal_core::trainer::Regime;
use rayon::prelude::*;

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const TOPK: [usize; 5] = [1, 5, 10, 20, 50];

/// Segmentation runs: regime and training fraction.
pub const SEG_RUNS: [(Regime, &str); 6] = [
    (Regime::Unfrozen, "1.0"),
    (Regime::Frozen, "1.0"),
    (Regime::RandomFrozen, "1.0"),
    (Regime::Scratch, "1.0"),
    (Regime::Unfrozen, "0.1"),
    (Regime::Scratch, "0.1"),
];

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub cross_accuracy: f64,
    pub positive_mpd: f64,
    pub positive_std: f64,
    pub negative_mpd: f64,
    pub probe_3d: f64,
    pub probe_2d_v1: f64,
    pub probe_2d_v8: f64,
    pub topk: Vec<f64>,
    /// Instance mIoU of every entry of [`SEG_RUNS`].
    pub seg_miou: Vec<f64>,
    pub minutes: f64,
}

fn num(r: &Report, key: &str) -> f64 {
    r.get_num(key).unwrap_or_else(|| panic!("report `{}` lacks `{key}`", r.protocol))
}

pub fn config(seed: u64, extra: &[(&str, &str)]) -> RunConfig {
    let mut overrides = vec![("profile".to_string(), "toy".to_string()), ("seed".to_string(), seed.to_string())];
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::resolve(&[], &overrides, None).unwrap()
}

/// Pretrains one seed and runs every downstream evaluation; `segment` is
/// false for the margin sweep.
pub fn run_seed(seed: u64, extra: &[(&str, &str)], segment: bool) -> SeedResult {
    let start = Instant::now();
    let cfg = config(seed, extra);
    let toy = toy_dataset(&cfg).unwrap();
    let store =
        generate_toy_store(&toy, &cfg.render_config().unwrap(), &cfg.sampling_config().unwrap(), cfg.seed().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let params = run_pretrain(&store, dir.path(), &cfg, None).unwrap().params;

    let pairs = eval_pairs(&store, &params, &cfg).unwrap();
    let v1 = eval_probe(&store, &params, &cfg, 1).unwrap();
    let v8 = eval_probe(&store, &params, &cfg, 8).unwrap();
    let retrieve = eval_retrieve(&store, &params, &cfg).unwrap();
    let seg_miou = if segment {
        let partition = toy.partition();
        SEG_RUNS
            .iter()
            .map(|&(regime, fraction)| {
                let seg_cfg = config(seed, &[extra, &[("fraction", fraction), ("seg_epochs", "20")]].concat());
                let base = matches!(regime, Regime::Frozen | Regime::Unfrozen).then_some(&params);
                num(&eval_segment(&store, &partition, base, &seg_cfg, regime).unwrap(), "instance_miou")
            })
            .collect()
    } else {
        Vec::new()
    };
    let result = SeedResult {
        seed,
        cross_accuracy: num(&pairs, "cross_modality_accuracy"),
        positive_mpd: num(&pairs, "positive_mpd"),
        positive_std: num(&pairs, "positive_std"),
        negative_mpd: num(&pairs, "negative_mpd"),
        probe_3d: num(&v8, "accuracy_3d"),
        probe_2d_v1: num(&v1, "accuracy_2d"),
        probe_2d_v8: num(&v8, "accuracy_2d"),
        topk: TOPK.iter().map(|k| num(&retrieve, &format!("top{k}"))).collect(),
        seg_miou,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    };
    eprintln!("  seed {seed} {extra:?} finished in {:.1} min: {result:?}", result.minutes);
    result
}

pub fn run_all() -> Vec<SeedResult> {
    SEEDS.par_iter().map(|&s| run_seed(s, &[], true)).collect()
}
