//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,6` restricts the run to the listed criteria.
//! `ACCEPTANCE_STRICT=1` turns any FAIL into a nonzero exit status.

mod gradients;
mod properties;
mod study;

use std::time::Instant;

use properties::Check;

const GRADIENT_BUDGET_MIN: f64 = 5.0;
const GEOMETRY_BUDGET_MIN: f64 = 2.0;
const RENDER_BUDGET_MIN: f64 = 2.0;
const LOSS_BUDGET_MIN: f64 = 3.0;
const STUDY_BUDGET_MIN: f64 = 45.0;
const DETERMINISM_BUDGET_MIN: f64 = 1.0;

const CROSS_ACCURACY_MIN: f64 = 0.85;
const PROBE_3D_MIN: f64 = 0.90;
const MULTIVIEW_SLACK: f64 = 0.02;
const TOP1_MIN: f64 = 0.80;
const UNFROZEN_MIOU_MIN: f64 = 0.75;
const LOW_DATA_SLACK: f64 = 0.02;

struct Board {
    lines: Vec<(String, bool)>,
}

impl Board {
    fn line(&mut self, id: &str, pass: bool, text: String) {
        println!("{} {id} {text}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id.to_string(), pass));
    }

    fn timed(&mut self, id: &str, title: &str, budget_min: Option<f64>, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let c = f();
        let minutes = start.elapsed().as_secs_f64() / 60.0;
        let (within, budget) = match budget_min {
            Some(b) => (minutes < b, format!(" < {b} min")),
            None => (true, String::new()),
        };
        self.line(id, c.pass && within, format!("{title}: {}; runtime {minutes:.2} min{budget}", c.detail));
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn list(xs: impl Iterator<Item = f64>) -> String {
    xs.map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn gradient_criterion() -> Check {
    let groups = gradients::run();
    for g in &groups {
        println!("     {:<24} fixtures {:>2}  max rel. error {:.2e}", g.name, g.fixtures, g.max_rel_error);
    }
    let worst = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let pass = groups.iter().all(|g| g.max_rel_error < gradients::TOLERANCE && g.fixtures >= 3);
    Check {
        pass,
        detail: format!(
            "{} groups over 3 seeds, worst max rel. error {worst:.2e} (< {:e}, ε = {:e})",
            groups.len(),
            gradients::TOLERANCE,
            gradients::EPSILON
        ),
    }
}

fn study_criteria(board: &mut Board) {
    let start = Instant::now();
    let results = study::run_all();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let seeds = || results.iter();

    board.line(
        "5a",
        seeds().all(|r| r.cross_accuracy >= CROSS_ACCURACY_MIN),
        format!("cross-modality pair accuracy per seed [{}] (≥ {CROSS_ACCURACY_MIN})", list(seeds().map(|r| r.cross_accuracy))),
    );
    board.line(
        "5b",
        seeds().all(|r| r.positive_mpd + r.positive_std < r.negative_mpd),
        format!(
            "positive mPD + std < negative mPD per seed [{}]",
            seeds().map(|r| format!("{:.3} < {:.3}", r.positive_mpd + r.positive_std, r.negative_mpd)).collect::<Vec<_>>().join(", ")
        ),
    );
    board.line(
        "5c",
        seeds().all(|r| r.probe_3d >= PROBE_3D_MIN),
        format!("3D linear probe per seed [{}] (≥ {PROBE_3D_MIN})", list(seeds().map(|r| r.probe_3d))),
    );
    let (m1, m8) = (mean(seeds().map(|r| r.probe_2d_v1)), mean(seeds().map(|r| r.probe_2d_v8)));
    board.line(
        "5d",
        seeds().all(|r| r.probe_2d_v8 >= r.probe_2d_v1 - MULTIVIEW_SLACK) && m8 > m1,
        format!(
            "2D probe v=1 [{}] v=8 [{}] (v8 ≥ v1 − {MULTIVIEW_SLACK} per seed); means {m1:.3} → {m8:.3} (strictly greater)",
            list(seeds().map(|r| r.probe_2d_v1)),
            list(seeds().map(|r| r.probe_2d_v8))
        ),
    );
    board.line(
        "5e",
        seeds().all(|r| r.topk[0] >= TOP1_MIN && r.topk.windows(2).all(|w| w[0] <= w[1])),
        format!(
            "retrieval top-{:?} per seed [{}] (top-1 ≥ {TOP1_MIN}, nondecreasing in k)",
            study::TOPK,
            seeds().map(|r| format!("[{}]", list(r.topk.iter().copied()))).collect::<Vec<_>>().join(", ")
        ),
    );
    let seg = |i: usize| mean(seeds().map(|r| r.seg_miou[i]));
    let (unfrozen, frozen, random_frozen, scratch, unfrozen_10, scratch_10) = (seg(0), seg(1), seg(2), seg(3), seg(4), seg(5));
    let (gap_full, gap_low) = (unfrozen - scratch, unfrozen_10 - scratch_10);
    board.line(
        "5f",
        unfrozen >= frozen && frozen >= random_frozen && unfrozen >= UNFROZEN_MIOU_MIN && gap_low >= gap_full - LOW_DATA_SLACK,
        format!(
            "seed-mean instance mIoU unfrozen {unfrozen:.3} ≥ frozen {frozen:.3} ≥ random-frozen {random_frozen:.3}, unfrozen ≥ {UNFROZEN_MIOU_MIN}; \
             unfrozen − scratch gap at 10% {gap_low:.3} ≥ gap at 100% {gap_full:.3} − {LOW_DATA_SLACK} (scratch {scratch:.3}, 10%: unfrozen {unfrozen_10:.3} scratch {scratch_10:.3})"
        ),
    );
    board.line("5", minutes < STUDY_BUDGET_MIN, format!("toy study runtime {minutes:.1} min (< {STUDY_BUDGET_MIN} min)"));

    // margin sweep, reported only
    let alt = study::run_seed(study::SEEDS[0], &[("margin", "0.5")], false);
    let base = &results[0];
    println!(
        "INFO 5 margin sweep seed {}: α=1.0 cross-modality {:.3}, 3D probe {:.3}, top-1 {:.3}; α=0.5 cross-modality {:.3}, 3D probe {:.3}, top-1 {:.3}",
        base.seed, base.cross_accuracy, base.probe_3d, base.topk[0], alt.cross_accuracy, alt.probe_3d, alt.topk[0]
    );
}

fn main() {
    let only: Option<Vec<String>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let mut board = Board { lines: Vec::new() };

    if wanted("1") {
        board.timed("1", "gradient checks", Some(GRADIENT_BUDGET_MIN), gradient_criterion);
    }
    if wanted("2") {
        board.timed("2", "geometry oracles", Some(GEOMETRY_BUDGET_MIN), properties::geometry);
    }
    if wanted("3") {
        board.timed("3", "renderer analytics", Some(RENDER_BUDGET_MIN), properties::renderer);
    }
    if wanted("4") {
        board.timed("4", "loss identities", Some(LOSS_BUDGET_MIN), properties::losses);
    }
    if wanted("6") {
        board.timed("6", "determinism", Some(DETERMINISM_BUDGET_MIN), properties::determinism);
    }
    if wanted("7") {
        board.timed("7", "joint gradient structure", None, properties::gradient_structure);
    }
    if wanted("5") {
        study_criteria(&mut board);
    }

    let failed: Vec<&str> = board.lines.iter().filter(|(_, p)| !p).map(|(id, _)| id.as_str()).collect();
    println!("acceptance: {} of {} criteria passed{}", board.lines.len() - failed.len(), board.lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) });
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
