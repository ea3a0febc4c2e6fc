//! Temporary diagnostic probe for the directional benchmark.

use hisop_core::config::RunConfig;
use hisop_core::pipeline::{run_benchmark, BENCHMARK_SEEDS};

#[test]
#[ignore]
fn benchmark_details() {
    let mut base = RunConfig::default_benchmark();
    base.threads = 4;
    let outcome = run_benchmark(&base, &BENCHMARK_SEEDS, None).unwrap();
    for m in &outcome.margins {
        println!(
            "seed {:2}: aligned {:.4}  shuffled {:.4} ({:+.4})  ablated {:.4} ({:+.4})",
            m.seed,
            m.aligned_miou,
            m.shuffled_miou,
            m.margin_over_shuffled(),
            m.ablated_miou,
            m.margin_over_ablated()
        );
    }
    println!(
        "wins: shuffled {}/10, ablated {}/10",
        outcome.aligned_wins_over_shuffled(),
        outcome.aligned_wins_over_ablated()
    );
    for r in &outcome.reports {
        if r.run_id.contains("seed000") || r.run_id.contains("seed001") {
            println!(
                "{}: iou {:.4} miou {:.4} l_depth {:.3} l_ce {:.3} dropped {}",
                r.run_id, r.iou, r.miou, r.l_depth, r.l_ce, r.dropped_count
            );
        }
    }
}
