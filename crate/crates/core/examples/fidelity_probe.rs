//! Scan the one-tiny-step fidelity gap across master seeds to size the
//! fidelity lab with comfortable headroom under its pinned threshold.

use contrastlab::verify::check_surrogate_fidelity;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let horizons: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let masters: Vec<u64> = (1..=200).chain([2026]).collect();
    let mut worst = f64::INFINITY;
    let mut worst_master = 0;
    for &master in &masters {
        let report = check_surrogate_fidelity(master, &horizons);
        let gap = report
            .details
            .split("T=1 eta=1e-6: final gap ")
            .nth(1)
            .and_then(|s| s.split(' ').next())
            .and_then(|s| s.parse::<f64>().ok())
            .unwrap_or(f64::NAN);
        if gap > 5e-5 || !report.passed {
            println!(
                "master={master:<5} t1_gap={gap:.3e} worst_margin={:+.3e} passed={}",
                report.worst_margin, report.passed
            );
        }
        let margin = 1e-4 - gap;
        if margin < worst {
            worst = margin;
            worst_master = master;
        }
    }
    println!("tightest T=1 margin {worst:+.3e} at master {worst_master}");
}
