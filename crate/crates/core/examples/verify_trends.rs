//! Run the four qualitative-trend checks and print their reports.
//!
//! ```text
//! cargo run --release --example verify_trends -- <master_seed> [seeds]
//! ```

use contrastlab::verify::{
    trend_batch_size, trend_class_count, trend_objectives, trend_temperature,
};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let master: u64 = args.first().map_or(1, |a| a.parse().expect("seed"));
    let seeds: usize = args.get(1).map_or(11, |a| a.parse().expect("count"));
    for report in [
        trend_class_count(master, seeds),
        trend_temperature(master, seeds.max(21)),
        trend_batch_size(master, seeds),
        trend_objectives(master, seeds),
    ] {
        println!(
            "{}: passed={} worst_margin={:.3e}",
            report.name, report.passed, report.worst_margin
        );
        println!("  {}", report.details);
    }
}
