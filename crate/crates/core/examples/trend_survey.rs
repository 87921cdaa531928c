//! Median-trend survey over one axis of the coupled similarity dynamics.
//!
//! Prints the median terminal alignment (CKA) and drift for each value of
//! the chosen axis, across independently seeded runs:
//!
//! ```text
//! cargo run --release --example trend_survey -- classes --seeds 11 --eta 0.2
//! cargo run --release --example trend_survey -- tau --steps 100
//! cargo run --release --example trend_survey -- batch --eta0 0.05
//! ```

use contrastlab::coupled::{run_coupled, CoupledConfig};
use contrastlab::metrics::{centered_gram_of_state, linear_cka_from_grams};
use contrastlab::schedule::Schedule;
use contrastlab::seedstream::{derive_seed, Domain};
use rayon::prelude::*;

struct Opts {
    seeds: usize,
    eta: f64,
    tau: f64,
    steps: usize,
    batch: usize,
    per_class: usize, // 0 = 128/C policy on the classes axis
    eta0: f64,
    master: u64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_point(
    classes: usize,
    per_class: usize,
    batch: usize,
    tau: f64,
    eta: f64,
    steps: usize,
    seed: u64,
) -> (f64, f64) {
    let config = CoupledConfig {
        classes,
        per_class,
        dim: 16,
        separation: 2.0,
        noise_scale: 0.1,
        batch_size: batch,
        tau,
        steps,
        schedule: Schedule::Constant { eta },
        master_seed: seed,
    };
    let trace = run_coupled(&config).expect("run");
    let ka = centered_gram_of_state(&trace.final_cl);
    let kb = centered_gram_of_state(&trace.final_nscl);
    let cka = linear_cka_from_grams(&ka, &kb).expect("cka");
    (cka, trace.terminal_drift)
}

fn summarize(label: String, runs: Vec<(f64, f64)>) {
    let cka = median(runs.iter().map(|r| r.0).collect());
    let drift = median(runs.iter().map(|r| r.1).collect());
    println!("{label}: median cka {cka:.6}  median drift {drift:.4}");
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let axis = args.first().cloned().unwrap_or_else(|| "classes".into());
    let mut o = Opts {
        seeds: 11,
        eta: 0.1,
        tau: 0.5,
        steps: 50,
        batch: 32,
        per_class: 0,
        eta0: 0.05,
        master: 1,
    };
    let mut i = 1;
    while i + 1 < args.len() + 1 {
        if i + 1 >= args.len() {
            break;
        }
        let key = &args[i];
        let val = &args[i + 1];
        match key.as_str() {
            "--seeds" => o.seeds = val.parse().unwrap(),
            "--eta" => o.eta = val.parse().unwrap(),
            "--tau" => o.tau = val.parse().unwrap(),
            "--steps" => o.steps = val.parse().unwrap(),
            "--batch" => o.batch = val.parse().unwrap(),
            "--per-class" => o.per_class = val.parse().unwrap(),
            "--eta0" => o.eta0 = val.parse().unwrap(),
            "--master" => o.master = val.parse().unwrap(),
            other => panic!("unknown flag {other}"),
        }
        i += 2;
    }

    match axis.as_str() {
        "classes" => {
            for (ci, &c) in [2usize, 4, 8, 16, 32, 64].iter().enumerate() {
                let per_class = if o.per_class == 0 {
                    (128 / c).max(2)
                } else {
                    o.per_class
                };
                let runs: Vec<(f64, f64)> = (0..o.seeds as u64)
                    .into_par_iter()
                    .map(|s| {
                        let seed = derive_seed(o.master, Domain::Verify, 90, ci as u64, s);
                        run_point(c, per_class, o.batch, o.tau, o.eta, o.steps, seed)
                    })
                    .collect();
                summarize(format!("C={c:2} (per_class {per_class})"), runs);
            }
        }
        "tau" => {
            for (ti, &tau) in [0.1, 0.5, 1.0].iter().enumerate() {
                let per_class = if o.per_class == 0 { 13 } else { o.per_class };
                let runs: Vec<(f64, f64)> = (0..o.seeds as u64)
                    .into_par_iter()
                    .map(|s| {
                        let seed = derive_seed(o.master, Domain::Verify, 91, ti as u64, s);
                        run_point(10, per_class, o.batch, tau, o.eta, o.steps, seed)
                    })
                    .collect();
                summarize(format!("tau={tau}"), runs);
            }
        }
        "batch" => {
            for (qi, &q) in [0.0, 0.25, 0.5, 1.0].iter().enumerate() {
                for (bi, &b) in [32usize, 64, 128].iter().enumerate() {
                    let eta = o.eta0 * (b as f64 / 32.0).powf(q);
                    let per_class = if o.per_class == 0 { 26 } else { o.per_class };
                    let runs: Vec<(f64, f64)> = (0..o.seeds as u64)
                        .into_par_iter()
                        .map(|s| {
                            let seed =
                                derive_seed(o.master, Domain::Verify, 92, (qi * 8 + bi) as u64, s);
                            run_point(10, per_class, b, o.tau, eta, o.steps, seed)
                        })
                        .collect();
                    summarize(format!("q={q} B={b:3} (eta {eta:.3})"), runs);
                }
            }
        }
        other => panic!("unknown axis {other} (expected classes | tau | batch)"),
    }
}
