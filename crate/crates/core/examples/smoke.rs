//! Quick calibration run: step timing, source-only learnability, and the
//! pre-adaptation source->target drop on the toy benchmark.

use etm_core::data::{etm_toy_domains, DomainData};
use etm_core::trainer::{evaluate_domain, train_source_only, TrainConfig};
use std::time::Instant;

fn main() {
    let specs = etm_toy_domains();
    let t0 = Instant::now();
    let domains: Vec<DomainData> = specs
        .iter()
        .map(|s| DomainData::generate(s, 42).unwrap())
        .collect();
    println!("data generation: {:.2?}", t0.elapsed());

    let cfg = TrainConfig {
        iter_max: std::env::args()
            .nth(1)
            .and_then(|a| a.parse().ok())
            .unwrap_or(1000),
        seed: 7,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let run = train_source_only(&cfg, &domains[0]).unwrap();
    let dt = t1.elapsed();
    println!(
        "source-only {} iters: {:.2?} ({:.1} ms/step)",
        cfg.iter_max,
        dt,
        dt.as_secs_f64() * 1e3 / cfg.iter_max as f64
    );
    let n = run.loss_trace.len();
    println!(
        "loss first/mid/last windows: {:.4} {:.4} {:.4}",
        run.loss_trace[..50.min(n)].iter().sum::<f32>() / 50.0f32.min(n as f32),
        run.loss_trace[n / 2..(n / 2 + 50).min(n)].iter().sum::<f32>() / 50.0,
        run.loss_trace[n.saturating_sub(50)..].iter().sum::<f32>() / 50.0
    );
    for d in &domains {
        let t2 = Instant::now();
        let (_, miou) = evaluate_domain(&run.segnet, None, &d.val, 8).unwrap();
        println!(
            "eval {:>12}: mIoU {:.4} ({:.2?})",
            d.name(),
            miou,
            t2.elapsed()
        );
    }
}
