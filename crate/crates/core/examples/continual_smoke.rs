//! Directional calibration: ETM (TM + DHA + distillation) against the plain
//! adversarial baseline (GAN loss, no memory, no distillation) on the toy
//! benchmark. Prints per-checkpoint mIoU, forgetting, and mean mIoU.

use etm_core::data::{etm_toy_domains, DomainData};
use etm_core::losses::AdversarialKind;
use etm_core::trainer::{run_continual, TrainConfig};
use std::time::Instant;

fn main() {
    let mut args = std::env::args().skip(1);
    let iters: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1500);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);

    let specs = etm_toy_domains();
    let domains: Vec<DomainData> = specs
        .iter()
        .map(|s| DomainData::generate(s, 42).unwrap())
        .collect();
    let (source, targets) = (&domains[0], &domains[1..]);

    for seed in 0..seeds {
        for (label, cfg) in [
            (
                "etm",
                TrainConfig {
                    method: "etm".into(),
                    iter_max: iters,
                    seed: 100 + seed,
                    ..TrainConfig::default()
                },
            ),
            (
                "etm-gan",
                TrainConfig {
                    method: "etm-gan".into(),
                    iter_max: iters,
                    seed: 100 + seed,
                    adv_loss: AdversarialKind::Gan,
                    ..TrainConfig::default()
                },
            ),
            (
                "tm-only",
                TrainConfig {
                    method: "tm-only".into(),
                    iter_max: iters,
                    seed: 100 + seed,
                    adv_loss: AdversarialKind::Gan,
                    distill: false,
                    ..TrainConfig::default()
                },
            ),
            (
                "no-tm",
                TrainConfig {
                    method: "no-tm".into(),
                    iter_max: iters,
                    seed: 100 + seed,
                    use_tm: false,
                    distill: false,
                    adv_loss: AdversarialKind::Gan,
                    ..TrainConfig::default()
                },
            ),
        ] {
            let t0 = Instant::now();
            let state = run_continual(&cfg, source, targets, |_| Ok(())).unwrap();
            let h = &state.history;
            let fgt = h.forgetting(1).unwrap();
            println!(
                "seed {seed} {label:>6}: T1@1 {:.4} | src@2 {:.4} T1@2 {:.4} T2@2 {:.4} | Fgt(T1) {:+.4} | mean {:.4} | {:.1?}",
                h.get(1, 1).unwrap(),
                h.get(2, 0).unwrap(),
                h.get(2, 1).unwrap(),
                h.get(2, 2).unwrap(),
                fgt,
                h.mean_miou().unwrap(),
                t0.elapsed()
            );
        }
    }
}
