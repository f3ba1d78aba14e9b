//! Oracle ceiling: downsample GT to 8x8 by majority, upsample back, score.
use etm_core::data::{etm_toy_domains, generate_domain, Split};
use etm_core::metrics::{miou, ConfusionMatrix};

fn main() {
    let spec = &etm_toy_domains()[0];
    let ds = generate_domain(spec, 42, Split::Val).unwrap();
    let (h, w) = (ds.height, ds.width);
    for stride in [8usize, 4] {
        let (gh, gw) = (h / stride, w / stride);
        let mut cm = ConfusionMatrix::zeros(ds.class_count);
        for i in 0..ds.len() {
            let lbl = ds.label(i).unwrap();
            // majority per cell
            let mut grid = vec![0u8; gh * gw];
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut counts = [0u32; 8];
                    for y in gy * stride..(gy + 1) * stride {
                        for x in gx * stride..(gx + 1) * stride {
                            counts[lbl[y * w + x] as usize] += 1;
                        }
                    }
                    grid[gy * gw + gx] = (0..ds.class_count).max_by_key(|&c| counts[c]).unwrap() as u8;
                }
            }
            let pred: Vec<u8> = (0..h * w)
                .map(|p| grid[(p / w / stride) * gw + (p % w) / stride])
                .collect();
            cm.accumulate(&pred, lbl, 255).unwrap();
        }
        let (_, mi) = miou(&cm, true).unwrap();
        println!("stride-{stride} majority ceiling: mIoU {:.4}", mi);
    }
}
