//! Scene rendering and shift operators for the synthetic benchmark.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DataError, DataResult, DomainDataset, DomainRole, DomainSpec, Split};
use crate::nn::rng::substream;
use crate::nn::thread_pool;

const PLACEMENT_ATTEMPTS: usize = 100;
const BG_TEXTURE_AMP: f32 = 0.25;
const SHAPE_TEXTURE_AMP: f32 = 0.10;

/// Generate one split of a domain. Labels are kept for the source domain and
/// for validation splits; target training data stays unlabeled.
pub fn generate_domain(spec: &DomainSpec, seed: u64, split: Split) -> DataResult<DomainDataset> {
    spec.validate()?;
    let n = match split {
        Split::Train => spec.train_samples,
        Split::Val => spec.val_samples,
    };
    let (h, w) = spec.image_size;
    let (scene_tag, shift_tag) = match split {
        Split::Train => ("scene-train", "shift-train"),
        Split::Val => ("scene-val", "shift-val"),
    };
    let results: Vec<DataResult<(Vec<f32>, Vec<u8>)>> = thread_pool().install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut scene_rng = substream(seed, scene_tag, i as u64);
                let mut shift_rng = substream(seed, shift_tag, i as u64);
                let scene = render_scene(spec, &mut scene_rng)?;
                let image = render_image(spec, &scene, &mut shift_rng);
                Ok((image, scene.labels))
            })
            .collect()
    });
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let keep_labels = spec.role == DomainRole::Source || split == Split::Val;
    let mut labels = keep_labels.then(|| Vec::with_capacity(n * h * w));
    for r in results {
        let (img, lbl) = r?;
        images.extend_from_slice(&img);
        if let Some(l) = &mut labels {
            l.extend_from_slice(&lbl);
        }
    }
    DomainDataset::from_parts(
        spec.name.clone(),
        spec.role,
        split,
        spec.class_count,
        h,
        w,
        images,
        labels,
    )
}

struct Scene {
    labels: Vec<u8>,
    /// Per-pixel brightness factor (background texture and shape shading).
    shade: Vec<f32>,
}

fn render_scene(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> DataResult<Scene> {
    let (h, w) = spec.image_size;
    let mut labels = vec![0u8; h * w];

    // Smooth background texture: a coarse value-noise grid, bilinearly
    // interpolated up to the canvas.
    let grid = 8usize;
    let coarse: Vec<f32> = (0..(grid + 1) * (grid + 1))
        .map(|_| rng.random_range(0.0f32..1.0))
        .collect();
    let mut shade = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = y as f32 / h as f32 * grid as f32;
        let (gy, ty) = (fy as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 / w as f32 * grid as f32;
            let (gx, tx) = (fx as usize, fx.fract());
            let at = |yy: usize, xx: usize| coarse[yy * (grid + 1) + xx];
            let top = at(gy, gx) + tx * (at(gy, gx + 1) - at(gy, gx));
            let bot = at(gy + 1, gx) + tx * (at(gy + 1, gx + 1) - at(gy + 1, gx));
            let t = top + ty * (bot - top);
            shade[y * w + x] = 1.0 + BG_TEXTURE_AMP * (t - 0.5);
        }
    }

    // 1-4 shapes; classes dealt distinct-first so every class appears when
    // the count allows it.
    let shape_classes = spec.class_count - 1;
    let min_shapes = shape_classes.min(4);
    let count = rng.random_range(min_shapes..=4.max(min_shapes));
    let mut deal: Vec<u8> = (1..spec.class_count as u8).collect();
    for i in (1..deal.len()).rev() {
        let j = rng.random_range(0..=i);
        deal.swap(i, j);
    }
    while deal.len() < count {
        deal.push(rng.random_range(1..spec.class_count as u8));
    }
    deal.truncate(count);

    for class in deal {
        place_shape(spec, rng, class, &mut labels, &mut shade)?;
    }
    Ok(Scene { labels, shade })
}

fn place_shape(
    spec: &DomainSpec,
    rng: &mut ChaCha8Rng,
    class: u8,
    labels: &mut [u8],
    shade: &mut [f32],
) -> DataResult<()> {
    let (h, w) = spec.image_size;
    let min_side = (h.min(w) / 4).max(6);
    let max_side = (h.min(w) * 2 / 5).max(min_side + 1);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let size = rng.random_range(min_side..=max_side) as f32;
        let cx = rng.random_range(0.0f32..w as f32);
        let cy = rng.random_range(0.0f32..h as f32);
        let half = size / 2.0;
        // Shapes overflowing the canvas are re-sampled.
        if cx - half < 0.0 || cx + half >= w as f32 || cy - half < 0.0 || cy + half >= h as f32 {
            continue;
        }
        let shape_shade = rng.random_range(0.85f32..1.15);
        let inside = shape_mask(class, half);
        let (x0, x1) = ((cx - half) as usize, (cx + half).ceil() as usize);
        let (y0, y1) = ((cy - half) as usize, (cy + half).ceil() as usize);
        for y in y0..=y1.min(h - 1) {
            for x in x0..=x1.min(w - 1) {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                if inside(dx, dy) {
                    let idx = y * w + x;
                    labels[idx] = class;
                    let tex = shade[idx] - 1.0;
                    shade[idx] = shape_shade * (1.0 + SHAPE_TEXTURE_AMP / BG_TEXTURE_AMP * tex);
                }
            }
        }
        return Ok(());
    }
    Err(DataError::Placement {
        attempts: PLACEMENT_ATTEMPTS,
    })
}

/// Membership test for the class's shape, centered at the origin.
fn shape_mask(class: u8, half: f32) -> Box<dyn Fn(f32, f32) -> bool> {
    match (class as usize - 1) % super::MAX_SHAPE_CLASSES {
        // Circle
        0 => Box::new(move |dx, dy| dx * dx + dy * dy <= half * half),
        // Square
        1 => Box::new(move |dx, dy| dx.abs() <= half && dy.abs() <= half),
        // Upward triangle
        2 => Box::new(move |dx, dy| {
            dy >= -half && dy <= half && dx.abs() <= half * (dy + half) / (2.0 * half)
        }),
        // Diamond
        3 => Box::new(move |dx, dy| dx.abs() + dy.abs() <= half),
        // Cross
        4 => Box::new(move |dx, dy| {
            (dx.abs() <= half / 3.0 || dy.abs() <= half / 3.0)
                && dx.abs() <= half
                && dy.abs() <= half
        }),
        // Ellipse
        _ => Box::new(move |dx, dy| {
            let a = half;
            let b = half * 0.6;
            (dx / a) * (dx / a) + (dy / b) * (dy / b) <= 1.0
        }),
    }
}

fn render_image(spec: &DomainSpec, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w) = spec.image_size;
    let px = h * w;
    let palette = &spec.shift.palette;
    let mut img = vec![0.0f32; 3 * px];

    // Palette recolor, modulated by scene shading.
    for p in 0..px {
        let color = palette[scene.labels[p] as usize];
        for ch in 0..3 {
            img[ch * px + p] = (color[ch] * scene.shade[p]).clamp(0.0, 1.0);
        }
    }

    // Image-only clutter: small random-colored dots on background pixels.
    let clutter = (spec.shift.clutter_density * px as f32 / 512.0).round() as usize;
    for _ in 0..clutter {
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        let r = rng.random_range(1..=2usize);
        let color = [
            rng.random_range(0.0f32..1.0),
            rng.random_range(0.0f32..1.0),
            rng.random_range(0.0f32..1.0),
        ];
        for y in cy.saturating_sub(r)..(cy + r + 1).min(h) {
            for x in cx.saturating_sub(r)..(cx + r + 1).min(w) {
                let p = y * w + x;
                if scene.labels[p] == 0 {
                    for ch in 0..3 {
                        img[ch * px + p] = color[ch];
                    }
                }
            }
        }
    }

    // Illumination gain.
    let gain = spec.shift.illumination_gain;
    if gain != 1.0 {
        for v in &mut img {
            *v = (*v * gain).clamp(0.0, 1.0);
        }
    }

    // Gaussian texture noise.
    let sigma = spec.shift.texture_noise_sigma;
    if sigma > 0.0 {
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(0.0f32, sigma).expect("validated sigma");
        for v in &mut img {
            *v = (*v + dist.sample(rng)).clamp(0.0, 1.0);
        }
    }

    // Box blur with clamped edges.
    let radius = spec.shift.blur_radius.round() as usize;
    if radius > 0 {
        img = box_blur(&img, h, w, radius);
        for v in &mut img {
            *v = v.clamp(0.0, 1.0);
        }
    }

    img
}

/// Separable box blur per channel, clamp-to-edge.
fn box_blur(img: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let px = h * w;
    let k = (2 * radius + 1) as f32;
    let mut tmp = vec![0.0f32; img.len()];
    let mut out = vec![0.0f32; img.len()];
    for ch in 0..3 {
        let src = &img[ch * px..(ch + 1) * px];
        let t = &mut tmp[ch * px..(ch + 1) * px];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for d in -(radius as isize)..=(radius as isize) {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    acc += src[y * w + xx];
                }
                t[y * w + x] = acc / k;
            }
        }
        let o = &mut out[ch * px..(ch + 1) * px];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for d in -(radius as isize)..=(radius as isize) {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    acc += t[yy * w + x];
                }
                o[y * w + x] = acc / k;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ShiftParams;

    fn spec() -> DomainSpec {
        DomainSpec {
            name: "gen".into(),
            role: DomainRole::Source,
            shift: ShiftParams {
                palette: vec![
                    [0.5, 0.5, 0.5],
                    [0.8, 0.2, 0.2],
                    [0.2, 0.8, 0.2],
                    [0.2, 0.2, 0.8],
                ],
                texture_noise_sigma: 0.05,
                blur_radius: 1.0,
                illumination_gain: 1.1,
                clutter_density: 2.0,
            },
            image_size: (32, 32),
            class_count: 4,
            train_samples: 16,
            val_samples: 4,
        }
    }

    #[test]
    fn identical_spec_and_seed_is_bit_identical() {
        let a = generate_domain(&spec(), 42, Split::Train).unwrap();
        let b = generate_domain(&spec(), 42, Split::Train).unwrap();
        assert_eq!(a.image(3), b.image(3));
        assert_eq!(a.label(3), b.label(3));
        let c = generate_domain(&spec(), 43, Split::Train).unwrap();
        assert_ne!(a.image(3), c.image(3));
    }

    #[test]
    fn shift_changes_never_alter_labels() {
        let base = spec();
        let mut shifted = spec();
        shifted.shift = ShiftParams {
            palette: vec![
                [0.1, 0.9, 0.3],
                [0.3, 0.3, 0.9],
                [0.9, 0.8, 0.1],
                [0.6, 0.1, 0.6],
            ],
            texture_noise_sigma: 0.2,
            blur_radius: 2.0,
            illumination_gain: 0.6,
            clutter_density: 8.0,
        };
        let a = generate_domain(&base, 7, Split::Train).unwrap();
        let b = generate_domain(&shifted, 7, Split::Train).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.label(i), b.label(i), "labels differ at image {i}");
        }
        assert_ne!(a.image(0), b.image(0));
    }

    #[test]
    fn pixels_stay_in_unit_range_under_aggressive_shifts() {
        let mut s = spec();
        s.shift.texture_noise_sigma = 0.5;
        s.shift.illumination_gain = 3.0;
        s.shift.blur_radius = 3.0;
        let ds = generate_domain(&s, 1, Split::Train).unwrap();
        for i in 0..ds.len() {
            assert!(ds.image(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn every_class_appears_in_at_least_ninety_percent_of_images() {
        let mut s = spec();
        s.train_samples = 200;
        s.shift.blur_radius = 0.0;
        let ds = generate_domain(&s, 11, Split::Train).unwrap();
        let (_, presence) = ds.label_histogram().unwrap();
        for (c, &count) in presence.iter().enumerate().skip(1) {
            assert!(
                count as f64 >= 0.9 * ds.len() as f64,
                "class {c} appears in only {count}/{} images",
                ds.len()
            );
        }
    }

    #[test]
    fn target_train_split_is_unlabeled_val_is_labeled() {
        let mut s = spec();
        s.role = DomainRole::Target;
        let train = generate_domain(&s, 3, Split::Train).unwrap();
        let val = generate_domain(&s, 3, Split::Val).unwrap();
        assert!(!train.has_labels());
        assert!(val.has_labels());
    }

    #[test]
    fn train_and_val_draw_different_scenes() {
        let s = spec();
        let train = generate_domain(&s, 3, Split::Train).unwrap();
        let val = generate_domain(&s, 3, Split::Val).unwrap();
        assert_ne!(train.image(0), val.image(0));
    }
}
