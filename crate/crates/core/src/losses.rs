//! Training objectives.
//!
//! The double-hinge pair drives adversarial alignment: the discriminator
//! minimizes hinge margins toward +1 on source scores and -1 on target scores,
//! while the generator minimizes the gated score difference `(z_s - z_t)+`,
//! which pulls target features toward source and pushes source toward target
//! with equal and opposite force, and goes silent once the sides cross.
//! GAN (sigmoid BCE) and geometric-GAN baselines cover the loss ablation.
//!
//! Reductions: the hinge losses and the geometric-GAN generator loss sum over
//! the score map and average over the batch; cross-entropy, distillation and
//! the GAN BCE losses are per-pixel means.

use std::rc::Rc;

use crate::nn::{Graph, LabelMap, NnError, NnResult, Tensor, Var};

/// Which adversarial pair trains the generator and discriminators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AdversarialKind {
    #[serde(rename = "DHA", alias = "dha")]
    Dha,
    #[serde(rename = "GAN", alias = "gan")]
    Gan,
    #[serde(rename = "GeoGAN", alias = "geogan")]
    GeoGan,
}

/// Per-level loss weights and the distillation temperature.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: [f32; 2],
    pub adv: [f32; 2],
    pub distill: [f32; 2],
    pub temperature: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: [0.1, 1.0],
            adv: [0.0002, 0.001],
            distill: [0.02, 0.2],
            temperature: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> NnResult<()> {
        let all = self.seg.iter().chain(&self.adv).chain(&self.distill);
        for v in all {
            if !v.is_finite() || *v < 0.0 {
                return Err(NnError::BadConfig {
                    op: "LossWeights",
                    reason: format!("weights must be finite and non-negative, got {v}"),
                });
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(NnError::BadConfig {
                op: "LossWeights",
                reason: format!("temperature must be positive, got {}", self.temperature),
            });
        }
        Ok(())
    }
}

/// Per-level loss values from one alternating step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBundle {
    pub seg: [f32; 2],
    pub adv: [f32; 2],
    pub distill: [f32; 2],
    pub disc: [f32; 2],
    pub weighted_total_generator: f32,
}

impl LossBundle {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let checks: [(&'static str, &[f32; 2]); 4] = [
            ("seg", &self.seg),
            ("adv", &self.adv),
            ("distill", &self.distill),
            ("disc", &self.disc),
        ];
        for (name, vals) in checks {
            if !vals.iter().all(|v| v.is_finite()) {
                return Some(name);
            }
        }
        if !self.weighted_total_generator.is_finite() {
            return Some("weighted_total_generator");
        }
        None
    }

    /// The generator objective recombined from parts; must equal
    /// `weighted_total_generator` up to float rounding.
    pub fn recombined_total(&self, w: &LossWeights) -> f32 {
        (0..2)
            .map(|n| {
                w.seg[n] * self.seg[n] + w.adv[n] * self.adv[n] + w.distill[n] * self.distill[n]
            })
            .sum()
    }
}

fn batch_of(shape: &[usize]) -> usize {
    if shape.len() >= 3 {
        shape[0]
    } else {
        1
    }
}

fn check_same_shape(op: &'static str, g: &Graph, a: Var, b: Var) -> NnResult<()> {
    if g.shape(a) != g.shape(b) {
        return Err(NnError::ShapeMismatch {
            op,
            expected: format!("{:?}", g.shape(a)),
            got: format!("{:?}", g.shape(b)),
        });
    }
    Ok(())
}

/// Hinge discriminator loss: sum over the map of `(1 - z_s)+ + (1 + z_t)+`,
/// averaged over the batch.
pub fn dha_discriminator_loss(g: &mut Graph, z_s: Var, z_t: Var) -> NnResult<Var> {
    check_same_shape("dha_discriminator_loss", g, z_s, z_t)?;
    let inv_b = 1.0 / batch_of(g.shape(z_s)) as f32;
    let neg_s = g.scale(z_s, -1.0);
    let m_s = g.add_scalar(neg_s, 1.0);
    let h_s = g.relu(m_s);
    let s_term = g.sum_all(h_s);
    let m_t = g.add_scalar(z_t, 1.0);
    let h_t = g.relu(m_t);
    let t_term = g.sum_all(h_t);
    let total = g.add(s_term, t_term)?;
    Ok(g.scale(total, inv_b))
}

/// Gated generator loss: sum over the map of `(z_s - z_t)+`, averaged over
/// the batch. Zero (with zero gradient) wherever source scores already sit at
/// or below target scores.
pub fn dha_adversarial_loss(g: &mut Graph, z_s: Var, z_t: Var) -> NnResult<Var> {
    check_same_shape("dha_adversarial_loss", g, z_s, z_t)?;
    let inv_b = 1.0 / batch_of(g.shape(z_s)) as f32;
    let diff = g.sub(z_s, z_t)?;
    let gated = g.relu(diff);
    let total = g.sum_all(gated);
    Ok(g.scale(total, inv_b))
}

/// Mean cross-entropy over non-ignored pixels. Logits must already be at
/// label resolution (the trainer resizes bilinearly before calling).
pub fn segmentation_loss(
    g: &mut Graph,
    logits: Var,
    labels: &Rc<LabelMap>,
    ignore: u8,
) -> NnResult<Var> {
    g.cross_entropy_mean(logits, labels, ignore)
}

/// Soft-target distillation: per pixel, soften both logit vectors with
/// `softmax(. / T')` and take the cross-entropy of the new prediction under
/// the old distribution; returned as the mean over pixels.
pub fn distillation_loss(
    g: &mut Graph,
    logits_new: Var,
    logits_old: Var,
    temperature: f32,
) -> NnResult<Var> {
    check_same_shape("distillation_loss", g, logits_new, logits_old)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(NnError::BadConfig {
            op: "distillation_loss",
            reason: format!("temperature must be positive, got {temperature}"),
        });
    }
    let s = g.shape(logits_new);
    if s.len() != 4 {
        return Err(NnError::ShapeMismatch {
            op: "distillation_loss",
            expected: "[B,C,H,W]".into(),
            got: format!("{s:?}"),
        });
    }
    let pixels = (s[0] * s[2] * s[3]) as f32;
    let inv_t = 1.0 / temperature;
    let old_soft = g.scale(logits_old, inv_t);
    let p_old = g.softmax_classes(old_soft)?;
    let new_soft = g.scale(logits_new, inv_t);
    let log_p_new = g.log_softmax_classes(new_soft)?;
    let prod = g.mul(p_old, log_p_new)?;
    let total = g.sum_all(prod);
    Ok(g.scale(total, -1.0 / pixels))
}

/// Generator-side adversarial loss for the configured kind.
pub fn adversarial_loss(g: &mut Graph, kind: AdversarialKind, z_s: Var, z_t: Var) -> NnResult<Var> {
    check_same_shape("adversarial_loss", g, z_s, z_t)?;
    match kind {
        AdversarialKind::Dha => dha_adversarial_loss(g, z_s, z_t),
        // BCE(z_t -> 1) = mean softplus(-z_t): fool the discriminator on target.
        AdversarialKind::Gan => {
            let neg_t = g.scale(z_t, -1.0);
            let sp = g.softplus(neg_t);
            Ok(g.mean_all(sp))
        }
        // Geometric GAN generator: -sum(z_t), batch-averaged.
        AdversarialKind::GeoGan => {
            let total = g.sum_all(z_t);
            Ok(g.scale(total, -1.0 / batch_of(g.shape(z_t)) as f32))
        }
    }
}

/// Discriminator-side loss for the configured kind.
pub fn discriminator_loss(
    g: &mut Graph,
    kind: AdversarialKind,
    z_s: Var,
    z_t: Var,
) -> NnResult<Var> {
    check_same_shape("discriminator_loss", g, z_s, z_t)?;
    match kind {
        // Geometric GAN shares the hinge discriminator.
        AdversarialKind::Dha | AdversarialKind::GeoGan => dha_discriminator_loss(g, z_s, z_t),
        // BCE(z_s -> 1) + BCE(z_t -> 0), per-pixel means.
        AdversarialKind::Gan => {
            let neg_s = g.scale(z_s, -1.0);
            let sp_s = g.softplus(neg_s);
            let s_term = g.mean_all(sp_s);
            let sp_t = g.softplus(z_t);
            let t_term = g.mean_all(sp_t);
            g.add(s_term, t_term)
        }
    }
}

/// The (discriminator, generator) loss pair for a baseline kind.
pub fn baseline_adversarial_losses(
    g: &mut Graph,
    kind: AdversarialKind,
    z_s: Var,
    z_t: Var,
) -> NnResult<(Var, Var)> {
    let disc = discriminator_loss(g, kind, z_s, z_t)?;
    let adv = adversarial_loss(g, kind, z_s, z_t)?;
    Ok((disc, adv))
}

// ── tensor-level convenience wrappers ──────────────────────────────────────

fn eval2(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(&mut Graph, Var, Var) -> NnResult<Var>,
) -> NnResult<f32> {
    let mut g = Graph::new();
    let av = g.constant(a);
    let bv = g.constant(b);
    let out = f(&mut g, av, bv)?;
    g.scalar(out)
}

pub fn dha_discriminator_loss_value(z_s: &Tensor, z_t: &Tensor) -> NnResult<f32> {
    eval2(z_s, z_t, dha_discriminator_loss)
}

pub fn dha_adversarial_loss_value(z_s: &Tensor, z_t: &Tensor) -> NnResult<f32> {
    eval2(z_s, z_t, dha_adversarial_loss)
}

pub fn distillation_loss_value(new: &Tensor, old: &Tensor, temperature: f32) -> NnResult<f32> {
    eval2(new, old, |g, a, b| distillation_loss(g, a, b, temperature))
}

pub fn segmentation_loss_value(logits: &Tensor, labels: &LabelMap, ignore: u8) -> NnResult<f32> {
    let labels = Rc::new(labels.clone());
    let mut g = Graph::new();
    let lv = g.constant(logits);
    let out = segmentation_loss(&mut g, lv, &labels, ignore)?;
    g.scalar(out)
}

pub fn baseline_adversarial_loss_values(
    kind: AdversarialKind,
    z_s: &Tensor,
    z_t: &Tensor,
) -> NnResult<(f32, f32)> {
    let mut g = Graph::new();
    let sv = g.constant(z_s);
    let tv = g.constant(z_t);
    let (d, a) = baseline_adversarial_losses(&mut g, kind, sv, tv)?;
    Ok((g.scalar(d)?, g.scalar(a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_gradcheck, Param};

    fn t2(rows: usize, cols: usize, vals: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], vals.to_vec()).unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::nn::rng::substream(seed, "loss-test", 0);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn dha_discriminator_examples() {
        // Margins satisfied.
        let v = dha_discriminator_loss_value(&t2(1, 1, &[2.0]), &t2(1, 1, &[-2.0])).unwrap();
        assert!(v.abs() < 1e-7);
        // Boundary: 1 + 1.
        let v = dha_discriminator_loss_value(&t2(1, 1, &[0.0]), &t2(1, 1, &[0.0])).unwrap();
        assert!((v - 2.0).abs() < 1e-7);
        // Elementwise hinge arithmetic, summed over the map.
        let v = dha_discriminator_loss_value(&t2(1, 2, &[0.5, 1.5]), &t2(1, 2, &[-0.5, -1.5]))
            .unwrap();
        assert!((v - 1.0).abs() < 1e-7);
    }

    #[test]
    fn dha_adversarial_examples() {
        let z = randn(&[3, 4], 1);
        let v = dha_adversarial_loss_value(&z, &z).unwrap();
        assert_eq!(v, 0.0);
        let v = dha_adversarial_loss_value(&t2(1, 1, &[3.0]), &t2(1, 1, &[1.0])).unwrap();
        assert!((v - 2.0).abs() < 1e-7);
        // Gated region: zero value and identically zero gradients.
        let zs = Param::new("zs", t2(1, 1, &[1.0]));
        let zt = Param::new("zt", t2(1, 1, &[3.0]));
        let mut g = Graph::new();
        let sv = g.param(&zs);
        let tv = g.param(&zt);
        let loss = dha_adversarial_loss(&mut g, sv, tv).unwrap();
        assert_eq!(g.scalar(loss).unwrap(), 0.0);
        g.backward(loss).unwrap();
        assert_eq!(zs.borrow().grad().unwrap(), &[0.0]);
        assert_eq!(zt.borrow().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn dha_batch_average_spatial_sum() {
        // [2,1,1,2] batch of two identical maps: batch mean equals one map's sum.
        let zs = Tensor::new(vec![2, 1, 1, 2], vec![0.5, 1.5, 0.5, 1.5]).unwrap();
        let zt = Tensor::new(vec![2, 1, 1, 2], vec![-0.5, -1.5, -0.5, -1.5]).unwrap();
        let v = dha_discriminator_loss_value(&zs, &zt).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn segmentation_loss_examples() {
        // Strongly peaked on the correct class: loss under 1e-6.
        let mut logits = Tensor::zeros(&[1, 3, 2, 2]);
        let labels = LabelMap::new(vec![1, 2, 2], vec![0, 1, 2, 0]).unwrap();
        for (p, &lbl) in labels.data().iter().enumerate() {
            logits.data_mut()[lbl as usize * 4 + p] = 100.0;
        }
        let v = segmentation_loss_value(&logits, &labels, 255).unwrap();
        assert!(v < 1e-6, "peaked loss {v}");

        // Uniform logits, C=4: ln 4.
        let logits = Tensor::zeros(&[1, 4, 2, 2]);
        let labels = LabelMap::new(vec![1, 2, 2], vec![3, 0, 1, 2]).unwrap();
        let v = segmentation_loss_value(&logits, &labels, 255).unwrap();
        assert!((v - 1.386_294_4).abs() < 1e-6);

        // Degenerate input: everything ignored.
        let labels = LabelMap::new(vec![1, 2, 2], vec![255; 4]).unwrap();
        assert!(matches!(
            segmentation_loss_value(&logits, &labels, 255),
            Err(NnError::NoValidPixels)
        ));

        // Out-of-range label.
        let labels = LabelMap::new(vec![1, 2, 2], vec![0, 9, 0, 0]).unwrap();
        assert!(matches!(
            segmentation_loss_value(&logits, &labels, 255),
            Err(NnError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn distillation_examples() {
        // Identical all-zero logits, C=2: per-pixel loss is the uniform entropy ln 2.
        let z = Tensor::zeros(&[1, 2, 3, 3]);
        let v = distillation_loss_value(&z, &z, 2.0).unwrap();
        assert!((v - 0.693_147_2).abs() < 1e-6);

        // Identical (2, 0) logits at T' = 2 soften to sigma(1) = (0.7311, 0.2689);
        // the loss equals that distribution's entropy, 0.5822031 (f64 oracle).
        let mut z = Tensor::zeros(&[1, 2, 1, 1]);
        z.data_mut()[0] = 2.0;
        let v = distillation_loss_value(&z, &z, 2.0).unwrap();
        assert!((v - 0.582_203_1).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn distillation_reaches_entropy_floor_under_descent() {
        // Gibbs: min over new logits is attained when softened distributions
        // match, at the teacher's softened entropy.
        use crate::nn::{sgd_step, ParameterGroup, SgdState};
        let old = randn(&[1, 4, 2, 2], 7);
        // Teacher's softened entropy floor, f64.
        let mut floor = 0.0f64;
        for p in 0..4 {
            let logits: Vec<f64> = (0..4).map(|c| old.data()[c * 4 + p] as f64 / 2.0).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let h: f64 = logits
                .iter()
                .map(|l| {
                    let pr = (l - m).exp() / z;
                    -pr * pr.ln()
                })
                .sum();
            floor += h / 4.0;
        }
        let student = Param::new("student", Tensor::zeros(&[1, 4, 2, 2]));
        let group = ParameterGroup::new("g", vec![student.clone()], 1.0).unwrap();
        let mut state = SgdState::new(&group, 0.0, 0.0).unwrap();
        let mut last = f32::INFINITY;
        for _ in 0..4000 {
            group.clear_grads();
            let mut g = Graph::new();
            let sv = g.param(&student);
            let ov = g.constant(&old);
            let loss = distillation_loss(&mut g, sv, ov, 2.0).unwrap();
            last = g.scalar(loss).unwrap();
            g.backward(loss).unwrap();
            sgd_step(&group, &mut state, 8.0).unwrap();
        }
        assert!(
            (last as f64 - floor).abs() < 1e-4,
            "final {last} vs floor {floor}"
        );
    }

    #[test]
    fn gibbs_inequality_against_teacher_entropy() {
        for seed in 0..8 {
            let old = randn(&[1, 3, 2, 2], 100 + seed);
            let new = randn(&[1, 3, 2, 2], 200 + seed);
            let cross = distillation_loss_value(&new, &old, 2.0).unwrap();
            let floor = distillation_loss_value(&old, &old, 2.0).unwrap();
            assert!(cross >= floor - 1e-6, "{cross} < {floor}");
        }
    }

    #[test]
    fn gan_baseline_examples() {
        let z = Tensor::zeros(&[1, 1, 2, 2]);
        let (disc, adv) = baseline_adversarial_loss_values(AdversarialKind::Gan, &z, &z).unwrap();
        assert!((disc - 1.386_294_4).abs() < 1e-6); // 2 ln 2 per pixel
        assert!((adv - 0.693_147_2).abs() < 1e-6);
    }

    #[test]
    fn geogan_baseline_examples() {
        let zt = t2(1, 1, &[1.5]);
        let zs = t2(1, 1, &[0.0]);
        let (_, adv) =
            baseline_adversarial_loss_values(AdversarialKind::GeoGan, &zs, &zt).unwrap();
        assert!((adv + 1.5).abs() < 1e-7);
        // Shared definition with the hinge discriminator: exact equality.
        for seed in 0..4 {
            let a = randn(&[2, 1, 3, 3], 300 + seed);
            let b = randn(&[2, 1, 3, 3], 400 + seed);
            let (geo_disc, _) =
                baseline_adversarial_loss_values(AdversarialKind::GeoGan, &a, &b).unwrap();
            let dha = dha_discriminator_loss_value(&a, &b).unwrap();
            assert_eq!(geo_disc.to_bits(), dha.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(dha_discriminator_loss_value(&a, &b).is_err());
        assert!(dha_adversarial_loss_value(&a, &b).is_err());
    }

    #[test]
    fn adversarial_gradients_are_antisymmetric_where_active() {
        let zs_t = randn(&[4, 4], 31);
        let mut zt_t = randn(&[4, 4], 32);
        // Push half the entries into the active region.
        for (i, v) in zt_t.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v -= 3.0;
            }
        }
        let zs = Param::new("zs", zs_t);
        let zt = Param::new("zt", zt_t);
        let mut g = Graph::new();
        let sv = g.param(&zs);
        let tv = g.param(&zt);
        let loss = dha_adversarial_loss(&mut g, sv, tv).unwrap();
        g.backward(loss).unwrap();
        let zs_ref = zs.borrow();
        let zt_ref = zt.borrow();
        let gs = zs_ref.grad().unwrap();
        let gt = zt_ref.grad().unwrap();
        let mut active = 0;
        for (a, b) in gs.iter().zip(gt) {
            assert_eq!(*a, -*b);
            if *a != 0.0 {
                active += 1;
            }
        }
        assert!(active > 0);
    }

    #[test]
    fn translation_invariance_of_adversarial_loss() {
        for seed in 0..6 {
            let zs = randn(&[3, 5], 500 + seed);
            let zt = randn(&[3, 5], 600 + seed);
            let base = dha_adversarial_loss_value(&zs, &zt).unwrap();
            for c in [-2.5f32, 0.75, 10.0] {
                let shift = |t: &Tensor| {
                    let mut s = t.clone();
                    for v in s.data_mut() {
                        *v += c;
                    }
                    s
                };
                let shifted = dha_adversarial_loss_value(&shift(&zs), &shift(&zt)).unwrap();
                assert!(
                    (base - shifted).abs() <= 1e-5 * base.abs().max(1.0),
                    "c={c}: {base} vs {shifted}"
                );
            }
        }
    }

    #[test]
    fn zero_sets_are_exact() {
        // Discriminator loss is zero iff z_s >= 1 and z_t <= -1 elementwise.
        let zs = t2(1, 2, &[1.0, 2.0]);
        let zt = t2(1, 2, &[-1.0, -4.0]);
        assert_eq!(dha_discriminator_loss_value(&zs, &zt).unwrap(), 0.0);
        let zs_bad = t2(1, 2, &[0.999, 2.0]);
        assert!(dha_discriminator_loss_value(&zs_bad, &zt).unwrap() > 0.0);
        // Adversarial loss is zero iff z_s <= z_t elementwise.
        let a = t2(1, 2, &[0.0, -1.0]);
        let b = t2(1, 2, &[0.0, 1.0]);
        assert_eq!(dha_adversarial_loss_value(&a, &b).unwrap(), 0.0);
        assert!(dha_adversarial_loss_value(&b, &a).unwrap() > 0.0);
    }

    #[test]
    fn losses_pass_gradcheck_away_from_kinks() {
        // Fixed opposite side, margins >= 0.1 by construction.
        let mut z_t = randn(&[1, 1, 3, 3], 41);
        for v in z_t.data_mut() {
            *v = v.clamp(-3.0, -0.2);
        }
        let mut point = randn(&[1, 1, 3, 3], 42);
        for v in point.data_mut() {
            if (*v - 1.0).abs() < 0.1 {
                *v = 1.2;
            }
        }
        let z_t = std::rc::Rc::new(z_t);
        let zt_ref = z_t.clone();
        let err = finite_difference_gradcheck(
            move |g, x| {
                let tv = g.constant(&zt_ref);
                dha_discriminator_loss(g, x, tv)
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "dha disc gradcheck err {err}");

        let old = randn(&[1, 4, 2, 2], 43);
        let err = finite_difference_gradcheck(
            move |g, x| {
                let ov = g.constant(&old);
                distillation_loss(g, x, ov, 2.0)
            },
            &randn(&[1, 4, 2, 2], 44),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "distill gradcheck err {err}");
    }

    #[test]
    fn non_negativity_property() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::deterministic();
        runner
            .run(
                &(
                    proptest::collection::vec(-10.0f32..10.0, 6),
                    proptest::collection::vec(-10.0f32..10.0, 6),
                ),
                |(a, b)| {
                    let zs = t2(2, 3, &a);
                    let zt = t2(2, 3, &b);
                    prop_assert!(dha_discriminator_loss_value(&zs, &zt).unwrap() >= 0.0);
                    prop_assert!(dha_adversarial_loss_value(&zs, &zt).unwrap() >= 0.0);
                    let zs4 = Tensor::new(vec![1, 1, 2, 3], a.clone()).unwrap();
                    let zt4 = Tensor::new(vec![1, 1, 2, 3], b.clone()).unwrap();
                    let (d, g) =
                        baseline_adversarial_loss_values(AdversarialKind::Gan, &zs4, &zt4)
                            .unwrap();
                    prop_assert!(d >= 0.0 && g >= 0.0);
                    Ok(())
                },
            )
            .unwrap();
    }

    #[test]
    fn weight_defaults_match_published_values() {
        let w = LossWeights::default();
        assert_eq!(w.seg, [0.1, 1.0]);
        assert_eq!(w.adv, [0.0002, 0.001]);
        assert_eq!(w.distill, [0.02, 0.2]);
        assert_eq!(w.temperature, 2.0);
        assert!(w.validate().is_ok());
        let bad = LossWeights {
            seg: [-0.1, 1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
