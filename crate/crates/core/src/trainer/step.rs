//! One alternating training step: generator phase (segmentation network and
//! current memories), then discriminator phase on detached score inputs.

use std::rc::Rc;

use super::{TrainConfig, TrainError, TrainResult};
use crate::data::{Batch, IGNORE_LABEL};
use crate::losses::{
    adversarial_loss, discriminator_loss, distillation_loss, segmentation_loss, LossBundle,
};
use crate::models::{Discriminator, SegNet, TmPair};
use crate::nn::{adam_step, sgd_step, AdamState, Graph, LabelMap, ParameterGroup, SgdState, Var};

fn finite(g: &Graph, v: Var, term: &str, domain: u32, iteration: usize) -> TrainResult<f32> {
    let val = g.scalar(v)?;
    if !val.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            domain,
            iteration,
            term: term.to_string(),
        });
    }
    Ok(val)
}

fn accumulate(g: &mut Graph, total: &mut Option<Var>, term: Var, weight: f32) -> TrainResult<()> {
    let scaled = g.scale(term, weight);
    *total = Some(match *total {
        Some(t) => g.add(t, scaled)?,
        None => scaled,
    });
    Ok(())
}

/// Head logits resized to label resolution, then mean cross-entropy.
fn seg_term(
    g: &mut Graph,
    logits: Var,
    labels: &Rc<LabelMap>,
    out_hw: (usize, usize),
) -> TrainResult<Var> {
    let up = g.resize_bilinear(logits, out_hw.0, out_hw.1)?;
    Ok(segmentation_loss(g, up, labels, IGNORE_LABEL)?)
}

/// Per-domain optimizer harness. Parameter-group learning-rate rules: the
/// encoder always runs at 0.1 of the base rate; the heads run at the full
/// rate on the first target domain and at 0.1 afterwards; memories run at
/// the full rate. Discriminators train under Adam with their own loss only.
pub struct DomainTrainer<'a> {
    cfg: &'a TrainConfig,
    segnet: &'a SegNet,
    tms: Option<&'a TmPair>,
    discs: &'a (Discriminator, Discriminator),
    teacher: Option<&'a SegNet>,
    domain_number: u32,
    seg_groups: Vec<ParameterGroup>,
    seg_states: Vec<SgdState>,
    disc_groups: [ParameterGroup; 2],
    disc_states: [AdamState; 2],
    pub iteration: usize,
}

impl<'a> DomainTrainer<'a> {
    pub fn new(
        cfg: &'a TrainConfig,
        segnet: &'a SegNet,
        tms: Option<&'a TmPair>,
        discs: &'a (Discriminator, Discriminator),
        teacher: Option<&'a SegNet>,
        domain_number: u32,
    ) -> TrainResult<Self> {
        let distill_active =
            cfg.distill && domain_number > 1 && cfg.loss_weights.distill.iter().any(|&w| w > 0.0);
        if distill_active && teacher.is_none() {
            return Err(TrainError::MissingTeacher(domain_number));
        }
        let head_scale = if domain_number == 1 { 1.0 } else { 0.1 };
        let mut seg_groups = vec![
            ParameterGroup::new("encoder", segnet.encoder_params(), 0.1)?,
            ParameterGroup::new("heads", segnet.head_params(), head_scale)?,
        ];
        if let Some(pair) = tms {
            let mut params = pair.level1.params();
            params.extend(pair.level2.params());
            seg_groups.push(ParameterGroup::new("tm", params, 1.0)?);
        }
        let seg_states = seg_groups
            .iter()
            .map(|g| SgdState::new(g, cfg.momentum, cfg.weight_decay))
            .collect::<Result<Vec<_>, _>>()?;
        let disc_groups = [
            ParameterGroup::new("disc1", discs.0.params(), 1.0)?,
            ParameterGroup::new("disc2", discs.1.params(), 1.0)?,
        ];
        let disc_states = [
            AdamState::with_defaults(&disc_groups[0])?,
            AdamState::with_defaults(&disc_groups[1])?,
        ];
        Ok(Self {
            cfg,
            segnet,
            tms,
            discs,
            teacher,
            domain_number,
            seg_groups,
            seg_states,
            disc_groups,
            disc_states,
            iteration: 0,
        })
    }

    /// Group names with their learning-rate multipliers, for inspection.
    pub fn group_lr_scales(&self) -> Vec<(String, f32)> {
        self.seg_groups
            .iter()
            .map(|g| (g.name.clone(), g.lr_scale))
            .collect()
    }

    /// Bare head logits and memory-fused logits for one input.
    fn forward_with_memory(&self, g: &mut Graph, x: Var) -> TrainResult<([Var; 2], [Var; 2])> {
        let out = self.segnet.forward(g, x, true)?;
        let bare = [out.logits1, out.logits2];
        let plus = match self.tms {
            Some(pair) => {
                let t1 = pair.level1.forward(g, out.feat_mid, true)?;
                let t2 = pair.level2.forward(g, out.feat_top, true)?;
                [g.add(bare[0], t1)?, g.add(bare[1], t2)?]
            }
            None => bare,
        };
        Ok((bare, plus))
    }

    /// One alternating update; returns the per-level loss values.
    pub fn step(&mut self, batch_s: &Batch, batch_t: &Batch) -> TrainResult<LossBundle> {
        self.iteration += 1;
        let iter = self.iteration;
        let domain = self.domain_number;
        let cfg = self.cfg;
        let lw = &cfg.loss_weights;
        let labels = Rc::new(
            batch_s
                .labels
                .clone()
                .ok_or_else(|| TrainError::Config("source batch carries no labels".into()))?,
        );
        let img_shape = batch_s.images.shape();
        let out_hw = (img_shape[2], img_shape[3]);

        let mut bundle = LossBundle::default();
        let mut g = Graph::new();
        let xs = g.constant(&batch_s.images);
        let xt = g.constant(&batch_t.images);

        let (bare_s, plus_s) = self.forward_with_memory(&mut g, xs)?;
        let (_, plus_t) = self.forward_with_memory(&mut g, xt)?;

        let mut total: Option<Var> = None;

        // Segmentation terms on the fused source predictions.
        for n in 0..2 {
            if lw.seg[n] > 0.0 {
                let term = seg_term(&mut g, plus_s[n], &labels, out_hw)?;
                bundle.seg[n] = finite(&g, term, &format!("seg{}", n + 1), domain, iter)?;
                accumulate(&mut g, &mut total, term, lw.seg[n])?;
            }
        }

        // Softmax score maps; the discriminator phase consumes these even
        // when the generator's adversarial weight is zero.
        let p_s = [
            g.softmax_classes(plus_s[0])?,
            g.softmax_classes(plus_s[1])?,
        ];
        let p_t = [
            g.softmax_classes(plus_t[0])?,
            g.softmax_classes(plus_t[1])?,
        ];

        // Adversarial terms against frozen discriminators.
        for n in 0..2 {
            if lw.adv[n] > 0.0 {
                let disc = if n == 0 { &self.discs.0 } else { &self.discs.1 };
                let z_s = disc.forward(&mut g, p_s[n], false)?;
                let z_t = disc.forward(&mut g, p_t[n], false)?;
                let term = adversarial_loss(&mut g, cfg.adv_loss, z_s, z_t)?;
                bundle.adv[n] = finite(&g, term, &format!("adv{}", n + 1), domain, iter)?;
                accumulate(&mut g, &mut total, term, lw.adv[n])?;
            }
        }

        // Distillation from the frozen teacher on the bare head outputs; the
        // memory path is excluded by graph structure, not by masking.
        if cfg.distill && domain > 1 {
            let teacher = self.teacher.ok_or(TrainError::MissingTeacher(domain))?;
            let t_out = teacher.forward(&mut g, xs, false)?;
            let t_logits = [t_out.logits1, t_out.logits2];
            for n in 0..2 {
                if lw.distill[n] > 0.0 {
                    let term =
                        distillation_loss(&mut g, bare_s[n], t_logits[n], lw.temperature)?;
                    bundle.distill[n] =
                        finite(&g, term, &format!("distill{}", n + 1), domain, iter)?;
                    accumulate(&mut g, &mut total, term, lw.distill[n])?;
                }
            }
        }

        if let Some(total) = total {
            bundle.weighted_total_generator =
                finite(&g, total, "weighted_total_generator", domain, iter)?;
            g.backward(total)?;
            for (group, state) in self.seg_groups.iter().zip(self.seg_states.iter_mut()) {
                sgd_step(group, state, cfg.base_lr_seg)?;
            }
        }
        for group in &self.seg_groups {
            group.clear_grads();
        }

        // Discriminator phase: scores recomputed on detached softmax maps,
        // one loss per level, disjoint parameter sets in a single backward.
        let mut gd = Graph::new();
        let mut d_total: Option<Var> = None;
        for n in 0..2 {
            let det_s = gd.constant_owned(g.shape(p_s[n]).to_vec(), g.value(p_s[n]).to_vec());
            let det_t = gd.constant_owned(g.shape(p_t[n]).to_vec(), g.value(p_t[n]).to_vec());
            let disc = if n == 0 { &self.discs.0 } else { &self.discs.1 };
            let z_s = disc.forward(&mut gd, det_s, true)?;
            let z_t = disc.forward(&mut gd, det_t, true)?;
            let term = discriminator_loss(&mut gd, cfg.adv_loss, z_s, z_t)?;
            bundle.disc[n] = finite(&gd, term, &format!("disc{}", n + 1), domain, iter)?;
            d_total = Some(match d_total {
                Some(t) => gd.add(t, term)?,
                None => term,
            });
        }
        if let Some(d_total) = d_total {
            gd.backward(d_total)?;
            for (group, state) in self.disc_groups.iter().zip(self.disc_states.iter_mut()) {
                adam_step(group, state, cfg.base_lr_disc)?;
            }
        }
        for group in &self.disc_groups {
            group.clear_grads();
        }

        Ok(bundle)
    }
}

/// Supervised-only harness for the source-only baseline.
pub(super) struct SourceOnlyTrainer<'a> {
    cfg: &'a TrainConfig,
    segnet: &'a SegNet,
    groups: Vec<ParameterGroup>,
    states: Vec<SgdState>,
}

impl<'a> SourceOnlyTrainer<'a> {
    pub(super) fn new(cfg: &'a TrainConfig, segnet: &'a SegNet) -> TrainResult<Self> {
        let groups = vec![
            ParameterGroup::new("encoder", segnet.encoder_params(), 0.1)?,
            ParameterGroup::new("heads", segnet.head_params(), 1.0)?,
        ];
        let states = groups
            .iter()
            .map(|g| SgdState::new(g, cfg.momentum, cfg.weight_decay))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cfg,
            segnet,
            groups,
            states,
        })
    }

    pub(super) fn step(&mut self, batch: &Batch) -> TrainResult<f32> {
        let labels = Rc::new(
            batch
                .labels
                .clone()
                .ok_or_else(|| TrainError::Config("source batch carries no labels".into()))?,
        );
        let shape = batch.images.shape();
        let out_hw = (shape[2], shape[3]);
        let lw = &self.cfg.loss_weights;
        let mut g = Graph::new();
        let x = g.constant(&batch.images);
        let out = self.segnet.forward(&mut g, x, true)?;
        let logits = [out.logits1, out.logits2];
        let mut total: Option<Var> = None;
        let mut value = 0.0f32;
        for n in 0..2 {
            if lw.seg[n] > 0.0 {
                let term = seg_term(&mut g, logits[n], &labels, out_hw)?;
                value += lw.seg[n] * g.scalar(term)?;
                accumulate(&mut g, &mut total, term, lw.seg[n])?;
            }
        }
        let total =
            total.ok_or_else(|| TrainError::Config("all segmentation weights are zero".into()))?;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                domain: 0,
                iteration: 0,
                term: "seg".into(),
            });
        }
        g.backward(total)?;
        for (group, state) in self.groups.iter().zip(self.states.iter_mut()) {
            sgd_step(group, state, self.cfg.base_lr_seg)?;
        }
        for group in &self.groups {
            group.clear_grads();
        }
        Ok(value)
    }
}
