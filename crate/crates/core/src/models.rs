//! Model zoo: the two-head segmentation network, the per-domain target
//! memory, and the patch discriminator.
//!
//! Topology: a 4-block conv encoder (stride 2 on blocks 2-4) feeds two
//! ASPP-lite classifier heads, one on the mid-level features (stride 4) and
//! one on the top-level features (stride 8). Each head pairs a dilation-1 and
//! a dilation-4 conv for localization and context, then projects to class
//! logits. A target memory attaches at each head: it reads the head's input
//! features and adds a correction to the head's logits; the level-2 sum is
//! the final prediction. Discriminators score per-pixel softmax maps and
//! return raw patch scores with no squashing.

use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::nn::rng::substream;
use crate::nn::{Graph, NnError, NnResult, Param, Tensor, Var};

/// Weight initialization family for a conv layer.
#[derive(Debug, Clone, Copy)]
pub enum WeightInit {
    /// Normal(0, sqrt(2 / fan_in)).
    HeNormal,
    /// Normal(0, std).
    Normal(f32),
    Zero,
}

/// A 2-D convolution layer with bias.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        init: WeightInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let weight = match init {
            WeightInit::HeNormal => {
                let fan_in = (c_in * kernel * kernel) as f32;
                Tensor::randn(&shape, (2.0 / fan_in).sqrt(), rng)
            }
            WeightInit::Normal(std) => Tensor::randn(&shape, std, rng),
            WeightInit::Zero => Tensor::zeros(&shape),
        };
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            padding,
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> NnResult<Var> {
        let (w, b) = if trainable {
            (g.param(&self.weight), g.param(&self.bias))
        } else {
            (g.frozen_param(&self.weight), g.frozen_param(&self.bias))
        };
        let y = g.conv2d(x, w, self.stride, self.padding, self.dilation)?;
        g.bias_add(y, b)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            weight: self.weight.deep_clone(),
            bias: self.bias.deep_clone(),
            ..self.clone()
        }
    }
}

// ── segmentation network ───────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub classes: usize,
    pub in_channels: usize,
    pub encoder_channels: [usize; 4],
    pub head_channels: usize,
    pub head_dilations: (usize, usize),
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            in_channels: 3,
            encoder_channels: [32, 64, 128, 128],
            head_channels: 48,
            head_dilations: (1, 4),
        }
    }
}

impl SegNetConfig {
    /// Mid head taps after block 3 (stride 4), top head after block 4 (stride 8).
    pub const STRIDE_MID: usize = 4;
    pub const STRIDE_TOP: usize = 8;

    pub fn channels_mid(&self) -> usize {
        self.encoder_channels[2]
    }

    pub fn channels_top(&self) -> usize {
        self.encoder_channels[3]
    }

    pub fn validate(&self) -> NnResult<()> {
        if self.classes < 2 {
            return Err(NnError::BadConfig {
                op: "SegNetConfig",
                reason: format!("need at least 2 classes, got {}", self.classes),
            });
        }
        if self.in_channels == 0
            || self.head_channels == 0
            || self.encoder_channels.iter().any(|&c| c == 0)
            || self.head_dilations.0 == 0
            || self.head_dilations.1 == 0
        {
            return Err(NnError::BadConfig {
                op: "SegNetConfig",
                reason: "all channel counts and dilations must be positive".into(),
            });
        }
        Ok(())
    }
}

/// ASPP-lite classifier: parallel dilated 3x3 convs summed, then 1x1 to logits.
#[derive(Clone)]
struct AsppHead {
    local: Conv2d,
    context: Conv2d,
    project: Conv2d,
}

impl AsppHead {
    fn init(name: &str, cfg: &SegNetConfig, c_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let (d_local, d_context) = cfg.head_dilations;
        Self {
            local: Conv2d::init(
                &format!("{name}.local"),
                c_in,
                cfg.head_channels,
                3,
                1,
                d_local,
                d_local,
                WeightInit::HeNormal,
                rng,
            ),
            context: Conv2d::init(
                &format!("{name}.context"),
                c_in,
                cfg.head_channels,
                3,
                1,
                d_context,
                d_context,
                WeightInit::HeNormal,
                rng,
            ),
            project: Conv2d::init(
                &format!("{name}.project"),
                cfg.head_channels,
                cfg.classes,
                1,
                1,
                0,
                1,
                WeightInit::HeNormal,
                rng,
            ),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> NnResult<Var> {
        let a = self.local.forward(g, x, trainable)?;
        let b = self.context.forward(g, x, trainable)?;
        let s = g.add(a, b)?;
        let s = g.relu(s);
        self.project.forward(g, s, trainable)
    }

    fn layers(&self) -> [&Conv2d; 3] {
        [&self.local, &self.context, &self.project]
    }

    fn deep_clone(&self) -> Self {
        Self {
            local: self.local.deep_clone(),
            context: self.context.deep_clone(),
            project: self.project.deep_clone(),
        }
    }
}

/// Mid and top feature maps plus the two head logit maps.
pub struct SegOutputs {
    pub feat_mid: Var,
    pub feat_top: Var,
    pub logits1: Var,
    pub logits2: Var,
}

/// The segmentation network f.
pub struct SegNet {
    blocks: [Conv2d; 4],
    head1: AsppHead,
    head2: AsppHead,
    pub config: SegNetConfig,
}

impl SegNet {
    pub fn init(config: SegNetConfig, seed: u64) -> NnResult<Self> {
        config.validate()?;
        let mut rng = substream(seed, "segnet-init", 0);
        let ch = config.encoder_channels;
        let ins = [config.in_channels, ch[0], ch[1], ch[2]];
        let strides = [1usize, 2, 2, 2];
        let blocks = std::array::from_fn(|i| {
            Conv2d::init(
                &format!("segnet.enc{}", i + 1),
                ins[i],
                ch[i],
                3,
                strides[i],
                1,
                1,
                WeightInit::HeNormal,
                &mut rng,
            )
        });
        let head1 = AsppHead::init("segnet.head1", &config, config.channels_mid(), &mut rng);
        let head2 = AsppHead::init("segnet.head2", &config, config.channels_top(), &mut rng);
        Ok(Self {
            blocks,
            head1,
            head2,
            config,
        })
    }

    /// Full forward pass. Input spatial dims must be divisible by the total
    /// stride (8).
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> NnResult<SegOutputs> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(NnError::ShapeMismatch {
                op: "segnet_forward",
                expected: format!("[B,{},H,W]", self.config.in_channels),
                got: format!("{s:?}"),
            });
        }
        if s[2] % SegNetConfig::STRIDE_TOP != 0 || s[3] % SegNetConfig::STRIDE_TOP != 0 {
            return Err(NnError::BadConfig {
                op: "segnet_forward",
                reason: format!(
                    "input {}x{} not divisible by total stride {}",
                    s[2],
                    s[3],
                    SegNetConfig::STRIDE_TOP
                ),
            });
        }
        let mut h = x;
        let mut feat_mid = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let y = block.forward(g, h, trainable)?;
            h = g.relu(y);
            if i == 2 {
                feat_mid = h;
            }
        }
        let feat_top = h;
        let logits1 = self.head1.forward(g, feat_mid, trainable)?;
        let logits2 = self.head2.forward(g, feat_top, trainable)?;
        Ok(SegOutputs {
            feat_mid,
            feat_top,
            logits1,
            logits2,
        })
    }

    pub fn encoder_params(&self) -> Vec<Param> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn head_params(&self) -> Vec<Param> {
        self.head1
            .layers()
            .into_iter()
            .chain(self.head2.layers())
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn named_params(&self) -> Vec<Param> {
        self.encoder_params()
            .into_iter()
            .chain(self.head_params())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|p| p.borrow().numel()).sum()
    }

    /// Detached copy for use as a distillation teacher.
    pub fn snapshot(&self) -> Self {
        Self {
            blocks: std::array::from_fn(|i| self.blocks[i].deep_clone()),
            head1: self.head1.deep_clone(),
            head2: self.head2.deep_clone(),
            config: self.config.clone(),
        }
    }
}

// ── target-specific memory ─────────────────────────────────────────────────

/// Per-domain memory: a 1x1 conv branch for localized corrections plus a
/// global-average-pool -> 1x1 conv -> ReLU branch for context, broadcast back
/// to the feature map and summed. Frozen after its domain finishes.
pub struct TargetMemory {
    pub domain_index: u32,
    pub conv_branch: Option<Conv2d>,
    pub pool_branch: Option<Conv2d>,
    pub frozen: bool,
    c_in: usize,
    c_out: usize,
}

/// Fresh memory with both branches: weights Normal(0, 0.01), zero biases.
/// Zero-init would dead-end the pool branch behind the ReLU, while the small
/// scale keeps the attachment near-transparent.
pub fn tm_init(c_in: usize, c_out: usize, domain_index: u32, seed: u64) -> NnResult<TargetMemory> {
    tm_init_with_branches(c_in, c_out, domain_index, seed, true, true)
}

/// TM-module ablation entry point: enable either or both branches.
pub fn tm_init_with_branches(
    c_in: usize,
    c_out: usize,
    domain_index: u32,
    seed: u64,
    conv_branch: bool,
    pool_branch: bool,
) -> NnResult<TargetMemory> {
    if c_in == 0 || c_out == 0 {
        return Err(NnError::BadConfig {
            op: "tm_init",
            reason: "channel counts must be >= 1".into(),
        });
    }
    if !conv_branch && !pool_branch {
        return Err(NnError::BadConfig {
            op: "tm_init",
            reason: "at least one TM branch must be enabled".into(),
        });
    }
    let mut rng = substream(seed, "tm-init", domain_index as u64);
    let init = WeightInit::Normal(0.01);
    let conv = conv_branch.then(|| {
        Conv2d::init(
            &format!("tm{domain_index}.conv"),
            c_in,
            c_out,
            1,
            1,
            0,
            1,
            init,
            &mut rng,
        )
    });
    let pool = pool_branch.then(|| {
        Conv2d::init(
            &format!("tm{domain_index}.pool"),
            c_in,
            c_out,
            1,
            1,
            0,
            1,
            init,
            &mut rng,
        )
    });
    Ok(TargetMemory {
        domain_index,
        conv_branch: conv,
        pool_branch: pool,
        frozen: false,
        c_in,
        c_out,
    })
}

impl TargetMemory {
    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// TM(h): conv branch plus spatially broadcast pool branch. Output keeps
    /// the input's spatial dims. A frozen memory never records gradients.
    pub fn forward(&self, g: &mut Graph, h_prev: Var, trainable: bool) -> NnResult<Var> {
        let s = g.shape(h_prev);
        if s.len() != 4 || s[1] != self.c_in {
            return Err(NnError::ShapeMismatch {
                op: "tm_forward",
                expected: format!("[B,{},h,w]", self.c_in),
                got: format!("{s:?}"),
            });
        }
        let (h, w) = (s[2], s[3]);
        let trainable = trainable && !self.frozen;
        let mut out: Option<Var> = None;
        if let Some(conv) = &self.conv_branch {
            out = Some(conv.forward(g, h_prev, trainable)?);
        }
        if let Some(pool) = &self.pool_branch {
            let p = g.global_avg_pool(h_prev)?;
            let p = pool.forward(g, p, trainable)?;
            let p = g.relu(p);
            let p = g.upsample_nearest(p, h, w)?;
            out = Some(match out {
                Some(c) => g.add(c, p)?,
                None => p,
            });
        }
        Ok(out.expect("at least one branch enabled"))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn params(&self) -> Vec<Param> {
        self.conv_branch
            .iter()
            .chain(self.pool_branch.iter())
            .flat_map(|c| c.params())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.borrow().numel()).sum()
    }
}

/// One memory per head level.
pub struct TmPair {
    pub level1: TargetMemory,
    pub level2: TargetMemory,
}

impl TmPair {
    pub fn param_count(&self) -> usize {
        self.level1.param_count() + self.level2.param_count()
    }

    pub fn freeze(&mut self) {
        self.level1.freeze();
        self.level2.freeze();
    }

    pub fn frozen(&self) -> bool {
        self.level1.frozen && self.level2.frozen
    }
}

/// Stored memories for every finished domain, keyed by domain index.
pub type TmStore = BTreeMap<u32, TmPair>;

/// Head outputs with memory corrections added (Eq. 1); `plus2` is the final
/// prediction path.
pub struct FusedOutputs {
    pub seg: SegOutputs,
    pub plus1: Var,
    pub plus2: Var,
}

/// Run the network and add the memory pair at both head levels:
/// `plus_n = logits_n + TM_n(feat_n)`.
pub fn fused_forward(
    g: &mut Graph,
    net: &SegNet,
    tm1: &TargetMemory,
    tm2: &TargetMemory,
    x: Var,
    trainable: bool,
) -> NnResult<FusedOutputs> {
    let seg = net.forward(g, x, trainable)?;
    let t1 = tm1.forward(g, seg.feat_mid, trainable)?;
    let t2 = tm2.forward(g, seg.feat_top, trainable)?;
    let plus1 = g.add(seg.logits1, t1)?;
    let plus2 = g.add(seg.logits2, t2)?;
    Ok(FusedOutputs { seg, plus1, plus2 })
}

// ── patch discriminator ────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: [usize; 4],
    pub strides: [usize; 4],
    pub leaky_slope: f32,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 128],
            strides: [2, 2, 2, 2],
            leaky_slope: 0.2,
        }
    }
}

/// Fully convolutional scorer: four strided 3x3 convs with leaky-ReLU, then a
/// single-channel 3x3 scoring conv. Scores are raw reals (no squashing).
pub struct Discriminator {
    convs: [Conv2d; 4],
    score: Conv2d,
    pub config: DiscriminatorConfig,
    in_channels: usize,
}

impl Discriminator {
    pub fn init(name: &str, in_channels: usize, config: DiscriminatorConfig, seed: u64, index: u64) -> NnResult<Self> {
        if in_channels == 0 || config.channels.iter().any(|&c| c == 0) || config.strides.iter().any(|&s| s == 0) {
            return Err(NnError::BadConfig {
                op: "Discriminator::init",
                reason: "channels and strides must be positive".into(),
            });
        }
        let mut rng = substream(seed, "disc-init", index);
        let ins = [
            in_channels,
            config.channels[0],
            config.channels[1],
            config.channels[2],
        ];
        let convs = std::array::from_fn(|i| {
            Conv2d::init(
                &format!("{name}.conv{}", i + 1),
                ins[i],
                config.channels[i],
                3,
                config.strides[i],
                1,
                1,
                WeightInit::Normal(0.02),
                &mut rng,
            )
        });
        let score = Conv2d::init(
            &format!("{name}.score"),
            config.channels[3],
            1,
            3,
            1,
            1,
            1,
            WeightInit::Normal(0.02),
            &mut rng,
        );
        Ok(Self {
            convs,
            score,
            config,
            in_channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Var, trainable: bool) -> NnResult<Var> {
        let s = g.shape(p);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(NnError::ShapeMismatch {
                op: "discriminator_forward",
                expected: format!("[B,{},h,w]", self.in_channels),
                got: format!("{s:?}"),
            });
        }
        let mut h = p;
        for conv in &self.convs {
            let y = conv.forward(g, h, trainable)?;
            h = g.leaky_relu(y, self.config.leaky_slope);
        }
        self.score.forward(g, h, trainable)
    }

    pub fn params(&self) -> Vec<Param> {
        self.convs
            .iter()
            .chain(std::iter::once(&self.score))
            .flat_map(|c| c.params())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::substream;

    fn input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, "test-input", 0);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn segnet_shapes_follow_strides() {
        let net = SegNet::init(SegNetConfig::default(), 3).unwrap();
        let x = input(&[1, 3, 32, 32], 0);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let out = net.forward(&mut g, xv, false).unwrap();
        assert_eq!(g.shape(out.logits1), &[1, 4, 8, 8]);
        assert_eq!(g.shape(out.logits2), &[1, 4, 4, 4]);
        assert_eq!(g.shape(out.feat_mid), &[1, 128, 8, 8]);
        assert_eq!(g.shape(out.feat_top), &[1, 128, 4, 4]);
    }

    #[test]
    fn segnet_rejects_indivisible_input() {
        let net = SegNet::init(SegNetConfig::default(), 3).unwrap();
        let x = input(&[1, 3, 30, 32], 0);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        assert!(matches!(
            net.forward(&mut g, xv, false),
            Err(NnError::BadConfig { .. })
        ));
    }

    #[test]
    fn segnet_forward_is_deterministic() {
        let net_a = SegNet::init(SegNetConfig::default(), 9).unwrap();
        let net_b = SegNet::init(SegNetConfig::default(), 9).unwrap();
        let x = input(&[1, 3, 16, 16], 1);
        let run = |net: &SegNet| {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let out = net.forward(&mut g, xv, false).unwrap();
            g.value(out.logits2).to_vec()
        };
        assert_eq!(run(&net_a), run(&net_a));
        assert_eq!(run(&net_a), run(&net_b));
    }

    #[test]
    fn zeroed_heads_output_their_bias() {
        let net = SegNet::init(SegNetConfig::default(), 5).unwrap();
        for head in [&net.head1, &net.head2] {
            for layer in head.layers() {
                layer.weight.borrow_mut().data_mut().fill(0.0);
            }
        }
        let bias = [0.5f32, -1.0, 2.0, 0.25];
        net.head1
            .project
            .bias
            .borrow_mut()
            .data_mut()
            .copy_from_slice(&bias);
        let x = input(&[1, 3, 16, 16], 2);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let out = net.forward(&mut g, xv, false).unwrap();
        let v = g.value(out.logits1);
        let hw = 4 * 4;
        for (c, &b) in bias.iter().enumerate() {
            for p in 0..hw {
                assert_eq!(v[c * hw + p], b);
            }
        }
    }

    #[test]
    fn tm_zero_parameters_output_zero() {
        let mut tm = tm_init(4, 3, 1, 0).unwrap();
        for p in tm.params() {
            p.borrow_mut().data_mut().fill(0.0);
        }
        tm.frozen = false;
        let x = input(&[2, 4, 5, 5], 3);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let out = tm.forward(&mut g, xv, false).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(out), &[2, 3, 5, 5]);
    }

    #[test]
    fn tm_hand_case_all_ones() {
        // c_in=c_out=1, both conv weights 1, biases 0, input 2x2 of ones:
        // conv branch = 1 everywhere, pool branch = relu(1) broadcast = 1,
        // sum = 2 everywhere.
        let tm = tm_init(1, 1, 1, 0).unwrap();
        for p in tm.params() {
            let mut t = p.borrow_mut();
            if t.shape().len() == 4 {
                t.data_mut().fill(1.0);
            } else {
                t.data_mut().fill(0.0);
            }
        }
        let x = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let out = tm.forward(&mut g, xv, false).unwrap();
        assert_eq!(g.value(out), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn tm_biases_only_give_constant_sum() {
        // Zero input: conv branch contributes its bias b1; pool branch sees a
        // zero pooled vector, so conv gives b2 and relu keeps it for b2 > 0.
        let tm = tm_init(2, 2, 1, 0).unwrap();
        for p in tm.params() {
            p.borrow_mut().data_mut().fill(0.0);
        }
        tm.conv_branch.as_ref().unwrap().bias.borrow_mut().data_mut()[0] = 0.3;
        tm.conv_branch.as_ref().unwrap().bias.borrow_mut().data_mut()[1] = 0.1;
        tm.pool_branch.as_ref().unwrap().bias.borrow_mut().data_mut()[0] = 0.7;
        tm.pool_branch.as_ref().unwrap().bias.borrow_mut().data_mut()[1] = 0.2;
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let out = tm.forward(&mut g, xv, false).unwrap();
        let v = g.value(out);
        for p in 0..9 {
            assert!((v[p] - 1.0).abs() < 1e-6); // 0.3 + 0.7
            assert!((v[9 + p] - 0.3f32).abs() < 1e-6); // 0.1 + 0.2
        }
    }

    #[test]
    fn tm_channel_mismatch_is_an_error() {
        let tm = tm_init(4, 3, 1, 0).unwrap();
        let x = Tensor::zeros(&[1, 5, 2, 2]);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        assert!(tm.forward(&mut g, xv, false).is_err());
    }

    #[test]
    fn tm_init_is_seed_deterministic_and_counts_params() {
        let a = tm_init(16, 8, 2, 77).unwrap();
        let b = tm_init(16, 8, 2, 77).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.borrow().data(), pb.borrow().data());
        }
        assert_eq!(a.param_count(), 2 * (16 * 8 + 8)); // 272
        let conv_only = tm_init_with_branches(16, 8, 1, 0, true, false).unwrap();
        assert_eq!(conv_only.param_count(), 16 * 8 + 8);
        assert!(tm_init_with_branches(16, 8, 1, 0, false, false).is_err());
    }

    #[test]
    fn fresh_tm_is_near_transparent() {
        // Monte-Carlo over 100 standard-normal inputs at c_in = 64: output
        // norm stays within 10% of the input norm.
        let tm = tm_init(64, 4, 1, 123).unwrap();
        let mut worst = 0.0f64;
        for i in 0..100 {
            let mut rng = substream(9000, "tm-mc", i);
            let x = Tensor::randn(&[1, 64, 6, 6], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let out = tm.forward(&mut g, xv, false).unwrap();
            let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(norm(g.value(out)) / norm(x.data()));
        }
        assert!(worst <= 0.1, "output/input norm ratio {worst}");
    }

    #[test]
    fn fused_forward_zero_tm_is_bitwise_transparent() {
        let net = SegNet::init(SegNetConfig::default(), 21).unwrap();
        let cfg = &net.config;
        let tm1 = tm_init(cfg.channels_mid(), cfg.classes, 1, 1).unwrap();
        let tm2 = tm_init(cfg.channels_top(), cfg.classes, 1, 2).unwrap();
        for p in tm1.params().iter().chain(tm2.params().iter()) {
            p.borrow_mut().data_mut().fill(0.0);
        }
        let x = input(&[1, 3, 16, 16], 4);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let fused = fused_forward(&mut g, &net, &tm1, &tm2, xv, false).unwrap();
        let bits = |v: Var, g: &Graph| g.value(v).iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(fused.plus1, &g), bits(fused.seg.logits1, &g));
        assert_eq!(bits(fused.plus2, &g), bits(fused.seg.logits2, &g));
    }

    #[test]
    fn fused_forward_additivity() {
        let net = SegNet::init(SegNetConfig::default(), 31).unwrap();
        let cfg = &net.config;
        let tm1 = tm_init(cfg.channels_mid(), cfg.classes, 1, 11).unwrap();
        let tm2 = tm_init(cfg.channels_top(), cfg.classes, 1, 12).unwrap();
        let x = input(&[1, 3, 16, 16], 5);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let fused = fused_forward(&mut g, &net, &tm1, &tm2, xv, false).unwrap();
        let tm_direct = tm1.forward(&mut g, fused.seg.feat_mid, false).unwrap();
        let diff: Vec<f32> = g
            .value(fused.plus1)
            .iter()
            .zip(g.value(fused.seg.logits1))
            .map(|(a, b)| a - b)
            .collect();
        for (d, t) in diff.iter().zip(g.value(tm_direct)) {
            assert!((d - t).abs() <= 1e-5 * t.abs().max(1.0));
        }
    }

    #[test]
    fn fused_forward_routes_gradients_to_net_and_tm() {
        let net = SegNet::init(SegNetConfig::default(), 41).unwrap();
        let cfg = &net.config;
        let tm1 = tm_init(cfg.channels_mid(), cfg.classes, 1, 21).unwrap();
        let tm2 = tm_init(cfg.channels_top(), cfg.classes, 1, 22).unwrap();
        let x = input(&[1, 3, 16, 16], 6);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let fused = fused_forward(&mut g, &net, &tm1, &tm2, xv, true).unwrap();
        let sq = g.mul(fused.plus2, fused.plus2).unwrap();
        let loss = g.mean_all(sq);
        g.backward(loss).unwrap();
        let grad_norm = |p: &Param| {
            p.borrow()
                .grad()
                .map(|gr| gr.iter().map(|&v| v.abs() as f64).sum::<f64>())
                .unwrap_or(0.0)
        };
        assert!(net.encoder_params().iter().map(|p| grad_norm(p)).sum::<f64>() > 0.0);
        assert!(tm2.params().iter().map(|p| grad_norm(p)).sum::<f64>() > 0.0);
        // Level-1 memory is off the plus2 path entirely.
        assert!(tm1.params().iter().all(|p| p.borrow().grad().is_none()));
    }

    #[test]
    fn frozen_tm_records_no_gradients() {
        let mut tm = tm_init(8, 4, 1, 51).unwrap();
        tm.freeze();
        let x = input(&[1, 8, 4, 4], 7);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let out = tm.forward(&mut g, xv, true).unwrap();
        let loss = g.mean_all(out);
        g.backward(loss).unwrap();
        assert!(tm.params().iter().all(|p| p.borrow().grad().is_none()));
    }

    #[test]
    fn discriminator_shapes_and_determinism() {
        let d = Discriminator::init("disc", 4, DiscriminatorConfig::default(), 61, 0).unwrap();
        let x = input(&[1, 4, 64, 64], 8);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let out = d.forward(&mut g, xv, false).unwrap();
            (g.shape(out).to_vec(), g.value(out).to_vec())
        };
        let (shape, v1) = run();
        assert_eq!(shape, vec![1, 1, 4, 4]); // 64 / 2^4
        assert_eq!(v1, run().1);
    }

    #[test]
    fn discriminator_scores_are_unbounded() {
        let d = Discriminator::init("disc", 2, DiscriminatorConfig::default(), 62, 0).unwrap();
        for p in d.params() {
            let mut t = p.borrow_mut();
            if t.shape().len() == 4 {
                t.data_mut().fill(0.5);
            } else {
                t.data_mut().fill(1.0);
            }
        }
        let x = Tensor::filled(&[1, 2, 32, 32], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let out = d.forward(&mut g, xv, false).unwrap();
        assert!(g.value(out).iter().any(|&v| v > 1.0));
    }

    #[test]
    fn discriminator_rejects_channel_mismatch() {
        let d = Discriminator::init("disc", 4, DiscriminatorConfig::default(), 63, 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        assert!(d.forward(&mut g, xv, false).is_err());
    }

    #[test]
    fn tm_budget_is_small_against_default_segnet() {
        let net = SegNet::init(SegNetConfig::default(), 71).unwrap();
        let cfg = &net.config;
        let pair = TmPair {
            level1: tm_init(cfg.channels_mid(), cfg.classes, 1, 0).unwrap(),
            level2: tm_init(cfg.channels_top(), cfg.classes, 1, 0).unwrap(),
        };
        let ratio = pair.param_count() as f64 / net.param_count() as f64;
        assert!(ratio < 0.05, "ratio {ratio}");
    }

    #[test]
    fn snapshot_is_detached() {
        let net = SegNet::init(SegNetConfig::default(), 81).unwrap();
        let teacher = net.snapshot();
        net.blocks[0].weight.borrow_mut().data_mut()[0] += 1.0;
        assert_ne!(
            teacher.blocks[0].weight.borrow().data()[0],
            net.blocks[0].weight.borrow().data()[0]
        );
    }
}
