//! The continual adaptation loop.
//!
//! For each target domain in order: initialize a fresh memory pair and
//! discriminator pair, snapshot the current network as the distillation
//! teacher (from the second domain on), run `iter_max` alternating
//! generator/discriminator steps, then freeze and store the memory pair and
//! discard the discriminators. After each domain, every domain seen so far is
//! evaluated and recorded in the run history. Source batches stay in the mix
//! for every domain; target labels are never read by training.

mod eval;
mod step;

pub use eval::{evaluate_domain, predict_labels};
pub use step::DomainTrainer;

use crate::data::{
    batch_iterator, DataError, DomainData, DomainRole, Split,
};
use crate::losses::{AdversarialKind, LossWeights};
use crate::metrics::{MetricsError, RunHistory};
use crate::models::{
    tm_init_with_branches, Discriminator, DiscriminatorConfig, SegNet, SegNetConfig, TmPair,
    TmStore,
};
use crate::nn::rng::stream_key;
use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("continual training needs at least one target domain")]
    NoTargets,
    #[error("non-finite {term} loss at domain {domain}, iteration {iteration}")]
    NonFiniteLoss {
        domain: u32,
        iteration: usize,
        term: String,
    },
    #[error("distillation is enabled for domain {0} but no teacher snapshot exists")]
    MissingTeacher(u32),
    #[error("memory budget exceeded: TM pair / segnet parameter ratio {ratio:.4} >= 0.05")]
    TmBudgetExceeded { ratio: f64 },
    #[error("bad training config: {0}")]
    Config(String),
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Hyperparameters and ablation switches for a run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Label used in history files and reports.
    pub method: String,
    /// Hash of the originating experiment config; embedded in outputs.
    pub config_hash: String,
    pub iter_max: usize,
    pub batch_size: usize,
    pub base_lr_seg: f32,
    pub base_lr_disc: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Mid-domain evaluation cadence in iterations; 0 evaluates only at
    /// domain boundaries.
    pub eval_every: usize,
    pub eval_batch: usize,
    pub use_tm: bool,
    pub tm_conv_branch: bool,
    pub tm_pool_branch: bool,
    pub adv_loss: AdversarialKind,
    pub distill: bool,
    pub model: SegNetConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: "etm".into(),
            config_hash: "unhashed".into(),
            iter_max: 1500,
            batch_size: 1,
            base_lr_seg: 2.5e-3,
            base_lr_disc: 1e-4,
            momentum: 0.97,
            weight_decay: 5e-4,
            loss_weights: LossWeights::default(),
            seed: 1,
            eval_every: 0,
            eval_batch: 8,
            use_tm: true,
            tm_conv_branch: true,
            tm_pool_branch: true,
            adv_loss: AdversarialKind::Dha,
            distill: true,
            model: SegNetConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if !(self.base_lr_seg > 0.0) || !(self.base_lr_disc > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(TrainError::Config("batch sizes must be positive".into()));
        }
        if self.use_tm && !self.tm_conv_branch && !self.tm_pool_branch {
            return Err(TrainError::Config(
                "use_tm requires at least one TM branch".into(),
            ));
        }
        self.loss_weights.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Analytic TM-pair / segnet parameter ratio for this configuration.
    pub fn tm_budget_ratio(&self, segnet: &SegNet) -> f64 {
        let c = self.model.classes;
        let per_branch = |c_in: usize| c_in * c + c;
        let mut pair = 0usize;
        for c_in in [self.model.channels_mid(), self.model.channels_top()] {
            if self.tm_conv_branch {
                pair += per_branch(c_in);
            }
            if self.tm_pool_branch {
                pair += per_branch(c_in);
            }
        }
        pair as f64 / segnet.param_count() as f64
    }
}

/// One evaluation event for the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub domain_index: u32,
    pub iteration: usize,
    pub eval_domain: String,
    pub miou: f64,
}

impl EvalPoint {
    /// Tab-separated log line: domain_index, iteration, eval_domain, miou.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.domain_index, self.iteration, self.eval_domain, self.miou
        )
    }
}

/// Everything the continual loop carries across domains.
pub struct ContinualState {
    pub segnet: SegNet,
    pub tm_store: TmStore,
    pub current_tms: Option<TmPair>,
    pub current_discs: Option<(Discriminator, Discriminator)>,
    pub teacher: Option<SegNet>,
    /// Number of completed target domains.
    pub domain_index: u32,
    pub history: RunHistory,
    pub eval_log: Vec<EvalPoint>,
}

/// Fresh state with a seed-deterministic network and empty history.
pub fn init_continual_state(
    cfg: &TrainConfig,
    domains: Vec<(String, DomainRole)>,
) -> TrainResult<ContinualState> {
    cfg.validate()?;
    let segnet = SegNet::init(cfg.model.clone(), cfg.seed)?;
    Ok(ContinualState {
        segnet,
        tm_store: TmStore::new(),
        current_tms: None,
        current_discs: None,
        teacher: None,
        domain_index: 0,
        history: RunHistory::new(cfg.method.clone(), cfg.config_hash.clone(), domains),
        eval_log: Vec::new(),
    })
}

fn check_domain_data(cfg: &TrainConfig, d: &DomainData, needs_labels: bool) -> TrainResult<()> {
    if needs_labels && !d.train.has_labels() {
        return Err(TrainError::Config(format!(
            "domain '{}' train split must be labeled",
            d.train.name
        )));
    }
    if !d.val.has_labels() {
        return Err(TrainError::Config(format!(
            "domain '{}' val split must be labeled for evaluation",
            d.val.name
        )));
    }
    if d.train.class_count != cfg.model.classes {
        return Err(TrainError::Config(format!(
            "domain '{}' has {} classes but the model is configured for {}",
            d.train.name, d.train.class_count, cfg.model.classes
        )));
    }
    if d.train.split != Split::Train || d.val.split != Split::Val {
        return Err(TrainError::Config(format!(
            "domain '{}' splits are mislabeled",
            d.train.name
        )));
    }
    Ok(())
}

/// Run the full continual loop from scratch. `on_domain_complete` fires after
/// each stored domain (checkpointing hook).
pub fn run_continual(
    cfg: &TrainConfig,
    source: &DomainData,
    targets: &[DomainData],
    on_domain_complete: impl FnMut(&ContinualState) -> TrainResult<()>,
) -> TrainResult<ContinualState> {
    let mut domains = vec![(source.train.name.clone(), DomainRole::Source)];
    domains.extend(
        targets
            .iter()
            .map(|t| (t.train.name.clone(), DomainRole::Target)),
    );
    let state = init_continual_state(cfg, domains)?;
    resume_continual(state, cfg, source, targets, on_domain_complete)
}

/// Continue a run whose first `state.domain_index` domains are already
/// complete. Per-domain seeding makes the result bit-identical to an
/// uninterrupted run.
pub fn resume_continual(
    mut state: ContinualState,
    cfg: &TrainConfig,
    source: &DomainData,
    targets: &[DomainData],
    mut on_domain_complete: impl FnMut(&ContinualState) -> TrainResult<()>,
) -> TrainResult<ContinualState> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(TrainError::NoTargets);
    }
    if cfg.iter_max == 0 {
        return Err(TrainError::Config("iter_max must be positive".into()));
    }
    check_domain_data(cfg, source, true)?;
    for t in targets {
        check_domain_data(cfg, t, false)?;
    }
    if cfg.use_tm {
        let ratio = cfg.tm_budget_ratio(&state.segnet);
        if ratio >= 0.05 {
            return Err(TrainError::TmBudgetExceeded { ratio });
        }
    }
    let start = state.domain_index as usize;
    for i in (start + 1)..=targets.len() {
        train_one_domain(&mut state, cfg, i as u32, source, targets)?;
        on_domain_complete(&state)?;
    }
    Ok(state)
}

fn train_one_domain(
    state: &mut ContinualState,
    cfg: &TrainConfig,
    domain_number: u32,
    source: &DomainData,
    targets: &[DomainData],
) -> TrainResult<()> {
    let target = &targets[domain_number as usize - 1];
    let c = cfg.model.classes;

    state.teacher = if domain_number > 1 {
        Some(state.segnet.snapshot())
    } else {
        None
    };
    state.current_tms = if cfg.use_tm {
        Some(TmPair {
            level1: tm_init_with_branches(
                cfg.model.channels_mid(),
                c,
                domain_number,
                stream_key(cfg.seed, "tm-level1", domain_number as u64),
                cfg.tm_conv_branch,
                cfg.tm_pool_branch,
            )?,
            level2: tm_init_with_branches(
                cfg.model.channels_top(),
                c,
                domain_number,
                stream_key(cfg.seed, "tm-level2", domain_number as u64),
                cfg.tm_conv_branch,
                cfg.tm_pool_branch,
            )?,
        })
    } else {
        None
    };
    state.current_discs = Some((
        Discriminator::init(
            &format!("disc{domain_number}.level1"),
            c,
            cfg.discriminator.clone(),
            stream_key(cfg.seed, "disc-level1", domain_number as u64),
            0,
        )?,
        Discriminator::init(
            &format!("disc{domain_number}.level2"),
            c,
            cfg.discriminator.clone(),
            stream_key(cfg.seed, "disc-level2", domain_number as u64),
            1,
        )?,
    ));

    let mut src_iter = batch_iterator(
        &source.train,
        cfg.batch_size,
        stream_key(cfg.seed, "src-batches", domain_number as u64),
        true,
    )?;
    let mut tgt_iter = batch_iterator(
        &target.train,
        cfg.batch_size,
        stream_key(cfg.seed, "tgt-batches", domain_number as u64),
        false,
    )?;

    let mut local_log: Vec<EvalPoint> = Vec::new();
    {
        let discs = state.current_discs.as_ref().expect("initialized above");
        let mut trainer = DomainTrainer::new(
            cfg,
            &state.segnet,
            state.current_tms.as_ref(),
            discs,
            state.teacher.as_ref(),
            domain_number,
        )?;
        for iteration in 1..=cfg.iter_max {
            let batch_s = src_iter.next_batch();
            let batch_t = tgt_iter.next_batch();
            trainer.step(&batch_s, &batch_t)?;
            if cfg.eval_every > 0 && iteration % cfg.eval_every == 0 && iteration != cfg.iter_max {
                for d in 0..=domain_number {
                    let (ds, tms) = if d == 0 {
                        (&source.val, None)
                    } else if d == domain_number {
                        (&targets[d as usize - 1].val, state.current_tms.as_ref())
                    } else {
                        (&targets[d as usize - 1].val, state.tm_store.get(&d))
                    };
                    let (_, miou) = evaluate_domain(&state.segnet, tms, ds, cfg.eval_batch)?;
                    local_log.push(EvalPoint {
                        domain_index: domain_number,
                        iteration,
                        eval_domain: ds.name.clone(),
                        miou,
                    });
                }
            }
        }
    }
    state.eval_log.extend(local_log);

    // Store the frozen memories; the discriminators are discarded.
    if let Some(mut pair) = state.current_tms.take() {
        pair.freeze();
        state.tm_store.insert(domain_number, pair);
    }
    state.current_discs = None;
    state.domain_index = domain_number;

    // Evaluate everything seen so far into the history.
    for d in 0..=domain_number {
        let (ds, tms) = if d == 0 {
            (&source.val, None)
        } else {
            (&targets[d as usize - 1].val, state.tm_store.get(&d))
        };
        let tms = if cfg.use_tm { tms } else { None };
        let (_, miou) = evaluate_domain(&state.segnet, tms, ds, cfg.eval_batch)?;
        state.history.record(domain_number, d, miou)?;
        state.eval_log.push(EvalPoint {
            domain_index: domain_number,
            iteration: cfg.iter_max,
            eval_domain: ds.name.clone(),
            miou,
        });
    }
    Ok(())
}

/// Detached copy of the network used as the distillation teacher.
pub fn snapshot_teacher(net: &SegNet) -> SegNet {
    net.snapshot()
}

/// A supervised run on the source domain only (the baseline for Gain).
pub struct SourceOnlyRun {
    pub segnet: SegNet,
    pub loss_trace: Vec<f32>,
}

/// Train with the segmentation losses only. `iter_max = 0` returns the
/// freshly initialized network unchanged.
pub fn train_source_only(cfg: &TrainConfig, source: &DomainData) -> TrainResult<SourceOnlyRun> {
    cfg.validate()?;
    check_domain_data(cfg, source, true)?;
    let segnet = SegNet::init(cfg.model.clone(), cfg.seed)?;
    let mut src_iter = batch_iterator(
        &source.train,
        cfg.batch_size,
        stream_key(cfg.seed, "src-batches", 1),
        true,
    )?;
    let mut trainer = step::SourceOnlyTrainer::new(cfg, &segnet)?;
    let mut loss_trace = Vec::with_capacity(cfg.iter_max);
    for _ in 0..cfg.iter_max {
        let batch = src_iter.next_batch();
        loss_trace.push(trainer.step(&batch)?);
    }
    Ok(SourceOnlyRun { segnet, loss_trace })
}
