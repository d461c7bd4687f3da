//! Optimisation: poly learning rate, augmentation, SGD, stage-1 supervised
//! training and episodic meta-training of stages 2 and 3.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dml::{beta, dml_loss, PrototypeBank, PROB_CLAMP};
use crate::error::{config_err, contract_err, Error, Result};
use crate::pipeline::{stage_meta_forward, BoundPipeline, HeadMix, HeadsNeeded, Phase, PipelineState, DOWNSAMPLE};
use crate::protocol::{sample_train_episode, Dataset, Sample};
use crate::taxonomy::{aggregate_to_parents, merge_unsupported, to_foreground, ClassId, ClassTaxonomy, FoldSplit, LabelMask, BACKGROUND};
use crate::tensor::{resize_bilinear, Tensor};

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(contract_err!("poly_lr needs 0 <= iter <= max_iter and max_iter > 0, got {iter}/{max_iter}"));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, scale_lo: 0.5, scale_hi: 2.0, flip_prob: 0.5 }
    }
}

/// One concrete draw of the augmentation. Offsets are the top-left corner of the
/// crop window in scaled coordinates; negative values pad.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub offset_y: isize,
    pub offset_x: isize,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { scale: 1.0, offset_y: 0, offset_x: 0, flip: false };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let scale = if cfg.scale_hi > cfg.scale_lo { rng.gen_range(cfg.scale_lo..=cfg.scale_hi) } else { cfg.scale_lo };
        let (sh, sw) = scaled_size(height, width, scale);
        let mut offset = |scaled: usize, target: usize| {
            let slack = scaled as isize - target as isize;
            rng.gen_range(slack.min(0)..=slack.max(0))
        };
        let offset_y = offset(sh, height);
        let offset_x = offset(sw, width);
        AugmentParams { scale, offset_y, offset_x, flip: rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) }
    }

    /// Window centred on the scaled image.
    pub fn centered(height: usize, width: usize, scale: f64, flip: bool) -> Self {
        let (sh, sw) = scaled_size(height, width, scale);
        AugmentParams {
            scale,
            offset_y: (sh as isize - height as isize).div_euclid(2),
            offset_x: (sw as isize - width as isize).div_euclid(2),
            flip,
        }
    }
}

fn scaled_size(height: usize, width: usize, scale: f64) -> (usize, usize) {
    (((height as f64 * scale).round() as usize).max(1), ((width as f64 * scale).round() as usize).max(1))
}

/// Scale (bilinear image, nearest mask), crop or pad back to the input size, and
/// optionally flip. Padding is black / background.
pub fn augment_with(sample: &Sample, p: AugmentParams) -> Result<Sample> {
    let (h, w, c) = sample.image.dims3()?;
    let (sh, sw) = scaled_size(h, w, p.scale);
    let (img, mask) = if (sh, sw) == (h, w) {
        (sample.image.clone(), sample.mask.clone())
    } else {
        (resize_bilinear(&sample.image, sh, sw)?, sample.mask.resize_nearest(sh, sw))
    };
    let mut pixels = vec![0.0; h * w * c];
    let mut labels = vec![BACKGROUND; h * w];
    for y in 0..h {
        let sy = y as isize + p.offset_y;
        if sy < 0 || sy >= sh as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + p.offset_x;
            if sx < 0 || sx >= sw as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            let dx = if p.flip { w - 1 - x } else { x };
            let dst = (y * w + dx) * c;
            let src = (sy * sw + sx) * c;
            pixels[dst..dst + c].copy_from_slice(&img.data()[src..src + c]);
            labels[y * w + dx] = mask.get(sy, sx);
        }
    }
    Ok(Sample { image: Tensor::new(&[h, w, c], pixels)?, mask: LabelMask::new(h, w, labels, mask.granularity())? })
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    let (h, w, _) = sample.image.dims3()?;
    augment_with(sample, AugmentParams::sample(cfg, h, w, rng))
}

/// `p ← p − lr·g`. Every gradient is checked before any parameter moves.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
    Sgd::new(0.0, 0.0).step(params, grads, lr)
}

/// SGD with optional momentum and weight decay. Parameters without a gradient
/// are left untouched, momentum included.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(contract_err!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(crate::error::shape_err!("gradient {i} has shape {:?}, parameter {:?}", g.shape(), p.shape()));
                }
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("gradient {i} is not finite; step rejected")));
                }
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![None; params.len()];
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let Some(g) = g else { continue };
            let mut d: Vec<f64> = g.data().iter().zip(p.data()).map(|(g, w)| g + self.weight_decay * w).collect();
            if self.momentum > 0.0 {
                let vel = v.get_or_insert_with(|| Tensor::zeros(g.shape()));
                for (vv, dd) in vel.data_mut().iter_mut().zip(d.iter_mut()) {
                    *vv = self.momentum * *vv + *dd;
                    *dd = *vv;
                }
            }
            for (w, dd) in p.data_mut().iter_mut().zip(d.iter_mut()) {
                *w -= lr * *dd;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epoch: usize,
    pub episodes_per_epoch: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Episodes whose gradients are averaged per update.
    pub batch_size: usize,
    /// Epochs trained with static prototypes before the bank takes over.
    pub static_epochs: usize,
    /// Global gradient-norm ceiling per update; 0 disables clipping.
    pub grad_clip: f64,
    pub augment: AugmentConfig,
    /// Filled from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epoch: 10,
            episodes_per_epoch: 768,
            base_lr: 0.01,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 1,
            static_epochs: 5,
            grad_clip: 0.0,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epoch == 0 || self.episodes_per_epoch == 0 || self.batch_size == 0 {
            return Err(config_err!("train.max_epoch, train.episodes_per_epoch and train.batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!("train.base_lr must be positive"));
        }
        if self.static_epochs > self.max_epoch {
            return Err(config_err!("train.static_epochs must not exceed train.max_epoch"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.poly_power < 0.0 {
            return Err(config_err!("train.momentum must lie in [0, 1); weight_decay, grad_clip and poly_power must be non-negative"));
        }
        let a = &self.augment;
        if !(a.scale_lo > 0.0 && a.scale_lo <= a.scale_hi) || !(0.0..=1.0).contains(&a.flip_prob) {
            return Err(config_err!("train.augment needs 0 < scale_lo <= scale_hi and flip_prob in [0, 1]"));
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> usize {
        self.max_epoch * self.episodes_per_epoch
    }

    fn total_updates(&self) -> usize {
        self.total_episodes().div_ceil(self.batch_size)
    }
}

/// AGM weight used for the loss in a given epoch.
pub fn train_beta(mix: HeadMix, epoch: usize, max_epoch: usize) -> Result<f64> {
    match mix {
        HeadMix::Agm => Ok(1.0),
        HeadMix::Ncm => Ok(0.0),
        HeadMix::Fixed(b) => Ok(b),
        HeadMix::Shifted => beta(epoch, max_epoch),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub episode: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub curve: Vec<LossRecord>,
    pub epoch_betas: Vec<f64>,
    pub agm_loss_calls: usize,
    pub ncm_loss_calls: usize,
    pub rejected_updates: usize,
}

impl StageReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,episode,loss\n");
        for r in &self.curve {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.episode, r.loss));
        }
        s
    }
}

fn stage_seed(seed: u64, stage: u8) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage as u64)
}

/// Accumulates per-episode gradients and applies averaged updates.
struct Updater {
    sgd: Sgd,
    pending: Vec<Option<Tensor>>,
    count: usize,
    update: usize,
    rejected: usize,
}

impl Updater {
    fn new(cfg: &TrainConfig) -> Self {
        Updater { sgd: Sgd::new(cfg.momentum, cfg.weight_decay), pending: Vec::new(), count: 0, update: 0, rejected: 0 }
    }

    fn add(&mut self, grads: Vec<Option<Tensor>>) {
        if self.pending.is_empty() {
            self.pending = grads;
        } else {
            for (acc, g) in self.pending.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        self.count += 1;
    }

    fn flush(&mut self, state: &mut PipelineState, stage: u8, cfg: &TrainConfig, force: bool) -> Result<()> {
        if self.count == 0 || (self.count < cfg.batch_size && !force) {
            return Ok(());
        }
        let mut grads = std::mem::take(&mut self.pending);
        let inv = 1.0 / self.count as f64;
        let mut norm2 = 0.0;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= inv;
                norm2 += *v * *v;
            }
        }
        if cfg.grad_clip > 0.0 && norm2.sqrt() > cfg.grad_clip {
            let s = cfg.grad_clip / norm2.sqrt();
            for g in grads.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        self.count = 0;
        let lr = poly_lr(self.update.min(cfg.total_updates()), cfg.total_updates(), cfg.base_lr, cfg.poly_power)?;
        self.update += 1;
        let mut params = state.stage_params_mut(stage)?;
        match self.sgd.step(&mut params, &grads, lr) {
            Ok(()) => Ok(()),
            Err(Error::Numeric(msg)) => {
                log::warn!("stage {stage} update {}: {msg}", self.update);
                self.rejected += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// Train one stage after checking that the stages it builds on are trained.
pub fn train_stage(state: &mut PipelineState, stage: u8, data: &Dataset, fold: &FoldSplit, cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    for p in state.prerequisites(stage) {
        if !state.trained[p as usize - 1] {
            return Err(Error::State(format!("stage {stage} needs stage {p} to be trained first")));
        }
    }
    let report = match stage {
        1 => train_stage1(state, data, cfg)?,
        2 | 3 => meta_train(state, stage, data, fold, cfg)?,
        _ => return Err(contract_err!("no stage {stage}")),
    };
    state.trained[stage as usize - 1] = true;
    Ok(report)
}

/// Supervised foreground/background training on every training image.
fn train_stage1(state: &mut PipelineState, data: &Dataset, cfg: &TrainConfig) -> Result<StageReport> {
    let pool: Vec<&Sample> = data.s_train.iter().chain(&data.q_train).collect();
    if pool.is_empty() {
        return Err(config_err!("training splits must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 1));
    let mut upd = Updater::new(cfg);
    let mut report = StageReport { stage: 1, ..Default::default() };
    for epoch in 0..cfg.max_epoch {
        for i in 0..cfg.episodes_per_epoch {
            let sample = augment(pool[rng.gen_range(0..pool.len())], &cfg.augment, &mut rng)?;
            let mut g = Graph::new();
            let bound = BoundPipeline::bind(&mut g, state, Some(1));
            let x = g.constant(sample.image.clone());
            let (probs, _) = bound.stage1(&mut g, x)?;
            let (fh, fw, _) = g.value(probs).dims3()?;
            let targets: Vec<usize> =
                to_foreground(&sample.mask.resize_nearest(fh, fw)).labels().iter().map(|&l| l as usize).collect();
            let loss = g.nll(probs, &targets, PROB_CLAMP)?;
            let value = g.value(loss).item();
            let mut grads = g.backward(loss)?;
            upd.add(bound.stage_vars(1)?.into_iter().map(|v| grads.take(v)).collect());
            upd.flush(state, 1, cfg, false)?;
            report.curve.push(LossRecord { epoch, episode: epoch * cfg.episodes_per_epoch + i, loss: value });
        }
    }
    upd.flush(state, 1, cfg, true)?;
    report.rejected_updates = upd.rejected;
    Ok(report)
}

/// Labels of `mask` in the label space a meta stage is trained on.
pub fn stage_labels(mask: &LabelMask, stage: u8, taxonomy: &ClassTaxonomy) -> LabelMask {
    if stage == 2 {
        aggregate_to_parents(mask, taxonomy)
    } else {
        mask.clone()
    }
}

/// Base classes for a meta stage: fine base classes or the base parent areas.
pub fn stage_base(fold: &FoldSplit, stage: u8) -> BTreeSet<ClassId> {
    if stage == 2 {
        fold.base_areas()
    } else {
        fold.base.clone()
    }
}

const MAX_RESAMPLES: usize = 100;

/// Draw an augmented episode whose support keeps at least one foreground class
/// at feature resolution.
fn draw_episode(
    data: &Dataset,
    fold: &FoldSplit,
    stage: u8,
    taxonomy: &ClassTaxonomy,
    augment_cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Sample, Sample)> {
    for _ in 0..MAX_RESAMPLES {
        let ep = sample_train_episode(data, fold, rng)?;
        let s = augment(&Sample { image: ep.support_image, mask: ep.support_mask }, augment_cfg, rng)?;
        let q_mask = ep.query_mask.ok_or_else(|| contract_err!("training query without mask"))?;
        let q = augment(&Sample { image: ep.query_image, mask: q_mask }, augment_cfg, rng)?;
        let s = Sample { mask: stage_labels(&s.mask, stage, taxonomy), image: s.image };
        let q = Sample { mask: stage_labels(&q.mask, stage, taxonomy), image: q.image };
        let (h, w) = (s.mask.height() / DOWNSAMPLE, s.mask.width() / DOWNSAMPLE);
        if !s.mask.resize_nearest(h, w).foreground_classes().is_empty() {
            return Ok((s, q));
        }
    }
    Err(Error::Gen(format!("no usable training episode in {MAX_RESAMPLES} draws")))
}

/// Episodic training of stage 2 or 3. Static prototypes are used for the first
/// `static_epochs` epochs, after which base-class prototypes go through the bank.
pub fn meta_train(state: &mut PipelineState, stage: u8, data: &Dataset, fold: &FoldSplit, cfg: &TrainConfig) -> Result<StageReport> {
    state.meta_stage(stage)?;
    let taxonomy = ClassTaxonomy::standard();
    let base = stage_base(fold, stage);
    let dynamic = state.config.dynamic_prototypes;
    let mix = state.config.head;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage));
    let mut upd = Updater::new(cfg);
    let mut report = StageReport { stage, ..Default::default() };
    for epoch in 0..cfg.max_epoch {
        let b = train_beta(mix, epoch, cfg.max_epoch)?;
        report.epoch_betas.push(b);
        let phase = if dynamic && epoch >= cfg.static_epochs { Phase::TrainLate } else { Phase::TrainEarly };
        for i in 0..cfg.episodes_per_epoch {
            let mut tries = 0;
            let (mut g, bound, out, q) = loop {
                let (s, q) = draw_episode(data, fold, stage, &taxonomy, &cfg.augment, &mut rng)?;
                let mut g = Graph::new();
                let bound = BoundPipeline::bind(&mut g, state, Some(stage));
                let alpha = state.config.alpha;
                let mut bank = std::mem::replace(&mut state.meta_stage_mut(stage)?.bank, PrototypeBank::new(alpha));
                let out = stage_meta_forward(&mut g, &bound, &mut bank, dynamic, stage, &s.image, &s.mask, &q.image, phase, &base, HeadsNeeded::for_beta(b));
                state.meta_stage_mut(stage)?.bank = bank;
                if let Some(out) = out? {
                    break (g, bound, out, q);
                }
                tries += 1;
                if tries >= MAX_RESAMPLES {
                    return Err(Error::Numeric(format!("stage {stage}: no episode with a usable prototype in {MAX_RESAMPLES} draws")));
                }
            };
            let (fh, fw, _) = g.value(out.agm.or(out.ncm).expect("a head ran")).dims3()?;
            let mut present: BTreeSet<ClassId> = out.channels.foreground().iter().copied().collect();
            present.insert(BACKGROUND);
            let gt = merge_unsupported(&q.mask.resize_nearest(fh, fw), &present);
            let targets = out.channels.targets(&gt)?;
            let loss = dml_loss(&mut g, out.agm, out.ncm, &targets, b)?;
            report.agm_loss_calls += usize::from(loss.agm_ce.is_some());
            report.ncm_loss_calls += usize::from(loss.ncm_ce.is_some());
            let value = g.value(loss.total).item();
            let mut grads = g.backward(loss.total)?;
            upd.add(bound.stage_vars(stage)?.into_iter().map(|v| grads.take(v)).collect());
            upd.flush(state, stage, cfg, false)?;
            report.curve.push(LossRecord { epoch, episode: epoch * cfg.episodes_per_epoch + i, loss: value });
        }
    }
    upd.flush(state, stage, cfg, true)?;
    report.rejected_updates = upd.rejected;
    Ok(report)
}

/// Train every stage the configured pipeline needs, in order.
pub fn train_all(state: &mut PipelineState, data: &Dataset, fold: &FoldSplit, cfg: &TrainConfig) -> Result<Vec<StageReport>> {
    state.required_stages().into_iter().map(|s| train_stage(state, s, data, fold, cfg)).collect()
}
