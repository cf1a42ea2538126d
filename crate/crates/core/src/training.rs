//! Base training, TransferFSS fine-tuning and DistillFSS distillation.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::extract;
use crate::data::{binarize_mask, Dataset, Image, MultiClassMask, SupportSet};
use crate::decoder;
use crate::error::{Error, Result};
use crate::eval::Metrics;
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::student::{self, student_graph, Student};
use crate::teacher::{self, teacher_graph, Teacher};

/// Independently trainable parts of the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    ConvMapper,
    ConvSkip,
    Classifier,
    ConvMerge,
    AttentionWeights,
    Mixer,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::ConvMapper,
        Block::ConvSkip,
        Block::Classifier,
        Block::ConvMerge,
        Block::AttentionWeights,
        Block::Mixer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::ConvMapper => "conv_mapper",
            Block::ConvSkip => "conv_skip",
            Block::Classifier => "classifier",
            Block::ConvMerge => "conv_merge",
            Block::AttentionWeights => "attention_weights",
            Block::Mixer => "mixer",
        }
    }

    /// Parameter-name prefix covered by the block.
    pub fn prefix(self) -> &'static str {
        match self {
            Block::ConvMapper => decoder::MAPPER,
            Block::ConvSkip => decoder::SKIP,
            Block::Classifier => decoder::CLASSIFIER,
            Block::ConvMerge => decoder::MERGE,
            Block::AttentionWeights => teacher::PREFIX,
            Block::Mixer => decoder::MIXER,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Block::ALL.into_iter().find(|b| b.name() == key).ok_or_else(|| Error::Config {
            field: "policy".into(),
            reason: format!(
                "unknown block {s:?}; expected one of {}",
                Block::ALL.map(Block::name).join(", ")
            ),
        })
    }
}

/// The set of blocks that may change during fine-tuning. The backbone is
/// never part of a policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnfreezePolicy {
    blocks: BTreeSet<Block>,
}

impl Default for UnfreezePolicy {
    fn default() -> Self {
        Self { blocks: [Block::ConvMapper, Block::ConvSkip, Block::Classifier, Block::Mixer].into() }
    }
}

impl UnfreezePolicy {
    pub fn new(blocks: impl IntoIterator<Item = Block>) -> Result<Self> {
        let blocks: BTreeSet<Block> = blocks.into_iter().collect();
        if blocks.is_empty() {
            return Err(Error::Config { field: "policy".into(), reason: "at least one block is required".into() });
        }
        Ok(Self { blocks })
    }

    /// Comma-separated block names, e.g. `conv_mapper,conv_skip,classifier`.
    pub fn parse(s: &str) -> Result<Self> {
        Self::new(s.split(',').filter(|p| !p.trim().is_empty()).map(Block::parse).collect::<Result<Vec<_>>>()?)
    }

    pub fn blocks(&self) -> impl Iterator<Item = Block> + '_ {
        self.blocks.iter().copied()
    }

    pub fn contains(&self, block: Block) -> bool {
        self.blocks.contains(&block)
    }

    /// Whether the parameter block `name` is trainable under this policy.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.blocks.iter().any(|b| name.starts_with(b.prefix()))
    }
}

impl fmt::Display for UnfreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.blocks.iter().map(|b| b.name()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Conditioning shots per pseudo-query step; `None` means `min(M - 1, 5)`.
    pub conditioning_count: Option<usize>,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            gamma: 2.0,
            alpha: 1.0,
            epochs: 50,
            patience: 10,
            conditioning_count: None,
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config { field: field.into(), reason: format!("must be positive, got {v}") });
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("learning_rate", self.learning_rate)?;
        positive("alpha", self.alpha)?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config { field: "gamma".into(), reason: format!("must be >= 0, got {}", self.gamma) });
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config { field: "weight_decay".into(), reason: "must be >= 0".into() });
        }
        if self.epochs == 0 {
            return Err(Error::Config { field: "epochs".into(), reason: "must be positive".into() });
        }
        if self.patience == 0 {
            return Err(Error::Config { field: "patience".into(), reason: "must be positive".into() });
        }
        if self.conditioning_count == Some(0) {
            return Err(Error::Config { field: "conditioning_count".into(), reason: "must be positive".into() });
        }
        Ok(())
    }

    pub fn conditioning_for(&self, m: usize) -> usize {
        self.conditioning_count.unwrap_or_else(|| (m.saturating_sub(1)).clamp(1, 5))
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..Default::default() }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("train.learning_rate".into(), self.learning_rate.to_string()),
            ("train.weight_decay".into(), self.weight_decay.to_string()),
            ("train.gamma".into(), self.gamma.to_string()),
            ("train.alpha".into(), self.alpha.to_string()),
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.patience".into(), self.patience.to_string()),
            (
                "train.conditioning_count".into(),
                self.conditioning_count.map_or_else(|| "auto".into(), |c| c.to_string()),
            ),
            ("train.seed".into(), self.seed.to_string()),
            ("train.weight_distill".into(), self.loss_weights.distill.to_string()),
            ("train.weight_student_seg".into(), self.loss_weights.student_seg.to_string()),
            ("train.weight_teacher_seg".into(), self.loss_weights.teacher_seg.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    /// Mean distillation term, when it was computed.
    pub distill: Option<f64>,
    pub support_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub initial_miou: f64,
    pub best_miou: f64,
    /// 0 when no epoch beat the initial parameters.
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
    /// Number of times the distillation term was computed.
    pub distill_evaluations: usize,
}

impl TrainReport {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("initial_miou".to_string(), format!("{:.6}", self.initial_miou)),
            ("best_miou".to_string(), format!("{:.6}", self.best_miou)),
            ("best_epoch".to_string(), self.best_epoch.to_string()),
            ("epochs_run".to_string(), self.epochs.len().to_string()),
            ("stopped_early".to_string(), self.stopped_early.to_string()),
        ];
        for e in &self.epochs {
            let mut s = format!("loss={:.6} miou={:.6}", e.loss, e.support_miou);
            if let Some(d) = e.distill {
                s.push_str(&format!(" distill={d:.6}"));
            }
            v.push((format!("epoch.{:03}", e.epoch), s));
        }
        v
    }
}

thread_local! {
    static DISTILL_EVALS: Cell<usize> = const { Cell::new(0) };
}

/// How many times this thread has computed the distillation term.
pub fn distill_evaluations() -> usize {
    DISTILL_EVALS.with(Cell::get)
}

/// Layer-averaged MSE between student maps and (constant) teacher maps.
fn distill_term<T: Real>(tape: &Tape<T>, teacher: &[Var<T>], student: &[Var<T>]) -> Result<Var<T>> {
    DISTILL_EVALS.with(|c| c.set(c.get() + 1));
    let terms = teacher
        .iter()
        .zip(student)
        .map(|(t, s)| tape.mse(s, &t.detach()))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.scale(&tape.sum(&terms)?, T::c(1.0 / terms.len() as f64)))
}

fn focal_term<T: Real>(
    tape: &Tape<T>,
    logits: &Var<T>,
    mask: &MultiClassMask,
    class_id: u8,
    gamma: T,
    alpha: T,
) -> Result<Var<T>> {
    let target = binarize_mask(mask, class_id)?.to_tensor::<T>().reshape(logits.shape())?;
    tape.focal_loss(&tape.sigmoid(logits), &target, gamma, alpha)
}

/// Composite objective for one pseudo-query, summed over `classes`.
#[derive(Debug, Clone)]
pub struct Objective<T: Real> {
    pub loss: Var<T>,
    /// Summed distillation term, `None` when it was not computed.
    pub distill: Option<f64>,
}

/// Records the weighted composite loss (teacher focal + student focal +
/// attention distillation) of `query` conditioned on `shots`. `store` holds
/// the joint teacher and ConvDist parameters.
#[allow(clippy::too_many_arguments)]
pub fn composite_objective<T: Real>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    config: &ModelConfig,
    query: (&Image, &MultiClassMask),
    shots: &[(&Image, &MultiClassMask)],
    classes: &[u8],
    train: &TrainConfig,
    use_dist_loss: bool,
) -> Result<Objective<T>> {
    let (gamma, alpha, w) = (T::c(train.gamma), T::c(train.alpha), train.loss_weights);
    let feats = extract(tape, store, &config.backbone, &query.0.cast::<T>())?;
    let tg = teacher_graph(tape, store, config, &feats, shots, classes, None)?;
    let sg = student_graph(tape, store, config, &feats, classes)?;
    let mut terms = Vec::new();
    let mut distill = use_dist_loss.then_some(0.0);
    for (ci, &c) in classes.iter().enumerate() {
        let t = focal_term(tape, &tg.logits[ci], query.1, c, gamma, alpha)?;
        let s = focal_term(tape, &sg.logits[ci], query.1, c, gamma, alpha)?;
        terms.push(tape.scale(&t, T::c(w.teacher_seg)));
        terms.push(tape.scale(&s, T::c(w.student_seg)));
        if let Some(acc) = distill.as_mut() {
            let d = distill_term(tape, &tg.maps[ci], &sg.maps[ci])?;
            *acc += d.value().data()[0].to_f64().unwrap_or(f64::NAN);
            terms.push(tape.scale(&d, T::c(w.distill)));
        }
    }
    Ok(Objective { loss: tape.sum(&terms)?, distill })
}

/// Conditioning indices for pseudo-query `query`: drawn from the other
/// entries, without replacement when enough exist.
fn sample_conditioning(rng: &mut ChaCha8Rng, m: usize, query: usize, count: usize) -> Vec<usize> {
    let others: Vec<usize> = (0..m).filter(|&i| i != query).collect();
    if others.len() >= count {
        others.choose_multiple(rng, count).copied().collect()
    } else {
        (0..count).map(|_| *others.choose(rng).expect("m >= 2")).collect()
    }
}

/// Classes with foreground somewhere in the conditioning shots.
fn covered_classes(shots: &[(&Image, &MultiClassMask)], num_classes: u8) -> Vec<u8> {
    (1..=num_classes).filter(|&c| shots.iter().any(|(_, m)| m.count(c) > 0)).collect()
}

fn entries(support: &SupportSet) -> Vec<(&Image, &MultiClassMask)> {
    support.entries().iter().map(|(i, m)| (i, m)).collect()
}

/// Leave-one-out support mIoU: every entry is segmented against all others.
pub fn teacher_support_miou(teacher: &Teacher<f32>, support: &SupportSet) -> Result<f64> {
    let all = entries(support);
    let mut metrics = Metrics::for_classes(support.num_classes());
    for (i, (img, mask)) in all.iter().enumerate() {
        let shots: Vec<_> = all.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| *s).collect();
        let p = teacher.predict_shots(img, &shots, support.num_classes(), None)?;
        metrics.accumulate(&p.mask, mask)?;
    }
    Ok(metrics.miou())
}

pub fn student_support_miou(student: &Student<f32>, support: &SupportSet) -> Result<f64> {
    let mut metrics = Metrics::for_classes(support.num_classes());
    for (img, mask) in support.entries() {
        metrics.accumulate(&student.predict(img)?.mask, mask)?;
    }
    Ok(metrics.miou())
}

/// Tracks the best epoch and decides when to stop.
struct EarlyStopping<P> {
    best: P,
    best_miou: f64,
    best_epoch: usize,
    since_best: usize,
    patience: usize,
}

impl<P: Clone> EarlyStopping<P> {
    fn new(initial: P, miou: f64, patience: usize) -> Self {
        Self { best: initial, best_miou: miou, best_epoch: 0, since_best: 0, patience }
    }

    /// Records an epoch; returns `true` when training should stop.
    fn observe(&mut self, epoch: usize, miou: f64, params: &P) -> bool {
        if miou > self.best_miou {
            self.best = params.clone();
            self.best_miou = miou;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

fn check_support(support: &SupportSet) -> Result<()> {
    if support.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fine-tuning needs at least 2 support entries, got {}",
            support.len()
        )));
    }
    Ok(())
}

/// Fine-tunes the policy's blocks on the support set, each entry in turn
/// acting as the query with other entries as conditioning shots. Returns
/// the parameters of the best leave-one-out support mIoU.
pub fn transfer_fss(
    base: &Teacher<f32>,
    support: &SupportSet,
    policy: &UnfreezePolicy,
    config: &TrainConfig,
) -> Result<(Teacher<f32>, TrainReport)> {
    config.validate()?;
    check_support(support)?;
    let mut model = base.clone();
    let all = entries(support);
    let n = support.num_classes();
    let count = config.conditioning_for(all.len());
    let (gamma, alpha) = (config.gamma as f32, config.alpha as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer());

    let initial = teacher_support_miou(&model, support)?;
    let mut stop = EarlyStopping::new(model.params.clone(), initial, config.patience);
    let mut report = TrainReport { initial_miou: initial, ..Default::default() };

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for q in order {
            let cond = sample_conditioning(&mut rng, all.len(), q, count);
            let shots: Vec<_> = cond.iter().map(|&i| all[i]).collect();
            let classes = covered_classes(&shots, n);
            if classes.is_empty() {
                continue;
            }
            let grads = {
                let p = policy.clone();
                let tape = Tape::recording(move |name| p.is_trainable(name));
                let feats = extract(&tape, &model.params, &model.config.backbone, &all[q].0.clone())?;
                let g = teacher_graph(&tape, &model.params, &model.config, &feats, &shots, &classes, None)?;
                let terms = g
                    .logits
                    .iter()
                    .zip(&classes)
                    .map(|(l, &c)| focal_term(&tape, l, all[q].1, c, gamma, alpha))
                    .collect::<Result<Vec<_>>>()?;
                let loss = tape.sum(&terms)?;
                total += loss.value().data()[0] as f64;
                steps += 1;
                tape.backward(&loss)?
            };
            opt.step(&mut model.params, &grads)?;
        }
        let miou = teacher_support_miou(&model, support)?;
        report.epochs.push(EpochLog { epoch, loss: total / steps.max(1) as f64, distill: None, support_miou: miou });
        if stop.observe(epoch, miou, &model.params) {
            report.stopped_early = epoch < config.epochs;
            break;
        }
    }
    report.best_miou = stop.best_miou;
    report.best_epoch = stop.best_epoch;
    model.params = stop.best;
    Ok((model, report))
}

/// Result of [`distill_fss`]. The teacher carries the jointly updated decoder.
#[derive(Debug, Clone)]
pub struct Distilled {
    pub student: Student<f32>,
    pub teacher: Teacher<f32>,
    pub report: TrainReport,
}

fn split_joint(joint: &ParamStore<f32>, teacher: &Teacher<f32>, num_classes: u8) -> (Student<f32>, Teacher<f32>) {
    let student = Student {
        config: teacher.config.clone(),
        num_classes,
        params: joint.filtered(|n| !n.starts_with(teacher::PREFIX)),
    };
    let t = Teacher { config: teacher.config.clone(), params: joint.filtered(|n| !n.starts_with(student::PREFIX)) };
    (student, t)
}

/// Trains ConvDist heads against the teacher's attention maps with the
/// composite objective. Attention projections and the backbone stay frozen;
/// ConvDist is always trainable; the shared decoder follows `policy`. With
/// `use_dist_loss` off the distillation term is never computed.
pub fn distill_fss(
    teacher: &Teacher<f32>,
    support: &SupportSet,
    policy: &UnfreezePolicy,
    config: &TrainConfig,
    use_dist_loss: bool,
) -> Result<Distilled> {
    config.validate()?;
    check_support(support)?;
    let n = support.num_classes();
    let fresh = Student::from_teacher(teacher, n, config.seed)?;
    let mut joint = teacher.params.clone();
    joint.extend(&fresh.params.filtered(|name| name.starts_with(student::PREFIX)));

    let all = entries(support);
    let count = config.conditioning_for(all.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer());
    let evals_before = distill_evaluations();

    let initial = student_support_miou(&split_joint(&joint, teacher, n).0, support)?;
    let mut stop = EarlyStopping::new(joint.clone(), initial, config.patience);
    let mut report = TrainReport { initial_miou: initial, ..Default::default() };

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut dist_total, mut steps) = (0.0, 0.0, 0usize);
        for q in order {
            let cond = sample_conditioning(&mut rng, all.len(), q, count);
            let shots: Vec<_> = cond.iter().map(|&i| all[i]).collect();
            let classes = covered_classes(&shots, n);
            if classes.is_empty() {
                continue;
            }
            let grads = {
                let p = policy.clone();
                let tape = Tape::recording(move |name| {
                    name.starts_with(student::PREFIX) || (p.is_trainable(name) && !name.starts_with(teacher::PREFIX))
                });
                let obj =
                    composite_objective(&tape, &joint, &teacher.config, all[q], &shots, &classes, config, use_dist_loss)?;
                dist_total += obj.distill.unwrap_or(0.0);
                total += obj.loss.value().data()[0] as f64;
                steps += 1;
                tape.backward(&obj.loss)?
            };
            opt.step(&mut joint, &grads)?;
        }
        let (student, _) = split_joint(&joint, teacher, n);
        let miou = student_support_miou(&student, support)?;
        let steps = steps.max(1) as f64;
        report.epochs.push(EpochLog {
            epoch,
            loss: total / steps,
            distill: use_dist_loss.then_some(dist_total / steps),
            support_miou: miou,
        });
        if stop.observe(epoch, miou, &joint) {
            report.stopped_early = epoch < config.epochs;
            break;
        }
    }
    report.best_miou = stop.best_miou;
    report.best_epoch = stop.best_epoch;
    report.distill_evaluations = distill_evaluations() - evals_before;
    let (student, teacher) = split_joint(&stop.best, teacher, n);
    Ok(Distilled { student, teacher, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub max_shots: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self { steps: 2500, max_shots: 5, learning_rate: 1e-3, weight_decay: 0.01, gamma: 2.0, alpha: 1.0, seed: 0 }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("learning_rate", self.learning_rate)?;
        positive("alpha", self.alpha)?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config { field: "gamma".into(), reason: "must be >= 0".into() });
        }
        if self.steps == 0 {
            return Err(Error::Config { field: "steps".into(), reason: "must be positive".into() });
        }
        if self.max_shots == 0 {
            return Err(Error::Config { field: "max_shots".into(), reason: "must be positive".into() });
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("base.steps".into(), self.steps.to_string()),
            ("base.max_shots".into(), self.max_shots.to_string()),
            ("base.learning_rate".into(), self.learning_rate.to_string()),
            ("base.weight_decay".into(), self.weight_decay.to_string()),
            ("base.gamma".into(), self.gamma.to_string()),
            ("base.alpha".into(), self.alpha.to_string()),
            ("base.seed".into(), self.seed.to_string()),
        ]
    }
}

/// Episodic training of every teacher block on a source corpus. Each step
/// draws a query and 1..=`max_shots` other items as support. Returns the
/// teacher and the per-step loss.
pub fn train_base(source: &Dataset, model: ModelConfig, cfg: &BaseTrainConfig) -> Result<(Teacher<f32>, Vec<f64>)> {
    cfg.validate()?;
    if source.len() < 2 {
        return Err(Error::InvalidArgument("base training needs at least 2 items".into()));
    }
    let mut teacher = Teacher::init(model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let (gamma, alpha) = (cfg.gamma as f32, cfg.alpha as f32);
    let mut losses = Vec::with_capacity(cfg.steps);
    while losses.len() < cfg.steps {
        let q = rng.gen_range(0..source.len());
        let k = rng.gen_range(1..=cfg.max_shots.min(source.len() - 1));
        let cond = sample_conditioning(&mut rng, source.len(), q, k);
        let shots: Vec<(&Image, &MultiClassMask)> =
            cond.iter().map(|&i| (&source.items[i].image, &source.items[i].mask)).collect();
        let classes = covered_classes(&shots, source.num_classes);
        if classes.is_empty() {
            continue;
        }
        let query = &source.items[q];
        let grads = {
            let tape = Tape::recording(|_| true);
            let feats = extract(&tape, &teacher.params, &teacher.config.backbone, &query.image.clone())?;
            let g = teacher_graph(&tape, &teacher.params, &teacher.config, &feats, &shots, &classes, None)?;
            let terms = g
                .logits
                .iter()
                .zip(&classes)
                .map(|(l, &c)| focal_term(&tape, l, &query.mask, c, gamma, alpha))
                .collect::<Result<Vec<_>>>()?;
            let loss = tape.sum(&terms)?;
            losses.push(loss.value().data()[0] as f64);
            tape.backward(&loss)?
        };
        opt.step(&mut teacher.params, &grads)?;
    }
    Ok((teacher, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_parsing_and_membership() {
        let p = UnfreezePolicy::parse("conv_mapper, CONV_SKIP,classifier").unwrap();
        assert!(p.contains(Block::ConvSkip));
        assert!(p.is_trainable("decoder.mapper.s0.1.weight"));
        assert!(p.is_trainable("decoder.skip.bias"));
        assert!(!p.is_trainable("decoder.mixer.0.weight"));
        assert!(!p.is_trainable("backbone.stem0.weight"));
        assert_eq!(p.to_string(), "conv_mapper,conv_skip,classifier");
        assert!(UnfreezePolicy::parse("").is_err());
        let err = UnfreezePolicy::parse("conv_mapper,heads").unwrap_err().to_string();
        assert!(err.contains("heads"), "{err}");
        let default = UnfreezePolicy::default();
        assert!(default.contains(Block::Mixer) && !default.contains(Block::AttentionWeights));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("learning_rate"));
        let bad = TrainConfig { gamma: -1.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("gamma"));
        assert_eq!(TrainConfig::default().conditioning_for(10), 5);
        assert_eq!(TrainConfig::default().conditioning_for(3), 2);
    }

    #[test]
    fn conditioning_excludes_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for q in 0..4 {
            let c = sample_conditioning(&mut rng, 4, q, 3);
            assert_eq!(c.len(), 3);
            assert!(!c.contains(&q));
            let mut d = c.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 3);
            let r = sample_conditioning(&mut rng, 4, q, 5);
            assert!(r.len() == 5 && !r.contains(&q));
        }
    }

    #[test]
    fn early_stopping_keeps_best_not_last() {
        let mut s = EarlyStopping::new(0u32, 0.1, 2);
        assert!(!s.observe(1, 0.5, &1));
        assert!(!s.observe(2, 0.4, &2));
        assert!(s.observe(3, 0.3, &3));
        assert_eq!((s.best, s.best_epoch), (1, 1));
    }
}
