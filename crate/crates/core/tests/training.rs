use std::sync::OnceLock;

use distillfss::checkpoint::{from_bytes, to_bytes, Checkpoint};
use distillfss::data::{build_support_set, SupportSet};
use distillfss::decoder;
use distillfss::eval::{evaluate, Model};
use distillfss::flops;
use distillfss::model::ModelConfig;
use distillfss::synth::synth_shapes;
use distillfss::synth::synth_source;
use distillfss::teacher::{self, Teacher};
use distillfss::training::{
    distill_evaluations, distill_fss, teacher_support_miou, train_base, transfer_fss, BaseTrainConfig, Block,
    TrainConfig, UnfreezePolicy,
};
use distillfss::Error;

/// A briefly trained base model shared by every test in this file.
fn base() -> &'static Teacher<f32> {
    static BASE: OnceLock<Teacher<f32>> = OnceLock::new();
    BASE.get_or_init(|| {
        let source = synth_source(60, 64, 11).unwrap();
        let cfg = BaseTrainConfig { steps: 400, seed: 2, ..Default::default() };
        train_base(&source, ModelConfig::default(), &cfg).unwrap().0
    })
}

fn one_class_support(m: usize) -> SupportSet {
    let ds = synth_shapes(20, 64, 1, 3).unwrap();
    build_support_set(&ds, m, 7).unwrap()
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, patience: epochs, seed: 4, ..Default::default() }
}

#[test]
fn transfer_improves_one_class_support() {
    let support = one_class_support(5);
    let (tuned, report) = transfer_fss(base(), &support, &UnfreezePolicy::default(), &short(20)).unwrap();
    assert!(report.best_miou >= report.initial_miou);
    assert!(
        report.best_miou >= report.initial_miou + 0.05,
        "support mIoU {:.4} -> {:.4}",
        report.initial_miou,
        report.best_miou
    );
    let again = teacher_support_miou(&tuned, &support).unwrap();
    assert!((again - report.best_miou).abs() < 1e-12);
}

#[test]
fn mapper_only_policy_leaves_other_blocks_bit_identical() {
    let support = one_class_support(5);
    let policy = UnfreezePolicy::new([Block::ConvMapper]).unwrap();
    let (tuned, report) = transfer_fss(base(), &support, &policy, &short(3)).unwrap();
    let changed = tuned.params.changed_blocks(&base().params);
    assert!(changed.iter().all(|n| n.starts_with(decoder::MAPPER)), "{changed:?}");
    if report.best_epoch > 0 {
        assert!(!changed.is_empty());
    }
}

#[test]
fn distillation_shrinks_attention_gap_and_keeps_attention_frozen() {
    let support = one_class_support(5);
    let before = distill_evaluations();
    let d = distill_fss(base(), &support, &UnfreezePolicy::default(), &short(6), true).unwrap();
    assert!(distill_evaluations() > before);
    let first = d.report.epochs.first().unwrap().distill.unwrap();
    let last = d.report.epochs.last().unwrap().distill.unwrap();
    assert!(last < first, "L_dist {first} -> {last}");
    let moved = d.teacher.params.changed_blocks(&base().params);
    assert!(moved.iter().all(|n| !n.starts_with(teacher::PREFIX) && !n.starts_with("backbone.")), "{moved:?}");
}

#[test]
fn disabled_distillation_term_is_never_computed() {
    let support = one_class_support(4);
    let before = distill_evaluations();
    let d = distill_fss(base(), &support, &UnfreezePolicy::default(), &short(2), false).unwrap();
    assert_eq!(distill_evaluations(), before);
    assert_eq!(d.report.distill_evaluations, 0);
    assert!(d.report.epochs.iter().all(|e| e.distill.is_none()));
}

#[test]
fn fine_tuning_needs_two_support_entries() {
    let ds = synth_shapes(6, 64, 1, 3).unwrap();
    let one = build_support_set(&ds, 1, 7).unwrap();
    assert!(matches!(
        transfer_fss(base(), &one, &UnfreezePolicy::default(), &short(1)),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn student_evaluation_rejects_support_and_teacher_requires_it() {
    let support = one_class_support(3);
    let test = synth_shapes(2, 64, 1, 9).unwrap();
    let d = distill_fss(base(), &support, &UnfreezePolicy::default(), &short(1), true).unwrap();
    assert!(matches!(
        evaluate(Model::Student(&d.student), &test, Some(&support), 10),
        Err(Error::SupportNotAllowed)
    ));
    assert!(matches!(evaluate(Model::Teacher(base()), &test, None, 10), Err(Error::SupportRequired)));
}

#[test]
fn support_batch_at_least_m_matches_unbatched() {
    let support = one_class_support(5);
    let query = &synth_shapes(1, 64, 1, 21).unwrap().items[0].image;
    let shots: Vec<_> = support.entries().iter().map(|(i, m)| (i, m)).collect();
    let unbatched = base().predict_shots(query, &shots, 1, None).unwrap();
    for batch in [5, 8, 100] {
        let batched = base().predict_shots(query, &shots, 1, Some(batch)).unwrap();
        assert_eq!(batched.probabilities[0].data(), unbatched.probabilities[0].data());
        assert_eq!(batched.mask, unbatched.mask);
    }
}

#[test]
fn student_flops_ignore_recorded_support_size() {
    let support = one_class_support(3);
    let d = distill_fss(base(), &support, &UnfreezePolicy::default(), &short(1), true).unwrap();
    let query = &synth_shapes(1, 64, 1, 21).unwrap().items[0].image;
    let mut counts = Vec::new();
    for shots in ["1", "5", "50"] {
        let ckpt = Checkpoint::from_student(&d.student).with_config([("data.shots".to_string(), shots.to_string())]);
        let student = from_bytes(&to_bytes(&ckpt).unwrap()).unwrap().into_student().unwrap();
        let (r, f) = flops::measure(|| student.predict(query));
        r.unwrap();
        counts.push(f);
    }
    assert!(counts[0] > 0);
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}
