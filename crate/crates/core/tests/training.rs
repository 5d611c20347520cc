mod common;

use common::{tiny_corpus, tiny_model};
use xmal::datagen::{gen_corpus, Corpus, UtterancePair};
use xmal::evaluation::wer;
use xmal::models::{checkpoint, ModelConfig, StudentInit};
use xmal::numerics::{LossWeights, LrSchedule, ParamGroup, LABEL_SMOOTHING};
use xmal::training::{
    fit, initial_bundle, pretrain_asr, pretrain_teacher, run_matrix, train_joint, validation_wer, AsrTrainConfig,
    AugmentConfig, FitOptions, Item, JointBudget, Objective, Phase, TeacherTargets, TeacherTrainConfig, TrainScenario,
    Trainable,
};
use xmal::ModelBundle;

const V: usize = 16;
const F: usize = 6;

fn model(dropout: f64) -> ModelConfig {
    let mut m = tiny_model(V, F);
    m.text.dropout = dropout;
    m.speech.dropout = dropout;
    m.projection.dropout = dropout;
    if let Some(d) = m.decoder.as_mut() {
        d.dropout = dropout;
    }
    m
}

fn corpus() -> Corpus {
    gen_corpus(&tiny_corpus(V, F, 24, 3)).unwrap()
}

fn teacher(m: &ModelConfig) -> ModelBundle {
    let mut t = ModelBundle::new(m.clone(), 1).unwrap();
    t.params.set_group_frozen(ParamGroup::Teacher, true);
    t
}

fn schedule() -> LrSchedule {
    LrSchedule {
        peak_lr: 2e-3,
        warmup_steps: 3,
    }
}

fn budget() -> JointBudget {
    JointBudget {
        epochs: 2,
        batch_size: 8,
        schedule: schedule(),
        label_smoothing: LABEL_SMOOTHING,
        augment: Some(AugmentConfig::default()),
    }
}

#[test]
fn same_config_and_seed_reproduce_history_bit_exactly() {
    let m = model(0.1);
    let c = corpus();
    let t = teacher(&m);
    let targets = TeacherTargets::compute(&t, &c).unwrap();
    let sc = TrainScenario::preset("E", &budget(), 7).unwrap();
    let a = train_joint(&sc, &c, &t, None, &targets).unwrap();
    let b = train_joint(&sc, &c, &t, None, &targets).unwrap();
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(checkpoint::to_bytes(&a.best), checkpoint::to_bytes(&b.best));
    assert_eq!(checkpoint::to_bytes(&a.last), checkpoint::to_bytes(&b.last));

    let cells = run_matrix(&[sc.clone()], &[7, 8], &c, &t, None, &targets, None).unwrap();
    let par = cells[0].outcome.as_ref().unwrap();
    assert_eq!(par.history.to_csv(), a.history.to_csv());
    let other = cells[1].outcome.as_ref().unwrap();
    assert_ne!(other.history.to_csv(), a.history.to_csv());
}

#[test]
fn warmup_is_monotone_and_best_epoch_is_the_earliest_argmin() {
    let m = model(0.0);
    let c = corpus();
    let t = teacher(&m);
    let targets = TeacherTargets::compute(&t, &c).unwrap();
    let sc = TrainScenario::preset("D", &JointBudget { epochs: 3, ..budget() }, 2).unwrap();
    let o = train_joint(&sc, &c, &t, None, &targets).unwrap();
    let lrs: Vec<(u64, f64)> = o.history.train().map(|r| (r.step, r.lr)).collect();
    assert_eq!(lrs.len(), 9);
    for w in lrs.windows(2) {
        if w[1].0 <= 3 {
            assert!(w[1].1 > w[0].1);
        } else {
            assert!(w[1].1 < w[0].1);
        }
    }
    let totals: Vec<f64> = o.history.valid().iter().map(|r| r.total).collect();
    let min = totals[1..].iter().cloned().fold(f64::INFINITY, f64::min);
    let first = 1 + totals[1..].iter().position(|&x| x == min).unwrap();
    assert_eq!(o.best_epoch, first);
    assert!(o.history.rows.iter().any(|r| r.phase == Phase::Valid && r.step == 0));
}

#[test]
fn beta_zero_multitask_equals_recognition_training() {
    let m = model(0.1);
    let c = corpus();
    let t = teacher(&m);
    let targets = TeacherTargets::compute(&t, &c).unwrap();
    let cfg = AsrTrainConfig {
        epochs: 2,
        batch_size: 8,
        schedule: schedule(),
        label_smoothing: LABEL_SMOOTHING,
        augment: Some(AugmentConfig::default()),
        seed: 9,
    };
    let init = initial_bundle(&m, StudentInit::Random, 9, &t, None).unwrap();
    let (asr, report, _) = pretrain_asr(&c, init, &cfg, &[]).unwrap();
    let sc = TrainScenario {
        id: "beta0".into(),
        student_init: StudentInit::Random,
        trainable: Trainable::AllStudent,
        multitask: true,
        weights: LossWeights { gamma: 1.0, beta: 0.0 },
        epochs: 2,
        batch_size: 8,
        schedule: schedule(),
        label_smoothing: LABEL_SMOOTHING,
        augment: Some(AugmentConfig::default()),
        seed: 9,
    };
    let joint = train_joint(&sc, &c, &t, None, &targets).unwrap();
    assert_eq!(report.history.rows.len(), joint.history.rows.len());
    for (a, b) in report.history.rows.iter().zip(&joint.history.rows) {
        assert_eq!(
            (a.step, a.lr, a.ce, a.total, a.phase),
            (b.step, b.lr, b.ce, b.total, b.phase)
        );
    }
    for g in [ParamGroup::Student, ParamGroup::Decoder] {
        assert_eq!(asr.params.group_bytes(g), joint.best.params.group_bytes(g));
    }
}

#[test]
fn frozen_groups_stay_byte_identical() {
    let m = model(0.1);
    let c = corpus();
    let t = teacher(&m);
    let asr = ModelBundle::new(m.clone(), 2).unwrap();
    let targets = TeacherTargets::compute(&t, &c).unwrap();

    let o = train_joint(
        &TrainScenario::preset("C", &budget(), 4).unwrap(),
        &c,
        &t,
        Some(&asr),
        &targets,
    )
    .unwrap();
    for b in [&o.best, &o.last] {
        assert_eq!(
            b.params.group_bytes(ParamGroup::Teacher),
            t.params.group_bytes(ParamGroup::Teacher)
        );
        assert_eq!(
            b.params.group_bytes(ParamGroup::Student),
            asr.params.group_bytes(ParamGroup::Student)
        );
        assert_eq!(
            b.params.group_bytes(ParamGroup::Decoder),
            asr.params.group_bytes(ParamGroup::Decoder)
        );
    }
    let init = initial_bundle(&m, StudentInit::Pretrained, 4, &t, Some(&asr)).unwrap();
    assert_ne!(
        o.last.params.group_bytes(ParamGroup::Projection),
        init.params.group_bytes(ParamGroup::Projection)
    );

    let o = train_joint(
        &TrainScenario::preset("A", &budget(), 4).unwrap(),
        &c,
        &t,
        None,
        &targets,
    )
    .unwrap();
    let init = initial_bundle(&m, StudentInit::Random, 4, &t, None).unwrap();
    assert_eq!(
        o.last.params.group_bytes(ParamGroup::Teacher),
        t.params.group_bytes(ParamGroup::Teacher)
    );
    assert_eq!(
        o.last.params.group_bytes(ParamGroup::Decoder),
        init.params.group_bytes(ParamGroup::Decoder)
    );
    assert_ne!(
        o.last.params.group_bytes(ParamGroup::Student),
        init.params.group_bytes(ParamGroup::Student)
    );
}

#[test]
fn teacher_cannot_train_alongside_the_student() {
    let m = model(0.0);
    let c = corpus();
    let mut b = ModelBundle::new(m, 1).unwrap();
    let items = speech_items(&c.train);
    let opts = FitOptions {
        epochs: 1,
        batch_size: 4,
        schedule: schedule(),
        seed: 1,
        augment: None,
        trainable: vec![ParamGroup::Teacher, ParamGroup::Student],
        snapshot_steps: vec![],
    };
    assert!(fit(&mut b, &items, &items, recognition(), &opts).is_err());
}

fn speech_items(pairs: &[UtterancePair]) -> Vec<Item<'_>> {
    pairs
        .iter()
        .map(|p| Item {
            tokens: &p.tokens,
            frames: Some(&p.frames),
            target: None,
        })
        .collect()
}

fn recognition() -> Objective {
    Objective::Speech {
        weights: LossWeights { gamma: 1.0, beta: 0.0 },
        ce: true,
        l2: false,
        label_smoothing: 0.0,
    }
}

fn overfit(pairs: &[UtterancePair], steps: usize) -> ModelBundle {
    let mut b = ModelBundle::new(model(0.0), 5).unwrap();
    let items = speech_items(pairs);
    let opts = FitOptions {
        epochs: steps,
        batch_size: pairs.len(),
        schedule: LrSchedule {
            peak_lr: 1e-2,
            warmup_steps: 20,
        },
        seed: 5,
        augment: None,
        trainable: vec![ParamGroup::Student, ParamGroup::Decoder],
        snapshot_steps: vec![],
    };
    let out = fit(&mut b, &items, &items, recognition(), &opts).unwrap();
    b.params = out.best;
    b
}

#[test]
fn overfit_pair_decodes_its_transcription() {
    let c = corpus();
    let pair = &c.train[0];
    let b = overfit(std::slice::from_ref(pair), 200);
    let cap = 2 * b.student().output_len(pair.frames.dims2().0);
    let (hyp, truncated) = b.greedy_decode(&pair.frames, cap).unwrap();
    assert!(!truncated);
    assert_eq!(hyp, pair.tokens);
}

#[test]
fn overfit_ten_pairs_reach_zero_wer() {
    let c = corpus();
    let pairs = &c.train[..10];
    let fresh = ModelBundle::new(model(0.0), 5).unwrap();
    assert!(validation_wer(&fresh, pairs).unwrap() >= 0.8);
    let b = overfit(pairs, 300);
    assert_eq!(validation_wer(&b, pairs).unwrap(), 0.0);
    for p in pairs {
        let (hyp, _) = b.greedy_decode(&p.frames, 64).unwrap();
        assert_eq!(wer(&p.tokens, &hyp).unwrap(), 0.0);
    }
}

#[test]
fn teacher_pretraining_is_seeded() {
    let m = model(0.1);
    let c = corpus();
    let cfg = TeacherTrainConfig {
        epochs: 2,
        batch_size: 8,
        schedule: schedule(),
        mask_prob: 0.15,
        seed: 3,
    };
    let (a, ra) = pretrain_teacher(&c, &m, &cfg).unwrap();
    let (b, rb) = pretrain_teacher(&c, &m, &cfg).unwrap();
    assert_eq!(checkpoint::to_bytes(&a), checkpoint::to_bytes(&b));
    assert_eq!(ra.history.to_csv(), rb.history.to_csv());
    assert!((ra.chance - 1.0 / V as f64).abs() < 1e-12);
}

#[test]
fn trained_checkpoint_round_trips_through_disk() {
    let m = model(0.1);
    let c = corpus();
    let t = teacher(&m);
    let targets = TeacherTargets::compute(&t, &c).unwrap();
    let o = train_joint(
        &TrainScenario::preset("D", &budget(), 3).unwrap(),
        &c,
        &t,
        None,
        &targets,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    checkpoint::save(&o.best, &path).unwrap();
    let back: ModelBundle = checkpoint::load(&path).unwrap();
    let bytes = checkpoint::to_bytes(&o.best);
    assert_eq!(checkpoint::to_bytes(&back), bytes);
    assert_eq!(
        checkpoint::content_hash(&checkpoint::read(&path).unwrap()),
        checkpoint::content_hash(&bytes)
    );
    let f = &c.test[0].frames;
    assert_eq!(back.encode_speech(f).unwrap(), o.best.encode_speech(f).unwrap());

    o.write_run(dir.path()).unwrap();
    let hist = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(xmal::training::History::from_csv(&hist).unwrap(), o.history);
}
