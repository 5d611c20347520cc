use super::checkpoint;
use super::*;
use crate::datagen::vocab::BOS;
use crate::error::Error;
use crate::numerics::{ParamGroup, Tape, Tensor};

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.text.n_layers = 1;
    c.speech.n_layers = 1;
    if let Some(d) = c.decoder.as_mut() {
        d.n_layers = 1;
    }
    c
}

fn frames(t: usize, seed: u64) -> Tensor<f64> {
    let data = (0..t * 16)
        .map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
        .collect();
    Tensor::matrix(t, 16, data).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn text_embedding_is_deterministic_unit_and_order_sensitive() {
    let b = ModelBundle::<f64>::new(small_config(), 5).unwrap();
    let s = [10, 20, 30, 40];
    let e1 = b.encode_text(&s).unwrap();
    assert_eq!(e1, b.encode_text(&s).unwrap());
    assert_eq!(e1.len(), 64);
    assert!((norm(&e1) - 1.0).abs() < 1e-9);
    let e2 = b.encode_text(&[20, 10, 30, 40]).unwrap();
    let d: f64 = e1.iter().zip(&e2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(d > 1e-6, "permutation moved the embedding by only {d}");
}

#[test]
fn overlong_text_rejected_with_limit() {
    let b = ModelBundle::<f64>::new(small_config(), 5).unwrap();
    let long = vec![5; 33];
    match b.encode_text(&long) {
        Err(Error::SequenceTooLong { len: 33, max: 32 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn speech_embedding_dims_and_mask_arithmetic() {
    let mut c = small_config();
    c.speech.conv_layers = vec![ConvSpec { kernel: 3, stride: 2 }; 2];
    let b = ModelBundle::<f64>::new(c, 5).unwrap();
    for t in [4, 7, 13, 26] {
        let e = b.encode_speech(&frames(t, 1)).unwrap();
        assert_eq!(e.len(), 64);
        assert!((norm(&e) - 1.0).abs() < 1e-9);
        assert_eq!(b.student().output_len(t), t.div_ceil(2).div_ceil(2));
    }
    assert!(matches!(
        b.encode_speech(&frames(3, 1)),
        Err(Error::InputTooShort { len: 3, min: 4 })
    ));
    let b = ModelBundle::<f64>::new(small_config(), 5).unwrap();
    for t in [4, 7, 13] {
        assert_eq!(b.student().output_len(t), t.div_ceil(2));
    }
}

#[test]
fn decoder_is_causal() {
    let b = ModelBundle::<f64>::new(small_config(), 5).unwrap();
    let f = frames(12, 3);
    let logits = |prefix: &[usize]| {
        let mut tape = Tape::eval();
        let st = b.speech_states(&mut tape, &f).unwrap();
        let l = b.decoder_logits(&mut tape, st.states, prefix).unwrap();
        tape.value(l).clone()
    };
    let a = logits(&[BOS, 7, 9, 11]);
    let c = logits(&[BOS, 7, 40, 50]);
    assert_eq!(a.row(0), c.row(0));
    assert_eq!(a.row(1), c.row(1));
    assert_ne!(a.row(2), c.row(2));
    let step = b.decode_asr_step(&f, &[BOS]).unwrap();
    assert_eq!(step.len(), 64);
    assert!(step.iter().all(|x| x.is_finite()));
}

#[test]
fn missing_decoder_is_reported() {
    let mut c = small_config();
    c.decoder = None;
    let b = ModelBundle::<f64>::new(c, 5).unwrap();
    assert!(matches!(
        b.decode_asr_step(&frames(8, 1), &[BOS]),
        Err(Error::MissingDecoder)
    ));
    assert!(matches!(b.greedy_decode(&frames(8, 1), 4), Err(Error::MissingDecoder)));
}

#[test]
fn same_seed_same_bundle() {
    let a = ModelBundle::<f64>::new(small_config(), 9).unwrap();
    let b = ModelBundle::<f64>::new(small_config(), 9).unwrap();
    let c = ModelBundle::<f64>::new(small_config(), 10).unwrap();
    assert_eq!(checkpoint::to_bytes(&a), checkpoint::to_bytes(&b));
    assert_ne!(checkpoint::to_bytes(&a), checkpoint::to_bytes(&c));
    assert!(a.params.names_unique());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut a = ModelBundle::<f64>::new(small_config(), 9).unwrap();
    a.params.get_mut(crate::numerics::ParamId(0)).value.data_mut()[0] = std::f64::consts::PI / 7.0;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&a, &path).unwrap();
    let b: ModelBundle<f64> = checkpoint::load(&path).unwrap();
    assert_eq!(b.config, a.config);
    for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(p.name, q.name);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value));
    }
    let bytes = checkpoint::read(&path).unwrap();
    assert_eq!(
        checkpoint::content_hash(&bytes),
        checkpoint::content_hash(&checkpoint::to_bytes(&b))
    );
}

#[test]
fn incompatible_checkpoint_rejected() {
    let a = ModelBundle::<f64>::new(small_config(), 9).unwrap();
    let bytes = checkpoint::to_bytes(&a);
    let rec = checkpoint::parse(&bytes).unwrap();
    let mut other_cfg = small_config();
    other_cfg.speech.ffn_dim = 48;
    let mut other = ModelBundle::<f64>::new(other_cfg, 9).unwrap();
    assert!(matches!(
        checkpoint::apply(&mut other, &rec, None),
        Err(Error::CheckpointMismatch { .. })
    ));
    assert!(checkpoint::parse(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(checkpoint::parse(&bad).is_err());
}

#[test]
fn teacher_pretrained_init_copies_teacher_only() {
    let teacher = ModelBundle::<f64>::new(small_config(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    checkpoint::save(&teacher, &path).unwrap();
    let b: ModelBundle<f64> = init_bundle(small_config(), 2, &InitMode::TeacherPretrained(path)).unwrap();
    assert_eq!(
        b.params.group_bytes(ParamGroup::Teacher),
        teacher.params.group_bytes(ParamGroup::Teacher)
    );
    assert_ne!(
        b.params.group_bytes(ParamGroup::Student),
        teacher.params.group_bytes(ParamGroup::Student)
    );
}

#[test]
fn eval_is_thread_safe_read_only() {
    let b = ModelBundle::<f64>::new(small_config(), 4).unwrap();
    let f = frames(10, 2);
    let want = b.encode_speech(&f).unwrap();
    std::thread::scope(|s| {
        let hs: Vec<_> = (0..4).map(|_| s.spawn(|| b.encode_speech(&f).unwrap())).collect();
        for h in hs {
            assert_eq!(h.join().unwrap(), want);
        }
    });
}

#[test]
fn f32_bundle_runs() {
    let b = ModelBundle::<f32>::new(small_config(), 4).unwrap();
    let f = frames(10, 2).cast::<f32>();
    let e = b.encode_speech(&f).unwrap();
    let n: f32 = e.iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!((n - 1.0).abs() < 1e-5);
}
