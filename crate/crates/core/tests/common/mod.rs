#![allow(dead_code)]

use rand::Rng;
use xmal::datagen::vocab::FIRST_CONTENT;
use xmal::datagen::{AcousticConfig, CorpusConfig, LanguageConfig, BOS, EOS};
use xmal::models::{
    ConvSpec, DecoderConfig, ModelConfig, ProjectionHeadConfig, SpeechEncoderConfig, TextEncoderConfig,
};
use xmal::numerics::{l2_pair_loss, rng, total_loss, DropoutKey, LossWeights, ParamGroup, Var};
use xmal::{ModelBundle, Tape, Tensor};

pub const TOL: f64 = 1e-4;
pub const H: f64 = 1e-5;

/// Below this magnitude a gradient is compared absolutely.
const FLOOR: f64 = 1e-5;

pub fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / (fd.abs() + analytic.abs()).max(FLOOR)
}

pub fn tiny_model(vocab: usize, frame_dim: usize) -> ModelConfig {
    ModelConfig {
        text: TextEncoderConfig {
            vocab_size: vocab,
            dim: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 32,
            max_len: 16,
            dropout: 0.0,
        },
        speech: SpeechEncoderConfig {
            frame_dim,
            conv_layers: vec![ConvSpec { kernel: 3, stride: 2 }, ConvSpec { kernel: 3, stride: 1 }],
            conv_channels: 8,
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
        },
        projection: ProjectionHeadConfig {
            in_dim: 8,
            hidden_dim: 16,
            out_dim: 16,
            dropout: 0.0,
        },
        decoder: Some(DecoderConfig {
            n_layers: 1,
            dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab_size: vocab,
            max_len: 16,
            dropout: 0.0,
        }),
    }
}

pub fn tiny_corpus(vocab: usize, frame_dim: usize, n_train: usize, seed: u64) -> CorpusConfig {
    CorpusConfig {
        seed,
        n_train,
        n_valid: 8,
        n_test: 8,
        min_len: 3,
        max_len: 6,
        n_speakers: 4,
        n_test_speakers: 2,
        language: LanguageConfig {
            vocab_size: vocab,
            n_digits: 3,
            fanout: 3,
            seed: seed + 1,
        },
        acoustic: AcousticConfig {
            frame_dim,
            ..AcousticConfig::default()
        },
    }
}

// ── primitives ──────────────────────────────────────────────────────────

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn rand_tensor(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Worst relative error between analytic and central-difference gradients
/// of `build` at `inputs`, all of which are differentiated.
fn grad_check(inputs: &[Tensor], build: &Build, key: Option<DropoutKey>) -> f64 {
    let tape = || {
        let mut t = if key.is_some() { Tape::train() } else { Tape::eval() };
        if let Some(k) = key {
            t.set_dropout_key(k);
        }
        t
    };
    let eval = |xs: &[Tensor]| {
        let mut t = tape();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars);
        t.value(out).item()
    };
    let mut t = tape();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let out = build(&mut t, &vars);
    let g = t.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = g.wrt(vars[i]).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; x.len()]);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(fd, analytic[j]));
        }
    }
    worst
}

fn check_many(name: &str, shapes: &[&[usize]], build: &Build, train: bool) -> (String, f64) {
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut r = rng::stream(&[99, case]);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut r, s, 1.0)).collect();
        let key = train.then_some(DropoutKey {
            seed: 3,
            step: case,
            stream: 0,
        });
        worst = worst.max(grad_check(&inputs, build, key));
    }
    (name.to_string(), worst)
}

/// Worst error over 20 random inputs for every differentiable primitive.
pub fn primitive_gradchecks() -> Vec<(String, f64)> {
    vec![
        check_many(
            "matmul",
            &[&[3, 4], &[4, 2]],
            &|t, x| {
                let y = t.matmul(x[0], x[1]).unwrap();
                let y = t.mul(y, y).unwrap();
                t.sum(y)
            },
            false,
        ),
        check_many(
            "linear+tanh",
            &[&[3, 4], &[4, 2], &[2]],
            &|t, x| {
                let y = t.linear(x[0], x[1], Some(x[2])).unwrap();
                let y = t.tanh(y);
                let y = t.mul(y, y).unwrap();
                t.sum(y)
            },
            false,
        ),
        check_many(
            "gelu",
            &[&[2, 5]],
            &|t, x| {
                let y = t.gelu(x[0]);
                let y = t.mul(y, x[0]).unwrap();
                t.sum(y)
            },
            false,
        ),
        check_many(
            "softmax",
            &[&[3, 5], &[3, 5]],
            &|t, x| {
                let y = t.softmax(x[0]);
                let y = t.mul(y, x[1]).unwrap();
                t.sum(y)
            },
            false,
        ),
        check_many(
            "layer_norm",
            &[&[3, 6], &[6], &[6], &[3, 6]],
            &|t, x| {
                let y = t.layer_norm(x[0], x[1], x[2], 1e-5).unwrap();
                let y = t.mul(y, x[3]).unwrap();
                t.sum(y)
            },
            false,
        ),
        check_many(
            "add/sub/scale/add_row/add_n",
            &[&[2, 3], &[2, 3], &[3]],
            &|t, x| {
                let a = t.add(x[0], x[1]).unwrap();
                let b = t.sub(a, x[1]).unwrap();
                let c = t.add_row(b, x[2]).unwrap();
                let d = t.scale(c, 0.7);
                let e = t.mul(d, x[1]).unwrap();
                let f = t.add_n(&[e, d, c]).unwrap();
                let f = t.tanh(f);
                t.mean(f)
            },
            false,
        ),
        check_many(
            "embedding",
            &[&[5, 3], &[4, 3]],
            &|t, x| {
                let y = t.embedding(x[0], &[1, 4, 1, 0]).unwrap();
                let y = t.mul(y, x[1]).unwrap();
                let y = t.tanh(y);
                t.sum(y)
            },
            false,
        ),
        check_many(
            "unfold",
            &[&[7, 2], &[6, 3]],
            &|t, x| {
                let u = t.unfold(x[0], 3, 2).unwrap();
                let y = t.matmul(u, x[1]).unwrap();
                let y = t.tanh(y);
                t.sum(y)
            },
            false,
        ),
        check_many(
            "attention",
            &[&[4, 6], &[5, 6], &[5, 6], &[4, 6]],
            &|t, x| {
                let y = t.attention(x[0], x[1], x[2], 3, false).unwrap();
                let y = t.mul(y, x[3]).unwrap();
                t.sum(y)
            },
            false,
        ),
        check_many(
            "causal attention",
            &[&[4, 4], &[4, 4], &[4, 4], &[4, 4]],
            &|t, x| {
                let y = t.attention(x[0], x[1], x[2], 2, true).unwrap();
                let y = t.mul(y, x[3]).unwrap();
                t.sum(y)
            },
            false,
        ),
        check_many(
            "mean_pool+l2_normalize+sq_dist",
            &[&[4, 3], &[3]],
            &|t, x| {
                let p = t.mean_pool_masked(x[0], &[true, false, true, true]).unwrap();
                let n = t.l2_normalize(p).unwrap();
                let m = t.l2_normalize(x[1]).unwrap();
                t.sq_dist(n, m).unwrap()
            },
            false,
        ),
        check_many(
            "cross_entropy",
            &[&[4, 5]],
            &|t, x| t.cross_entropy(x[0], &[0, 4, 2, 9], Some(9), 0.1).unwrap(),
            false,
        ),
        check_many(
            "dropout",
            &[&[4, 4]],
            &|t, x| {
                let y = t.dropout(x[0], 0.3, 7).unwrap();
                let y = t.tanh(y);
                t.sum(y)
            },
            true,
        ),
        check_many(
            "3-layer composite",
            &[&[3, 5], &[5, 6], &[6], &[6, 6], &[6, 4], &[4]],
            &|t, x| {
                let h = t.linear(x[0], x[1], Some(x[2])).unwrap();
                let h = t.tanh(h);
                let h = t.matmul(h, x[3]).unwrap();
                let h = t.gelu(h);
                let y = t.linear(h, x[4], Some(x[5])).unwrap();
                t.cross_entropy(y, &[1, 3, 0], None, 0.1).unwrap()
            },
            false,
        ),
    ]
}

// ── full pipeline ───────────────────────────────────────────────────────

/// A randomly shaped small bundle plus one training example.
pub struct PipelineCase {
    pub bundle: ModelBundle,
    pub frames: Tensor,
    pub tokens: Vec<usize>,
    pub target: Tensor,
    pub weights: LossWeights,
    pub key: DropoutKey,
}

pub fn pipeline_case(case: u64) -> PipelineCase {
    let mut r = rng::stream(&[0x6c, case]);
    let vocab = r.random_range(8..=12);
    let frame_dim = r.random_range(3..=5);
    let text_dim = [8, 12][r.random_range(0..2)];
    let speech_dim = [6, 8][r.random_range(0..2)];
    let n_conv = r.random_range(1..=2);
    let conv_layers = (0..n_conv)
        .map(|i| ConvSpec {
            kernel: r.random_range(2..=3),
            stride: if i == 0 { 2 } else { r.random_range(1..=2) },
        })
        .collect();
    let mut drop = || r.random_range(0.0..0.3);
    let (d1, d2, d3, d4) = (drop(), drop(), drop(), drop());
    let config = ModelConfig {
        text: TextEncoderConfig {
            vocab_size: vocab,
            dim: text_dim,
            n_layers: r.random_range(1..=2),
            n_heads: 2,
            ffn_dim: 2 * text_dim,
            max_len: 16,
            dropout: d1,
        },
        speech: SpeechEncoderConfig {
            frame_dim,
            conv_layers,
            conv_channels: r.random_range(4..=7),
            dim: speech_dim,
            n_layers: r.random_range(1..=2),
            n_heads: 2,
            ffn_dim: 2 * speech_dim,
            dropout: d2,
        },
        projection: ProjectionHeadConfig {
            in_dim: speech_dim,
            hidden_dim: r.random_range(6..=10),
            out_dim: text_dim,
            dropout: d3,
        },
        decoder: Some(DecoderConfig {
            n_layers: r.random_range(1..=2),
            dim: speech_dim,
            n_heads: 2,
            ffn_dim: 2 * speech_dim,
            vocab_size: vocab,
            max_len: 16,
            dropout: d4,
        }),
    };
    let mut bundle = ModelBundle::new(config, case).unwrap();
    bundle.params.set_group_frozen(ParamGroup::Teacher, true);
    let len = r.random_range(2..=5);
    let tokens: Vec<usize> = (0..len).map(|_| r.random_range(FIRST_CONTENT..vocab)).collect();
    let t = r.random_range(10..=16);
    let frames = rand_tensor(&mut r, &[t, frame_dim], 1.5);
    let target = Tensor::vector(bundle.encode_text(&tokens).unwrap());
    let weights = LossWeights {
        gamma: r.random_range(0.2..2.0),
        beta: r.random_range(0.5..10.0),
    };
    PipelineCase {
        bundle,
        frames,
        tokens,
        target,
        weights,
        key: DropoutKey {
            seed: case,
            step: 1,
            stream: 0,
        },
    }
}

/// Train-mode multitask loss of one example: recognition cross-entropy through
/// the decoder plus squared distance between the projected speech embedding
/// and the frozen teacher target.
pub fn pipeline_loss(c: &PipelineCase, bundle: &ModelBundle) -> (Tape, Var) {
    let mut tape = Tape::train();
    tape.set_dropout_key(c.key);
    let st = bundle.speech_states(&mut tape, &c.frames).unwrap();
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(&c.tokens);
    let mut targets = c.tokens.clone();
    targets.push(EOS);
    let logits = bundle.decoder_logits(&mut tape, st.states, &prefix).unwrap();
    let ce = tape.cross_entropy(logits, &targets, None, 0.1).unwrap();
    let e = bundle.speech_embedding_from(&mut tape, &st).unwrap();
    let t = tape.constant(c.target.clone());
    let l2 = l2_pair_loss(&mut tape, &[(e, t)]).unwrap();
    let total = total_loss(&mut tape, Some(ce), Some(l2), c.weights).unwrap();
    (tape, total)
}

pub struct PipelineCheck {
    pub worst: f64,
    pub coords: usize,
    /// Teacher parameters that received a gradient (must be zero).
    pub teacher_grads: usize,
}

/// Compares analytic gradients of the joint loss with central differences
/// on a sample of coordinates from every trainable parameter tensor.
pub fn pipeline_gradcheck(case: u64, per_param: usize) -> PipelineCheck {
    let c = pipeline_case(case);
    let (tape, loss) = pipeline_loss(&c, &c.bundle);
    let grads = tape.backward(loss).unwrap();
    let mut r = rng::stream(&[0x6d, case]);
    let mut out = PipelineCheck {
        worst: 0.0,
        coords: 0,
        teacher_grads: 0,
    };
    let ids: Vec<_> = c
        .bundle
        .params
        .iter()
        .map(|(id, p)| (id, p.group, p.value.len()))
        .collect();
    for (id, group, n) in ids {
        if group == ParamGroup::Teacher {
            out.teacher_grads += usize::from(grads.param(id).is_some());
            continue;
        }
        let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; n]);
        for _ in 0..per_param.min(n) {
            let j = r.random_range(0..n);
            let at = |d: f64| {
                let mut b = c.bundle.clone();
                b.params.get_mut(id).value.data_mut()[j] += d;
                let (t, l) = pipeline_loss(&c, &b);
                t.value(l).item()
            };
            let fd = (at(H) - at(-H)) / (2.0 * H);
            out.worst = out.worst.max(rel_err(fd, analytic[j]));
            out.coords += 1;
        }
    }
    out
}
