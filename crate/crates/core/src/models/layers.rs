//! Parameterized building blocks.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::rng;
use crate::numerics::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var, LN_EPS};
use crate::scalar::Scalar;

/// Allocates parameters with per-name random streams, so a parameter's
/// initial value depends only on `(seed, name)`.
pub(crate) struct Builder<'a, S> {
    pub store: &'a mut ParamStore<S>,
    pub seed: u64,
    pub group: ParamGroup,
    next_dropout: &'a mut u64,
}

fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x1000_0000_01b3)
    })
}

impl<'a, S: Scalar> Builder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, seed: u64, group: ParamGroup, next_dropout: &'a mut u64) -> Self {
        Builder {
            store,
            seed,
            group,
            next_dropout,
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let mut r = rng::stream(&[self.seed, name_key(name)]);
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::lit(dist.sample(&mut r))).collect();
        self.store.add(name, self.group, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], x: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.store
            .add(name, self.group, Tensor::new(shape.to_vec(), vec![S::lit(x); n])?)
    }

    pub fn dropout_id(&mut self) -> u64 {
        *self.next_dropout += 1;
        *self.next_dropout
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new<S: Scalar>(bld: &mut Builder<'_, S>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = bld.normal(&format!("{name}.weight"), &[d_in, d_out], (1.0 / d_in as f64).sqrt())?;
        let b = bld.fill(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Linear { w, b })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.w);
        let b = tape.param(p, self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<S: Scalar>(bld: &mut Builder<'_, S>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: bld.fill(&format!("{name}.gain"), &[d], 1.0)?,
            bias: bld.fill(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(p, self.gain);
        let b = tape.param(p, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub(crate) fn new<S: Scalar>(bld: &mut Builder<'_, S>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(bld, &format!("{name}.q"), d, d)?,
            k: Linear::new(bld, &format!("{name}.k"), d, d)?,
            v: Linear::new(bld, &format!("{name}.v"), d, d)?,
            o: Linear::new(bld, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &ParamStore<S>,
        x: Var,
        memory: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, memory)?;
        let v = self.v.forward(tape, p, memory)?;
        let a = tape.attention(q, k, v, self.heads, causal)?;
        self.o.forward(tape, p, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
    drop: u64,
}

impl FeedForward {
    pub(crate) fn new<S: Scalar>(bld: &mut Builder<'_, S>, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(bld, &format!("{name}.up"), d, hidden)?,
            down: Linear::new(bld, &format!("{name}.down"), hidden, d)?,
            drop: bld.dropout_id(),
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &ParamStore<S>, x: Var, rate: f64) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, rate, self.drop)?;
        self.down.forward(tape, p, h)
    }
}

/// Pre-norm transformer block; `cross` adds attention over a memory.
#[derive(Clone, Debug)]
pub struct Block {
    ln_self: LayerNorm,
    self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    causal: bool,
    drops: [u64; 3],
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<S: Scalar>(
        bld: &mut Builder<'_, S>,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        causal: bool,
        cross: bool,
    ) -> Result<Self> {
        let cross = if cross {
            Some((
                LayerNorm::new(bld, &format!("{name}.ln_cross"), d)?,
                Attention::new(bld, &format!("{name}.cross_attn"), d, heads)?,
            ))
        } else {
            None
        };
        Ok(Block {
            ln_self: LayerNorm::new(bld, &format!("{name}.ln_self"), d)?,
            self_attn: Attention::new(bld, &format!("{name}.self_attn"), d, heads)?,
            cross,
            ln_ffn: LayerNorm::new(bld, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(bld, &format!("{name}.ffn"), d, ffn)?,
            causal,
            drops: [bld.dropout_id(), bld.dropout_id(), bld.dropout_id()],
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &ParamStore<S>,
        x: Var,
        memory: Option<Var>,
        rate: f64,
    ) -> Result<Var> {
        let h = self.ln_self.forward(tape, p, x)?;
        let a = self.self_attn.forward(tape, p, h, h, self.causal)?;
        let a = tape.dropout(a, rate, self.drops[0])?;
        let mut x = tape.add(x, a)?;
        if let (Some((ln, attn)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(tape, p, x)?;
            let a = attn.forward(tape, p, h, mem, false)?;
            let a = tape.dropout(a, rate, self.drops[1])?;
            x = tape.add(x, a)?;
        }
        let h = self.ln_ffn.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, h, rate)?;
        let f = tape.dropout(f, rate, self.drops[2])?;
        tape.add(x, f)
    }
}

/// Fixed sinusoidal position table `[len × d]`.
pub fn sinusoidal<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data.push(S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("positive extents")
}
