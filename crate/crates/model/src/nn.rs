//! Parameters, layers and the per-call execution context.

use crate::ops::{self, KeyMask};
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::cell::{Cell, RefCell};
use std::sync::Arc;

type Result<T> = candle_core::Result<T>;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    FanIn(usize),
    Normal(f64),
    Zeros,
    Ones,
}

/// Named trainable variables in creation order.
#[derive(Clone, Default)]
pub struct Params {
    vars: Vec<(String, Var)>,
}

impl Params {
    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_elements(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn extend(&mut self, other: Params) {
        self.vars.extend(other.vars);
    }

    /// Overwrites every parameter with seeded values of the given scale; used
    /// by tests that must avoid zero-initialized heads.
    pub fn randomize(&self, seed: u64, scale: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, v) in &self.vars {
            let vals: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-scale..scale)).collect();
            let t = Tensor::from_vec(vals, v.shape(), v.device())?.to_dtype(v.dtype())?;
            v.set(&t)?;
        }
        Ok(())
    }
}

struct Builder {
    params: Params,
    rng: ChaCha8Rng,
    dtype: DType,
}

/// Hierarchical parameter namespace used while constructing a model.
#[derive(Clone)]
pub struct Scope<'a> {
    builder: &'a RefCell<Builder>,
    prefix: String,
}

pub struct ParamBuilder(RefCell<Builder>);

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self(RefCell::new(Builder { params: Params::default(), rng: ChaCha8Rng::seed_from_u64(seed), dtype }))
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { builder: &self.0, prefix: String::new() }
    }

    pub fn finish(self) -> Params {
        self.0.into_inner().params
    }
}

impl Scope<'_> {
    pub fn child(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { builder: self.builder, prefix }
    }

    pub fn dtype(&self) -> DType {
        self.builder.borrow().dtype
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut b = self.builder.borrow_mut();
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| b.rng.random_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut b.rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let t = Tensor::from_vec(vals, shape, &Device::Cpu)?.to_dtype(b.dtype)?;
        let var = Var::from_tensor(&t)?;
        let full = self.child(name).prefix;
        if b.params.vars.iter().any(|(n, _)| *n == full) {
            candle_core::bail!("duplicate parameter {full}");
        }
        let out = var.as_tensor().clone();
        b.params.vars.push((full, var));
        Ok(out)
    }
}

/// Training flag, dropout randomness and instrumentation for one pass.
pub struct Ctx {
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
    decoder_cross_calls: Cell<usize>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn train(seed: u64) -> Self {
        Self::new(true, seed)
    }

    fn new(train: bool, seed: u64) -> Self {
        Self { train, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)), decoder_cross_calls: Cell::new(0) }
    }

    pub fn count_decoder_cross(&self) {
        self.decoder_cross_calls.set(self.decoder_cross_calls.get() + 1);
    }

    /// Decoder cross-attention invocations since the last call; resets the counter.
    pub fn take_decoder_cross_calls(&self) -> usize {
        self.decoder_cross_calls.replace(0)
    }

    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f32> = (0..x.elem_count()).map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        x * mask
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self { weight: s.param("weight", &[d_out, d_in], Init::FanIn(d_in))?, bias: s.param("bias", &[d_out], Init::FanIn(d_in))? })
    }

    pub fn zeros(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self { weight: s.param("weight", &[d_out, d_in], Init::Zeros)?, bias: s.param("bias", &[d_out], Init::Zeros)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().unwrap_or(&0);
        let rows = x.elem_count() / d_in.max(1);
        let y = ops::bias_add(&x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?, &self.bias)?;
        let mut out = dims;
        *out.last_mut().expect("non-scalar input") = self.weight.dim(0)?;
        y.reshape(out)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
}

impl LayerNorm {
    pub fn new(s: &Scope, d: usize) -> Result<Self> {
        Ok(Self { gain: s.param("gain", &[d], Init::Ones)?, shift: s.param("shift", &[d], Init::Zeros)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x)?.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Gelu,
    Relu,
}

/// Linear, activation, linear.
#[derive(Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    act: Act,
}

impl Mlp {
    pub fn new(s: &Scope, d_in: usize, d_hidden: usize, d_out: usize, act: Act) -> Result<Self> {
        Ok(Self { l1: Linear::new(&s.child("l1"), d_in, d_hidden)?, l2: Linear::new(&s.child("l2"), d_hidden, d_out)?, act })
    }

    /// Same shape, with the output layer starting at zero.
    pub fn zero_output(s: &Scope, d_in: usize, d_hidden: usize, d_out: usize, act: Act) -> Result<Self> {
        Ok(Self { l1: Linear::new(&s.child("l1"), d_in, d_hidden)?, l2: Linear::zeros(&s.child("l2"), d_hidden, d_out)?, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.forward(x)?;
        let h = match self.act {
            Act::Gelu => ops::gelu(&h)?,
            Act::Relu => h.relu()?,
        };
        self.l2.forward(&h)
    }
}

#[derive(Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(s: &Scope, n: usize, d: usize) -> Result<Self> {
        Ok(Self { table: s.param("table", &[n, d], Init::Normal(0.02))? })
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::from_slice(ids, ids.len(), self.table.device())?;
        self.table.index_select(&idx, 0)
    }
}

#[derive(Clone)]
pub struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHead {
    pub fn new(s: &Scope, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&s.child("q"), d, d)?,
            k: Linear::new(&s.child("k"), d, d)?,
            v: Linear::new(&s.child("v"), d, d)?,
            o: Linear::new(&s.child("o"), d, d)?,
            heads,
        })
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, mask: KeyMask) -> Result<Tensor> {
        let a = ops::attention(&self.q.forward(xq)?, &self.k.forward(xkv)?, &self.v.forward(xkv)?, self.heads, mask)?;
        self.o.forward(&a)
    }
}

/// Pre-norm transformer block; self-attention when no memory is given.
#[derive(Clone)]
pub struct Block {
    norm_q: LayerNorm,
    norm_kv: Option<LayerNorm>,
    attn: MultiHead,
    norm_ff: LayerNorm,
    ff: Mlp,
    dropout: f64,
}

impl Block {
    pub fn new(s: &Scope, d: usize, heads: usize, ffn_mult: usize, dropout: f64, cross: bool) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(&s.child("norm_q"), d)?,
            norm_kv: if cross { Some(LayerNorm::new(&s.child("norm_kv"), d)?) } else { None },
            attn: MultiHead::new(&s.child("attn"), d, heads)?,
            norm_ff: LayerNorm::new(&s.child("norm_ff"), d)?,
            ff: Mlp::new(&s.child("ff"), d, ffn_mult * d, d, Act::Gelu)?,
            dropout,
        })
    }

    /// Self-attention over `x: [n, l, d]` with per-key validity `[n, l]`.
    pub fn forward_self(&self, x: &Tensor, mask: &Arc<Vec<bool>>, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm_q.forward(x)?;
        let a = self.attn.forward(&h, &h, KeyMask::PerKey(mask.clone()))?;
        self.finish(x, &a, ctx)
    }

    /// Cross-attention of `x: [n, lq, d]` to `mem: [n, lk, d]`.
    ///
    /// Rows whose `gate` entry is false are returned unchanged, so a query
    /// without any valid key is an identity residual.
    pub fn forward_cross(&self, x: &Tensor, mem: &Tensor, mask: KeyMask, gate: Option<&[bool]>, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm_q.forward(x)?;
        let m = match &self.norm_kv {
            Some(n) => n.forward(mem)?,
            None => mem.clone(),
        };
        let a = self.attn.forward(&h, &m, mask)?;
        let y = self.finish(x, &a, ctx)?;
        match gate {
            None => Ok(y),
            Some(g) if g.iter().all(|&b| b) => Ok(y),
            Some(g) => {
                let (n, l, _) = x.dims3()?;
                if g.len() != n * l {
                    candle_core::bail!("gate has {} entries, expected {}", g.len(), n * l);
                }
                let gv: Vec<f32> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let gt = Tensor::from_vec(gv, (n, l, 1), x.device())?.to_dtype(x.dtype())?;
                x + (y - x)?.broadcast_mul(&gt)?
            }
        }
    }

    fn finish(&self, x: &Tensor, attn_out: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let x = (x + ctx.dropout(attn_out, self.dropout)?)?;
        let f = self.ff.forward(&self.norm_ff.forward(&x)?)?;
        &x + ctx.dropout(&f, self.dropout)?
    }

    /// Zeroes the residual branches so the block becomes the identity.
    pub fn make_identity(&self) -> Result<()> {
        for t in [&self.attn.o.weight, &self.attn.o.bias, &self.ff.l2.weight, &self.ff.l2.bias] {
            zero_in_place(t)?;
        }
        Ok(())
    }
}

fn zero_in_place(t: &Tensor) -> Result<()> {
    // parameter tensors share storage with their Var, so this writes through
    t.slice_set(&t.zeros_like()?, 0, 0)
}

/// Builds a `[rows, 4]` pose feature tensor `(x, y, sin yaw, cos yaw)`.
pub fn pose_features(poses: &[[f64; 4]], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = poses.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (poses.len(), 4), &Device::Cpu)?.to_dtype(dtype)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    log_softmax_last(x)?.exp()
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_block_returns_input() {
        let pb = ParamBuilder::new(3, DType::F64);
        let b = Block::new(&pb.root().child("b"), 8, 2, 4, 0.0, false).unwrap();
        b.make_identity().unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let mask = Arc::new(vec![true; 10]);
        let y = b.forward_self(&x, &mask, &Ctx::eval()).unwrap();
        let d = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn gated_rows_are_untouched() {
        let pb = ParamBuilder::new(4, DType::F64);
        let b = Block::new(&pb.root().child("b"), 8, 2, 4, 0.0, true).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 1, 8), &Device::Cpu).unwrap();
        let m = Tensor::randn(0f64, 1.0, (2, 3, 8), &Device::Cpu).unwrap();
        let mask = KeyMask::PerKey(Arc::new(vec![true, true, false, false, false, false]));
        let y = b.forward_cross(&x, &m, mask, Some(&[true, false]), &Ctx::eval()).unwrap();
        let x1 = x.get(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let y1 = y.get(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(x1, y1);
        let x0 = x.get(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let y0 = y.get(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_ne!(x0, y0);
    }

    #[test]
    fn builder_is_deterministic_and_named() {
        let make = || {
            let pb = ParamBuilder::new(9, DType::F32);
            Linear::new(&pb.root().child("enc").child("proj"), 3, 4).unwrap();
            pb.finish()
        };
        let (a, b) = (make(), make());
        assert_eq!(a.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["enc.proj.weight", "enc.proj.bias"]);
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x.flatten_all().unwrap().to_vec1::<f32>().unwrap(), y.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn dropout_is_seeded_and_off_in_eval() {
        let x = Tensor::ones((4, 16), DType::F32, &Device::Cpu).unwrap();
        let a = Ctx::train(5).dropout(&x, 0.5).unwrap();
        let b = Ctx::train(5).dropout(&x, 0.5).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let e = Ctx::eval().dropout(&x, 0.5).unwrap();
        assert!(e.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 1.0));
    }
}
