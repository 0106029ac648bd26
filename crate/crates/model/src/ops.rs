//! Fused CPU kernels with hand-written backward passes.
//!
//! Candle composes softmax, layer norm and GELU out of many small elementwise
//! kernels, and their backward graphs dominate training time on the CPU. Each
//! op here runs in one pass (internally in f64) and supports f32 and f64
//! tensors.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Result, Shape, Tensor};
use std::sync::{Arc, Mutex};

fn read(storage: &CpuStorage, layout: &Layout) -> Result<Vec<f64>> {
    let (start, end) = layout.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("fused op expects a contiguous input".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => candle_core::bail!("fused op supports f32 and f64 only"),
    })
}

fn write(like: &CpuStorage, v: Vec<f64>) -> CpuStorage {
    match like {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

fn values(t: &Tensor) -> Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn tensor_like(v: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
}

/// Key validity for [`attention`].
#[derive(Debug, Clone)]
pub enum KeyMask {
    /// `[n, lk]`, shared by every query of a batch row.
    PerKey(Arc<Vec<bool>>),
    /// `[n, lq, lk]`.
    PerQuery(Arc<Vec<bool>>),
}

impl KeyMask {
    #[inline]
    fn valid(&self, n: usize, i: usize, j: usize, lq: usize, lk: usize) -> bool {
        match self {
            KeyMask::PerKey(m) => m[n * lk + j],
            KeyMask::PerQuery(m) => m[(n * lq + i) * lk + j],
        }
    }
}

struct Attention {
    heads: usize,
    mask: KeyMask,
    dims: (usize, usize, usize, usize),
    /// Softmax weights `[n, heads, lq, lk]` saved by the forward pass.
    probs: Mutex<Option<Arc<Vec<f64>>>>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

impl Attention {
    /// Softmax weights of every (row, head, query); all-zero rows where no
    /// key is valid.
    fn all_probs(&self, q: &[f64], k: &[f64]) -> Vec<f64> {
        let (nb, lq, lk, d) = self.dims;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; nb * self.heads * lq * lk];
        for n in 0..nb {
            for h in 0..self.heads {
                for i in 0..lq {
                    let row = &mut out[((n * self.heads + h) * lq + i) * lk..][..lk];
                    let qi = &q[(n * lq + i) * d + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        if self.mask.valid(n, i, j, lq, lk) {
                            *r = scale * dot(qi, &k[(n * lk + j) * d + h * dh..][..dh]);
                            max = max.max(*r);
                        } else {
                            *r = f64::NEG_INFINITY;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.fill(0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = if *r == f64::NEG_INFINITY { 0.0 } else { (*r - max).exp() };
                        z += *r;
                    }
                    let inv = 1.0 / z;
                    row.iter_mut().for_each(|r| *r *= inv);
                }
            }
        }
        out
    }
}

impl CustomOp3 for Attention {
    fn name(&self) -> &'static str {
        "fused-attention"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (nb, lq, lk, d) = self.dims;
        let dh = d / self.heads;
        let (q, k, v) = (read(s1, l1)?, read(s2, l2)?, read(s3, l3)?);
        let p = self.all_probs(&q, &k);
        let mut out = vec![0.0; nb * lq * d];
        for n in 0..nb {
            for h in 0..self.heads {
                for i in 0..lq {
                    let pr = &p[((n * self.heads + h) * lq + i) * lk..][..lk];
                    let o = &mut out[(n * lq + i) * d + h * dh..][..dh];
                    for (j, &pj) in pr.iter().enumerate() {
                        if pj != 0.0 {
                            axpy(o, pj, &v[(n * lk + j) * d + h * dh..][..dh]);
                        }
                    }
                }
            }
        }
        *self.probs.lock().expect("attention cache poisoned") = Some(Arc::new(p));
        Ok((write(s1, out), Shape::from((nb, lq, d))))
    }

    fn bwd(
        &self,
        q_t: &Tensor,
        k_t: &Tensor,
        v_t: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (nb, lq, lk, d) = self.dims;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, k, v, g) = (values(q_t)?, values(k_t)?, values(v_t)?, values(grad)?);
        let cached = self.probs.lock().expect("attention cache poisoned").clone();
        let p = match cached {
            Some(p) => p,
            None => Arc::new(self.all_probs(&q, &k)),
        };
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut dp = vec![0.0; lk];
        for n in 0..nb {
            for h in 0..self.heads {
                for i in 0..lq {
                    let pr = &p[((n * self.heads + h) * lq + i) * lk..][..lk];
                    let qoff = (n * lq + i) * d + h * dh;
                    let gi = &g[qoff..][..dh];
                    let mut total = 0.0;
                    for j in 0..lk {
                        if pr[j] == 0.0 {
                            continue;
                        }
                        let off = (n * lk + j) * d + h * dh;
                        dp[j] = dot(gi, &v[off..][..dh]);
                        total += pr[j] * dp[j];
                        axpy(&mut dv[off..][..dh], pr[j], gi);
                    }
                    let qi = &q[qoff..][..dh];
                    for j in 0..lk {
                        if pr[j] == 0.0 {
                            continue;
                        }
                        let ds = scale * pr[j] * (dp[j] - total);
                        let off = (n * lk + j) * d + h * dh;
                        axpy(&mut dq[qoff..][..dh], ds, &k[off..][..dh]);
                        axpy(&mut dk[off..][..dh], ds, qi);
                    }
                }
            }
        }
        Ok((Some(tensor_like(dq, q_t)?), Some(tensor_like(dk, k_t)?), Some(tensor_like(dv, v_t)?)))
    }
}

/// Multi-head scaled dot-product attention on `[n, l, heads·dh]` layouts.
///
/// Masked keys are excluded exactly rather than through a large negative
/// bias; a query with no valid key yields a zero row.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: KeyMask) -> Result<Tensor> {
    let (nb, lq, d) = q.dims3()?;
    let (nk, lk, dk) = k.dims3()?;
    if nk != nb || dk != d || v.dims3()? != (nb, lk, d) || d % heads != 0 {
        candle_core::bail!("attention shape mismatch: q {:?} k {:?} v {:?} heads {heads}", q.shape(), k.shape(), v.shape());
    }
    let expected = match &mask {
        KeyMask::PerKey(m) => (m.len(), nb * lk),
        KeyMask::PerQuery(m) => (m.len(), nb * lq * lk),
    };
    if expected.0 != expected.1 {
        candle_core::bail!("attention mask has {} entries, expected {}", expected.0, expected.1);
    }
    let op = Attention { heads, mask, dims: (nb, lq, lk, d), probs: Mutex::new(None) };
    q.contiguous()?.apply_op3(&k.contiguous()?, &v.contiguous()?, op)
}

struct Gelu;

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = read(s, l)?;
        let y = x.iter().map(|&x| x * phi(x)).collect();
        Ok((write(s, y), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let x = values(arg)?;
        let y = values(res)?;
        let g = values(grad)?;
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let dx = x
            .iter()
            .zip(&y)
            .zip(&g)
            .map(|((&x, &y), &g)| {
                // the forward output already holds x·Φ(x)
                let cdf = if x.abs() > 1e-3 { y / x } else { phi(x) };
                g * (cdf + x * inv_sqrt_2pi * (-0.5 * x * x).exp())
            })
            .collect();
        Ok(Some(tensor_like(dx, arg)?))
    }
}

struct BiasAdd;

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (_, d) = l1.shape().dims2()?;
        let mut x = read(s1, l1)?;
        let b = read(s2, l2)?;
        if b.len() != d {
            candle_core::bail!("bias-add: bias of {} for width {d}", b.len());
        }
        for row in x.chunks_mut(d.max(1)) {
            for (v, bi) in row.iter_mut().zip(&b) {
                *v += bi;
            }
        }
        Ok((write(s1, x), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let d = b.elem_count();
        let g = values(grad)?;
        let mut gb = vec![0.0; d];
        for row in g.chunks(d.max(1)) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Ok((Some(grad.clone()), Some(tensor_like(gb, b)?)))
    }
}

/// `x [rows, d] + b [d]` with a single-pass bias gradient.
pub fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&b.contiguous()?, BiasAdd)
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

pub const LN_EPS: f64 = 1e-5;

struct NormNoAffine;

fn rows(len: usize, width: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..len / width.max(1)).map(move |r| r * width..(r + 1) * width)
}

fn row_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

impl CustomOp1 for NormNoAffine {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = read(s, l)?;
        let w = *l.dims().last().unwrap_or(&1);
        let mut y = vec![0.0; x.len()];
        for r in rows(x.len(), w) {
            let (mean, inv) = row_stats(&x[r.clone()]);
            for i in r {
                y[i] = (x[i] - mean) * inv;
            }
        }
        Ok((write(s, y), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let x = values(arg)?;
        let g = values(grad)?;
        let w = *arg.dims().last().unwrap_or(&1);
        let mut dx = vec![0.0; x.len()];
        for r in rows(x.len(), w) {
            let (mean, inv) = row_stats(&x[r.clone()]);
            let n = w as f64;
            let mut g_mean = 0.0;
            let mut gx_mean = 0.0;
            for i in r.clone() {
                let xh = (x[i] - mean) * inv;
                g_mean += g[i];
                gx_mean += g[i] * xh;
            }
            g_mean /= n;
            gx_mean /= n;
            for i in r {
                let xh = (x[i] - mean) * inv;
                dx[i] = inv * (g[i] - g_mean - xh * gx_mean);
            }
        }
        Ok(Some(tensor_like(dx, arg)?))
    }
}

/// Layer normalization over the last axis without scale or shift.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(NormNoAffine)
}

struct MaskedMax {
    mask: Arc<Vec<bool>>,
}

impl MaskedMax {
    /// Index of the first maximal valid entry per (row, channel).
    fn argmax(&self, x: &[f64], n: usize, l: usize, d: usize) -> Vec<Option<usize>> {
        let mut best: Vec<Option<usize>> = vec![None; n * d];
        for r in 0..n {
            for t in 0..l {
                if !self.mask[r * l + t] {
                    continue;
                }
                for c in 0..d {
                    let idx = (r * l + t) * d + c;
                    let slot = &mut best[r * d + c];
                    if slot.is_none_or(|b| x[idx] > x[b]) {
                        *slot = Some(idx);
                    }
                }
            }
        }
        best
    }
}

impl CustomOp1 for MaskedMax {
    fn name(&self) -> &'static str {
        "masked-max-pool"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, len, d) = l.shape().dims3()?;
        let x = read(s, l)?;
        let y = self.argmax(&x, n, len, d).into_iter().map(|b| b.map_or(0.0, |i| x[i])).collect();
        Ok((write(s, y), Shape::from((n, d))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let (n, len, d) = arg.dims3()?;
        let x = values(arg)?;
        let g = values(grad)?;
        let mut dx = vec![0.0; x.len()];
        for (slot, b) in self.argmax(&x, n, len, d).into_iter().enumerate() {
            if let Some(i) = b {
                dx[i] += g[slot];
            }
        }
        Ok(Some(tensor_like(dx, arg)?))
    }
}

/// Max over axis 1 of `[n, l, d]` restricted to valid entries (`mask` is
/// `[n, l]`); rows without any valid entry pool to zero.
pub fn masked_max(x: &Tensor, mask: Arc<Vec<bool>>) -> Result<Tensor> {
    let (n, l, _) = x.dims3()?;
    if mask.len() != n * l {
        candle_core::bail!("pool mask has {} entries, expected {}", mask.len(), n * l);
    }
    x.contiguous()?.apply_op1(MaskedMax { mask })
}

struct SmoothL1 {
    delta: f64,
}

impl CustomOp1 for SmoothL1 {
    fn name(&self) -> &'static str {
        "smooth-l1"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = read(s, l)?;
        let y = x.iter().map(|&e| huber(e, self.delta)).collect();
        Ok((write(s, y), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let x = values(arg)?;
        let g = values(grad)?;
        let dx = x.iter().zip(&g).map(|(&e, &g)| g * e.clamp(-self.delta, self.delta)).collect();
        Ok(Some(tensor_like(dx, arg)?))
    }
}

pub fn huber(e: f64, delta: f64) -> f64 {
    if e.abs() < delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

/// Elementwise Huber loss of residuals.
pub fn smooth_l1(residual: &Tensor, delta: f64) -> Result<Tensor> {
    residual.contiguous()?.apply_op1(SmoothL1 { delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += eps;
                b[i] -= eps;
                (f(&a) - f(&b)) / (2.0 * eps)
            })
            .collect()
    }

    fn weighted_sum(t: &Tensor, w: &[f64]) -> Result<Tensor> {
        let wt = Tensor::from_vec(w.to_vec(), t.shape(), t.device())?;
        (t * wt)?.sum_all()
    }

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin() * 1.7).collect()
    }

    /// Dense reference built from candle primitives.
    fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: &[bool]) -> Result<Tensor> {
        let (n, lq, d) = q.dims3()?;
        let lk = k.dim(1)?;
        let dh = d / heads;
        let split = |t: &Tensor, l| t.reshape((n, l, heads, dh))?.transpose(1, 2)?.contiguous();
        let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
        let s = (qh.matmul(&kh.t()?)? / (dh as f64).sqrt())?;
        let bias: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { -1e30 }).collect();
        let bias = Tensor::from_vec(bias, (n, 1, 1, lk), q.device())?;
        let s = s.broadcast_add(&bias)?;
        let p = candle_nn::ops::softmax_last_dim(&s)?;
        p.matmul(&vh)?.transpose(1, 2)?.reshape((n, lq, d))
    }

    #[test]
    fn attention_matches_dense_reference() {
        let dev = Device::Cpu;
        let (n, lq, lk, d, h) = (2, 3, 4, 6, 2);
        let q = Tensor::from_vec(sample(n * lq * d, 1), (n, lq, d), &dev).unwrap();
        let k = Tensor::from_vec(sample(n * lk * d, 2), (n, lk, d), &dev).unwrap();
        let v = Tensor::from_vec(sample(n * lk * d, 3), (n, lk, d), &dev).unwrap();
        let mask = vec![true, false, true, true, false, true, true, false];
        let a = attention(&q, &k, &v, h, KeyMask::PerKey(Arc::new(mask.clone()))).unwrap();
        let b = reference_attention(&q, &k, &v, h, &mask).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn attention_without_keys_is_zero() {
        let dev = Device::Cpu;
        let q = Tensor::ones((1, 2, 4), DType::F64, &dev).unwrap();
        let k = Tensor::ones((1, 3, 4), DType::F64, &dev).unwrap();
        let a = attention(&q, &k, &k, 2, KeyMask::PerKey(Arc::new(vec![false; 3]))).unwrap();
        assert!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let (n, lq, lk, d, h) = (2, 2, 3, 4, 2);
        let mask: Vec<bool> = (0..n * lq * lk).map(|i| i % 4 != 1).collect();
        let mask = Arc::new(mask);
        let xs = [sample(n * lq * d, 5), sample(n * lk * d, 6), sample(n * lk * d, 7)];
        let w = sample(n * lq * d, 9);
        let run = |q: &[f64], k: &[f64], v: &[f64]| -> f64 {
            let q = Tensor::from_vec(q.to_vec(), (n, lq, d), &dev).unwrap();
            let k = Tensor::from_vec(k.to_vec(), (n, lk, d), &dev).unwrap();
            let v = Tensor::from_vec(v.to_vec(), (n, lk, d), &dev).unwrap();
            let a = attention(&q, &k, &v, h, KeyMask::PerQuery(mask.clone())).unwrap();
            weighted_sum(&a, &w).unwrap().to_scalar::<f64>().unwrap()
        };
        let q = Var::from_vec(xs[0].clone(), (n, lq, d), &dev).unwrap();
        let k = Var::from_vec(xs[1].clone(), (n, lk, d), &dev).unwrap();
        let v = Var::from_vec(xs[2].clone(), (n, lk, d), &dev).unwrap();
        let a = attention(&q, &k, &v, h, KeyMask::PerQuery(mask.clone())).unwrap();
        let grads = weighted_sum(&a, &w).unwrap().backward().unwrap();
        let got: Vec<Vec<f64>> =
            [&q, &k, &v].iter().map(|t| grads.get(t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()).collect();
        let num = [
            numeric_grad(|x| run(x, &xs[1], &xs[2]), &xs[0]),
            numeric_grad(|x| run(&xs[0], x, &xs[2]), &xs[1]),
            numeric_grad(|x| run(&xs[0], &xs[1], x), &xs[2]),
        ];
        for (g, e) in got.iter().zip(&num) {
            for (a, b) in g.iter().zip(e) {
                assert!((a - b).abs() < 1e-7, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let x0 = sample(12, 4);
        let w = sample(12, 8);
        type Op = fn(&Tensor) -> Result<Tensor>;
        let ops: [(Op, (usize, usize)); 3] = [(gelu, (3, 4)), (layer_norm, (3, 4)), (|t| smooth_l1(t, 1.0), (3, 4))];
        for (op, shape) in ops {
            let f = |x: &[f64]| {
                let t = Tensor::from_vec(x.to_vec(), shape, &dev).unwrap();
                weighted_sum(&op(&t).unwrap(), &w).unwrap().to_scalar::<f64>().unwrap()
            };
            let v = Var::from_vec(x0.clone(), shape, &dev).unwrap();
            let g = weighted_sum(&op(&v).unwrap(), &w).unwrap().backward().unwrap();
            let got = g.get(&v).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in got.iter().zip(numeric_grad(f, &x0)) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn bias_add_gradient_sums_rows() {
        let dev = Device::Cpu;
        let x = Var::from_vec(sample(6, 1), (3, 2), &dev).unwrap();
        let b = Var::from_vec(vec![0.5, -1.0], 2, &dev).unwrap();
        let y = bias_add(&x, &b).unwrap();
        let w = sample(6, 2);
        let g = weighted_sum(&y, &w).unwrap().backward().unwrap();
        let gb = g.get(&b).unwrap().to_vec1::<f64>().unwrap();
        assert!((gb[0] - (w[0] + w[2] + w[4])).abs() < 1e-15 && (gb[1] - (w[1] + w[3] + w[5])).abs() < 1e-15);
        let expect = x.as_tensor().broadcast_add(b.as_tensor()).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), expect.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn masked_max_ignores_invalid_entries() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(vec![5.0, -1.0, 1.0, 2.0, 9.0, 9.0, -3.0, -4.0], (2, 2, 2), &dev).unwrap();
        let mask = Arc::new(vec![false, true, false, false]);
        let y = masked_max(&x, mask).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(sample(24, 3), (2, 3, 4), &dev).unwrap();
        let a = layer_norm(&x).unwrap();
        let b = layer_norm(&x.to_dtype(DType::F32).unwrap()).unwrap().to_dtype(DType::F64).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6);
    }
}
