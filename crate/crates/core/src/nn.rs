//! Transformer building blocks with explicit forward caches and backward
//! passes, in `f64`.
//!
//! Every learnable tensor is an `Array2<f64>` (biases and norm affines are
//! `1 × n` rows). A gradient accumulator has the same type as the module it
//! belongs to, built with [`Params::zeros_like`].

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Named access to every learnable tensor, in a fixed order.
pub trait Params: Clone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>);

    fn params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, a) in z.params_mut() {
            a.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, a), (_, b)) in self.params_mut().into_iter().zip(other.params()) {
            a.scaled_add(scale, b);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break x;
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Array2<f64>,
    /// `1 × out`
    pub b: Array2<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: Array2::zeros((in_dim, out_dim)), b: Array2::zeros((1, out_dim)) }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self { w: trunc_normal(in_dim, out_dim, INIT_STD, rng), b: Array2::zeros((1, out_dim)) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Params for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

pub struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Array2::ones((1, dim)), beta: Array2::zeros((1, dim)) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
            for (g, &x) in row.iter_mut().zip(xh.iter()) {
                *g = r * (*g - mean_g - x * mean_gx);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self { fc1: Linear::init(dim, hidden, rng), fc2: Linear::init(hidden, dim, rng) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act);
        (y, MlpCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
    }
}

impl Params for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        self.fc1.collect_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_mut(&join(prefix, "fc2"), out);
    }
}

/// Multi-head self-attention without masking.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub n_heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

pub struct AttnCache {
    x: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    heads: Array2<f64>,
}

impl Attention {
    pub fn init<R: Rng + ?Sized>(dim: usize, n_heads: usize, rng: &mut R) -> Self {
        Self { n_heads, qkv: Linear::init(dim, 3 * dim, rng), proj: Linear::init(dim, dim, rng) }
    }

    fn dim(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let d = self.dim();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut heads = Array2::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t()) * scale;
            for mut row in p.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|s| (s - m).exp());
                let z = row.sum();
                row /= z;
            }
            heads.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let y = self.proj.forward(&heads);
        (y, AttnCache { x: x.clone(), qkv, probs, heads })
    }

    pub fn backward(&self, cache: &AttnCache, dy: &Array2<f64>, grad: &mut Attention) -> Array2<f64> {
        let d = self.dim();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dheads = self.proj.backward(&cache.heads, dy, &mut grad.proj);
        let mut dqkv = Array2::zeros(cache.qkv.dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let dout = dheads.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            // softmax backward, row by row
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let total = row.sum();
                row.zip_mut_with(&prow, |g, &pv| *g -= pv * total);
            }
            ds *= scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grad.qkv)
    }
}

impl Params for Attention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.qkv.collect(&join(prefix, "qkv"), out);
        self.proj.collect(&join(prefix, "proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        self.qkv.collect_mut(&join(prefix, "qkv"), out);
        self.proj.collect_mut(&join(prefix, "proj"), out);
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    mlp: MlpCache,
}

impl Block {
    pub fn init<R: Rng + ?Sized>(dim: usize, n_heads: usize, mlp_hidden: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::init(dim, n_heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::init(dim, mlp_hidden, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (a, ln1) = self.norm1.forward(x);
        let (att, attn) = self.attn.forward(&a);
        let x1 = x + &att;
        let (b, ln2) = self.norm2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&b);
        (x1 + &m, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, grad: &mut Block) -> Array2<f64> {
        let db = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let dx1 = dy + &self.norm2.backward(&cache.ln2, &db, &mut grad.norm2);
        let da = self.attn.backward(&cache.attn, &dx1, &mut grad.attn);
        dx1 + &self.norm1.backward(&cache.ln1, &da, &mut grad.norm1)
    }
}

impl Params for Block {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
    }
}

/// A stack of blocks followed by a final LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

pub struct TransformerCache {
    blocks: Vec<BlockCache>,
    norm: LnCache,
}

impl Transformer {
    pub fn init<R: Rng + ?Sized>(depth: usize, dim: usize, n_heads: usize, mlp_hidden: usize, rng: &mut R) -> Self {
        Self {
            blocks: (0..depth).map(|_| Block::init(dim, n_heads, mlp_hidden, rng)).collect(),
            norm: LayerNorm::new(dim),
        }
    }

    /// Returns the normed output, the per-layer stack (input, then each
    /// block output with the last replaced by the normed output) when
    /// requested, and the backward cache.
    pub fn forward(&self, x: &Array2<f64>, want_layers: bool) -> (Array2<f64>, Vec<Array2<f64>>, TransformerCache) {
        let mut layers = Vec::new();
        if want_layers {
            layers.push(x.clone());
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let (next, cache) = block.forward(&h);
            caches.push(cache);
            h = next;
            if want_layers {
                layers.push(h.clone());
            }
        }
        let (y, norm) = self.norm.forward(&h);
        if want_layers {
            *layers.last_mut().expect("non-empty") = y.clone();
        }
        (y, layers, TransformerCache { blocks: caches, norm })
    }

    pub fn backward(&self, cache: &TransformerCache, dy: &Array2<f64>, grad: &mut Transformer) -> Array2<f64> {
        let mut g = self.norm.backward(&cache.norm, dy, &mut grad.norm);
        for ((block, bc), bg) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            g = block.backward(bc, &g, bg);
        }
        g
    }
}

impl Params for Transformer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect(&join(prefix, "norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect_mut(&join(prefix, "norm"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    /// Checks `backward` of a scalar probe `sum(y * r)` against central
    /// differences on both the input and every parameter tensor.
    fn check<M: Params>(
        module: &M,
        x: &Array2<f64>,
        forward: impl Fn(&M, &Array2<f64>) -> Array2<f64>,
        backward: impl Fn(&M, &Array2<f64>, &Array2<f64>, &mut M) -> Array2<f64>,
        seed: u64,
    ) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let probe = rand_mat(forward(module, x).nrows(), forward(module, x).ncols(), &mut rng);
        let objective = |m: &M, x: &Array2<f64>| (forward(m, x) * &probe).sum();
        let mut grad = module.zeros_like();
        let dx = backward(module, x, &probe, &mut grad);
        let eps = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let num = (objective(module, &xp) - objective(module, &xm)) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[i];
            assert!(rel(ana, num) < 1e-5 || (ana - num).abs() < 1e-8, "dx[{i}]: {ana} vs {num}");
        }
        let names: Vec<String> = module.params().into_iter().map(|(n, _)| n).collect();
        let grads: Vec<Array2<f64>> = grad.params().into_iter().map(|(_, g)| g.clone()).collect();
        for (t, name) in names.iter().enumerate() {
            let len = module.params()[t].1.len();
            for i in 0..len {
                let mut mp = module.clone();
                let mut mm = module.clone();
                mp.params_mut()[t].1.as_slice_mut().unwrap()[i] += eps;
                mm.params_mut()[t].1.as_slice_mut().unwrap()[i] -= eps;
                let num = (objective(&mp, x) - objective(&mm, x)) / (2.0 * eps);
                let ana = grads[t].as_slice().unwrap()[i];
                assert!(rel(ana, num) < 1e-5 || (ana - num).abs() < 1e-8, "{name}[{i}]: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::init(4, 3, &mut rng);
        lin.b = rand_mat(1, 3, &mut rng);
        let x = rand_mat(5, 4, &mut rng);
        check(&lin, &x, |m, x| m.forward(x), |m, x, dy, g| m.backward(x, dy, g), 2);
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut ln = LayerNorm::new(6);
        ln.gamma = rand_mat(1, 6, &mut rng);
        ln.beta = rand_mat(1, 6, &mut rng);
        let x = rand_mat(4, 6, &mut rng);
        check(&ln, &x, |m, x| m.forward(x).0, |m, x, dy, g| m.backward(&m.forward(x).1, dy, g), 4);
    }

    #[test]
    fn attention_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut attn = Attention::init(8, 2, &mut rng);
        attn.qkv.w *= 20.0;
        let x = rand_mat(5, 8, &mut rng);
        check(&attn, &x, |m, x| m.forward(x).0, |m, x, dy, g| m.backward(&m.forward(x).1, dy, g), 6);
    }

    #[test]
    fn block_and_stack_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut t = Transformer::init(2, 8, 2, 16, &mut rng);
        for (_, p) in t.params_mut() {
            p.mapv_inplace(|v| v * 3.0 + 0.01);
        }
        let x = rand_mat(3, 8, &mut rng);
        check(&t, &x, |m, x| m.forward(x, false).0, |m, x, dy, g| m.backward(&m.forward(x, false).2, dy, g), 8);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - num).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_stack_shape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let t = Transformer::init(3, 8, 2, 16, &mut rng);
        let x = rand_mat(4, 8, &mut rng);
        let (y, layers, _) = t.forward(&x, true);
        assert_eq!(layers.len(), 4);
        assert_eq!(layers[0], x);
        assert_eq!(layers[3], y);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = trunc_normal(100, 100, 0.02, &mut rng);
        assert!(m.iter().all(|v| v.abs() <= 0.04));
        let std = (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
        assert!((std - 0.0176).abs() < 0.001, "{std}");
    }
}
