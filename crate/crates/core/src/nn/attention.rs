use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{gelu_backward, gelu_forward, join, LayerNorm, LayerNormCache, Linear, Param, Visit};

/// Multi-head self-attention restricted to consecutive groups of `group` rows
/// (one group per frame, so tokens attend within their own frame).
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
    group: usize,
}

impl Attention {
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "embedding width must split evenly across heads");
        Self { qkv: Linear::new(dim, 3 * dim, rng), out: Linear::new(dim, dim, rng), heads }
    }

    fn dim(&self) -> usize {
        self.out.outputs()
    }

    pub fn forward(&self, x: &Array2<f64>, group: usize) -> (Array2<f64>, AttentionCache) {
        let (n, d) = (x.nrows(), self.dim());
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut mixed = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(n / group * self.heads);
        for g in 0..n / group {
            let rows = g * group..(g + 1) * group;
            for h in 0..self.heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut a = q.dot(&k.t()) * scale;
                for mut row in a.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                mixed.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&a.dot(&v));
                probs.push(a);
            }
        }
        let y = self.out.forward(&mixed);
        (y, AttentionCache { qkv, probs, mixed, group })
    }

    pub fn backward(&mut self, x: &Array2<f64>, cache: &AttentionCache, dy: &Array2<f64>) -> Array2<f64> {
        let (n, d) = (x.nrows(), self.dim());
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let group = cache.group;
        let dmixed = self.out.backward(&cache.mixed, dy);
        let mut dqkv = Array2::zeros((n, 3 * d));
        let mut probs = cache.probs.iter();
        for g in 0..n / group {
            let rows = g * group..(g + 1) * group;
            for h in 0..self.heads {
                let a = probs.next().expect("one cache entry per group and head");
                let q = cache.qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = cache.qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = cache.qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let dout = dmixed.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let da = dout.dot(&v.t());
                let dv = a.t().dot(&dout);
                let mut ds = &da * a;
                let row_dot = ds.sum_axis(Axis(1));
                for (mut row, (ar, &rd)) in ds.rows_mut().into_iter().zip(a.rows().into_iter().zip(&row_dot)) {
                    row.zip_mut_with(&ar, |s, &p| *s = (*s - p * rd) * scale);
                }
                dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh]).assign(&ds.t().dot(&q));
                dqkv.slice_mut(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
            }
        }
        self.qkv.backward(x, &dqkv)
    }

    pub fn macs(&self, rows: usize, group: usize) -> u64 {
        let d = self.dim() as u64;
        self.qkv.macs(rows) + self.out.macs(rows) + 2 * rows as u64 * group as u64 * d
    }
}

impl Visit for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))` then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    h1: Array2<f64>,
    attn: AttentionCache,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    pub fn new<R: Rng>(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, mlp_ratio * dim, rng),
            fc2: Linear::new(mlp_ratio * dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, group: usize) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1, group);
        let x1 = x + &a;
        let (h2, ln2) = self.ln2.forward(&x1);
        let pre = self.fc1.forward(&h2);
        let act = gelu_forward(&pre);
        let y = &x1 + &self.fc2.forward(&act);
        (y, BlockCache { ln1, h1, attn, ln2, h2, pre, act })
    }

    pub fn backward(&mut self, c: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let dact = self.fc2.backward(&c.act, dy);
        let dpre = gelu_backward(&c.pre, &dact);
        let dh2 = self.fc1.backward(&c.h2, &dpre);
        let dx1 = dy + &self.ln2.backward(&c.ln2, &dh2);
        let dh1 = self.attn.backward(&c.h1, &c.attn, &dx1);
        &dx1 + &self.ln1.backward(&c.ln1, &dh1)
    }

    pub fn macs(&self, rows: usize, group: usize) -> u64 {
        self.attn.macs(rows, group) + self.fc1.macs(rows) + self.fc2.macs(rows)
    }
}

impl Visit for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
