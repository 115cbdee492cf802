//! Building blocks with explicit backward passes.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};

const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates into `grad` and returns `d loss / d x`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub(crate) fn push_views<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    pub(crate) fn push_views_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut d = dy.clone();
    d.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    d
}

/// Per-row layer normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let normalized = &centered * &inv_std.clone().insert_axis(Axis(1));
        let y = &normalized * &self.gamma + &self.beta;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mean_d = dxhat.sum_axis(Axis(1)) / d;
        let mean_dx = (&dxhat * &cache.normalized).sum_axis(Axis(1)) / d;
        let inner = dxhat - &mean_d.insert_axis(Axis(1)) - &(&cache.normalized * &mean_dx.insert_axis(Axis(1)));
        inner * &cache.inv_std.clone().insert_axis(Axis(1))
    }

    pub(crate) fn push_views<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }

    pub(crate) fn push_views_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view_mut().into_dyn()));
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

pub struct AttentionCache {
    x_query: Array2<f64>,
    x_memory: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per head, `n_query x n_memory`.
    weights: Vec<Array2<f64>>,
    mixed: Array2<f64>,
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Attention {
    pub fn zeros(d: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.output]
    }

    pub fn forward(&self, x_query: &Array2<f64>, x_memory: &Array2<f64>, heads: usize) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(x_query);
        let k = self.key.forward(x_memory);
        let v = self.value.forward(x_memory);
        let d = q.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut mixed = Array2::zeros((q.nrows(), d));
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut w = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut w);
            mixed.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
            weights.push(w);
        }
        let y = self.output.forward(&mixed);
        let cache = AttentionCache {
            x_query: x_query.clone(),
            x_memory: x_memory.clone(),
            q,
            k,
            v,
            weights,
            mixed,
        };
        (y, cache)
    }

    /// Returns gradients w.r.t. the query-side and memory-side inputs.
    pub fn backward(&self, cache: &AttentionCache, dy: &Array2<f64>, heads: usize, grad: &mut Attention) -> (Array2<f64>, Array2<f64>) {
        let d_mixed = self.output.backward(&cache.mixed, dy, &mut grad.output);
        let d = cache.q.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, w) in cache.weights.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_out = d_mixed.slice(cols);
            let dw = d_out.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&w.t().dot(&d_out));
            let inner = (&dw * w).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_scores = (dw - &inner) * w * scale;
            dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
        }
        let dx_query = self.query.backward(&cache.x_query, &dq, &mut grad.query);
        let dx_memory = self.key.backward(&cache.x_memory, &dk, &mut grad.key)
            + self.value.backward(&cache.x_memory, &dv, &mut grad.value);
        (dx_query, dx_memory)
    }

    pub(crate) fn push_views<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.query.push_views(&format!("{prefix}.query"), out);
        self.key.push_views(&format!("{prefix}.key"), out);
        self.value.push_views(&format!("{prefix}.value"), out);
        self.output.push_views(&format!("{prefix}.output"), out);
    }

    pub(crate) fn push_views_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        self.query.push_views_mut(&format!("{prefix}.query"), out);
        self.key.push_views_mut(&format!("{prefix}.key"), out);
        self.value.push_views_mut(&format!("{prefix}.value"), out);
        self.output.push_views_mut(&format!("{prefix}.output"), out);
    }
}
