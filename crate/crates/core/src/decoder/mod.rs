//! Query decoder with hand-written reverse-mode gradients.
//!
//! `N` learned queries run through `L` post-norm layers of
//! [self-attention, cross-attention to the projected visual tokens,
//! feed-forward], each sublayer wrapped as `LayerNorm(x + sublayer(x))`.
//! Two heads read the final query states: a linear selection head producing
//! one logit per query, and a three-layer ReLU network producing semantic
//! embeddings that are L2-normalized.
//!
//! Everything runs in `f64`. The assignment between targets and predictions
//! is computed from forward values and treated as a constant in the
//! backward pass.

mod checkpoint;
mod layers;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, TokenGrid};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss_grad, sigmoid, transq_loss_grad, LossConfig, Reduction};
use crate::matching::{match_example, Assignment, PredictionSet, TargetSet};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use layers::{relu, relu_backward, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Query count `N`.
    pub num_queries: usize,
    /// Decoder layers `L`.
    pub num_layers: usize,
    pub d_model: usize,
    /// Semantic embedding dimension; must match the text embedding provider.
    pub d_embed: usize,
    pub heads: usize,
    /// Channel count of the incoming visual tokens.
    pub d_visual: usize,
    /// Hidden width of each layer's feed-forward block.
    pub ffn_dim: usize,
    pub positional_encoding: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_queries: 50,
            num_layers: 6,
            d_model: 256,
            d_embed: 768,
            heads: 8,
            d_visual: 256,
            ffn_dim: 1024,
            positional_encoding: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_queries", self.num_queries),
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("d_embed", self.d_embed),
            ("heads", self.heads),
            ("d_visual", self.d_visual),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::validation(format!("decoder.{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::validation(format!(
                "decoder.d_model {} is not divisible by decoder.heads {}",
                self.d_model, self.heads
            )));
        }
        if self.positional_encoding && self.d_model % 2 != 0 {
            return Err(Error::validation("positional encodings need an even decoder.d_model"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm3: LayerNorm,
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub queries: Array2<f64>,
    pub input_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub select: Linear,
    pub semantic: [Linear; 3],
}

/// Gradients of the loss, shaped like [`DecoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle(pub DecoderParams);

impl DecoderParams {
    pub fn zeros(cfg: &DecoderConfig) -> Self {
        let d = cfg.d_model;
        let attn = || Attention::zeros(d);
        Self {
            queries: Array2::zeros((cfg.num_queries, d)),
            input_proj: Linear::zeros(cfg.d_visual, d),
            layers: (0..cfg.num_layers)
                .map(|_| DecoderLayer {
                    self_attn: attn(),
                    norm1: LayerNorm::zeros(d),
                    cross_attn: attn(),
                    norm2: LayerNorm::zeros(d),
                    ffn_in: Linear::zeros(d, cfg.ffn_dim),
                    ffn_out: Linear::zeros(cfg.ffn_dim, d),
                    norm3: LayerNorm::zeros(d),
                })
                .collect(),
            select: Linear::zeros(d, 1),
            semantic: [Linear::zeros(d, d), Linear::zeros(d, d), Linear::zeros(d, cfg.d_embed)],
        }
    }

    /// Named views in a fixed order: queries, input projection, layers, heads.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![("queries".to_owned(), self.queries.view().into_dyn())];
        self.input_proj.push_views("input_proj", &mut out);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            l.self_attn.push_views(&format!("{p}.self_attn"), &mut out);
            l.norm1.push_views(&format!("{p}.norm1"), &mut out);
            l.cross_attn.push_views(&format!("{p}.cross_attn"), &mut out);
            l.norm2.push_views(&format!("{p}.norm2"), &mut out);
            l.ffn_in.push_views(&format!("{p}.ffn_in"), &mut out);
            l.ffn_out.push_views(&format!("{p}.ffn_out"), &mut out);
            l.norm3.push_views(&format!("{p}.norm3"), &mut out);
        }
        self.select.push_views("select", &mut out);
        for (i, lin) in self.semantic.iter().enumerate() {
            lin.push_views(&format!("semantic.{i}"), &mut out);
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![("queries".to_owned(), self.queries.view_mut().into_dyn())];
        self.input_proj.push_views_mut("input_proj", &mut out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            l.self_attn.push_views_mut(&format!("{p}.self_attn"), &mut out);
            l.norm1.push_views_mut(&format!("{p}.norm1"), &mut out);
            l.cross_attn.push_views_mut(&format!("{p}.cross_attn"), &mut out);
            l.norm2.push_views_mut(&format!("{p}.norm2"), &mut out);
            l.ffn_in.push_views_mut(&format!("{p}.ffn_in"), &mut out);
            l.ffn_out.push_views_mut(&format!("{p}.ffn_out"), &mut out);
            l.norm3.push_views_mut(&format!("{p}.norm3"), &mut out);
        }
        self.select.push_views_mut("select", &mut out);
        for (i, lin) in self.semantic.iter_mut().enumerate() {
            lin.push_views_mut(&format!("semantic.{i}"), &mut out);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &DecoderParams, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, &b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * k);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    fn check_shapes(&self, cfg: &DecoderConfig) -> Result<()> {
        let reference = DecoderParams::zeros(cfg);
        let ours = self.tensors();
        let theirs = reference.tensors();
        if ours.len() != theirs.len() {
            return Err(Error::validation(format!(
                "parameter set has {} tensors, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::validation(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

impl GradientBundle {
    pub fn zeros(cfg: &DecoderConfig) -> Self {
        Self(DecoderParams::zeros(cfg))
    }

    pub fn global_norm(&self) -> f64 {
        self.0.squared_norm().sqrt()
    }
}

/// Uniform initialization in `+-1/sqrt(fan_in)` for weights and biases;
/// layer norms start as the identity and queries as `U(-1, 1)`.
pub fn init_params(cfg: &DecoderConfig, seed: u64) -> Result<DecoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DecoderParams::zeros(cfg);
    p.queries.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let mut init_linear = |lin: &mut Linear| {
        let bound = 1.0 / (lin.weight.nrows() as f64).sqrt();
        lin.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
        lin.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
    };
    init_linear(&mut p.input_proj);
    for l in &mut p.layers {
        for attn in [&mut l.self_attn, &mut l.cross_attn] {
            for lin in attn.linears_mut() {
                init_linear(lin);
            }
        }
        init_linear(&mut l.ffn_in);
        init_linear(&mut l.ffn_out);
        for norm in [&mut l.norm1, &mut l.norm2, &mut l.norm3] {
            norm.gamma.fill(1.0);
        }
    }
    init_linear(&mut p.select);
    for lin in &mut p.semantic {
        init_linear(lin);
    }
    Ok(p)
}

/// Fixed 2D sine/cosine encodings: the first half of the channels encodes the
/// row, the second half the column.
pub fn positional_encoding(side: usize, d_model: usize) -> Array2<f64> {
    let half = d_model / 2;
    let mut pe = Array2::zeros((side * side, d_model));
    let enc = |pos: usize, k: usize| {
        let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
        let a = pos as f64 * freq;
        if k % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    for r in 0..side {
        for c in 0..side {
            let t = r * side + c;
            for k in 0..half {
                pe[[t, k]] = enc(r, k);
                pe[[t, half + k]] = enc(c, k);
            }
        }
    }
    pe
}

struct LayerCache {
    self_attn: AttentionCache,
    norm1: LayerNormCache,
    cross_attn: AttentionCache,
    norm2: LayerNormCache,
    ffn_input: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_hidden: Array2<f64>,
    norm3: LayerNormCache,
}

struct ForwardCache {
    tokens: Array2<f64>,
    memory: Array2<f64>,
    layers: Vec<LayerCache>,
    output: Array2<f64>,
    sem_pre: [Array2<f64>; 2],
    sem_hidden: [Array2<f64>; 2],
    sem_raw: Array2<f64>,
    sem_norms: Array1<f64>,
}

/// Raw decoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub logits: Vec<f64>,
    /// `N x d_embed`, unit rows.
    pub semantics: Array2<f64>,
}

impl DecoderOutput {
    pub fn to_predictions(&self) -> Result<PredictionSet> {
        let probs = self.logits.iter().map(|&z| sigmoid(z)).collect();
        let sems = self
            .semantics
            .rows()
            .into_iter()
            .map(|r| Embedding::new(r.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        PredictionSet::new(probs, sems)
    }
}

fn token_matrix(tokens: &TokenGrid, cfg: &DecoderConfig) -> Result<Array2<f64>> {
    if tokens.channels() != cfg.d_visual {
        return Err(Error::DimensionMismatch {
            expected: cfg.d_visual,
            got: tokens.channels(),
        });
    }
    Ok(Array2::from_shape_vec((tokens.num_tokens(), tokens.channels()), tokens.data().to_vec())
        .expect("grid data length is side^2 * channels"))
}

fn forward_cached(tokens: &TokenGrid, params: &DecoderParams, cfg: &DecoderConfig) -> Result<(DecoderOutput, ForwardCache)> {
    let x_tokens = token_matrix(tokens, cfg)?;
    let mut memory = params.input_proj.forward(&x_tokens);
    if cfg.positional_encoding {
        memory += &positional_encoding(tokens.side(), cfg.d_model);
    }

    let heads = cfg.heads;
    let mut x = params.queries.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (a, self_attn) = layer.self_attn.forward(&x, &x, heads);
        let (x1, norm1) = layer.norm1.forward(&(&x + &a));
        let (c, cross_attn) = layer.cross_attn.forward(&x1, &memory, heads);
        let (x2, norm2) = layer.norm2.forward(&(&x1 + &c));
        let ffn_pre = layer.ffn_in.forward(&x2);
        let ffn_hidden = relu(&ffn_pre);
        let f = layer.ffn_out.forward(&ffn_hidden);
        let (x3, norm3) = layer.norm3.forward(&(&x2 + &f));
        caches.push(LayerCache {
            self_attn,
            norm1,
            cross_attn,
            norm2,
            ffn_input: x2,
            ffn_pre,
            ffn_hidden,
            norm3,
        });
        x = x3;
    }

    let logits = params.select.forward(&x).column(0).to_vec();
    let pre0 = params.semantic[0].forward(&x);
    let h0 = relu(&pre0);
    let pre1 = params.semantic[1].forward(&h0);
    let h1 = relu(&pre1);
    let raw = params.semantic[2].forward(&h1);
    let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n.is_finite() && n > 0.0)) {
        return Err(Error::Degenerate(format!("semantic embedding of query {i} has norm {}", norms[i])));
    }
    let semantics = &raw / &norms.clone().insert_axis(Axis(1));

    let out = DecoderOutput { logits, semantics };
    let cache = ForwardCache {
        tokens: x_tokens,
        memory,
        layers: caches,
        output: x,
        sem_pre: [pre0, pre1],
        sem_hidden: [h0, h1],
        sem_raw: raw,
        sem_norms: norms,
    };
    Ok((out, cache))
}

/// Decodes one image.
pub fn forward(tokens: &TokenGrid, params: &DecoderParams, cfg: &DecoderConfig) -> Result<PredictionSet> {
    forward_raw(tokens, params, cfg)?.to_predictions()
}

pub fn forward_raw(tokens: &TokenGrid, params: &DecoderParams, cfg: &DecoderConfig) -> Result<DecoderOutput> {
    Ok(forward_cached(tokens, params, cfg)?.0)
}

/// Decodes several images; results match per-image [`forward`].
pub fn forward_batch(batch: &[TokenGrid], params: &DecoderParams, cfg: &DecoderConfig) -> Result<Vec<PredictionSet>> {
    batch.iter().map(|t| forward(t, params, cfg)).collect()
}

/// Accumulates parameter gradients for one example into `grads`.
fn backward(
    params: &DecoderParams,
    cache: &ForwardCache,
    d_logits: &[f64],
    d_semantics: &Array2<f64>,
    cfg: &DecoderConfig,
    grads: &mut DecoderParams,
) {
    // Through the row normalization: d raw = (I - s s^T) d s / |raw|.
    let sem = &cache.sem_raw / &cache.sem_norms.clone().insert_axis(Axis(1));
    let proj = (d_semantics * &sem).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_raw = (d_semantics - &(&sem * &proj)) / &cache.sem_norms.clone().insert_axis(Axis(1));

    let d_h1 = params.semantic[2].backward(&cache.sem_hidden[1], &d_raw, &mut grads.semantic[2]);
    let d_pre1 = relu_backward(&cache.sem_pre[1], &d_h1);
    let d_h0 = params.semantic[1].backward(&cache.sem_hidden[0], &d_pre1, &mut grads.semantic[1]);
    let d_pre0 = relu_backward(&cache.sem_pre[0], &d_h0);
    let mut dx = params.semantic[0].backward(&cache.output, &d_pre0, &mut grads.semantic[0]);

    let d_z = Array2::from_shape_vec((d_logits.len(), 1), d_logits.to_vec()).expect("column");
    dx += &params.select.backward(&cache.output, &d_z, &mut grads.select);

    let mut d_memory = Array2::zeros(cache.memory.raw_dim());
    let heads = cfg.heads;
    for ((layer, lc), g) in params.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
        // x3 = norm3(x2 + ffn(x2))
        let d_res3 = layer.norm3.backward(&lc.norm3, &dx, &mut g.norm3);
        let d_hidden = layer.ffn_out.backward(&lc.ffn_hidden, &d_res3, &mut g.ffn_out);
        let d_pre = relu_backward(&lc.ffn_pre, &d_hidden);
        let mut d_x2 = layer.ffn_in.backward(&lc.ffn_input, &d_pre, &mut g.ffn_in);
        d_x2 += &d_res3;

        // x2 = norm2(x1 + cross(x1, memory))
        let d_res2 = layer.norm2.backward(&lc.norm2, &d_x2, &mut g.norm2);
        let (d_q, d_kv) = layer.cross_attn.backward(&lc.cross_attn, &d_res2, heads, &mut g.cross_attn);
        d_memory += &d_kv;
        let d_x1 = d_q + &d_res2;

        // x1 = norm1(x0 + self(x0, x0))
        let d_res1 = layer.norm1.backward(&lc.norm1, &d_x1, &mut g.norm1);
        let (d_q, d_kv) = layer.self_attn.backward(&lc.self_attn, &d_res1, heads, &mut g.self_attn);
        dx = d_q + &d_kv + &d_res1;
    }
    grads.queries += &dx;
    params.input_proj.backward(&cache.tokens, &d_memory, &mut grads.input_proj);
}

/// One training image: visual tokens plus its padded target set.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub tokens: TokenGrid,
    pub targets: TargetSet,
}

/// Per-batch result of [`batch_loss_and_gradients`].
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: GradientBundle,
    pub assignments: Vec<Assignment>,
}

/// Total batch loss and exact gradients w.r.t. every parameter.
pub fn batch_loss_and_gradients(
    batch: &[TrainingExample],
    params: &DecoderParams,
    cfg: &DecoderConfig,
    loss_cfg: &LossConfig,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let scale = match loss_cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.len() as f64,
    };

    let mut forwards = Vec::with_capacity(batch.len());
    let mut assignments = Vec::with_capacity(batch.len());
    let mut set_loss = 0.0;
    let mut d_outputs = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.targets.size != cfg.num_queries {
            return Err(Error::DimensionMismatch {
                expected: cfg.num_queries,
                got: ex.targets.size,
            });
        }
        let (out, cache) = forward_cached(&ex.tokens, params, cfg)?;
        let preds = out.to_predictions()?;
        let assignment = match_example(&ex.targets, &preds, loss_cfg.mu)?;
        let (l, mut d_logits, mut d_sem) = transq_loss_grad(&ex.targets, &out.logits, &out.semantics, &assignment, loss_cfg)?;
        set_loss += l;
        d_logits.iter_mut().for_each(|g| *g *= scale);
        d_sem *= scale;
        d_outputs.push((d_logits, d_sem));
        forwards.push((out, cache));
        assignments.push(assignment);
    }
    let mut loss = set_loss * scale;

    if loss_cfg.lambda_sc != 0.0 {
        let pairs: Vec<(usize, usize, usize)> = batch
            .iter()
            .zip(&assignments)
            .enumerate()
            .flat_map(|(b, (ex, a))| (0..ex.targets.real_count()).map(move |i| (b, i, a.sigma[i])))
            .collect();
        if !pairs.is_empty() {
            let d = cfg.d_embed;
            let mut t = Array2::zeros((pairs.len(), d));
            let mut s = Array2::zeros((pairs.len(), d));
            for (r, &(b, i, j)) in pairs.iter().enumerate() {
                let v = batch[b].targets.embeddings[i].as_slice();
                if v.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: v.len() });
                }
                t.row_mut(r).assign(&ndarray::ArrayView1::from(v));
                s.row_mut(r).assign(&forwards[b].0.semantics.row(j));
            }
            let (sc, d_s) = contrastive_loss_grad(&t, &s, loss_cfg.temperature_inv, true);
            loss += loss_cfg.lambda_sc * sc;
            for (r, &(b, _, j)) in pairs.iter().enumerate() {
                d_outputs[b].1.row_mut(j).scaled_add(loss_cfg.lambda_sc, &d_s.row(r));
            }
        }
    }

    if !loss.is_finite() {
        let culprit = params.first_non_finite().unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite(culprit));
    }

    let mut grads = DecoderParams::zeros(cfg);
    for ((_, cache), (d_logits, d_sem)) in forwards.iter().zip(&d_outputs) {
        backward(params, cache, d_logits, d_sem, cfg, &mut grads);
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok(BatchLoss {
        loss,
        grads: GradientBundle(grads),
        assignments,
    })
}

/// Single-example form of [`batch_loss_and_gradients`].
pub fn loss_and_gradients(
    tokens: &TokenGrid,
    targets: &TargetSet,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    loss_cfg: &LossConfig,
) -> Result<(f64, GradientBundle)> {
    let batch = [TrainingExample {
        tokens: tokens.clone(),
        targets: targets.clone(),
    }];
    let r = batch_loss_and_gradients(&batch, params, cfg, loss_cfg)?;
    Ok((r.loss, r.grads))
}

/// Loss only, without gradients or the backward pass.
pub fn batch_loss(batch: &[TrainingExample], params: &DecoderParams, cfg: &DecoderConfig, loss_cfg: &LossConfig) -> Result<f64> {
    let mut examples = Vec::with_capacity(batch.len());
    for ex in batch {
        let preds = forward(&ex.tokens, params, cfg)?;
        let assignment = match_example(&ex.targets, &preds, loss_cfg.mu)?;
        examples.push(crate::losses::MatchedExample {
            targets: ex.targets.clone(),
            preds,
            assignment,
        });
    }
    crate::losses::total_loss(&crate::losses::MatchedBatch { examples }, loss_cfg)
}

/// Checks a parameter set against a config.
pub fn validate_params(params: &DecoderParams, cfg: &DecoderConfig) -> Result<()> {
    cfg.validate()?;
    params.check_shapes(cfg)
}

#[cfg(test)]
mod tests;
