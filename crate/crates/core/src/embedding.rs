//! Vector primitives and embedding providers.
//!
//! Providers stand in for frozen pretrained text encoders. Three are
//! available: [`HashProvider`] (deterministic, offline), [`FileProvider`]
//! (a precomputed phrase table) and [`RemoteProvider`] (an HTTP endpoint).

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("embedding has zero dimension"));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding component {i}")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Scales `v` to unit length.
pub fn l2_normalize(v: &Embedding) -> Result<Embedding> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(Embedding(v.0.iter().map(|x| x / n).collect()))
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64> {
    check_dims(u.dim(), v.dim())?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot(&u.0, &v.0) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Training-time perturbation of text embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub rng_seed: u64,
}

/// Stateful noise generator: each call draws fresh noise from one seeded stream.
///
/// Each component gets `u / sqrt(d)` with `u ~ Uniform[-1, 1]`.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    enabled: bool,
    rng: ChaCha8Rng,
    draws: u64,
}

impl NoiseSource {
    pub fn new(cfg: NoiseConfig) -> Self {
        Self {
            enabled: cfg.enabled,
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            draws: 0,
        }
    }

    /// Number of vectors perturbed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn sample(&mut self, d: usize) -> Vec<f64> {
        let scale = 1.0 / (d as f64).sqrt();
        (0..d)
            .map(|_| self.rng.random_range(-1.0..=1.0) * scale)
            .collect()
    }

    /// Returns `v + eps`, or `v` unchanged when disabled.
    pub fn apply(&mut self, v: &Embedding) -> Embedding {
        if !self.enabled {
            return v.clone();
        }
        self.draws += 1;
        let eps = self.sample(v.dim());
        Embedding(v.0.iter().zip(eps).map(|(x, e)| x + e).collect())
    }
}

/// One-shot noise with a fresh generator seeded from `cfg`.
pub fn add_noise(v: &Embedding, cfg: &NoiseConfig) -> Embedding {
    NoiseSource::new(*cfg).apply(v)
}

/// A `side x side` grid of feature vectors, row-major, channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct TokenGrid {
    side: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    side: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TryFrom<RawGrid> for TokenGrid {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        TokenGrid::new(raw.side, raw.channels, raw.data)
    }
}

impl TokenGrid {
    pub fn new(side: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || channels == 0 {
            return Err(Error::validation("token grid side and channels must be positive"));
        }
        if data.len() != side * side * channels {
            return Err(Error::DimensionMismatch {
                expected: side * side * channels,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("token grid".into()));
        }
        Ok(Self {
            side,
            channels,
            data,
        })
    }

    /// Reshapes a 1D token sequence into a square grid. The sequence length
    /// must be a perfect square.
    pub fn from_sequence(tokens: &[Vec<f64>]) -> Result<Self> {
        let n = tokens.len();
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n || n == 0 {
            return Err(Error::validation(format!(
                "token sequence length {n} is not a positive perfect square"
            )));
        }
        let channels = tokens[0].len();
        if let Some(bad) = tokens.iter().find(|t| t.len() != channels) {
            return Err(Error::DimensionMismatch {
                expected: channels,
                got: bad.len(),
            });
        }
        Self::new(side, channels, tokens.concat())
    }

    pub fn filled(side: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(side, channels, vec![value; side * side * channels])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.side + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Tokens in row-major order.
    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn mean_token(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.channels];
        for t in self.tokens() {
            for (m, x) in mean.iter_mut().zip(t) {
                *m += x;
            }
        }
        let n = self.num_tokens() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Bilinear resize with half-pixel centers.
///
/// Source coordinate `(dst + 0.5) * src_side / dst_side - 0.5`, clamped to the
/// valid range on each axis.
pub fn interpolate_grid(src: &TokenGrid, target_side: usize) -> Result<TokenGrid> {
    if target_side == 0 {
        return Err(Error::validation("target side must be positive"));
    }
    if target_side == src.side {
        return Ok(src.clone());
    }
    let gs = src.side;
    let ch = src.channels;
    let scale = gs as f64 / target_side as f64;
    let coord = |d: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (gs - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(gs - 1);
        (lo, hi, s - lo as f64)
    };

    let mut data = Vec::with_capacity(target_side * target_side * ch);
    for dy in 0..target_side {
        let (y0, y1, wy) = coord(dy);
        for dx in 0..target_side {
            let (x0, x1, wx) = coord(dx);
            let (a, b, c, d) = (
                src.token(y0, x0),
                src.token(y0, x1),
                src.token(y1, x0),
                src.token(y1, x1),
            );
            for k in 0..ch {
                let top = a[k] * (1.0 - wx) + b[k] * wx;
                let bottom = c[k] * (1.0 - wx) + d[k] * wx;
                data.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    TokenGrid::new(target_side, ch, data)
}

/// Channel-wise concatenation of two encoder outputs.
///
/// The grid with fewer tokens is resized to the longer one's side; `a`'s
/// channels always come first.
pub fn fuse_token_grids(a: &TokenGrid, b: &TokenGrid) -> Result<TokenGrid> {
    let side = a.side.max(b.side);
    let a = interpolate_grid(a, side)?;
    let b = interpolate_grid(b, side)?;
    let mut data = Vec::with_capacity(side * side * (a.channels + b.channels));
    for (ta, tb) in a.tokens().zip(b.tokens()) {
        data.extend_from_slice(ta);
        data.extend_from_slice(tb);
    }
    TokenGrid::new(side, a.channels + b.channels, data)
}

/// 64-bit FNV-1a over the UTF-8 bytes of `text`.
pub fn fnv1a64(text: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    text.bytes()
        .fold(OFFSET, |h, b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// splitmix64 stream feeding a Box-Muller normal sampler.
///
/// Uniforms take the top 53 bits of each output; every pair of uniforms
/// `(u1, u2)` yields the two normals `r cos t` and `r sin t` with
/// `r = sqrt(-2 ln(1 - u1))`, `t = 2 pi u2`.
#[derive(Debug, Clone)]
pub struct SplitMixNormal {
    state: u64,
    spare: Option<f64>,
}

impl SplitMixNormal {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_unit();
        let u2 = self.next_unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        self.spare = Some(r * t.sin());
        r * t.cos()
    }
}

/// Deterministic pseudo-embedding of `text`: FNV-1a seed, splitmix64 normals,
/// L2 normalization.
pub fn hash_embed(text: &str, d: usize) -> Result<Embedding> {
    if text.is_empty() {
        return Err(Error::validation("cannot embed empty text"));
    }
    if d == 0 {
        return Err(Error::validation("embedding dimension must be positive"));
    }
    let mut gen = SplitMixNormal::new(fnv1a64(text));
    let raw = Embedding((0..d).map(|_| gen.next_normal()).collect());
    l2_normalize(&raw)
}

/// Maps text to unit-norm embeddings of a fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>>;

    fn embed_one(&self, text: &str) -> Result<Embedding> {
        self.embed(&[text])?
            .pop()
            .ok_or_else(|| Error::External("provider returned no embedding".into()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HashProvider {
    dim: usize,
}

impl HashProvider {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        Ok(Self { dim })
    }
}

impl EmbeddingProvider for HashProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| hash_embed(t, self.dim)).collect()
    }
}

/// Looks phrases up in a precomputed table stored in the index file format.
#[derive(Debug, Clone)]
pub struct FileProvider {
    dim: usize,
    table: HashMap<String, Embedding>,
}

impl FileProvider {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let index = crate::index::read_index(std::io::BufReader::new(file), false)?;
        Ok(Self::from_index(&index))
    }

    pub fn from_index(index: &crate::index::VectorIndex) -> Self {
        Self {
            dim: index.dim(),
            table: index
                .records()
                .iter()
                .map(|r| (r.phrase.clone(), r.embedding.clone()))
                .collect(),
        }
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("phrase `{t}` not in embedding table")))
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Posts `{"texts": [...]}` and expects `{"embeddings": [[...]]}` back.
/// Returned vectors are L2-normalized.
#[derive(Debug)]
pub struct RemoteProvider {
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(endpoint: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            dim,
            agent,
        }
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let ext = |m: String| Error::External(format!("{}: {m}", self.endpoint));
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&EmbedRequest { texts })
            .map_err(|e| ext(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ext(format!("HTTP {status}")));
        }
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ext(format!("bad response body: {e}")))?;
        if body.embeddings.len() != texts.len() {
            return Err(ext(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                body.embeddings.len()
            )));
        }
        body.embeddings
            .into_iter()
            .zip(texts)
            .map(|(v, t)| {
                check_dims(self.dim, v.len())?;
                let e = Embedding::new(v)?;
                l2_normalize(&e).map_err(|err| Error::Degenerate(format!("`{t}`: {err}")))
            })
            .collect()
    }
}
