//! Minimal joint-attention transformer over the `text ‖ image ‖ latent`
//! sequence, with a short Euler denoising loop.
//!
//! Nothing here is trained. Embeddings and weights are seeded random tables;
//! the model exists to show that a mask built by
//! [`build_mask`](crate::attention_mask::build_mask) controls information
//! flow exactly. Forbidden keys are left out of the softmax entirely, so their
//! weight is exactly zero rather than merely small.
//!
//! All arithmetic is plain IEEE add/mul/div/sqrt in a fixed order, and `exp`
//! is computed by [`det_exp`] instead of the platform libm, so checksums are
//! reproducible across targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention_mask::AttentionMask;
use crate::plan_format::EditPlan;
use crate::region_grid::{SegmentOffsets, TokenLayout};

const SQRT_3: f64 = 1.732_050_807_568_877_2;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self { embed_dim: 64, layers: 4, heads: 4, mlp_ratio: 4, seed: 0 }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(ToyError::Config("embed_dim, heads and mlp_ratio must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ToyError::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Entries uniform in `[-scale, scale]`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                for (oj, &bkj) in o.iter_mut().zip(rhs.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `exp(x)` from IEEE basic operations only: `x = k ln2 + r`, `|r| <= ln2/2`,
/// then a degree-16 Taylor polynomial for `exp(r)` and exact scaling by `2^k`.
pub fn det_exp(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    if x.is_nan() {
        return x;
    }
    if x > 709.78 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    let k = (x * std::f64::consts::LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..=16 {
        term = term * r / n as f64;
        sum += term;
    }
    scale_pow2(sum, k as i32)
}

fn scale_pow2(x: f64, k: i32) -> f64 {
    let pow2 = |e: i32| f64::from_bits(((e + 1023) as u64) << 52);
    if k > 1023 {
        x * pow2(1023) * pow2(k - 1023)
    } else if k < -1022 {
        x * pow2(-1022) * pow2(k + 1022)
    } else {
        x * pow2(k)
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + det_exp(-x))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn layer_norm(x: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
}

fn layer_norm_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let (src, dst) = (m.row(r), &mut out.data[r * m.cols..(r + 1) * m.cols]);
        layer_norm(src, dst);
    }
    out
}

/// Synthetic `M × N × C` feature map standing in for an encoded image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn synthetic(rows: usize, cols: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols * channels).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
        Self { rows, cols, channels, data }
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }
}

/// Unified token sequence `X = text ‖ image ‖ latent` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    pub tokens: Matrix,
    pub offsets: SegmentOffsets,
    pub timestep: f64,
}

impl SequenceState {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn latent_rows(&self) -> std::ops::Range<usize> {
        self.offsets.latent..self.offsets.total
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: usize,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl LayerWeights {
    pub fn random(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = |fan_in: usize| SQRT_3 / (fan_in as f64).sqrt();
        Self {
            heads,
            wq: Matrix::uniform(dim, dim, s(dim), rng),
            wk: Matrix::uniform(dim, dim, s(dim), rng),
            wv: Matrix::uniform(dim, dim, s(dim), rng),
            wo: Matrix::uniform(dim, dim, s(dim), rng),
            w1: Matrix::uniform(dim, dim * mlp_ratio, s(dim), rng),
            w2: Matrix::uniform(dim * mlp_ratio, dim, s(dim * mlp_ratio), rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows
    }
}

/// Per-head attention weights, `heads` matrices of `|X| × |X|`.
pub type AttentionWeights = Vec<Matrix>;

fn check_mask(state: &SequenceState, mask: &AttentionMask) -> Result<Vec<Vec<usize>>, ToyError> {
    if mask.size() != state.len() {
        return Err(ToyError::Mask(format!("mask has {} tokens, sequence has {}", mask.size(), state.len())));
    }
    let allowed: Vec<Vec<usize>> = (0..state.len()).map(|u| mask.allowed_keys(u)).collect();
    if let Some(u) = allowed.iter().position(Vec::is_empty) {
        return Err(ToyError::Mask(format!("query {u} has no allowed key")));
    }
    Ok(allowed)
}

fn attend(
    state: &SequenceState,
    allowed: &[Vec<usize>],
    w: &LayerWeights,
    keep_weights: bool,
) -> Result<(SequenceState, Option<AttentionWeights>), ToyError> {
    let d = w.dim();
    if state.tokens.cols != d {
        return Err(ToyError::Shape(format!("tokens have width {}, weights expect {d}", state.tokens.cols)));
    }
    let n = state.len();
    let hd = d / w.heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let h = layer_norm_rows(&state.tokens);
    let q = h.matmul(&w.wq);
    let k = h.matmul(&w.wk);
    let v = h.matmul(&w.wv);

    // (per-row head outputs, per-row per-head weights over allowed keys)
    let rows: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|u| {
            let keys = &allowed[u];
            let mut out = vec![0.0; d];
            let mut head_weights = Vec::with_capacity(w.heads);
            for head in 0..w.heads {
                let cols = head * hd..(head + 1) * hd;
                let qu = &q.row(u)[cols.clone()];
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| qu.iter().zip(&k.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| det_exp(s - m)).collect();
                let z: f64 = e.iter().sum();
                let probs: Vec<f64> = e.iter().map(|x| x / z).collect();
                for (&j, &p) in keys.iter().zip(&probs) {
                    for (o, &vj) in out[cols.clone()].iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += p * vj;
                    }
                }
                head_weights.push(probs);
            }
            (out, head_weights)
        })
        .collect();

    let mut mixed = Matrix::zeros(n, d);
    for (u, (row, _)) in rows.iter().enumerate() {
        mixed.row_mut(u).copy_from_slice(row);
    }
    let proj = mixed.matmul(&w.wo);
    let mut tokens = state.tokens.clone();
    for (t, p) in tokens.data.iter_mut().zip(&proj.data) {
        *t += p;
    }

    let weights = keep_weights.then(|| {
        (0..w.heads)
            .map(|head| {
                let mut m = Matrix::zeros(n, n);
                for (u, (_, hw)) in rows.iter().enumerate() {
                    for (&j, &p) in allowed[u].iter().zip(&hw[head]) {
                        m.data[u * n + j] = p;
                    }
                }
                m
            })
            .collect()
    });
    Ok((SequenceState { tokens, offsets: state.offsets, timestep: state.timestep }, weights))
}

/// One masked self-attention sublayer with residual: `x + Attn(LN(x))`.
pub fn masked_attention(
    state: &SequenceState,
    mask: &AttentionMask,
    weights: &LayerWeights,
) -> Result<SequenceState, ToyError> {
    let allowed = check_mask(state, mask)?;
    Ok(attend(state, &allowed, weights, false)?.0)
}

/// Same as [`masked_attention`] but also returns the attention weights;
/// forbidden entries are exactly `0.0`.
pub fn masked_attention_with_weights(
    state: &SequenceState,
    mask: &AttentionMask,
    weights: &LayerWeights,
) -> Result<(SequenceState, AttentionWeights), ToyError> {
    let allowed = check_mask(state, mask)?;
    let (s, w) = attend(state, &allowed, weights, true)?;
    Ok((s, w.expect("weights requested")))
}

fn mlp(state: &mut SequenceState, w: &LayerWeights) {
    let h = layer_norm_rows(&state.tokens);
    let mut hidden = h.matmul(&w.w1);
    for x in hidden.data.iter_mut() {
        *x = silu(*x);
    }
    let out = hidden.matmul(&w.w2);
    for (t, o) in state.tokens.data.iter_mut().zip(&out.data) {
        *t += o;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    /// Final latent grid, `M·N` rows of `embed_dim`.
    pub latent: Matrix,
    pub step_norms: Vec<f64>,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMmdit {
    config: ToyModelConfig,
    layers: Vec<LayerWeights>,
    velocity_head: Matrix,
    time_embedding: Vec<f64>,
}

impl ToyMmdit {
    pub fn new(config: ToyModelConfig) -> Result<Self, ToyError> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers =
            (0..config.layers).map(|_| LayerWeights::random(d, config.heads, config.mlp_ratio, &mut rng)).collect();
        let velocity_head = Matrix::uniform(d, d, SQRT_3 / (d as f64).sqrt(), &mut rng);
        let time_embedding = (0..d).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
        Ok(Self { config, layers, velocity_head, time_embedding })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    fn sub_rng(&self, stream: &str, index: u64) -> ChaCha8Rng {
        let mut key = stream.as_bytes().to_vec();
        key.extend_from_slice(&index.to_le_bytes());
        ChaCha8Rng::seed_from_u64(self.config.seed ^ fnv1a64(&key))
    }

    fn uniform_unit_variance(rng: &mut ChaCha8Rng, out: &mut [f64]) {
        for x in out {
            *x = SQRT_3 * (2.0 * rng.gen::<f64>() - 1.0);
        }
    }

    /// Text token `position` of a hint: a function of the hint text and the
    /// position only.
    fn text_token(&self, hint: &str, position: usize, out: &mut [f64]) {
        let mut key = hint.as_bytes().to_vec();
        key.push(0);
        key.extend_from_slice(&(position as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ fnv1a64(&key));
        Self::uniform_unit_variance(&mut rng, out);
    }

    pub fn embed_inputs(
        &self,
        plan: &EditPlan,
        layout: &TokenLayout,
        image: &FeatureGrid,
        noise_seed: u64,
    ) -> Result<SequenceState, ToyError> {
        let g = layout.geometry();
        if image.rows != g.rows() || image.cols != g.cols() {
            return Err(ToyError::Shape(format!(
                "feature grid {}x{} does not match patch grid {}x{}",
                image.rows,
                image.cols,
                g.rows(),
                g.cols()
            )));
        }
        if image.channels == 0 || image.data.len() != image.rows * image.cols * image.channels {
            return Err(ToyError::Shape("feature grid data length does not match its shape".into()));
        }
        if plan.region_count() != layout.region_count() {
            return Err(ToyError::Shape(format!(
                "plan has {} regions, layout has {}",
                plan.region_count(),
                layout.region_count()
            )));
        }

        let d = self.config.embed_dim;
        let o = layout.offsets();
        let mut tokens = Matrix::zeros(o.total, d);

        for (gi, hint) in plan.hints().enumerate() {
            for (pos, t) in layout.text_group(gi).enumerate() {
                self.text_token(hint, pos, tokens.row_mut(t));
            }
        }

        let mut proj_rng = self.sub_rng("image-projection", image.channels as u64);
        let proj = Matrix::uniform(image.channels, d, SQRT_3 / (image.channels as f64).sqrt(), &mut proj_rng);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut pos = vec![0.0; d];
        for p in 0..layout.patch_count() {
            let mut pos_rng = self.sub_rng("patch-position", p as u64);
            Self::uniform_unit_variance(&mut pos_rng, &mut pos);

            let f = image.patch(p);
            let row = tokens.row_mut(layout.image_token(p));
            for (c, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (ch, &x) in f.iter().enumerate() {
                    acc += x * proj.data[ch * d + c];
                }
                *out = acc + 0.1 * pos[c];
            }

            let row = tokens.row_mut(layout.latent_token(p));
            Self::uniform_unit_variance(&mut noise_rng, row);
        }

        Ok(SequenceState { tokens, offsets: o, timestep: 1.0 })
    }

    /// Velocity prediction for the latent rows of `state`.
    pub fn velocity(&self, state: &SequenceState, mask: &AttentionMask) -> Result<Matrix, ToyError> {
        let allowed = check_mask(state, mask)?;
        let mut x = state.clone();
        for r in x.latent_rows() {
            for (v, t) in x.tokens.row_mut(r).iter_mut().zip(&self.time_embedding) {
                *v += state.timestep * t;
            }
        }
        for layer in &self.layers {
            x = attend(&x, &allowed, layer, false)?.0;
            mlp(&mut x, layer);
        }
        let rows = x.latent_rows();
        let latent = Matrix {
            rows: rows.len(),
            cols: x.tokens.cols,
            data: x.tokens.data[rows.start * x.tokens.cols..rows.end * x.tokens.cols].to_vec(),
        };
        Ok(layer_norm_rows(&latent).matmul(&self.velocity_head))
    }

    /// Euler integration from `t = 1` to `t = 0` in `steps` equal steps.
    pub fn denoise_state(
        &self,
        initial: &SequenceState,
        mask: &AttentionMask,
        steps: usize,
    ) -> Result<DenoiseOutput, ToyError> {
        if steps == 0 {
            return Err(ToyError::Config("steps must be at least 1".into()));
        }
        let dt = 1.0 / steps as f64;
        let mut state = initial.clone();
        let mut step_norms = Vec::with_capacity(steps);
        for s in 0..steps {
            state.timestep = 1.0 - s as f64 * dt;
            let v = self.velocity(&state, mask)?;
            let d = state.tokens.cols;
            let start = state.offsets.latent * d;
            for (z, vi) in state.tokens.data[start..].iter_mut().zip(&v.data) {
                *z -= dt * vi;
            }
            let latent = &state.tokens.data[start..];
            step_norms.push(latent.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        state.timestep = 0.0;
        let d = state.tokens.cols;
        let rows = state.latent_rows();
        let latent = Matrix { rows: rows.len(), cols: d, data: state.tokens.data[rows.start * d..].to_vec() };
        if !latent.is_finite() {
            return Err(ToyError::Shape("non-finite latent after denoising".into()));
        }
        let checksum = latent_checksum(&latent);
        Ok(DenoiseOutput { latent, step_norms, checksum })
    }

    pub fn denoise(
        &self,
        plan: &EditPlan,
        layout: &TokenLayout,
        image: &FeatureGrid,
        mask: &AttentionMask,
        noise_seed: u64,
        steps: usize,
    ) -> Result<DenoiseOutput, ToyError> {
        let state = self.embed_inputs(plan, layout, image, noise_seed)?;
        self.denoise_state(&state, mask, steps)
    }
}

/// FNV-1a over the little-endian bit patterns of every entry.
pub fn latent_checksum(latent: &Matrix) -> u64 {
    let bytes: Vec<u8> = latent.data.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect();
    fnv1a64(&bytes)
}
