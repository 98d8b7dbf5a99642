//! Confidence-guided attention.
//!
//! Each block pools the source map into query tokens and the target map into
//! key/value tokens, then:
//!
//! * scales every query row by `1 + alpha * w1[i]` before the dot product with
//!   the keys. This is the same as adding the bias `alpha * (Q * W1) K^T` to
//!   the scores, and amounts to a per-query inverse temperature
//!   `tau_i = 1 + alpha * w1[i]`: confident queries get a sharper softmax.
//! * multiplies every value row by the key-side confidence `w2[j]` before
//!   aggregation.
//!
//! The message is added to the queries, upsampled back to the coarse grid and
//! merged into the input through a residual feed-forward layer. Rounds of
//! self-attention followed by cross-attention are repeated `T` times.

use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::Ablation;
use crate::ops::{self, flatten_tokens, softmax_rows, unflatten_tokens};
use crate::{Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 100.0;

/// Two affine layers with a ReLU in between: `2C -> 2C -> C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    #[serde(with = "ops::matrix_rows")]
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    #[serde(with = "ops::matrix_rows")]
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl FeedForward {
    pub fn zeros(channels: usize) -> Self {
        Self {
            w1: Array2::zeros((2 * channels, 2 * channels)),
            b1: Array1::zeros(2 * channels),
            w2: Array2::zeros((channels, 2 * channels)),
            b2: Array1::zeros(channels),
        }
    }

    fn random(rng: &mut ChaCha8Rng, channels: usize, gain: f64) -> Self {
        let wide = 2 * channels;
        let std = (1.0 / wide as f64).sqrt();
        Self {
            w1: gaussian(rng, (wide, wide), (2.0f64).sqrt() * std),
            b1: Array1::zeros(wide),
            w2: gaussian(rng, (channels, wide), gain * std),
            b2: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.w2.nrows()
    }

    /// Applies the layer to each row of `(N, 2C)` input.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let hidden = (x.dot(&self.w1.t()) + &self.b1).mapv_into(ops::relu);
        hidden.dot(&self.w2.t()) + &self.b2
    }
}

/// Weights of one attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    #[serde(with = "ops::matrix_rows")]
    pub u_q: Array2<f64>,
    #[serde(with = "ops::matrix_rows")]
    pub u_k: Array2<f64>,
    #[serde(with = "ops::matrix_rows")]
    pub u_v: Array2<f64>,
    pub ffn: FeedForward,
}

impl BlockWeights {
    pub fn identity(channels: usize) -> Self {
        Self {
            u_q: Array2::eye(channels),
            u_k: Array2::eye(channels),
            u_v: Array2::eye(channels),
            ffn: FeedForward::zeros(channels),
        }
    }

    fn random(rng: &mut ChaCha8Rng, channels: usize, ffn_gain: f64) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        Self {
            u_q: gaussian(rng, (channels, channels), std),
            u_k: gaussian(rng, (channels, channels), std),
            u_v: gaussian(rng, (channels, channels), std),
            ffn: FeedForward::random(rng, channels, ffn_gain),
        }
    }

    pub fn channels(&self) -> usize {
        self.u_q.nrows()
    }
}

/// One interleaving round: self-attention on each image, then cross-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundWeights {
    pub self_attn: BlockWeights,
    pub cross_attn: BlockWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub channels: usize,
    /// `alpha = exp(eta)`
    pub eta: f64,
    pub pool: usize,
    pub heads: usize,
    pub rope_base: f64,
    pub rounds: Vec<RoundWeights>,
}

/// Output gain of the random feed-forward layers; keeps the residual path
/// dominant in the untrained stack.
const FFN_GAIN: f64 = 0.5;

impl AttentionParams {
    pub fn random(channels: usize, t_blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rounds = (0..t_blocks)
            .map(|_| RoundWeights {
                self_attn: BlockWeights::random(&mut rng, channels, FFN_GAIN),
                cross_attn: BlockWeights::random(&mut rng, channels, FFN_GAIN),
            })
            .collect();
        Self {
            channels,
            eta: 0.0,
            pool: 2,
            heads: 1,
            rope_base: DEFAULT_ROPE_BASE,
            rounds,
        }
    }

    pub fn t_blocks(&self) -> usize {
        self.rounds.len()
    }

    pub fn alpha(&self) -> f64 {
        self.eta.exp()
    }

    /// Parameters restricted to the given rounds.
    pub fn with_rounds(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            rounds: self.rounds[range].to_vec(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.rounds.is_empty() {
            return Err(Error::Config("at least one attention round is required".into()));
        }
        if self.pool == 0 || self.heads == 0 {
            return Err(Error::Config("pool and heads must be positive".into()));
        }
        if !c.is_multiple_of(4) {
            return Err(Error::RopeChannels(c));
        }
        if !c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{c} channels do not split into {} heads", self.heads)));
        }
        if !self.eta.is_finite() || !(self.rope_base > 0.0) {
            return Err(Error::Config("eta must be finite and rope_base positive".into()));
        }
        for r in &self.rounds {
            for b in [&r.self_attn, &r.cross_attn] {
                let ok = [&b.u_q, &b.u_k, &b.u_v].iter().all(|u| u.dim() == (c, c))
                    && b.ffn.w1.dim() == (2 * c, 2 * c)
                    && b.ffn.b1.len() == 2 * c
                    && b.ffn.w2.dim() == (c, 2 * c)
                    && b.ffn.b2.len() == c;
                if !ok {
                    return Err(Error::ShapeMismatch(format!(
                        "attention weights do not match {c} channels"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Per-block runtime switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    pub alpha: f64,
    pub pool: usize,
    pub heads: usize,
    pub rope_base: f64,
    /// Confidence-guided bias on the scores.
    pub bias: bool,
    /// Value rescaling by key confidence.
    pub rescale: bool,
}

impl BlockOptions {
    pub fn from_params(p: &AttentionParams, ablation: &Ablation) -> Self {
        Self {
            alpha: p.alpha(),
            pool: p.pool,
            heads: p.heads,
            rope_base: p.rope_base,
            bias: ablation.bias,
            rescale: ablation.rescale,
        }
    }
}

/// Rotates channel pairs of one position vector. The first half of the
/// channels encodes the column, the second half the row.
pub fn rope_rotate(v: &mut ndarray::ArrayViewMut1<f64>, row: usize, col: usize, base: f64) {
    let c = v.len();
    let half = c / 2;
    let pairs = half / 2;
    for (offset, pos) in [(0, col), (half, row)] {
        for k in 0..pairs {
            let freq = base.powf(-(k as f64) / pairs as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let (a, b) = (v[offset + 2 * k], v[offset + 2 * k + 1]);
            v[offset + 2 * k] = a * cos - b * sin;
            v[offset + 2 * k + 1] = a * sin + b * cos;
        }
    }
}

/// 2D axial rotary position encoding of a `(C, H, W)` map.
pub fn rope_encode(f: &Array3<f64>, base: f64) -> Result<Array3<f64>> {
    let (c, h, w) = f.dim();
    if c % 4 != 0 {
        return Err(Error::RopeChannels(c));
    }
    let mut out = f.clone();
    for y in 0..h {
        for x in 0..w {
            rope_rotate(&mut out.slice_mut(s![.., y, x]), y, x, base);
        }
    }
    Ok(out)
}

fn check_pool(h: usize, w: usize, pool: usize) -> Result<()> {
    if pool == 0 || !h.is_multiple_of(pool) || !w.is_multiple_of(pool) {
        return Err(Error::PoolDivisibility {
            pool,
            height: h,
            width: w,
        });
    }
    Ok(())
}

/// Strided `pool x pool` average; stands in for the query downsampling conv.
pub fn avg_pool(f: &Array3<f64>, pool: usize) -> Result<Array3<f64>> {
    let (c, h, w) = f.dim();
    check_pool(h, w, pool)?;
    let area = (pool * pool) as f64;
    Ok(Array3::from_shape_fn((c, h / pool, w / pool), |(ch, y, x)| {
        f.slice(s![ch, y * pool..(y + 1) * pool, x * pool..(x + 1) * pool])
            .sum()
            / area
    }))
}

pub fn max_pool(f: &Array3<f64>, pool: usize) -> Result<Array3<f64>> {
    let (c, h, w) = f.dim();
    check_pool(h, w, pool)?;
    Ok(Array3::from_shape_fn((c, h / pool, w / pool), |(ch, y, x)| {
        f.slice(s![ch, y * pool..(y + 1) * pool, x * pool..(x + 1) * pool])
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }))
}

/// Max-pools a row-major per-cell map and flattens it to tokens.
pub fn max_pool_map(values: &[f64], width: usize, height: usize, pool: usize) -> Result<Vec<f64>> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "map of {} values on a {width}x{height} grid",
            values.len()
        )));
    }
    let grid = Array3::from_shape_vec((1, height, width), values.to_vec())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(max_pool(&grid, pool)?.into_iter().collect())
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(f: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = f.dim();
    Array3::from_shape_fn((c, h * factor, w * factor), |(ch, y, x)| f[[ch, y / factor, x / factor]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Query-side confidence, pooled and flattened.
    pub w1: Vec<f64>,
    /// Key-side confidence, pooled and flattened.
    pub w2: Vec<f64>,
    pub grid_height: usize,
    pub grid_width: usize,
}

pub fn build_tokens(
    f_src: &Array3<f64>,
    f_tgt: &Array3<f64>,
    w_src: &[f64],
    w_tgt: &[f64],
    block: &BlockWeights,
    pool: usize,
    rope_base: f64,
) -> Result<TokenSet> {
    let (c_src, h_src, w_src_dim) = f_src.dim();
    let (c_tgt, h_tgt, w_tgt_dim) = f_tgt.dim();
    if c_src != c_tgt {
        return Err(Error::ChannelMismatch { left: c_src, right: c_tgt });
    }
    if block.channels() != c_src {
        return Err(Error::ChannelMismatch {
            left: block.channels(),
            right: c_src,
        });
    }
    let q_map = rope_encode(&avg_pool(f_src, pool)?, rope_base)?;
    let pooled_tgt = max_pool(f_tgt, pool)?;
    let k_map = rope_encode(&pooled_tgt, rope_base)?;
    let (_, gh, gw) = q_map.dim();
    Ok(TokenSet {
        q: flatten_tokens(&q_map).dot(&block.u_q),
        k: flatten_tokens(&k_map).dot(&block.u_k),
        v: flatten_tokens(&pooled_tgt).dot(&block.u_v),
        w1: max_pool_map(w_src, w_src_dim, h_src, pool)?,
        w2: max_pool_map(w_tgt, w_tgt_dim, h_tgt, pool)?,
        grid_height: gh,
        grid_width: gw,
    })
}

/// Per-query inverse temperatures `1 + alpha * w1[i]`.
pub fn temperatures(w1: &[f64], alpha: f64) -> Vec<f64> {
    w1.iter().map(|&w| 1.0 + alpha * w).collect()
}

/// Scores with the confidence bias folded into the queries:
/// `scale * (Q * (1 + alpha W1)) K^T`.
pub fn biased_scores(q: &Array2<f64>, k: &Array2<f64>, w1: &[f64], alpha: f64, scale: f64) -> Array2<f64> {
    let mut q_mod = q.clone();
    for (mut row, tau) in q_mod.rows_mut().into_iter().zip(temperatures(w1, alpha)) {
        row *= tau;
    }
    q_mod.dot(&k.t()) * scale
}

/// The same scores in additive form: `scale * (Q K^T + alpha (Q * W1) K^T)`.
pub fn biased_scores_additive(
    q: &Array2<f64>,
    k: &Array2<f64>,
    w1: &[f64],
    alpha: f64,
    scale: f64,
) -> Array2<f64> {
    let mut qw = q.clone();
    for (mut row, &w) in qw.rows_mut().into_iter().zip(w1) {
        row *= w;
    }
    (q.dot(&k.t()) + qw.dot(&k.t()) * alpha) * scale
}

/// Row-wise softmax of biased scores.
pub fn attention_weights(a_prime: &Array2<f64>) -> Array2<f64> {
    softmax_rows(a_prime)
}

/// `M = A (W2 * V)`: messages from confidence-weighted values.
pub fn aggregate(a: &Array2<f64>, v: &Array2<f64>, w2: &[f64]) -> Array2<f64> {
    let mut scaled = v.clone();
    for (mut row, &w) in scaled.rows_mut().into_iter().zip(w2) {
        row *= w;
    }
    a.dot(&scaled)
}

fn head_slices(m: &Array2<f64>, heads: usize) -> Vec<Array2<f64>> {
    let d = m.ncols() / heads;
    (0..heads)
        .map(|h| m.slice(s![.., h * d..(h + 1) * d]).to_owned())
        .collect()
}

fn merge_heads(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).expect("heads share a token count")
}

/// Residual update shared by both block variants: `f + FFN([f, Up(Re(Q + M))])`.
fn finish_block(
    f_src: &Array3<f64>,
    tokens: &TokenSet,
    message: &Array2<f64>,
    block: &BlockWeights,
    pool: usize,
) -> Array3<f64> {
    let (_, h, w) = f_src.dim();
    let summed = &tokens.q + message;
    let up = upsample_nearest(&unflatten_tokens(&summed, tokens.grid_height, tokens.grid_width), pool);
    let x = flatten_tokens(f_src);
    let input = concatenate(Axis(1), &[x.view(), flatten_tokens(&up).view()]).expect("same token count");
    unflatten_tokens(&(x + block.ffn.forward(&input)), h, w)
}

fn check_maps(f: &Array3<f64>, map: &[f64]) -> Result<()> {
    let (_, h, w) = f.dim();
    if map.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "confidence map has {} cells, feature grid {h}x{w}",
            map.len()
        )));
    }
    Ok(())
}

/// One confidence-guided attention block; returns the updated source map.
pub fn block_forward(
    f_src: &Array3<f64>,
    f_tgt: &Array3<f64>,
    w_src: &[f64],
    w_tgt: &[f64],
    block: &BlockWeights,
    opts: &BlockOptions,
) -> Result<Array3<f64>> {
    check_maps(f_src, w_src)?;
    check_maps(f_tgt, w_tgt)?;
    let mut tokens = build_tokens(f_src, f_tgt, w_src, w_tgt, block, opts.pool, opts.rope_base)?;
    if !opts.bias {
        tokens.w1.iter_mut().for_each(|w| *w = 0.0);
    }
    if !opts.rescale {
        tokens.w2.iter_mut().for_each(|w| *w = 1.0);
    }
    let scale = 1.0 / ((block.channels() / opts.heads) as f64).sqrt();
    let (qs, ks, vs) = (
        head_slices(&tokens.q, opts.heads),
        head_slices(&tokens.k, opts.heads),
        head_slices(&tokens.v, opts.heads),
    );
    let messages: Vec<Array2<f64>> = (0..opts.heads)
        .map(|h| {
            let scores = biased_scores(&qs[h], &ks[h], &tokens.w1, opts.alpha, scale);
            aggregate(&attention_weights(&scores), &vs[h], &tokens.w2)
        })
        .collect();
    Ok(finish_block(f_src, &tokens, &merge_heads(&messages), block, opts.pool))
}

/// Standard attention block with no confidence input, used as the baseline.
pub fn vanilla_block_forward(
    f_src: &Array3<f64>,
    f_tgt: &Array3<f64>,
    block: &BlockWeights,
    opts: &BlockOptions,
) -> Result<Array3<f64>> {
    let (_, hs, ws) = f_src.dim();
    let (_, ht, wt) = f_tgt.dim();
    let tokens = build_tokens(
        f_src,
        f_tgt,
        &vec![0.0; hs * ws],
        &vec![1.0; ht * wt],
        block,
        opts.pool,
        opts.rope_base,
    )?;
    let scale = 1.0 / ((block.channels() / opts.heads) as f64).sqrt();
    let (qs, ks, vs) = (
        head_slices(&tokens.q, opts.heads),
        head_slices(&tokens.k, opts.heads),
        head_slices(&tokens.v, opts.heads),
    );
    let messages: Vec<Array2<f64>> = (0..opts.heads)
        .map(|h| softmax_rows(&(qs[h].dot(&ks[h].t()) * scale)).dot(&vs[h]))
        .collect();
    Ok(finish_block(f_src, &tokens, &merge_heads(&messages), block, opts.pool))
}

/// Coarse descriptors, `(H_c * W_c, C_d)` per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptors {
    pub d1: Array2<f64>,
    pub d2: Array2<f64>,
}

/// Runs all rounds and returns the updated coarse maps.
pub fn transform_maps(
    f1: &Array3<f64>,
    f2: &Array3<f64>,
    w1_map: &[f64],
    w2_map: &[f64],
    params: &AttentionParams,
    ablation: &Ablation,
) -> Result<(Array3<f64>, Array3<f64>)> {
    params.validate()?;
    let opts = BlockOptions::from_params(params, ablation);
    let (mut a, mut b) = (f1.clone(), f2.clone());
    for round in &params.rounds {
        let sa = &round.self_attn;
        let (a_self, b_self) = ops::join(
            || block_forward(&a, &a, w1_map, w1_map, sa, &opts),
            || block_forward(&b, &b, w2_map, w2_map, sa, &opts),
        );
        let (a_self, b_self) = (a_self?, b_self?);
        let ca = &round.cross_attn;
        let (a_cross, b_cross) = ops::join(
            || block_forward(&a_self, &b_self, w1_map, w2_map, ca, &opts),
            || block_forward(&b_self, &a_self, w2_map, w1_map, ca, &opts),
        );
        a = a_cross?;
        b = b_cross?;
    }
    Ok((a, b))
}

pub fn transform(
    f1: &Array3<f64>,
    f2: &Array3<f64>,
    w1_map: &[f64],
    w2_map: &[f64],
    params: &AttentionParams,
    ablation: &Ablation,
) -> Result<Descriptors> {
    let (a, b) = transform_maps(f1, f2, w1_map, w2_map, params, ablation)?;
    Ok(Descriptors {
        d1: flatten_tokens(&a),
        d2: flatten_tokens(&b),
    })
}

/// Interleaved standard attention with the same weights and no confidence.
pub fn transform_vanilla(
    f1: &Array3<f64>,
    f2: &Array3<f64>,
    params: &AttentionParams,
) -> Result<(Array3<f64>, Array3<f64>)> {
    params.validate()?;
    let opts = BlockOptions::from_params(params, &Ablation::baseline());
    let (mut a, mut b) = (f1.clone(), f2.clone());
    for round in &params.rounds {
        let a_self = vanilla_block_forward(&a, &a, &round.self_attn, &opts)?;
        let b_self = vanilla_block_forward(&b, &b, &round.self_attn, &opts)?;
        a = vanilla_block_forward(&a_self, &b_self, &round.cross_attn, &opts)?;
        b = vanilla_block_forward(&b_self, &a_self, &round.cross_attn, &opts)?;
    }
    Ok((a, b))
}
