//! Coarse matching and two-stage fine refinement, plus the end-to-end
//! [`Matcher`].
//!
//! Coarse matches are mutual nearest neighbours of a dual-softmax over
//! descriptor similarities. Each coarse match then opens a pair of fine
//! patches; a second dual-softmax + MNN inside the patches gives integer
//! fine-grid matches, and a softmax expectation over the 3x3 neighbourhood of
//! the target cell gives the final sub-pixel position.

use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams, Descriptors};
use crate::confidence::{self, ConfidenceMap, CorrelationMatrix};
use crate::features::{l2_normalize_channels, Backbone, FeaturePyramid, Image};
use crate::geometry::{fine_to_pixel, Point2, COARSE_TO_FINE};
use crate::ops::{self, flatten_tokens, l2_normalize_rows, softmax, softmax_cols, softmax_rows, unflatten_tokens};
use crate::{Error, Result, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// Integer fine-grid match produced by the first refinement stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntermediateMatch {
    pub coarse_index: usize,
    /// Fine-grid `(col, row)` in image 1.
    pub i: (usize, usize),
    /// Fine-grid `(col, row)` in image 2.
    pub j: (usize, usize),
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineMatch {
    /// Pixel coordinates in image 1 (center of fine cell `i`).
    pub point1: Point2,
    /// Sub-pixel position in image 2.
    pub point2: Point2,
    pub score: f64,
    /// Refined position relative to the intermediate target, fine-grid units.
    pub offset: [f64; 2],
    pub intermediate_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub coarse: Vec<CoarseMatch>,
    pub intermediate: Vec<IntermediateMatch>,
    pub fine: Vec<FineMatch>,
}

#[derive(Serialize)]
struct FineLine {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
}

#[derive(Serialize)]
struct CoarseLine {
    i: usize,
    j: usize,
    score: f64,
}

impl MatchSet {
    /// One `{x1, y1, x2, y2, score}` object per line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for m in &self.fine {
            let line = FineLine {
                x1: m.point1.x,
                y1: m.point1.y,
                x2: m.point2.x,
                y2: m.point2.y,
                score: m.score,
            };
            out.push_str(&serde_json::to_string(&line).expect("plain struct"));
            out.push('\n');
        }
        out
    }

    /// One `{i, j, score}` object per coarse match.
    pub fn coarse_json_lines(&self) -> String {
        self.coarse
            .iter()
            .map(|m| {
                let line = CoarseLine { i: m.i, j: m.j, score: m.score };
                serde_json::to_string(&line).expect("plain struct") + "\n"
            })
            .collect()
    }
}

pub fn coarse_similarity(d1: &Array2<f64>, d2: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if d1.ncols() != d2.ncols() {
        return Err(Error::ChannelMismatch {
            left: d1.ncols(),
            right: d2.ncols(),
        });
    }
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    Ok(d1.dot(&d2.t()) / lambda)
}

/// Row softmax times column softmax, elementwise.
pub fn dual_softmax(s: &Array2<f64>) -> Array2<f64> {
    softmax_rows(s) * softmax_cols(s)
}

/// Index of the strict maximum, or `None` if it is tied or the input is empty.
fn strict_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut tied = false;
    for (idx, v) in values.enumerate() {
        match best {
            None => best = Some((idx, v)),
            Some((_, b)) if v > b => {
                best = Some((idx, v));
                tied = false;
            }
            Some((_, b)) if v == b => tied = true,
            _ => {}
        }
    }
    if tied {
        None
    } else {
        best.map(|(i, _)| i)
    }
}

/// Pairs that are each other's strict maximum and reach `theta`.
pub fn mnn_filter(p: &Array2<f64>, theta: f64) -> Vec<CoarseMatch> {
    let col_best: Vec<Option<usize>> = p
        .columns()
        .into_iter()
        .map(|c| strict_argmax(c.iter().copied()))
        .collect();
    p.rows()
        .into_iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let j = strict_argmax(row.iter().copied())?;
            (col_best[j] == Some(i) && p[[i, j]] >= theta).then(|| CoarseMatch { i, j, score: p[[i, j]] })
        })
        .collect()
}

/// Fixed stand-in for the fine fusion network: project coarse descriptors to
/// the fine channel count, upsample, add, then one affine layer with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `(C_f, C_d)`
    pub projection: Array2<f64>,
    /// `(C_f, C_f)`
    pub post: Array2<f64>,
    pub bias: Array1<f64>,
}

impl FusionParams {
    pub fn identity(coarse_channels: usize, fine_channels: usize) -> Self {
        Self {
            projection: Array2::eye(fine_channels.max(coarse_channels))
                .slice(s![..fine_channels, ..coarse_channels])
                .to_owned(),
            post: Array2::eye(fine_channels),
            bias: Array1::zeros(fine_channels),
        }
    }

    pub fn random(coarse_channels: usize, fine_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |std: f64| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        };
        let proj_std = 0.5 / (coarse_channels as f64).sqrt();
        let post_std = 0.3 / (fine_channels as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((fine_channels, coarse_channels), || normal(proj_std));
        let post = Array2::eye(fine_channels)
            + Array2::from_shape_simple_fn((fine_channels, fine_channels), || normal(post_std));
        Self {
            projection,
            post,
            bias: Array1::zeros(fine_channels),
        }
    }
}

/// Fuses fine features `(C_f, H_f, W_f)` with coarse descriptors `(C_d, H_c, W_c)`.
pub fn fuse_features(f_fine: &Array3<f64>, d_coarse: &Array3<f64>, params: &FusionParams) -> Result<Array3<f64>> {
    let (cf, hf, wf) = f_fine.dim();
    let (cd, hc, wc) = d_coarse.dim();
    if hf != hc * COARSE_TO_FINE || wf != wc * COARSE_TO_FINE {
        return Err(Error::ShapeMismatch(format!(
            "fine grid {hf}x{wf} is not {COARSE_TO_FINE}x the coarse grid {hc}x{wc}"
        )));
    }
    if params.projection.dim() != (cf, cd) || params.post.dim() != (cf, cf) || params.bias.len() != cf {
        return Err(Error::ShapeMismatch("fusion parameters do not match feature channels".into()));
    }
    let projected = unflatten_tokens(&flatten_tokens(d_coarse).dot(&params.projection.t()), hc, wc);
    let summed = f_fine + &attention::upsample_nearest(&projected, COARSE_TO_FINE);
    let out = (flatten_tokens(&summed).dot(&params.post.t()) + &params.bias).mapv_into(ops::relu);
    Ok(unflatten_tokens(&out, hf, wf))
}

/// Subtracts each channel's spatial mean. Fused features are non-negative,
/// so without centering all cosine similarities crowd near 1.
pub fn center_channels(f: &Array3<f64>) -> Array3<f64> {
    let mut out = f.clone();
    for mut ch in out.outer_iter_mut() {
        let mean = ch.mean().unwrap_or(0.0);
        ch -= mean;
    }
    out
}

/// Top-left fine-grid corner of the `window`-sized patch centered on a
/// coarse cell, clamped into the grid.
pub fn patch_origin(cell: usize, fine_extent: usize, window: usize) -> usize {
    let center = cell * COARSE_TO_FINE + COARSE_TO_FINE / 2;
    center
        .saturating_sub(window / 2)
        .min(fine_extent.saturating_sub(window))
}

fn gather_patch(f: &Array3<f64>, origin: (usize, usize), window: usize) -> Array2<f64> {
    let (c, _, _) = f.dim();
    let mut out = Array2::zeros((window * window, c));
    for dy in 0..window {
        for dx in 0..window {
            out.row_mut(dy * window + dx)
                .assign(&f.slice(s![.., origin.1 + dy, origin.0 + dx]));
        }
    }
    out
}

/// Patch pair and fine probability matrix behind one coarse match.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub coarse_index: usize,
    pub origin1: (usize, usize),
    pub origin2: (usize, usize),
    pub probabilities: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineStage1 {
    pub patches: Vec<PatchPair>,
    pub matches: Vec<IntermediateMatch>,
}

fn map_ordered<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// First refinement stage, keeping the per-patch probabilities.
pub fn fine_stage1_detailed(
    fused1: &Array3<f64>,
    fused2: &Array3<f64>,
    coarse: &[CoarseMatch],
    coarse_width: usize,
    window: usize,
    temperature: f64,
) -> Result<FineStage1> {
    let (c1, h1, w1) = fused1.dim();
    let (c2, h2, w2) = fused2.dim();
    if c1 != c2 {
        return Err(Error::ChannelMismatch { left: c1, right: c2 });
    }
    if window == 0 || window > h1.min(w1).min(h2).min(w2) {
        return Err(Error::Config(format!("window {window} does not fit the fine grid")));
    }
    let per_match = map_ordered(coarse, |ci, m| {
        let o1 = (
            patch_origin(m.i % coarse_width, w1, window),
            patch_origin(m.i / coarse_width, h1, window),
        );
        let o2 = (
            patch_origin(m.j % coarse_width, w2, window),
            patch_origin(m.j / coarse_width, h2, window),
        );
        let p1 = gather_patch(fused1, o1, window);
        let p2 = gather_patch(fused2, o2, window);
        let probs = dual_softmax(&(p1.dot(&p2.t()) / temperature));
        let matches: Vec<IntermediateMatch> = mnn_filter(&probs, 0.0)
            .into_iter()
            .map(|pm| IntermediateMatch {
                coarse_index: ci,
                i: (o1.0 + pm.i % window, o1.1 + pm.i / window),
                j: (o2.0 + pm.j % window, o2.1 + pm.j / window),
                score: pm.score,
            })
            .collect();
        (
            PatchPair {
                coarse_index: ci,
                origin1: o1,
                origin2: o2,
                probabilities: probs,
            },
            matches,
        )
    });
    let mut out = FineStage1 {
        patches: Vec::with_capacity(per_match.len()),
        matches: Vec::new(),
    };
    for (patch, matches) in per_match {
        out.patches.push(patch);
        out.matches.extend(matches);
    }
    Ok(out)
}

pub fn fine_stage1(
    fused1: &Array3<f64>,
    fused2: &Array3<f64>,
    coarse: &[CoarseMatch],
    coarse_width: usize,
    window: usize,
    temperature: f64,
) -> Result<Vec<IntermediateMatch>> {
    Ok(fine_stage1_detailed(fused1, fused2, coarse, coarse_width, window, temperature)?.matches)
}

/// Softmax expectation over a 3x3 window of scores (row-major, `dy` then
/// `dx` in `-1..=1`). Entries with `None` lie outside the grid and are
/// skipped. Returns the offset from the window center.
pub fn window_expectation(scores: &[Option<f64>; 9]) -> [f64; 2] {
    let valid: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.map(|s| (k, s)))
        .collect();
    let weights = softmax(&valid.iter().map(|&(_, s)| s).collect::<Vec<_>>());
    let mut offset = [0.0, 0.0];
    for ((k, _), w) in valid.iter().zip(weights) {
        offset[0] += w * ((k % 3) as f64 - 1.0);
        offset[1] += w * ((k / 3) as f64 - 1.0);
    }
    offset
}

/// Second refinement stage: sub-pixel expectation around each intermediate target.
pub fn fine_stage2(
    fused1: &Array3<f64>,
    fused2: &Array3<f64>,
    intermediate: &[IntermediateMatch],
    temperature: f64,
) -> Vec<FineMatch> {
    let (_, h2, w2) = fused2.dim();
    map_ordered(intermediate, |idx, m| {
        let query = fused1.slice(s![.., m.i.1, m.i.0]);
        let mut scores = [None; 9];
        for (k, score) in scores.iter_mut().enumerate() {
            let x = m.j.0 as isize + (k % 3) as isize - 1;
            let y = m.j.1 as isize + (k / 3) as isize - 1;
            if x >= 0 && y >= 0 && (x as usize) < w2 && (y as usize) < h2 {
                let key = fused2.slice(s![.., y as usize, x as usize]);
                *score = Some(query.dot(&key) / temperature);
            }
        }
        let offset = window_expectation(&scores);
        FineMatch {
            point1: fine_to_pixel(m.i.0 as f64, m.i.1 as f64),
            point2: fine_to_pixel(m.j.0 as f64 + offset[0], m.j.1 as f64 + offset[1]),
            score: m.score,
            offset,
            intermediate_index: idx,
        }
    })
}

/// Everything the pipeline computes for one pair.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub pyramid1: FeaturePyramid,
    pub pyramid2: FeaturePyramid,
    pub correlation: CorrelationMatrix,
    pub conf1: ConfidenceMap,
    pub conf2: ConfidenceMap,
    pub descriptors: Descriptors,
    pub p_c: Array2<f64>,
    pub stage1: FineStage1,
    pub matches: MatchSet,
    /// Coarse grid `(width, height)`.
    pub coarse_dims: (usize, usize),
}

/// The full pipeline with its fixed-seed weights.
#[derive(Debug, Clone)]
pub struct Matcher {
    config: RunConfig,
    backbone: Backbone,
    attention: AttentionParams,
    fusion: FusionParams,
}

impl Matcher {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone())?;
        let attention = AttentionParams::random(config.coarse_channels, config.t_blocks, config.seed.wrapping_add(1));
        let fusion = FusionParams::random(config.coarse_channels, config.fine_channels, config.seed.wrapping_add(2));
        let mut m = Self {
            config,
            backbone,
            attention,
            fusion,
        };
        m.sync_attention();
        Ok(m)
    }

    /// Replaces the attention weights. The round count comes from the
    /// weights; `eta`, pool, heads and the rotary base stay as configured.
    pub fn with_attention(mut self, params: AttentionParams) -> Result<Self> {
        if params.channels != self.config.coarse_channels {
            return Err(Error::ChannelMismatch {
                left: params.channels,
                right: self.config.coarse_channels,
            });
        }
        self.config.t_blocks = params.t_blocks();
        self.attention = params;
        self.sync_attention();
        self.attention.validate()?;
        Ok(self)
    }

    fn sync_attention(&mut self) {
        self.attention.eta = self.config.eta;
        self.attention.pool = self.config.pool;
        self.attention.heads = self.config.heads;
        self.attention.rope_base = self.config.rope_base;
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn attention(&self) -> &AttentionParams {
        &self.attention
    }

    pub fn run(&self, img1: &Image, img2: &Image) -> Result<PipelineOutput> {
        if (img1.width(), img1.height()) != (img2.width(), img2.height()) {
            return Err(Error::ShapeMismatch("image pair sizes differ".into()));
        }
        let cfg = &self.config;
        let (p1, p2) = ops::join(|| self.backbone.extract(img1), || self.backbone.extract(img2));
        let (p1, p2) = (p1?, p2?);
        let (wc, hc) = p1.coarse_dims();
        if hc % cfg.pool != 0 || wc % cfg.pool != 0 {
            return Err(Error::PoolDivisibility {
                pool: cfg.pool,
                height: hc,
                width: wc,
            });
        }

        let c1 = l2_normalize_channels(&p1.coarse);
        let c2 = l2_normalize_channels(&p2.coarse);
        let correlation = confidence::correlation(&c1, &c2, cfg.gamma)?;
        let (conf1, conf2) = confidence::confidence_maps(&correlation, cfg.conf_variant);

        let (m1, m2) = attention::transform_maps(&c1, &c2, &conf1.values, &conf2.values, &self.attention, &cfg.ablation)?;
        let descriptors = Descriptors {
            d1: flatten_tokens(&m1),
            d2: flatten_tokens(&m2),
        };
        let s_c = coarse_similarity(&l2_normalize_rows(&descriptors.d1), &l2_normalize_rows(&descriptors.d2), cfg.lambda)?;
        let p_c = dual_softmax(&s_c);
        let coarse = mnn_filter(&p_c, cfg.theta_c);

        let (f1, f2) = ops::join(
            || fuse_features(&p1.fine, &m1, &self.fusion),
            || fuse_features(&p2.fine, &m2, &self.fusion),
        );
        let fused1 = l2_normalize_channels(&center_channels(&f1?));
        let fused2 = l2_normalize_channels(&center_channels(&f2?));
        let stage1 = fine_stage1_detailed(&fused1, &fused2, &coarse, wc, cfg.window, cfg.fine_lambda)?;
        let fine = fine_stage2(&fused1, &fused2, &stage1.matches, cfg.refine_temperature);

        let matches = MatchSet {
            coarse,
            intermediate: stage1.matches.clone(),
            fine,
        };
        Ok(PipelineOutput {
            pyramid1: p1,
            pyramid2: p2,
            correlation,
            conf1,
            conf2,
            descriptors,
            p_c,
            stage1,
            matches,
            coarse_dims: (wc, hc),
        })
    }

    pub fn match_pair(&self, img1: &Image, img2: &Image) -> Result<MatchSet> {
        Ok(self.run(img1, img2)?.matches)
    }
}

/// Builds a [`Matcher`] from `config` and matches one pair.
pub fn match_pair(img1: &Image, img2: &Image, config: &RunConfig) -> Result<MatchSet> {
    Matcher::new(config.clone())?.match_pair(img1, img2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn coarse_similarity_examples() {
        let e = Array2::<f64>::eye(3);
        assert_eq!(coarse_similarity(&e, &e, 1.0).unwrap(), e);
        assert_eq!(coarse_similarity(&e, &e, 4.0).unwrap(), &e * 0.25);
        let d1 = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.7], [0.0, 0.4, 0.9]];
        let d2 = array![[1.1, 0.2, -0.3], [-0.6, 0.8, 0.25], [0.45, -0.15, 1.3]];
        let s = coarse_similarity(&d1, &d2, 0.1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += d1[[i, c]] * d2[[j, c]];
                }
                assert!((s[[i, j]] - acc / 0.1).abs() < 1e-12);
            }
        }
        assert!(coarse_similarity(&e, &Array2::eye(2), 1.0).is_err());
    }

    #[test]
    fn dual_softmax_examples() {
        assert_eq!(dual_softmax(&array![[3.7]]), array![[1.0]]);
        let p = dual_softmax(&array![[10.0, 0.0], [0.0, 10.0]]);
        assert!(p[[0, 0]] >= 0.9999 && p[[1, 1]] >= 0.9999);
        assert!(p[[0, 1]] <= 1e-4 && p[[1, 0]] <= 1e-4);
        let n = 5;
        let p = dual_softmax(&Array2::zeros((n, n)));
        assert!(p.iter().all(|&v| (v - 1.0 / (n * n) as f64).abs() < 1e-15));
    }

    #[test]
    fn mnn_examples() {
        let p = array![[0.9, 0.1], [0.2, 0.8]];
        let m = mnn_filter(&p, 0.5);
        assert_eq!(m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        assert!(mnn_filter(&p, 0.95).is_empty());
        let p = array![[0.6, 0.7], [0.1, 0.8]];
        let m = mnn_filter(&p, 0.5);
        assert_eq!(m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(1, 1)]);
        // Ties are discarded.
        assert!(mnn_filter(&array![[0.5, 0.5]], 0.0).is_empty());
    }

    #[test]
    fn fusion_examples() {
        let fine = Array3::from_shape_fn((4, 8, 8), |(c, y, x)| ((c + 2 * y + 3 * x) % 5) as f64 * 0.2);
        let zero = Array3::zeros((8, 2, 2));
        let out = fuse_features(&fine, &zero, &FusionParams::identity(8, 4)).unwrap();
        assert_eq!(out, fine);

        let params = FusionParams::random(8, 4, 3);
        let coarse = Array3::from_shape_fn((8, 2, 2), |(c, y, x)| (c as f64 - 3.0) * 0.1 + (y + x) as f64);
        assert_eq!(fuse_features(&fine, &coarse, &params).unwrap().dim(), (4, 8, 8));

        // With zero fine features the output depends only on the coarse cell.
        let constant = Array3::from_shape_fn((8, 2, 2), |(c, _, _)| c as f64 * 0.05);
        let only_coarse = fuse_features(&Array3::zeros((4, 8, 8)), &constant, &params).unwrap();
        for c in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(only_coarse[[c, y, x]], only_coarse[[c, 0, 0]]);
                    assert_eq!(only_coarse[[c, y + 4, x + 4]], only_coarse[[c, 4, 4]]);
                }
            }
        }
        assert!(fuse_features(&fine, &Array3::zeros((8, 3, 2)), &params).is_err());
    }

    #[test]
    fn patch_origins_are_centered_and_clamped() {
        assert_eq!(patch_origin(0, 16, 8), 0);
        assert_eq!(patch_origin(1, 16, 8), 2);
        assert_eq!(patch_origin(3, 16, 8), 8);
        assert_eq!(patch_origin(2, 16, 2), 9);
    }

    fn distinct_features(c: usize, h: usize, w: usize) -> Array3<f64> {
        let f = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            ((ch as f64 + 1.0) * (0.7 * x as f64 + 1.3 * y as f64 + 0.1)).sin()
        });
        l2_normalize_channels(&f)
    }

    #[test]
    fn stage1_self_matches_lie_on_the_diagonal() {
        let f = distinct_features(6, 8, 8);
        let coarse = [CoarseMatch { i: 0, j: 0, score: 1.0 }, CoarseMatch { i: 3, j: 3, score: 1.0 }];
        let st = fine_stage1_detailed(&f, &f, &coarse, 2, 8, 0.1).unwrap();
        assert!(!st.matches.is_empty());
        for m in &st.matches {
            assert_eq!(m.i, m.j);
        }
        let per_coarse = |k| st.matches.iter().filter(|m| m.coarse_index == k).count();
        assert!(per_coarse(0) <= 64 && per_coarse(1) <= 64);
    }

    #[test]
    fn stage1_toy_case_matches_enumeration() {
        // 2x2 patches (w = 2) on a 4x4 fine grid with hand-set features.
        let f1 = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| if c == 0 { x as f64 } else { y as f64 * 0.5 });
        let f2 = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| if c == 0 { (3 - x) as f64 } else { y as f64 });
        let coarse = [CoarseMatch { i: 0, j: 0, score: 1.0 }];
        let got = fine_stage1(&f1, &f2, &coarse, 1, 2, 1.0).unwrap();
        // Oracle: explicit 4x4 similarity, scalar dual softmax, mutual argmax.
        let o = patch_origin(0, 4, 2);
        let cells: Vec<(usize, usize)> = (0..4).map(|a| (o + a % 2, o + a / 2)).collect();
        let sim = |a: usize, b: usize| {
            let (p, q) = (cells[a], cells[b]);
            (0..2).map(|c| f1[[c, p.1, p.0]] * f2[[c, q.1, q.0]]).sum::<f64>()
        };
        let prob = |a: usize, b: usize| {
            let row: f64 = (0..4).map(|k| sim(a, k).exp()).sum();
            let col: f64 = (0..4).map(|k| sim(k, b).exp()).sum();
            sim(a, b).exp() / row * sim(a, b).exp() / col
        };
        let mut expected = Vec::new();
        for a in 0..4 {
            let b = (0..4).max_by(|&x, &y| prob(a, x).total_cmp(&prob(a, y))).unwrap();
            let back = (0..4).max_by(|&x, &y| prob(x, b).total_cmp(&prob(y, b))).unwrap();
            if back == a {
                expected.push((cells[a], cells[b]));
            }
        }
        let got: Vec<_> = got.iter().map(|m| (m.i, m.j)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn expectation_examples() {
        assert_eq!(window_expectation(&[Some(0.7); 9]), [0.0, 0.0]);

        let mut scores = [Some(0.0); 9];
        scores[5] = Some(50.0);
        let off = window_expectation(&scores);
        assert!((off[0] - 1.0).abs() < 1e-6 && off[1].abs() < 1e-6);

        let mut scores = [Some(-100.0); 9];
        scores[4] = Some(3.0);
        scores[5] = Some(3.0);
        let off = window_expectation(&scores);
        assert!((off[0] - 0.5).abs() < 1e-9 && off[1].abs() < 1e-9);

        let mut border = [None; 9];
        border[4] = Some(1.0);
        border[7] = Some(1.0);
        assert_eq!(window_expectation(&border), [0.0, 0.5]);
    }

    #[test]
    fn stage2_with_identical_features_stays_on_target() {
        let f = distinct_features(6, 8, 8);
        let inter = [IntermediateMatch { coarse_index: 0, i: (3, 4), j: (3, 4), score: 1.0 }];
        let fm = fine_stage2(&f, &f, &inter, 1e-3);
        assert!(fm[0].point1.distance(&fm[0].point2) < 1e-6);
        assert_eq!(fm[0].point1, Point2::new(7.0, 9.0));
    }

    #[test]
    fn json_lines_format() {
        let set = MatchSet {
            coarse: vec![CoarseMatch { i: 1, j: 2, score: 0.5 }],
            intermediate: vec![],
            fine: vec![FineMatch {
                point1: Point2::new(1.0, 3.0),
                point2: Point2::new(1.5, 3.0),
                score: 0.25,
                offset: [0.25, 0.0],
                intermediate_index: 0,
            }],
        };
        assert_eq!(set.to_json_lines(), "{\"x1\":1.0,\"y1\":3.0,\"x2\":1.5,\"y2\":3.0,\"score\":0.25}\n");
        assert_eq!(set.coarse_json_lines(), "{\"i\":1,\"j\":2,\"score\":0.5}\n");
    }

    fn prob_matrix(n: usize, m: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-4.0f64..4.0, n * m)
            .prop_map(move |v| dual_softmax(&Array2::from_shape_vec((n, m), v).unwrap()))
    }

    proptest! {
        #[test]
        fn dual_softmax_bounds(p in prob_matrix(4, 5)) {
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn dual_softmax_bounded_by_factors(v in proptest::collection::vec(-4.0f64..4.0, 12)) {
            let s = Array2::from_shape_vec((3, 4), v).unwrap();
            let (r, c, p) = (softmax_rows(&s), softmax_cols(&s), dual_softmax(&s));
            for ((pv, rv), cv) in p.iter().zip(r.iter()).zip(c.iter()) {
                prop_assert!(*pv <= *rv + 1e-15 && *pv <= *cv + 1e-15);
            }
        }

        #[test]
        fn mnn_is_one_to_one_and_monotone_invariant(p in prob_matrix(5, 5), theta in 0.0f64..0.3) {
            let m = mnn_filter(&p, theta);
            let mut is: Vec<_> = m.iter().map(|m| m.i).collect();
            let mut js: Vec<_> = m.iter().map(|m| m.j).collect();
            is.dedup();
            js.sort();
            js.dedup();
            prop_assert_eq!(is.len(), m.len());
            prop_assert_eq!(js.len(), m.len());
            let squashed = p.mapv(f64::sqrt);
            let m2 = mnn_filter(&squashed, theta.sqrt());
            prop_assert_eq!(
                m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(),
                m2.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>()
            );
        }

        #[test]
        fn expectation_stays_in_window(scores in proptest::collection::vec(-60.0f64..60.0, 9), mask in 1u16..512) {
            let mut s = [None; 9];
            for k in 0..9 {
                if mask & (1 << k) != 0 {
                    s[k] = Some(scores[k]);
                }
            }
            let off = window_expectation(&s);
            prop_assert!(off[0].abs() <= 1.0 + 1e-12 && off[1].abs() <= 1.0 + 1e-12);
        }
    }
}
