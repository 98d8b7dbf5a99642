//! Synthetic homography corpora, mean matching accuracy and benchmark
//! reports.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::Image;
use crate::geometry::{build_coarse_gt, build_conf_gt, build_correspondence_field, build_fine_gt, fine_offset_gt, warp_point, Homography, Point2, COARSE_STRIDE};
use crate::losses::{self, LossBreakdown};
use crate::matching::{FineMatch, Matcher};
use crate::ops::compensated_sum;
use crate::{Error, Result, RunConfig};

pub const MMA_THRESHOLDS: [f64; 4] = [1.0, 3.0, 5.0, 10.0];

/// How image 2 is obtained from image 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarpKind {
    /// Random rotation, scale, shear and perspective about the image center;
    /// `magnitude` in `[0, 1]`, where 0 gives the identity.
    Random { magnitude: f64 },
    Translation { dx: f64, dy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub pairs: usize,
    pub size: usize,
    pub warp: WarpKind,
    /// Half-width of the uniform pixel noise added to image 2.
    pub noise: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            pairs: 10,
            size: 64,
            warp: WarpKind::Random { magnitude: 0.5 },
            noise: 0.02,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(COARSE_STRIDE) {
            return Err(Error::DimensionNotDivisible {
                width: self.size,
                height: self.size,
            });
        }
        if self.size < 2 * COARSE_STRIDE {
            return Err(Error::Config(format!("size must be at least {}", 2 * COARSE_STRIDE)));
        }
        if self.pairs == 0 {
            return Err(Error::Config("pairs must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 0.5], got {}", self.noise)));
        }
        match self.warp {
            WarpKind::Random { magnitude } if !(0.0..=1.0).contains(&magnitude) => {
                Err(Error::Config(format!("warp magnitude must lie in [0, 1], got {magnitude}")))
            }
            WarpKind::Translation { dx, dy } if !dx.is_finite() || !dy.is_finite() => {
                Err(Error::Config("translation must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPair {
    pub id: String,
    pub image1: Image,
    pub image2: Image,
    pub h: Homography,
}

/// One `meta.json` entry; image paths are relative to the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    pub img1: String,
    pub img2: String,
    pub h: Homography,
}

/// Square texture with lattice noise at several frequencies.
struct ValueNoise {
    size: usize,
    data: Vec<f64>,
}

impl ValueNoise {
    const OCTAVES: [(usize, f64); 4] = [(16, 0.4), (8, 0.3), (4, 0.2), (2, 0.1)];

    fn new(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut data = vec![0.0; size * size];
        for (spacing, amp) in Self::OCTAVES {
            let cells = size / spacing + 2;
            let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
            for y in 0..size {
                let (gy, fy) = (y / spacing, smooth((y % spacing) as f64 / spacing as f64));
                for x in 0..size {
                    let (gx, fx) = (x / spacing, smooth((x % spacing) as f64 / spacing as f64));
                    let at = |cx: usize, cy: usize| lattice[cy * cells + cx];
                    let top = at(gx, gy) * (1.0 - fx) + at(gx + 1, gy) * fx;
                    let bottom = at(gx, gy + 1) * (1.0 - fx) + at(gx + 1, gy + 1) * fx;
                    data[y * size + x] += amp * (top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        // Stretch to the full range without clipping; clipped plateaus have
        // no texture to match.
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        for v in &mut data {
            *v = (*v - lo) / span;
        }
        Self { size, data }
    }

    /// Bilinear sample at continuous index coordinates, edge-clamped.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let max = (self.size - 1) as f64;
        let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.size - 1), (y0 + 1).min(self.size - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |cx: usize, cy: usize| self.data[cy * self.size + cx];
        let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
        let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Bounded random homography about the center of a `size x size` image.
pub fn random_homography(rng: &mut ChaCha8Rng, size: usize, magnitude: f64) -> Result<Homography> {
    let mut draw = || rng.random_range(-1.0..=1.0) * magnitude;
    let (angle, log_scale, shear, px, py) = (draw() * 0.3, draw() * 0.2, draw() * 0.1, draw(), draw());
    if magnitude == 0.0 {
        return Ok(Homography::identity());
    }
    let c = size as f64 / 2.0;
    let s = log_scale.exp();
    let (sin, cos) = angle.sin_cos();
    let persp = 0.2 / size as f64;
    let a = [
        [s * cos, s * (cos * shear - sin), 0.0],
        [s * sin, s * (sin * shear + cos), 0.0],
        [px * persp, py * persp, 1.0],
    ];
    Homography::translation(c, c)
        .compose(&Homography::new(a)?)?
        .compose(&Homography::translation(-c, -c))
}

/// Builds pair `index` of a corpus in memory. Pixel values are quantized to
/// 8 bits so that a written and reloaded corpus is identical.
pub fn synthesize_pair(spec: &CorpusSpec, index: usize) -> Result<CorpusPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let size = spec.size;
    let margin = size / 2;
    let canvas = ValueNoise::new(size + 2 * margin, &mut rng);
    let h = match spec.warp {
        WarpKind::Random { magnitude } => random_homography(&mut rng, size, magnitude)?,
        WarpKind::Translation { dx, dy } => Homography::translation(dx, dy),
    };
    let h_inv = h.inverse()?;
    let m = margin as f64;
    let image1 = Image::from_fn(size, size, |x, y| quantize(canvas.data[(y + margin) * canvas.size + x + margin]))?;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let q = warp_point(&h_inv, Point2::new(x as f64 + 0.5, y as f64 + 0.5))?;
            let noise = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            pixels.push(quantize(canvas.sample(q.x - 0.5 + m, q.y - 0.5 + m) + noise));
        }
    }
    Ok(CorpusPair {
        id: format!("pair_{index:03}"),
        image1,
        image2: Image::new(size, size, pixels)?,
        h,
    })
}

pub fn synthesize_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusPair>> {
    spec.validate()?;
    map_pairs(&(0..spec.pairs).collect::<Vec<_>>(), |&i| synthesize_pair(spec, i))
        .into_iter()
        .collect()
}

/// Writes `meta.json` and two PGM files per pair into `dir`.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Vec<CorpusEntry>> {
    let pairs = synthesize_corpus(spec)?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let entry = CorpusEntry {
            id: pair.id.clone(),
            img1: format!("{}_1.pgm", pair.id),
            img2: format!("{}_2.pgm", pair.id),
            h: pair.h,
        };
        pair.image1.write_pgm(&dir.join(&entry.img1))?;
        pair.image2.write_pgm(&dir.join(&entry.img2))?;
        entries.push(entry);
    }
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&entries)? + "\n")?;
    Ok(entries)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusPair>> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path)?;
    let entries: Vec<CorpusEntry> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: Some(meta_path.clone()),
        reason: e.to_string(),
    })?;
    if entries.is_empty() {
        return Err(Error::Format {
            path: Some(meta_path),
            reason: "corpus has no pairs".into(),
        });
    }
    entries
        .into_iter()
        .map(|e| {
            Ok(CorpusPair {
                image1: Image::read_pgm(&dir.join(&e.img1))?,
                image2: Image::read_pgm(&dir.join(&e.img2))?,
                id: e.id,
                h: e.h,
            })
        })
        .collect()
}

fn map_pairs<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmaCurve {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub match_count: usize,
}

/// Distance between `h(point1)` and `point2` per match; infinite when the
/// warp is degenerate.
pub fn reprojection_errors(matches: &[FineMatch], h: &Homography) -> Vec<f64> {
    matches
        .iter()
        .map(|m| warp_point(h, m.point1).map_or(f64::INFINITY, |p| p.distance(&m.point2)))
        .collect()
}

pub fn mma(matches: &[FineMatch], h: &Homography, thresholds: &[f64]) -> MmaCurve {
    let errors = reprojection_errors(matches, h);
    let accuracy = thresholds
        .iter()
        .map(|&t| {
            if errors.is_empty() {
                0.0
            } else {
                errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64
            }
        })
        .collect();
    MmaCurve {
        thresholds: thresholds.to_vec(),
        accuracy,
        match_count: matches.len(),
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub coarse_matches: usize,
    pub curve: MmaCurve,
    /// `None` when the pair produced no fine matches.
    pub median_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: String,
    pub tag: String,
    pub config: RunConfig,
    pub thresholds: Vec<f64>,
    pub pairs: Vec<PairResult>,
    /// Unweighted mean of the per-pair accuracies.
    pub mean: Vec<f64>,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn file_name(&self) -> String {
        format!("bench_{}.json", self.tag)
    }

    pub fn mean_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == threshold).map(|k| self.mean[k])
    }
}

pub fn run_benchmark(pairs: &[CorpusPair], matcher: &Matcher) -> Result<BenchReport> {
    let results = map_pairs(pairs, |pair| -> Result<PairResult> {
        let matches = matcher.match_pair(&pair.image1, &pair.image2)?;
        Ok(PairResult {
            id: pair.id.clone(),
            coarse_matches: matches.coarse.len(),
            curve: mma(&matches.fine, &pair.h, &MMA_THRESHOLDS),
            median_error: median(&reprojection_errors(&matches.fine, &pair.h)),
        })
    });
    let results: Vec<PairResult> = results.into_iter().collect::<Result<_>>()?;
    let mean = (0..MMA_THRESHOLDS.len())
        .map(|k| compensated_sum(results.iter().map(|r| r.curve.accuracy[k])) / results.len().max(1) as f64)
        .collect();
    let config = matcher.config().clone();
    Ok(BenchReport {
        mode: config.ablation.mode().into(),
        tag: config.ablation.tag(),
        config,
        thresholds: MMA_THRESHOLDS.to_vec(),
        pairs: results,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub id: String,
    pub config: RunConfig,
    pub losses: LossBreakdown,
    pub coarse_matches: usize,
    pub fine_matches: usize,
    /// Fine matches inside the sub-pixel loss mask.
    pub subpixel_count: usize,
    /// Set when no fine match fell inside the mask, so the sub-pixel term is 0.
    pub subpixel_empty_mask: bool,
}

/// Runs the pipeline on one pair and scores every loss term against the
/// ground truth implied by the pair's homography.
pub fn loss_report(pair: &CorpusPair, matcher: &Matcher) -> Result<LossReport> {
    let cfg = matcher.config();
    let out = matcher.run(&pair.image1, &pair.image2)?;
    let (wc, hc) = out.coarse_dims;

    let pc_gt = build_coarse_gt(&build_correspondence_field(&pair.h, wc, hc));
    let flat = |m: &ndarray::Array2<f64>| m.iter().copied().collect::<Vec<_>>();
    let l_c = losses::focal_loss(&flat(&out.p_c), &flat(&pc_gt), &cfg.focal)?;

    let mut fine_p = Vec::new();
    let mut fine_gt = Vec::new();
    for patch in &out.stage1.patches {
        fine_p.extend(patch.probabilities.iter().copied());
        fine_gt.extend(build_fine_gt(&pair.h, patch.origin1, patch.origin2, cfg.window).iter().copied());
    }
    let l_f = if fine_p.is_empty() {
        0.0
    } else {
        losses::focal_loss(&fine_p, &fine_gt, &cfg.focal)?
    };

    let mut pred = Vec::with_capacity(out.matches.fine.len());
    let mut gt = Vec::with_capacity(out.matches.fine.len());
    for m in &out.matches.fine {
        let inter = &out.matches.intermediate[m.intermediate_index];
        pred.push(m.offset);
        gt.push(fine_offset_gt(&pair.h, inter.i, inter.j)?);
    }
    let sub = losses::subpixel_loss(&pred, &gt, cfg.epsilon)?;

    let (t1, t2) = build_conf_gt(&pc_gt)?;
    let l_m = losses::confidence_loss(&out.conf1.values, &out.conf2.values, &t1, &t2, cfg.focal.clamp_eps)?;
    let beta = if cfg.ablation.supervise_confidence { cfg.beta } else { 0.0 };

    Ok(LossReport {
        id: pair.id.clone(),
        config: cfg.clone(),
        losses: losses::total_loss(l_c, l_f, sub.value, l_m, beta),
        coarse_matches: out.matches.coarse.len(),
        fine_matches: out.matches.fine.len(),
        subpixel_count: sub.count,
        subpixel_empty_mask: sub.empty_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn fine(p1: (f64, f64), p2: (f64, f64)) -> FineMatch {
        FineMatch {
            point1: Point2::new(p1.0, p1.1),
            point2: Point2::new(p2.0, p2.1),
            score: 1.0,
            offset: [0.0, 0.0],
            intermediate_index: 0,
        }
    }

    #[test]
    fn mma_examples() {
        let h = Homography::translation(2.0, 0.0);
        let exact = [fine((1.0, 1.0), (3.0, 1.0)), fine((5.0, 7.0), (7.0, 7.0))];
        assert_eq!(mma(&exact, &h, &MMA_THRESHOLDS).accuracy, vec![1.0; 4]);
        let off = [fine((1.0, 1.0), (5.0, 1.0))];
        assert_eq!(mma(&off, &h, &MMA_THRESHOLDS).accuracy, vec![0.0, 1.0, 1.0, 1.0]);
        let empty = mma(&[], &h, &MMA_THRESHOLDS);
        assert_eq!((empty.accuracy, empty.match_count), (vec![0.0; 4], 0));
    }

    #[test]
    fn zero_magnitude_gives_identity() {
        let spec = CorpusSpec {
            warp: WarpKind::Random { magnitude: 0.0 },
            pairs: 3,
            ..CorpusSpec::default()
        };
        for pair in synthesize_corpus(&spec).unwrap() {
            assert!(pair.h.is_identity());
        }
    }

    #[test]
    fn integer_translation_is_exact() {
        let spec = CorpusSpec {
            warp: WarpKind::Translation { dx: 8.0, dy: 0.0 },
            noise: 0.0,
            pairs: 1,
            ..CorpusSpec::default()
        };
        let pair = synthesize_pair(&spec, 0).unwrap();
        for y in 0..64 {
            for x in 8..64 {
                assert_eq!(pair.image2.get(x, y), pair.image1.get(x - 8, y));
            }
        }
    }

    #[test]
    fn textures_have_contrast_and_pairs_differ() {
        let spec = CorpusSpec { pairs: 2, ..CorpusSpec::default() };
        let pairs = synthesize_corpus(&spec).unwrap();
        let d = pairs[0].image1.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!(var.sqrt() > 0.1, "std {}", var.sqrt());
        assert_ne!(pairs[0].image1, pairs[1].image1);
    }

    #[test]
    fn random_homographies_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let h = random_homography(&mut rng, 64, 1.0).unwrap();
            let c = warp_point(&h, Point2::new(32.0, 32.0)).unwrap();
            assert!(c.distance(&Point2::new(32.0, 32.0)) < 8.0);
            assert!(h.determinant() > 0.3);
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let spec = CorpusSpec { size: 63, ..CorpusSpec::default() };
        assert!(matches!(spec.validate(), Err(Error::DimensionNotDivisible { .. })));
        let spec = CorpusSpec { pairs: 0, ..CorpusSpec::default() };
        assert!(spec.validate().unwrap_err().is_config());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    proptest! {
        #[test]
        fn mma_is_monotone_and_order_invariant(
            pts in proptest::collection::vec((0.0f64..64.0, 0.0f64..64.0, -6.0f64..6.0, -6.0f64..6.0), 0..30),
            seed in any::<u64>(),
        ) {
            let h = Homography::translation(1.5, -0.5);
            let matches: Vec<FineMatch> = pts
                .iter()
                .map(|&(x, y, dx, dy)| fine((x, y), (x + 1.5 + dx, y - 0.5 + dy)))
                .collect();
            let curve = mma(&matches, &h, &MMA_THRESHOLDS);
            prop_assert!(curve.accuracy.windows(2).all(|w| w[0] <= w[1]));
            let mut shuffled = matches.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(mma(&shuffled, &h, &MMA_THRESHOLDS), curve);
        }
    }
}
