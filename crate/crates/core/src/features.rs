//! Grayscale images and the deterministic feature pyramid.
//!
//! The backbone is a fixed-seed stack of random 3x3 stride-2 convolutions:
//! one stage produces the fine map (1/2 resolution), two more produce the
//! coarse map (1/8 resolution). Borders use replicate padding so that a
//! constant image yields spatially constant features.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{COARSE_STRIDE, FINE_STRIDE};
use crate::{pgm, Error, Result};

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !width.is_multiple_of(COARSE_STRIDE) || !height.is_multiple_of(COARSE_STRIDE) {
            return Err(Error::DimensionNotDivisible { width, height });
        }
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn coarse_dims(&self) -> (usize, usize) {
        (self.width / COARSE_STRIDE, self.height / COARSE_STRIDE)
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = pgm::decode_pgm(bytes)?;
        Self::new(w, h, data)
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        pgm::encode_pgm(self.width, self.height, &pgm::quantize(&self.data))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_pgm_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: Some(path.to_path_buf()),
                reason,
            },
            other => other,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub seed: u64,
    pub coarse_channels: usize,
    pub fine_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coarse_channels: 256,
            fine_channels: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    /// `(C_d, H/8, W/8)`
    pub coarse: Array3<f64>,
    /// `(C_f, H/2, W/2)`
    pub fine: Array3<f64>,
}

impl FeaturePyramid {
    pub fn coarse_dims(&self) -> (usize, usize) {
        let (_, h, w) = self.coarse.dim();
        (w, h)
    }
}

/// A 3x3 convolution stored as a `(out, in * 9)` matrix.
#[derive(Debug, Clone)]
struct Conv3x3 {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl Conv3x3 {
    fn random(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((c_out, c_in * 9), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        Self {
            weights,
            bias: Array1::zeros(c_out),
        }
    }

    /// Stride-2 convolution with replicate padding of one pixel.
    fn forward_stride2(&self, input: &Array3<f64>) -> Array3<f64> {
        let (c_in, h, w) = input.dim();
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut cols = Array2::zeros((c_in * 9, ho * wo));
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for c in 0..c_in {
            for dy in 0..3 {
                for dx in 0..3 {
                    let r = c * 9 + dy * 3 + dx;
                    for y in 0..ho {
                        let iy = clamp(2 * y as isize + dy as isize - 1, h);
                        for x in 0..wo {
                            let ix = clamp(2 * x as isize + dx as isize - 1, w);
                            cols[[r, y * wo + x]] = input[[c, iy, ix]];
                        }
                    }
                }
            }
        }
        let mut out = self.weights.dot(&cols);
        for (mut row, b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row += *b;
        }
        out.into_shape_with_order((self.bias.len(), ho, wo))
            .expect("conv output shape")
    }
}

/// Untrained stand-in backbone producing the two-level pyramid.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stages: [Conv3x3; 3],
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        if config.coarse_channels == 0 || config.fine_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (cf, cd) = (config.fine_channels, config.coarse_channels);
        let stages = [
            Conv3x3::random(&mut rng, 1, cf),
            Conv3x3::random(&mut rng, cf, cf),
            Conv3x3::random(&mut rng, cf, cd),
        ];
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn extract(&self, img: &Image) -> Result<FeaturePyramid> {
        let (w, h) = (img.width(), img.height());
        if w % COARSE_STRIDE != 0 || h % COARSE_STRIDE != 0 {
            return Err(Error::DimensionNotDivisible { width: w, height: h });
        }
        let input = Array3::from_shape_fn((1, h, w), |(_, y, x)| img.get(x, y) - 0.5);
        let fine = self.stages[0].forward_stride2(&input).mapv_into(crate::ops::relu);
        let mid = self.stages[1].forward_stride2(&fine).mapv_into(crate::ops::relu);
        let coarse = self.stages[2].forward_stride2(&mid);
        debug_assert_eq!(fine.dim().1, h / FINE_STRIDE);
        debug_assert_eq!(coarse.dim().1, h / COARSE_STRIDE);
        if coarse.iter().chain(fine.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backbone features".into()));
        }
        Ok(FeaturePyramid { coarse, fine })
    }
}

pub fn extract_pyramid(img: &Image, cfg: &BackboneConfig) -> Result<FeaturePyramid> {
    Backbone::new(*cfg)?.extract(img)
}

/// Scales every spatial position's channel vector to unit length; zero
/// vectors stay zero.
pub fn l2_normalize_channels(t: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = t.dim();
    let mut out = t.clone();
    for y in 0..h {
        for x in 0..w {
            let mut v = out.slice_mut(ndarray::s![.., y, x]);
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                v.mapv_inplace(|a| a / norm);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg(seed: u64) -> BackboneConfig {
        BackboneConfig {
            seed,
            coarse_channels: 8,
            fine_channels: 4,
        }
    }

    fn textured(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| {
            0.5 + 0.25 * ((x as f64 * 0.7).sin() + (y as f64 * 1.3 + x as f64 * 0.2).cos())
        })
        .unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let p = extract_pyramid(&textured(16, 16), &test_cfg(1)).unwrap();
        assert_eq!(p.coarse.dim(), (8, 2, 2));
        assert_eq!(p.fine.dim(), (4, 8, 8));
        let p = extract_pyramid(&textured(40, 24), &test_cfg(1)).unwrap();
        assert_eq!(p.coarse.dim(), (8, 3, 5));
        assert_eq!(p.fine.dim(), (4, 12, 20));
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = textured(32, 32);
        let a = extract_pyramid(&img, &test_cfg(9)).unwrap();
        let b = extract_pyramid(&img, &test_cfg(9)).unwrap();
        assert_eq!(a, b);
        let c = extract_pyramid(&img, &test_cfg(10)).unwrap();
        assert_ne!(a, c);
    }

    /// Direct (non-im2col) replicate-padded stride-2 convolution at one output position.
    fn direct_conv(conv: &Conv3x3, input: &Array3<f64>, oc: usize, y: usize, x: usize) -> f64 {
        let (c_in, h, w) = input.dim();
        let mut acc = conv.bias[oc];
        for c in 0..c_in {
            for dy in 0..3 {
                for dx in 0..3 {
                    let iy = (2 * y as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                    let ix = (2 * x as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                    acc += conv.weights[[oc, c * 9 + dy * 3 + dx]] * input[[c, iy, ix]];
                }
            }
        }
        acc
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let bb = Backbone::new(test_cfg(3)).unwrap();
        let input = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((x * 7 + y * 3) % 5) as f64 * 0.1);
        let out = bb.stages[0].forward_stride2(&input);
        for &(oc, y, x) in &[(0, 0, 0), (3, 2, 1), (1, 3, 3)] {
            assert!((out[[oc, y, x]] - direct_conv(&bb.stages[0], &input, oc, y, x)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_gives_constant_coarse_map() {
        for value in [0.5, 0.8] {
            let img = Image::constant(16, 16, value).unwrap();
            let bb = Backbone::new(test_cfg(5)).unwrap();
            let p = bb.extract(&img).unwrap();
            // Oracle: push the constant through each stage by direct convolution at two positions.
            let input = Array3::from_elem((1, 16, 16), value - 0.5);
            let fine = bb.stages[0].forward_stride2(&input).mapv_into(crate::ops::relu);
            for c in 0..4 {
                let a = direct_conv(&bb.stages[0], &input, c, 0, 0).max(0.0);
                let b = direct_conv(&bb.stages[0], &input, c, 5, 2).max(0.0);
                assert!((a - b).abs() < 1e-9);
                assert!((fine[[c, 0, 0]] - a).abs() < 1e-12);
            }
            for c in 0..8 {
                let first = p.coarse[[c, 0, 0]];
                for y in 0..2 {
                    for x in 0..2 {
                        assert!((p.coarse[[c, y, x]] - first).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn features_are_nonlinear_in_the_image() {
        let bb = Backbone::new(test_cfg(2)).unwrap();
        let a = textured(16, 16);
        let b = Image::from_fn(16, 16, |x, y| ((x + 2 * y) % 7) as f64 / 7.0).unwrap();
        let sum = Image::from_fn(16, 16, |x, y| 0.5 * (a.get(x, y) + b.get(x, y))).unwrap();
        let (fa, fb, fs) = (
            bb.extract(&a).unwrap(),
            bb.extract(&b).unwrap(),
            bb.extract(&sum).unwrap(),
        );
        let linear = (&fa.coarse + &fb.coarse) * 0.5;
        let diff = (&fs.coarse - &linear).mapv(f64::abs).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(
            Image::constant(63, 64, 0.0),
            Err(Error::DimensionNotDivisible { .. })
        ));
        assert!(Image::new(8, 8, vec![0.0; 10]).is_err());
    }

    #[test]
    fn pgm_roundtrip_quantizes() {
        let img = textured(8, 8);
        let back = Image::from_pgm_bytes(&img.to_pgm_bytes()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let t = Array3::from_shape_vec((2, 1, 2), vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let n = l2_normalize_channels(&t);
        assert!((n[[0, 0, 0]] - 0.6).abs() < 1e-15);
        assert!((n[[1, 0, 0]] - 0.8).abs() < 1e-15);
        assert_eq!(n[[0, 0, 1]], 0.0);
        assert_eq!(n[[1, 0, 1]], 0.0);

        let r = Array3::from_shape_vec((3, 1, 1), vec![0.3, -1.7, 2.2]).unwrap();
        let n = l2_normalize_channels(&r);
        let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
