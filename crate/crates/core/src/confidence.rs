//! Matching-confidence maps from coarse-feature correlation.
//!
//! A cell that has a clear counterpart in the other image has a high maximum
//! response in its row (image 1) or column (image 2) of the correlation
//! matrix. The maxima are re-centered and squashed into `(0, 1)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::ops::{flatten_tokens, relu, sigmoid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    /// `s[i][j] = <f1_i, f2_j> / gamma`
    pub s: Array2<f64>,
    pub gamma: f64,
}

/// Fixed 1x1 map `weight * x + bias` standing in for a learned convolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conv1x1 {
    pub weight: f64,
    pub bias: f64,
}

impl Conv1x1 {
    /// Unit weight with the bias set to minus the response of a perfect
    /// (cosine 1) match, so fully matchable cells sit at 0.5.
    pub fn for_gamma(gamma: f64) -> Self {
        Self {
            weight: 1.0,
            bias: -1.0 / gamma,
        }
    }
}

/// How the raw row/column maxima become a confidence map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum ConfidenceVariant {
    /// (i) `sigmoid(w)`
    SigmoidRaw,
    /// (ii) `relu(w - mean(w))`
    ReluMean,
    /// (iii) `sigmoid(w - row/column mean of S)`
    SigmoidRowColMean,
    /// (iv) `sigmoid(conv1x1(w))`
    LearnedConv(Conv1x1),
    /// (v) `sigmoid(w - mean(w))`, the default.
    #[default]
    SigmoidGlobalMean,
}


impl ConfidenceVariant {
    pub fn roman(&self) -> &'static str {
        match self {
            Self::SigmoidRaw => "i",
            Self::ReluMean => "ii",
            Self::SigmoidRowColMean => "iii",
            Self::LearnedConv(_) => "iv",
            Self::SigmoidGlobalMean => "v",
        }
    }

    /// Parses `i`..`v`; variant iv takes its bias from `gamma`.
    pub fn parse_with_gamma(s: &str, gamma: f64) -> Result<Self> {
        Ok(match s {
            "i" => Self::SigmoidRaw,
            "ii" => Self::ReluMean,
            "iii" => Self::SigmoidRowColMean,
            "iv" => Self::LearnedConv(Conv1x1::for_gamma(gamma)),
            "v" => Self::SigmoidGlobalMean,
            other => {
                return Err(Error::Config(format!(
                    "unknown confidence variant {other:?} (expected i, ii, iii, iv or v)"
                )))
            }
        })
    }
}

impl fmt::Display for ConfidenceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

impl FromStr for ConfidenceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with_gamma(s, 0.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    /// One value per coarse cell, row-major.
    pub values: Vec<f64>,
    pub variant: ConfidenceVariant,
}

pub fn correlation(f1: &Array3<f64>, f2: &Array3<f64>, gamma: f64) -> Result<CorrelationMatrix> {
    let (c1, c2) = (f1.dim().0, f2.dim().0);
    if c1 != c2 {
        return Err(Error::ChannelMismatch { left: c1, right: c2 });
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let t1 = flatten_tokens(f1);
    let t2 = flatten_tokens(f2);
    let s = t1.dot(&t2.t()) / gamma;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation matrix".into()));
    }
    Ok(CorrelationMatrix { s, gamma })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn confidence_maps(
    corr: &CorrelationMatrix,
    variant: ConfidenceVariant,
) -> (ConfidenceMap, ConfidenceMap) {
    let s = &corr.s;
    let row_max: Vec<f64> = s
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let col_max: Vec<f64> = s
        .columns()
        .into_iter()
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let refine = |raw: &[f64], axis_means: &dyn Fn() -> Vec<f64>| -> Vec<f64> {
        match variant {
            ConfidenceVariant::SigmoidRaw => raw.iter().map(|&w| sigmoid(w)).collect(),
            ConfidenceVariant::ReluMean => {
                let m = mean(raw);
                raw.iter().map(|&w| relu(w - m)).collect()
            }
            ConfidenceVariant::SigmoidRowColMean => raw
                .iter()
                .zip(axis_means())
                .map(|(&w, m)| sigmoid(w - m))
                .collect(),
            ConfidenceVariant::LearnedConv(conv) => raw
                .iter()
                .map(|&w| sigmoid(conv.weight * w + conv.bias))
                .collect(),
            ConfidenceVariant::SigmoidGlobalMean => {
                let m = mean(raw);
                raw.iter().map(|&w| sigmoid(w - m)).collect()
            }
        }
    };
    let row_means = || s.mean_axis(Axis(1)).expect("non-empty").to_vec();
    let col_means = || s.mean_axis(Axis(0)).expect("non-empty").to_vec();
    (
        ConfidenceMap {
            values: refine(&row_max, &row_means),
            variant,
        },
        ConfidenceMap {
            values: refine(&col_max, &col_means),
            variant,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn corr(s: Array2<f64>) -> CorrelationMatrix {
        CorrelationMatrix { s, gamma: 1.0 }
    }

    #[test]
    fn correlation_of_orthonormal_basis() {
        // Two cells per image laid out on a 1x2 grid, channels e1, e2.
        let f = Array3::from_shape_vec((2, 1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(correlation(&f, &f, 1.0).unwrap().s, Array2::<f64>::eye(2));
        assert_eq!(correlation(&f, &f, 2.0).unwrap().s, Array2::<f64>::eye(2) * 0.5);
    }

    #[test]
    fn correlation_matches_scalar_loop() {
        let f1 = Array3::from_shape_fn((4, 1, 3), |(c, _, x)| ((c * 3 + x) as f64 * 0.37).sin());
        let f2 = Array3::from_shape_fn((4, 3, 1), |(c, y, _)| ((c + 5 * y) as f64 * 0.91).cos());
        let s = correlation(&f1, &f2, 0.7).unwrap().s;
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for c in 0..4 {
                    acc += f1[[c, 0, i]] * f2[[c, j, 0]];
                }
                assert!((s[[i, j]] - acc / 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_rejects_channel_mismatch() {
        let a = Array3::zeros((3, 1, 1));
        let b = Array3::zeros((4, 1, 1));
        assert!(matches!(correlation(&a, &b, 1.0), Err(Error::ChannelMismatch { .. })));
        assert!(correlation(&a, &a, 0.0).is_err());
    }

    #[test]
    fn default_variant_examples() {
        let (w1, w2) = confidence_maps(&corr(Array2::<f64>::eye(2)), ConfidenceVariant::default());
        assert_eq!(w1.values, vec![0.5, 0.5]);
        assert_eq!(w2.values, vec![0.5, 0.5]);

        let (w1, w2) = confidence_maps(&corr(Array2::from_elem((3, 3), 4.2)), Default::default());
        assert!(w1.values.iter().chain(&w2.values).all(|&v| v == 0.5));

        let (w1, _) = confidence_maps(&corr(array![[2.0, 0.0], [0.0, 0.0]]), Default::default());
        assert!((w1.values[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((w1.values[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn other_variants() {
        let s = corr(array![[2.0, 0.0], [1.0, -1.0]]);
        // raw row maxima [2, 1], column maxima [2, 0]
        let (w1, w2) = confidence_maps(&s, ConfidenceVariant::SigmoidRaw);
        assert_eq!(w1.values, vec![sigmoid(2.0), sigmoid(1.0)]);
        assert_eq!(w2.values, vec![sigmoid(2.0), sigmoid(0.0)]);

        let (w1, w2) = confidence_maps(&s, ConfidenceVariant::ReluMean);
        assert_eq!(w1.values, vec![0.5, 0.0]);
        assert_eq!(w2.values, vec![1.0, 0.0]);

        // row means [1, 0], column means [1.5, -0.5]
        let (w1, w2) = confidence_maps(&s, ConfidenceVariant::SigmoidRowColMean);
        assert_eq!(w1.values, vec![sigmoid(1.0), sigmoid(1.0)]);
        assert_eq!(w2.values, vec![sigmoid(0.5), sigmoid(0.5)]);

        let conv = Conv1x1 { weight: 2.0, bias: -1.0 };
        let (w1, _) = confidence_maps(&s, ConfidenceVariant::LearnedConv(conv));
        assert_eq!(w1.values, vec![sigmoid(3.0), sigmoid(1.0)]);
    }

    #[test]
    fn variant_names_roundtrip() {
        for name in ["i", "ii", "iii", "iv", "v"] {
            let v = ConfidenceVariant::parse_with_gamma(name, 0.1).unwrap();
            assert_eq!(v.roman(), name);
        }
        assert!("vi".parse::<ConfidenceVariant>().is_err());
    }

    fn matrix(n: usize, m: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-5.0f64..5.0, n * m)
            .prop_map(move |v| Array2::from_shape_vec((n, m), v).unwrap())
    }

    proptest! {
        #[test]
        fn default_variant_in_open_unit_interval(s in matrix(5, 4)) {
            let (w1, w2) = confidence_maps(&corr(s), ConfidenceVariant::default());
            prop_assert!(w1.values.iter().chain(&w2.values).all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn default_variant_is_shift_invariant(s in matrix(4, 4), c in -5.0f64..5.0) {
            let (a1, a2) = confidence_maps(&corr(s.clone()), ConfidenceVariant::default());
            let (b1, b2) = confidence_maps(&corr(s + c), ConfidenceVariant::default());
            for (a, b) in a1.values.iter().chain(&a2.values).zip(b1.values.iter().chain(&b2.values)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn permuting_image2_permutes_w2(s in matrix(4, 5), shift in 0usize..5) {
            let perm: Vec<usize> = (0..5).map(|j| (j + shift) % 5).collect();
            let permuted = Array2::from_shape_fn((4, 5), |(i, j)| s[[i, perm[j]]]);
            let (a1, a2) = confidence_maps(&corr(s), ConfidenceVariant::default());
            let (b1, b2) = confidence_maps(&corr(permuted), ConfidenceVariant::default());
            for (x, y) in a1.values.iter().zip(&b1.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for j in 0..5 {
                prop_assert!((b2.values[j] - a2.values[perm[j]]).abs() < 1e-12);
            }
        }
    }
}
