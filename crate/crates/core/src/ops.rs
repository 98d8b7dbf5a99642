//! Small numeric kernels shared across the pipeline.
//!
//! Feature maps are `(channels, height, width)` arrays; token matrices are
//! `(tokens, channels)` with tokens flattened row-major over `(row, col)`.

use ndarray::{Array2, Array3};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax of `tau * logits`; `tau` plays the role of an inverse temperature.
pub fn tempered_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&x| tau * x).collect();
    softmax(&scaled)
}

/// Row-wise [`softmax`]; each row is bitwise equal to `softmax(row)`.
pub fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let p = softmax(&row.to_vec());
        row.assign(&ndarray::ArrayView1::from(&p));
    }
    out
}

pub fn softmax_cols(m: &Array2<f64>) -> Array2<f64> {
    softmax_rows(&m.t().to_owned()).reversed_axes()
}

/// Flattens a `(C, H, W)` map into `(H*W, C)` tokens.
pub fn flatten_tokens(f: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = f.dim();
    let mut out = Array2::zeros((h * w, c));
    for y in 0..h {
        for x in 0..w {
            out.row_mut(y * w + x).assign(&f.slice(ndarray::s![.., y, x]));
        }
    }
    out
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens(t: &Array2<f64>, height: usize, width: usize) -> Array3<f64> {
    let (n, c) = t.dim();
    assert_eq!(n, height * width, "token count does not match grid");
    let mut out = Array3::zeros((c, height, width));
    for y in 0..height {
        for x in 0..width {
            out.slice_mut(ndarray::s![.., y, x]).assign(&t.row(y * width + x));
        }
    }
    out
}

pub fn l2_normalize_rows(t: &Array2<f64>) -> Array2<f64> {
    let mut out = t.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|x| x / norm);
        }
    }
    out
}

/// Neumaier-compensated sum; keeps batch reductions order-insensitive.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Runs two closures, in parallel when the `parallel` feature is on.
pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// Serializes an `Array2` as a list of rows.
pub(crate) mod matrix_rows {
    use ndarray::Array2;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect())
            .map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_two_logits() {
        let p = softmax(&[2.0, 1.0]);
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_symmetric_and_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) + sigmoid(-1.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn softmax_cols_columns_sum_to_one() {
        let m = array![[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]];
        let c = softmax_cols(&m);
        for col in c.columns() {
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let f = Array3::from_shape_fn((3, 2, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let t = flatten_tokens(&f);
        assert_eq!(t[[5, 2]], 211.0);
        assert_eq!(unflatten_tokens(&t, 2, 4), f);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let vals = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(vals), 2.0);
    }
}
