//! Planar homographies and the ground-truth correspondences derived from them.
//!
//! Coordinates are continuous pixel coordinates: pixel `k` spans `[k, k + 1)`
//! and has its center at `k + 0.5`. A coarse cell `c` (stride 8) is centered
//! at pixel `8c + 4`; a fine cell `g` (stride 2) at pixel `2g + 1`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;
/// Fine cells per coarse cell along one axis.
pub const COARSE_TO_FINE: usize = COARSE_STRIDE / FINE_STRIDE;

const DEGENERATE_DENOMINATOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Pixel-space center of coarse cell `(col, row)`.
pub fn coarse_cell_center(col: usize, row: usize) -> Point2 {
    let s = COARSE_STRIDE as f64;
    Point2::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
}

/// Pixel-space center of fine cell `(col, row)`.
pub fn fine_to_pixel(col: f64, row: f64) -> Point2 {
    let s = FINE_STRIDE as f64;
    Point2::new(s * col + 1.0, s * row + 1.0)
}

/// Continuous fine-grid coordinates of a pixel-space point.
pub fn pixel_to_fine(p: Point2) -> (f64, f64) {
    let s = FINE_STRIDE as f64;
    ((p.x - 1.0) / s, (p.y - 1.0) / s)
}

/// A projective map from image 1 to image 2 in pixel units, normalized so
/// that `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidHomography("non-finite entry".into()));
        }
        let scale = m[2][2];
        if scale.abs() < 1e-12 {
            return Err(Error::InvalidHomography("h[2][2] is zero".into()));
        }
        let mut n = m;
        for v in n.iter_mut().flatten() {
            *v /= scale;
        }
        let h = Self { m: n };
        if h.determinant().abs() < 1e-12 {
            return Err(Error::InvalidHomography("singular matrix".into()));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::InvalidHomography(format!(
                "expected 9 entries, got {}",
                v.len()
            )));
        }
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::InvalidHomography("singular matrix".into()));
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut inv = adj;
        for v in inv.iter_mut().flatten() {
            *v /= det;
        }
        Self::new(inv)
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[r][k] * first.m[k][c]).sum();
            }
        }
        Self::new(out)
    }

    pub fn warp(&self, p: Point2) -> Result<Point2> {
        warp_point(self, p)
    }
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(v: [f64; 9]) -> Result<Self> {
        Self::from_row_major(&v)
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_row_major()
    }
}

pub fn warp_point(h: &Homography, p: Point2) -> Result<Point2> {
    let m = &h.m;
    let den = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
    if den.abs() < DEGENERATE_DENOMINATOR {
        return Err(Error::DegenerateWarp {
            x: p.x,
            y: p.y,
            denominator: den,
        });
    }
    Ok(Point2::new(
        (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / den,
        (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / den,
    ))
}

/// Where each coarse cell of image 1 lands on image 2's coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    pub width: usize,
    pub height: usize,
    /// Target in image-2 coarse-grid units (cell `c` spans `[c, c + 1)`),
    /// `None` when the warped center falls outside image 2.
    pub targets: Vec<Option<Point2>>,
}

impl CorrespondenceField {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn is_valid(&self, cell: usize) -> bool {
        self.targets[cell].is_some()
    }

    pub fn valid_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Warps every coarse cell center of a `width x height` grid through `h`.
pub fn build_correspondence_field(h: &Homography, width: usize, height: usize) -> CorrespondenceField {
    let stride = COARSE_STRIDE as f64;
    let mut targets = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let target = warp_point(h, coarse_cell_center(col, row))
                .ok()
                .map(|p| Point2::new(p.x / stride, p.y / stride))
                .filter(|t| {
                    t.x >= 0.0 && t.y >= 0.0 && t.x < width as f64 && t.y < height as f64
                });
            targets.push(target);
        }
    }
    CorrespondenceField {
        width,
        height,
        targets,
    }
}

/// Binary coarse assignment: cell `i` of image 1 matches the cell of image 2
/// whose center is nearest its warped center. Collisions keep the lowest
/// source index, so rows and columns each hold at most one 1.
pub fn build_coarse_gt(field: &CorrespondenceField) -> Array2<f64> {
    let n = field.len();
    let mut gt = Array2::zeros((n, n));
    let mut taken = vec![false; n];
    for (i, target) in field.targets.iter().enumerate() {
        let Some(t) = target else { continue };
        // Within the grid, the nearest center is the cell containing the point.
        let j = t.y.floor() as usize * field.width + t.x.floor() as usize;
        if !taken[j] {
            taken[j] = true;
            gt[[i, j]] = 1.0;
        }
    }
    gt
}

/// Per-image confidence targets: row sums and column sums of the coarse
/// assignment.
pub fn build_conf_gt(pc_gt: &Array2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    check_binary(pc_gt)?;
    let target1: Vec<f64> = pc_gt.rows().into_iter().map(|r| r.sum()).collect();
    let target2: Vec<f64> = pc_gt.columns().into_iter().map(|c| c.sum()).collect();
    if let Some(i) = target1.iter().position(|&s| s > 1.0) {
        return Err(Error::InvalidGroundTruth(format!("row {i} has more than one match")));
    }
    if let Some(j) = target2.iter().position(|&s| s > 1.0) {
        return Err(Error::InvalidGroundTruth(format!("column {j} has more than one match")));
    }
    Ok((target1, target2))
}

pub(crate) fn check_binary(m: &Array2<f64>) -> Result<()> {
    if m.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidGroundTruth("matrix is not binary".into()));
    }
    Ok(())
}

/// Binary assignment between two `window x window` fine patches with the given
/// top-left origins (fine-grid `(col, row)`).
pub fn build_fine_gt(
    h: &Homography,
    origin1: (usize, usize),
    origin2: (usize, usize),
    window: usize,
) -> Array2<f64> {
    let n = window * window;
    let mut gt = Array2::zeros((n, n));
    let mut taken = vec![false; n];
    for a in 0..n {
        let (ax, ay) = (origin1.0 + a % window, origin1.1 + a / window);
        let Ok(p2) = warp_point(h, fine_to_pixel(ax as f64, ay as f64)) else {
            continue;
        };
        let (gx, gy) = pixel_to_fine(p2);
        let (bx, by) = (gx.round() - origin2.0 as f64, gy.round() - origin2.1 as f64);
        if bx < 0.0 || by < 0.0 || bx >= window as f64 || by >= window as f64 {
            continue;
        }
        let b = by as usize * window + bx as usize;
        if !taken[b] {
            taken[b] = true;
            gt[[a, b]] = 1.0;
        }
    }
    gt
}

/// Ground-truth position of fine cell `i` (image 1) relative to fine cell `j`
/// (image 2), in fine-grid units.
pub fn fine_offset_gt(h: &Homography, i: (usize, usize), j: (usize, usize)) -> Result<[f64; 2]> {
    let p2 = warp_point(h, fine_to_pixel(i.0 as f64, i.1 as f64))?;
    let (gx, gy) = pixel_to_fine(p2);
    Ok([gx - j.0 as f64, gy - j.1 as f64])
}
