//! Side-by-side match rendering and confidence map dumps.

use std::path::Path;

use crate::features::Image;
use crate::geometry::{Point2, COARSE_STRIDE};
use crate::matching::FineMatch;
use crate::{pgm, Error, Result};

/// RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let k = 3 * (y as usize * self.width + x as usize);
            self.rgb[k..k + 3].copy_from_slice(&color);
        }
    }

    fn line(&mut self, a: Point2, b: Point2, color: [u8; 3]) {
        let (mut x0, mut y0) = (a.x.floor() as i64, a.y.floor() as i64);
        let (x1, y1) = (b.x.floor() as i64, b.y.floor() as i64);
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        pgm::encode_ppm(self.width, self.height, &self.rgb)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Score in `[0, 1]` to a red-to-green ramp.
fn ramp(score: f64) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0);
    [(255.0 * (1.0 - s)).round() as u8, (255.0 * s).round() as u8, 40]
}

/// Both images next to each other with one line per fine match.
pub fn render_matches(img1: &Image, img2: &Image, matches: &[FineMatch]) -> Result<Canvas> {
    if img1.height() != img2.height() {
        return Err(Error::ShapeMismatch("images differ in height".into()));
    }
    let (w1, w, h) = (img1.width(), img1.width() + img2.width(), img1.height());
    let mut canvas = Canvas {
        width: w,
        height: h,
        rgb: vec![0; 3 * w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let v = if x < w1 { img1.get(x, y) } else { img2.get(x - w1, y) };
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            canvas.put(x as i64, y as i64, [g, g, g]);
        }
    }
    for m in matches {
        let target = Point2::new(m.point2.x + w1 as f64, m.point2.y);
        canvas.line(m.point1, target, ramp(m.score));
    }
    Ok(canvas)
}

/// Writes a coarse-grid confidence map as an 8-bit PGM, each cell enlarged to
/// the coarse stride.
pub fn write_confidence_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} confidence values for a {width}x{height} grid",
            values.len()
        )));
    }
    let (w, h) = (width * COARSE_STRIDE, height * COARSE_STRIDE);
    let full: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| values[(y / COARSE_STRIDE) * width + x / COARSE_STRIDE])
        .collect();
    pgm::write_gray(path, w, h, &full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_lines_between_images() {
        let img = Image::constant(16, 16, 0.0).unwrap();
        let m = FineMatch {
            point1: Point2::new(1.0, 1.0),
            point2: Point2::new(1.0, 1.0),
            score: 1.0,
            offset: [0.0, 0.0],
            intermediate_index: 0,
        };
        let c = render_matches(&img, &img, &[m]).unwrap();
        assert_eq!((c.width, c.height), (32, 16));
        let at = |x: usize, y: usize| &c.rgb[3 * (y * 32 + x)..3 * (y * 32 + x) + 3];
        assert_eq!(at(1, 1), &[0, 255, 40]);
        assert_eq!(at(10, 1), &[0, 255, 40]);
        assert_eq!(at(17, 1), &[0, 255, 40]);
        assert_eq!(at(10, 5), &[0, 0, 0]);
        assert!(c.to_ppm().starts_with(b"P6\n32 16\n255\n"));
    }

    #[test]
    fn confidence_dump_scales_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pgm");
        write_confidence_pgm(&path, &[0.0, 1.0], 2, 1).unwrap();
        let (w, h, data) = pgm::decode_pgm(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!((w, h), (16, 8));
        assert_eq!((data[0], data[8]), (0.0, 1.0));
        assert!(write_confidence_pgm(&path, &[0.0], 2, 1).is_err());
    }
}
