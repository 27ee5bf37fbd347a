//! Equirectangular view-density maps.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;

use anyhow::{bail, Result};
use image::{Rgb, RgbImage};
use vpcat_core::HeadSample;

/// Sample counts on an equirectangular grid. Row 0 is the top (pitch
/// +90 deg), column 0 starts at yaw -180 deg.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
}

impl Heatmap {
    pub fn new(cell_deg: f64) -> Self {
        let rows = ((180.0 / cell_deg).round() as usize).max(1);
        let cols = ((360.0 / cell_deg).round() as usize).max(1);
        Self {
            rows,
            cols,
            counts: vec![0; rows * cols],
        }
    }

    pub fn add(&mut self, s: &HeadSample) {
        let col = (((s.yaw + PI) / TAU) * self.cols as f64).floor() as isize;
        let row = (((FRAC_PI_2 - s.pitch) / PI) * self.rows as f64).floor() as isize;
        let col = col.clamp(0, self.cols as isize - 1) as usize;
        let row = row.clamp(0, self.rows as isize - 1) as usize;
        self.counts[row * self.cols + col] += 1;
    }

    pub fn from_samples<'a>(cell_deg: f64, samples: impl IntoIterator<Item = &'a HeadSample>) -> Self {
        let mut h = Self::new(cell_deg);
        for s in samples {
            h.add(s);
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.cols + col]
    }

    /// Pitch at the center of `row`.
    pub fn row_pitch(&self, row: usize) -> f64 {
        FRAC_PI_2 - (row as f64 + 0.5) * PI / self.rows as f64
    }

    /// Counts divided by the relative solid angle of their cell, which is
    /// proportional to the cosine of the row's pitch.
    pub fn density(&self) -> Vec<f64> {
        (0..self.rows)
            .flat_map(|r| {
                let w = self.row_pitch(r).cos();
                (0..self.cols).map(move |c| (r, c, w))
            })
            .map(|(r, c, w)| self.count(r, c) as f64 / w)
            .collect()
    }

    /// The count grid as delimited text, one line per row.
    pub fn grid_csv(&self) -> String {
        let mut out = String::with_capacity(self.rows * self.cols * 2);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.count(r, c));
            }
            out.push('\n');
        }
        out
    }

    /// Renders the density scaled to its maximum; each cell becomes a
    /// `scale` x `scale` block.
    pub fn render(&self, scale: u32) -> Result<RgbImage> {
        if self.total() == 0 {
            bail!("heatmap has no samples");
        }
        let density = self.density();
        let max = density.iter().copied().fold(0.0, f64::max);
        let scale = scale.max(1);
        let mut img = RgbImage::new(self.cols as u32 * scale, self.rows as u32 * scale);
        for (i, d) in density.iter().enumerate() {
            let color = ramp(d / max);
            let (r, c) = ((i / self.cols) as u32, (i % self.cols) as u32);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(c * scale + dx, r * scale + dy, color);
                }
            }
        }
        Ok(img)
    }

    pub fn png(&self, scale: u32) -> Result<Vec<u8>> {
        let img = self.render(scale)?;
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        Ok(bytes)
    }
}

/// Black to red to yellow to white.
fn ramp(x: f64) -> Rgb<u8> {
    let x = x.clamp(0.0, 1.0) * 3.0;
    let ch = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(x), ch(x - 1.0), ch(x - 2.0)])
}
