//! Foreground-aware image descriptors.

use crate::image::{RgbImage, SoftMask};

/// A differentiable map from an image and a foreground mask to a feature
/// vector.
pub trait Descriptor: Send + Sync {
    fn dim(&self) -> usize;

    fn compute(&self, x: &RgbImage, m: &SoftMask) -> Vec<f64>;

    /// Gradient with respect to the mask values given the gradient `g` with
    /// respect to the descriptor output.
    fn mask_vjp(&self, x: &RgbImage, m: &SoftMask, g: &[f64]) -> Vec<f64>;
}

/// Grid of cells; each contributes the mask-weighted mean color and the mean
/// occupancy. The weighted mean divides by `max(Σ m, 1)` so it stays
/// continuous as a cell empties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDescriptor {
    pub cells: usize,
}

impl Default for GridDescriptor {
    fn default() -> Self {
        Self { cells: 16 }
    }
}

pub const GRID_DESCRIPTOR_DIM: usize = 16 * 16 * 4;

impl GridDescriptor {
    fn bounds(&self, n: usize, c: usize) -> (usize, usize) {
        (c * n / self.cells, (c + 1) * n / self.cells)
    }

    fn for_each_cell(&self, w: usize, h: usize, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>, usize)) {
        for cy in 0..self.cells {
            let (y0, y1) = self.bounds(h, cy);
            for cx in 0..self.cells {
                let (x0, x1) = self.bounds(w, cx);
                let count = (y1 - y0) * (x1 - x0);
                let mut it = (y0..y1).flat_map(move |y| (x0..x1).map(move |x| y * w + x));
                f(cy * self.cells + cx, &mut it, count);
            }
        }
    }
}

impl Descriptor for GridDescriptor {
    fn dim(&self) -> usize {
        self.cells * self.cells * 4
    }

    fn compute(&self, x: &RgbImage, m: &SoftMask) -> Vec<f64> {
        assert_eq!((x.width, x.height), (m.width, m.height));
        let mut out = vec![0.0; self.dim()];
        self.for_each_cell(x.width, x.height, |cell, pixels, count| {
            let mut mass = 0.0;
            let mut rgb = [0.0; 3];
            for i in pixels {
                let w = m.data[i];
                mass += w;
                for c in 0..3 {
                    rgb[c] += w * x.data[i][c];
                }
            }
            let denom = mass.max(1.0);
            for c in 0..3 {
                out[4 * cell + c] = rgb[c] / denom;
            }
            out[4 * cell + 3] = mass / count as f64;
        });
        out
    }

    fn mask_vjp(&self, x: &RgbImage, m: &SoftMask, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m.data.len()];
        let desc = self.compute(x, m);
        self.for_each_cell(x.width, x.height, |cell, pixels, count| {
            let pixels: Vec<usize> = pixels.collect();
            let mass: f64 = pixels.iter().map(|&i| m.data[i]).sum();
            let go = g[4 * cell + 3] / count as f64;
            for &i in &pixels {
                let mut acc = go;
                for c in 0..3 {
                    let gc = g[4 * cell + c];
                    if gc == 0.0 {
                        continue;
                    }
                    acc += if mass > 1.0 {
                        gc * (x.data[i][c] - desc[4 * cell + c]) / mass
                    } else {
                        gc * x.data[i][c]
                    };
                }
                out[i] = acc;
            }
        });
        out
    }
}
