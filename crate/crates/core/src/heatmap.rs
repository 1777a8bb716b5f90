//! Gaussian heatmap codec for 2D joints.

use nalgebra::Vector2;

use crate::assets::NUM_JOINTS;
use crate::camera::IMAGE_SIZE;
use crate::skeleton::Skeleton2D;

pub const HEATMAP_SIZE: usize = 32;
/// Gaussian standard deviation, in heatmap cells.
pub const HEATMAP_SIGMA: f64 = 1.5;
/// Pixels per heatmap cell.
pub const CELL_PIXELS: f64 = IMAGE_SIZE as f64 / HEATMAP_SIZE as f64;

/// `21 x 32 x 32` channels, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub data: Vec<f64>,
}

impl Heatmaps {
    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; NUM_JOINTS * HEATMAP_SIZE * HEATMAP_SIZE],
        }
    }

    pub fn channel(&self, j: usize) -> &[f64] {
        let n = HEATMAP_SIZE * HEATMAP_SIZE;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn channel_mut(&mut self, j: usize) -> &mut [f64] {
        let n = HEATMAP_SIZE * HEATMAP_SIZE;
        &mut self.data[j * n..(j + 1) * n]
    }
}

/// One unit-amplitude Gaussian per joint, centered at the joint position
/// rescaled from pixels to cells.
pub fn encode_heatmaps(j2d: &Skeleton2D) -> Heatmaps {
    let mut hm = Heatmaps::zeros();
    let denom = 2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA;
    for (j, p) in j2d.0.iter().enumerate() {
        let c = p / CELL_PIXELS;
        let ch = hm.channel_mut(j);
        for r in 0..HEATMAP_SIZE {
            for col in 0..HEATMAP_SIZE {
                let d = Vector2::new(col as f64 + 0.5, r as f64 + 0.5) - c;
                ch[r * HEATMAP_SIZE + col] = (-d.norm_squared() / denom).exp();
            }
        }
    }
    hm
}

/// Per-channel argmax mapped to the pixel at the cell center; ties go to
/// the lowest row-major index.
pub fn decode_heatmaps(hm: &Heatmaps) -> Skeleton2D {
    Skeleton2D(std::array::from_fn(|j| {
        let ch = hm.channel(j);
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        let (r, c) = (best / HEATMAP_SIZE, best % HEATMAP_SIZE);
        Vector2::new((c as f64 + 0.5) * CELL_PIXELS, (r as f64 + 0.5) * CELL_PIXELS)
    }))
}

/// Squared difference between predicted and target heatmaps.
pub fn heatmap_loss(pred: &Heatmaps, target: &Heatmaps) -> f64 {
    pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum()
}
