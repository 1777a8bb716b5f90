//! Central finite differences for checking analytic gradients of losses over
//! the fitting state.

use rayon::prelude::*;

use crate::assets::HandModelAssets;
use crate::camera::ImagePlane;
use crate::descriptor::Descriptor;
use crate::error::Result;
use crate::image::{RgbImage, SoftMask};
use crate::losses::{art_term, feat_term, lap_term, sh_term, MeshGradient, NormalizationContext};
use crate::model::synthesize;
use crate::params::{MeshParams, PARAM_DIM};
use crate::raster::SoftRasterConfig;
use crate::skeleton::Skeleton3D;

/// `(f(h + eps e_i) - f(h - eps e_i)) / 2 eps` for every coordinate.
pub fn central_difference(
    h: &MeshParams,
    eps: f64,
    f: impl Fn(&MeshParams) -> Result<f64> + Sync,
) -> Result<[f64; PARAM_DIM]> {
    let d: Vec<f64> = (0..PARAM_DIM)
        .into_par_iter()
        .map(|i| {
            let (mut a, mut b) = (*h, *h);
            a.0[i] += eps;
            b.0[i] -= eps;
            Ok((f(&a)? - f(&b)?) / (2.0 * eps))
        })
        .collect::<Result<_>>()?;
    Ok(d.try_into().unwrap())
}

/// `|a - b| / max(|a|, |b|)` over the whole vector; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// A single loss term as a function of the fitting state.
pub enum Term<'a> {
    Art {
        gt: &'a Skeleton3D,
        ctx: &'a NormalizationContext,
    },
    Lap,
    Feat {
        desc: &'a dyn Descriptor,
        x: &'a RgbImage,
        raster: SoftRasterConfig,
    },
    Sh {
        gt: &'a SoftMask,
        raster: SoftRasterConfig,
    },
}

impl Term<'_> {
    /// Value and analytic gradient with respect to `h`.
    pub fn eval(&self, h: &MeshParams, assets: &HandModelAssets, plane: &ImagePlane) -> Result<(f64, [f64; PARAM_DIM])> {
        let syn = synthesize(h, assets)?;
        let mut g = MeshGradient::default();
        let value = match self {
            Term::Art { gt, ctx } => art_term(&syn, assets, gt, ctx, plane, 1.0, &mut g)?,
            Term::Lap => lap_term(&syn, assets, 1.0, &mut g),
            Term::Feat { desc, x, raster } => feat_term(&syn, plane, raster, *desc, x, 1.0, &mut g)?,
            Term::Sh { gt, raster } => sh_term(&syn, plane, raster, gt, 1.0, &mut g)?,
        };
        Ok((value, g.to_params(&syn, assets)))
    }

    /// Relative error between the analytic gradient and central differences
    /// with step `eps`.
    pub fn check(&self, h: &MeshParams, assets: &HandModelAssets, plane: &ImagePlane, eps: f64) -> Result<f64> {
        let (_, analytic) = self.eval(h, assets, plane)?;
        let numeric = central_difference(h, eps, |p| Ok(self.eval(p, assets, plane)?.0))?;
        Ok(relative_error(&analytic, &numeric))
    }
}
