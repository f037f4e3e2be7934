//! The differentiable chain from raw scene parameters to a render:
//! raw params -> canonical splats -> deformation at `t` -> rasterizer.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::deform::{deform_gaussian_backward, deform_scene, DeformField};
use crate::error::Result;
use crate::primitive::{Gaussian2D, GaussianGrad, SplatParams};
use crate::raster::RenderGrads;
use crate::scene::Scene;

/// Intermediate values of one forward evaluation of the scene at time `t`.
#[derive(Debug, Clone)]
pub struct SceneForward {
    pub time: f64,
    pub canonical: Vec<Gaussian2D>,
    pub deformed: Vec<Gaussian2D>,
}

/// Gradients on every optimizable quantity of a [`Scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub params: Vec<SplatParams>,
    pub deform: Option<DeformField>,
    /// Screen-space center gradients in pixels, for densification.
    pub mean2d: Vec<Vector2<f64>>,
}

pub fn scene_forward(scene: &Scene, t: f64) -> Result<SceneForward> {
    let canonical = scene.canonical()?;
    let deformed = match &scene.deform {
        Some(field) => deform_scene(&canonical, field, t)?,
        None => canonical.clone(),
    };
    Ok(SceneForward {
        time: t,
        canonical,
        deformed,
    })
}

pub fn scene_backward(scene: &Scene, fwd: &SceneForward, grads: &RenderGrads) -> SceneGrad {
    let n = scene.params.len();
    let (canonical_grads, deform_grad): (Vec<GaussianGrad>, Option<DeformField>) = match &scene.deform {
        Some(field) => {
            let mut gfield = field.zeros_like();
            let out: Vec<GaussianGrad> = gfield
                .par_splat_grads_mut()
                .enumerate()
                .map(|(i, banks)| {
                    let g_out = &grads.gaussians[i];
                    if g_out.is_zero() {
                        return GaussianGrad::default();
                    }
                    deform_gaussian_backward(&fwd.canonical[i], field, i, fwd.time, g_out, banks)
                })
                .collect();
            (out, Some(gfield))
        }
        None => (grads.gaussians.clone(), None),
    };
    let params: Vec<SplatParams> = (0..n)
        .into_par_iter()
        .map(|i| scene.params[i].backward(&fwd.canonical[i], &canonical_grads[i]))
        .collect();
    SceneGrad {
        params,
        deform: deform_grad,
        mean2d: grads.mean2d.clone(),
    }
}
