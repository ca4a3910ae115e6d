//! Orthographic splatting renderer producing RGB, alpha, depth, normals and
//! 2D flow, with reverse-mode gradients for every channel.

mod camera;
mod normals;
mod project;
pub mod raster;

pub use camera::{Camera, DEFAULT_AZIMUTHS};
pub use normals::{normal_from_depth, normal_from_depth_vjp};
pub use project::{project, project_vjp, Projected, COV_REGULARIZER};

use crate::buffer::{FlowMap, Image, Mask};
use crate::error::{invalid, Result};
use crate::field::{deform, Gaussian3D, GaussianField, GaussianGrad};
use crate::math::logistic;
use raster::{RasterTape, Splat, ACCUM, FEATURES};

/// Pixels with alpha above this are covered.
pub const COVERAGE_THRESHOLD: f64 = 0.5;
const NORMALIZE_EPS: f64 = 1e-8;

/// Which optional buffers to produce. Alpha is always produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channels {
    pub rgb: bool,
    pub depth: bool,
    pub normal: bool,
}

impl Channels {
    pub const ALL: Channels = Channels {
        rgb: true,
        depth: true,
        normal: true,
    };
    pub const ALPHA_ONLY: Channels = Channels {
        rgb: false,
        depth: false,
        normal: false,
    };
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RenderReport {
    pub gaussians: usize,
    /// Gaussians dropped for a degenerate footprint.
    pub degenerate: usize,
    /// Splats that reached at least one pixel's bounding box.
    pub splatted: usize,
    /// Every Gaussian had a degenerate footprint.
    pub all_degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: Image,
    pub alpha: Image,
    /// Alpha-normalized camera depth; zero where alpha vanishes.
    pub depth: Image,
    /// Camera-frame unit normals, zero where `normal_valid` is unset.
    pub normal: Image,
    pub normal_valid: Mask,
    pub flow: Option<FlowMap>,
    pub coverage: Mask,
    pub report: RenderReport,
}

/// Forward state needed by [`render_backward`].
#[derive(Clone, Debug)]
pub struct RenderTape {
    raster: RasterTape,
    accum: Vec<f64>,
    channels: Channels,
    has_flow: bool,
    depth: Image,
    normal_valid: Mask,
}

/// Cotangents of a render. Absent buffers contribute nothing.
#[derive(Clone, Debug, Default)]
pub struct RenderGrad {
    pub rgb: Option<Image>,
    pub alpha: Option<Image>,
    pub depth: Option<Image>,
    pub normal: Option<Image>,
    pub flow: Option<Vec<[f64; 2]>>,
}

/// Rasterizes `gaussians` seen by `camera`. When `flow_target` is given
/// (the same Gaussians at another timestep) the per-Gaussian image offsets
/// toward it are composited into a flow map with this render's weights.
pub fn render(
    gaussians: &[Gaussian3D],
    camera: &Camera,
    channels: Channels,
    flow_target: Option<&[Gaussian3D]>,
) -> Result<(RenderOutput, RenderTape)> {
    if gaussians.is_empty() {
        return Err(invalid("render: empty Gaussian list"));
    }
    if let Some(t) = flow_target {
        if t.len() != gaussians.len() {
            return Err(invalid("render: flow target has a different Gaussian count"));
        }
    }
    let (w, h) = (camera.width, camera.height);
    let mut report = RenderReport {
        gaussians: gaussians.len(),
        ..Default::default()
    };
    let mut splats = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        let p = project(g, camera);
        let mut features = [0.0; FEATURES];
        for c in 0..3 {
            features[c] = g.color[c].clamp(0.0, 1.0);
        }
        features[3] = p.depth;
        if let Some(t) = flow_target {
            let q = camera.project_point(t[i].position);
            features[4] = q[0] - p.mean[0];
            features[5] = q[1] - p.mean[1];
        }
        match Splat::new(i, p.mean, p.cov, logistic(g.opacity_logit), features, w, h) {
            Ok(Some(s)) => splats.push(s),
            Ok(None) => {}
            Err(()) => report.degenerate += 1,
        }
    }
    report.all_degenerate = report.degenerate == gaussians.len();
    report.splatted = splats.len();
    let (accum, raster) = raster::rasterize_splats(splats, w, h);

    let mut rgb = Image::zeros(w, h, 3);
    let mut alpha = Image::zeros(w, h, 1);
    let mut depth = Image::zeros(w, h, 1);
    let mut coverage = Mask::new(w, h, false);
    let mut flow = flow_target.map(|_| FlowMap {
        width: w,
        height: h,
        data: vec![[0.0; 2]; w * h],
        valid: vec![false; w * h],
    });
    for p in 0..w * h {
        let a = &accum[p * ACCUM..(p + 1) * ACCUM];
        alpha.data[p] = a[3];
        let covered = a[3] > COVERAGE_THRESHOLD;
        coverage.data[p] = covered;
        if channels.rgb {
            rgb.data[3 * p..3 * p + 3].copy_from_slice(&a[0..3]);
        }
        if a[3] > NORMALIZE_EPS {
            if channels.depth || channels.normal {
                depth.data[p] = a[4] / a[3];
            }
            if let Some(f) = flow.as_mut() {
                if covered {
                    f.data[p] = [a[5] / a[3], a[6] / a[3]];
                    f.valid[p] = true;
                }
            }
        }
    }
    let (normal, normal_valid) = if channels.normal {
        normal_from_depth(&depth, camera, &coverage)
    } else {
        (Image::zeros(w, h, 3), Mask::new(w, h, false))
    };
    let tape = RenderTape {
        raster,
        accum,
        channels,
        has_flow: flow_target.is_some(),
        depth: depth.clone(),
        normal_valid: normal_valid.clone(),
    };
    let output = RenderOutput {
        rgb,
        alpha,
        depth: if channels.depth || channels.normal {
            depth
        } else {
            Image::zeros(w, h, 1)
        },
        normal,
        normal_valid,
        flow,
        coverage,
        report,
    };
    Ok((output, tape))
}

/// Plain rasterization without flow.
pub fn rasterize(
    gaussians: &[Gaussian3D],
    camera: &Camera,
    channels: Channels,
) -> Result<RenderOutput> {
    render(gaussians, camera, channels, None).map(|(o, _)| o)
}

/// Gradients for the rendered Gaussians and, when flow was rendered, for the
/// flow-target Gaussians.
#[derive(Clone, Debug)]
pub struct RenderBackward {
    pub gaussians: Vec<GaussianGrad>,
    pub flow_target: Option<Vec<GaussianGrad>>,
    /// `|dL/d mean2d|` per Gaussian (view-space positional gradient).
    pub mean2d_norm: Vec<f64>,
}

pub fn render_backward(
    gaussians: &[Gaussian3D],
    flow_target: Option<&[Gaussian3D]>,
    camera: &Camera,
    tape: &RenderTape,
    grad: &RenderGrad,
) -> RenderBackward {
    let (w, h) = (camera.width, camera.height);
    let mut g_accum = vec![0.0; w * h * ACCUM];

    let mut g_depth: Option<Image> = grad.depth.clone();
    if let (Some(gn), true) = (&grad.normal, tape.channels.normal) {
        let extra = normal_from_depth_vjp(&tape.depth, camera, &tape.normal_valid, gn);
        match g_depth.as_mut() {
            Some(d) => {
                for (a, b) in d.data.iter_mut().zip(&extra.data) {
                    *a += b;
                }
            }
            None => g_depth = Some(extra),
        }
    }

    for p in 0..w * h {
        let a = &tape.accum[p * ACCUM..(p + 1) * ACCUM];
        let g = &mut g_accum[p * ACCUM..(p + 1) * ACCUM];
        if let Some(rgb) = &grad.rgb {
            if tape.channels.rgb {
                g[0..3].copy_from_slice(&rgb.data[3 * p..3 * p + 3]);
            }
        }
        if let Some(al) = &grad.alpha {
            g[3] += al.data[p];
        }
        if a[3] > NORMALIZE_EPS {
            if let Some(d) = &g_depth {
                let gd = d.data[p];
                if gd != 0.0 {
                    g[4] += gd / a[3];
                    g[3] -= gd * a[4] / (a[3] * a[3]);
                }
            }
            if let (Some(f), true) = (&grad.flow, tape.has_flow) {
                if a[3] > COVERAGE_THRESHOLD {
                    let gf = f[p];
                    g[5] += gf[0] / a[3];
                    g[6] += gf[1] / a[3];
                    g[3] -= (gf[0] * a[5] + gf[1] * a[6]) / (a[3] * a[3]);
                }
            }
        }
    }

    let splat_grads = raster::rasterize_backward(&tape.raster, &g_accum);
    let mut out = vec![GaussianGrad::default(); gaussians.len()];
    let mut target = flow_target.map(|_| vec![GaussianGrad::default(); gaussians.len()]);
    let mut mean2d_norm = vec![0.0; gaussians.len()];
    for (s, sg) in tape.raster.splats.iter().zip(&splat_grads) {
        let i = s.source;
        let g = &gaussians[i];
        let mut g_mean = [sg[0], sg[1]];
        mean2d_norm[i] = (g_mean[0] * g_mean[0] + g_mean[1] * g_mean[1]).sqrt();
        if let Some(t) = target.as_mut() {
            // offset = target mean − own mean
            g_mean[0] -= sg[10];
            g_mean[1] -= sg[11];
            let tg = project_vjp(&flow_target.unwrap()[i], camera, [sg[10], sg[11]], [0.0; 3], 0.0);
            t[i].position = tg.position;
        }
        let mut gg = project_vjp(g, camera, g_mean, [sg[2], sg[3], sg[4]], sg[9]);
        gg.opacity_logit = sg[5];
        for c in 0..3 {
            if (0.0..=1.0).contains(&g.color[c]) {
                gg.color[c] = sg[6 + c];
            }
        }
        out[i] = gg;
    }
    RenderBackward {
        gaussians: out,
        flow_target: target,
        mean2d_norm,
    }
}

/// Flow from `t_a` to `t_b` in pixels, composited with the `t_a` weights and
/// valid on the `t_a` coverage.
pub fn render_flow(field: &GaussianField, camera: &Camera, t_a: usize, t_b: usize) -> Result<FlowMap> {
    let (ga, _) = deform(field, t_a)?;
    let (gb, _) = if t_a == t_b {
        (ga.clone(), None::<()>)
    } else {
        (deform(field, t_b)?.0, None)
    };
    let (out, _) = render(&ga, camera, Channels::ALPHA_ONLY, Some(&gb))?;
    Ok(out.flow.expect("flow requested"))
}
