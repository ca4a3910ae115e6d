//! Tile-based front-to-back alpha compositing of projected splats and its
//! reverse-mode derivative.
//!
//! Every splat carries a feature vector `[r, g, b, depth, flow_x, flow_y]`.
//! Per pixel the rasterizer accumulates `Σ wᵢ φᵢ` and `Σ wᵢ` with
//! `wᵢ = αᵢ Πⱼ<ᵢ (1 − αⱼ)`.

use rayon::prelude::*;

pub const ALPHA_CAP: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
pub const TILE: usize = 16;

pub const FEATURES: usize = 6;
/// Accumulator layout: `[r, g, b, alpha, depth_sum, flow_x_sum, flow_y_sum]`.
pub const ACCUM: usize = 7;
/// Splat gradient layout: `[mean_x, mean_y, cov_a, cov_b, cov_c,
/// opacity_logit, r, g, b, depth, flow_x, flow_y]`.
pub const SPLAT_GRAD: usize = 12;

#[derive(Clone, Copy, Debug)]
pub struct Splat {
    /// Index of the source Gaussian.
    pub source: usize,
    pub mean: [f64; 2],
    pub cov: [f64; 3],
    pub det: f64,
    /// Logistic opacity.
    pub opacity: f64,
    pub features: [f64; FEATURES],
    /// Inclusive pixel bounds `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
}

impl Splat {
    /// Builds a splat, or `None` when the covariance is degenerate or the
    /// splat can never reach the minimum alpha.
    pub fn new(
        source: usize,
        mean: [f64; 2],
        cov: [f64; 3],
        opacity: f64,
        features: [f64; FEATURES],
        width: usize,
        height: usize,
    ) -> Result<Option<Splat>, ()> {
        let det = cov[0] * cov[2] - cov[1] * cov[1];
        if !(det > 0.0 && det.is_finite() && cov[0] > 0.0)
            || !mean.iter().all(|v| v.is_finite())
            || !features.iter().all(|v| v.is_finite())
        {
            return Err(());
        }
        let reach = 255.0 * opacity.min(ALPHA_CAP);
        if !(reach > 1.0) {
            return Ok(None);
        }
        let mid = 0.5 * (cov[0] + cov[2]);
        let lambda = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = (2.0 * reach.ln() * lambda).sqrt();
        let x0 = (mean[0] - radius - 0.5).ceil().max(0.0);
        let y0 = (mean[1] - radius - 0.5).ceil().max(0.0);
        let x1 = (mean[0] + radius - 0.5).floor().min(width as f64 - 1.0);
        let y1 = (mean[1] + radius - 0.5).floor().min(height as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            return Ok(None);
        }
        Ok(Some(Splat {
            source,
            mean,
            cov,
            det,
            opacity,
            features,
            bbox: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
        }))
    }

    /// `(alpha, gaussian, dx, dy, quad, clamped)` at pixel centre `(px, py)`,
    /// or `None` below the minimum alpha.
    #[inline]
    fn eval(&self, px: f64, py: f64) -> Option<(f64, f64, f64, f64, f64, bool)> {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let [a, b, c] = self.cov;
        let quad = c * dx * dx - 2.0 * b * dx * dy + a * dy * dy;
        let power = -0.5 * quad / self.det;
        let g = power.exp();
        let raw = self.opacity * g;
        if raw < ALPHA_MIN {
            return None;
        }
        if raw > ALPHA_CAP {
            Some((ALPHA_CAP, g, dx, dy, quad, true))
        } else {
            Some((raw, g, dx, dy, quad, false))
        }
    }
}

/// Total order used to sort splats front to back independent of input order.
fn splat_order(a: &Splat, b: &Splat) -> std::cmp::Ordering {
    let key = |s: &Splat| {
        [
            s.features[3],
            s.mean[0],
            s.mean[1],
            s.cov[0],
            s.cov[1],
            s.cov[2],
            s.opacity,
            s.features[0],
            s.features[1],
            s.features[2],
            s.features[4],
            s.features[5],
        ]
    };
    let (ka, kb) = (key(a), key(b));
    for (x, y) in ka.iter().zip(&kb) {
        let o = x.total_cmp(y);
        if o.is_ne() {
            return o;
        }
    }
    std::cmp::Ordering::Equal
}

/// Everything the backward pass needs from a forward rasterization.
#[derive(Clone, Debug)]
pub struct RasterTape {
    pub width: usize,
    pub height: usize,
    /// Splats sorted front to back.
    pub splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    /// Per pixel: number of tile-list entries visited.
    visited: Vec<u32>,
    final_t: Vec<f64>,
}

fn tiles_x(width: usize) -> usize {
    width.div_ceil(TILE)
}

fn tiles_y(height: usize) -> usize {
    height.div_ceil(TILE)
}

/// Composites `splats` and returns the per-pixel accumulators
/// (`ACCUM` values per pixel, row-major) plus the tape.
pub fn rasterize_splats(
    mut splats: Vec<Splat>,
    width: usize,
    height: usize,
) -> (Vec<f64>, RasterTape) {
    splats.sort_by(splat_order);
    let (tx, ty) = (tiles_x(width), tiles_y(height));
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
    for (i, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.bbox;
        for ty_ in y0 / TILE..=y1 / TILE {
            for tx_ in x0 / TILE..=x1 / TILE {
                tiles[ty_ * tx + tx_].push(i as u32);
            }
        }
    }

    struct TileOut {
        accum: Vec<f64>,
        visited: Vec<u32>,
        final_t: Vec<f64>,
    }
    let outs: Vec<TileOut> = (0..tx * ty)
        .into_par_iter()
        .map(|t| {
            let (ox, oy) = ((t % tx) * TILE, (t / tx) * TILE);
            let (w, h) = (TILE.min(width - ox), TILE.min(height - oy));
            let list = &tiles[t];
            let mut accum = vec![0.0; w * h * ACCUM];
            let mut visited = vec![0u32; w * h];
            let mut final_t = vec![1.0; w * h];
            for ly in 0..h {
                for lx in 0..w {
                    let (px, py) = ((ox + lx) as f64 + 0.5, (oy + ly) as f64 + 0.5);
                    let p = ly * w + lx;
                    let acc = &mut accum[p * ACCUM..(p + 1) * ACCUM];
                    let mut trans = 1.0;
                    let mut n = 0u32;
                    for &si in list {
                        n += 1;
                        let s = &splats[si as usize];
                        let Some((alpha, ..)) = s.eval(px, py) else {
                            continue;
                        };
                        let wgt = alpha * trans;
                        acc[0] += wgt * s.features[0];
                        acc[1] += wgt * s.features[1];
                        acc[2] += wgt * s.features[2];
                        acc[3] += wgt;
                        acc[4] += wgt * s.features[3];
                        acc[5] += wgt * s.features[4];
                        acc[6] += wgt * s.features[5];
                        trans *= 1.0 - alpha;
                        if trans < TRANSMITTANCE_CUTOFF {
                            break;
                        }
                    }
                    visited[p] = n;
                    final_t[p] = trans;
                }
            }
            TileOut {
                accum,
                visited,
                final_t,
            }
        })
        .collect();

    let mut accum = vec![0.0; width * height * ACCUM];
    let mut visited = vec![0u32; width * height];
    let mut final_t = vec![1.0; width * height];
    for (t, o) in outs.into_iter().enumerate() {
        let (ox, oy) = ((t % tx) * TILE, (t / tx) * TILE);
        let w = TILE.min(width - ox);
        for (p, v) in o.visited.iter().enumerate() {
            let (lx, ly) = (p % w, p / w);
            let gp = (oy + ly) * width + ox + lx;
            visited[gp] = *v;
            final_t[gp] = o.final_t[p];
            accum[gp * ACCUM..(gp + 1) * ACCUM].copy_from_slice(&o.accum[p * ACCUM..(p + 1) * ACCUM]);
        }
    }
    (
        accum,
        RasterTape {
            width,
            height,
            splats,
            tiles,
            visited,
            final_t,
        },
    )
}

/// Reverse pass: given `dL/d accum` per pixel (`ACCUM` per pixel), returns
/// per-splat gradients in sorted order (`SPLAT_GRAD` each).
pub fn rasterize_backward(tape: &RasterTape, grad_accum: &[f64]) -> Vec<[f64; SPLAT_GRAD]> {
    let (width, height) = (tape.width, tape.height);
    let (tx, ty) = (tiles_x(width), tiles_y(height));
    let partials: Vec<Vec<[f64; SPLAT_GRAD]>> = (0..tx * ty)
        .into_par_iter()
        .map(|t| {
            let (ox, oy) = ((t % tx) * TILE, (t / tx) * TILE);
            let (w, h) = (TILE.min(width - ox), TILE.min(height - oy));
            let list = &tape.tiles[t];
            let mut local = vec![[0.0; SPLAT_GRAD]; list.len()];
            for ly in 0..h {
                for lx in 0..w {
                    let gp = (oy + ly) * width + ox + lx;
                    let g = &grad_accum[gp * ACCUM..(gp + 1) * ACCUM];
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let (px, py) = ((ox + lx) as f64 + 0.5, (oy + ly) as f64 + 0.5);
                    let gphi = [g[0], g[1], g[2], g[4], g[5], g[6]];
                    let g_alpha_total = g[3];
                    let mut trans = tape.final_t[gp];
                    // Σ_{j>i} w_j (gφ·φ_j + gA)
                    let mut behind = 0.0;
                    for li in (0..tape.visited[gp] as usize).rev() {
                        let s = &tape.splats[list[li] as usize];
                        let Some((alpha, gauss, dx, dy, quad, clamped)) = s.eval(px, py) else {
                            continue;
                        };
                        trans /= 1.0 - alpha;
                        let wgt = alpha * trans;
                        let mut dotp = g_alpha_total;
                        for k in 0..FEATURES {
                            dotp += gphi[k] * s.features[k];
                        }
                        let out = &mut local[li];
                        for k in 0..3 {
                            out[6 + k] += wgt * gphi[k];
                        }
                        out[9] += wgt * gphi[3];
                        out[10] += wgt * gphi[4];
                        out[11] += wgt * gphi[5];
                        let g_a = trans * dotp - behind / (1.0 - alpha);
                        behind += wgt * dotp;
                        if clamped {
                            continue;
                        }
                        out[5] += g_a * gauss * s.opacity * (1.0 - s.opacity);
                        let g_pow = g_a * s.opacity * gauss;
                        let [a, b, c] = s.cov;
                        let det = s.det;
                        let det2 = det * det;
                        out[0] += g_pow * (c * dx - b * dy) / det;
                        out[1] += g_pow * (a * dy - b * dx) / det;
                        out[2] += g_pow * -(dy * dy * det - quad * c) / (2.0 * det2);
                        out[3] += g_pow * (dx * dy * det - b * quad) / det2;
                        out[4] += g_pow * -(dx * dx * det - quad * a) / (2.0 * det2);
                    }
                }
            }
            local
        })
        .collect();
    let mut grads = vec![[0.0; SPLAT_GRAD]; tape.splats.len()];
    for (t, local) in partials.iter().enumerate() {
        for (li, g) in local.iter().enumerate() {
            let dst = &mut grads[tape.tiles[t][li] as usize];
            for k in 0..SPLAT_GRAD {
                dst[k] += g[k];
            }
        }
    }
    grads
}
