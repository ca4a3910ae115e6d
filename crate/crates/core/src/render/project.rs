use super::Camera;
use crate::field::{Gaussian3D, GaussianGrad};
use crate::math::{normalize4, normalize4_vjp, quat_to_mat, quat_to_mat_vjp, Mat3};

/// Screen-space covariance regularizer (px²).
pub const COV_REGULARIZER: f64 = 0.3;

/// Image-plane footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    /// Pixel coordinates of the mean.
    pub mean: [f64; 2],
    /// Symmetric covariance `[[a, b], [b, c]]` stored as `[a, b, c]`.
    pub cov: [f64; 3],
    pub depth: f64,
}

/// `J · M` with `J` the 2×3 orthographic Jacobian and `M = R(q) diag(exp s)`.
fn footprint(g: &Gaussian3D, cam: &Camera) -> ([[f64; 3]; 2], Mat3, [f64; 3]) {
    let r = quat_to_mat(normalize4(g.orientation));
    let sc = g.log_scale.map(f64::exp);
    let s = cam.scale();
    let mut a = [[0.0; 3]; 2];
    for (row, a_row) in a.iter_mut().enumerate() {
        for (c, v) in a_row.iter_mut().enumerate() {
            let j = cam.rotation[row];
            *v = s * (j[0] * r[0][c] + j[1] * r[1][c] + j[2] * r[2][c]) * sc[c];
        }
    }
    (a, r, sc)
}

pub fn project(g: &Gaussian3D, cam: &Camera) -> Projected {
    let p = cam.project_point(g.position);
    let (a, _, _) = footprint(g, cam);
    let dot = |x: &[f64; 3], y: &[f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    Projected {
        mean: [p[0], p[1]],
        cov: [
            dot(&a[0], &a[0]) + COV_REGULARIZER,
            dot(&a[0], &a[1]),
            dot(&a[1], &a[1]) + COV_REGULARIZER,
        ],
        depth: p[2],
    }
}

/// Pulls gradients of the projected mean, covariance entries `[a, b, c]` and
/// depth back to position, orientation and log-scale.
pub fn project_vjp(
    g: &Gaussian3D,
    cam: &Camera,
    g_mean: [f64; 2],
    g_cov: [f64; 3],
    g_depth: f64,
) -> GaussianGrad {
    let s = cam.scale();
    let rc = &cam.rotation;
    let mut out = GaussianGrad::default();
    for k in 0..3 {
        out.position[k] = s * (rc[0][k] * g_mean[0] + rc[1][k] * g_mean[1]) + rc[2][k] * g_depth;
    }
    if g_cov.iter().all(|&v| v == 0.0) {
        return out;
    }
    let (a, r, sc) = footprint(g, cam);
    // dL/dA = (G + Gᵀ) A with G = [[ga, gb/2], [gb/2, gc]]
    let ga = [
        [
            2.0 * g_cov[0] * a[0][0] + g_cov[1] * a[1][0],
            2.0 * g_cov[0] * a[0][1] + g_cov[1] * a[1][1],
            2.0 * g_cov[0] * a[0][2] + g_cov[1] * a[1][2],
        ],
        [
            g_cov[1] * a[0][0] + 2.0 * g_cov[2] * a[1][0],
            g_cov[1] * a[0][1] + 2.0 * g_cov[2] * a[1][1],
            g_cov[1] * a[0][2] + 2.0 * g_cov[2] * a[1][2],
        ],
    ];
    // A = s · Rc[0..2] · R · diag(sc)
    let mut g_r = [[0.0; 3]; 3];
    for i in 0..3 {
        for c in 0..3 {
            let gm = s * (rc[0][i] * ga[0][c] + rc[1][i] * ga[1][c]);
            g_r[i][c] = gm * sc[c];
            out.log_scale[c] += gm * r[i][c] * sc[c];
        }
    }
    let qn = normalize4(g.orientation);
    out.orientation = normalize4_vjp(g.orientation, quat_to_mat_vjp(qn, &g_r));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{dot4, QUAT_IDENTITY};

    fn g(position: [f64; 3], log_scale: [f64; 3], orientation: [f64; 4]) -> Gaussian3D {
        Gaussian3D {
            position,
            orientation,
            log_scale,
            opacity_logit: 0.0,
            color: [0.5; 3],
        }
    }

    #[test]
    fn isotropic_covariance_example() {
        let cam = Camera::orbit(0.0, 0.0, 3.0, 1.5, 96, 96, 1);
        let s: f64 = 0.07;
        let p = project(&g([0.0; 3], [s.ln(); 3], QUAT_IDENTITY), &cam);
        let want = (s * 96.0 / 3.0).powi(2) + 0.3;
        assert!((p.cov[0] - want).abs() < 1e-12 && p.cov[1].abs() < 1e-12);
        assert!((p.cov[2] - want).abs() < 1e-12);
        assert!((p.mean[0] - 48.0).abs() < 1e-12 && (p.mean[1] - 48.0).abs() < 1e-12);
    }

    #[test]
    fn shift_by_half_extent_moves_half_width() {
        let cam = Camera::orbit(90.0, 0.0, 3.0, 1.5, 96, 96, 2);
        let right = cam.rotation[0];
        let a = project(&g([0.1, 0.2, 0.3], [-3.0; 3], QUAT_IDENTITY), &cam);
        let moved = [0.1 + 1.5 * right[0], 0.2 + 1.5 * right[1], 0.3 + 1.5 * right[2]];
        let b = project(&g(moved, [-3.0; 3], QUAT_IDENTITY), &cam);
        assert!((b.mean[0] - a.mean[0] - 48.0).abs() < 1e-9);
        assert!((b.mean[1] - a.mean[1]).abs() < 1e-9);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let cam = Camera::orbit(30.0, 20.0, 3.0, 1.0, 32, 32, 1);
        let base = g([0.1, -0.2, 0.3], [-2.0, -2.5, -1.7], [0.8, 0.3, -0.2, 0.4]);
        let gm = [0.3, -0.7];
        let gc = [0.11, -0.4, 0.25];
        let gd = 0.6;
        let f = |x: &Gaussian3D| {
            let p = project(x, &cam);
            gm[0] * p.mean[0]
                + gm[1] * p.mean[1]
                + gc[0] * p.cov[0]
                + gc[1] * p.cov[1]
                + gc[2] * p.cov[2]
                + gd * p.depth
        };
        let an = project_vjp(&base, &cam, gm, gc, gd);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = base.clone();
            let mut b = base.clone();
            a.position[k] += h;
            b.position[k] -= h;
            assert!(((f(&a) - f(&b)) / (2.0 * h) - an.position[k]).abs() < 1e-6);
            let mut a = base.clone();
            let mut b = base.clone();
            a.log_scale[k] += h;
            b.log_scale[k] -= h;
            assert!(((f(&a) - f(&b)) / (2.0 * h) - an.log_scale[k]).abs() < 1e-5);
        }
        for k in 0..4 {
            let mut a = base.clone();
            let mut b = base.clone();
            a.orientation[k] += h;
            b.orientation[k] -= h;
            let n = (f(&a) - f(&b)) / (2.0 * h);
            assert!((n - an.orientation[k]).abs() < 1e-5, "{k}: {n} vs {}", an.orientation[k]);
        }
        // the gradient is tangent to the unit sphere at the stored quaternion
        let q = normalize4(base.orientation);
        assert!(dot4(q, an.orientation).abs() < 1e-12);
    }
}
