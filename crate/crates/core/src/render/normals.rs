use super::Camera;
use crate::buffer::{Image, Mask};

/// Camera-frame normals from a depth map by central differences of the
/// unprojected points. A pixel is valid only when it and its four neighbours
/// lie inside `mask`; invalid pixels hold a zero vector.
pub fn normal_from_depth(depth: &Image, camera: &Camera, mask: &Mask) -> (Image, Mask) {
    let (w, h) = (depth.width, depth.height);
    let s = camera.scale();
    let mut normals = Image::zeros(w, h, 3);
    let mut valid = Mask::new(w, h, false);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !stencil_ok(mask, x, y) {
                continue;
            }
            let dx = 0.5 * (depth.at(x + 1, y, 0) - depth.at(x - 1, y, 0));
            let dy = 0.5 * (depth.at(x, y + 1, 0) - depth.at(x, y - 1, 0));
            let v = [s * dx, s * dy, -1.0];
            let n = (v[0] * v[0] + v[1] * v[1] + 1.0).sqrt();
            for c in 0..3 {
                normals.set(x, y, c, v[c] / n);
            }
            valid.set(x, y, true);
        }
    }
    (normals, valid)
}

#[inline]
fn stencil_ok(mask: &Mask, x: usize, y: usize) -> bool {
    mask.at(x, y) && mask.at(x - 1, y) && mask.at(x + 1, y) && mask.at(x, y - 1) && mask.at(x, y + 1)
}

/// Pulls a cotangent on the normal map back onto the depth map.
pub fn normal_from_depth_vjp(
    depth: &Image,
    camera: &Camera,
    valid: &Mask,
    grad_normal: &Image,
) -> Image {
    let (w, h) = (depth.width, depth.height);
    let s = camera.scale();
    let mut g_depth = Image::zeros(w, h, 1);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !valid.at(x, y) {
                continue;
            }
            let g = grad_normal.pixel(x, y);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let dx = 0.5 * (depth.at(x + 1, y, 0) - depth.at(x - 1, y, 0));
            let dy = 0.5 * (depth.at(x, y + 1, 0) - depth.at(x, y - 1, 0));
            let v = [s * dx, s * dy, -1.0];
            let len = (v[0] * v[0] + v[1] * v[1] + 1.0).sqrt();
            let n = v.map(|c| c / len);
            let p = n[0] * g[0] + n[1] * g[1] + n[2] * g[2];
            let gv0 = (g[0] - n[0] * p) / len;
            let gv1 = (g[1] - n[1] * p) / len;
            let gdx = 0.5 * s * gv0;
            let gdy = 0.5 * s * gv1;
            g_depth.data[y * w + x + 1] += gdx;
            g_depth.data[y * w + x - 1] -= gdx;
            g_depth.data[(y + 1) * w + x] += gdy;
            g_depth.data[(y - 1) * w + x] -= gdy;
        }
    }
    g_depth
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front() -> Camera {
        Camera::orbit(0.0, 0.0, 3.0, 1.0, 24, 24, 1)
    }

    #[test]
    fn flat_plane_faces_camera() {
        let d = Image::filled(24, 24, 1, 2.5);
        let (n, v) = normal_from_depth(&d, &front(), &Mask::new(24, 24, true));
        assert_eq!(v.count(), 22 * 22);
        for y in 1..23 {
            for x in 1..23 {
                assert!(n.at(x, y, 0).abs() < 1e-12 && (n.at(x, y, 2) + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tilted_plane_matches_analytic_normal() {
        let cam = front();
        let a: f64 = 0.7;
        // depth z = z0 + a·x in camera coordinates
        let d = Image::from_fn(24, 24, 1, |x, _, _| {
            let xc = (x as f64 + 0.5 - 12.0) / cam.scale();
            2.0 + a * xc
        });
        let (n, v) = normal_from_depth(&d, &cam, &Mask::new(24, 24, true));
        let want = [a, 0.0, -1.0].map(|c| c / (1.0 + a * a).sqrt());
        for y in 1..23 {
            for x in 1..23 {
                assert!(v.at(x, y));
                for c in 0..3 {
                    assert!((n.at(x, y, c) - want[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn thin_mask_has_no_valid_pixels() {
        let m = Mask::from_fn(24, 24, |x, _| x == 10);
        let (_, v) = normal_from_depth(&Image::filled(24, 24, 1, 1.0), &front(), &m);
        assert_eq!(v.count(), 0);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let cam = front();
        let d = Image::from_fn(24, 24, 1, |x, y, _| 2.0 + 0.01 * ((x * 7 + y * 3) % 5) as f64);
        let mask = Mask::new(24, 24, true);
        let g = Image::from_fn(24, 24, 3, |x, y, c| ((x + 2 * y + 3 * c) % 7) as f64 * 0.1 - 0.3);
        let (_, valid) = normal_from_depth(&d, &cam, &mask);
        let an = normal_from_depth_vjp(&d, &cam, &valid, &g);
        let f = |d: &Image| {
            let (n, _) = normal_from_depth(d, &cam, &mask);
            n.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>()
        };
        for &(x, y) in &[(5usize, 5usize), (1, 7), (12, 20), (0, 0)] {
            let mut p = d.clone();
            p.data[y * 24 + x] += 1e-6;
            let mut m = d.clone();
            m.data[y * 24 + x] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - an.data[y * 24 + x]).abs() < 1e-6);
        }
    }
}
