use crate::error::{invalid, Result};
use crate::math::{add3, cross3, mat_t_vec, mat_vec, sub3, Mat3, Vec3};

/// Orthographic camera. Rows of `rotation` are the camera right, down and
/// forward axes in world coordinates; camera-space `z` is depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub center: Vec3,
    /// World distance mapped to half the image width.
    pub half_extent: f64,
    pub width: usize,
    pub height: usize,
    /// 1-based viewpoint index `k`.
    pub viewpoint_index: usize,
}

/// Default azimuths (degrees) of the six canonical views.
pub const DEFAULT_AZIMUTHS: [f64; 6] = [0.0, 45.0, 90.0, 180.0, 270.0, 315.0];

impl Camera {
    /// Camera on a sphere of radius `distance` around the origin, looking at
    /// it. Azimuth 0 looks down −z from +z with +x to the right.
    pub fn orbit(
        azimuth_deg: f64,
        elevation_deg: f64,
        distance: f64,
        half_extent: f64,
        width: usize,
        height: usize,
        viewpoint_index: usize,
    ) -> Self {
        let (st, ct) = azimuth_deg.to_radians().sin_cos();
        let (sp, cp) = elevation_deg.to_radians().sin_cos();
        let dir = [cp * st, sp, cp * ct];
        let forward = [-dir[0], -dir[1], -dir[2]];
        let right = [ct, 0.0, -st];
        let down = cross3(forward, right);
        Self {
            rotation: [right, down, forward],
            center: [dir[0] * distance, dir[1] * distance, dir[2] * distance],
            half_extent,
            width,
            height,
            viewpoint_index,
        }
    }

    /// The default ring of six cameras.
    pub fn ring(azimuths: &[f64], half_extent: f64, width: usize, height: usize) -> Vec<Camera> {
        azimuths
            .iter()
            .enumerate()
            .map(|(i, &a)| Camera::orbit(a, 0.0, 3.0, half_extent, width, height, i + 1))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                if (d - e).abs() > 1e-6 {
                    return Err(invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if !(self.half_extent > 0.0) || self.width == 0 || self.height == 0 {
            return Err(invalid("camera extent and image size must be positive"));
        }
        Ok(())
    }

    /// Pixels per world unit.
    #[inline]
    pub fn scale(&self) -> f64 {
        self.width as f64 / (2.0 * self.half_extent)
    }

    #[inline]
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        mat_vec(&self.rotation, sub3(p, self.center))
    }

    /// `(u, v, depth)` with pixel `(i, j)` centred at `(i + 0.5, j + 0.5)`.
    #[inline]
    pub fn project_point(&self, p: Vec3) -> [f64; 3] {
        let c = self.to_camera(p);
        let s = self.scale();
        [
            0.5 * self.width as f64 + s * c[0],
            0.5 * self.height as f64 + s * c[1],
            c[2],
        ]
    }

    /// World point at pixel coordinates `(u, v)` and camera depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let s = self.scale();
        let c = [
            (u - 0.5 * self.width as f64) / s,
            (v - 0.5 * self.height as f64) / s,
            z,
        ];
        add3(mat_t_vec(&self.rotation, c), self.center)
    }

    /// Projects a world direction to an image-plane displacement in pixels.
    pub fn project_vector(&self, v: Vec3) -> [f64; 2] {
        let c = mat_vec(&self.rotation, v);
        let s = self.scale();
        [s * c[0], s * c[1]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_cameras_are_valid_and_look_at_origin() {
        for cam in Camera::ring(&DEFAULT_AZIMUTHS, 1.0, 64, 64) {
            cam.validate().unwrap();
            let p = cam.project_point([0.0; 3]);
            assert!((p[0] - 32.0).abs() < 1e-12 && (p[1] - 32.0).abs() < 1e-12);
            assert!((p[2] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn front_camera_axes() {
        let cam = Camera::orbit(0.0, 0.0, 3.0, 1.0, 64, 64, 1);
        // +x right, +y up (image v grows downward)
        let p = cam.project_point([1.0, 0.5, 0.0]);
        assert!((p[0] - 64.0).abs() < 1e-12 && (p[1] - 16.0).abs() < 1e-12);
        let q = cam.unproject(p[0], p[1], p[2]);
        assert!((q[0] - 1.0).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12 && q[2].abs() < 1e-12);
    }
}
