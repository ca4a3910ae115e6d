use crate::field::Gaussian3D;
use crate::math::{add3, dot3, logit, norm3, rotation_between, scale3, QUAT_IDENTITY};
use crate::render::Camera;
use crate::sequence::MultiviewSequence;

/// Surface voxels of the visual hull carved from the masks of `frame` in
/// `views`, coloured by averaging the views that face each voxel.
pub fn visual_hull_init(
    seq: &MultiviewSequence,
    frame: usize,
    views: &[usize],
    resolution: usize,
    opacity: f64,
    erosion: f64,
    tangent: f64,
) -> Vec<Gaussian3D> {
    let extent = seq
        .cameras
        .iter()
        .map(|c| c.half_extent)
        .fold(f64::INFINITY, f64::min);
    let r = resolution;
    let voxel = 2.0 * extent / r as f64;
    let center = |i: usize| -extent + (i as f64 + 0.5) * voxel;
    let pixel_of = |cam: &Camera, p: [f64; 3]| -> Option<(usize, usize)> {
        let q = cam.project_point(p);
        let (u, v) = (q[0].floor(), q[1].floor());
        if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    };
    let mut inside = vec![false; r * r * r];
    let idx = |x: usize, y: usize, z: usize| (z * r + y) * r + x;
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let p = [center(x), center(y), center(z)];
                inside[idx(x, y, z)] = views.iter().all(|&k| {
                    let cam = &seq.cameras[k - 1];
                    let mask = &seq.masks[seq.slot(frame, k)];
                    let e = erosion * voxel;
                    [[0.0, 0.0], [e, 0.0], [-e, 0.0], [0.0, e], [0.0, -e]].iter().all(|d| {
                        let q = add3(p, add3(scale3(cam.rotation[0], d[0]), scale3(cam.rotation[1], d[1])));
                        pixel_of(cam, q).is_some_and(|(u, v)| mask.at(u, v))
                    })
                });
            }
        }
    }
    let occupied = |x: isize, y: isize, z: isize| -> bool {
        let ri = r as isize;
        x >= 0 && y >= 0 && z >= 0 && x < ri && y < ri && z < ri && inside[idx(x as usize, y as usize, z as usize)]
    };
    let mut out = Vec::new();
    let log_s = (0.5 * voxel).ln();
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                if !inside[idx(x, y, z)] {
                    continue;
                }
                let mut normal = [0.0; 3];
                for (d, axis) in [(1isize, 0usize), (-1, 0), (1, 1), (-1, 1), (1, 2), (-1, 2)] {
                    let mut q = [x as isize, y as isize, z as isize];
                    q[axis] += d;
                    if !occupied(q[0], q[1], q[2]) {
                        normal[axis] += d as f64;
                    }
                }
                let len = norm3(normal);
                if len == 0.0 {
                    continue;
                }
                let normal = scale3(normal, 1.0 / len);
                let p = [center(x), center(y), center(z)];
                let mut color = [0.0; 3];
                let mut wsum = 0.0;
                for &k in views {
                    let cam = &seq.cameras[k - 1];
                    let facing = -dot3(normal, cam.rotation[2]);
                    if facing <= 0.2 {
                        continue;
                    }
                    if let Some((u, v)) = pixel_of(cam, p) {
                        let img = &seq.images[seq.slot(frame, k)];
                        for c in 0..3 {
                            color[c] += facing * img.at(u, v, c);
                        }
                        wsum += facing;
                    }
                }
                let color = if wsum > 0.0 { color.map(|c| c / wsum) } else { [0.5; 3] };
                out.push(Gaussian3D {
                    position: p,
                    orientation: rotation_between([0.0, 0.0, 1.0], normal),
                    log_scale: [log_s + tangent.ln(), log_s + tangent.ln(), log_s],
                    opacity_logit: logit(opacity),
                    color,
                });
            }
        }
    }
    if out.is_empty() {
        out.push(Gaussian3D {
            position: [0.0; 3],
            orientation: QUAT_IDENTITY,
            log_scale: [log_s; 3],
            opacity_logit: logit(0.01),
            color: [0.0; 3],
        });
    }
    out
}
