use super::{ControlPoint, FieldGrad, Gaussian3D, GaussianField, GaussianGrad, NetTape, OUTPUT_DIM};
use crate::error::Result;
use crate::math::{
    add3, dot3, dot4, mat_t_vec, mat_vec, normalize4, normalize4_vjp, quat_mul, quat_mul_vjp,
    quat_to_mat, quat_to_mat_vjp, sub3, Mat3, Quat, Vec3, QUAT_IDENTITY,
};

/// Rigid motion `x ↦ R (x − p) + p + t` of one control point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidMotion {
    pub translation: Vec3,
    /// Unit quaternion.
    pub rotation: Quat,
}

impl RigidMotion {
    pub const IDENTITY: RigidMotion = RigidMotion {
        translation: [0.0; 3],
        rotation: QUAT_IDENTITY,
    };
}

/// Unnormalized RBF responses `exp(−d²/(2r²))` of the three neighbours.
pub fn rbf_weights_raw(position: Vec3, neighbors: [&ControlPoint; 3]) -> [f64; 3] {
    neighbors.map(|c| {
        let d = sub3(position, c.rest_position);
        let r = c.radius();
        (-dot3(d, d) / (2.0 * r * r)).exp()
    })
}

/// Normalized RBF blend weights; uniform when every raw response underflows.
pub fn rbf_weights(position: Vec3, neighbors: [&ControlPoint; 3]) -> [f64; 3] {
    let raw = rbf_weights_raw(position, neighbors);
    let s: f64 = raw.iter().sum();
    if s > 0.0 && s.is_finite() {
        raw.map(|r| r / s)
    } else {
        [1.0 / 3.0; 3]
    }
}

/// Per-timestep control motions with the network activations needed to
/// differentiate them.
#[derive(Clone, Debug)]
pub struct ControlMotions {
    pub timestep: usize,
    pub motions: Vec<RigidMotion>,
    raw_rotation: Vec<Quat>,
    tapes: Vec<(NetTape, NetTape)>,
}

/// Evaluates the deformation network for every control point at timestep
/// `n`. The output is taken relative to the canonical timestep, so the
/// canonical frame is always the rest configuration.
pub fn control_motions(field: &GaussianField, n: usize) -> Result<ControlMotions> {
    field.timeline.check(n)?;
    let t = field.timeline.normalized(n);
    let tc = field.timeline.normalized(field.timeline.canonical);
    let net = &field.deformation;
    let mut motions = Vec::with_capacity(field.control_points.len());
    let mut raw_rotation = Vec::with_capacity(field.control_points.len());
    let mut tapes = Vec::with_capacity(field.control_points.len());
    for c in &field.control_points {
        let (o_t, tape_t) = net.forward(&net.encode(c.rest_position, t));
        let (o_c, tape_c) = net.forward(&net.encode(c.rest_position, tc));
        let mut o = [0.0; OUTPUT_DIM];
        for k in 0..OUTPUT_DIM {
            o[k] = o_t[k] - o_c[k];
        }
        let raw = [1.0 + o[3], o[4], o[5], o[6]];
        motions.push(RigidMotion {
            translation: [o[0], o[1], o[2]],
            rotation: normalize4(raw),
        });
        raw_rotation.push(raw);
        tapes.push((tape_t, tape_c));
    }
    Ok(ControlMotions {
        timestep: n,
        motions,
        raw_rotation,
        tapes,
    })
}

/// Gradient with respect to each control motion.
#[derive(Clone, Copy, Debug, Default)]
pub struct MotionGrad {
    pub translation: Vec3,
    pub rotation: Quat,
}

/// State kept from [`deform`] for [`deform_backward`].
#[derive(Clone, Debug)]
pub struct DeformTape {
    pub controls: Option<ControlMotions>,
}

/// Blending terms of one Gaussian that forward and backward share.
struct Blend {
    neighbors: [usize; 3],
    raw: [f64; 3],
    sum: f64,
    weights: [f64; 3],
    fallback: bool,
    offsets: [Vec3; 3],
    targets: [Vec3; 3],
    rots: [Mat3; 3],
    signs: [f64; 3],
    q_blend_raw: Quat,
    q_blend: Quat,
    q_rest: Quat,
}

fn blend(field: &GaussianField, i: usize, motions: &[RigidMotion]) -> Blend {
    let g = &field.gaussians[i];
    let nb = field.knn[i];
    let cps = nb.map(|j| &field.control_points[j]);
    let raw = rbf_weights_raw(g.position, cps);
    let sum: f64 = raw.iter().sum();
    let fallback = !(sum > 0.0 && sum.is_finite());
    let weights = if fallback {
        [1.0 / 3.0; 3]
    } else {
        raw.map(|r| r / sum)
    };
    let mut offsets = [[0.0; 3]; 3];
    let mut targets = [[0.0; 3]; 3];
    let mut rots = [[[0.0; 3]; 3]; 3];
    let mut signs = [1.0; 3];
    let mut q_blend_raw = [0.0; 4];
    let q0 = motions[nb[0]].rotation;
    for k in 0..3 {
        let m = &motions[nb[k]];
        let p = cps[k].rest_position;
        offsets[k] = sub3(g.position, p);
        rots[k] = quat_to_mat(m.rotation);
        targets[k] = add3(add3(mat_vec(&rots[k], offsets[k]), p), m.translation);
        signs[k] = if dot4(m.rotation, q0) < 0.0 { -1.0 } else { 1.0 };
        for c in 0..4 {
            q_blend_raw[c] += weights[k] * signs[k] * m.rotation[c];
        }
    }
    Blend {
        neighbors: nb,
        raw,
        sum,
        weights,
        fallback,
        offsets,
        targets,
        rots,
        signs,
        q_blend_raw,
        q_blend: normalize4(q_blend_raw),
        q_rest: normalize4(g.orientation),
    }
}

/// Deforms every Gaussian with explicit per-control motions.
pub fn deform_with_motions(field: &GaussianField, motions: &[RigidMotion]) -> Vec<Gaussian3D> {
    if !field.is_dynamic() {
        return field.gaussians.clone();
    }
    field
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let b = blend(field, i, motions);
            // displacement form keeps identity motions exact
            let mut position = g.position;
            for k in 0..3 {
                let t = motions[b.neighbors[k]].translation;
                let r = mat_vec(&b.rots[k], b.offsets[k]);
                for c in 0..3 {
                    position[c] += b.weights[k] * (r[c] - b.offsets[k][c] + t[c]);
                }
            }
            Gaussian3D {
                position,
                orientation: quat_mul(b.q_blend, b.q_rest),
                log_scale: g.log_scale,
                opacity_logit: g.opacity_logit,
                color: g.color,
            }
        })
        .collect()
}

/// Pulls deformed-Gaussian gradients back to the rest parameters (into
/// `out`) and returns the gradient per control motion.
pub fn deform_with_motions_backward(
    field: &GaussianField,
    motions: &[RigidMotion],
    grads: &[GaussianGrad],
    out: &mut FieldGrad,
) -> Vec<MotionGrad> {
    let mut mg = vec![MotionGrad::default(); field.control_points.len()];
    if !field.is_dynamic() {
        for (o, g) in out.gaussians.iter_mut().zip(grads) {
            o.add(g);
        }
        return mg;
    }
    let mut g_rot_mat = vec![[[0.0; 3]; 3]; field.control_points.len()];
    for (i, gd) in grads.iter().enumerate() {
        let b = blend(field, i, motions);
        let go = &mut out.gaussians[i];
        go.log_scale = add3(go.log_scale, gd.log_scale);
        go.color = add3(go.color, gd.color);
        go.opacity_logit += gd.opacity_logit;

        let (g_qb, g_qrest) = quat_mul_vjp(b.q_blend, b.q_rest, gd.orientation);
        let g_orient = normalize4_vjp(field.gaussians[i].orientation, g_qrest);
        for c in 0..4 {
            go.orientation[c] += g_orient[c];
        }
        let g_qt = normalize4_vjp(b.q_blend_raw, g_qb);

        let gp = gd.position;
        let mut g_w = [0.0; 3];
        let mut g_mu = [0.0; 3];
        for k in 0..3 {
            let j = b.neighbors[k];
            let q = motions[j].rotation;
            g_w[k] = dot3(gp, b.targets[k]) + b.signs[k] * dot4(q, g_qt);
            let w = b.weights[k];
            for c in 0..4 {
                mg[j].rotation[c] += w * b.signs[k] * g_qt[c];
            }
            for c in 0..3 {
                mg[j].translation[c] += w * gp[c];
                for d in 0..3 {
                    g_rot_mat[j][c][d] += w * gp[c] * b.offsets[k][d];
                }
            }
            g_mu = add3(g_mu, mat_t_vec(&b.rots[k], gp).map(|v| v * w));
        }
        if !b.fallback {
            let mean: f64 = (0..3).map(|k| g_w[k] * b.weights[k]).sum();
            for k in 0..3 {
                let g_raw = (g_w[k] - mean) / b.sum;
                let cp = &field.control_points[b.neighbors[k]];
                let r2 = cp.radius().powi(2);
                let d2 = dot3(b.offsets[k], b.offsets[k]);
                for c in 0..3 {
                    g_mu[c] -= g_raw * b.raw[k] * b.offsets[k][c] / r2;
                }
                out.rbf_log_radius[b.neighbors[k]] += g_raw * b.raw[k] * d2 / r2;
            }
        }
        go.position = add3(go.position, g_mu);
    }
    for (j, m) in mg.iter_mut().enumerate() {
        let gq = quat_to_mat_vjp(motions[j].rotation, &g_rot_mat[j]);
        for c in 0..4 {
            m.rotation[c] += gq[c];
        }
    }
    mg
}

/// Deformed Gaussians at timestep `n`.
pub fn deform(field: &GaussianField, n: usize) -> Result<(Vec<Gaussian3D>, DeformTape)> {
    field.timeline.check(n)?;
    // the canonical frame is the rest pose exactly, with identity Jacobian
    if !field.is_dynamic() || n == field.timeline.canonical {
        return Ok((field.gaussians.clone(), DeformTape { controls: None }));
    }
    let cm = control_motions(field, n)?;
    let out = deform_with_motions(field, &cm.motions);
    Ok((out, DeformTape { controls: Some(cm) }))
}

/// Accumulates into `out` the gradient of the deformed Gaussians' cotangent
/// `grads` with respect to rest parameters, RBF radii and network weights.
pub fn deform_backward(
    field: &GaussianField,
    tape: &DeformTape,
    grads: &[GaussianGrad],
    out: &mut FieldGrad,
) {
    let Some(cm) = &tape.controls else {
        for (o, g) in out.gaussians.iter_mut().zip(grads) {
            o.add(g);
        }
        return;
    };
    let mg = deform_with_motions_backward(field, &cm.motions, grads, out);
    motion_backward(field, cm, &mg, out);
}

/// Pulls control-motion gradients back into the network weights.
pub(crate) fn motion_backward(
    field: &GaussianField,
    cm: &ControlMotions,
    mg: &[MotionGrad],
    out: &mut FieldGrad,
) {
    for (j, m) in mg.iter().enumerate() {
        let g_raw = normalize4_vjp(cm.raw_rotation[j], m.rotation);
        let g_o = [
            m.translation[0],
            m.translation[1],
            m.translation[2],
            g_raw[0],
            g_raw[1],
            g_raw[2],
            g_raw[3],
        ];
        if g_o.iter().all(|&v| v == 0.0) {
            continue;
        }
        let (tape_t, tape_c) = &cm.tapes[j];
        field.deformation.backward(tape_t, &g_o, &mut out.network);
        field.deformation.backward(tape_c, &g_o.map(|v| -v), &mut out.network);
    }
}

#[cfg(test)]
mod tests {
    use super::super::{NetShape, Timeline};
    use super::*;
    use crate::math::{quat_from_axis_angle, QUAT_IDENTITY};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cp(p: Vec3, r: f64) -> ControlPoint {
        ControlPoint {
            rest_position: p,
            rbf_log_radius: r.ln(),
        }
    }

    fn g_at(p: Vec3) -> Gaussian3D {
        Gaussian3D {
            position: p,
            orientation: QUAT_IDENTITY,
            log_scale: [-2.0; 3],
            opacity_logit: 1.0,
            color: [0.2, 0.4, 0.6],
        }
    }

    fn small_field(gs: Vec<Gaussian3D>, cps: Vec<ControlPoint>) -> GaussianField {
        let shape = NetShape {
            position_bands: 2,
            time_bands: 2,
            hidden_width: 8,
            hidden_layers: 2,
        };
        let mut f = GaussianField::new_static(gs, Timeline::new(4), &shape, 1);
        f.knn = super::super::knn_assign(&f.gaussians, &cps).unwrap();
        f.control_points = cps;
        f
    }

    #[test]
    fn rbf_limit_cases() {
        let near = cp([0.0; 3], 1.0);
        let far = cp([1e3, 0.0, 0.0], 1.0);
        let w = rbf_weights([0.0; 3], [&near, &far, &far]);
        assert!((w[0] - 1.0).abs() < 1e-12 && w[1] < 1e-12);

        let a = cp([1.0, 0.0, 0.0], 1.0);
        let b = cp([-1.0, 0.0, 0.0], 1.0);
        let w = rbf_weights([0.0; 3], [&a, &b, &far]);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12 && w[2] < 1e-12);

        let cs = [
            cp([1.0, 0.0, 0.0], 1.0),
            cp([0.0, 2.0, 0.0], 1.0),
            cp([0.0, 0.0, 3.0], 1.0),
        ];
        let w = rbf_weights([0.0; 3], [&cs[0], &cs[1], &cs[2]]);
        let raw = [(-0.5f64).exp(), (-2.0f64).exp(), (-4.5f64).exp()];
        let s: f64 = raw.iter().sum();
        for k in 0..3 {
            assert!((w[k] - raw[k] / s).abs() < 1e-15);
        }

        let lost = rbf_weights([1e6, 0.0, 0.0], [&near, &near, &near]);
        assert_eq!(lost, [1.0 / 3.0; 3]);
    }

    #[test]
    fn rigid_limits() {
        // one effective control: the others are out of reach
        let cps = vec![
            cp([0.0; 3], 1.0),
            cp([500.0, 0.0, 0.0], 1.0),
            cp([0.0, 500.0, 0.0], 1.0),
        ];
        let f = small_field(vec![g_at([1.0, 0.0, 0.0])], cps);
        let id = vec![RigidMotion::IDENTITY; 3];
        assert_eq!(deform_with_motions(&f, &id)[0].position, [1.0, 0.0, 0.0]);

        let mut shift = id.clone();
        shift[0].translation = [0.1, -0.2, 0.3];
        let p = deform_with_motions(&f, &shift)[0].position;
        assert!((p[0] - 1.1).abs() < 1e-12 && (p[1] + 0.2).abs() < 1e-12);

        let mut turn = id.clone();
        turn[0].rotation = quat_from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let p = deform_with_motions(&f, &turn)[0].position;
        assert!(p[0].abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn canonical_timestep_is_rest_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gs: Vec<_> = (0..12)
            .map(|_| g_at([rng.gen(), rng.gen(), rng.gen()]))
            .collect();
        let cps: Vec<_> = (0..5)
            .map(|_| cp([rng.gen(), rng.gen(), rng.gen()], 0.5))
            .collect();
        let mut f = small_field(gs, cps);
        f.deformation
            .for_each_param_mut(|_, v| *v += rng.gen_range(-0.3..0.3));
        let (d, _) = deform(&f, 1).unwrap();
        for (a, b) in d.iter().zip(&f.gaussians) {
            assert_eq!(a.position, b.position);
        }
        let (d3, _) = deform(&f, 3).unwrap();
        assert!(d3.iter().zip(&f.gaussians).any(|(a, b)| a.position != b.position));
        assert!(deform(&f, 5).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(
            p in prop::array::uniform3(-50.0f64..50.0),
            cs in prop::array::uniform3(prop::array::uniform3(-50.0f64..50.0)),
            lr in prop::array::uniform3(-6.0f64..2.0),
        ) {
            let c = [0, 1, 2].map(|k| ControlPoint { rest_position: cs[k], rbf_log_radius: lr[k] });
            let w = rbf_weights(p, [&c[0], &c[1], &c[2]]);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn deform_is_rigid_equivariant(seed in 0u64..1000, angle in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<_> = (0..8).map(|_| g_at([rng.gen(), rng.gen(), rng.gen()])).collect();
            let cps: Vec<_> = (0..4).map(|_| cp([rng.gen(), rng.gen(), rng.gen()], 0.4)).collect();
            let f = small_field(gs, cps);
            let motions: Vec<_> = (0..4).map(|_| RigidMotion {
                translation: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
                rotation: quat_from_axis_angle([rng.gen(), rng.gen(), 0.5], rng.gen_range(-0.3..0.3)),
            }).collect();
            let base = deform_with_motions(&f, &motions);
            // global motion G(x) = Q x + s applied after each control motion
            let q = quat_from_axis_angle([0.3, -0.2, 0.9], angle);
            let qm = quat_to_mat(q);
            let s = [0.5, -1.0, 2.0];
            let composed: Vec<_> = motions.iter().zip(&f.control_points).map(|(m, c)| {
                let p = c.rest_position;
                // Q(R(x-p)+p+t)+s = (QR)(x-p) + p + [Q(p+t)+s-p]
                let t = sub3(add3(mat_vec(&qm, add3(p, m.translation)), s), p);
                RigidMotion { translation: t, rotation: quat_mul(q, m.rotation) }
            }).collect();
            let moved = deform_with_motions(&f, &composed);
            for (a, b) in base.iter().zip(&moved) {
                let want = add3(mat_vec(&qm, a.position), s);
                for c in 0..3 {
                    prop_assert!((want[c] - b.position[c]).abs() < 1e-5);
                }
            }
        }
    }
}
