//! Dynamic Gaussian field: static splats, sparse control points with RBF
//! influence, and the time-conditioned deformation network that moves them.

mod arap;
mod deform;
mod net;
mod sampling;

pub use arap::{arap_energy, arap_energy_with_grad, control_graph, ArapGraph};
pub use deform::{
    control_motions, deform, deform_backward, deform_with_motions, deform_with_motions_backward,
    rbf_weights, rbf_weights_raw, ControlMotions, DeformTape, RigidMotion,
};
pub use net::{Dense, DeformationNet, NetShape, NetTape, OUTPUT_DIM};
pub use sampling::{fps_sample, knn_assign, knn_points};

use crate::error::{invalid, Result};
use crate::math::{self, Quat, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub position: Vec3,
    /// Unit quaternion `[w, x, y, z]`.
    pub orientation: Quat,
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    /// Linear RGB, stored unclamped.
    pub color: Vec3,
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        math::logistic(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlPoint {
    pub rest_position: Vec3,
    pub rbf_log_radius: f64,
}

impl ControlPoint {
    pub fn radius(&self) -> f64 {
        self.rbf_log_radius.exp()
    }
}

/// Timesteps `1..=frames`; `canonical` is the frame whose deformation is the
/// identity (the static-initialization keyframe).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timeline {
    pub frames: usize,
    pub canonical: usize,
}

impl Timeline {
    pub fn new(frames: usize) -> Self {
        Self {
            frames,
            canonical: 1,
        }
    }

    pub fn contains(&self, n: usize) -> bool {
        (1..=self.frames).contains(&n)
    }

    pub fn check(&self, n: usize) -> Result<()> {
        if self.contains(n) {
            Ok(())
        } else {
            Err(invalid(format!(
                "timestep {n} outside timeline 1..={}",
                self.frames
            )))
        }
    }

    /// Normalized time in `[0, 1]`.
    pub fn normalized(&self, n: usize) -> f64 {
        if self.frames <= 1 {
            0.0
        } else {
            (n - 1) as f64 / (self.frames - 1) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub gaussians: Vec<Gaussian3D>,
    pub control_points: Vec<ControlPoint>,
    pub deformation: DeformationNet,
    /// Per-Gaussian control indices, nearest first. Empty until controls are
    /// attached; the field is then static.
    pub knn: Vec<[usize; 3]>,
    pub timeline: Timeline,
}

impl GaussianField {
    /// A field without control points: every timestep renders the rest pose.
    pub fn new_static(
        gaussians: Vec<Gaussian3D>,
        timeline: Timeline,
        shape: &NetShape,
        seed: u64,
    ) -> Self {
        Self {
            gaussians,
            control_points: Vec::new(),
            deformation: DeformationNet::new(shape, seed),
            knn: Vec::new(),
            timeline,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        !self.control_points.is_empty()
    }

    /// Draws `count` control points by farthest point sampling of the Gaussian
    /// positions, assigns each Gaussian its 3 nearest and seeds every RBF
    /// radius from the mean control spacing.
    pub fn attach_controls(&mut self, count: usize, seed_index: usize) -> Result<()> {
        let positions: Vec<Vec3> = self.gaussians.iter().map(|g| g.position).collect();
        let count = count.min(positions.len());
        if count < 3 {
            return Err(invalid("need at least 3 Gaussians to attach controls"));
        }
        let picks = fps_sample(&positions, count, seed_index)?;
        let rest: Vec<Vec3> = picks.iter().map(|&i| positions[i]).collect();
        let spacing = mean_neighbor_distance(&rest);
        self.control_points = rest
            .into_iter()
            .map(|p| ControlPoint {
                rest_position: p,
                rbf_log_radius: spacing.max(1e-6).ln(),
            })
            .collect();
        self.knn = knn_assign(&self.gaussians, &self.control_points)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_dynamic() {
            if self.knn.len() != self.gaussians.len() {
                return Err(invalid("knn assignment count differs from Gaussian count"));
            }
            for (i, k) in self.knn.iter().enumerate() {
                if k.iter().any(|&j| j >= self.control_points.len())
                    || k[0] == k[1]
                    || k[1] == k[2]
                    || k[0] == k[2]
                {
                    return Err(invalid(format!("bad knn entry for Gaussian {i}: {k:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn param_len(&self, group: ParamGroup) -> usize {
        let n = self.gaussians.len();
        match group {
            ParamGroup::Position | ParamGroup::LogScale | ParamGroup::Color => 3 * n,
            ParamGroup::Orientation => 4 * n,
            ParamGroup::OpacityLogit => n,
            ParamGroup::RbfLogRadius => self.control_points.len(),
            ParamGroup::Network => self.deformation.param_count(),
        }
    }

    pub fn param_mut(&mut self, group: ParamGroup, i: usize) -> &mut f64 {
        match group {
            ParamGroup::Position => &mut self.gaussians[i / 3].position[i % 3],
            ParamGroup::Orientation => &mut self.gaussians[i / 4].orientation[i % 4],
            ParamGroup::LogScale => &mut self.gaussians[i / 3].log_scale[i % 3],
            ParamGroup::OpacityLogit => &mut self.gaussians[i].opacity_logit,
            ParamGroup::Color => &mut self.gaussians[i / 3].color[i % 3],
            ParamGroup::RbfLogRadius => &mut self.control_points[i].rbf_log_radius,
            ParamGroup::Network => self.deformation.param_mut(i),
        }
    }

    pub fn param(&self, group: ParamGroup, i: usize) -> f64 {
        match group {
            ParamGroup::Position => self.gaussians[i / 3].position[i % 3],
            ParamGroup::Orientation => self.gaussians[i / 4].orientation[i % 4],
            ParamGroup::LogScale => self.gaussians[i / 3].log_scale[i % 3],
            ParamGroup::OpacityLogit => self.gaussians[i].opacity_logit,
            ParamGroup::Color => self.gaussians[i / 3].color[i % 3],
            ParamGroup::RbfLogRadius => self.control_points[i].rbf_log_radius,
            ParamGroup::Network => {
                let mut idx = i;
                for l in &self.deformation.layers {
                    if idx < l.weights.len() {
                        return l.weights[idx];
                    }
                    idx -= l.weights.len();
                    if idx < l.bias.len() {
                        return l.bias[idx];
                    }
                    idx -= l.bias.len();
                }
                panic!("net parameter index out of range")
            }
        }
    }

    /// Flat copy of one parameter group.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        let g = &self.gaussians;
        match group {
            ParamGroup::Position => g.iter().flat_map(|g| g.position).collect(),
            ParamGroup::Orientation => g.iter().flat_map(|g| g.orientation).collect(),
            ParamGroup::LogScale => g.iter().flat_map(|g| g.log_scale).collect(),
            ParamGroup::OpacityLogit => g.iter().map(|g| g.opacity_logit).collect(),
            ParamGroup::Color => g.iter().flat_map(|g| g.color).collect(),
            ParamGroup::RbfLogRadius => self.control_points.iter().map(|c| c.rbf_log_radius).collect(),
            ParamGroup::Network => self.deformation.params(),
        }
    }

    /// Overwrites one parameter group from a flat slice.
    pub fn set_group_values(&mut self, group: ParamGroup, values: &[f64]) {
        assert_eq!(values.len(), self.param_len(group), "group {} length", group.name());
        match group {
            ParamGroup::Position => {
                for (g, v) in self.gaussians.iter_mut().zip(values.chunks_exact(3)) {
                    g.position.copy_from_slice(v);
                }
            }
            ParamGroup::Orientation => {
                for (g, v) in self.gaussians.iter_mut().zip(values.chunks_exact(4)) {
                    g.orientation.copy_from_slice(v);
                }
            }
            ParamGroup::LogScale => {
                for (g, v) in self.gaussians.iter_mut().zip(values.chunks_exact(3)) {
                    g.log_scale.copy_from_slice(v);
                }
            }
            ParamGroup::OpacityLogit => {
                for (g, v) in self.gaussians.iter_mut().zip(values) {
                    g.opacity_logit = *v;
                }
            }
            ParamGroup::Color => {
                for (g, v) in self.gaussians.iter_mut().zip(values.chunks_exact(3)) {
                    g.color.copy_from_slice(v);
                }
            }
            ParamGroup::RbfLogRadius => {
                for (c, v) in self.control_points.iter_mut().zip(values) {
                    c.rbf_log_radius = *v;
                }
            }
            ParamGroup::Network => self.deformation.for_each_param_mut(|i, p| *p = values[i]),
        }
    }

    /// Rounds every learnable parameter and control rest position to the
    /// nearest `f32`, the precision of the checkpoint container.
    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        for g in &mut self.gaussians {
            g.position.iter_mut().for_each(r);
            g.orientation.iter_mut().for_each(r);
            g.log_scale.iter_mut().for_each(r);
            r(&mut g.opacity_logit);
            g.color.iter_mut().for_each(r);
        }
        for c in &mut self.control_points {
            c.rest_position.iter_mut().for_each(r);
            r(&mut c.rbf_log_radius);
        }
        self.deformation.for_each_param_mut(|_, v| r(v));
    }

    /// Re-normalizes every orientation quaternion.
    pub fn normalize_orientations(&mut self) {
        for g in &mut self.gaussians {
            let n = math::norm4(g.orientation);
            if n > 0.0 && n.is_finite() {
                g.orientation = math::normalize4(g.orientation);
            } else {
                g.orientation = math::QUAT_IDENTITY;
            }
        }
    }
}

fn mean_neighbor_distance(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| math::dist3(*p, *q))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / points.len() as f64
}

/// Learnable parameter groups, each addressed as a flat array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Position,
    Orientation,
    LogScale,
    OpacityLogit,
    Color,
    RbfLogRadius,
    Network,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Position,
        ParamGroup::Orientation,
        ParamGroup::LogScale,
        ParamGroup::OpacityLogit,
        ParamGroup::Color,
        ParamGroup::RbfLogRadius,
        ParamGroup::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Orientation => "orientation",
            ParamGroup::LogScale => "log_scale",
            ParamGroup::OpacityLogit => "opacity_logit",
            ParamGroup::Color => "color",
            ParamGroup::RbfLogRadius => "rbf_log_radius",
            ParamGroup::Network => "network",
        }
    }
}

/// Per-Gaussian gradient of the parameters that the renderer consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: Vec3,
    pub orientation: Quat,
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    pub color: Vec3,
}

impl GaussianGrad {
    pub fn add(&mut self, o: &GaussianGrad) {
        for k in 0..3 {
            self.position[k] += o.position[k];
            self.log_scale[k] += o.log_scale[k];
            self.color[k] += o.color[k];
        }
        for k in 0..4 {
            self.orientation[k] += o.orientation[k];
        }
        self.opacity_logit += o.opacity_logit;
    }
}

/// Gradient of a scalar objective with respect to every field parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrad {
    pub gaussians: Vec<GaussianGrad>,
    pub rbf_log_radius: Vec<f64>,
    pub network: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros(field: &GaussianField) -> Self {
        Self {
            gaussians: vec![GaussianGrad::default(); field.gaussians.len()],
            rbf_log_radius: vec![0.0; field.control_points.len()],
            network: vec![0.0; field.deformation.param_count()],
        }
    }

    pub fn get(&self, group: ParamGroup, i: usize) -> f64 {
        match group {
            ParamGroup::Position => self.gaussians[i / 3].position[i % 3],
            ParamGroup::Orientation => self.gaussians[i / 4].orientation[i % 4],
            ParamGroup::LogScale => self.gaussians[i / 3].log_scale[i % 3],
            ParamGroup::OpacityLogit => self.gaussians[i].opacity_logit,
            ParamGroup::Color => self.gaussians[i / 3].color[i % 3],
            ParamGroup::RbfLogRadius => self.rbf_log_radius[i],
            ParamGroup::Network => self.network[i],
        }
    }

    /// Flat copy of the gradient of one parameter group.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        let g = &self.gaussians;
        match group {
            ParamGroup::Position => g.iter().flat_map(|g| g.position).collect(),
            ParamGroup::Orientation => g.iter().flat_map(|g| g.orientation).collect(),
            ParamGroup::LogScale => g.iter().flat_map(|g| g.log_scale).collect(),
            ParamGroup::OpacityLogit => g.iter().map(|g| g.opacity_logit).collect(),
            ParamGroup::Color => g.iter().flat_map(|g| g.color).collect(),
            ParamGroup::RbfLogRadius => self.rbf_log_radius.clone(),
            ParamGroup::Network => self.network.clone(),
        }
    }

    pub fn add_scaled(&mut self, other: &FieldGrad, s: f64) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            let mut b = *b;
            for k in 0..3 {
                b.position[k] *= s;
                b.log_scale[k] *= s;
                b.color[k] *= s;
            }
            for k in 0..4 {
                b.orientation[k] *= s;
            }
            b.opacity_logit *= s;
            a.add(&b);
        }
        for (a, b) in self.rbf_log_radius.iter_mut().zip(&other.rbf_log_radius) {
            *a += s * b;
        }
        for (a, b) in self.network.iter_mut().zip(&other.network) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians.iter().all(|g| {
            g.position
                .iter()
                .chain(&g.orientation)
                .chain(&g.log_scale)
                .chain(&g.color)
                .all(|v| v.is_finite())
                && g.opacity_logit.is_finite()
        }) && self.rbf_log_radius.iter().all(|v| v.is_finite())
            && self.network.iter().all(|v| v.is_finite())
    }
}
