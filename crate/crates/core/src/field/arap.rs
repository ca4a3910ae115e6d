use super::deform::{motion_backward, ControlMotions, MotionGrad};
use super::{control_motions, knn_points, FieldGrad, GaussianField};
use crate::error::Result;
use crate::math::{add3, dist3, scale3, sub3, Vec3};

/// Undirected k-nearest-neighbour graph over control rest positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArapGraph {
    /// Edges `(j, k)` with `j < k`, sorted and deduplicated.
    pub edges: Vec<(usize, usize)>,
}

pub fn control_graph(rest: &[Vec3], degree: usize) -> ArapGraph {
    let mut edges = Vec::new();
    let k = degree.min(rest.len().saturating_sub(1));
    for (j, p) in rest.iter().enumerate() {
        // the point itself comes back first at distance zero
        for n in knn_points(*p, rest, k + 1) {
            if n != j {
                edges.push((j.min(n), j.max(n)));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    ArapGraph { edges }
}

impl ArapGraph {
    /// Mean absolute change of edge length between two configurations.
    pub fn energy(&self, a: &[Vec3], b: &[Vec3]) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .edges
            .iter()
            .map(|&(j, k)| (dist3(a[j], a[k]) - dist3(b[j], b[k])).abs())
            .sum();
        total / self.edges.len() as f64
    }

    /// Energy and its gradient with respect to both configurations.
    pub fn energy_grad(&self, a: &[Vec3], b: &[Vec3]) -> (f64, Vec<Vec3>, Vec<Vec3>) {
        let mut ga = vec![[0.0; 3]; a.len()];
        let mut gb = vec![[0.0; 3]; b.len()];
        if self.edges.is_empty() {
            return (0.0, ga, gb);
        }
        let inv = 1.0 / self.edges.len() as f64;
        let mut total = 0.0;
        for &(j, k) in &self.edges {
            let da = sub3(a[j], a[k]);
            let db = sub3(b[j], b[k]);
            let la = dist3(a[j], a[k]);
            let lb = dist3(b[j], b[k]);
            let diff = la - lb;
            total += diff.abs();
            let s = if diff > 0.0 {
                inv
            } else if diff < 0.0 {
                -inv
            } else {
                0.0
            };
            if s == 0.0 {
                continue;
            }
            if la > 0.0 {
                let u = scale3(da, s / la);
                ga[j] = add3(ga[j], u);
                ga[k] = sub3(ga[k], u);
            }
            if lb > 0.0 {
                let u = scale3(db, s / lb);
                gb[j] = sub3(gb[j], u);
                gb[k] = add3(gb[k], u);
            }
        }
        (total * inv, ga, gb)
    }
}

fn deformed_controls(field: &GaussianField, cm: &ControlMotions) -> Vec<Vec3> {
    field
        .control_points
        .iter()
        .zip(&cm.motions)
        .map(|(c, m)| add3(c.rest_position, m.translation))
        .collect()
}

/// ARAP energy between two timesteps over the control graph of `degree`.
pub fn arap_energy(field: &GaussianField, ta: usize, tb: usize, degree: usize) -> Result<f64> {
    field.timeline.check(ta)?;
    field.timeline.check(tb)?;
    if !field.is_dynamic() {
        return Ok(0.0);
    }
    let rest: Vec<Vec3> = field.control_points.iter().map(|c| c.rest_position).collect();
    let graph = control_graph(&rest, degree);
    let a = deformed_controls(field, &control_motions(field, ta)?);
    let b = deformed_controls(field, &control_motions(field, tb)?);
    Ok(graph.energy(&a, &b))
}

/// Evaluates the energy on precomputed motions and accumulates
/// `weight · dE/dθ` into `out`.
pub fn arap_energy_with_grad(
    field: &GaussianField,
    graph: &ArapGraph,
    a: &ControlMotions,
    b: &ControlMotions,
    weight: f64,
    out: &mut FieldGrad,
) -> f64 {
    let pa = deformed_controls(field, a);
    let pb = deformed_controls(field, b);
    let (e, ga, gb) = graph.energy_grad(&pa, &pb);
    if weight != 0.0 {
        for (cm, g) in [(a, ga), (b, gb)] {
            let mg: Vec<MotionGrad> = g
                .into_iter()
                .map(|t| MotionGrad {
                    translation: scale3(t, weight),
                    rotation: [0.0; 4],
                })
                .collect();
            motion_backward(field, cm, &mg, out);
        }
    }
    e
}
