use super::{ControlPoint, Gaussian3D};
use crate::error::{invalid, Result};
use crate::math::{dist2_3, Vec3};

/// Greedy farthest point sampling starting from `seed_index`.
///
/// Each pick maximizes the minimum squared distance to the points already
/// chosen; ties go to the lowest index.
pub fn fps_sample(points: &[Vec3], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(invalid("fps_sample: empty point set"));
    }
    if k > points.len() {
        return Err(invalid(format!(
            "fps_sample: k={k} exceeds {} points",
            points.len()
        )));
    }
    if seed_index >= points.len() {
        return Err(invalid(format!("fps_sample: seed index {seed_index} out of range")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut picks = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = seed_index;
    loop {
        picks.push(current);
        taken[current] = true;
        if picks.len() == k {
            break;
        }
        let c = points[current];
        let mut best = None::<(usize, f64)>;
        for (i, p) in points.iter().enumerate() {
            let d = dist2_3(*p, c);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if taken[i] {
                continue;
            }
            match best {
                Some((_, bd)) if min_d2[i] <= bd => {}
                _ => best = Some((i, min_d2[i])),
            }
        }
        current = best.expect("k <= len guarantees a candidate").0;
    }
    Ok(picks)
}

/// Indices of the `k` nearest `targets` to `query`, by ascending distance and
/// then ascending index.
pub fn knn_points(query: Vec3, targets: &[Vec3], k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (j, t) in targets.iter().enumerate() {
        let d = dist2_3(query, *t);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, bi)| bd < d || (bd == d && bi < j));
        best.insert(pos, (d, j));
        best.truncate(k);
    }
    best.into_iter().map(|(_, j)| j).collect()
}

pub fn knn_assign(
    gaussians: &[Gaussian3D],
    control_points: &[ControlPoint],
) -> Result<Vec<[usize; 3]>> {
    if control_points.len() < 3 {
        return Err(invalid(format!(
            "knn_assign: need at least 3 control points, got {}",
            control_points.len()
        )));
    }
    let rest: Vec<Vec3> = control_points.iter().map(|c| c.rest_position).collect();
    Ok(gaussians
        .iter()
        .map(|g| {
            let n = knn_points(g.position, &rest, 3);
            [n[0], n[1], n[2]]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::QUAT_IDENTITY;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Exhaustive greedy oracle: at every step scan all candidates and all
    /// chosen points from scratch.
    fn fps_oracle(points: &[Vec3], k: usize, seed: usize) -> Vec<usize> {
        let mut chosen = vec![seed];
        while chosen.len() < k {
            let mut best = (usize::MAX, -1.0);
            for i in 0..points.len() {
                if chosen.contains(&i) {
                    continue;
                }
                let m = chosen
                    .iter()
                    .map(|&c| dist2_3(points[i], points[c]))
                    .fold(f64::INFINITY, f64::min);
                if m > best.1 {
                    best = (i, m);
                }
            }
            chosen.push(best.0);
        }
        chosen
    }

    fn gaussian_at(p: Vec3) -> Gaussian3D {
        Gaussian3D {
            position: p,
            orientation: QUAT_IDENTITY,
            log_scale: [0.0; 3],
            opacity_logit: 0.0,
            color: [0.5; 3],
        }
    }

    fn control_at(p: Vec3) -> ControlPoint {
        ControlPoint {
            rest_position: p,
            rbf_log_radius: 0.0,
        }
    }

    #[test]
    fn fps_line_example() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(fps_sample(&pts, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(fps_sample(&pts, 1, 2).unwrap(), vec![2]);
        let mut all = fps_sample(&pts, 4, 0).unwrap();
        assert_eq!(all, fps_oracle(&pts, 4, 0));
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_rejects_bad_arguments() {
        assert!(fps_sample(&[], 1, 0).is_err());
        assert!(fps_sample(&[[0.0; 3]], 2, 0).is_err());
    }

    #[test]
    fn knn_orders_by_distance_then_index() {
        let g = [gaussian_at([0.0; 3])];
        let c: Vec<_> = [4.0, 2.0, 1.0, 3.0]
            .iter()
            .map(|&d| control_at([d, 0.0, 0.0]))
            .collect();
        assert_eq!(knn_assign(&g, &c).unwrap(), vec![[2, 1, 3]]);
        let tie: Vec<_> = [[0.0, 2.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]
            .iter()
            .map(|&p| control_at(p))
            .collect();
        assert_eq!(knn_assign(&g, &tie).unwrap(), vec![[1, 2, 0]]);
        assert!(knn_assign(&g, &c[..2]).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut rp = || [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let gs: Vec<_> = (0..100).map(|_| gaussian_at(rp())).collect();
        let cs: Vec<_> = (0..40).map(|_| control_at(rp())).collect();
        let got = knn_assign(&gs, &cs).unwrap();
        for (g, k) in gs.iter().zip(got) {
            let mut order: Vec<usize> = (0..cs.len()).collect();
            order.sort_by(|&a, &b| {
                dist2_3(g.position, cs[a].rest_position)
                    .partial_cmp(&dist2_3(g.position, cs[b].rest_position))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            assert_eq!(k.to_vec(), order[..3].to_vec());
        }
    }

    proptest! {
        #[test]
        fn fps_matches_greedy_oracle(
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..200),
            frac in 0.0f64..1.0,
            seed_frac in 0.0f64..1.0,
        ) {
            let k = 1 + ((pts.len() - 1) as f64 * frac) as usize;
            let seed = ((pts.len() - 1) as f64 * seed_frac) as usize;
            let got = fps_sample(&pts, k, seed).unwrap();
            prop_assert_eq!(got, fps_oracle(&pts, k, seed));
        }
    }
}
