//! Small fixed-size helpers shared by the field, renderer and losses.
//!
//! Quaternions are stored as `[w, x, y, z]`. Every forward helper that sits on
//! a differentiated path has a matching `*_vjp` that maps an output cotangent
//! back to its inputs.

pub type Vec3 = [f64; 3];
pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn dist3(a: Vec3, b: Vec3) -> f64 {
    norm3(sub3(a, b))
}

#[inline]
pub fn dist2_3(a: Vec3, b: Vec3) -> f64 {
    let d = sub3(a, b);
    dot3(d, d)
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn dot4(a: Quat, b: Quat) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

#[inline]
pub fn norm4(a: Quat) -> f64 {
    dot4(a, a).sqrt()
}

pub fn normalize4(q: Quat) -> Quat {
    let n = norm4(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Cotangent of `q / |q|` pulled back to `q`.
pub fn normalize4_vjp(q: Quat, g: Quat) -> Quat {
    let n = norm4(q);
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let p = dot4(u, g);
    [
        (g[0] - u[0] * p) / n,
        (g[1] - u[1] * p) / n,
        (g[2] - u[2] * p) / n,
        (g[3] - u[3] * p) / n,
    ]
}

pub fn normalize3(v: Vec3) -> Vec3 {
    scale3(v, 1.0 / norm3(v))
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Returns `(dL/da, dL/db)` for `c = a ⊗ b` given `g = dL/dc`.
pub fn quat_mul_vjp(a: Quat, b: Quat, g: Quat) -> (Quat, Quat) {
    // c is bilinear; each row of the product is a signed dot product.
    let ga = [
        g[0] * b[0] + g[1] * b[1] + g[2] * b[2] + g[3] * b[3],
        -g[0] * b[1] + g[1] * b[0] - g[2] * b[3] + g[3] * b[2],
        -g[0] * b[2] + g[1] * b[3] + g[2] * b[0] - g[3] * b[1],
        -g[0] * b[3] - g[1] * b[2] + g[2] * b[1] + g[3] * b[0],
    ];
    let gb = [
        g[0] * a[0] + g[1] * a[1] + g[2] * a[2] + g[3] * a[3],
        -g[0] * a[1] + g[1] * a[0] + g[2] * a[3] - g[3] * a[2],
        -g[0] * a[2] - g[1] * a[3] + g[2] * a[0] + g[3] * a[1],
        -g[0] * a[3] + g[1] * a[2] - g[2] * a[1] + g[3] * a[0],
    ];
    (ga, gb)
}

pub type Mat3 = [[f64; 3]; 3];

/// Rotation matrix of a unit quaternion (row-major).
pub fn quat_to_mat(q: Quat) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Pulls `G = dL/dR` back through [`quat_to_mat`] (the polynomial form, no
/// normalization).
pub fn quat_to_mat_vjp(q: Quat, g: &Mat3) -> Quat {
    let [w, x, y, z] = q;
    let gw = 2.0
        * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let gy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
            - w * g[2][0]
            + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let gz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    [gw, gx, gy, gz]
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

/// Rotation by `angle` radians about a unit `axis`.
pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> Quat {
    let a = normalize3(axis);
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a[0] * s, a[1] * s, a[2] * s]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_quat<F: Fn(Quat) -> f64>(f: F, q: Quat) -> Quat {
        let h = 1e-6;
        let mut g = [0.0; 4];
        for i in 0..4 {
            let mut a = q;
            let mut b = q;
            a[i] += h;
            b[i] -= h;
            g[i] = (f(a) - f(b)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let q = normalize4([0.3, -0.5, 0.7, 0.2]);
        let r = quat_to_mat(q);
        let rtr = mat_mul(&transpose(&r), &r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn axis_angle_quarter_turn_about_z() {
        let q = quat_from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let p = mat_vec(&quat_to_mat(q), [1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mat_vjp_matches_finite_differences() {
        let q = [0.4, -0.2, 0.6, 0.3];
        let g = [[0.1, -0.7, 0.2], [0.5, 0.3, -0.4], [-0.6, 0.9, 0.8]];
        let f = |q: Quat| {
            let r = quat_to_mat(q);
            (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| r[i][j] * g[i][j])
                .sum::<f64>()
        };
        let a = quat_to_mat_vjp(q, &g);
        let n = fd_quat(f, q);
        for i in 0..4 {
            assert!((a[i] - n[i]).abs() < 1e-7, "{a:?} vs {n:?}");
        }
    }

    #[test]
    fn mul_and_normalize_vjps_match_finite_differences() {
        let a = [0.4, -0.2, 0.6, 0.3];
        let b = [-0.1, 0.8, 0.25, -0.5];
        let g = [0.3, -0.9, 0.4, 0.7];
        let (ga, gb) = quat_mul_vjp(a, b, g);
        let na = fd_quat(|x| dot4(quat_mul(x, b), g), a);
        let nb = fd_quat(|x| dot4(quat_mul(a, x), g), b);
        let gn = normalize4_vjp(a, g);
        let nn = fd_quat(|x| dot4(normalize4(x), g), a);
        for i in 0..4 {
            assert!((ga[i] - na[i]).abs() < 1e-7);
            assert!((gb[i] - nb[i]).abs() < 1e-7);
            assert!((gn[i] - nn[i]).abs() < 1e-7);
        }
    }
}

/// Shortest-arc rotation taking unit `a` to unit `b`.
pub fn rotation_between(a: Vec3, b: Vec3) -> Quat {
    let c = dot3(a, b);
    if c > 1.0 - 1e-12 {
        return QUAT_IDENTITY;
    }
    if c < -1.0 + 1e-12 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    quat_from_axis_angle(normalize3(cross3(a, b)), c.clamp(-1.0, 1.0).acos())
}
