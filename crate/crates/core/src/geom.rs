//! Small fixed-size vector helpers.

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Returns `None` for the zero vector.
pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Some(scale(a, 1.0 / n))
    } else {
        None
    }
}

/// Two unit vectors completing `d` (unit) to a right-handed orthonormal basis.
pub fn orthonormal_basis(d: Vec3) -> (Vec3, Vec3) {
    let helper = if d[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = normalize(cross(d, helper)).expect("helper is not parallel to d");
    let v = cross(d, u);
    (u, v)
}

/// Unit direction on the image sphere: polar axis along +x, azimuth measured
/// from +y toward +z.
pub fn direction_from_angles(phi: f64, cospolar: f64) -> Vec3 {
    let s = (1.0 - cospolar * cospolar).max(0.0).sqrt();
    [cospolar, s * phi.cos(), s * phi.sin()]
}

/// Inverse of [`direction_from_angles`]; azimuth in `[-pi, pi]`.
pub fn angles_from_direction(omega: Vec3) -> (f64, f64) {
    let c = omega[0].clamp(-1.0, 1.0);
    let phi = omega[2].atan2(omega[1]);
    (phi, c)
}

/// Great-circle angle between two unit vectors.
pub fn angle_between(a: Vec3, b: Vec3) -> f64 {
    norm(cross(a, b)).atan2(dot(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal() {
        for d in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.3, -0.4, 0.866]] {
            let d = normalize(d).unwrap();
            let (u, v) = orthonormal_basis(d);
            assert!((norm(u) - 1.0).abs() < 1e-12);
            assert!((norm(v) - 1.0).abs() < 1e-12);
            assert!(dot(u, d).abs() < 1e-12);
            assert!(dot(v, d).abs() < 1e-12);
            assert!(dot(u, v).abs() < 1e-12);
        }
    }

    #[test]
    fn angle_roundtrip() {
        let w = direction_from_angles(1.1, -0.3);
        let (phi, c) = angles_from_direction(w);
        assert!((phi - 1.1).abs() < 1e-12);
        assert!((c + 0.3).abs() < 1e-12);
    }
}
