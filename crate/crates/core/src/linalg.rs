//! The handful of 2×2 matrix operations the estimator needs.

pub type Mat2 = [[f64; 2]; 2];

pub fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn inverse(m: &Mat2) -> Option<Mat2> {
    let d = det(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    Some([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]])
}

pub fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn transpose(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

pub fn mul_vec(a: &Mat2, v: &[f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

pub fn scale(a: &Mat2, c: f64) -> Mat2 {
    [[a[0][0] * c, a[0][1] * c], [a[1][0] * c, a[1][1] * c]]
}

pub fn symmetrize(a: &Mat2) -> Mat2 {
    let off = 0.5 * (a[0][1] + a[1][0]);
    [[a[0][0], off], [off, a[1][1]]]
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(a: &Mat2) -> [f64; 2] {
    let s = symmetrize(a);
    let mean = 0.5 * (s[0][0] + s[1][1]);
    let half = 0.5 * (s[0][0] - s[1][1]);
    let r = half.hypot(s[0][1]);
    [mean - r, mean + r]
}

/// Frobenius norm of a − b relative to that of b.
pub fn rel_frobenius(a: &Mat2, b: &Mat2) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            num += (a[i][j] - b[i][j]).powi(2);
            den += b[i][j].powi(2);
        }
    }
    (num / den).sqrt()
}

/// Lower Cholesky factor of a symmetric positive semi-definite matrix.
pub fn cholesky(a: &Mat2) -> Option<Mat2> {
    if a[0][0] < 0.0 {
        return None;
    }
    let l00 = a[0][0].sqrt();
    let l10 = if l00 > 0.0 { a[1][0] / l00 } else { 0.0 };
    let d = a[1][1] - l10 * l10;
    if d < -1e-12 * a[1][1].abs().max(f64::MIN_POSITIVE) {
        return None;
    }
    Some([[l00, 0.0], [l10, d.max(0.0).sqrt()]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_eigen() {
        let a = [[4.0, 1.0], [1.0, 3.0]];
        let inv = inverse(&a).unwrap();
        let id = mul(&a, &inv);
        assert!(rel_frobenius(&id, &[[1.0, 0.0], [0.0, 1.0]]) < 1e-15);
        let e = sym_eigenvalues(&a);
        assert!((e[0] * e[1] - det(&a)).abs() < 1e-12);
        assert!((e[0] + e[1] - 7.0).abs() < 1e-12);
        let l = cholesky(&a).unwrap();
        assert!(rel_frobenius(&mul(&l, &transpose(&l)), &a) < 1e-15);
        assert!(inverse(&[[1.0, 2.0], [2.0, 4.0]]).is_none());
    }
}
