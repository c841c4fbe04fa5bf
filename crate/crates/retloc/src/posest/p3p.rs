//! Minimal three-point pose solver.
//!
//! Classic distance-based formulation: for three reference points `P1..P3`
//! and unit bearing vectors `f1..f3` out of the query camera, the law of
//! cosines gives three equations in the point depths `s1..s3`:
//!
//! ```text
//! s2^2 + s3^2 - 2 s2 s3 cos(a23) = |P2 - P3|^2
//! s1^2 + s3^2 - 2 s1 s3 cos(a13) = |P1 - P3|^2
//! s1^2 + s2^2 - 2 s1 s2 cos(a12) = |P1 - P2|^2
//! ```
//!
//! Substituting `s2 = u s1`, `s3 = v s1` and eliminating `u` leaves a
//! quartic in `v`. Rather than transcribing the expanded coefficients, the
//! quartic is assembled here with a tiny polynomial type straight from the
//! defining equations — less efficient by nanoseconds, immune to sign
//! typos. Roots come from the companion matrix, polished by Newton steps;
//! each admissible root yields camera-frame points `s_i * f_i`, and a
//! three-point Kabsch alignment recovers the rigid transform.

use crate::geometry::RigidTransform3;
use nalgebra::{DMatrix, Matrix3, Vector3};

/// Dense univariate polynomial, coefficients in ascending degree order.
#[derive(Clone, Debug)]
struct Poly(Vec<f64>);

impl Poly {
    fn new(coeffs: &[f64]) -> Self {
        Poly(coeffs.to_vec())
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = vec![0.0; self.0.len() + other.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in other.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly(out)
    }

    fn add_scaled(&self, other: &Poly, s: f64) -> Poly {
        let mut out = vec![0.0; self.0.len().max(other.0.len())];
        for (i, a) in self.0.iter().enumerate() {
            out[i] += a;
        }
        for (i, b) in other.0.iter().enumerate() {
            out[i] += s * b;
        }
        Poly(out)
    }

    fn scale(&self, s: f64) -> Poly {
        Poly(self.0.iter().map(|c| c * s).collect())
    }

    fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    fn deriv(&self) -> Poly {
        if self.0.len() <= 1 {
            return Poly(vec![0.0]);
        }
        Poly(
            self.0[1..]
                .iter()
                .enumerate()
                .map(|(i, c)| (i + 1) as f64 * c)
                .collect(),
        )
    }

    /// Real roots via the companion matrix of the trimmed polynomial,
    /// refined by a few Newton iterations.
    fn real_roots(&self) -> Vec<f64> {
        let max_c = self.0.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if max_c == 0.0 {
            return Vec::new();
        }
        // Trim negligible leading coefficients so near-degenerate quartics
        // fall back to the cubic/quadratic they effectively are.
        let mut coeffs = self.0.clone();
        while coeffs.len() > 1 && coeffs.last().unwrap().abs() < 1e-13 * max_c {
            coeffs.pop();
        }
        let deg = coeffs.len() - 1;
        if deg == 0 {
            return Vec::new();
        }
        let lead = coeffs[deg];
        let mut companion = DMatrix::zeros(deg, deg);
        for i in 1..deg {
            companion[(i, i - 1)] = 1.0;
        }
        for i in 0..deg {
            companion[(i, deg - 1)] = -coeffs[i] / lead;
        }
        let eig = companion.complex_eigenvalues();

        let deriv = self.deriv();
        let mut roots = Vec::new();
        for e in eig.iter() {
            if e.im.abs() > 1e-6 * (1.0 + e.re.abs()) {
                continue;
            }
            let mut r = e.re;
            for _ in 0..3 {
                let d = deriv.eval(r);
                if d.abs() < 1e-300 {
                    break;
                }
                r -= self.eval(r) / d;
            }
            if roots.iter().all(|&q: &f64| (q - r).abs() > 1e-9 * (1.0 + r.abs())) {
                roots.push(r);
            }
        }
        roots
    }
}

/// Best rigid transform `q ~= R p + t` for exactly corresponding point sets
/// (Kabsch). Returns `None` when the cross-covariance is too degenerate to
/// fix a rotation (collinear points).
fn kabsch(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Option<RigidTransform3> {
    let n = p.len() as f64;
    let pc = p.iter().sum::<Vector3<f64>>() / n;
    let qc = q.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (pi, qi) in p.iter().zip(q.iter()) {
        h += (pi - pc) * (qi - qc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    // Rank must be at least 2 for the rotation to be determined.
    if svd.singular_values[1] <= 1e-12 * svd.singular_values[0].max(1e-300) {
        return None;
    }
    let d = (v_t.transpose() * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let r = v_t.transpose() * correction * u.transpose();
    let t = qc - r * pc;
    Some(RigidTransform3::new_unchecked(r, t))
}

/// All rigid transforms `T` (reference frame → camera frame) consistent
/// with observing `points[i]` along unit bearing `bearings[i]`, for three
/// correspondences. Up to four solutions; degenerate inputs yield none.
pub(crate) fn solve(points: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<RigidTransform3> {
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    if a2 == 0.0 || b2 == 0.0 || c2 == 0.0 {
        return Vec::new();
    }
    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_c = bearings[0].dot(&bearings[1]);
    // Coincident bearings cannot triangulate depth.
    if cos_a.abs() > 1.0 - 1e-12 || cos_b.abs() > 1.0 - 1e-12 || cos_c.abs() > 1.0 - 1e-12 {
        return Vec::new();
    }

    // q(v) = 1 + v^2 - 2 cos_b v  (so that s1^2 q(v) = b^2).
    let q = Poly::new(&[1.0, -2.0 * cos_b, 1.0]);
    // u = P(v) / Q(v), from subtracting the pairwise ratio equations.
    let p_num = Poly::new(&[b2, 0.0, -b2]).add_scaled(&q, a2 - c2);
    let q_den = Poly::new(&[2.0 * b2 * cos_c, -2.0 * b2 * cos_a]);
    // Substituted into u^2 - 2 u cos_c + 1 - (c^2/b^2) q(v) = 0, scaled by
    // b^2 Q(v)^2:
    let quartic = p_num
        .mul(&p_num)
        .scale(b2)
        .add_scaled(&p_num.mul(&q_den), -2.0 * cos_c * b2)
        .add_scaled(&q_den.mul(&q_den).mul(&q.scale(-c2).add_scaled(&Poly::new(&[b2]), 1.0)), 1.0);

    let mut solutions = Vec::new();
    for v in quartic.real_roots() {
        if !(v > 0.0) || !v.is_finite() {
            continue;
        }
        let qv = q.eval(v);
        if qv <= 0.0 {
            continue;
        }
        let den = q_den.eval(v);
        if den.abs() < 1e-12 * b2 {
            continue;
        }
        let u = p_num.eval(v) / den;
        if !(u > 0.0) || !u.is_finite() {
            continue;
        }
        let s1 = (b2 / qv).sqrt();
        let depths = [s1, u * s1, v * s1];
        let cam_points: Vec<Vector3<f64>> = bearings
            .iter()
            .zip(depths.iter())
            .map(|(f, &s)| f * s)
            .collect();
        if let Some(t) = kabsch(&points[..], &cam_points) {
            solutions.push(t);
        }
    }
    solutions
}
