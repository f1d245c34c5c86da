use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use super::morphology::{boundary_edge_points, dilate, fill_holes, largest_component, Connectivity};
use super::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseParams {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major axis.
    pub a: f64,
    /// Semi-minor axis.
    pub b: f64,
    /// Major-axis angle from the x axis, in `[0, π)`.
    pub theta: f64,
}

impl EllipseParams {
    /// Normalizes so that `a ≥ b` and `theta ∈ [0, π)`.
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::invalid(format!(
                "ellipse axes must be positive, got a={a}, b={b}"
            )));
        }
        let (a, b, theta) = if a >= b {
            (a, b, theta)
        } else {
            (b, a, theta + PI / 2.0)
        };
        Ok(EllipseParams {
            cx,
            cy,
            a,
            b,
            theta: wrap_pi(theta),
        })
    }

    pub fn point_at(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (u, v) = (self.a * t.cos(), self.b * t.sin());
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    /// Value of `(x'/a)² + (y'/b)²` in the ellipse frame; ≤ 1 inside.
    pub fn implicit(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

pub(crate) fn wrap_pi(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

/// Ramanujan's second approximation of the perimeter.
pub fn ellipse_circumference(e: &EllipseParams) -> Result<f64> {
    let (a, b) = (e.a, e.b);
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::invalid(format!(
            "ellipse axes must be positive, got a={a}, b={b}"
        )));
    }
    let h = ((a - b) / (a + b)).powi(2);
    Ok(PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt())))
}

/// Direct least-squares ellipse fit (numerically stable variant, on
/// centred and scaled coordinates).
pub fn fit_ellipse(points: &[(f64, f64)]) -> Result<EllipseParams> {
    if points.len() < 6 {
        return Err(Error::Fit(format!(
            "ellipse fit needs at least 6 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let scale = (points
        .iter()
        .map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Fit("degenerate point scatter".into()));
    }

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    let mut cov = nalgebra::Matrix2::<f64>::zeros();
    for &(px, py) in points {
        let (x, y) = ((px - mx) / scale, (py - my) / scale);
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
        cov += nalgebra::Vector2::new(x, y) * nalgebra::Vector2::new(x, y).transpose();
    }
    // unit-scaled coordinates: trace(cov)/n == 1, so this is a relative test
    let cov_eig = cov.symmetric_eigenvalues();
    if cov_eig.min() / n < 1e-10 {
        return Err(Error::Fit("points are collinear".into()));
    }
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| Error::Fit("rank-deficient design matrix".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // C1⁻¹ · M with C1 = [[0,0,2],[0,-1,0],[2,0,0]]
    let reduced = Matrix3::from_rows(&[m.row(2) / 2.0, -m.row(1), m.row(0) / 2.0]);

    let scale_m = reduced.abs().max().max(f64::MIN_POSITIVE);
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in reduced.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-9 * scale_m {
            continue;
        }
        let shifted = reduced - Matrix3::identity() * lambda.re;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let k = svd.singular_values.imin();
        let v: Vector3<f64> = v_t.row(k).transpose();
        let cond = (4.0 * v[0] * v[2] - v[1] * v[1]) / v.norm_squared();
        if cond > 0.0 && best.as_ref().is_none_or(|(c, _)| cond > *c) {
            best = Some((cond, v));
        }
    }
    let (_, a1) = best.ok_or_else(|| Error::Fit("no elliptical solution of the conic fit".into()))?;
    // Data lying on a hyperbola or parabola: the unconstrained algebraic fit
    // is non-elliptic and explains the points far better than any ellipse.
    let free = m.symmetric_eigen();
    let k = free.eigenvalues.imin();
    let v = free.eigenvectors.column(k);
    let residual = |a: &Vector3<f64>| (a.transpose() * m * a)[0] / a.norm_squared();
    if 4.0 * v[0] * v[2] - v[1] * v[1] <= 0.0 && residual(&a1) > 100.0 * free.eigenvalues[k].max(0.0) + 1e-9 * n {
        return Err(Error::Fit("points follow a non-elliptic conic".into()));
    }
    let a2 = t * a1;
    let conic = [a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]];
    let e = conic_to_params(conic)?;
    EllipseParams::new(mx + scale * e.cx, my + scale * e.cy, scale * e.a, scale * e.b, e.theta)
}

/// Converts `A x² + B xy + C y² + D x + E y + F = 0` to geometric form.
fn conic_to_params(c: [f64; 6]) -> Result<EllipseParams> {
    let [a, b, cc, d, e, f] = c;
    let det = 4.0 * a * cc - b * b;
    if !(det > 0.0) {
        return Err(Error::Fit("conic is not an ellipse".into()));
    }
    let x0 = (b * e - 2.0 * cc * d) / det;
    let y0 = (b * d - 2.0 * a * e) / det;
    let f0 = f + 0.5 * (d * x0 + e * y0);
    // Sign-normalize so the quadratic form is positive definite and f0 < 0.
    let sign = if a + cc > 0.0 { 1.0 } else { -1.0 };
    let (a, b, cc, f0) = (a * sign, b * sign, cc * sign, f0 * sign);
    if !(f0 < 0.0) {
        return Err(Error::Fit("imaginary ellipse".into()));
    }
    let mid = 0.5 * (a + cc);
    let r = (0.25 * (a - cc).powi(2) + 0.25 * b * b).sqrt();
    let (l_small, l_big) = (mid - r, mid + r);
    if !(l_small > 0.0) {
        return Err(Error::Fit("conic is not an ellipse".into()));
    }
    let major = (-f0 / l_small).sqrt();
    let minor = (-f0 / l_big).sqrt();
    let theta = if r <= 1e-14 * mid {
        0.0
    } else {
        0.5 * b.atan2(a - cc) + PI / 2.0
    };
    EllipseParams::new(x0, y0, major, minor, theta)
}

/// Ellipse with the same second moments as the set pixels of `mask`
/// (semi-axes `2√λ` of the pixel covariance).
pub fn fit_ellipse_moments(mask: &BinaryMask) -> Result<EllipseParams> {
    let pts = mask.points();
    if pts.len() < 3 {
        return Err(Error::Fit(format!(
            "moment fit needs at least 3 pixels, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pts {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let (sxx, sxy, syy) = (sxx / n, sxy / n, syy / n);
    let mid = 0.5 * (sxx + syy);
    let r = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let (l1, l2) = (mid + r, mid - r);
    if !(l2 > 0.0) {
        return Err(Error::Fit("region has no extent along one axis".into()));
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    EllipseParams::new(mx, my, 2.0 * l1.sqrt(), 2.0 * l2.sqrt(), theta)
}

/// Mask-to-ellipse pipeline used for biometry: keep the largest component,
/// fill interior holes, fit the outline; fall back to a moment fit when the
/// conic fit fails.
pub fn fit_ellipse_mask(mask: &BinaryMask) -> Result<EllipseParams> {
    let region = fill_holes(&largest_component(mask, Connectivity::Eight));
    if region.is_empty() {
        return Err(Error::Fit("mask is empty".into()));
    }
    fit_ellipse(&boundary_edge_points(&region)).or_else(|_| fit_ellipse_moments(&region))
}

/// Recovers an ellipse from a broken (dashed) outline: dilation links the
/// dashes, the largest linked group is kept, and the ellipse is fitted to
/// the original outline pixels of that group. Fitting the dilated band's
/// contour instead would mix its inner and outer edges and bias the axes.
pub fn fit_dashed_outline(outline: &BinaryMask, se_radius: usize) -> Result<EllipseParams> {
    let group = largest_component(&dilate(outline, se_radius), Connectivity::Eight);
    let pts: Vec<(f64, f64)> = outline
        .points()
        .into_iter()
        .filter(|&(x, y)| group.get(x, y))
        .map(|(x, y)| (x as f64, y as f64))
        .collect();
    fit_ellipse(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(e: &EllipseParams, n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| e.point_at(2.0 * PI * i as f64 / n as f64)).collect()
    }

    #[test]
    fn exact_circle() {
        let c = EllipseParams::new(32.0, 32.0, 10.0, 10.0, 0.0).unwrap();
        let f = fit_ellipse(&sample(&c, 40)).unwrap();
        assert!((f.cx - 32.0).abs() < 1e-6 && (f.cy - 32.0).abs() < 1e-6);
        assert!((f.a - 10.0).abs() < 1e-6 && (f.b - 10.0).abs() < 1e-6);
    }

    #[test]
    fn exact_rotated_ellipse() {
        let e = EllipseParams::new(32.0, 32.0, 20.0, 12.0, 30f64.to_radians()).unwrap();
        let f = fit_ellipse(&sample(&e, 100)).unwrap();
        assert!((f.cx - e.cx).abs() < 1e-6 && (f.cy - e.cy).abs() < 1e-6);
        assert!((f.a - e.a).abs() < 1e-6 && (f.b - e.b).abs() < 1e-6);
        assert!((f.theta - e.theta).abs() < 1e-6);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_ellipse(&[(0.0, 0.0); 5]), Err(Error::Fit(_))));
        let line: Vec<_> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(fit_ellipse(&line), Err(Error::Fit(_))));
        // points on a hyperbola x·y = 1
        let hyp: Vec<_> = [0.5, 1.0, 2.0, 3.0, -0.5, -1.0, -2.0, -4.0]
            .iter()
            .map(|&x| (x, 1.0 / x))
            .collect();
        assert!(fit_ellipse(&hyp).is_err());
    }

    #[test]
    fn circumference_values() {
        let circle = EllipseParams::new(0.0, 0.0, 10.0, 10.0, 0.0).unwrap();
        assert!((ellipse_circumference(&circle).unwrap() - 20.0 * PI).abs() < 1e-12);
        let e = EllipseParams::new(0.0, 0.0, 2.0, 1.0, 0.0).unwrap();
        assert!((ellipse_circumference(&e).unwrap() - 9.68845).abs() < 1e-4);
        let e = EllipseParams::new(0.0, 0.0, 5.0, 3.0, 0.0).unwrap();
        assert!((ellipse_circumference(&e).unwrap() - 25.52699).abs() < 1e-4);
        let bad = EllipseParams { a: -1.0, ..e };
        assert!(ellipse_circumference(&bad).is_err());
    }

    #[test]
    fn params_normalized() {
        let e = EllipseParams::new(0.0, 0.0, 3.0, 5.0, 0.0).unwrap();
        assert_eq!((e.a, e.b), (5.0, 3.0));
        assert!((e.theta - PI / 2.0).abs() < 1e-15);
        let e = EllipseParams::new(0.0, 0.0, 5.0, 3.0, -0.25).unwrap();
        assert!((e.theta - (PI - 0.25)).abs() < 1e-15);
        assert!(EllipseParams::new(0.0, 0.0, 0.0, 3.0, 0.0).is_err());
    }

    #[test]
    fn moments_of_filled_disc() {
        let mut m = BinaryMask::new(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                if ((x as f64 - 32.0).powi(2) / 400.0 + (y as f64 - 30.0).powi(2) / 100.0) <= 1.0 {
                    m.set(x, y, true);
                }
            }
        }
        let e = fit_ellipse_moments(&m).unwrap();
        assert!((e.a - 20.0).abs() < 0.5 && (e.b - 10.0).abs() < 0.5);
        assert!(e.theta.min(PI - e.theta) < 1e-9);
    }
}
