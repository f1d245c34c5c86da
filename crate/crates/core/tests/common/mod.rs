//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use fetometry::geometry::BinaryMask;

/// Arc length of the ellipse by adaptive Simpson on
/// ∫₀^{2π} √(a² sin² t + b² cos² t) dt.
pub fn perimeter_quadrature(a: f64, b: f64) -> f64 {
    let f = |t: f64| (a * a * t.sin().powi(2) + b * b * t.cos().powi(2)).sqrt();
    fn simpson(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        let mid = 0.5 * (lo + hi);
        (hi - lo) / 6.0 * (f(lo) + 4.0 * f(mid) + f(hi))
    }
    fn adapt(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let mid = 0.5 * (lo + hi);
        let (l, r) = (simpson(f, lo, mid), simpson(f, mid, hi));
        if depth == 0 || (l + r - whole).abs() <= 15.0 * tol {
            return l + r + (l + r - whole) / 15.0;
        }
        adapt(f, lo, mid, l, tol / 2.0, depth - 1) + adapt(f, mid, hi, r, tol / 2.0, depth - 1)
    }
    // quarter arc × 4 keeps the integrand smooth on each piece
    let q = simpson(&f, 0.0, PI / 2.0);
    4.0 * adapt(&f, 0.0, PI / 2.0, q, 1e-12, 40)
}

/// Pixels whose centres fall inside a `len × breadth` rectangle rotated by
/// `deg` about (24, 24) on a 48 × 48 grid.
pub fn rotated_block(len: f64, breadth: f64, deg: f64) -> BinaryMask {
    let (s, c) = f64::to_radians(deg).sin_cos();
    let mut m = BinaryMask::new(48, 48);
    for y in 0..48 {
        for x in 0..48 {
            let (dx, dy) = (x as f64 - 24.0, y as f64 - 24.0);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if u.abs() <= len / 2.0 && v.abs() <= breadth / 2.0 {
                m.set(x, y, true);
            }
        }
    }
    m
}
