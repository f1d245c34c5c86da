use super::ellipse::wrap_pi;
use super::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectParams {
    pub center: (f64, f64),
    /// Longer side.
    pub length: f64,
    /// Shorter side.
    pub breadth: f64,
    /// Direction of the long side, in `[0, π)`.
    pub angle: f64,
}

impl RectParams {
    pub fn area(&self) -> f64 {
        self.length * self.breadth
    }

    /// Endpoints of the long centre line.
    pub fn axis_endpoints(&self) -> ((f64, f64), (f64, f64)) {
        let (s, c) = self.angle.sin_cos();
        let h = self.length / 2.0;
        let (cx, cy) = self.center;
        ((cx - h * c, cy - h * s), (cx + h * c, cy + h * s))
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull by Andrew's monotone chain; collinear
/// points are dropped.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Enclosing rectangle of `points` with one side at angle `phi`.
pub fn enclosing_rect_at(points: &[(f64, f64)], phi: f64) -> RectParams {
    let (s, c) = phi.sin_cos();
    let (mut u_lo, mut u_hi, mut v_lo, mut v_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        let u = x * c + y * s;
        let v = -x * s + y * c;
        u_lo = u_lo.min(u);
        u_hi = u_hi.max(u);
        v_lo = v_lo.min(v);
        v_hi = v_hi.max(v);
    }
    let (um, vm) = (0.5 * (u_lo + u_hi), 0.5 * (v_lo + v_hi));
    let center = (um * c - vm * s, um * s + vm * c);
    let (du, dv) = (u_hi - u_lo, v_hi - v_lo);
    if du >= dv {
        RectParams {
            center,
            length: du,
            breadth: dv,
            angle: wrap_pi(phi),
        }
    } else {
        RectParams {
            center,
            length: dv,
            breadth: du,
            angle: wrap_pi(phi + std::f64::consts::FRAC_PI_2),
        }
    }
}

/// Minimum-area rectangle around a point set: one side is flush with a hull
/// edge, so only hull edge orientations are tried.
pub fn min_area_rect(points: &[(f64, f64)]) -> Result<RectParams> {
    if points.is_empty() {
        return Err(Error::invalid("cannot fit a rectangle to an empty point set"));
    }
    let hull = convex_hull(points);
    if hull.len() == 1 {
        return Ok(RectParams {
            center: hull[0],
            length: 0.0,
            breadth: 0.0,
            angle: 0.0,
        });
    }
    let mut candidates: Vec<f64> = (0..hull.len())
        .map(|i| {
            let (p, q) = (hull[i], hull[(i + 1) % hull.len()]);
            wrap_pi((q.1 - p.1).atan2(q.0 - p.0)).rem_euclid(std::f64::consts::FRAC_PI_2)
        })
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<RectParams> = None;
    for phi in candidates {
        let r = enclosing_rect_at(&hull, phi);
        let better = match &best {
            None => true,
            Some(b) => {
                let tol = 1e-9 * b.area().max(b.length).max(1.0);
                r.area() < b.area() - tol || (r.area() <= b.area() + tol && r.angle < b.angle - 1e-12)
            }
        };
        if better {
            best = Some(r);
        }
    }
    Ok(best.expect("non-empty hull"))
}

/// Minimum-area rectangle around the set-pixel centres.
pub fn fit_min_rect(mask: &BinaryMask) -> Result<RectParams> {
    if mask.is_empty() {
        return Err(Error::Fit("cannot fit a rectangle to an empty mask".into()));
    }
    let pts: Vec<(f64, f64)> = mask.points().into_iter().map(|(x, y)| (x as f64, y as f64)).collect();
    min_area_rect(&pts)
}

pub fn rect_perimeter(r: &RectParams) -> f64 {
    2.0 * (r.length + r.breadth)
}

pub fn femur_length_endpoints(p1: (f64, f64), p2: (f64, f64)) -> f64 {
    (p2.0 - p1.0).hypot(p2.1 - p1.1)
}

/// The two set-pixel centres farthest apart.
pub fn mask_extreme_points(mask: &BinaryMask) -> Result<((f64, f64), (f64, f64))> {
    if mask.is_empty() {
        return Err(Error::Fit("cannot find endpoints of an empty mask".into()));
    }
    let pts: Vec<(f64, f64)> = mask.points().into_iter().map(|(x, y)| (x as f64, y as f64)).collect();
    let hull = convex_hull(&pts);
    let mut best = (hull[0], hull[0], 0.0);
    for (i, &p) in hull.iter().enumerate() {
        for &q in &hull[i + 1..] {
            let d = femur_length_endpoints(p, q);
            if d > best.2 {
                best = (p, q, d);
            }
        }
    }
    Ok((best.0, best.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn axis_aligned_block() {
        let r = fit_min_rect(&block(32, 32, 5, 7, 10, 4)).unwrap();
        assert!((r.length - 9.0).abs() < 1e-12 && (r.breadth - 3.0).abs() < 1e-12);
        assert_eq!(r.angle, 0.0);
        assert!((r.center.0 - 9.5).abs() < 1e-12 && (r.center.1 - 8.5).abs() < 1e-12);
        assert_eq!(rect_perimeter(&r), 24.0);
    }

    #[test]
    fn vertical_block_angle() {
        let r = fit_min_rect(&block(32, 32, 5, 5, 3, 12)).unwrap();
        assert!((r.length - 11.0).abs() < 1e-12 && (r.breadth - 2.0).abs() < 1e-12);
        assert!((r.angle - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let r = fit_min_rect(&block(32, 8, 2, 3, 20, 1)).unwrap();
        assert!((r.length - 19.0).abs() < 1e-12);
        assert_eq!(r.breadth, 0.0);
        let p = fit_min_rect(&block(8, 8, 2, 3, 1, 1)).unwrap();
        assert_eq!((p.length, p.breadth), (0.0, 0.0));
        assert!(fit_min_rect(&BinaryMask::new(4, 4)).is_err());
    }

    #[test]
    fn hull_drops_interior_and_collinear() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (2.0, 2.0), (1.0, 1.0), (0.0, 2.0)];
        assert_eq!(convex_hull(&pts), vec![(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)]);
    }

    #[test]
    fn endpoints() {
        assert_eq!(femur_length_endpoints((10.0, 10.0), (20.0, 10.0)), 10.0);
        let (p, q) = mask_extreme_points(&block(32, 8, 2, 3, 20, 1)).unwrap();
        assert_eq!(femur_length_endpoints(p, q), 19.0);
    }
}
