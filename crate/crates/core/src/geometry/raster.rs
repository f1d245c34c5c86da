use std::f64::consts::PI;

use super::{BinaryMask, EllipseParams, GrayImage};
use crate::error::{Error, Result};

/// Filled: pixel centres inside the ellipse. Outline: a parametric march at
/// ≤ 0.5 px steps, optionally dashed as `(on, off)` runs of arc length.
pub fn rasterize_ellipse_mask(
    e: &EllipseParams,
    width: usize,
    height: usize,
    filled: bool,
    dash: Option<(f64, f64)>,
) -> BinaryMask {
    let mut m = BinaryMask::new(width, height);
    if filled {
        for y in 0..height {
            for x in 0..width {
                if e.implicit(x as f64, y as f64) <= 1.0 {
                    m.set(x, y, true);
                }
            }
        }
        return m;
    }
    let steps = ((2.0 * PI * e.a) / 0.25).ceil().max(8.0) as usize;
    let mut prev = e.point_at(0.0);
    let mut arc = 0.0;
    for i in 0..=steps {
        let p = e.point_at(2.0 * PI * i as f64 / steps as f64);
        arc += (p.0 - prev.0).hypot(p.1 - prev.1);
        prev = p;
        let on = match dash {
            Some((on, off)) if on + off > 0.0 => arc.rem_euclid(on + off) < on,
            _ => true,
        };
        if on {
            plot(&mut m, p);
        }
    }
    m
}

fn plot(m: &mut BinaryMask, p: (f64, f64)) {
    let (x, y) = (p.0.round(), p.1.round());
    if x >= 0.0 && y >= 0.0 && (x as usize) < m.width() && (y as usize) < m.height() {
        m.set(x as usize, y as usize, true);
    }
}

/// Pixel centres whose projection falls on segment `p1p2` and that lie within
/// `stroke/2` of it (flat ends). A zero-length segment gives a disc.
pub fn rasterize_line_mask(
    p1: (f64, f64),
    p2: (f64, f64),
    stroke: usize,
    width: usize,
    height: usize,
) -> Result<BinaryMask> {
    if stroke == 0 {
        return Err(Error::invalid("line width must be ≥ 1"));
    }
    let half = stroke as f64 / 2.0;
    let (dx, dy) = (p2.0 - p1.0, p2.1 - p1.1);
    let len = dx.hypot(dy);
    let mut m = BinaryMask::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let (rx, ry) = (x as f64 - p1.0, y as f64 - p1.1);
            let inside = if len < 1e-12 {
                rx.hypot(ry) <= half
            } else {
                let along = (rx * dx + ry * dy) / len;
                let across = (rx * dy - ry * dx).abs() / len;
                (-1e-9..=len + 1e-9).contains(&along) && across <= half + 1e-9
            };
            if inside {
                m.set(x, y, true);
            }
        }
    }
    Ok(m)
}

/// Draws a one-pixel plus sign of the given arm length.
pub fn draw_cross(img: &mut GrayImage, center: (f64, f64), arm: usize, value: f64) {
    let (cx, cy) = (center.0.round() as isize, center.1.round() as isize);
    let arm = arm as isize;
    for d in -arm..=arm {
        for (x, y) in [(cx + d, cy), (cx, cy + d)] {
            if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
                img.set(x as usize, y as usize, value);
            }
        }
    }
}
