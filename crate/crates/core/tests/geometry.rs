use std::f64::consts::PI;

use fetometry::geometry::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

mod common;
use common::{perimeter_quadrature, rotated_block};

fn raster_ellipse(e: &EllipseParams) -> BinaryMask {
    rasterize_ellipse_mask(e, 64, 64, true, None)
}

#[test]
fn quadrature_oracle_reproduces_reference_values() {
    assert!((perimeter_quadrature(10.0, 10.0) - 20.0 * PI).abs() < 1e-9);
    assert!((perimeter_quadrature(2.0, 1.0) - 9.68845).abs() < 1e-5);
    assert!((perimeter_quadrature(5.0, 3.0) - 25.52699).abs() < 1e-5);
}

#[test]
fn circumference_matches_quadrature_on_grid() {
    for a in 1..=50 {
        for ratio in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let a = a as f64;
            let e = EllipseParams::new(0.0, 0.0, a, a * ratio, 0.0).unwrap();
            let exact = perimeter_quadrature(a, a * ratio);
            let rel = (ellipse_circumference(&e).unwrap() - exact).abs() / exact;
            assert!(rel <= 1e-4, "a={a} b/a={ratio}: rel err {rel}");
        }
    }
}

#[test]
fn filled_circle_area_and_boundary_count() {
    let c = EllipseParams::new(32.0, 32.0, 10.0, 10.0, 0.0).unwrap();
    let m = raster_ellipse(&c);
    // direct inequality count
    let mut count = 0;
    for y in 0..64 {
        for x in 0..64 {
            if ((x as f64 - 32.0).powi(2) + (y as f64 - 32.0).powi(2)) <= 100.0 {
                count += 1;
            }
        }
    }
    assert_eq!(m.count(), count);
    assert!((m.count() as f64 - 100.0 * PI).abs() / (100.0 * PI) < 0.03);
    // enumerate inside pixels with an outside 4-neighbour
    let inside = |x: i64, y: i64| ((x - 32).pow(2) + (y - 32).pow(2)) <= 100;
    let edge = (0..64i64)
        .flat_map(|y| (0..64i64).map(move |x| (x, y)))
        .filter(|&(x, y)| {
            inside(x, y)
                && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .any(|(dx, dy)| !inside(x + dx, y + dy))
        })
        .count();
    let b = boundary(&m).len();
    assert_eq!(b, edge);
    // an 8-connected digital circle has about 4√2·r pixels, 0.90 of 2πr
    let rel = (b as f64 - 20.0 * PI).abs() / (20.0 * PI);
    assert!(rel < 0.12, "boundary {b}");
}

#[test]
fn raster_round_trip_recovers_ellipse() {
    for (a, b, deg) in [
        (20.0, 12.0, 30.0),
        (10.0, 10.0, 0.0),
        (24.0, 9.0, 110.0),
        (15.0, 13.0, 75.0),
    ] {
        let e = EllipseParams::new(32.0, 31.0, a, b, f64::to_radians(deg)).unwrap();
        let m = raster_ellipse(&e);
        let f = fit_ellipse(&boundary_edge_points(&m)).unwrap();
        assert!((f.cx - e.cx).abs() < 1.0 && (f.cy - e.cy).abs() < 1.0);
        assert!((f.a - a).abs() / a < 0.02, "a {} vs {a}", f.a);
        assert!((f.b - b).abs() / b < 0.02, "b {} vs {b}", f.b);
        let g = fit_ellipse_mask(&m).unwrap();
        assert_eq!(f, g);
    }
}

#[test]
fn dashed_outline_accounting() {
    let e = EllipseParams::new(32.0, 32.0, 20.0, 12.0, 0.4).unwrap();
    let solid = rasterize_ellipse_mask(&e, 64, 64, false, None).count() as f64;
    let dashed = rasterize_ellipse_mask(&e, 64, 64, false, Some((4.0, 4.0))).count() as f64;
    let frac = dashed / solid;
    assert!((0.4..=0.6).contains(&frac), "dash fraction {frac}");
}

#[test]
fn dashed_ring_pipeline() {
    for (gap, deg) in [(3.0, 0.0), (2.0, 40.0), (3.0, 125.0)] {
        let e = EllipseParams::new(32.0, 32.0, 22.0, 14.0, f64::to_radians(deg)).unwrap();
        let ring = rasterize_ellipse_mask(&e, 64, 64, false, Some((5.0, gap)));
        assert!(component_count(&ring, Connectivity::Eight) > 1);
        let thick = dilate(&ring, 2);
        assert_eq!(component_count(&thick, Connectivity::Eight), 1);
        let region = largest_component(&thick, Connectivity::Eight);
        let pts: Vec<(f64, f64)> = boundary(&region)
            .into_iter()
            .map(|(x, y)| (x as f64, y as f64))
            .collect();
        let f = fit_ellipse(&pts).unwrap();
        assert!((f.a - e.a).abs() / e.a < 0.05, "a {}", f.a);
        assert!((f.b - e.b).abs() / e.b < 0.05, "b {}", f.b);
    }
}

/// Recursive flood fill, independent of the library's queue-based labelling.
fn flood_sizes(mask: &BinaryMask) -> Vec<(usize, Vec<(usize, usize)>)> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut comps = Vec::new();
    fn visit(m: &BinaryMask, seen: &mut [bool], x: usize, y: usize, acc: &mut Vec<(usize, usize)>) {
        let w = m.width();
        if !m.get(x, y) || seen[y * w + x] {
            return;
        }
        seen[y * w + x] = true;
        acc.push((x, y));
        if x > 0 {
            visit(m, seen, x - 1, y, acc);
        }
        if x + 1 < w {
            visit(m, seen, x + 1, y, acc);
        }
        if y > 0 {
            visit(m, seen, x, y - 1, acc);
        }
        if y + 1 < m.height() {
            visit(m, seen, x, y + 1, acc);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = Vec::new();
            visit(mask, &mut seen, x, y, &mut acc);
            if !acc.is_empty() {
                comps.push((acc.len(), acc));
            }
        }
    }
    comps
}

#[test]
fn largest_component_matches_flood_fill() {
    let mut m = BinaryMask::new(16, 16);
    for (x, y) in [(1, 1), (2, 1), (1, 2), (2, 2), (3, 2)] {
        m.set(x, y, true);
    }
    for y in 8..11 {
        for x in 8..11 {
            m.set(x, y, true);
        }
    }
    let comps = flood_sizes(&m);
    assert_eq!(comps.iter().map(|c| c.0).collect::<Vec<_>>(), vec![5, 9]);
    let big = largest_component(&m, Connectivity::Four);
    assert_eq!(big.count(), 9);
    let mut pts = comps[1].1.clone();
    pts.sort_by_key(|&(x, y)| (y, x));
    assert_eq!(big.points(), pts);
}

#[test]
fn rotated_block_rect_fit() {
    let r = fit_min_rect(&rotated_block(9.0, 3.0, 45.0)).unwrap();
    assert!((r.length - 9.0).abs() <= 1.0 && (r.breadth - 3.0).abs() <= 1.0, "{r:?}");
    assert!((r.angle.to_degrees() - 45.0).abs() <= 3.0, "{r:?}");
}

#[test]
fn line_mask_round_trips() {
    let m = rasterize_line_mask((8.0, 40.0), (40.0, 12.0), 3, 48, 48).unwrap();
    let r = fit_min_rect(&m).unwrap();
    let want = (-28.0f64).atan2(32.0).rem_euclid(PI);
    assert!((r.angle - want).abs().to_degrees() <= 3.0);

    let femur = rasterize_line_mask((12.0, 30.0), (52.0, 30.0), 4, 64, 64).unwrap();
    let r = fit_min_rect(&femur).unwrap();
    assert!((r.length - 40.0).abs() <= 2.0, "{}", r.length);
    let (p, q) = mask_extreme_points(&femur).unwrap();
    assert!((femur_length_endpoints(p, q) - 40.0).abs() <= 2.0);
}

#[test]
fn crosses_under_noise() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut img = GrayImage::new(64, 48);
        draw_cross(&mut img, (10.0, 10.0), 3, 1.0);
        draw_cross(&mut img, (40.0, 20.0), 3, 1.0);
        for v in img.data_mut() {
            *v += noise.sample(&mut rng);
        }
        let pair = detect_keypoint_pair(&img, 3).unwrap();
        let near = |p: (f64, f64), q: (f64, f64)| (p.0 - q.0).abs() <= 1.0 && (p.1 - q.1).abs() <= 1.0;
        let ok = (near(pair.p1, (10.0, 10.0)) && near(pair.p2, (40.0, 20.0)))
            || (near(pair.p2, (10.0, 10.0)) && near(pair.p1, (40.0, 20.0)));
        assert!(ok, "seed {seed}: {pair:?}");
    }
}

fn arb_mask() -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), 12 * 10).prop_map(|bits| BinaryMask::from_bits(12, 10, bits).unwrap())
}

proptest! {
    #[test]
    fn ellipse_fit_is_rigid_invariant(
        a in 5.0f64..25.0, ratio in 0.3f64..0.95, theta in 0.0f64..PI,
        tx in -30.0f64..30.0, ty in -30.0f64..30.0, rot in 0.0f64..(2.0 * PI),
    ) {
        let e = EllipseParams::new(32.0, 32.0, a, a * ratio, theta).unwrap();
        let pts: Vec<(f64, f64)> = (0..60).map(|i| e.point_at(2.0 * PI * i as f64 / 60.0)).collect();
        let base = fit_ellipse(&pts).unwrap();
        let (s, c) = rot.sin_cos();
        let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x * c - y * s + tx, x * s + y * c + ty)).collect();
        let f = fit_ellipse(&moved).unwrap();
        let (ecx, ecy) = (base.cx * c - base.cy * s + tx, base.cx * s + base.cy * c + ty);
        prop_assert!((f.cx - ecx).abs() < 1e-9 && (f.cy - ecy).abs() < 1e-9);
        prop_assert!((f.a - base.a).abs() < 1e-9 && (f.b - base.b).abs() < 1e-9);
        let dt = (f.theta - base.theta - rot).rem_euclid(PI);
        prop_assert!(dt.min(PI - dt) < 1e-9, "theta {} vs {} + {}", f.theta, base.theta, rot);
    }

    #[test]
    fn min_rect_beats_rotation_sweep(mask in arb_mask()) {
        prop_assume!(!mask.is_empty());
        let r = fit_min_rect(&mask).unwrap();
        prop_assert!(r.length >= r.breadth && r.breadth >= 0.0);
        let pts: Vec<(f64, f64)> = mask.points().into_iter().map(|(x, y)| (x as f64, y as f64)).collect();
        for deg in 0..180 {
            let (s, c) = f64::to_radians(deg as f64).sin_cos();
            let us = pts.iter().map(|p| p.0 * c + p.1 * s);
            let vs = pts.iter().map(|p| -p.0 * s + p.1 * c);
            let span = |it: &mut dyn Iterator<Item = f64>| {
                let (lo, hi) = it.fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
                hi - lo
            };
            let area = span(&mut us.into_iter()) * span(&mut vs.into_iter());
            prop_assert!(r.area() <= area * (1.0 + 1e-6) + 1e-9, "deg {deg}: {} > {area}", r.area());
        }
    }

    #[test]
    fn dilate_is_monotone_and_extensive(m1 in arb_mask(), extra in arb_mask(), r in 1usize..3) {
        let bits: Vec<bool> = m1.bits().iter().zip(extra.bits()).map(|(&a, &b)| a || b).collect();
        let m2 = BinaryMask::from_bits(12, 10, bits).unwrap();
        prop_assert!(dilate(&m1, r).is_subset_of(&dilate(&m2, r)));
        prop_assert!(m1.is_subset_of(&dilate(&m1, r)));
        prop_assert!(erode(&m1, r).is_subset_of(&m1));
    }

    #[test]
    fn largest_component_is_a_max_flood_component(m in arb_mask()) {
        let comps = flood_sizes(&m);
        let big = largest_component(&m, Connectivity::Four);
        let want = comps.iter().map(|c| c.0).max().unwrap_or(0);
        prop_assert_eq!(big.count(), want);
        prop_assert!(big.is_subset_of(&m));
    }
}
