//! Ultrasound-like phantoms with known geometry.
//!
//! Brain and abdomen scans are bright elliptical rings, femur scans a bright
//! bar. All images carry smoothed multiplicative speckle.

mod dataset;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{
    draw_cross, ellipse_circumference, femur_length_endpoints, rasterize_ellipse_mask, rasterize_line_mask, BinaryMask,
    EllipseParams, GrayImage,
};
use crate::network::OrganClass;

pub use dataset::{
    generate_dataset, load_dataset, parse_manifest, sample_rng, split_subjects, write_manifest, Dataset, GenOptions,
    ManifestEntry, Split, MANIFEST_HEADER,
};

pub const PIXEL_SPACING_MM: f64 = 0.5;
pub const MIN_SIZE: usize = 32;
pub const SPECKLE_SIGMA: f64 = 0.3;
/// Dash pattern of the annotation outline, in pixels of arc length.
pub const ANNOT_DASH: (f64, f64) = (4.0, 4.0);
pub const ANNOT_CROSS_ARM: usize = 3;
/// Dilation radius that links the 4-px dash gaps of the annotation outline
/// (after rounding to pixels a gap can span 5 px diagonally).
pub const ANNOT_LINK_RADIUS: usize = 3;

const BACKGROUND: f64 = 0.3;

/// Ground-truth geometry of one scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truth {
    Ellipse(EllipseParams),
    Segment { p1: (f64, f64), p2: (f64, f64), width: f64 },
}

impl Truth {
    /// Circumference for ellipses, endpoint distance for segments.
    pub fn biometric_px(&self) -> f64 {
        match self {
            Truth::Ellipse(e) => ellipse_circumference(e).expect("truth ellipses have positive axes"),
            Truth::Segment { p1, p2, .. } => femur_length_endpoints(*p1, *p2),
        }
    }

    pub fn rasterize(&self, width: usize, height: usize) -> Result<BinaryMask> {
        match self {
            Truth::Ellipse(e) => Ok(rasterize_ellipse_mask(e, width, height, true, None)),
            Truth::Segment { p1, p2, width: w } => rasterize_line_mask(*p1, *p2, w.round() as usize, width, height),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        match *self {
            Truth::Ellipse(e) => [e.cx, e.cy, e.a, e.b, e.theta],
            Truth::Segment { p1, p2, width } => [p1.0, p1.1, p2.0, p2.1, width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSample {
    pub stem: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub organ: OrganClass,
    pub truth: Truth,
    pub subject_id: u32,
    pub pixel_spacing_mm: f64,
}

impl ScanSample {
    pub fn biometric_mm(&self) -> f64 {
        self.truth.biometric_px() * self.pixel_spacing_mm
    }

    pub fn size(&self) -> usize {
        self.image.width()
    }
}

/// Draws one phantom. The stem and subject id are left for the caller.
pub fn generate_sample<R: Rng + ?Sized>(organ: OrganClass, size: usize, rng: &mut R) -> Result<ScanSample> {
    if size < MIN_SIZE {
        return Err(Error::invalid(format!("phantom size must be ≥ {MIN_SIZE}, got {size}")));
    }
    let s = size as f64;
    let (truth, base) = match organ {
        OrganClass::Brain | OrganClass::Abdomen => {
            let e = sample_ellipse(s, rng);
            // brain: thin bright skull ring, dark interior;
            // abdomen: thick dimmer wall, grey interior
            let (ring, ring_v, inner_v) = if organ == OrganClass::Brain {
                (2.0, 0.9, 0.15)
            } else {
                (5.0, 0.6, 0.42)
            };
            (Truth::Ellipse(e), ring_image(&e, size, ring, ring_v, inner_v))
        }
        OrganClass::Femur => {
            let (p1, p2, width) = sample_segment(s, rng);
            let truth = Truth::Segment { p1, p2, width };
            let mask = truth.rasterize(size, size)?;
            let mut img = GrayImage::new(size, size);
            for (v, &m) in img.data_mut().iter_mut().zip(mask.bits()) {
                *v = if m { 0.9 } else { BACKGROUND };
            }
            (truth, img)
        }
    };
    let mask = truth.rasterize(size, size)?;
    let image = apply_speckle(&base, rng);
    Ok(ScanSample {
        stem: String::new(),
        image,
        mask,
        organ,
        truth,
        subject_id: 0,
        pixel_spacing_mm: PIXEL_SPACING_MM,
    })
}

/// Semi-axes in `[s/8, s/3]` with `b ≥ a/2`, centre in the central third,
/// redrawn until the ellipse clears the border by two pixels.
fn sample_ellipse<R: Rng + ?Sized>(s: f64, rng: &mut R) -> EllipseParams {
    let (lo, hi) = (s / 8.0, s / 3.0);
    loop {
        let a = rng.gen_range(lo..hi);
        let b = rng.gen_range((a / 2.0).max(lo)..=a);
        let cx = rng.gen_range(s / 3.0..2.0 * s / 3.0);
        let cy = rng.gen_range(s / 3.0..2.0 * s / 3.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (sn, cs) = theta.sin_cos();
        let ex = (a * a * cs * cs + b * b * sn * sn).sqrt();
        let ey = (a * a * sn * sn + b * b * cs * cs).sqrt();
        let margin = 2.0;
        if cx - ex >= margin && cy - ey >= margin && cx + ex <= s - 1.0 - margin && cy + ey <= s - 1.0 - margin {
            return EllipseParams::new(cx, cy, a, b, theta).expect("positive axes");
        }
    }
}

/// Length in `[s/4, s/2]`, width 3 to 5 px, endpoints far enough inside for
/// a full cross template.
fn sample_segment<R: Rng + ?Sized>(s: f64, rng: &mut R) -> ((f64, f64), (f64, f64), f64) {
    let margin = (ANNOT_CROSS_ARM + 1) as f64;
    loop {
        let len = rng.gen_range(s / 4.0..=s / 2.0);
        let width = rng.gen_range(3..=5) as f64;
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let cx = rng.gen_range(s / 3.0..2.0 * s / 3.0);
        let cy = rng.gen_range(s / 3.0..2.0 * s / 3.0);
        let (dx, dy) = (0.5 * len * angle.cos(), 0.5 * len * angle.sin());
        let (p1, p2) = ((cx - dx, cy - dy), (cx + dx, cy + dy));
        let inside = |p: (f64, f64)| [p.0, p.1].iter().all(|&v| v >= margin && v <= s - 1.0 - margin);
        if inside(p1) && inside(p2) {
            return (p1, p2, width);
        }
    }
}

/// The ring's outer edge is the truth ellipse, the way circumferences are
/// traced along the outer border of skull or skin.
fn ring_image(e: &EllipseParams, size: usize, ring: f64, ring_v: f64, inner_v: f64) -> GrayImage {
    let outer = *e;
    let inner = EllipseParams {
        a: (e.a - ring).max(0.5),
        b: (e.b - ring).max(0.5),
        ..*e
    };
    let mut img = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let v = if inner.implicit(xf, yf) <= 1.0 {
                inner_v
            } else if outer.implicit(xf, yf) <= 1.0 {
                ring_v
            } else {
                BACKGROUND
            };
            img.set(x, y, v);
        }
    }
    img
}

/// Multiplies by unit-mean log-normal noise smoothed with a 3×3 box filter.
fn apply_speckle<R: Rng + ?Sized>(base: &GrayImage, rng: &mut R) -> GrayImage {
    let (w, h) = (base.width(), base.height());
    let raw: Vec<f64> = (0..w * h)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (SPECKLE_SIGMA * z - 0.5 * SPECKLE_SIGMA * SPECKLE_SIGMA).exp()
        })
        .collect();
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    acc += raw[yy * w + xx];
                    n += 1.0;
                }
            }
            out.set(x, y, (base.get(x, y) * acc / n).clamp(0.0, 1.0));
        }
    }
    out
}

/// Annotation channel: dashed outline for elliptical organs, cross marks
/// at the endpoints for femur. The scan image itself is untouched.
pub fn overlay_annotations(sample: &ScanSample) -> GrayImage {
    let (w, h) = (sample.image.width(), sample.image.height());
    match sample.truth {
        Truth::Ellipse(e) => GrayImage::from(&rasterize_ellipse_mask(&e, w, h, false, Some(ANNOT_DASH))),
        Truth::Segment { p1, p2, .. } => {
            let mut img = GrayImage::new(w, h);
            draw_cross(&mut img, p1, ANNOT_CROSS_ARM, 1.0);
            draw_cross(&mut img, p2, ANNOT_CROSS_ARM, 1.0);
            img
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_per_seed() {
        for organ in OrganClass::ALL {
            let a = generate_sample(organ, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let b = generate_sample(organ, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.mask, a.truth.rasterize(64, 64).unwrap());
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_small_size() {
        assert!(generate_sample(OrganClass::Brain, 31, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn truth_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = generate_sample(OrganClass::Abdomen, 64, &mut rng).unwrap();
            let Truth::Ellipse(e) = s.truth else { panic!() };
            assert!(e.a >= 8.0 && e.a <= 64.0 / 3.0 && e.b >= e.a / 2.0 - 1e-12);
            let f = generate_sample(OrganClass::Femur, 64, &mut rng).unwrap();
            let len = f.truth.biometric_px();
            assert!((16.0..=32.0).contains(&len));
        }
    }
}
