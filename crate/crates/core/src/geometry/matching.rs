use super::GrayImage;
use crate::error::{Error, Result};

pub const DEFAULT_ARM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyPoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyPointPair {
    pub p1: (f64, f64),
    pub p2: (f64, f64),
    pub score1: f64,
    pub score2: f64,
}

impl KeyPointPair {
    pub fn distance(&self) -> f64 {
        super::rect::femur_length_endpoints(self.p1, self.p2)
    }
}

/// Plus-shaped template of side `2·arm + 1`, one pixel thick.
pub fn cross_template(arm: usize) -> Vec<f64> {
    let side = 2 * arm + 1;
    (0..side * side)
        .map(|i| if i / side == arm || i % side == arm { 1.0 } else { 0.0 })
        .collect()
}

/// Zero-mean normalized cross-correlation of the cross template centred on
/// every pixel whose window fits inside the image. Flat windows score 0.
/// Returns `(scores, map_width)`; entry `(x, y)` is centred at `(x+arm, y+arm)`.
pub fn cross_score_map(image: &GrayImage, arm: usize) -> Result<(Vec<f64>, usize)> {
    let side = 2 * arm + 1;
    if arm < 2 {
        return Err(Error::invalid(format!("cross arm must be ≥ 2, got {arm}")));
    }
    if image.width() < side || image.height() < side {
        return Err(Error::invalid(format!(
            "image {}×{} smaller than {side}×{side} template",
            image.width(),
            image.height()
        )));
    }
    let tpl = cross_template(arm);
    let n = tpl.len() as f64;
    let t_mean = tpl.iter().sum::<f64>() / n;
    let t: Vec<f64> = tpl.iter().map(|v| v - t_mean).collect();
    let t_norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (mw, mh) = (image.width() - side + 1, image.height() - side + 1);
    let mut out = vec![0.0; mw * mh];
    for y in 0..mh {
        for x in 0..mw {
            let (mut s, mut s2, mut st) = (0.0, 0.0, 0.0);
            for j in 0..side {
                for i in 0..side {
                    let v = image.get(x + i, y + j);
                    s += v;
                    s2 += v * v;
                    st += v * t[j * side + i];
                }
            }
            // Σ (v − v̄) t = Σ v t since Σ t = 0
            let var = s2 - s * s / n;
            if var > 1e-12 * n {
                out[y * mw + x] = (st / (var.sqrt() * t_norm)).clamp(-1.0, 1.0);
            }
        }
    }
    Ok((out, mw))
}

/// Top `top_k` peaks of the score map after greedy non-maximum suppression
/// (exclusion radius `2·arm`), best first.
pub fn match_cross_patterns(image: &GrayImage, arm: usize, top_k: usize) -> Result<Vec<KeyPoint>> {
    let (scores, mw) = cross_score_map(image, arm)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let radius = (2 * arm) as f64;
    let mut peaks: Vec<KeyPoint> = Vec::new();
    for i in order {
        if peaks.len() == top_k {
            break;
        }
        let (x, y) = ((i % mw + arm) as f64, (i / mw + arm) as f64);
        if peaks.iter().all(|p| (p.x - x).hypot(p.y - y) > radius) {
            peaks.push(KeyPoint { x, y, score: scores[i] });
        }
    }
    Ok(peaks)
}

/// The two strongest cross matches.
pub fn detect_keypoint_pair(image: &GrayImage, arm: usize) -> Result<KeyPointPair> {
    let peaks = match_cross_patterns(image, arm, 2)?;
    if peaks.len() < 2 {
        return Err(Error::Fit("fewer than two cross candidates".into()));
    }
    Ok(KeyPointPair {
        p1: (peaks[0].x, peaks[0].y),
        p2: (peaks[1].x, peaks[1].y),
        score1: peaks[0].score,
        score2: peaks[1].score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::raster::draw_cross;

    #[test]
    fn template_shape() {
        let t = cross_template(2);
        assert_eq!(t.iter().filter(|&&v| v == 1.0).count(), 9);
        assert_eq!(t[12], 1.0);
        assert_eq!(t[0], 0.0);
    }

    #[test]
    fn finds_two_crosses() {
        let mut img = GrayImage::new(64, 48);
        draw_cross(&mut img, (10.0, 10.0), 3, 1.0);
        draw_cross(&mut img, (40.0, 20.0), 3, 1.0);
        let peaks = match_cross_patterns(&img, 3, 2).unwrap();
        let mut got: Vec<(f64, f64)> = peaks.iter().map(|p| (p.x, p.y)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![(10.0, 10.0), (40.0, 20.0)]);
        assert!(peaks.iter().all(|p| p.score >= 0.99));
    }

    #[test]
    fn blank_image_scores_zero() {
        let img = GrayImage::new(20, 20);
        let peaks = match_cross_patterns(&img, 3, 3).unwrap();
        assert!(peaks.iter().all(|p| p.score <= 0.0));
    }

    #[test]
    fn rejects_small_inputs() {
        assert!(match_cross_patterns(&GrayImage::new(6, 6), 3, 1).is_err());
        assert!(match_cross_patterns(&GrayImage::new(20, 20), 1, 1).is_err());
    }
}
