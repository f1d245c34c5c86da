//! Raw numeric kernels behind the graph ops. No shape validation here.

/// `c = beta * c + a · b` where `a` is `m × k` and `b` is `k × n`, both
/// row-major, optionally read transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe in-bounds row-major
    // layouts of the given dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 kernels at stride 1 without padding read the input directly.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0 && self.stride == 1
    }
}

/// Output columns `lo..hi` whose stride-1 input column `ox + kj − pad` is in bounds.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo).max(lo);
    (lo, hi)
}

/// Unfolds one `[Cin, H, W]` image into `[Cin·kh·kw, Ho·Wo]` columns.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kj);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo < hi {
                            let off = lo + kj - g.pad;
                            line[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, accumulating.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kj);
                        if lo < hi {
                            let off = lo + kj - g.pad;
                            let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                            dst[off..off + hi - lo].iter_mut().zip(line).for_each(|(d, v)| *d += v);
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    n: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let k = g.patch();
    let p = g.out_pixels();
    let in_stride = g.cin * g.h * g.w;
    let mut out = vec![0.0; n * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..n {
        let img = &input[s * in_stride..(s + 1) * in_stride];
        let dst = &mut out[s * cout * p..(s + 1) * cout * p];
        for (co, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias[co]);
        }
        let b: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        gemm(cout, k, p, weight, false, b, false, 1.0, dst);
    }
    out
}

/// Accumulates gradients for input (if requested), weight and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    n: usize,
    weight: &[f64],
    cout: usize,
    g: &ConvGeom,
    dout: &[f64],
    dinput: Option<&mut [f64]>,
    dweight: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let k = g.patch();
    let p = g.out_pixels();
    let in_stride = g.cin * g.h * g.w;
    let mut cols = vec![0.0; k * p];
    let mut dinput = dinput;
    let mut dweight = dweight;
    if let Some(db) = dbias {
        for s in 0..n {
            for co in 0..cout {
                let off = (s * cout + co) * p;
                db[co] += dout[off..off + p].iter().sum::<f64>();
            }
        }
    }
    for s in 0..n {
        let dy = &dout[s * cout * p..(s + 1) * cout * p];
        let img = &input[s * in_stride..(s + 1) * in_stride];
        if let Some(dw) = dweight.as_deref_mut() {
            let b: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut cols);
                &cols
            };
            gemm(cout, p, k, dy, false, b, true, 1.0, dw);
        }
        if let Some(dx) = dinput.as_deref_mut() {
            let dst = &mut dx[s * in_stride..(s + 1) * in_stride];
            if g.is_pointwise() {
                gemm(k, cout, p, weight, true, dy, false, 1.0, dst);
            } else {
                gemm(k, cout, p, weight, true, dy, false, 0.0, &mut cols);
                col2im_add(&cols, g, dst);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            cin: 2,
            h: 4,
            w: 5,
            kh: 3,
            kw: 3,
            pad: 1,
            stride: 2,
            ho: 2,
            wo: 3,
        };
        let x: Vec<f64> = (0..g.cin * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch() * g.out_pixels())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
