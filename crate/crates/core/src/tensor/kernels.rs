use super::Scalar;

/// Output extent of a 3×3 convolution with zero padding 1.
pub(crate) fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

/// Unfolds `x` (c×h×w) into a (c·9)×(ho·wo) column matrix for a padded 3×3 kernel.
pub(crate) fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, stride: usize) -> Vec<F> {
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let plane = ho * wo;
    let mut cols = vec![F::zero(); c * 9 * plane];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input plane.
pub(crate) fn col2im<F: Scalar>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    out: &mut [F],
) {
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-output-index (low index, high index, weight of high) for half-pixel bilinear resampling.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) fn upsample<F: Scalar>(
    x: &[F],
    c: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Vec<F> {
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    let mut out = vec![F::zero(); c * th * tw];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * th * tw..(ci + 1) * th * tw];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::of(fx);
                let top = src[y0 * w + x0] * (F::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (F::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * tw + ox] = top * (F::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<F: Scalar>(
    g: &[F],
    c: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
    out: &mut [F],
) {
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    for ci in 0..c {
        let src = &g[ci * th * tw..(ci + 1) * th * tw];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::of(fx);
                let v = src[oy * tw + ox];
                let top = v * (F::one() - fy);
                let bot = v * fy;
                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (F::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (F::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
            }
        }
    }
}

/// Transposes the last two axes of a stack of `batch` r×c matrices.
pub(crate) fn transpose<F: Scalar>(x: &[F], batch: usize, r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for b in 0..batch {
        let src = &x[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_identity_when_sizes_match() {
        for (i, &(lo, _, f)) in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(lo, i);
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn im2col_center_tap_is_input() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let cols = im2col(&x, 1, 3, 4, 1);
        assert_eq!(&cols[4 * 12..5 * 12], &x[..]);
    }
}
