//! Layer kernels: forward evaluation and hand-written adjoints.
//!
//! Kernels are written so the innermost loop runs over contiguous rows,
//! which lets the compiler vectorize them; that is what makes desk-scale
//! training viable on a laptop core.

use crate::tensor::Element;

/// Geometry of one conv2d application.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    /// Valid output-column range for a given kernel column, so the inner
    /// loops never test bounds per element.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let ox0 = if p > kx { (p - kx + s - 1) / s } else { 0 };
        if self.in_w + p < kx + 1 {
            return (0, 0);
        }
        let ox1 = ((self.in_w - 1 + p - kx) / s + 1).min(self.out_w);
        (ox0.min(ox1), ox1)
    }
}

pub fn conv2d_forward<T: Element>(input: &[T], weight: &[T], bias: &[T], d: &ConvDims, out: &mut [T]) {
    let (k, s, p) = (d.kernel, d.stride, d.padding);
    let out_plane = d.out_h * d.out_w;
    let in_plane = d.in_h * d.in_w;
    for oc in 0..d.out_c {
        let orows = &mut out[oc * out_plane..(oc + 1) * out_plane];
        orows.fill(bias[oc]);
        for ic in 0..d.in_c {
            let irows = &input[ic * in_plane..(ic + 1) * in_plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((oc * d.in_c + ic) * k + ky) * k + kx];
                    let (ox0, ox1) = d.ox_range(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..d.out_h {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= d.in_h {
                            continue;
                        }
                        let irow = &irows[iy as usize * d.in_w..(iy as usize + 1) * d.in_w];
                        let orow = &mut orows[oy * d.out_w..(oy + 1) * d.out_w];
                        if s == 1 {
                            let ib = ox0 + kx - p;
                            for (o, &i) in orow[ox0..ox1].iter_mut().zip(&irow[ib..ib + (ox1 - ox0)]) {
                                *o = *o + wv * i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] = orow[ox] + wv * irow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the conv input; accumulates into `gin` (zeroed by caller).
pub fn conv2d_backward_input<T: Element>(gout: &[T], weight: &[T], d: &ConvDims, gin: &mut [T]) {
    let (k, s, p) = (d.kernel, d.stride, d.padding);
    let out_plane = d.out_h * d.out_w;
    let in_plane = d.in_h * d.in_w;
    for oc in 0..d.out_c {
        let grows = &gout[oc * out_plane..(oc + 1) * out_plane];
        for ic in 0..d.in_c {
            let irows = &mut gin[ic * in_plane..(ic + 1) * in_plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((oc * d.in_c + ic) * k + ky) * k + kx];
                    let (ox0, ox1) = d.ox_range(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..d.out_h {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= d.in_h {
                            continue;
                        }
                        let irow = &mut irows[iy as usize * d.in_w..(iy as usize + 1) * d.in_w];
                        let grow = &grows[oy * d.out_w..(oy + 1) * d.out_w];
                        if s == 1 {
                            let ib = ox0 + kx - p;
                            for (i, &g) in irow[ib..ib + (ox1 - ox0)].iter_mut().zip(&grow[ox0..ox1]) {
                                *i = *i + wv * g;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - p;
                                irow[ix] = irow[ix] + wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Weight and bias gradients; accumulates into zeroed buffers.
pub fn conv2d_backward_params<T: Element>(
    gout: &[T],
    input: &[T],
    d: &ConvDims,
    gw: &mut [T],
    gb: &mut [T],
) {
    let (k, s, p) = (d.kernel, d.stride, d.padding);
    let out_plane = d.out_h * d.out_w;
    let in_plane = d.in_h * d.in_w;
    for oc in 0..d.out_c {
        let grows = &gout[oc * out_plane..(oc + 1) * out_plane];
        let mut bsum = T::zero();
        for &g in grows {
            bsum = bsum + g;
        }
        gb[oc] = gb[oc] + bsum;
        for ic in 0..d.in_c {
            let irows = &input[ic * in_plane..(ic + 1) * in_plane];
            for ky in 0..k {
                for kx in 0..k {
                    let (ox0, ox1) = d.ox_range(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in 0..d.out_h {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= d.in_h {
                            continue;
                        }
                        let irow = &irows[iy as usize * d.in_w..(iy as usize + 1) * d.in_w];
                        let grow = &grows[oy * d.out_w..(oy + 1) * d.out_w];
                        if s == 1 {
                            let ib = ox0 + kx - p;
                            for (&g, &i) in grow[ox0..ox1].iter().zip(&irow[ib..ib + (ox1 - ox0)]) {
                                acc = acc + g * i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                acc = acc + grow[ox] * irow[ox * s + kx - p];
                            }
                        }
                    }
                    let wi = ((oc * d.in_c + ic) * k + ky) * k + kx;
                    gw[wi] = gw[wi] + acc;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolDims {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
}

pub fn maxpool_forward<T: Element>(input: &[T], d: &PoolDims, out: &mut [T]) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    for c in 0..d.channels {
        let ip = &input[c * in_plane..(c + 1) * in_plane];
        let op = &mut out[c * out_plane..(c + 1) * out_plane];
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let (y0, x0) = (oy * d.stride, ox * d.stride);
                let mut best = ip[y0 * d.in_w + x0];
                for ky in 0..d.kernel {
                    for kx in 0..d.kernel {
                        let v = ip[(y0 + ky) * d.in_w + x0 + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                op[oy * d.out_w + ox] = best;
            }
        }
    }
}

/// Routes each output gradient to the first maximal element of its window
/// in row-major order, recomputed from the cached input.
pub fn maxpool_backward<T: Element>(gout: &[T], input: &[T], d: &PoolDims, gin: &mut [T]) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    for c in 0..d.channels {
        let ip = &input[c * in_plane..(c + 1) * in_plane];
        let gp = &gout[c * out_plane..(c + 1) * out_plane];
        let gi = &mut gin[c * in_plane..(c + 1) * in_plane];
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let (y0, x0) = (oy * d.stride, ox * d.stride);
                let mut best = ip[y0 * d.in_w + x0];
                let mut arg = y0 * d.in_w + x0;
                for ky in 0..d.kernel {
                    for kx in 0..d.kernel {
                        let idx = (y0 + ky) * d.in_w + x0 + kx;
                        if ip[idx] > best {
                            best = ip[idx];
                            arg = idx;
                        }
                    }
                }
                gi[arg] = gi[arg] + gp[oy * d.out_w + ox];
            }
        }
    }
}

pub fn dense_forward<T: Element>(input: &[T], weight: &[T], bias: &[T], out_f: usize, out: &mut [T]) {
    let in_f = input.len();
    for m in 0..out_f {
        let wrow = &weight[m * in_f..(m + 1) * in_f];
        let mut acc = bias[m];
        for (w, x) in wrow.iter().zip(input) {
            acc = acc + *w * *x;
        }
        out[m] = acc;
    }
}

pub fn dense_backward_input<T: Element>(gout: &[T], weight: &[T], in_f: usize, gin: &mut [T]) {
    for (m, &g) in gout.iter().enumerate() {
        let wrow = &weight[m * in_f..(m + 1) * in_f];
        for (gi, w) in gin.iter_mut().zip(wrow) {
            *gi = *gi + *w * g;
        }
    }
}

pub fn dense_backward_params<T: Element>(gout: &[T], input: &[T], gw: &mut [T], gb: &mut [T]) {
    let in_f = input.len();
    for (m, &g) in gout.iter().enumerate() {
        gb[m] = gb[m] + g;
        let wrow = &mut gw[m * in_f..(m + 1) * in_f];
        for (w, x) in wrow.iter_mut().zip(input) {
            *w = *w + g * *x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive conv used as an oracle for the optimized kernel.
    fn conv_naive(input: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.out_c * d.out_h * d.out_w];
        for oc in 0..d.out_c {
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let mut acc = b[oc];
                    for ic in 0..d.in_c {
                        for ky in 0..d.kernel {
                            for kx in 0..d.kernel {
                                let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= d.in_h || ix as usize >= d.in_w {
                                    continue;
                                }
                                acc += input[(ic * d.in_h + iy as usize) * d.in_w + ix as usize]
                                    * w[((oc * d.in_c + ic) * d.kernel + ky) * d.kernel + kx];
                            }
                        }
                    }
                    out[(oc * d.out_h + oy) * d.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(s, p) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0)] {
            let d = ConvDims {
                in_c: 3,
                in_h: 9,
                in_w: 11,
                out_c: 4,
                out_h: (9 + 2 * p - 3) / s + 1,
                out_w: (11 + 2 * p - 3) / s + 1,
                kernel: 3,
                stride: s,
                padding: p,
            };
            let input: Vec<f64> = (0..d.in_c * d.in_h * d.in_w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..d.out_c * d.in_c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..d.out_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; d.out_c * d.out_h * d.out_w];
            conv2d_forward(&input, &w, &b, &d, &mut out);
            let oracle = conv_naive(&input, &w, &b, &d);
            for (a, o) in out.iter().zip(&oracle) {
                assert!((a - o).abs() < 1e-12, "stride {s} pad {p}: {a} vs {o}");
            }
        }
    }

    #[test]
    fn maxpool_routes_to_first_max_on_ties() {
        // 1 channel, 2x2 input of equal values; gradient must land on (0,0).
        let d = PoolDims {
            channels: 1,
            in_h: 2,
            in_w: 2,
            out_h: 1,
            out_w: 1,
            kernel: 2,
            stride: 2,
        };
        let input = vec![5.0f64; 4];
        let mut out = vec![0.0];
        maxpool_forward(&input, &d, &mut out);
        assert_eq!(out[0], 5.0);
        let mut gin = vec![0.0; 4];
        maxpool_backward(&[2.0], &input, &d, &mut gin);
        assert_eq!(gin, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_forward_and_adjoints() {
        // y = Wx + b with W = [[1,2],[3,4]], b = [0.5, -0.5], x = [3,4]
        let w = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![0.5, -0.5];
        let x = vec![3.0, 4.0];
        let mut y = vec![0.0; 2];
        dense_forward(&x, &w, &b, 2, &mut y);
        assert_eq!(y, vec![11.5, 24.5]);

        let g = vec![1.0, -1.0];
        let mut gin = vec![0.0; 2];
        dense_backward_input(&g, &w, 2, &mut gin);
        assert_eq!(gin, vec![1.0 - 3.0, 2.0 - 4.0]);

        let mut gw = vec![0.0; 4];
        let mut gb = vec![0.0; 2];
        dense_backward_params(&g, &x, &mut gw, &mut gb);
        assert_eq!(gw, vec![3.0, 4.0, -3.0, -4.0]);
        assert_eq!(gb, g);
    }
}
