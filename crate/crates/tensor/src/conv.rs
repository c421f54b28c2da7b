//! Same-padded, stride-1 NHWC convolution kernels (im2col + GEMM).

use crate::scalar::Scalar;

/// Images lowered to columns per GEMM call; bounds scratch memory.
const IMAGES_PER_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, img: &[S], col: &mut [S]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plen = g.patch_len();
    for y in 0..g.h {
        for x in 0..g.w {
            let row = &mut col[(y * g.w + x) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = y as isize + ky as isize - ph as isize;
                for kx in 0..g.kw {
                    let ix = x as isize + kx as isize - pw as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(S::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&img[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeom, col: &[S], img: &mut [S]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plen = g.patch_len();
    for y in 0..g.h {
        for x in 0..g.w {
            let row = &col[(y * g.w + x) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = y as isize + ky as isize - ph as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = x as isize + kx as isize - pw as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    for (d, &s) in img[dst..dst + g.cin].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    kernel: &[S],
    bias: Option<&[S]>,
) -> Vec<S> {
    let px = g.pixels();
    let plen = g.patch_len();
    let mut out = vec![S::zero(); g.n * px * g.cout];
    if let Some(b) = bias {
        for o in out.chunks_exact_mut(g.cout) {
            o.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { S::one() } else { S::zero() };
    if g.pointwise() {
        S::gemm(false, false, g.n * px, g.cin, g.cout, S::one(), input, kernel, beta, &mut out);
        return out;
    }
    let mut col = vec![S::zero(); IMAGES_PER_CHUNK.min(g.n) * px * plen];
    for start in (0..g.n).step_by(IMAGES_PER_CHUNK) {
        let count = IMAGES_PER_CHUNK.min(g.n - start);
        for i in 0..count {
            let img = &input[(start + i) * px * g.cin..][..px * g.cin];
            im2col(g, img, &mut col[i * px * plen..][..px * plen]);
        }
        let rows = count * px;
        S::gemm(
            false,
            false,
            rows,
            plen,
            g.cout,
            S::one(),
            &col[..rows * plen],
            kernel,
            beta,
            &mut out[start * px * g.cout..][..rows * g.cout],
        );
    }
    out
}

/// Accumulates gradients into the provided buffers (any of which may be absent).
pub(crate) fn backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    kernel: &[S],
    grad_out: &[S],
    grad_input: Option<&mut [S]>,
    grad_kernel: Option<&mut [S]>,
    grad_bias: Option<&mut [S]>,
) {
    let px = g.pixels();
    let plen = g.patch_len();
    if let Some(gb) = grad_bias {
        for row in grad_out.chunks_exact(g.cout) {
            for (b, &d) in gb.iter_mut().zip(row) {
                *b += d;
            }
        }
    }
    if g.pointwise() {
        if let Some(gk) = grad_kernel {
            S::gemm(true, false, g.cin, g.n * px, g.cout, S::one(), input, grad_out, S::one(), gk);
        }
        if let Some(gi) = grad_input {
            S::gemm(false, true, g.n * px, g.cout, g.cin, S::one(), grad_out, kernel, S::one(), gi);
        }
        return;
    }
    let need_kernel = grad_kernel.is_some();
    let mut grad_kernel = grad_kernel;
    let mut grad_input = grad_input;
    let chunk = IMAGES_PER_CHUNK.min(g.n);
    let mut col = vec![S::zero(); chunk * px * plen];
    let mut dcol = if grad_input.is_some() {
        vec![S::zero(); chunk * px * plen]
    } else {
        Vec::new()
    };
    for start in (0..g.n).step_by(IMAGES_PER_CHUNK) {
        let count = IMAGES_PER_CHUNK.min(g.n - start);
        let rows = count * px;
        let dout = &grad_out[start * px * g.cout..][..rows * g.cout];
        if need_kernel {
            for i in 0..count {
                let img = &input[(start + i) * px * g.cin..][..px * g.cin];
                im2col(g, img, &mut col[i * px * plen..][..px * plen]);
            }
            if let Some(gk) = grad_kernel.as_deref_mut() {
                S::gemm(true, false, plen, rows, g.cout, S::one(), &col[..rows * plen], dout, S::one(), gk);
            }
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            S::gemm(false, true, rows, g.cout, plen, S::one(), dout, kernel, S::zero(), &mut dcol[..rows * plen]);
            for i in 0..count {
                let img = &mut gi[(start + i) * px * g.cin..][..px * g.cin];
                col2im_add(g, &dcol[i * px * plen..][..px * plen], img);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.h * g.w * g.cout];
        for n in 0..g.n {
            for y in 0..g.h {
                for xx in 0..g.w {
                    for co in 0..g.cout {
                        let mut acc = b[co];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = y as isize + ky as isize - (g.kh / 2) as isize;
                                let ix = xx as isize + kx as isize - (g.kw / 2) as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    acc += x[((n * g.h + iy as usize) * g.w + ix as usize) * g.cin + ci]
                                        * k[((ky * g.kw + kx) * g.cin + ci) * g.cout + co];
                                }
                            }
                        }
                        out[((n * g.h + y) * g.w + xx) * g.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_loops() {
        for (kh, kw) in [(3, 3), (1, 1), (5, 3)] {
            let g = ConvGeom { n: 11, h: 5, w: 4, cin: 3, cout: 2, kh, kw };
            let x: Vec<f64> = (0..g.n * 20 * 3).map(|i| ((i * 37 % 17) as f64) / 7.0 - 1.0).collect();
            let k: Vec<f64> = (0..kh * kw * 6).map(|i| ((i * 13 % 11) as f64) / 5.0 - 1.0).collect();
            let b = [0.25, -0.5];
            let got = forward(&g, &x, &k, Some(&b));
            let want = naive(&g, &x, &k, &b);
            for (a, w) in got.iter().zip(&want) {
                assert!((a - w).abs() < 1e-12, "{kh}x{kw}: {a} vs {w}");
            }
        }
    }
}
