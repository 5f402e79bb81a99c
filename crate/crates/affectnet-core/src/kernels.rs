//! Inner-loop kernels: matrix products and im2col/col2im for convolution.
//!
//! All kernels accumulate into `out` so callers can sum contributions across
//! a batch; zero the buffer first for a plain product. Loop orders are chosen
//! so the innermost loop runs over contiguous memory.

use crate::tensor::Element;

/// out(m,n) += a(m,k) * b(k,n)
pub fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
}

/// out(m,n) += a(m,k) * b(n,k)^T  — i.e. out[i,j] += dot(a[i,:], b[j,:])
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out(m,n) += a(k,m)^T * b(k,n)
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_pi * bv;
            }
        }
    }
}

/// Geometry of one conv2d application.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image (C,H,W) into a (C*kh*kw, out_h*out_w) patch matrix.
/// Out-of-bounds taps read as zero.
pub fn im2col<E: Element>(x: &[E], g: &ConvGeom, col: &mut [E]) {
    debug_assert_eq!(x.len(), g.in_ch * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                let mut idx = 0;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        for _ in 0..g.out_w {
                            dst[idx] = E::ZERO;
                            idx += 1;
                        }
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        dst[idx] = if iw < 0 || iw >= g.in_w as isize {
                            E::ZERO
                        } else {
                            src_row[iw as usize]
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the image, accumulating overlaps.
pub fn col2im_add<E: Element>(col: &[E], g: &ConvGeom, x_grad: &mut [E]) {
    debug_assert_eq!(x_grad.len(), g.in_ch * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut x_grad[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * cols..(row + 1) * cols];
                let mut idx = 0;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        idx += g.out_w;
                        continue;
                    }
                    let dst_row =
                        &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst_row[iw as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}
