//! Dense kernels shared by the differentiable ops.

use crate::tensor::Element;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Every `c[i][j]` accumulates its products in ascending `p`, and zero
/// entries of `a` contribute nothing, so the result does not depend on the
/// row blocking.
pub fn gemm_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut rows = c.chunks_exact_mut(n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, c1, c2, c3) = (
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
        );
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let av = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
            if av.iter().all(|&v| v != E::zero()) {
                let lanes = c0.iter_mut().zip(c1.iter_mut()).zip(c2.iter_mut()).zip(c3.iter_mut());
                for ((((x0, x1), x2), x3), &bv) in lanes.zip(brow) {
                    *x0 = *x0 + av[0] * bv;
                    *x1 = *x1 + av[1] * bv;
                    *x2 = *x2 + av[2] * bv;
                    *x3 = *x3 + av[3] * bv;
                }
            } else {
                for (crow, &aip) in [&mut *c0, &mut *c1, &mut *c2, &mut *c3].into_iter().zip(&av) {
                    axpy(crow, aip, brow);
                }
            }
        }
        i += 4;
    }
    for crow in rows {
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(crow, aip, &b[p * n..(p + 1) * n]);
        }
        i += 1;
    }
}

#[inline]
fn axpy<E: Element>(c: &mut [E], a: E, b: &[E]) {
    if a == E::zero() {
        return;
    }
    for (cv, &bv) in c.iter_mut().zip(b) {
        *cv = *cv + a * bv;
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub fn transpose<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a square-kernel 2-D convolution on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 stride-1 convolutions read the input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Outputs `o` in `lo..hi` whose input coordinate `o·stride + off − pad`
    /// lies inside `0..len_in`.
    #[inline]
    fn valid(&self, off: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let lo = if off >= self.pad {
            0
        } else {
            (self.pad - off).div_ceil(self.stride)
        };
        let hi = if len_in + self.pad > off {
            len_out.min((len_in + self.pad - off - 1) / self.stride + 1)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(row, out_start, in_start, len)` for every run of in-bounds
    /// taps, in `(c, ki, kj, oy)` order. Within a run the output index steps by
    /// one and the input index by `stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for c in 0..self.cin {
            for ki in 0..self.k {
                let (ylo, yhi) = self.valid(ki, self.h, self.ho);
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let (xlo, xhi) = self.valid(kj, self.w, self.wo);
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ki - self.pad;
                        let start = (c * self.h + iy) * self.w + xlo * self.stride + kj - self.pad;
                        f(row, oy * self.wo + xlo, start, xhi - xlo);
                    }
                }
            }
        }
    }

    /// Column matrix `[cin·k·k, ho·wo]`.
    pub fn im2col<E: Element>(&self, x: &[E]) -> Vec<E> {
        let p = self.out_len();
        let s = self.stride;
        let mut cols = vec![E::zero(); self.patch_len() * p];
        self.for_each_run(|row, o, i, len| {
            let dst = &mut cols[row * p + o..row * p + o + len];
            if s == 1 {
                dst.copy_from_slice(&x[i..i + len]);
            } else {
                dst.iter_mut().zip(x[i..].iter().step_by(s)).for_each(|(d, &v)| *d = v);
            }
        });
        cols
    }

    /// Transposed column matrix `[ho·wo, cin·k·k]`.
    pub fn im2col_t<E: Element>(&self, x: &[E]) -> Vec<E> {
        let q = self.patch_len();
        let s = self.stride;
        let mut cols = vec![E::zero(); q * self.out_len()];
        self.for_each_run(|row, o, i, len| {
            for t in 0..len {
                cols[(o + t) * q + row] = x[i + t * s];
            }
        });
        cols
    }

    /// Scatter-adds a column-matrix gradient back onto the input image.
    pub fn col2im_acc<E: Element>(&self, dcols: &[E], dx: &mut [E]) {
        let p = self.out_len();
        let s = self.stride;
        self.for_each_run(|row, o, i, len| {
            let src = &dcols[row * p + o..row * p + o + len];
            if s == 1 {
                dx[i..i + len].iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
            } else {
                dx[i..].iter_mut().step_by(s).zip(src).for_each(|(d, &v)| *d = *d + v);
            }
        });
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
