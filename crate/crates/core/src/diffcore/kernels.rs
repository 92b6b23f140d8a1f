//! Raw numeric kernels shared by the forward and backward passes.

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of size `m x k` and
/// `op(b)` of size `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them within bounds.
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

/// `op(a) * op(b)` into a fresh buffer, skipping the zero fill.
pub(crate) fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = Vec::with_capacity(m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: with beta = 0 dgemm writes every element of C without reading
    // it, so the spare capacity is fully initialised before set_len.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
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
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom {
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

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output indices `lo..hi` along one axis whose tap at offset `kk` lands
/// inside `0..n` once padding is removed.
fn valid_range(kk: usize, n: usize, n_out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kk {
        (pad - kk).div_ceil(stride)
    } else {
        0
    };
    let hi = if n + pad > kk {
        ((n + pad - kk - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds zero-padded patches into a `(cin*k*k) x (ho*wo)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.rows() * g.cols());
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(ky, g.h, g.ho, g.stride, g.pad);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(kx, g.w, g.wo, g.stride, g.pad);
                out.resize(out.len() + ylo * g.wo, 0.0);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    out.resize(out.len() + xlo, 0.0);
                    let ix0 = xlo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out.extend_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        out.extend(src_row[ix0..].iter().step_by(g.stride).take(xhi - xlo));
                    }
                    out.resize(out.len() + g.wo - xhi, 0.0);
                }
                out.resize(out.len() + (g.ho - yhi) * g.wo, 0.0);
            }
        }
    }
    debug_assert_eq!(out.len(), g.rows() * g.cols());
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(ky, g.h, g.ho, g.stride, g.pad);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(kx, g.w, g.wo, g.stride, g.pad);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let s = &src[oy * g.wo + xlo..oy * g.wo + xhi];
                    let ix0 = xlo * g.stride + kx - g.pad;
                    let d = &mut plane[iy * g.w + ix0..(iy + 1) * g.w];
                    if g.stride == 1 {
                        for (dv, sv) in d[..s.len()].iter_mut().zip(s) {
                            *dv += sv;
                        }
                    } else {
                        for (dv, sv) in d.iter_mut().step_by(g.stride).zip(s) {
                            *dv += sv;
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 box filter with replicate padding over the last two axes.
pub(crate) fn avgpool3(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
            let [r0, r1, r2] = ys.map(|yy| &src[yy * w..(yy + 1) * w]);
            let d = &mut dst[y * w..(y + 1) * w];
            let edge = |xx: usize| {
                let xs = [xx.saturating_sub(1), xx, (xx + 1).min(w - 1)];
                let mut acc = 0.0;
                for r in [r0, r1, r2] {
                    for &xv in &xs {
                        acc += r[xv];
                    }
                }
                acc / 9.0
            };
            d[0] = edge(0);
            for xx in 1..w.saturating_sub(1) {
                let acc = r0[xx - 1]
                    + r0[xx]
                    + r0[xx + 1]
                    + r1[xx - 1]
                    + r1[xx]
                    + r1[xx + 1]
                    + r2[xx - 1]
                    + r2[xx]
                    + r2[xx + 1];
                d[xx] = acc / 9.0;
            }
            d[w - 1] = edge(w - 1);
        }
    }
    out
}

/// Sources `(i, multiplicity)` along one axis whose replicate-padded window
/// covers `o`, ascending.
fn pool_sources(o: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    (o.saturating_sub(1)..=(o + 1).min(n - 1)).filter_map(move |i| {
        let m = [i.saturating_sub(1), i, (i + 1).min(n - 1)]
            .iter()
            .filter(|&&j| j == o)
            .count();
        (m > 0).then_some((i, m))
    })
}

/// Adjoint of [`avgpool3`], gathered per output in the order a row-major
/// scatter would add the contributions.
pub(crate) fn avgpool3_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut dx = vec![0.0; g.len()];
    let gather = |src: &[f64], y: usize, xx: usize| {
        let mut acc = 0.0;
        for (yy, my) in pool_sources(y, h) {
            for (xv, mx) in pool_sources(xx, w) {
                let v = src[yy * w + xv] / 9.0;
                for _ in 0..my * mx {
                    acc += v;
                }
            }
        }
        acc
    };
    for p in 0..planes {
        let src = &g[p * h * w..(p + 1) * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let d = &mut dst[y * w..(y + 1) * w];
            if y == 0 || y + 1 >= h {
                for (xx, dv) in d.iter_mut().enumerate() {
                    *dv = gather(src, y, xx);
                }
                continue;
            }
            let [r0, r1, r2] = [y - 1, y, y + 1].map(|yy| &src[yy * w..(yy + 1) * w]);
            d[0] = gather(src, y, 0);
            for xx in 1..w.saturating_sub(1) {
                d[xx] = r0[xx - 1] / 9.0
                    + r0[xx] / 9.0
                    + r0[xx + 1] / 9.0
                    + r1[xx - 1] / 9.0
                    + r1[xx] / 9.0
                    + r1[xx + 1] / 9.0
                    + r2[xx - 1] / 9.0
                    + r2[xx] / 9.0
                    + r2[xx + 1] / 9.0;
            }
            d[w - 1] = gather(src, y, w - 1);
        }
    }
    dx
}

/// Corner indices and weights of one bilinear lookup.
///
/// Coordinates are clamped to `[0, size-1]`; `inside` is false when the
/// clamp was active, in which case the coordinate gradient is zero. The
/// supporting cell is `[floor(c), floor(c)+1]`, except on the last
/// row/column which uses the cell to its left (resp. above). An integer
/// coordinate therefore takes its derivative from the cell it opens.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
    pub inside: bool,
}

pub(crate) fn tap(c: f64, size: usize) -> Tap {
    let hi = (size - 1) as f64;
    let inside = (0.0..=hi).contains(&c);
    let cc = c.clamp(0.0, hi);
    if size == 1 {
        return Tap {
            i0: 0,
            i1: 0,
            frac: 0.0,
            inside: false,
        };
    }
    let i0 = (cc.floor() as usize).min(size - 2);
    Tap {
        i0,
        i1: i0 + 1,
        frac: cc - i0 as f64,
        inside,
    }
}
