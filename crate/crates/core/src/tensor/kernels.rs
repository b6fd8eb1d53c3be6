//! Dense numeric kernels behind the tape ops: GEMM variants, im2col/col2im
//! for 3-D convolution, and 2× resampling.
//!
//! Everything here runs single-threaded with a fixed reduction order, so
//! results are bit-reproducible for identical inputs. The GEMM inner loops
//! are written so the compiler can vectorize them: `gemm` and `gemm_atb`
//! stream unit-stride axpy updates, `gemm_abt` uses a multi-accumulator dot
//! product to break the FMA dependence chain.

use crate::dtype::Real;

const DOT_LANES: usize = 16;

/// Fixed-order dot product with independent accumulators.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [T::zero(); DOT_LANES];
    let mut i = 0;
    while i + DOT_LANES <= n {
        for u in 0..DOT_LANES {
            acc[u] = a[i + u].mul_add(b[i + u], acc[u]);
        }
        i += DOT_LANES;
    }
    let mut tail = T::zero();
    while i < n {
        tail = a[i].mul_add(b[i], tail);
        i += 1;
    }
    let mut width = DOT_LANES;
    while width > 1 {
        width /= 2;
        for u in 0..width {
            let hi = acc[u + width];
            acc[u] += hi;
        }
    }
    acc[0] + tail
}

/// y += a·x
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi = a.mul_add(*xi, *yi);
    }
}

/// c[M,N] += a[M,K] · b[K,N]
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(crow, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
}

/// c[M,N] += a[M,K] · b[N,K]ᵀ
pub(crate) fn gemm_abt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[M,N] += a[R,M]ᵀ · b[R,N]
pub(crate) fn gemm_atb<T: Real>(a: &[T], b: &[T], c: &mut [T], r: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..r {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(&mut c[i * n..(i + 1) * n], a[p * m + i], brow);
        }
    }
}

/// Shape bookkeeping for one conv3d application (cubic kernel, isotropic
/// stride/padding).
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn out_extent(ext: usize, k: usize, stride: usize, pad: usize) -> usize {
        (ext + 2 * pad - k) / stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn out_vol(&self) -> usize {
        self.od * self.oh * self.ow
    }
}

/// Unpack the conv patches of one [C,D,H,W] volume into cols[C·k³, od·oh·ow].
/// Out-of-bounds taps read as zero. Every slot of `cols` is written.
fn im2col<T: Real>(x: &[T], dims: &ConvDims, cols: &mut [T]) {
    let ConvDims {
        cin,
        d,
        h,
        w,
        k,
        stride,
        pad,
        od,
        oh,
        ow,
        ..
    } = *dims;
    debug_assert_eq!(cols.len(), dims.patch_len() * dims.out_vol());
    let mut idx = 0;
    for ci in 0..cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    for pd in 0..od {
                        let id = (pd * stride + kd) as isize - pad as isize;
                        if id < 0 || id >= d as isize {
                            cols[idx..idx + oh * ow].fill(T::zero());
                            idx += oh * ow;
                            continue;
                        }
                        for ph in 0..oh {
                            let ih = (ph * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                cols[idx..idx + ow].fill(T::zero());
                                idx += ow;
                                continue;
                            }
                            let base = ((ci * d + id as usize) * h + ih as usize) * w;
                            for pw in 0..ow {
                                let iw = (pw * stride + kw) as isize - pad as isize;
                                cols[idx] = if iw >= 0 && iw < w as isize {
                                    x[base + iw as usize]
                                } else {
                                    T::zero()
                                };
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`]: dx[C,D,H,W] += fold(dcols).
fn col2im<T: Real>(dcols: &[T], dims: &ConvDims, dx: &mut [T]) {
    let ConvDims {
        cin,
        d,
        h,
        w,
        k,
        stride,
        pad,
        od,
        oh,
        ow,
        ..
    } = *dims;
    let mut idx = 0;
    for ci in 0..cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    for pd in 0..od {
                        let id = (pd * stride + kd) as isize - pad as isize;
                        if id < 0 || id >= d as isize {
                            idx += oh * ow;
                            continue;
                        }
                        for ph in 0..oh {
                            let ih = (ph * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                idx += ow;
                                continue;
                            }
                            let base = ((ci * d + id as usize) * h + ih as usize) * w;
                            for pw in 0..ow {
                                let iw = (pw * stride + kw) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    dx[base + iw as usize] += dcols[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[B,Cout,od,oh,ow] = conv(x[B,Cin,D,H,W], w[Cout,Cin,k,k,k])
pub(crate) fn conv3d_forward<T: Real>(x: &[T], w: &[T], dims: &ConvDims) -> Vec<T> {
    let kvol = dims.patch_len();
    let lo = dims.out_vol();
    let in_vol = dims.cin * dims.d * dims.h * dims.w;
    let mut cols = vec![T::zero(); kvol * lo];
    let mut out = vec![T::zero(); dims.b * dims.cout * lo];
    for bi in 0..dims.b {
        im2col(&x[bi * in_vol..(bi + 1) * in_vol], dims, &mut cols);
        gemm(
            w,
            &cols,
            &mut out[bi * dims.cout * lo..(bi + 1) * dims.cout * lo],
            dims.cout,
            kvol,
            lo,
        );
    }
    out
}

/// Accumulates conv3d adjoints: gx += dL/dx and/or gw += dL/dw given
/// gout = dL/dout; `None` skips that side's work entirely. The patch matrix
/// is rebuilt here rather than saved by the forward pass, trading a second
/// im2col for not holding K·L floats per conv on the tape.
pub(crate) fn conv3d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    dims: &ConvDims,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let kvol = dims.patch_len();
    let lo = dims.out_vol();
    let in_vol = dims.cin * dims.d * dims.h * dims.w;
    let mut cols = if gw.is_some() {
        vec![T::zero(); kvol * lo]
    } else {
        Vec::new()
    };
    let mut dcols = if gx.is_some() {
        vec![T::zero(); kvol * lo]
    } else {
        Vec::new()
    };
    for bi in 0..dims.b {
        let go = &gout[bi * dims.cout * lo..(bi + 1) * dims.cout * lo];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&x[bi * in_vol..(bi + 1) * in_vol], dims, &mut cols);
            gemm_abt(go, &cols, gw, dims.cout, lo, kvol);
        }
        if let Some(gx) = gx.as_deref_mut() {
            dcols.fill(T::zero());
            gemm_atb(w, go, &mut dcols, dims.cout, kvol, lo);
            col2im(&dcols, dims, &mut gx[bi * in_vol..(bi + 1) * in_vol]);
        }
    }
}

/// 2³ average pooling of [B,C,D,H,W]; all extents must be even.
pub(crate) fn down2<T: Real>(x: &[T], b: usize, c: usize, d: usize, h: usize, w: usize) -> Vec<T> {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let eighth = T::from_f64(0.125);
    let mut out = vec![T::zero(); b * c * od * oh * ow];
    let mut oi = 0;
    for bc in 0..b * c {
        let src = &x[bc * d * h * w..(bc + 1) * d * h * w];
        for pd in 0..od {
            for ph in 0..oh {
                for pw in 0..ow {
                    // Pairwise reduction keeps the mean of 8 equal values
                    // exact (only doublings), so up2∘down2 round-trips
                    // blockwise-constant volumes bit-for-bit.
                    let mut pair = [T::zero(); 4];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((2 * pd + dz) * h + 2 * ph + dy) * w + 2 * pw;
                            pair[dz * 2 + dy] = src[row] + src[row + 1];
                        }
                    }
                    out[oi] = ((pair[0] + pair[1]) + (pair[2] + pair[3])) * eighth;
                    oi += 1;
                }
            }
        }
    }
    out
}

/// Adjoint of [`down2`]: spreads each output gradient uniformly over its 2³ block.
pub(crate) fn down2_backward<T: Real>(
    gout: &[T],
    b: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    gx: &mut [T],
) {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let eighth = T::from_f64(0.125);
    let mut oi = 0;
    for bc in 0..b * c {
        let dst = &mut gx[bc * d * h * w..(bc + 1) * d * h * w];
        for pd in 0..od {
            for ph in 0..oh {
                for pw in 0..ow {
                    let g = gout[oi] * eighth;
                    oi += 1;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((2 * pd + dz) * h + 2 * ph + dy) * w + 2 * pw;
                            dst[row] += g;
                            dst[row + 1] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbor 2× upsampling of [B,C,D,H,W].
pub(crate) fn up2<T: Real>(x: &[T], b: usize, c: usize, d: usize, h: usize, w: usize) -> Vec<T> {
    let (od, oh, ow) = (d * 2, h * 2, w * 2);
    let mut out = vec![T::zero(); b * c * od * oh * ow];
    for bc in 0..b * c {
        let src = &x[bc * d * h * w..(bc + 1) * d * h * w];
        let dst = &mut out[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        for pd in 0..od {
            for ph in 0..oh {
                let srow = ((pd / 2) * h + ph / 2) * w;
                let drow = (pd * oh + ph) * ow;
                for pw in 0..ow {
                    dst[drow + pw] = src[srow + pw / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`up2`]: each source voxel collects the gradients of its 8 copies.
pub(crate) fn up2_backward<T: Real>(
    gout: &[T],
    b: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    gx: &mut [T],
) {
    let (od, oh, ow) = (d * 2, h * 2, w * 2);
    for bc in 0..b * c {
        let go = &gout[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        let dst = &mut gx[bc * d * h * w..(bc + 1) * d * h * w];
        for pd in 0..od {
            for ph in 0..oh {
                let srow = ((pd / 2) * h + ph / 2) * w;
                let drow = (pd * oh + ph) * ow;
                for pw in 0..ow {
                    dst[srow + pw / 2] += go[drow + pw];
                }
            }
        }
    }
}
