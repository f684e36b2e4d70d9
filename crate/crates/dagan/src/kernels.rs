//! Slice-level compute kernels behind the tape ops.
//!
//! Every reduction has one canonical accumulation order, fixed by shape alone,
//! so results are bit-identical across runs. The stride-1 convolution paths
//! are register-tiled (4 output channels x 16 output columns) and rely on
//! `mul_add` lowering to hardware FMA; per output element they apply the same
//! `(ci, kh, kw)` fold as the scalar fallback, so both paths agree exactly.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub(crate) const LANES: usize = 16;
const CO_BLOCK: usize = 4;

// ── Broadcasting ─────────────────────────────────────────────────────────────

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d >= rank - a.len() { a[d - (rank - a.len())] } else { 1 };
        let db = if d >= rank - b.len() { b[d - (rank - b.len())] } else { 1 };
        out[d] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Broadcast { a: a.to_vec(), b: b.to_vec() });
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` when broadcast against `out_shape`
/// (right-aligned; broadcast axes get stride 0).
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

pub(crate) fn binary_map<T: Scalar>(
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let total: usize = out_shape.iter().product();
    if ashape == out_shape && bshape == out_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let astr = bcast_strides(ashape, out_shape);
    let bstr = bcast_strides(bshape, out_shape);
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for _ in 0..total {
        out.push(f(a[ai], b[bi]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += astr[d];
            bi += bstr[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= astr[d] * out_shape[d];
            bi -= bstr[d] * out_shape[d];
        }
    }
    out
}

/// `g` (laid out as `gshape`) times `b` broadcast up to `gshape`.
pub(crate) fn broadcast_mul_into<T: Scalar>(
    g: &[T],
    gshape: &[usize],
    b: &[T],
    bshape: &[usize],
) -> Vec<T> {
    binary_map(g, gshape, b, bshape, gshape, |x, y| x * y)
}

/// Sum `g` over the axes that were broadcast to reach `gshape` from `target`.
/// Row-major traversal of `g`, so the accumulation order is fixed.
pub(crate) fn reduce_broadcast<T: Scalar>(g: &[T], gshape: &[usize], target: &[usize]) -> Vec<T> {
    if gshape == target {
        return g.to_vec();
    }
    let tstr = bcast_strides(target, gshape);
    let rank = gshape.len();
    let total: usize = gshape.iter().product();
    let tlen: usize = target.iter().product();
    let mut out = vec![T::ZERO; tlen];
    let mut idx = vec![0usize; rank];
    let mut ti = 0usize;
    for &gv in g.iter().take(total) {
        out[ti] += gv;
        for d in (0..rank).rev() {
            idx[d] += 1;
            ti += tstr[d];
            if idx[d] < gshape[d] {
                break;
            }
            idx[d] = 0;
            ti -= tstr[d] * gshape[d];
        }
    }
    out
}

// ── Shape helpers ────────────────────────────────────────────────────────────

/// `(n, c, h, w)` view of a rank-3 or rank-4 shape (rank 3 means one sample).
pub(crate) fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2])),
        4 => Ok((shape[0], shape[1], shape[2], shape[3])),
        _ => Err(Error::Shape {
            op,
            detail: format!("expected rank 3 or 4 input, got shape {shape:?}"),
        }),
    }
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let eff = dil.checked_mul(k.checked_sub(1)?)? + 1;
    let padded = input + 2 * pad;
    if padded < eff || stride == 0 {
        return None;
    }
    Some((padded - eff) / stride + 1)
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub oh: usize,
    pub ow: usize,
    pub batched: bool,
}

impl ConvGeom {
    pub fn from_shapes(
        xshape: &[usize],
        wshape: &[usize],
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<ConvGeom> {
        let (n, cin, h, w) = nchw(xshape, "conv2d")?;
        if wshape.len() != 4 || wshape[2] != wshape[3] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("weight must be [cout, cin, k, k], got {wshape:?}"),
            });
        }
        if wshape[1] != cin {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input has {cin} channels, weight expects {}", wshape[1]),
            });
        }
        let (cout, k) = (wshape[0], wshape[2]);
        let oh = conv_out_dim(h, k, stride, pad, dil);
        let ow = conv_out_dim(w, k, stride, pad, dil);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!(
                    "kernel {k} (stride {stride}, pad {pad}, dilation {dil}) does not fit {h}x{w}"
                ),
            });
        };
        Ok(ConvGeom { n, cin, h, w, cout, k, stride, pad, dil, oh, ow, batched: xshape.len() == 4 })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.cout, self.oh, self.ow]
        } else {
            vec![self.cout, self.oh, self.ow]
        }
    }
}

fn pad_nchw<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::ZERO; n * c * ph * pw];
    for img in 0..n * c {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut out[img * ph * pw..(img + 1) * ph * pw];
        for row in 0..h {
            dst[(row + p) * pw + p..(row + p) * pw + p + w]
                .copy_from_slice(&src[row * w..(row + 1) * w]);
        }
    }
    out
}

// ── Convolution ──────────────────────────────────────────────────────────────

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], wgt: &[T], bias: &[T]) -> Vec<T> {
    let xp = pad_nchw(x, g.n, g.cin, g.h, g.w, g.pad);
    let mut out = vec![T::ZERO; g.n * g.cout * g.oh * g.ow];
    if g.stride == 1 && g.dil == 1 && g.ow >= LANES {
        conv_fwd_s1_tiled(g, &xp, wgt, bias, &mut out);
    } else {
        conv_fwd_gemm(g, &xp, wgt, bias, &mut out);
    }
    out
}

/// Scalar reference path. Per output element: start at the bias and fold
/// `mul_add` over `(ci, kh, kw)` in that order. Both production paths apply
/// the same fold, so all three agree bit-for-bit.
#[cfg(test)]
fn conv_fwd_generic<T: Scalar>(g: &ConvGeom, xp: &[T], wgt: &[T], bias: &[T], out: &mut [T]) {
    let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    for ni in 0..g.n {
        for co in 0..g.cout {
            let obase = (ni * g.cout + co) * g.oh * g.ow;
            for ohi in 0..g.oh {
                for owi in 0..g.ow {
                    let mut acc = bias[co];
                    for ci in 0..g.cin {
                        let prow = (ni * g.cin + ci) * ph;
                        for kh in 0..g.k {
                            let ih = ohi * g.stride + kh * g.dil;
                            let rbase = (prow + ih) * pw + owi * g.stride;
                            for kw in 0..g.k {
                                let wv = wgt[((co * g.cin + ci) * g.k + kh) * g.k + kw];
                                acc = xp[rbase + kw * g.dil].mul_add(wv, acc);
                            }
                        }
                    }
                    out[obase + ohi * g.ow + owi] = acc;
                }
            }
        }
    }
}

/// Stride-1 path, register-tiled over 4 output channels and 16 columns.
/// Same per-element fold as [`conv_fwd_generic`], so the results match it
/// bit-for-bit; tail columns and leftover channels fall back to scalar code.
fn conv_fwd_s1_tiled<T: Scalar>(g: &ConvGeom, xp: &[T], wgt: &[T], bias: &[T], out: &mut [T]) {
    let pw = g.w + 2 * g.pad;
    let ph = g.h + 2 * g.pad;
    let full_blocks = g.ow / LANES;
    let co_full = g.cout - g.cout % CO_BLOCK;

    for ni in 0..g.n {
        let xbase = ni * g.cin * ph * pw;
        let obase_n = ni * g.cout * g.oh * g.ow;

        let mut co0 = 0;
        while co0 < co_full {
            for ohi in 0..g.oh {
                for blk in 0..full_blocks {
                    let owb = blk * LANES;
                    let mut acc = [[T::ZERO; LANES]; CO_BLOCK];
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a = [bias[co0 + c]; LANES];
                    }
                    for ci in 0..g.cin {
                        let rbase = xbase + (ci * ph + ohi) * pw + owb;
                        for kh in 0..g.k {
                            let row = &xp[rbase + kh * pw..rbase + kh * pw + LANES + g.k - 1];
                            for kw in 0..g.k {
                                let mut seg = [T::ZERO; LANES];
                                seg.copy_from_slice(&row[kw..kw + LANES]);
                                let wb = (co0 * g.cin + ci) * g.k * g.k + kh * g.k + kw;
                                let wstep = g.cin * g.k * g.k;
                                for c in 0..CO_BLOCK {
                                    let wv = wgt[wb + c * wstep];
                                    let a = &mut acc[c];
                                    for l in 0..LANES {
                                        a[l] = seg[l].mul_add(wv, a[l]);
                                    }
                                }
                            }
                        }
                    }
                    for (c, lane) in acc.iter().enumerate() {
                        let off = obase_n + (co0 + c) * g.oh * g.ow + ohi * g.ow + owb;
                        out[off..off + LANES].copy_from_slice(lane);
                    }
                }
            }
            co0 += CO_BLOCK;
        }

        // Leftover output channels, still 16 columns at a time.
        for co in co_full..g.cout {
            for ohi in 0..g.oh {
                for blk in 0..full_blocks {
                    let owb = blk * LANES;
                    let mut acc = [bias[co]; LANES];
                    for ci in 0..g.cin {
                        let rbase = xbase + (ci * ph + ohi) * pw + owb;
                        for kh in 0..g.k {
                            let row = &xp[rbase + kh * pw..rbase + kh * pw + LANES + g.k - 1];
                            for kw in 0..g.k {
                                let wv = wgt[((co * g.cin + ci) * g.k + kh) * g.k + kw];
                                let mut seg = [T::ZERO; LANES];
                                seg.copy_from_slice(&row[kw..kw + LANES]);
                                for l in 0..LANES {
                                    acc[l] = seg[l].mul_add(wv, acc[l]);
                                }
                            }
                        }
                    }
                    let off = obase_n + co * g.oh * g.ow + ohi * g.ow + owb;
                    out[off..off + LANES].copy_from_slice(&acc);
                }
            }
        }

        // Tail columns for every output channel.
        if full_blocks * LANES < g.ow {
            for co in 0..g.cout {
                for ohi in 0..g.oh {
                    for owi in full_blocks * LANES..g.ow {
                        let mut acc = bias[co];
                        for ci in 0..g.cin {
                            let rbase = xbase + (ci * ph + ohi) * pw + owi;
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let wv = wgt[((co * g.cin + ci) * g.k + kh) * g.k + kw];
                                    acc = xp[rbase + kh * pw + kw].mul_add(wv, acc);
                                }
                            }
                        }
                        out[obase_n + co * g.oh * g.ow + ohi * g.ow + owi] = acc;
                    }
                }
            }
        }
    }
}

/// Seed for each output element of [`gemm`].
#[derive(Clone, Copy)]
enum GemmInit<'a, T> {
    /// Row `i` starts at `bias[i]`.
    Bias(&'a [T]),
    Zero,
    /// Each element continues from its current value in `out`.
    Accumulate,
}

/// `out[i, j] = seed + Σ_q a[i, q] · b[q, j]` with the sum folded by `mul_add`
/// in ascending `q`. Register-tiled 4 rows by 16 columns; every tile walks the
/// same per-element fold, so the result does not depend on the tiling.
fn gemm<T: Scalar>(
    m: usize,
    kk: usize,
    n: usize,
    a: &[T],
    b: &[T],
    init: GemmInit<T>,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * kk);
    debug_assert_eq!(b.len(), kk * n);
    debug_assert_eq!(out.len(), m * n);
    let n_full = n - n % LANES;
    let m_full = m - m % CO_BLOCK;

    let mut i0 = 0;
    while i0 < m_full {
        let mut j0 = 0;
        while j0 < n_full {
            let mut acc = [[T::ZERO; LANES]; CO_BLOCK];
            for (r, accr) in acc.iter_mut().enumerate() {
                match init {
                    GemmInit::Bias(bv) => *accr = [bv[i0 + r]; LANES],
                    GemmInit::Zero => {}
                    GemmInit::Accumulate => {
                        accr.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + LANES]);
                    }
                }
            }
            for q in 0..kk {
                let mut seg = [T::ZERO; LANES];
                seg.copy_from_slice(&b[q * n + j0..q * n + j0 + LANES]);
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * kk + q];
                    for l in 0..LANES {
                        accr[l] = seg[l].mul_add(av, accr[l]);
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + LANES].copy_from_slice(accr);
            }
            j0 += LANES;
        }
        i0 += CO_BLOCK;
    }

    for i in m_full..m {
        let mut j0 = 0;
        while j0 < n_full {
            let mut acc = [T::ZERO; LANES];
            match init {
                GemmInit::Bias(bv) => acc = [bv[i]; LANES],
                GemmInit::Zero => {}
                GemmInit::Accumulate => acc.copy_from_slice(&out[i * n + j0..i * n + j0 + LANES]),
            }
            for q in 0..kk {
                let av = a[i * kk + q];
                let mut seg = [T::ZERO; LANES];
                seg.copy_from_slice(&b[q * n + j0..q * n + j0 + LANES]);
                for l in 0..LANES {
                    acc[l] = seg[l].mul_add(av, acc[l]);
                }
            }
            out[i * n + j0..i * n + j0 + LANES].copy_from_slice(&acc);
            j0 += LANES;
        }
    }

    if n_full < n {
        for i in 0..m {
            for j in n_full..n {
                let mut acc = match init {
                    GemmInit::Bias(bv) => bv[i],
                    GemmInit::Zero => T::ZERO,
                    GemmInit::Accumulate => out[i * n + j],
                };
                for q in 0..kk {
                    acc = b[q * n + j].mul_add(a[i * kk + q], acc);
                }
                out[i * n + j] = acc;
            }
        }
    }
}

/// Patch matrix `col[(ci·k + kh)·k + kw, ohi·ow + owi]` for one padded sample.
fn im2col<T: Scalar>(g: &ConvGeom, xp: &[T], col: &mut [T]) {
    let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let ohw = g.oh * g.ow;
    let mut q = 0;
    for ci in 0..g.cin {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let dst = &mut col[q * ohw..(q + 1) * ohw];
                for ohi in 0..g.oh {
                    let src = (ci * ph + ohi * g.stride + kh * g.dil) * pw + kw * g.dil;
                    let drow = &mut dst[ohi * g.ow..(ohi + 1) * g.ow];
                    if g.stride == 1 {
                        drow.copy_from_slice(&xp[src..src + g.ow]);
                    } else {
                        for (owi, d) in drow.iter_mut().enumerate() {
                            *d = xp[src + owi * g.stride];
                        }
                    }
                }
                q += 1;
            }
        }
    }
}

/// Transposed patch matrix `colp[opix, q]`, used when the patch axis is the
/// reduction axis.
fn im2col_pixmajor<T: Scalar>(g: &ConvGeom, xp: &[T], colp: &mut [T]) {
    let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let kkdim = g.cin * g.k * g.k;
    for ohi in 0..g.oh {
        for owi in 0..g.ow {
            let opix = ohi * g.ow + owi;
            let dst = &mut colp[opix * kkdim..(opix + 1) * kkdim];
            let mut q = 0;
            for ci in 0..g.cin {
                for kh in 0..g.k {
                    let src = (ci * ph + ohi * g.stride + kh * g.dil) * pw + owi * g.stride;
                    for kw in 0..g.k {
                        dst[q] = xp[src + kw * g.dil];
                        q += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch-matrix gradient back onto one padded sample, the
/// inverse indexing of [`im2col`]. Overlaps add in ascending `q` then pixel
/// order.
fn col2im_add<T: Scalar>(g: &ConvGeom, dcol: &[T], ph: usize, pw: usize, dxp: &mut [T]) {
    let ohw = g.oh * g.ow;
    let mut q = 0;
    for ci in 0..g.cin {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let src = &dcol[q * ohw..(q + 1) * ohw];
                for ohi in 0..g.oh {
                    let dst = (ci * ph + ohi * g.stride + kh * g.dil) * pw + kw * g.dil;
                    for owi in 0..g.ow {
                        dxp[dst + owi * g.stride] += src[ohi * g.ow + owi];
                    }
                }
                q += 1;
            }
        }
    }
}

/// Fallback forward for strided or dilated geometry: per sample, gather the
/// patches and multiply by the weight matrix. Per output element this folds
/// exactly like [`conv_fwd_s1_tiled`], bias first then ascending `(ci, kh,
/// kw)`, so the two paths agree bit-for-bit where their geometries overlap.
fn conv_fwd_gemm<T: Scalar>(g: &ConvGeom, xp: &[T], wgt: &[T], bias: &[T], out: &mut [T]) {
    let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let kkdim = g.cin * g.k * g.k;
    let ohw = g.oh * g.ow;
    let mut col = vec![T::ZERO; kkdim * ohw];
    for ni in 0..g.n {
        im2col(g, &xp[ni * g.cin * ph * pw..(ni + 1) * g.cin * ph * pw], &mut col);
        gemm(
            g.cout,
            kkdim,
            ohw,
            wgt,
            &col,
            GemmInit::Bias(bias),
            &mut out[ni * g.cout * ohw..(ni + 1) * g.cout * ohw],
        );
    }
}

pub(crate) fn conv2d_dx<T: Scalar>(g: &ConvGeom, wgt: &[T], gout: &[T]) -> Vec<T> {
    if g.stride == 1 && g.dil == 1 && g.pad < g.k {
        // Full correlation: flip the kernel spatially, swap channel roles, and
        // run the stride-1 forward over the padded output gradient.
        let mut wt = vec![T::ZERO; g.cin * g.cout * g.k * g.k];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        wt[((ci * g.cout + co) * g.k + kh) * g.k + kw] =
                            wgt[((co * g.cin + ci) * g.k + (g.k - 1 - kh)) * g.k + (g.k - 1 - kw)];
                    }
                }
            }
        }
        let gt = ConvGeom {
            n: g.n,
            cin: g.cout,
            h: g.oh,
            w: g.ow,
            cout: g.cin,
            k: g.k,
            stride: 1,
            pad: g.k - 1 - g.pad,
            dil: 1,
            oh: g.h,
            ow: g.w,
            batched: g.batched,
        };
        let zero_bias = vec![T::ZERO; g.cin];
        return conv2d_forward(&gt, gout, &wt, &zero_bias);
    }

    // Strided/dilated form: dcol = Wᵀ · gout per sample, scattered back by
    // col2im into the padded gradient, then cropped.
    let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let kkdim = g.cin * g.k * g.k;
    let ohw = g.oh * g.ow;
    let mut wt = vec![T::ZERO; kkdim * g.cout];
    for co in 0..g.cout {
        for q in 0..kkdim {
            wt[q * g.cout + co] = wgt[co * kkdim + q];
        }
    }
    let mut dcol = vec![T::ZERO; kkdim * ohw];
    let mut dxp = vec![T::ZERO; g.cin * ph * pw];
    let mut dx = vec![T::ZERO; g.n * g.cin * g.h * g.w];
    for ni in 0..g.n {
        gemm(
            kkdim,
            g.cout,
            ohw,
            &wt,
            &gout[ni * g.cout * ohw..(ni + 1) * g.cout * ohw],
            GemmInit::Zero,
            &mut dcol,
        );
        dxp.fill(T::ZERO);
        col2im_add(g, &dcol, ph, pw, &mut dxp);
        for ci in 0..g.cin {
            for ih in 0..g.h {
                let src = &dxp[(ci * ph + ih + g.pad) * pw + g.pad..][..g.w];
                dx[((ni * g.cin + ci) * g.h + ih) * g.w..][..g.w].copy_from_slice(src);
            }
        }
    }
    dx
}

// Dispatch is keyed on geometry, so a given layer always reduces its weight
// gradient in the same order. Stride-1 path: bands of up to 4 output rows are
// reduced in 16 lanes over each row's aligned prefix (horizontal sum in lane
// order, then the rows' sequential tails), and the band partials accumulate
// in (sample, band) order. GEMM path: pixels fold sequentially per sample.
pub(crate) fn conv2d_dw<T: Scalar>(g: &ConvGeom, x: &[T], gout: &[T]) -> Vec<T> {
    let xp = pad_nchw(x, g.n, g.cin, g.h, g.w, g.pad);
    let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let kkdim = g.cin * g.k * g.k;
    let mut dw = vec![T::ZERO; g.cout * kkdim];

    if g.stride == 1 && g.dil == 1 && g.ow >= LANES {
        let full = g.ow - g.ow % LANES;
        let co_full = g.cout - g.cout % CO_BLOCK;
        let q_full = kkdim - kkdim % CO_BLOCK;
        // Padded-input offset of patch row q at output row 0; each output row
        // advances it by pw.
        let qoff: Vec<usize> = (0..kkdim)
            .map(|q| {
                let (ci, r) = (q / (g.k * g.k), q % (g.k * g.k));
                (ci * ph + r / g.k) * pw + r % g.k
            })
            .collect();
        // Rows are grouped in bands of 4 so each accumulator set is folded
        // once per band instead of once per row, while the band's input and
        // gradient rows stay cache resident.
        const BAND: usize = 4;
        for ni in 0..g.n {
            let gbase = ni * g.cout * g.oh * g.ow;
            let xbase = ni * g.cin * ph * pw;
            let mut b0 = 0;
            while b0 < g.oh {
                let bend = (b0 + BAND).min(g.oh);

                // 4x4 tiles of (co, q) entries reduced over this band.
                let mut co0 = 0;
                while co0 < co_full {
                    let grows: [&[T]; CO_BLOCK] = std::array::from_fn(|r| {
                        &gout[gbase + (co0 + r) * g.oh * g.ow..][..g.oh * g.ow]
                    });
                    let mut q0 = 0;
                    while q0 < q_full {
                        let xrows: [&[T]; CO_BLOCK] =
                            std::array::from_fn(|s| &xp[xbase + qoff[q0 + s]..]);
                        let mut acc = [[T::ZERO; LANES]; CO_BLOCK * CO_BLOCK];
                        for ohi in b0..bend {
                            let go = ohi * g.ow;
                            let xo = ohi * pw;
                            let mut owi = 0;
                            while owi < full {
                                let mut asegs = [[T::ZERO; LANES]; CO_BLOCK];
                                let mut bsegs = [[T::ZERO; LANES]; CO_BLOCK];
                                for r in 0..CO_BLOCK {
                                    asegs[r].copy_from_slice(&grows[r][go + owi..go + owi + LANES]);
                                }
                                for s in 0..CO_BLOCK {
                                    bsegs[s].copy_from_slice(&xrows[s][xo + owi..xo + owi + LANES]);
                                }
                                for r in 0..CO_BLOCK {
                                    for s in 0..CO_BLOCK {
                                        let a = &mut acc[r * CO_BLOCK + s];
                                        for l in 0..LANES {
                                            a[l] = asegs[r][l].mul_add(bsegs[s][l], a[l]);
                                        }
                                    }
                                }
                                owi += LANES;
                            }
                        }
                        for r in 0..CO_BLOCK {
                            for s in 0..CO_BLOCK {
                                let mut t = T::ZERO;
                                for l in acc[r * CO_BLOCK + s] {
                                    t += l;
                                }
                                for ohi in b0..bend {
                                    for owi in full..g.ow {
                                        t = grows[r][ohi * g.ow + owi]
                                            .mul_add(xrows[s][ohi * pw + owi], t);
                                    }
                                }
                                dw[(co0 + r) * kkdim + q0 + s] += t;
                            }
                        }
                        q0 += CO_BLOCK;
                    }
                    co0 += CO_BLOCK;
                }

                // Leftover output channels over every q, then the leftover q
                // columns for the tiled channels, one entry at a time.
                for co in co_full..g.cout {
                    let grow = &gout[gbase + co * g.oh * g.ow..][..g.oh * g.ow];
                    for q in 0..kkdim {
                        dw[co * kkdim + q] +=
                            band_dot(grow, &xp[xbase + qoff[q]..], g, b0, bend, full);
                    }
                }
                for co in 0..co_full {
                    let grow = &gout[gbase + co * g.oh * g.ow..][..g.oh * g.ow];
                    for q in q_full..kkdim {
                        dw[co * kkdim + q] +=
                            band_dot(grow, &xp[xbase + qoff[q]..], g, b0, bend, full);
                    }
                }
                b0 = bend;
            }
        }
        return dw;
    }

    // Strided/dilated form: dw += gout · col per sample via pixel-major
    // patches; each entry continues its running total through the samples.
    let ohw = g.oh * g.ow;
    let mut colp = vec![T::ZERO; ohw * kkdim];
    for ni in 0..g.n {
        im2col_pixmajor(g, &xp[ni * g.cin * ph * pw..(ni + 1) * g.cin * ph * pw], &mut colp);
        gemm(
            g.cout,
            ohw,
            kkdim,
            &gout[ni * g.cout * ohw..(ni + 1) * g.cout * ohw],
            &colp,
            GemmInit::Accumulate,
            &mut dw,
        );
    }
    dw
}

// One dw band partial: 16 lanes over each row's aligned prefix, horizontal
// sum in lane order, then the rows' sequential tails. The tiled path above
// computes the identical fold.
fn band_dot<T: Scalar>(
    grow: &[T],
    xrow: &[T],
    g: &ConvGeom,
    b0: usize,
    bend: usize,
    full: usize,
) -> T {
    let pw = g.w + 2 * g.pad;
    let mut lanes = [T::ZERO; LANES];
    for ohi in b0..bend {
        let go = ohi * g.ow;
        let xo = ohi * pw;
        let mut owi = 0;
        while owi < full {
            let mut av = [T::ZERO; LANES];
            let mut bv = [T::ZERO; LANES];
            av.copy_from_slice(&grow[go + owi..go + owi + LANES]);
            bv.copy_from_slice(&xrow[xo + owi..xo + owi + LANES]);
            for l in 0..LANES {
                lanes[l] = av[l].mul_add(bv[l], lanes[l]);
            }
            owi += LANES;
        }
    }
    let mut t = T::ZERO;
    for l in lanes {
        t += l;
    }
    for ohi in b0..bend {
        for owi in full..g.ow {
            t = grow[ohi * g.ow + owi].mul_add(xrow[ohi * pw + owi], t);
        }
    }
    t
}

pub(crate) fn conv2d_db<T: Scalar>(g: &ConvGeom, gout: &[T]) -> Vec<T> {
    let mut db = vec![T::ZERO; g.cout];
    for ni in 0..g.n {
        for (co, dbv) in db.iter_mut().enumerate() {
            let base = (ni * g.cout + co) * g.oh * g.ow;
            let mut acc = T::ZERO;
            for &v in &gout[base..base + g.oh * g.ow] {
                acc += v;
            }
            *dbv += acc;
        }
    }
    db
}

// ── Channel reductions ───────────────────────────────────────────────────────

pub(crate) fn channel_mean_fwd<T: Scalar>(x: &[T], shape: &[usize]) -> Result<(Vec<usize>, Vec<T>)> {
    let (n, c, h, w) = nchw(shape, "channel_reduce_mean")?;
    let hw = h * w;
    let inv = T::ONE / T::from_usize(c);
    let mut out = vec![T::ZERO; n * hw];
    for ni in 0..n {
        let dst = &mut out[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            let src = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    let out_shape = if shape.len() == 4 { vec![n, 1, h, w] } else { vec![1, h, w] };
    Ok((out_shape, out))
}

pub(crate) fn channel_mean_bwd<T: Scalar>(g: &[T], xshape: &[usize]) -> Vec<T> {
    let (n, c, h, w) = nchw(xshape, "channel_reduce_mean").unwrap();
    let hw = h * w;
    let inv = T::ONE / T::from_usize(c);
    let mut dx = vec![T::ZERO; n * c * hw];
    for ni in 0..n {
        let grow = &g[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            let dst = &mut dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (d, &gv) in dst.iter_mut().zip(grow) {
                *d = gv * inv;
            }
        }
    }
    dx
}

/// Channel max; on ties the lowest channel index wins (and later receives the
/// full gradient).
pub(crate) fn channel_max_fwd<T: Scalar>(
    x: &[T],
    shape: &[usize],
) -> Result<(Vec<usize>, Vec<T>, Vec<u32>)> {
    let (n, c, h, w) = nchw(shape, "channel_reduce_max")?;
    let hw = h * w;
    let mut out = vec![T::ZERO; n * hw];
    let mut arg = vec![0u32; n * hw];
    for ni in 0..n {
        for p in 0..hw {
            let mut best = x[ni * c * hw + p];
            let mut besti = 0u32;
            for ci in 1..c {
                let v = x[(ni * c + ci) * hw + p];
                if v > best {
                    best = v;
                    besti = ci as u32;
                }
            }
            out[ni * hw + p] = best;
            arg[ni * hw + p] = besti;
        }
    }
    let out_shape = if shape.len() == 4 { vec![n, 1, h, w] } else { vec![1, h, w] };
    Ok((out_shape, out, arg))
}

pub(crate) fn channel_max_bwd<T: Scalar>(g: &[T], argmax: &[u32], xshape: &[usize]) -> Vec<T> {
    let (n, c, h, w) = nchw(xshape, "channel_reduce_max").unwrap();
    let hw = h * w;
    let mut dx = vec![T::ZERO; n * c * hw];
    for ni in 0..n {
        for p in 0..hw {
            let ci = argmax[ni * hw + p] as usize;
            dx[(ni * c + ci) * hw + p] += g[ni * hw + p];
        }
    }
    dx
}

// ── Pooling and resize ───────────────────────────────────────────────────────

pub(crate) fn global_avg_pool_fwd<T: Scalar>(x: &[T], shape: &[usize]) -> Result<(Vec<usize>, Vec<T>)> {
    let (n, c, h, w) = nchw(shape, "global_avg_pool")?;
    let hw = h * w;
    let inv = T::ONE / T::from_usize(hw);
    let mut out = Vec::with_capacity(n * c);
    for img in 0..n * c {
        let mut acc = T::ZERO;
        for &v in &x[img * hw..(img + 1) * hw] {
            acc += v;
        }
        out.push(acc * inv);
    }
    let out_shape = if shape.len() == 4 { vec![n, c, 1, 1] } else { vec![c, 1, 1] };
    Ok((out_shape, out))
}

pub(crate) fn global_avg_pool_bwd<T: Scalar>(g: &[T], xshape: &[usize]) -> Vec<T> {
    let (n, c, h, w) = nchw(xshape, "global_avg_pool").unwrap();
    let hw = h * w;
    let inv = T::ONE / T::from_usize(hw);
    let mut dx = Vec::with_capacity(n * c * hw);
    for &gi in g.iter().take(n * c) {
        dx.extend(std::iter::repeat_n(gi * inv, hw));
    }
    dx
}

/// Nearest-neighbor resize on the last two axes; source index is
/// `floor(dst * src_size / dst_size)`.
pub(crate) fn nearest_resize_fwd<T: Scalar>(
    x: &[T],
    shape: &[usize],
    out_hw: (usize, usize),
) -> Result<(Vec<usize>, Vec<T>)> {
    let (n, c, h, w) = nchw(shape, "nearest_resize")?;
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::Shape { op: "nearest_resize", detail: "zero output size".into() });
    }
    let col: Vec<usize> = (0..ow).map(|dx| dx * w / ow).collect();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for img in 0..n * c {
        let src = &x[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            let sy = oy * h / oh;
            let row = &src[sy * w..(sy + 1) * w];
            for &sx in &col {
                out.push(row[sx]);
            }
        }
    }
    let out_shape = if shape.len() == 4 { vec![n, c, oh, ow] } else { vec![c, oh, ow] };
    Ok((out_shape, out))
}

pub(crate) fn nearest_resize_bwd<T: Scalar>(g: &[T], out_shape: &[usize], xshape: &[usize]) -> Vec<T> {
    let (n, c, h, w) = nchw(xshape, "nearest_resize").unwrap();
    let (_, _, oh, ow) = nchw(out_shape, "nearest_resize").unwrap();
    let col: Vec<usize> = (0..ow).map(|dx| dx * w / ow).collect();
    let mut dx = vec![T::ZERO; n * c * h * w];
    for img in 0..n * c {
        let dst = &mut dx[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            let sy = oy * h / oh;
            let grow = &g[(img * oh + oy) * ow..(img * oh + oy + 1) * ow];
            for (ox, &gv) in grow.iter().enumerate() {
                dst[sy * w + col[ox]] += gv;
            }
        }
    }
    dx
}

/// 2x2 mean pool with stride 2 (odd trailing row/column dropped).
pub(crate) fn avg_pool2_fwd<T: Scalar>(x: &[T], shape: &[usize]) -> Result<(Vec<usize>, Vec<T>)> {
    let (n, c, h, w) = nchw(shape, "avg_pool2")?;
    if h < 2 || w < 2 {
        return Err(Error::Shape {
            op: "avg_pool2",
            detail: format!("spatial size {h}x{w} too small to pool"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::ONE / T::from_usize(4);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for img in 0..n * c {
        let src = &x[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            let r0 = &src[2 * oy * w..];
            let r1 = &src[(2 * oy + 1) * w..];
            for ox in 0..ow {
                let s = r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1];
                out.push(s * quarter);
            }
        }
    }
    let out_shape = if shape.len() == 4 { vec![n, c, oh, ow] } else { vec![c, oh, ow] };
    Ok((out_shape, out))
}

pub(crate) fn avg_pool2_bwd<T: Scalar>(g: &[T], xshape: &[usize]) -> Vec<T> {
    let (n, c, h, w) = nchw(xshape, "avg_pool2").unwrap();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::ONE / T::from_usize(4);
    let mut dx = vec![T::ZERO; n * c * h * w];
    for img in 0..n * c {
        let dst = &mut dx[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(img * oh + oy) * ow + ox] * quarter;
                dst[2 * oy * w + 2 * ox] += gv;
                dst[2 * oy * w + 2 * ox + 1] += gv;
                dst[(2 * oy + 1) * w + 2 * ox] += gv;
                dst[(2 * oy + 1) * w + 2 * ox + 1] += gv;
            }
        }
    }
    dx
}

// ── Instance norm ────────────────────────────────────────────────────────────

/// Per-sample, per-channel normalization over the spatial axes.
/// Returns `(y, xhat, inv_std)` with `inv_std` holding one entry per (n, c).
pub(crate) fn instance_norm_fwd<T: Scalar>(
    x: &[T],
    shape: &[usize],
    scale: &[T],
    shift: &[T],
    eps: T,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = nchw(shape, "instance_norm")?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::Shape {
            op: "instance_norm",
            detail: format!("scale/shift must have {c} entries, got {}/{}", scale.len(), shift.len()),
        });
    }
    let hw = h * w;
    let inv_hw = T::ONE / T::from_usize(hw);
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut inv_std = vec![T::ZERO; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let img = ni * c + ci;
            let src = &x[img * hw..(img + 1) * hw];
            let mut mean = T::ZERO;
            for &v in src {
                mean += v;
            }
            mean = mean * inv_hw;
            let mut var = T::ZERO;
            for &v in src {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_hw;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std[img] = inv;
            let (g, b) = (scale[ci], shift[ci]);
            for (i, &v) in src.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat[img * hw + i] = xh;
                y[img * hw + i] = xh * g + b;
            }
        }
    }
    Ok((y, xhat, inv_std))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn instance_norm_bwd<T: Scalar>(
    gy: &[T],
    xhat: &[T],
    inv_std: &[T],
    scale: &[T],
    xshape: &[usize],
    need_dx: bool,
    need_dscale: bool,
    need_dshift: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = nchw(xshape, "instance_norm").unwrap();
    let hw = h * w;
    let inv_hw = T::ONE / T::from_usize(hw);
    let mut dx = vec![T::ZERO; if need_dx { n * c * hw } else { 0 }];
    let mut dscale = vec![T::ZERO; if need_dscale { c } else { 0 }];
    let mut dshift = vec![T::ZERO; if need_dshift { c } else { 0 }];
    for ni in 0..n {
        for ci in 0..c {
            let img = ni * c + ci;
            let gys = &gy[img * hw..(img + 1) * hw];
            let xhs = &xhat[img * hw..(img + 1) * hw];
            if need_dscale {
                let mut acc = T::ZERO;
                for (g, xh) in gys.iter().zip(xhs) {
                    acc = g.mul_add(*xh, acc);
                }
                dscale[ci] += acc;
            }
            if need_dshift {
                let mut acc = T::ZERO;
                for &g in gys {
                    acc += g;
                }
                dshift[ci] += acc;
            }
            if need_dx {
                let gsc = scale[ci];
                let mut m1 = T::ZERO;
                let mut m2 = T::ZERO;
                for (g, xh) in gys.iter().zip(xhs) {
                    let gs = *g * gsc;
                    m1 += gs;
                    m2 = gs.mul_add(*xh, m2);
                }
                m1 = m1 * inv_hw;
                m2 = m2 * inv_hw;
                let inv = inv_std[img];
                let dst = &mut dx[img * hw..(img + 1) * hw];
                for ((d, g), xh) in dst.iter_mut().zip(gys).zip(xhs) {
                    let gs = *g * gsc;
                    *d = inv * (gs - m1 - *xh * m2);
                }
            }
        }
    }
    (dx, dscale, dshift)
}
