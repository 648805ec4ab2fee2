//! Slice-level compute kernels behind the graph operations.
//!
//! Convolutions go through im2col + GEMM, one sample at a time. All reductions
//! run in a fixed order so results do not depend on scheduling.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// `floor((n + 2p − d(k−1) − 1)/s) + 1`, or `None` when that is below 1.
    pub fn out_size(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.k - 1) + 1;
        let padded = n + 2 * self.pad;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output positions `o` in `0..n_out` whose input index `o·stride + offset`
/// falls inside `0..n_in`.
fn valid_range(n_in: usize, n_out: usize, stride: usize, offset: isize) -> (usize, usize) {
    // smallest o with o·s + offset ≥ 0
    let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
    // largest o with o·s + offset ≤ n_in − 1
    let last = n_in as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last as usize / stride + 1).min(n_out) };
    (lo.min(hi), hi)
}

/// Unfolds one C×H×W sample into a (C·k·k)×(Ho·Wo) matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, cols: &mut [T]) {
    let k = g.k;
    let hw_out = ho * wo;
    let s = g.stride;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            let off_y = (ki * g.dilation) as isize - g.pad as isize;
            let (y_lo, y_hi) = valid_range(h, ho, s, off_y);
            for kj in 0..k {
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                let (x_lo, x_hi) = valid_range(w, wo, s, off_x);
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                dst[..y_lo * wo].fill(T::zero());
                dst[y_hi * wo..].fill(T::zero());
                for oy in y_lo..y_hi {
                    let iy = (oy * s) as isize + off_y;
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    if x_lo == x_hi {
                        continue;
                    }
                    let start = (x_lo * s) as isize + off_x;
                    if s == 1 {
                        line[x_lo..x_hi].copy_from_slice(&src[start as usize..start as usize + (x_hi - x_lo)]);
                    } else {
                        for (j, out) in line[x_lo..x_hi].iter_mut().enumerate() {
                            *out = src[start as usize + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, x: &mut [T]) {
    let k = g.k;
    let hw_out = ho * wo;
    let s = g.stride;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            let off_y = (ki * g.dilation) as isize - g.pad as isize;
            let (y_lo, y_hi) = valid_range(h, ho, s, off_y);
            for kj in 0..k {
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                let (x_lo, x_hi) = valid_range(w, wo, s, off_x);
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                if x_lo == x_hi {
                    continue;
                }
                for oy in y_lo..y_hi {
                    let iy = (oy * s) as isize + off_y;
                    let line = &src[oy * wo + x_lo..oy * wo + x_hi];
                    let start = iy as usize * w + ((x_lo * s) as isize + off_x) as usize;
                    if s == 1 {
                        for (d, &v) in plane[start..start + line.len()].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            let d = &mut plane[start + j * s];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn conv2d_forward<T: Real>(x: &[T], wgt: &[T], bias: Option<&[T]>, d: &ConvDims, g: ConvGeom) -> Vec<T> {
    let ckk = d.c * g.k * g.k;
    let (in_sz, out_hw) = (d.c * d.h * d.w, d.ho * d.wo);
    let mut out = vec![T::zero(); d.n * d.f * out_hw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * out_hw] };
    for s in 0..d.n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let os = &mut out[s * d.f * out_hw..(s + 1) * d.f * out_hw];
        if let Some(b) = bias {
            for (fi, row) in os.chunks_mut(out_hw).enumerate() {
                row.fill(b[fi]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            T::gemm(d.f, ckk, out_hw, wgt, false, xs, false, beta, os);
        } else {
            im2col(xs, d.c, d.h, d.w, g, d.ho, d.wo, &mut cols);
            T::gemm(d.f, ckk, out_hw, wgt, false, &cols, false, beta, os);
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is empty unless requested.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    wgt: &[T],
    dout: &[T],
    d: &ConvDims,
    g: ConvGeom,
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ckk = d.c * g.k * g.k;
    let (in_sz, out_hw) = (d.c * d.h * d.w, d.ho * d.wo);
    let mut dw = vec![T::zero(); d.f * ckk];
    let mut db = vec![T::zero(); d.f];
    let mut dx = if need_dx { vec![T::zero(); d.n * in_sz] } else { Vec::new() };
    let mut cols = vec![T::zero(); ckk * out_hw];
    let mut dcols = vec![T::zero(); ckk * out_hw];
    for s in 0..d.n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let ds = &dout[s * d.f * out_hw..(s + 1) * d.f * out_hw];
        for (fi, row) in ds.chunks(out_hw).enumerate() {
            db[fi] = db[fi] + row.iter().copied().sum::<T>();
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, d.c, d.h, d.w, g, d.ho, d.wo, &mut cols);
            &cols
        };
        T::gemm(d.f, out_hw, ckk, ds, false, cols_ref, true, T::one(), &mut dw);
        if need_dx {
            let dxs = &mut dx[s * in_sz..(s + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(ckk, d.f, out_hw, wgt, true, ds, false, T::zero(), dxs);
            } else {
                T::gemm(ckk, d.f, out_hw, wgt, true, ds, false, T::zero(), &mut dcols);
                col2im(&dcols, d.c, d.h, d.w, g, d.ho, d.wo, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: `d.c` input channels, `d.f` output channels,
/// weight laid out Cin×Cout×k×k, output spatial `(h−1)·stride + k`.
pub fn conv_t_forward<T: Real>(x: &[T], wgt: &[T], bias: Option<&[T]>, d: &ConvDims, stride: usize, k: usize) -> Vec<T> {
    let g = ConvGeom { k, stride, pad: 0, dilation: 1 };
    let fkk = d.f * k * k;
    let (in_hw, out_hw) = (d.h * d.w, d.ho * d.wo);
    let mut out = vec![T::zero(); d.n * d.f * out_hw];
    let mut cols = vec![T::zero(); fkk * in_hw];
    for s in 0..d.n {
        let xs = &x[s * d.c * in_hw..(s + 1) * d.c * in_hw];
        T::gemm(fkk, d.c, in_hw, wgt, true, xs, false, T::zero(), &mut cols);
        let os = &mut out[s * d.f * out_hw..(s + 1) * d.f * out_hw];
        col2im(&cols, d.f, d.ho, d.wo, g, d.h, d.w, os);
        if let Some(b) = bias {
            for (fi, row) in os.chunks_mut(out_hw).enumerate() {
                for v in row {
                    *v = *v + b[fi];
                }
            }
        }
    }
    out
}

pub fn conv_t_backward<T: Real>(
    x: &[T],
    wgt: &[T],
    dout: &[T],
    d: &ConvDims,
    stride: usize,
    k: usize,
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let g = ConvGeom { k, stride, pad: 0, dilation: 1 };
    let fkk = d.f * k * k;
    let (in_hw, out_hw) = (d.h * d.w, d.ho * d.wo);
    let mut dw = vec![T::zero(); d.c * fkk];
    let mut db = vec![T::zero(); d.f];
    let mut dx = if need_dx { vec![T::zero(); d.n * d.c * in_hw] } else { Vec::new() };
    let mut dcols = vec![T::zero(); fkk * in_hw];
    for s in 0..d.n {
        let xs = &x[s * d.c * in_hw..(s + 1) * d.c * in_hw];
        let ds = &dout[s * d.f * out_hw..(s + 1) * d.f * out_hw];
        for (fi, row) in ds.chunks(out_hw).enumerate() {
            db[fi] = db[fi] + row.iter().copied().sum::<T>();
        }
        im2col(ds, d.f, d.ho, d.wo, g, d.h, d.w, &mut dcols);
        T::gemm(d.c, in_hw, fkk, xs, false, &dcols, true, T::one(), &mut dw);
        if need_dx {
            let dxs = &mut dx[s * d.c * in_hw..(s + 1) * d.c * in_hw];
            T::gemm(d.c, fkk, in_hw, wgt, false, &dcols, false, T::zero(), dxs);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_size_formula() {
        let g = ConvGeom { k: 3, stride: 1, pad: 0, dilation: 2 };
        // effective extent 5
        assert_eq!(g.out_size(5), Some(1));
        assert_eq!(g.out_size(4), None);
        let g = ConvGeom { k: 3, stride: 2, pad: 1, dilation: 1 };
        assert_eq!(g.out_size(8), Some(4));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 5, 4);
        let g = ConvGeom { k: 3, stride: 2, pad: 1, dilation: 1 };
        let (ho, wo) = (g.out_size(h).unwrap(), g.out_size(w).unwrap());
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let y: Vec<f64> = (0..c * 9 * ho * wo).map(|i| ((i * 3 % 13) as f64) * 0.25).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, g, ho, wo, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, g, ho, wo, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
