use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Geometry of a same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
}

impl ConvDims {
    pub fn check<T: Element>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Self> {
        let &[h, w, cin] = input.shape() else {
            return Err(Error::Shape(format!(
                "conv2d input must be H×W×C, got {:?}",
                input.shape()
            )));
        };
        let &[kh, kw, kcin, cout] = kernel.shape() else {
            return Err(Error::Shape(format!(
                "conv2d kernel must be kh×kw×Cin×Cout, got {:?}",
                kernel.shape()
            )));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel extents must be odd, got {kh}×{kw}"
            )));
        }
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias must have shape [{cout}], got {:?}",
                bias.shape()
            )));
        }
        Ok(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
        })
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Rows of the kernel matrix, i.e. columns of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// Unfolds a zero-padded `H×W×C` map into a `(H·W) × (kh·kw·C)` matrix.
pub(crate) fn im2col<T: Element>(input: &[T], d: &ConvDims) -> Vec<T> {
    let plen = d.patch_len();
    let mut col = vec![T::zero(); d.pixels() * plen];
    let (ry, rx) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    for y in 0..d.h {
        for x in 0..d.w {
            let row = &mut col[(y * d.w + x) * plen..][..plen];
            for dy in 0..d.kh {
                let sy = y as isize + dy as isize - ry;
                if sy < 0 || sy >= d.h as isize {
                    continue;
                }
                for dx in 0..d.kw {
                    let sx = x as isize + dx as isize - rx;
                    if sx < 0 || sx >= d.w as isize {
                        continue;
                    }
                    let src = (sy as usize * d.w + sx as usize) * d.cin;
                    let dst = (dy * d.kw + dx) * d.cin;
                    row[dst..dst + d.cin].copy_from_slice(&input[src..src + d.cin]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the map.
pub(crate) fn col2im_add<T: Element>(col: &[T], d: &ConvDims, out: &mut [T]) {
    let plen = d.patch_len();
    let (ry, rx) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    for y in 0..d.h {
        for x in 0..d.w {
            let row = &col[(y * d.w + x) * plen..][..plen];
            for dy in 0..d.kh {
                let sy = y as isize + dy as isize - ry;
                if sy < 0 || sy >= d.h as isize {
                    continue;
                }
                for dx in 0..d.kw {
                    let sx = x as isize + dx as isize - rx;
                    if sx < 0 || sx >= d.w as isize {
                        continue;
                    }
                    let dst = (sy as usize * d.w + sx as usize) * d.cin;
                    let src = (dy * d.kw + dx) * d.cin;
                    for (o, &g) in out[dst..dst + d.cin].iter_mut().zip(&row[src..src + d.cin]) {
                        *o = *o + g;
                    }
                }
            }
        }
    }
}

/// Forward convolution on an already unfolded input.
pub(crate) fn conv2d_from_col<T: Element>(
    col: &[T],
    kernel: &[T],
    bias: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let mut out = Vec::with_capacity(d.pixels() * d.cout);
    for _ in 0..d.pixels() {
        out.extend_from_slice(bias);
    }
    T::gemm(
        d.pixels(),
        d.patch_len(),
        d.cout,
        col,
        false,
        kernel,
        false,
        T::one(),
        &mut out,
    );
    out
}

/// Same-padded 2-D convolution with zero fill.
///
/// `out[y,x,co] = bias[co] + Σ input[y+dy-kh/2, x+dx-kw/2, ci]·kernel[dy,dx,ci,co]`
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = ConvDims::check(input, kernel, bias)?;
    let out = if d.is_pointwise() {
        conv2d_from_col(input.data(), kernel.data(), bias.data(), &d)
    } else {
        let col = im2col(input.data(), &d);
        conv2d_from_col(&col, kernel.data(), bias.data(), &d)
    };
    Ok(Tensor::from_parts(vec![d.h, d.w, d.cout], out))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn scale<T: Element>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}
