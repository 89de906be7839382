//! im2col / col2im lowering of dilated, strided, padded 2-D convolution.

use super::Real;
use crate::error::{Error, Result};

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, dilation: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 || dilation == 0 {
            return Err(Error::Shape("kernel, stride and dilation must be >= 1".into()));
        }
        Ok(Self { kernel, stride, dilation, padding })
    }

    /// Padding that preserves spatial size at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { kernel, stride: 1, dilation, padding: dilation * (kernel - 1) / 2 }
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// `(in + 2·padding − dilation·(k−1) − 1) / stride + 1`.
    pub fn output_len(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.span() {
            return Err(Error::Shape(format!(
                "input extent {input} with padding {} is smaller than the dilated kernel span {}",
                self.padding,
                self.span()
            )));
        }
        Ok((padded - self.span()) / self.stride + 1)
    }

    /// Output length of the transposed convolution with this geometry.
    pub fn transposed_len(&self, input: usize) -> Result<usize> {
        let full = (input - 1) * self.stride + self.span();
        if full <= 2 * self.padding {
            return Err(Error::Shape("transposed convolution output would be empty".into()));
        }
        Ok(full - 2 * self.padding)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Lowers one `c×h×w` image to a `(c·k·k) × (oh·ow)` column matrix.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut Vec<T>) {
    let k = g.kernel;
    let len = c * k * k * oh * ow;
    if g.is_pointwise() {
        cols.clear();
        cols.extend_from_slice(&x[..c * h * w]);
        return;
    }
    // every element is written below, so stale contents need no clearing
    cols.resize(len, T::zero());
    cols.truncate(len);
    let (s, d, p) = (g.stride as isize, g.dilation as isize, g.padding as isize);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let off = kj as isize * d - p;
                    if s == 1 {
                        // valid ox satisfy 0 <= ox + off < w
                        let lo = ((-off).max(0) as usize).min(ow);
                        let hi = ((w as isize - off).min(ow as isize)).max(lo as isize) as usize;
                        out[..lo].fill(T::zero());
                        if hi > lo {
                            let a = (lo as isize + off) as usize;
                            out[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                        }
                        out[hi..].fill(T::zero());
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = ox as isize * s + off;
                            *o = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto a `c×h×w` image (adjoint of
/// [`im2col`]).
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, x: &mut [T]) {
    let k = g.kernel;
    if g.is_pointwise() {
        for (a, &b) in x[..c * h * w].iter_mut().zip(cols) {
            *a = *a + b;
        }
        return;
    }
    let (s, d, p) = (g.stride as isize, g.dilation as isize, g.padding as isize);
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let row_src = &src[oy * ow..(oy + 1) * ow];
                    let off = kj as isize * d - p;
                    if s == 1 {
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as isize - off).min(ow as isize)).max(lo as isize) as usize;
                        if hi > lo {
                            let a = (lo as isize + off) as usize;
                            for (o, &v) in dst[a..a + (hi - lo)].iter_mut().zip(&row_src[lo..hi]) {
                                *o = *o + v;
                            }
                        }
                        continue;
                    }
                    for (ox, &v) in row_src.iter().enumerate() {
                        let ix = ox as isize * s + off;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}
