//! Patch extraction for strided 2D convolutions over NHWC images.

use super::Real;

/// Frames processed per patch buffer, bounding scratch memory.
pub(crate) const CHUNK_FRAMES: usize = 16;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const DOWN2: ConvGeom = ConvGeom {
        kernel: 4,
        stride: 2,
        pad: 1,
    };

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Image size whose convolution yields `n` (inverse of `out_size` for the
    /// geometries used here).
    pub fn in_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.pad
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        self.kernel * self.kernel * channels
    }
}

/// Image dimensions of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// Writes the patches of `frames` consecutive images into `cols`, one row per
/// output position, laid out `(ky, kx, c)`.
pub(crate) fn im2col<T: Real>(img: &[T], frames: usize, f: Frame, g: ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_size(f.h), g.out_size(f.w));
    let plen = g.patch_len(f.c);
    debug_assert!(cols.len() >= frames * oh * ow * plen);
    let mut row = 0;
    for b in 0..frames {
        let base = b * f.len();
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let d = &mut dst[(ky * g.kernel + kx) * f.c..(ky * g.kernel + kx + 1) * f.c];
                        if iy < 0 || ix < 0 || iy >= f.h as isize || ix >= f.w as isize {
                            d.fill(T::zero());
                        } else {
                            let src = base + (iy as usize * f.w + ix as usize) * f.c;
                            d.copy_from_slice(&img[src..src + f.c]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into images.
pub(crate) fn col2im<T: Real>(cols: &[T], frames: usize, f: Frame, g: ConvGeom, img: &mut [T]) {
    let (oh, ow) = (g.out_size(f.h), g.out_size(f.w));
    let plen = g.patch_len(f.c);
    let mut row = 0;
    for b in 0..frames {
        let base = b * f.len();
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= f.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= f.w as isize {
                            continue;
                        }
                        let s = &src[(ky * g.kernel + kx) * f.c..(ky * g.kernel + kx + 1) * f.c];
                        let dst = base + (iy as usize * f.w + ix as usize) * f.c;
                        for (d, &v) in img[dst..dst + f.c].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_halves_even_sizes() {
        let g = ConvGeom::DOWN2;
        assert_eq!(g.out_size(64), 32);
        assert_eq!(g.out_size(8), 4);
        assert_eq!(g.in_size(4), 8);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let f = Frame { h: 6, w: 6, c: 2 };
        let g = ConvGeom::DOWN2;
        let frames = 2;
        let n_rows = frames * g.out_size(f.h) * g.out_size(f.w);
        let x: Vec<f64> = (0..frames * f.len()).map(|i| (i as f64 * 0.13).sin()).collect();
        let y: Vec<f64> = (0..n_rows * g.patch_len(f.c)).map(|i| (i as f64 * 0.29).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, frames, f, g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, frames, f, g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
