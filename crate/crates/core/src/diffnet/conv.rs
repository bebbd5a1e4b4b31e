//! im2col / col2im lowering shared by the convolution layers.

use super::tensor::Real;

/// Spatial geometry of a strided, zero-padded 2-D convolution viewed from the
/// "image" side (`height x width`) towards the "column" side (`out_h x out_w`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let out = |size: usize| {
            let padded = size + 2 * padding;
            (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
        };
        Some(ConvGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: out(height)?,
            out_w: out(width)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output position `o` and kernel tap `k`, or
    /// `None` when it lands in the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// `image` is `[channels, height, width]`; `col` becomes
    /// `[channels * k * k, out_h * out_w]`.
    pub fn im2col<T: Real>(&self, image: &[T], col: &mut [T]) {
        let k = self.kernel;
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ki, self.height) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kj, self.width) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add `col` into `image`
    /// (which is overwritten).
    pub fn col2im<T: Real>(&self, col: &[T], image: &mut [T]) {
        image.fill(T::zero());
        let k = self.kernel;
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ki, self.height) else {
                            continue;
                        };
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[iy * self.width..(iy + 1) * self.width];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) = self.source(ox, kj, self.width) {
                                dst[ix] = dst[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        let g = ConvGeometry::new(3, 64, 64, 4, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (32, 32));
        let g = ConvGeometry::new(1, 5, 7, 3, 1, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 5));
        assert!(ConvGeometry::new(1, 2, 2, 5, 1, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(2, 5, 6, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| ((i * 3) % 13) as f64 * 0.25)
            .collect();
        let mut col = vec![0.0; y.len()];
        g.im2col(&x, &mut col);
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
