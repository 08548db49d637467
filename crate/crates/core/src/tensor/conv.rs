//! im2col convolution kernels.

use super::graph::{PadMode, Padding};
use super::Scalar;

/// Geometry of one NCHW × OIKK convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    /// Padded row index -> source row (None for zero padding).
    row_map: Vec<Option<usize>>,
    col_map: Vec<Option<usize>>,
}

fn axis_map(len: usize, pad: Padding) -> Vec<Option<usize>> {
    let p = pad.width as isize;
    let n = len as isize;
    (0..len + 2 * pad.width)
        .map(|ip| {
            let i = ip as isize - p;
            if (0..n).contains(&i) {
                return Some(i as usize);
            }
            match pad.mode {
                PadMode::Zero => None,
                PadMode::Reflect => {
                    let r = if i < 0 { -i } else { 2 * (n - 1) - i };
                    Some(r as usize)
                }
            }
        })
        .collect()
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        o: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Padding,
    ) -> Self {
        let ho = (h + 2 * pad.width - kh) / stride + 1;
        let wo = (w + 2 * pad.width - kw) / stride + 1;
        Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            ho,
            wo,
            row_map: axis_map(h, pad),
            col_map: axis_map(w, pad),
        }
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Unfolds one sample into a `(c·kh·kw) × (ho·wo)` matrix.
    fn im2col<T: Scalar>(&self, input: &[T], col: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.c {
            let src = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.row_map[oy * self.stride + ki] {
                            None => line.fill(T::zero()),
                            Some(sy) => {
                                let srow = &src[sy * self.w..(sy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.col_map[ox * self.stride + kj] {
                                        Some(sx) => srow[sx],
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

    /// Folds a column-gradient matrix back onto one input sample (accumulating).
    fn col2im<T: Scalar>(&self, col: &[T], grad: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.c {
            let dst = &mut grad[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let Some(sy) = self.row_map[oy * self.stride + ki] else {
                            continue;
                        };
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, &g) in line.iter().enumerate() {
                            if let Some(sx) = self.col_map[ox * self.stride + kj] {
                                let d = &mut dst[sy * self.w + sx];
                                *d = *d + g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
        let plane = self.out_plane();
        let k = self.patch_len();
        let mut out = vec![T::zero(); self.n * self.o * plane];
        let mut col = vec![T::zero(); k * plane];
        for s in 0..self.n {
            let x = &input[s * self.in_sample()..(s + 1) * self.in_sample()];
            let y = &mut out[s * self.o * plane..(s + 1) * self.o * plane];
            if let Some(b) = bias {
                for (o, chunk) in y.chunks_mut(plane).enumerate() {
                    chunk.fill(b[o]);
                }
            }
            self.im2col(x, &mut col);
            T::gemm(self.o, k, plane, weight, false, &col, false, T::one(), y);
        }
        out
    }

    /// Returns (d input, d weight, d bias), each only when requested.
    pub fn backward<T: Scalar>(
        &self,
        input: &[T],
        weight: &[T],
        grad_out: &[T],
        need: [bool; 3],
    ) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
        let plane = self.out_plane();
        let k = self.patch_len();
        let [need_x, need_w, need_b] = need;
        let mut dx = need_x.then(|| vec![T::zero(); input.len()]);
        let mut dw = need_w.then(|| vec![T::zero(); weight.len()]);
        let mut db = need_b.then(|| vec![T::zero(); self.o]);
        let mut col = vec![T::zero(); k * plane];
        for s in 0..self.n {
            let x = &input[s * self.in_sample()..(s + 1) * self.in_sample()];
            let gy = &grad_out[s * self.o * plane..(s + 1) * self.o * plane];
            if let Some(db) = db.as_mut() {
                for (o, chunk) in gy.chunks(plane).enumerate() {
                    db[o] = chunk.iter().fold(db[o], |acc, &g| acc + g);
                }
            }
            if let Some(dw) = dw.as_mut() {
                self.im2col(x, &mut col);
                // dW (o×k) += dY (o×plane) · colᵀ (plane×k)
                T::gemm(self.o, plane, k, gy, false, &col, true, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                // dcol (k×plane) = Wᵀ (k×o) · dY (o×plane)
                T::gemm(k, self.o, plane, weight, true, gy, false, T::zero(), &mut col);
                let gx = &mut dx[s * self.in_sample()..(s + 1) * self.in_sample()];
                self.col2im(&col, gx);
            }
        }
        (dx, dw, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_map_mirrors_without_edge_repeat() {
        let m = axis_map(4, Padding::new(PadMode::Reflect, 2));
        let v: Vec<usize> = m.into_iter().map(Option::unwrap).collect();
        assert_eq!(v, vec![2, 1, 0, 1, 2, 3, 2, 1]);
        let z = axis_map(3, Padding::new(PadMode::Zero, 1));
        assert_eq!(z, vec![None, Some(0), Some(1), Some(2), None]);
    }

    #[test]
    fn strided_output_size() {
        let g = ConvGeometry::new(1, 1, 7, 6, 1, 3, 3, 2, Padding::new(PadMode::Zero, 1));
        assert_eq!((g.ho, g.wo), (4, 3));
    }
}
