//! Convolution kernels built on im2col/col2im and a single GEMM.
//!
//! A 2D convolution is treated as a 3D convolution with a temporal kernel of
//! one, so both share the same lowering. Transposed convolutions reuse the
//! lowering with the roles of image and column swapped.

use super::gemm::{gemm, MatMut, MatRef};
use super::tensor::{Shape, Tensor};

/// Upper bound on the number of floats in one column buffer.
const COL_BUDGET: usize = 1 << 24;

/// Output size and leading pad of a "same" padded convolution.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Geometry of a lowering between an image side and a position side.
#[derive(Debug, Clone, Copy)]
struct Lowering {
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    c_stride: usize,
    t_stride: usize,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.c * self.kt * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Column chunk width for one temporal output slice.
    fn chunk(&self) -> usize {
        (COL_BUDGET / self.rows().max(1)).clamp(1, self.positions().max(1))
    }

    /// Visit every (column, image offset) pair of one row of the lowering for
    /// positions `start..start + n` of output slice `to`.
    #[inline]
    fn for_row<F: FnMut(usize, usize)>(&self, row: usize, to: usize, start: usize, n: usize, mut f: F) {
        let dx = row % self.kw;
        let dy = (row / self.kw) % self.kh;
        let dt = (row / (self.kw * self.kh)) % self.kt;
        let c = row / (self.kw * self.kh * self.kt);
        let it = to as isize + dt as isize - self.pt as isize;
        if it < 0 || it >= self.t as isize {
            return;
        }
        let base = c * self.c_stride + it as usize * self.t_stride;
        let end = start + n;
        let mut p = start;
        while p < end {
            let oy = p / self.ow;
            let ox0 = p % self.ow;
            let ox1 = (ox0 + (end - p)).min(self.ow);
            let iy = (oy * self.sh + dy) as isize - self.ph as isize;
            if iy >= 0 && iy < self.h as isize {
                let rowbase = base + iy as usize * self.w;
                for ox in ox0..ox1 {
                    let ix = (ox * self.sw + dx) as isize - self.pw as isize;
                    if ix >= 0 && ix < self.w as isize {
                        f(p - start + ox - ox0, rowbase + ix as usize);
                    }
                }
            }
            p += ox1 - ox0;
        }
    }

    fn im2col(&self, img: &[f32], to: usize, start: usize, n: usize, col: &mut [f32]) {
        let col = &mut col[..self.rows() * n];
        col.fill(0.0);
        for row in 0..self.rows() {
            let out = &mut col[row * n..(row + 1) * n];
            self.for_row(row, to, start, n, |j, i| out[j] = img[i]);
        }
    }

    fn col2im_add(&self, col: &[f32], to: usize, start: usize, n: usize, img: &mut [f32]) {
        for row in 0..self.rows() {
            let src = &col[row * n..(row + 1) * n];
            self.for_row(row, to, start, n, |j, i| img[i] += src[j]);
        }
    }
}

/// Static description of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    /// Temporal extent; 1 for 2D layers. Temporal padding is always "same".
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// Weight element count. Regular convolutions store weights as
    /// (cout, cin, kt, kh, kw); transposed ones as (cin, cout, kh, kw).
    pub fn weight_len(&self) -> usize {
        self.cin * self.cout * self.kt * self.kh * self.kw
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kt * self.kh * self.kw
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let (h, w) = if self.transposed {
            (input.h * self.stride, input.w * self.stride)
        } else {
            (
                same_padding(input.h, self.kh, self.stride).0,
                same_padding(input.w, self.kw, self.stride).0,
            )
        };
        Shape::new(input.b, input.t, self.cout, h, w)
    }

    fn lowering(&self, input: Shape) -> Lowering {
        if self.transposed {
            let out = self.output_shape(input);
            let (_, ph) = same_padding(out.h, self.kh, self.stride);
            let (_, pw) = same_padding(out.w, self.kw, self.stride);
            Lowering {
                c: self.cout,
                t: 1,
                h: out.h,
                w: out.w,
                kt: 1,
                kh: self.kh,
                kw: self.kw,
                sh: self.stride,
                sw: self.stride,
                pt: 0,
                ph,
                pw,
                oh: input.h,
                ow: input.w,
                c_stride: out.h * out.w,
                t_stride: 0,
            }
        } else {
            let (oh, ph) = same_padding(input.h, self.kh, self.stride);
            let (ow, pw) = same_padding(input.w, self.kw, self.stride);
            Lowering {
                c: self.cin,
                t: input.t,
                h: input.h,
                w: input.w,
                kt: self.kt,
                kh: self.kh,
                kw: self.kw,
                sh: self.stride,
                sw: self.stride,
                pt: (self.kt - 1) / 2,
                ph,
                pw,
                oh,
                ow,
                c_stride: input.h * input.w,
                t_stride: self.cin * input.h * input.w,
            }
        }
    }

    /// Pre-activation output `conv(x, w) + bias`.
    pub fn forward(&self, x: &Tensor, w: &[f32], bias: &[f32]) -> Tensor {
        let s = x.shape();
        assert_eq!(s.c, self.cin, "conv input channels");
        assert_eq!(w.len(), self.weight_len());
        let out_shape = self.output_shape(s);
        let mut y = Tensor::zeros(out_shape);
        let low = self.lowering(s);
        let rows = low.rows();
        let chunk = low.chunk();
        let mut col = vec![0.0f32; rows * chunk];
        if self.transposed {
            let wt = MatRef::row_major(w, self.cin, rows).t();
            let hw_in = s.hw();
            for b in 0..s.b {
                for t in 0..s.t {
                    let xi = x.image(b, t);
                    let yi = y.image_mut(b, t);
                    let mut start = 0;
                    while start < hw_in {
                        let n = chunk.min(hw_in - start);
                        let xm = MatRef {
                            data: &xi[start..],
                            rows: self.cin,
                            cols: n,
                            rs: hw_in,
                            cs: 1,
                        };
                        gemm(1.0, wt, xm, 0.0, MatMut::row_major(&mut col[..rows * n], rows, n));
                        low.col2im_add(&col, 0, start, n, yi);
                        start += n;
                    }
                }
            }
        } else {
            let wm = MatRef::row_major(w, self.cout, rows);
            let per_b_in = s.t * s.image_len();
            let ohw = out_shape.hw();
            let per_b_out = out_shape.t * out_shape.image_len();
            let ydata = y.data_mut();
            for b in 0..s.b {
                let xb = &x.data()[b * per_b_in..(b + 1) * per_b_in];
                for t in 0..s.t {
                    let mut start = 0;
                    while start < ohw {
                        let n = chunk.min(ohw - start);
                        low.im2col(xb, t, start, n, &mut col);
                        let base = b * per_b_out + t * self.cout * ohw + start;
                        let ym = MatMut {
                            data: &mut ydata[base..],
                            rows: self.cout,
                            cols: n,
                            rs: ohw,
                            cs: 1,
                        };
                        gemm(1.0, wm, MatRef::row_major(&col[..rows * n], rows, n), 0.0, ym);
                        start += n;
                    }
                }
            }
        }
        add_bias(&mut y, bias);
        y
    }

    /// Accumulate weight and bias gradients (when `grads` is given) from the
    /// pre-activation gradient `dz`; returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        dz: &Tensor,
        w: &[f32],
        mut grads: Option<(&mut [f32], &mut [f32])>,
        need_dx: bool,
    ) -> Option<Tensor> {
        if grads.is_none() && !need_dx {
            return None;
        }
        let s = x.shape();
        let os = dz.shape();
        let low = self.lowering(s);
        let rows = low.rows();
        let chunk = low.chunk();
        let mut col = vec![0.0f32; rows * chunk];
        let mut dx = need_dx.then(|| Tensor::zeros(s));
        if let Some((_, db)) = grads.as_mut() {
            bias_grad(dz, db);
        }
        if self.transposed {
            let hw_in = s.hw();
            for b in 0..s.b {
                for t in 0..s.t {
                    let xi = x.image(b, t);
                    let dzi = dz.image(b, t);
                    let mut start = 0;
                    while start < hw_in {
                        let n = chunk.min(hw_in - start);
                        low.im2col(dzi, 0, start, n, &mut col);
                        let colm = MatRef::row_major(&col[..rows * n], rows, n);
                        let xm = MatRef {
                            data: &xi[start..],
                            rows: self.cin,
                            cols: n,
                            rs: hw_in,
                            cs: 1,
                        };
                        if let Some((dw, _)) = grads.as_mut() {
                            gemm(1.0, xm, colm.t(), 1.0, MatMut::row_major(dw, self.cin, rows));
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dxi = dx.image_mut(b, t);
                            let dxm = MatMut {
                                data: &mut dxi[start..],
                                rows: self.cin,
                                cols: n,
                                rs: hw_in,
                                cs: 1,
                            };
                            gemm(1.0, MatRef::row_major(w, self.cin, rows), colm, 0.0, dxm);
                        }
                        start += n;
                    }
                }
            }
        } else {
            let wm = MatRef::row_major(w, self.cout, rows);
            let per_b_in = s.t * s.image_len();
            let ohw = os.hw();
            let per_b_out = os.t * os.image_len();
            for b in 0..s.b {
                let xb = &x.data()[b * per_b_in..(b + 1) * per_b_in];
                for t in 0..s.t {
                    let mut start = 0;
                    while start < ohw {
                        let n = chunk.min(ohw - start);
                        if grads.is_some() {
                            low.im2col(xb, t, start, n, &mut col);
                        }
                        let base = b * per_b_out + t * self.cout * ohw + start;
                        let dzm = MatRef {
                            data: &dz.data()[base..],
                            rows: self.cout,
                            cols: n,
                            rs: ohw,
                            cs: 1,
                        };
                        let colm = MatRef::row_major(&col[..rows * n], rows, n);
                        if let Some((dw, _)) = grads.as_mut() {
                            gemm(1.0, dzm, colm.t(), 1.0, MatMut::row_major(dw, self.cout, rows));
                        }
                        if let Some(dx) = dx.as_mut() {
                            gemm(
                                1.0,
                                wm.t(),
                                dzm,
                                0.0,
                                MatMut::row_major(&mut col[..rows * n], rows, n),
                            );
                            let dxb = &mut dx.data_mut()[b * per_b_in..(b + 1) * per_b_in];
                            low.col2im_add(&col, t, start, n, dxb);
                        }
                        start += n;
                    }
                }
            }
        }
        dx
    }
}

fn add_bias(y: &mut Tensor, bias: &[f32]) {
    let s = y.shape();
    let hw = s.hw();
    for img in y.data_mut().chunks_exact_mut(s.image_len()) {
        for (c, plane) in img.chunks_exact_mut(hw).enumerate() {
            let b = bias[c];
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad(dz: &Tensor, db: &mut [f32]) {
    let s = dz.shape();
    let hw = s.hw();
    for img in dz.data().chunks_exact(s.image_len()) {
        for (c, plane) in img.chunks_exact(hw).enumerate() {
            db[c] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
}
