//! Cross-correlation over NHWC activations, lowered to patch matrices.

use crate::error::{Result, TensorError};
use crate::ops::gemm;
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output extent `ceil(n / stride)`, zero padding split evenly (extra row/column at the end).
    Same,
    /// No padding; output extent `floor((n - k) / stride) + 1`.
    Valid,
}

/// Output extent along one axis, plus the leading pad.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Geometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let (&[batch, h, w, cin], &[kh, kw, kcin, cout]) = (input, kernel) else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        };
        if cin != kcin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let (oh, pad_top) = conv_output_extent(h, kh, stride.0, padding).ok_or_else(|| {
            TensorError::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} stride {stride:?} does not fit input {input:?}"
            ))
        })?;
        let (ow, pad_left) = conv_output_extent(w, kw, stride.1, padding).ok_or_else(|| {
            TensorError::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} stride {stride:?} does not fit input {input:?}"
            ))
        })?;
        Ok(Self {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            sh: stride.0,
            sw: stride.1,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.oh, self.ow, self.cout]
    }

    /// Fills `col` (positions × patch) with the receptive fields of one image.
    fn im2col<T: Real>(&self, image: &[T], col: &mut [T]) {
        let k = self.patch_len();
        let cin = self.cin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut col[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                    for kx in 0..self.kw {
                        let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                        let dst = &mut row[(ky * self.kw + kx) * cin..][..cin];
                        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                            dst.fill(T::zero());
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * cin;
                            dst.copy_from_slice(&image[src..src + cin]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto one image gradient.
    fn col2im<T: Real>(&self, col: &[T], image: &mut [T]) {
        let k = self.patch_len();
        let cin = self.cin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &col[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = &row[(ky * self.kw + kx) * cin..][..cin];
                        let dst = &mut image[(iy as usize * self.w + ix as usize) * cin..][..cin];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    g: &Geometry,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let p = g.positions();
    let k = g.patch_len();
    let in_stride = g.h * g.w * g.cin;
    let mut out = vec![T::zero(); g.batch * p * g.cout];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); p * k]
    };
    for n in 0..g.batch {
        let image = &input.data()[n * in_stride..][..in_stride];
        let dst = &mut out[n * p * g.cout..][..p * g.cout];
        if let Some(b) = bias {
            for row in dst.chunks_exact_mut(g.cout) {
                row.copy_from_slice(b.data());
            }
        }
        let patches: &[T] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut col);
            &col
        };
        gemm::acc_ab(patches, p, k, weights.data(), g.cout, dst);
    }
    Tensor::from_parts(g.output_shape(), out)
}

/// Returns gradients for (input, weights, bias).
pub(crate) fn backward<T: Real>(
    g: &Geometry,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let p = g.positions();
    let k = g.patch_len();
    let in_stride = g.h * g.w * g.cin;
    let mut grad_w = vec![T::zero(); k * g.cout];
    let mut grad_b = vec![T::zero(); g.cout];
    let mut grad_in = need_input.then(|| vec![T::zero(); input.len()]);
    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); p * k]
    };
    let mut dcol = vec![T::zero(); p * k];
    for n in 0..g.batch {
        let image = &input.data()[n * in_stride..][..in_stride];
        let dy = &grad_out.data()[n * p * g.cout..][..p * g.cout];
        for row in dy.chunks_exact(g.cout) {
            for (b, &d) in grad_b.iter_mut().zip(row) {
                *b += d;
            }
        }
        let patches: &[T] = if pointwise {
            image
        } else {
            g.im2col(image, &mut col);
            &col
        };
        gemm::acc_atb(patches, p, k, dy, g.cout, &mut grad_w);
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi[n * in_stride..][..in_stride];
            if pointwise {
                gemm::acc_abt(dy, p, g.cout, weights.data(), k, dst);
            } else {
                dcol.fill(T::zero());
                gemm::acc_abt(dy, p, g.cout, weights.data(), k, &mut dcol);
                g.col2im(&dcol, dst);
            }
        }
    }
    (
        grad_in.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        Tensor::from_parts(weights.shape().to_vec(), grad_w),
        Tensor::from_parts(vec![g.cout], grad_b),
    )
}
