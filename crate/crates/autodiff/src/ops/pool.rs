//! Spatial resampling kernels: max pooling, global averaging, nearest upsampling, cropping.

use crate::error::{Result, TensorError};
use crate::ops::conv::{conv_output_extent, Padding};
use crate::{Real, Tensor};

/// Max pooling; returns the output and, per output element, the flat input index it came from.
pub(crate) fn max_pool<T: Real>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, h, w, c) = input.nhwc();
    let fit = |n, k, s| {
        conv_output_extent(n, k, s, padding).ok_or_else(|| {
            TensorError::InvalidArgument(format!(
                "maxpool: window {window:?} stride {stride:?} does not fit {:?}",
                input.shape()
            ))
        })
    };
    let (oh, top) = fit(h, window.0, stride.0)?;
    let (ow, left) = fit(w, window.1, stride.1)?;
    let x = input.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut argmax = Vec::with_capacity(b * oh * ow * c);
    for n in 0..b {
        for oy in 0..oh {
            let y0 = (oy * stride.0) as isize - top as isize;
            let ys = y0.max(0) as usize..((y0 + window.0 as isize).min(h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride.1) as isize - left as isize;
                let xs = x0.max(0) as usize..((x0 + window.1 as isize).min(w as isize)) as usize;
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for iy in ys.clone() {
                        for ix in xs.clone() {
                            let idx = ((n * h + iy) * w + ix) * c + ch;
                            // strict comparison keeps the first maximum in scan order
                            if best == usize::MAX || x[idx] > best_v {
                                best = idx;
                                best_v = x[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, oh, ow, c], out), argmax))
}

pub(crate) fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (b, h, w, c) = input.nhwc();
    let scale = T::one() / T::of((h * w) as f64);
    let mut out = vec![T::zero(); b * c];
    for n in 0..b {
        let acc = &mut out[n * c..(n + 1) * c];
        for px in input.data()[n * h * w * c..(n + 1) * h * w * c].chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= scale;
        }
    }
    Tensor::from_parts(vec![b, 1, 1, c], out)
}

pub(crate) fn global_avg_pool_backward<T: Real>(shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let scale = T::one() / T::of((h * w) as f64);
    let mut out = Vec::with_capacity(b * h * w * c);
    for n in 0..b {
        let g = &grad.data()[n * c..(n + 1) * c];
        for _ in 0..h * w {
            out.extend(g.iter().map(|&v| v * scale));
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Nearest-neighbour upsampling by two in both spatial axes.
pub(crate) fn upsample2<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (b, h, w, c) = input.nhwc();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(b * oh * ow * c);
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((n * h + oy / 2) * w + ox / 2) * c;
                out.extend_from_slice(&input.data()[src..src + c]);
            }
        }
    }
    Tensor::from_parts(vec![b, oh, ow, c], out)
}

pub(crate) fn upsample2_backward<T: Real>(shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * h * w * c];
    let g = grad.data();
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((n * oh + oy) * ow + ox) * c;
                let dst = ((n * h + oy / 2) * w + ox / 2) * c;
                for k in 0..c {
                    out[dst + k] += g[src + k];
                }
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Keeps the top-left `height × width` window of every image.
pub(crate) fn crop<T: Real>(input: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let (b, h, w, c) = input.nhwc();
    debug_assert!(height <= h && width <= w);
    let mut out = Vec::with_capacity(b * height * width * c);
    for n in 0..b {
        for y in 0..height {
            let src = ((n * h + y) * w) * c;
            out.extend_from_slice(&input.data()[src..src + width * c]);
        }
    }
    Tensor::from_parts(vec![b, height, width, c], out)
}

pub(crate) fn crop_backward<T: Real>(shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (_, height, width, _) = grad.nhwc();
    let mut out = vec![T::zero(); b * h * w * c];
    for n in 0..b {
        for y in 0..height {
            let dst = ((n * h + y) * w) * c;
            let src = ((n * height + y) * width) * c;
            out[dst..dst + width * c].copy_from_slice(&grad.data()[src..src + width * c]);
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}
