//! Trailing-axis broadcasting for binary element-wise operations.

use crate::error::{Result, TensorError};
use crate::{Real, Tensor};

/// Resolved broadcast: output shape plus per-operand strides over it (0 on expanded axes).
pub(crate) struct Plan {
    pub shape: Vec<usize>,
    lhs: Vec<usize>,
    rhs: Vec<usize>,
}

fn strides_over(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 && out[offset + i] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

impl Plan {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let mut shape = vec![0; rank];
        for i in 0..rank {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            shape[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        lhs: a.to_vec(),
                        rhs: b.to_vec(),
                    })
                }
            };
        }
        Ok(Self {
            lhs: strides_over(a, &shape),
            rhs: strides_over(b, &shape),
            shape,
        })
    }

    /// Visits `(out_index, lhs_index, rhs_index)` in row-major output order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.shape.len();
        let total: usize = self.shape.iter().product();
        let mut counter = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for out in 0..total {
            f(out, ia, ib);
            for axis in (0..rank).rev() {
                counter[axis] += 1;
                ia += self.lhs[axis];
                ib += self.rhs[axis];
                if counter[axis] < self.shape[axis] {
                    break;
                }
                ia -= self.lhs[axis] * counter[axis];
                ib -= self.rhs[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
    }
}

pub(crate) fn apply<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let plan = Plan::new(op, a.shape(), b.shape())?;
    let mut out = vec![T::zero(); plan.shape.iter().product()];
    let (x, y) = (a.data(), b.data());
    plan.for_each(|o, i, j| out[o] = f(x[i], y[j]));
    Ok(Tensor::from_parts(plan.shape, out))
}

/// Sums `grad` (broadcast shape) back onto one operand.
///
/// `scale(lhs_index, rhs_index)` multiplies each term; `lhs` selects which operand receives it.
pub(crate) fn reduce_to<T: Real>(
    grad: &Tensor<T>,
    lhs_shape: &[usize],
    rhs_shape: &[usize],
    lhs: bool,
    scale: impl Fn(usize, usize) -> T,
) -> Tensor<T> {
    let g = grad.data();
    let target = if lhs { lhs_shape } else { rhs_shape };
    if lhs_shape == rhs_shape {
        let data = g.iter().enumerate().map(|(k, &v)| v * scale(k, k)).collect();
        return Tensor::from_parts(target.to_vec(), data);
    }
    let plan = Plan::new("broadcast", lhs_shape, rhs_shape).expect("validated in forward");
    let mut out = vec![T::zero(); target.iter().product()];
    plan.for_each(|o, i, j| {
        let dst = if lhs { i } else { j };
        out[dst] += g[o] * scale(i, j);
    });
    Tensor::from_parts(target.to_vec(), out)
}
