//! Operation record and reverse-mode replay.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::ops::conv::{self, Padding};
use crate::ops::{broadcast, pool};
use crate::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geometry: conv::Geometry,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    Upsample2 {
        x: usize,
    },
    Crop {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddScalar {
        x: usize,
    },
    MulScalar {
        x: usize,
        s: T,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations for one forward pass.
///
/// Values are immutable once recorded. A tape is single-threaded and is
/// discarded after [`Tape::backward`]; parameters live outside it and are
/// re-bound as leaves for every pass.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[var.0].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn conv2d(
        &self,
        x: Var,
        weights: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        let geometry = conv::Geometry::new(xv.shape(), wv.shape(), stride, padding)?;
        let bv = bias.map(|b| self.value(b));
        if let Some(b) = &bv {
            if b.shape() != [geometry.cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: wv.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let out = conv::forward(&geometry, &xv, &wv, bv.as_deref());
        let mut ids = vec![x.0, weights.0];
        ids.extend(bias.map(|b| b.0));
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: weights.0,
                b: bias.map(|b| b.0),
                geometry,
            },
            self.needs(&ids),
        ))
    }

    pub fn max_pool(
        &self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(TensorError::InvalidArgument(format!(
                "maxpool expects NHWC input, got {:?}",
                xv.shape()
            )));
        }
        let (out, argmax) = pool::max_pool(&xv, window, stride, padding)?;
        Ok(self.push(out, Op::MaxPool { x: x.0, argmax }, self.needs(&[x.0])))
    }

    /// Mean over spatial positions: `[b,h,w,c] -> [b,1,1,c]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(TensorError::InvalidArgument(format!(
                "global_avg_pool expects NHWC input, got {:?}",
                xv.shape()
            )));
        }
        let out = pool::global_avg_pool(&xv);
        Ok(self.push(out, Op::GlobalAvgPool { x: x.0 }, self.needs(&[x.0])))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(TensorError::InvalidArgument(format!(
                "upsample expects NHWC input, got {:?}",
                xv.shape()
            )));
        }
        let out = pool::upsample2(&xv);
        Ok(self.push(out, Op::Upsample2 { x: x.0 }, self.needs(&[x.0])))
    }

    /// Top-left spatial crop to `height × width`.
    pub fn crop(&self, x: Var, height: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (_, h, w, _) = xv.nhwc();
        if height == 0 || width == 0 || height > h || width > w {
            return Err(TensorError::InvalidArgument(format!(
                "crop to {height}x{width} outside {:?}",
                xv.shape()
            )));
        }
        if (height, width) == (h, w) {
            return Ok(x);
        }
        let out = pool::crop(&xv, height, width);
        Ok(self.push(out, Op::Crop { x: x.0 }, self.needs(&[x.0])))
    }

    /// Affine map `[b,d] · [d,e] + [e]`.
    pub fn linear(&self, x: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        let (&[b, d], &[wd, e]) = (xv.shape(), wv.shape()) else {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        };
        if d != wd {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); b * e];
        if let Some(bias) = bias {
            let bv = self.value(bias);
            if bv.shape() != [e] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: wv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_exact_mut(e) {
                row.copy_from_slice(bv.data());
            }
        }
        crate::ops::gemm::acc_ab(xv.data(), b, d, wv.data(), e, &mut out);
        let mut ids = vec![x.0, weights.0];
        ids.extend(bias.map(|v| v.0));
        Ok(self.push(
            Tensor::from_parts(vec![b, e], out),
            Op::Linear {
                x: x.0,
                w: weights.0,
                b: bias.map(|v| v.0),
            },
            self.needs(&ids),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast::apply("add", &self.value(a), &self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, self.needs(&[a.0, b.0])))
    }

    /// Element-wise product with broadcasting of size-1 axes.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast::apply("mul", &self.value(a), &self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, self.needs(&[a.0, b.0])))
    }

    pub fn add_scalar(&self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar { x: x.0 }, self.needs(&[x.0]))
    }

    pub fn mul_scalar(&self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::MulScalar { x: x.0, s }, self.needs(&[x.0]))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x: x.0 }, self.needs(&[x.0]))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x: x.0 }, self.needs(&[x.0]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[b, q] = lv.shape() else {
            return Err(TensorError::InvalidArgument(format!(
                "cross-entropy expects [batch, classes] logits, got {:?}",
                lv.shape()
            )));
        };
        if labels.len() != b {
            return Err(TensorError::InvalidArgument(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= q) {
            return Err(TensorError::LabelOutOfRange {
                row,
                label,
                classes: q,
            });
        }
        let mut probs = Vec::with_capacity(b * q);
        let mut loss = T::zero();
        for (row, &label) in lv.data().chunks_exact(q).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            loss += log_denom - (row[label] - max);
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let loss = loss / T::of(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            self.needs(&[logits.0]),
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - ratio)`; identity when not training.
    pub fn dropout(
        &self,
        x: Var,
        ratio: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout ratio {ratio} outside [0, 1)"
            )));
        }
        if !training || ratio == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = T::of(1.0 / (1.0 - ratio));
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() >= ratio {
                    keep
                } else {
                    T::zero()
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout { x: x.0, mask }, self.needs(&[x.0])))
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat(&self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        let first = values.first().ok_or(TensorError::InvalidArgument(
            "concat of nothing".into(),
        ))?;
        let lead = &first.shape()[..first.rank() - 1];
        for v in &values {
            if v.rank() != first.rank() || &v.shape()[..v.rank() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let outer: usize = lead.iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[v.rank() - 1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for row in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[row * w..(row + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat { inputs: ids },
            needs,
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x: x.0 }, self.needs(&[x.0])))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x: x.0 }, self.needs(&[x.0]))
    }

    /// Gradient of the scalar `loss` with respect to every variable that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        let accumulate = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, g: Tensor<T>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, geometry } => {
                    let need_x = nodes[*x].requires_grad;
                    let (gx, gw, gb) =
                        conv::backward(geometry, &nodes[*x].value, &nodes[*w].value, &grad, need_x);
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![T::zero(); nodes[*x].value.len()];
                    for (&src, &g) in argmax.iter().zip(grad.data()) {
                        gx[src] += g;
                    }
                    let shape = nodes[*x].value.shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(shape, gx));
                }
                Op::GlobalAvgPool { x } => {
                    let gx = pool::global_avg_pool_backward(nodes[*x].value.shape(), &grad);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Upsample2 { x } => {
                    let gx = pool::upsample2_backward(nodes[*x].value.shape(), &grad);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Crop { x } => {
                    let gx = pool::crop_backward(nodes[*x].value.shape(), &grad);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let (bsz, d) = (xv.shape()[0], xv.shape()[1]);
                    let e = wv.shape()[1];
                    if nodes[*x].requires_grad {
                        let mut gx = vec![T::zero(); bsz * d];
                        crate::ops::gemm::acc_abt(grad.data(), bsz, e, wv.data(), d, &mut gx);
                        accumulate(&mut grads, *x, Tensor::from_parts(vec![bsz, d], gx));
                    }
                    let mut gw = vec![T::zero(); d * e];
                    crate::ops::gemm::acc_atb(xv.data(), bsz, d, grad.data(), e, &mut gw);
                    accumulate(&mut grads, *w, Tensor::from_parts(vec![d, e], gw));
                    if let Some(b) = b {
                        let mut gb = vec![T::zero(); e];
                        for row in grad.data().chunks_exact(e) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![e], gb));
                    }
                }
                Op::Add { a, b } => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    if nodes[*a].requires_grad {
                        let ga = broadcast::reduce_to(&grad, sa, sb, true, |_, _| T::one());
                        accumulate(&mut grads, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let gb = broadcast::reduce_to(&grad, sa, sb, false, |_, _| T::one());
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (da, db) = (va.data(), vb.data());
                    if nodes[*a].requires_grad {
                        let ga =
                            broadcast::reduce_to(&grad, va.shape(), vb.shape(), true, |_, j| db[j]);
                        accumulate(&mut grads, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let gb = broadcast::reduce_to(&grad, va.shape(), vb.shape(), false, |i, _| {
                            da[i]
                        });
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddScalar { x } | Op::Reshape { x } => {
                    let shape = nodes[*x].value.shape().to_vec();
                    let gx = Tensor::from_parts(shape, grad.into_data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::MulScalar { x, s } => {
                    let s = *s;
                    accumulate(&mut grads, *x, grad.map(|g| g * s));
                }
                Op::Relu { x } => {
                    let xv = &nodes[*x].value;
                    let data = grad
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
                Op::Sigmoid { x } => {
                    let data = grad
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect();
                    let shape = node.value.shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(shape, data));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let shape = nodes[*logits].value.shape().to_vec();
                    let q = shape[1];
                    let scale = grad.item() / T::of(labels.len() as f64);
                    let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (row, &label) in labels.iter().enumerate() {
                        g[row * q + label] -= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::from_parts(shape, g));
                }
                Op::Dropout { x, mask } => {
                    let data = grad.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    let shape = grad.shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(shape, data));
                }
                Op::Concat { inputs } => {
                    let total = *grad.shape().last().expect("rank ≥ 1");
                    let outer = grad.len() / total;
                    let mut offset = 0;
                    for &input in inputs {
                        let shape = nodes[input].value.shape().to_vec();
                        let w = *shape.last().expect("rank ≥ 1");
                        if nodes[input].requires_grad {
                            let mut g = Vec::with_capacity(outer * w);
                            for row in 0..outer {
                                g.extend_from_slice(
                                    &grad.data()[row * total + offset..row * total + offset + w],
                                );
                            }
                            accumulate(&mut grads, input, Tensor::from_parts(shape, g));
                        }
                        offset += w;
                    }
                }
                Op::Sum { x } => {
                    let shape = nodes[*x].value.shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&shape, grad.item()));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Logistic function, kept inside the open interval (0, 1) even where the
/// floating-point result would round to an endpoint.
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let below_one = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(below_one)
}
