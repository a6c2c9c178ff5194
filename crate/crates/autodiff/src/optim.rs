use crate::error::{Result, TensorError};
use crate::{Real, Tensor};

/// Stochastic gradient descent, `p ← p − lr·g`.
///
/// Momentum and weight decay default to zero, which is plain SGD.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Sgd<T> {
    fn default() -> Self {
        Self::new(0.0, 0.0)
    }
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates `params[i]` in place with `grads[i]`; parameters without a gradient are left alone.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.len() != params.len() {
            self.velocity = (0..params.len()).map(|_| None).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if self.momentum == 0.0 && self.weight_decay == 0.0 {
                sgd_step(p, g, lr);
                continue;
            }
            let (mu, wd) = (T::of(self.momentum), T::of(self.weight_decay));
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= T::of(lr) * *vv;
            }
        }
        Ok(())
    }
}

/// One plain update `p ← p − lr·g`.
pub fn sgd_step<T: Real>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) {
    let lr = T::of(lr);
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let mut p = Tensor::<f32>::ones(&[1]);
        sgd_step(&mut p, &Tensor::ones(&[1]), 0.01);
        assert_eq!(p.item(), 0.99);
    }

    #[test]
    fn skips_missing_gradients() {
        let mut params = vec![Tensor::<f64>::ones(&[2]), Tensor::ones(&[2])];
        let grads = vec![None, Some(Tensor::full(&[2], 2.0))];
        Sgd::default().step(&mut params, &grads, 0.5).unwrap();
        assert_eq!(params[0].data(), &[1.0, 1.0]);
        assert_eq!(params[1].data(), &[0.0, 0.0]);
    }
}
