use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
///
/// Gradients already within budget (including all-zero ones) pass through
/// unchanged.
pub fn clip_grad_norm<T: Scalar>(mut grads: Grads<T>, max_norm: T) -> Result<Grads<T>> {
    if !(max_norm > T::zero()) {
        return Err(TensorError::InvalidArgument(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub clip: Option<f64>,
    step: u64,
    first: BTreeMap<ParamId, Tensor<T>>,
    second: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, clip: Option<f64>) -> Result<Self> {
        if let Some(c) = clip {
            if !(c > 0.0) {
                return Err(TensorError::InvalidArgument(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(Self {
            kind,
            lr,
            clip,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn sgd(lr: f64, clip: Option<f64>) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr, clip)
    }

    pub fn adam(lr: f64, clip: Option<f64>) -> Result<Self> {
        Self::new(OptimizerKind::adam(), lr, clip)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Moment accumulators, for checkpointing: `(first, second)`.
    pub fn moments(&self) -> (&BTreeMap<ParamId, Tensor<T>>, &BTreeMap<ParamId, Tensor<T>>) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: BTreeMap<ParamId, Tensor<T>>, second: BTreeMap<ParamId, Tensor<T>>) {
        self.step = step;
        self.first = first;
        self.second = second;
    }

    /// Applies one update to `params`. Every listed parameter must have a
    /// gradient in `grads`; gradients for unlisted parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore<T>, params: &[ParamId], grads: &Grads<T>) -> Result<()> {
        let mut selected = Grads::new();
        for &id in params {
            let g = grads
                .get(id)
                .ok_or_else(|| TensorError::MissingGradient(store.name(id).to_string()))?;
            if g.shape() != store.get(id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            selected.insert(id, g.clone());
        }
        if let Some(c) = self.clip {
            selected = clip_grad_norm(selected, T::lit(c))?;
        }
        self.step += 1;
        let lr = T::lit(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in selected.iter() {
                    let p = store.get_mut(id);
                    for (x, &gx) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * gx;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = T::lit(1.0 - beta1.powi(t));
                let bc2 = T::lit(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                for (id, g) in selected.iter() {
                    let shape = g.shape().to_vec();
                    let m = self.first.entry(id).or_insert_with(|| Tensor::zeros(&shape));
                    let v = self.second.entry(id).or_insert_with(|| Tensor::zeros(&shape));
                    let p = store.get_mut(id);
                    for (((x, &gx), mx), vx) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mx = b1 * *mx + (T::one() - b1) * gx;
                        *vx = b2 * *vx + (T::one() - b2) * gx * gx;
                        let mhat = *mx / bc1;
                        let vhat = *vx / bc2;
                        *x -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(p)).unwrap();
        (s, id)
    }

    fn grad(id: ParamId, g: f64) -> Grads<f64> {
        let mut gs = Grads::new();
        gs.insert(id, Tensor::scalar(g));
        gs
    }

    #[test]
    fn sgd_step_by_hand() {
        let (mut s, id) = single(1.0);
        let mut opt = Optimizer::sgd(0.1, None).unwrap();
        opt.step(&mut s, &[id], &grad(id, 0.5)).unwrap();
        assert!((s.get(id).item().unwrap() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        for mut opt in [Optimizer::sgd(0.1, Some(0.5)).unwrap(), Optimizer::adam(1e-3, None).unwrap()] {
            let (mut s, id) = single(1.0);
            opt.step(&mut s, &[id], &grad(id, 0.0)).unwrap();
            assert_eq!(s.get(id).item().unwrap(), 1.0);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr.
        let (mut s, id) = single(1.0);
        let mut opt = Optimizer::adam(1e-3, None).unwrap();
        opt.step(&mut s, &[id], &grad(id, 1.0)).unwrap();
        let moved = 1.0 - s.get(id).item().unwrap();
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, id) = single(1.0);
        let mut opt = Optimizer::<f64>::sgd(0.1, None).unwrap();
        let err = opt.step(&mut s, &[id], &Grads::new()).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient("p".into()));
    }

    #[test]
    fn clip_scales_to_budget() {
        // norm([1.2, 1.6]) = 2.0 → factor 0.05
        let mut g = Grads::<f64>::new();
        g.insert(ParamId(0), Tensor::new(vec![2], vec![1.2, 1.6]).unwrap());
        let c = clip_grad_norm(g, 0.1).unwrap();
        let d = c.get(ParamId(0)).unwrap().data();
        assert!((d[0] - 0.06).abs() < 1e-12 && (d[1] - 0.08).abs() < 1e-12);
    }

    #[test]
    fn clip_under_budget_and_zero_pass_through() {
        let mut g = Grads::new();
        g.insert(ParamId(0), Tensor::new(vec![2], vec![0.03, 0.04]).unwrap());
        let c = clip_grad_norm(g.clone(), 0.1).unwrap();
        assert_eq!(c.get(ParamId(0)).unwrap().data(), &[0.03, 0.04]);
        let mut z = Grads::new();
        z.insert(ParamId(0), Tensor::<f64>::zeros(&[3]));
        let c = clip_grad_norm(z, 0.1).unwrap();
        assert_eq!(c.get(ParamId(0)).unwrap().data(), &[0.0; 3]);
        assert!(clip_grad_norm(Grads::<f64>::new(), 0.0).is_err());
    }
}
