use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Momentum buffers for SGD, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub lr: f64,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, momentum: f64) -> Self {
        let buffers = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState { momentum, lr, buffers }
    }
}

/// `buf = momentum * buf + grad; param -= lr * buf`. Parameters without a
/// gradient are treated as having a zero gradient.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.buffers.len() != params.len() {
        return Err(Error::shape(format!(
            "sgd_step: {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.buffers.len()
        )));
    }
    for ((id, buf), grad) in params.ids().collect::<Vec<_>>().into_iter().zip(&state.buffers).zip(grads) {
        let shape = params.get(id).shape();
        if buf.shape() != shape || grad.as_ref().is_some_and(|g| g.shape() != shape) {
            return Err(Error::shape(format!("sgd_step: shape mismatch for `{}`", params.name(id))));
        }
    }
    let mu = T::from_f64(state.momentum);
    let lr = T::from_f64(state.lr);
    let ids: Vec<_> = params.ids().collect();
    for ((id, buf), grad) in ids.into_iter().zip(&mut state.buffers).zip(grads) {
        let p = params.get_mut(id).data_mut();
        let b = buf.data_mut();
        match grad {
            Some(g) => {
                for ((pv, bv), &gv) in p.iter_mut().zip(b.iter_mut()).zip(g.data()) {
                    *bv = mu * *bv + gv;
                    *pv -= lr * *bv;
                }
            }
            None => {
                for (pv, bv) in p.iter_mut().zip(b.iter_mut()) {
                    *bv *= mu;
                    *pv -= lr * *bv;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> (ParamStore<f64>, Vec<Option<Tensor<f64>>>) {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(1.0)).unwrap();
        (s, vec![Some(Tensor::scalar(v))])
    }

    #[test]
    fn plain_step() {
        let (mut p, g) = single(1.0);
        let mut st = OptimizerState::new(&p, 0.1, 0.0);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert!((p.get(p.id("p").unwrap()).data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut p, g) = single(1.0);
        let mut st = OptimizerState::new(&p, 0.1, 0.9);
        sgd_step(&mut p, &g, &mut st).unwrap();
        sgd_step(&mut p, &g, &mut st).unwrap();
        // 1 - 0.1 * 1 - 0.1 * 1.9
        assert!((p.get(p.id("p").unwrap()).data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut p, g) = single(0.0);
        let mut st = OptimizerState::new(&p, 0.1, 0.9);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.get(p.id("p").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = ParamStore::new();
        p.add("a", Tensor::new(&[3], vec![0.5, -2.0, 7.0]).unwrap()).unwrap();
        let before = p.clone();
        let g = vec![Some(Tensor::new(&[3], vec![3.0, 1.0, -4.0]).unwrap())];
        let mut st = OptimizerState::new(&p, 0.0, 0.9);
        for _ in 0..5 {
            sgd_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p.get(p.id("a").unwrap()), before.get(before.id("a").unwrap()));
    }

    #[test]
    fn shape_mismatch() {
        let (mut p, _) = single(0.0);
        let mut st = OptimizerState::new(&p, 0.1, 0.9);
        let g = vec![Some(Tensor::new(&[2], vec![0.0, 0.0]).unwrap())];
        assert!(sgd_step(&mut p, &g, &mut st).is_err());
        assert!(sgd_step(&mut p, &[], &mut st).is_err());
    }
}
