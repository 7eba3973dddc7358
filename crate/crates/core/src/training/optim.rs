use crate::error::Result;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// `base_lr·(1 − iter/max_iter)^power`; iterations past the end give 0.
pub fn poly_lr(base_lr: f64, iter: u64, max_iter: u64, power: f64) -> f64 {
    if iter > max_iter {
        log::warn!("iteration {iter} is past max_iter {max_iter}; learning rate clamped to 0");
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// Momentum buffers mirroring the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub buffers: Vec<Tensor>,
    pub iteration: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        OptimizerState {
            buffers: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            iteration: 0,
        }
    }
}

/// Classic momentum SGD with coupled weight decay:
/// `g = grad + wd·p; buf = m·buf + g; p −= lr·buf`.
///
/// Returns `false` and leaves everything untouched when a gradient is not
/// finite.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<bool> {
    crate::error::ensure!(
        state.buffers.len() == params.len(),
        Validation,
        "optimizer holds {} buffers for {} parameters",
        state.buffers.len(),
        params.len()
    );
    if !grads.is_finite() {
        log::warn!("non-finite gradient at step {}; update skipped", state.iteration);
        return Ok(false);
    }
    for (id, g) in grads.iter() {
        let p = params.get_mut(id);
        let buf = &mut state.buffers[id.index()];
        for ((pv, bv), &gv) in p.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
            let step = gv + weight_decay * *pv;
            *bv = momentum * *bv + step;
            *pv -= lr * *bv;
        }
    }
    state.iteration += 1;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::full(&[2], v));
        s
    }

    fn grad(store: &ParamStore, g: f64) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        let id = store.id("p").unwrap();
        *out.get_mut(id) = Tensor::full(&[2], g);
        out
    }

    #[test]
    fn poly_values() {
        assert_eq!(poly_lr(1e-3, 0, 40_000, 0.9), 1e-3);
        assert_eq!(poly_lr(1e-3, 40_000, 40_000, 0.9), 0.0);
        assert!((poly_lr(1e-3, 20_000, 40_000, 0.9) - 5.358_867_312_681_466e-4).abs() < 1e-15);
        assert_eq!(poly_lr(1e-3, 40_001, 40_000, 0.9), 0.0);
    }

    #[test]
    fn zero_lr_only_updates_buffers() {
        let mut p = one_param(1.0);
        let g = grad(&p, 0.5);
        let mut st = OptimizerState::new(&p);
        assert!(sgd_step(&mut p, &g, &mut st, 0.0, 0.9, 1e-4).unwrap());
        assert_eq!(p.get(p.id("p").unwrap()).data(), &[1.0, 1.0]);
        assert!((st.buffers[0].data()[0] - (0.5 + 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn plain_descent_without_momentum_or_decay() {
        let mut p = one_param(1.0);
        let g = grad(&p, 0.5);
        let mut st = OptimizerState::new(&p);
        sgd_step(&mut p, &g, &mut st, 0.1, 0.0, 0.0).unwrap();
        assert!((p.get(p.id("p").unwrap()).data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn second_momentum_step_is_scaled() {
        // buf1 = g, buf2 = m·g + g, so the second delta is lr·g·(1 + m)
        let (lr, m, gv) = (0.1, 0.9, 0.5);
        let mut p = one_param(1.0);
        let g = grad(&p, gv);
        let mut st = OptimizerState::new(&p);
        let id = p.id("p").unwrap();
        sgd_step(&mut p, &g, &mut st, lr, m, 0.0).unwrap();
        let before = p.get(id).data()[0];
        sgd_step(&mut p, &g, &mut st, lr, m, 0.0).unwrap();
        let delta = before - p.get(id).data()[0];
        assert!((delta - lr * gv * (1.0 + m)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut p = one_param(1.0);
        let g = grad(&p, f64::NAN);
        let mut st = OptimizerState::new(&p);
        assert!(!sgd_step(&mut p, &g, &mut st, 0.1, 0.9, 0.0).unwrap());
        assert_eq!(p.get(p.id("p").unwrap()).data(), &[1.0, 1.0]);
        assert_eq!(st.iteration, 0);
    }
}
