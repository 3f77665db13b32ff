//! Adam with bias correction.

use crate::nn::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update of `params` with gradient `grads` at learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), self.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let m = self.m.get_mut(name).expect("first moment for every parameter");
            let v = self.v.get_mut(name).expect("second moment for every parameter");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = mv.to_f64().unwrap() / bc1;
                let vhat = vv.to_f64().unwrap() / bc2;
                *pv -= T::lit(lr * mhat / (vhat.sqrt() + eps));
            }
        }
    }
}
