use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// One update. Per parameter: `p -= lr * wd * p`, then the bias-corrected
    /// Adam step. Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64, wd: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || wd.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer holds {} moments, got {} params, {} grads, {} decays",
                self.m.len(),
                params.len(),
                grads.len(),
                wd.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "parameter {i}: shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = 1.0 - lr * wd[i];
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gv.as_f64();
                let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
                *mv = T::from_f64(mf);
                *vv = T::from_f64(vf);
                let mut x = pv.as_f64();
                if wd[i] != 0.0 {
                    x *= decay;
                }
                x -= lr * (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *pv = T::from_f64(x);
            }
        }
        Ok(())
    }
}
