use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one [`ParamSet`]. The learning rate is supplied per step
/// so that callers can rescale it between training phases.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || {
            let mut s = ParamSet::new();
            for (name, t) in params.names().iter().zip(params.tensors()) {
                s.push(name.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn apply(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || !self.m.same_layout(params) {
            return Err(NnError::Shape("adam: gradient/state layout mismatch".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let (b1, b2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.config.eps));
        let one = T::one();
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            if p.shape() != g.shape() {
                return Err(NnError::Shape("adam: gradient shape mismatch".into()));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// First and second moment buffers, for checkpointing.
    pub fn moments(&self) -> (&ParamSet<T>, &ParamSet<T>) {
        (&self.m, &self.v)
    }

    pub fn from_parts(config: AdamConfig, step: u64, m: ParamSet<T>, v: ParamSet<T>) -> Result<Self> {
        if !m.same_layout(&v) {
            return Err(NnError::Shape("adam: moment layouts differ".into()));
        }
        Ok(Self { config, step, m, v })
    }
}
