use crate::error::Result;
use crate::model::ModelParams;
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained a non-finite value; nothing was updated.
    RejectedNonFinite,
}

/// Adam with bias correction. Moment tensors follow the order of
/// [`crate::model::PARAM_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Apply one update. Gradients align with the parameter order; a
    /// non-finite gradient anywhere rejects the whole step.
    pub fn try_step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<StepOutcome> {
        if grads.iter().any(|g| !g.all_finite()) {
            return Ok(StepOutcome::RejectedNonFinite);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (((_, p), mt), (vt, g)) in params
            .named_mut()
            .into_iter()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut().zip(grads))
        {
            let p = p.data_mut();
            let m = mt.data_mut();
            let v = vt.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(StepOutcome::Applied)
    }
}
