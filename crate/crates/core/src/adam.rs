//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps_stability: f32,
}

impl AdamState {
    /// Fresh state with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor], beta1: f32, beta2: f32, eps_stability: f32) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            beta1,
            beta2,
            eps_stability,
        }
    }

    /// One in-place descent step: `p -= lr · m̂ / (√v̂ + eps)`.
    ///
    /// Nothing is modified if any gradient is non-finite or shapes disagree.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.expect_same_shape("adam_step", g)?;
            p.expect_same_shape("adam_step", &self.first_moment[i])?;
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of parameter {i}"),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps_stability);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::apply`].
pub fn adam_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &AdamState,
    lr: f32,
) -> Result<(Vec<Tensor>, AdamState)> {
    let mut params = params.to_vec();
    let mut state = state.clone();
    state.apply(&mut params, grads, lr)?;
    Ok((params, state))
}
