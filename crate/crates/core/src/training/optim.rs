use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DENOM_GUARD: f64 = 1e-12;

/// AdaMax: Adam with the second moment replaced by an exponentially
/// weighted infinity norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaMax {
    pub beta1: f64,
    pub beta2: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl AdaMax {
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_betas(params, 0.9, 0.999)
    }

    pub fn with_betas(params: &[Tensor], beta1: f64, beta2: f64) -> Self {
        AdaMax {
            beta1,
            beta2,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            u: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn inf_norm(&self) -> &[Vec<f64>] {
        &self.u
    }

    /// One in-place update. A `None` gradient counts as all zeros.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&[f64]>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adamax: state for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() || g.is_some_and(|g| g.len() != p.numel()) {
                return Err(Error::shape(format!("adamax: tensor {i} size mismatch")));
            }
        }
        self.step += 1;
        let step_size = lr / (1.0 - self.beta1.powi(self.step as i32));
        for ((p, g), (m, u)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.u.iter_mut()))
        {
            let data = p.data_mut();
            for k in 0..data.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                u[k] = (self.beta2 * u[k]).max(gk.abs());
                data[k] -= step_size * m[k] / (u[k] + DENOM_GUARD);
            }
        }
        Ok(())
    }
}
