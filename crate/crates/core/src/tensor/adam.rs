use super::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected ADAM state for an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn tracked(&self) -> usize {
        self.m.len()
    }

    /// Applies one update in place. Gradients are left untouched; every
    /// parameter must carry one.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<(), TensorError> {
        if params.len() != self.m.len() {
            return Err(super::shape_err(
                "adam_step",
                format!("tracking {} tensors, got {}", self.m.len(), params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(TensorError::MissingGrad(i));
            }
            if p.numel() != self.m[i].len() {
                return Err(super::shape_err(
                    "adam_step",
                    format!("parameter {i} changed size"),
                ));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        // lr * m_hat / (sqrt(v_hat) + eps) with the corrections folded in
        let step = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.epsilon);
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *w = *w - step * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}
