use super::{shape_err, NeuralError, Parameter, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are created on the first
/// step and must keep matching the parameter list afterwards.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update. Fails without touching any parameter if a
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        for p in params.iter() {
            if !p.grad.is_finite() {
                return Err(NeuralError::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(shape_err(
                "adam",
                format!(
                    "{} parameters, state holds {}",
                    params.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (p, m) in params.iter().zip(&self.first_moment) {
            p.value.same_shape(m, "adam")?;
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = T::lit(1.0 - beta1.powi(t));
        let c2 = T::lit(1.0 - beta2.powi(t));
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (lr, eps) = (T::lit(learning_rate), T::lit(epsilon));
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let g = p.grad.data().to_vec();
            let values = p.value.data_mut();
            for (k, &gk) in g.iter().enumerate() {
                let mk = &mut m.data_mut()[k];
                *mk = b1 * *mk + (T::one() - b1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = b2 * *vk + (T::one() - b2) * gk * gk;
                let mhat = *mk / c1;
                let vhat = *vk / c2;
                values[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
