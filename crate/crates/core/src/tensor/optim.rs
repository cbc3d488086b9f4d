use super::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Holds first and second moments for
/// every parameter tensor it was constructed for.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: Vec<u64>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Tensor<T>], config: AdamWConfig) -> Self {
        Self {
            config,
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            steps: vec![0; params.len()],
        }
    }

    pub fn step_count(&self, index: usize) -> u64 {
        self.steps[index]
    }

    /// One update of parameter `index`. A missing gradient leaves the
    /// parameter and its moments untouched.
    pub fn update(&mut self, index: usize, param: &mut Tensor<T>, grad: Option<&[T]>, lr: f64, weight_decay: f64) {
        let Some(grad) = grad else { return };
        assert_eq!(grad.len(), param.len(), "gradient length for parameter {index}");
        let AdamWConfig { beta1, beta2, eps } = self.config;
        self.steps[index] += 1;
        let t = self.steps[index] as i32;
        let bc1 = T::c(1.0 - beta1.powi(t));
        let bc2 = T::c(1.0 - beta2.powi(t));
        let (b1, b2) = (T::c(beta1), T::c(beta2));
        let (lr, wd, eps) = (T::c(lr), T::c(weight_decay), T::c(eps));
        let m = &mut self.first[index];
        let v = &mut self.second[index];
        for (j, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
    }
}
