//! Adam with bias correction, operating on parameter leaves of a [`Graph`].

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient at step {step} (param {param})")]
    Divergence { step: u64, param: String },
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub struct AdamState<E: Scalar> {
    cfg: AdamConfig,
    /// (first moment, second moment) per parameter, same order as the vars
    /// handed to `step`.
    moments: Vec<(Vec<E>, Vec<E>)>,
    step: u64,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Parameters with no recorded gradient
    /// are treated as zero-gradient. Gradients are cleared afterwards.
    pub fn step(
        &mut self,
        graph: &mut Graph<E>,
        params: &[(String, Var)],
    ) -> Result<(), OptimError> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, v)| {
                    let n = graph.value(*v).numel();
                    (vec![E::ZERO; n], vec![E::ZERO; n])
                })
                .collect();
        }
        self.step += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let eps = E::from_f64(self.cfg.epsilon);
        let bc1 = E::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = E::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr = E::from_f64(self.cfg.lr);
        for ((name, var), (m, v)) in params.iter().zip(&mut self.moments) {
            let grad: Vec<E> = match graph.grad(*var) {
                Some(g) => {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(OptimError::Divergence {
                            step: self.step,
                            param: name.clone(),
                        });
                    }
                    g.to_vec()
                }
                None => vec![E::ZERO; graph.value(*var).numel()],
            };
            let data = &mut graph.value_mut(*var).data;
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (E::ONE - b1) * grad[i];
                v[i] = b2 * v[i] + (E::ONE - b2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        graph.zero_grad();
        Ok(())
    }
}
