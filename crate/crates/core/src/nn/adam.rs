use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Tensor};
use super::params::{flatten, param_count, Parameters};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamSettings {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamSettings {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings::with_lr(1e-3)
    }
}

/// Adam with bias correction over a model's flattened parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub settings: AdamSettings,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Adam {
    pub fn new(settings: AdamSettings, n_params: usize) -> Result<Self> {
        if !(settings.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", settings.learning_rate)));
        }
        Ok(Adam {
            settings,
            step: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
        })
    }

    pub fn for_model<P: Parameters>(settings: AdamSettings, model: &P) -> Result<Self> {
        Adam::new(settings, param_count(model))
    }

    /// One update. A non-finite gradient aborts before anything is modified.
    pub fn update_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam over {} parameters got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {k} is {}", grads[k])));
        }
        self.step += 1;
        let AdamSettings {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.settings;
        let correction1 = 1.0 - beta1.powi(self.step as i32);
        let correction2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }

    pub fn update<P: Parameters>(&mut self, model: &mut P, grads: &P) -> Result<()> {
        let g = flatten(grads);
        let mut offset = 0;
        let mut params = flatten(model);
        self.update_flat(&mut params, &g)?;
        model.visit_mut(&mut |v| {
            v.copy_from_slice(&params[offset..offset + v.len()]);
            offset += v.len();
        });
        Ok(())
    }

    pub fn store(&self, ckpt: &mut Checkpoint, prefix: &str) {
        let s = &self.settings;
        ckpt.insert(
            format!("{prefix}settings"),
            Tensor::vector(vec![s.learning_rate, s.beta1, s.beta2, s.epsilon]),
        );
        ckpt.insert(format!("{prefix}step"), Tensor::vector(vec![self.step as f64]));
        ckpt.insert(format!("{prefix}m"), Tensor::vector(self.first_moment.clone()));
        ckpt.insert(format!("{prefix}v"), Tensor::vector(self.second_moment.clone()));
    }

    pub fn load(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let s = ckpt.require(&format!("{prefix}settings"))?;
        if s.data.len() != 4 {
            return Err(Error::Consistency("adam settings entry".into()));
        }
        let step = ckpt.require(&format!("{prefix}step"))?.scalar()? as u64;
        let m = ckpt.require(&format!("{prefix}m"))?.data.clone();
        let v = ckpt.require(&format!("{prefix}v"))?.data.clone();
        if m.len() != v.len() {
            return Err(Error::Consistency("adam moment lengths differ".into()));
        }
        Ok(Adam {
            settings: AdamSettings {
                learning_rate: s.data[0],
                beta1: s.data[1],
                beta2: s.data[2],
                epsilon: s.data[3],
            },
            step,
            first_moment: m,
            second_moment: v,
        })
    }
}
