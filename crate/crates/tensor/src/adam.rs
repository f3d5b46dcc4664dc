use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;

/// Where weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDecay {
    /// `wd * p` is added to the gradient before the moment updates (Adam with L2).
    Coupled,
    /// `lr * wd * p` is subtracted from the parameter after the Adam step (AdamW).
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: WeightDecay,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay: WeightDecay::Coupled,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid(format!("invalid Adam configuration {self:?}")))
        }
    }
}

/// Adam optimizer state: one first/second moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = |p: &crate::Param<T>| {
            if p.trainable {
                vec![T::zero(); p.value.numel()]
            } else {
                Vec::new()
            }
        };
        Ok(Adam {
            config,
            step: 0,
            first: store.iter().map(|(_, p)| zeros(p)).collect(),
            second: store.iter().map(|(_, p)| zeros(p)).collect(),
        })
    }

    /// Rebuilds state saved from [`Adam::step_count`] and [`Adam::moments`].
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: Vec<Vec<T>>,
        second: Vec<Vec<T>>,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        if first.len() != store.len() || second.len() != store.len() {
            return Err(TensorError::Invalid("optimizer state does not match parameters".into()));
        }
        for (id, p) in store.iter() {
            let expect = if p.trainable { p.value.numel() } else { 0 };
            if first[id.index()].len() != expect || second[id.index()].len() != expect {
                return Err(TensorError::Invalid(format!(
                    "optimizer moments for {} have the wrong size",
                    p.name
                )));
            }
        }
        Ok(Adam {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[T], &[T]) {
        (&self.first[id.index()], &self.second[id.index()])
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Gradients are left in place; callers zero them between steps.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(TensorError::Invalid("optimizer state does not match parameters".into()));
        }
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let lr = T::of(c.lr);
        let wd = T::of(c.weight_decay);
        let eps = T::of(c.eps);
        let (bc1, bc2) = (T::of(correction1), T::of(correction2));
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = &p.grad else { continue };
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let mut g = grad.data()[i];
                if c.decay == WeightDecay::Coupled {
                    g += wd * values[i];
                }
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                if c.decay == WeightDecay::Decoupled {
                    values[i] -= lr * wd * values[i];
                }
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
