//! RMSprop with optional global-norm clipping.

use super::params::ChimeraParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { lr: 1e-3, decay: 0.9, eps: 1e-8, clip_norm: Some(5.0) }
    }
}

/// One update on flat buffers:
/// `ms ← decay·ms + (1 − decay)·g²`, `θ ← θ − lr·g/√(ms + eps)`.
pub fn rmsprop_update(theta: &mut [f64], grad: &[f64], ms: &mut [f64], lr: f64, decay: f64, eps: f64) {
    for ((t, &g), m) in theta.iter_mut().zip(grad).zip(ms.iter_mut()) {
        *m = decay * *m + (1.0 - decay) * g * g;
        if g != 0.0 {
            *t -= lr * g / (*m + eps).sqrt();
        }
    }
}

/// Optimizer state: one mean-square accumulator per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    pub mean_square: ChimeraParams,
}

impl RmsProp {
    pub fn new(params: &ChimeraParams, config: RmsPropConfig) -> Self {
        Self { config, mean_square: params.zeros_like() }
    }

    /// Clips `grads` (if configured) and applies one step. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, params: &mut ChimeraParams, grads: &ChimeraParams) -> Result<f64> {
        let norm = grads.squared_norm().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = match self.config.clip_norm {
            Some(limit) if norm > limit => limit / norm,
            _ => 1.0,
        };
        let RmsPropConfig { lr, decay, eps, .. } = self.config;
        for (((name, mut theta), (_, g)), (_, mut ms)) in
            params.tensors_mut().into_iter().zip(grads.tensors()).zip(self.mean_square.tensors_mut())
        {
            let g: Vec<f64> = g.iter().map(|x| x * scale).collect();
            let theta = theta.as_slice_mut().expect("standard layout");
            rmsprop_update(theta, &g, ms.as_slice_mut().expect("standard layout"), lr, decay, eps);
            if theta.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("rmsprop update of {name} (gradient norm {norm:.3e})")));
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn scalar_step_arithmetic() {
        let (mut theta, mut ms) = ([0.0], [0.0]);
        rmsprop_update(&mut theta, &[1.0], &mut ms, 0.1, 0.9, 0.0);
        assert!((ms[0] - 0.1).abs() < 1e-15);
        assert!((theta[0] + 0.1 / 0.1f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn repeated_gradient_shrinks_the_step() {
        let (mut theta, mut ms) = ([0.0], [0.0]);
        rmsprop_update(&mut theta, &[1.0], &mut ms, 0.1, 0.9, 0.0);
        let first = -theta[0];
        rmsprop_update(&mut theta, &[1.0], &mut ms, 0.1, 0.9, 0.0);
        let second = -theta[0] - first;
        // ms: 0.1 then 0.19, so steps 0.1/√0.1 and 0.1/√0.19.
        assert!((first - 0.1 / 0.1f64.sqrt()).abs() < 1e-12);
        assert!((second - 0.1 / 0.19f64.sqrt()).abs() < 1e-12);
        assert!(second < first);
    }

    fn toy() -> ChimeraParams {
        ChimeraParams::init(ModelConfig {
            n_layers: 1,
            hidden: 3,
            n_freq: 2,
            input_dim: 2,
            embed_dim: 2,
            n_sources: 2,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = toy();
        let before = p.clone();
        let mut opt = RmsProp::new(&p, RmsPropConfig::default());
        let zero = p.zeros_like();
        opt.step(&mut p, &zero).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut p = toy();
        let mut g = p.zeros_like();
        g.linear_b.fill(100.0);
        let mut opt = RmsProp::new(&p, RmsPropConfig { clip_norm: Some(5.0), ..Default::default() });
        let norm = opt.step(&mut p, &g).unwrap();
        assert!((norm - 100.0 * (g.linear_b.len() as f64).sqrt()).abs() < 1e-9);
        let clipped = 5.0 / (g.linear_b.len() as f64).sqrt();
        let expect_ms = 0.1 * clipped * clipped;
        assert!(opt.mean_square.linear_b.iter().all(|&m| (m - expect_ms).abs() < 1e-12));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = toy();
        let mut g = p.zeros_like();
        g.head_b[[0, 0]] = f64::NAN;
        let mut opt = RmsProp::new(&p, RmsPropConfig::default());
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFinite(_))));
    }
}
