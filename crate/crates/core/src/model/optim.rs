use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

/// Optimizer moments, laid out like [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam { .. } => params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        };
        Self {
            kind,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// Rescales `grad` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut ModelParams, max_norm: f64) -> f64 {
    let n = grad.squared_norm().sqrt();
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for t in grad.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}

/// One update. SGD: `θ ← θ − lr·g`. Adam: bias-corrected moments,
/// `θ ← θ − lr·m̂/(√v̂ + ε)`.
pub fn optimizer_step(
    params: &mut ModelParams,
    grad: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    if params.config != grad.config {
        return Err(Error::Shape("gradient does not match parameters".into()));
    }
    state.step += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.tensors_mut().into_iter().zip(grad.tensors()) {
                for (x, d) in p.iter_mut().zip(g) {
                    *x -= lr * d;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(state.step as i32);
            let c2 = 1.0 - beta2.powi(state.step as i32);
            let tensors = params.tensors_mut().into_iter().zip(grad.tensors());
            let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
            for ((p, g), (m, v)) in tensors.zip(moments) {
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::Diverged("non-finite parameters after update".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Rng;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            feature_dim: 2,
            context: 0,
            encoder_hidden: vec![],
            d_enc: 2,
            h_proj: 2,
            d_proj: 2,
            n_classes: 2,
        };
        ModelParams::init(&cfg, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn sgd_definition() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (i, t) in g.tensors_mut().into_iter().enumerate() {
            t.iter_mut().for_each(|v| *v = 0.3 + i as f64);
        }
        let mut st = OptimizerState::new(OptimizerKind::Sgd, &p);
        optimizer_step(&mut p, &g, &mut st, 0.1).unwrap();
        for ((a, b), d) in p.tensors().iter().zip(before.tensors()).zip(g.tensors()) {
            for i in 0..a.len() {
                assert!((a[i] - (b[i] - 0.1 * d[i])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient() {
        let mut p = params();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = OptimizerState::new(OptimizerKind::Sgd, &p);
        optimizer_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        let mut st = OptimizerState::new(OptimizerKind::adam(), &p);
        optimizer_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_minimises_quadratic_bowl() {
        // f(w) = ‖w‖², ∇f = 2w
        let mut p = params();
        let mut st = OptimizerState::new(OptimizerKind::adam(), &p);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.5);
        }
        for step in 0..200 {
            let mut g = p.clone();
            g.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v *= 2.0));
            let lr = 0.05 * (1.0 - step as f64 / 200.0);
            optimizer_step(&mut p, &g, &mut st, lr).unwrap();
        }
        assert!(p.squared_norm().sqrt() < 1e-3, "{}", p.squared_norm().sqrt());
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.tensors_mut()[0][0] = f64::NAN;
        let mut st = OptimizerState::new(OptimizerKind::adam(), &p);
        assert!(matches!(optimizer_step(&mut p, &g, &mut st, 0.1), Err(Error::Diverged(_))));
    }

    #[test]
    fn clipping() {
        let p = params();
        let mut g = p.zeros_like();
        g.tensors_mut()[0][0] = 30.0;
        g.tensors_mut()[0][1] = 40.0;
        assert_eq!(clip_grad_norm(&mut g, 10.0), 50.0);
        assert!((g.squared_norm().sqrt() - 10.0).abs() < 1e-12);
    }
}
