use crate::error::{Result, SavsError};
use crate::tensor::Param;

use super::TrainConfig;

/// Step-decay schedule: `lr0` before `decay_epoch`, `lr0 · lr_decay` after.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_epoch {
        cfg.lr0
    } else {
        cfg.lr0 * cfg.lr_decay
    }
}

/// Classical momentum: `v ← μv + g (+ wd·θ)`, `θ ← θ − lr·v`.
///
/// Nothing is modified when any gradient is non-finite.
pub fn sgd_step(
    params: &mut [&mut Param],
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(SavsError::ShapeMismatch(format!(
            "{} params, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(SavsError::ShapeMismatch(format!(
                "{}: {} values, {} gradients, {} velocities",
                p.name,
                p.len(),
                g.len(),
                v.len()
            )));
        }
        if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
            return Err(SavsError::NonFinite {
                component: format!("gradient of {} at element {bad}", p.name),
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((theta, &g), v) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g + weight_decay * *theta;
            *theta -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Param {
        Param {
            name: "p".into(),
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 3.5e-3);
        assert_eq!(lr_at(39, &cfg), 3.5e-3);
        assert!((lr_at(40, &cfg) - 3.5e-4).abs() < 1e-18);
        let flat = TrainConfig {
            lr_decay: 1.0,
            ..TrainConfig::default()
        };
        assert!((0..60).all(|e| lr_at(e, &flat) == flat.lr0));
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = param(&[1.0, 2.0, -3.0]);
        let mut v = vec![vec![0.0; 3]];
        sgd_step(&mut [&mut p], &[vec![1.0; 3]], &mut v, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(p.data, vec![0.0, 1.0, -4.0]);
    }

    #[test]
    fn zero_gradient_decays_velocity_only() {
        let mut p = param(&[1.0, 2.0]);
        let mut v = vec![vec![0.5, -1.0]];
        sgd_step(&mut [&mut p], &[vec![0.0; 2]], &mut v, 0.0, 0.9, 0.0).unwrap();
        assert_eq!(p.data, vec![1.0, 2.0]);
        assert_eq!(v[0], vec![0.45, -0.9]);
    }

    #[test]
    fn momentum_recurrence_matches_scalar_oracle() {
        let g = [0.3, -2.0];
        let mut p = param(&[0.0, 0.0]);
        let mut v = vec![vec![0.0; 2]];
        // scalar oracle: v1 = g, v2 = 0.9 g + g; deltas -lr v1, -lr v2
        let (lr, mu) = (0.1, 0.9);
        sgd_step(&mut [&mut p], &[g.to_vec()], &mut v, lr, mu, 0.0).unwrap();
        let first = p.data.clone();
        sgd_step(&mut [&mut p], &[g.to_vec()], &mut v, lr, mu, 0.0).unwrap();
        for i in 0..2 {
            assert!((first[i] - (-0.1 * g[i])).abs() < 1e-15);
            assert!((p.data[i] - first[i] - (-0.19 * g[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_aborts_without_touching_params() {
        let mut p = param(&[1.0, 2.0]);
        let mut v = vec![vec![0.0; 2]];
        let err = sgd_step(&mut [&mut p], &[vec![0.0, f64::NAN]], &mut v, 1.0, 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains("gradient of p"), "{err}");
        assert_eq!(p.data, vec![1.0, 2.0]);
    }
}
