//! AdamW with decoupled weight decay and a cosine schedule multiplier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters: learning rate `mu`, moment factors `rho1`/`rho2`,
/// weight decay `lambda` and the denominator guard `eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWHyper {
    pub mu: f32,
    pub rho1: f32,
    pub rho2: f32,
    pub lambda: f32,
    pub eps: f32,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper { mu: 1e-3, rho1: 0.9, rho2: 0.999, lambda: 0.0, eps: 1e-8 }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    pub t: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl AdamWState {
    pub fn for_params(params: &[&mut Tensor]) -> Self {
        AdamWState {
            t: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One AdamW update with schedule multiplier `eta`:
///
/// ```text
/// u ← ρ₁u + (1−ρ₁)g          v ← ρ₂v + (1−ρ₂)g²
/// û = u/(1−ρ₁ᵗ)              v̂ = v/(1−ρ₂ᵗ)
/// θ ← θ − η(μ·û/(√v̂+ε) + λθ)
/// ```
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&[f32]],
    state: &mut AdamWState,
    hyper: &AdamWHyper,
    eta: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() || params.len() != state.second.len() {
        return Err(Error::shape(format!(
            "adamw_step: {} params, {} grads, {}/{} moment buffers",
            params.len(),
            grads.len(),
            state.first.len(),
            state.second.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        if grads[i].len() != n || state.first[i].len() != n || state.second[i].len() != n {
            return Err(Error::shape(format!(
                "adamw_step: parameter {i} has {n} entries, grad {}, moments {}/{}",
                grads[i].len(),
                state.first[i].len(),
                state.second[i].len()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - (hyper.rho1 as f64).powi(t);
    let c2 = 1.0 - (hyper.rho2 as f64).powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (u, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            u[j] = hyper.rho1 * u[j] + (1.0 - hyper.rho1) * g;
            v[j] = hyper.rho2 * v[j] + (1.0 - hyper.rho2) * g * g;
            let uh = u[j] as f64 / c1;
            let vh = v[j] as f64 / c2;
            let adaptive = hyper.mu as f64 * uh / (vh.sqrt() + hyper.eps as f64);
            *w -= (eta as f64 * (adaptive + hyper.lambda as f64 * *w as f64)) as f32;
        }
    }
    Ok(())
}

/// Cosine multiplier decaying from 1 at `t = 0` to `floor` at `t = total`.
pub fn cosine_multiplier(t: u64, total: u64, floor: f32) -> f32 {
    if total == 0 {
        return 1.0;
    }
    let frac = (t.min(total) as f64) / total as f64;
    let c = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    (floor as f64 + (1.0 - floor as f64) * c) as f32
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let hyper = AdamWHyper { mu: 0.1, rho1: 0.9, rho2: 0.999, lambda: 0.01, eps: 1e-8 };
        let theta0 = [0.5f32, -2.0, 1.5];
        let g = [0.3f32, -0.7, 2.0];
        let eta = 0.8f32;
        let mut p = Tensor::new(&[3], theta0.to_vec()).unwrap();
        let mut state = AdamWState::for_params(&[&mut p]);
        adamw_step(&mut [&mut p], &[&g], &mut state, &hyper, eta).unwrap();
        for i in 0..3 {
            let gi = g[i] as f64;
            let want = theta0[i] as f64
                - eta as f64 * (0.1 * gi / (gi.abs() + 1e-8) + 0.01 * theta0[i] as f64);
            assert!((p.data()[i] as f64 - want).abs() < 1e-6, "{} vs {want}", p.data()[i]);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let hyper = AdamWHyper { lambda: 0.0, ..Default::default() };
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let before = p.clone();
        let mut state = AdamWState::for_params(&[&mut p]);
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[&[0.0, 0.0]], &mut state, &hyper, 1.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        // direct simulation: f(θ)=θ², ∇f = 2θ
        let hyper = AdamWHyper { mu: 0.1, lambda: 0.0, ..Default::default() };
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut state = AdamWState::for_params(&[&mut p]);
        let mut prev = 1.0f32;
        for _ in 0..10 {
            let g = [2.0 * p.data()[0]];
            adamw_step(&mut [&mut p], &[&g], &mut state, &hyper, 1.0).unwrap();
            let now = p.data()[0].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let hyper = AdamWHyper::default();
        let mut p = Tensor::zeros(&[3]);
        let mut state = AdamWState::for_params(&[&mut p]);
        let err = adamw_step(&mut [&mut p], &[&[0.0, 0.0]], &mut state, &hyper, 1.0);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_multiplier(0, 100, 0.01), 1.0);
        assert!((cosine_multiplier(100, 100, 0.01) - 0.01).abs() < 1e-7);
        assert!((cosine_multiplier(50, 100, 0.0) - 0.5).abs() < 1e-6);
        assert!(cosine_multiplier(30, 100, 0.0) > cosine_multiplier(60, 100, 0.0));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0, 4.0]];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[0][1] - 0.8).abs() < 1e-6);
        let mut g = vec![vec![3.0, 4.0]];
        clip_grad_norm(&mut g, 0.0);
        assert_eq!(g[0], vec![3.0, 4.0]);
    }
}
