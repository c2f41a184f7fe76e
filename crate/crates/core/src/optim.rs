//! Bias-corrected adaptive-moment updates for the adapter factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policy::{AdapterState, Gradients};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub factor_a: Matrix,
    pub factor_b: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Moments,
    pub second_moment: Moments,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(state: &AdapterState) -> Self {
        let zeros = || Moments {
            factor_a: Matrix::zeros(state.rank(), state.dim()),
            factor_b: Matrix::zeros(state.dim(), state.rank()),
        };
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn step_tensor(param: &mut Matrix, m: &mut Matrix, v: &mut Matrix, g: &Matrix, lr: f64, b1: f64, b2: f64, eps: f64, t: u64) {
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let p = param.as_mut_slice();
    let m = m.as_mut_slice();
    let v = v.as_mut_slice();
    for (i, &gi) in g.as_slice().iter().enumerate() {
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One optimizer step on `state`'s factors.
pub fn apply_update(opt: &mut OptimizerState, state: &mut AdapterState, grads: &Gradients, lr: f64) -> Result<()> {
    if state.frozen {
        return Err(Error::FrozenState);
    }
    if grads.factor_a.shape() != state.factor_a.shape() || grads.factor_b.shape() != state.factor_b.shape() {
        return Err(Error::Invalid("gradient shapes do not match parameters".into()));
    }
    for (name, g) in grads.named() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    opt.step_count += 1;
    let t = opt.step_count;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    step_tensor(
        &mut state.factor_a,
        &mut opt.first_moment.factor_a,
        &mut opt.second_moment.factor_a,
        &grads.factor_a,
        lr,
        b1,
        b2,
        eps,
        t,
    );
    step_tensor(
        &mut state.factor_b,
        &mut opt.first_moment.factor_b,
        &mut opt.second_moment.factor_b,
        &grads.factor_b,
        lr,
        b1,
        b2,
        eps,
        t,
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use rand::Rng;

    fn state() -> AdapterState {
        AdapterState::init(4, 2, &mut SeedStream::new(1, "opt").rng()).unwrap()
    }

    fn grads_from(s: &AdapterState, rng: &mut crate::rng::StreamRng) -> Gradients {
        Gradients {
            factor_a: Matrix::from_fn(s.rank(), s.dim(), |_, _| rng.random_range(-1.0..1.0)),
            factor_b: Matrix::from_fn(s.dim(), s.rank(), |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let mut s = state();
        let before = s.clone();
        let mut opt = OptimizerState::new(&s);
        let g = grads_from(&s, &mut SeedStream::new(2, "g").rng());
        apply_update(&mut opt, &mut s, &g, 1e-3).unwrap();
        for (after, (b, gi)) in s.factor_a.as_slice().iter().zip(before.factor_a.as_slice().iter().zip(g.factor_a.as_slice())) {
            let delta = after - b;
            let tol = 1e-3 * 1e-8 / gi.abs() + 1e-15;
            assert!((delta + 1e-3 * gi.signum()).abs() <= tol);
        }
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = state();
        let before = s.clone();
        let mut opt = OptimizerState::new(&s);
        let zero = Gradients::zeros(&s);
        apply_update(&mut opt, &mut s, &zero, 1e-2).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn matches_scalar_replay() {
        let mut s = state();
        let mut opt = OptimizerState::new(&s);
        let mut rng = SeedStream::new(3, "g").rng();
        let gs: Vec<Gradients> = (0..10).map(|_| grads_from(&s, &mut rng)).collect();
        // Independent replay of entry (1, 3) of A with plain scalars.
        let (mut p, mut m, mut v) = (s.factor_a.get(1, 3), 0.0f64, 0.0f64);
        let lr = 0.01;
        for (t, g) in gs.iter().enumerate() {
            apply_update(&mut opt, &mut s, g, lr).unwrap();
            let gi = g.factor_a.get(1, 3);
            m = 0.9 * m + 0.1 * gi;
            v = 0.999 * v + 0.001 * gi * gi;
            let k = (t + 1) as i32;
            p -= lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert!((s.factor_a.get(1, 3) - p).abs() < 1e-10);
    }

    #[test]
    fn rejects_non_finite_and_frozen() {
        let mut s = state();
        let mut opt = OptimizerState::new(&s);
        let mut g = Gradients::zeros(&s);
        g.factor_b.set(0, 0, f64::NAN);
        assert!(matches!(apply_update(&mut opt, &mut s, &g, 1e-3), Err(Error::NonFiniteGradient(n)) if n == "factor_b"));
        assert_eq!(opt.step_count, 0);
        s.frozen = true;
        let zero = Gradients::zeros(&s);
        assert!(matches!(apply_update(&mut opt, &mut s, &zero, 1e-3), Err(Error::FrozenState)));
    }
}
