use serde::{Deserialize, Serialize};

use super::tensor::{Gradients, ParamSet};
use crate::error::{Error, Result};

/// Adam moment estimates for every tensor of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self::with_hyperparams(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(params: &ParamSet, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment arrays",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for id in params.ids() {
        let n = params.get(id).len();
        if grads.get(id).len() != n || state.m[id.0].len() != n || state.v[id.0].len() != n {
            return Err(Error::Shape(format!(
                "adam: parameter `{}` has {} entries, gradient {}",
                params.name(id),
                n,
                grads.get(id).len()
            )));
        }
        if grads.get(id).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for id in params.ids() {
        let g = grads.get(id);
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tensor::{ParamId, Tensor};

    fn scalar_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("theta", Tensor::scalar(v));
        p
    }

    fn grads_of(values: Vec<f64>) -> Gradients {
        Gradients::from_vecs(vec![values])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_param(1.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads_of(vec![0.0]), &mut st, 0.1).unwrap();
        assert_eq!(p.get(ParamId(0)).data()[0], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads_of(vec![1.0]), &mut st, 0.1).unwrap();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.get(ParamId(0)).data()[0] - want).abs() < 1e-12);
        assert!((p.get(ParamId(0)).data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut p = scalar_param(5.0);
        let mut st = AdamState::new(&p);
        for _ in 0..100 {
            let theta = p.get(ParamId(0)).data()[0];
            adam_step(&mut p, &grads_of(vec![2.0 * theta]), &mut st, 0.1).unwrap();
        }
        assert!(p.get(ParamId(0)).data()[0].abs() < 0.5);
        assert!(st.v[0].iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &grads_of(vec![f64::NAN]), &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert!(adam_step(&mut p, &grads_of(vec![1.0, 2.0]), &mut st, 0.1).is_err());
        assert!(adam_step(&mut p, &grads_of(vec![1.0]), &mut st, 0.0).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn deterministic_bitwise() {
        let run = || {
            let mut p = ParamSet::new();
            p.add("w", Tensor::vector(vec![0.3, -1.2, 2.5]));
            let mut st = AdamState::new(&p);
            for k in 0..7 {
                let g = Gradients::from_vecs(vec![vec![0.1 * k as f64, -0.7, 1e-3]]);
                adam_step(&mut p, &g, &mut st, 0.01).unwrap();
            }
            (p, st)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        let bits = |p: &ParamSet| -> Vec<u64> {
            p.get(ParamId(0)).data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&p1), bits(&p2));
        assert_eq!(s1, s2);
    }
}
