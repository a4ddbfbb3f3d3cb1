use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamParams {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one group of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= hp.lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::row_vector(&[1.0, -2.0]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(
            &mut p,
            &[Tensor::zeros(&[1, 2])],
            &mut s,
            &AdamParams::new(0.1, 0.5, 0.9),
        )
        .unwrap();
        assert_eq!(p, before);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        adam_step(
            &mut p,
            &[Tensor::scalar(1.0)],
            &mut s,
            &AdamParams::new(0.01, 0.5, 0.9),
        )
        .unwrap();
        assert_abs_diff_eq!(p[0].item(), -0.01, epsilon = 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let hp = AdamParams::new(0.1, 0.5, 0.9);
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        for _ in 0..200 {
            let g = 2.0 * (p[0].item() - 3.0);
            adam_step(&mut p, &[Tensor::scalar(g)], &mut s, &hp).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 0.05, "{}", p[0].item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2, 2])];
        let mut s = AdamState::new(&p);
        let err = adam_step(
            &mut p,
            &[Tensor::zeros(&[4])],
            &mut s,
            &AdamParams::new(0.1, 0.5, 0.9),
        );
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
