use emkd_tape::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{EmkdError, Result};

/// First and second moments for every tensor of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn for_tensors(tensors: &[&Tensor]) -> Self {
        Self::new(tensors.iter().map(|t| t.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter moves, so a non-finite value leaves the state untouched.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    names: &[String],
    state: &mut AdamState,
    hp: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(EmkdError::Contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(EmkdError::Contract(format!(
                "gradient for {} has {} values, parameter has {}",
                names.get(i).map_or("?", String::as_str),
                g.len(),
                p.len()
            )));
        }
        if let Some(k) = g.iter().position(|x| !x.is_finite()) {
            return Err(EmkdError::NonFinite(format!(
                "gradient of {} at element {k} is {}",
                names.get(i).map_or("?", String::as_str),
                g[k]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x -= hp.lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HP: AdamHyper = AdamHyper {
        lr: 0.001,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut st = AdamState::for_tensors(&[&p]);
        adam_step(&mut [&mut p], &[vec![0.3, -4.0, 1e-3]], &names(1), &mut st, HP).unwrap();
        let want = [1.0 - 0.001, -2.0 + 0.001, 0.5 - 0.001];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_the_step() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut st = AdamState::for_tensors(&[&p]);
        adam_step(&mut [&mut p], &[vec![0.0, 0.0]], &names(1), &mut st, HP).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut a = Tensor::zeros(&[1]);
        let mut b = Tensor::zeros(&[2]);
        let mut st = AdamState::new([1, 2]);
        let err = adam_step(
            &mut [&mut a, &mut b],
            &[vec![0.1], vec![0.0, f64::NAN]],
            &names(2),
            &mut st,
            HP,
        )
        .unwrap_err();
        assert!(err.to_string().contains("p1"), "{err}");
        assert_eq!(st.step, 0);
        assert_eq!(a.data(), &[0.0]);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut x = Tensor::scalar(1.0);
        let mut st = AdamState::for_tensors(&[&x]);
        let hp = AdamHyper { lr: 0.1, ..HP };
        for _ in 0..100 {
            let g = 2.0 * x.data()[0];
            adam_step(&mut [&mut x], &[vec![g]], &names(1), &mut st, hp).unwrap();
        }
        assert!(x.data()[0].abs() < 0.05, "{}", x.data()[0]);
    }
}
