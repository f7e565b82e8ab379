#![allow(dead_code)]

use icl_bayes_core::taskgen::{InputDistSpec, MixtureSpec, TaskFamilySpec};

pub fn linear(b_w: f64, b_b: f64, tau: f64) -> TaskFamilySpec {
    TaskFamilySpec::Linear { b_w, b_b, tau }
}

pub fn series(r0: usize, r_max: usize, b_a: f64, tau: f64) -> TaskFamilySpec {
    TaskFamilySpec::Series { r0, r_max, b_a, tau }
}

pub fn mixture(weights: &[f64], families: Vec<TaskFamilySpec>, sigma_eps: f64, p: usize) -> MixtureSpec {
    MixtureSpec {
        weights: weights.to_vec(),
        families,
        sigma_eps,
        input: InputDistSpec::interval(-1.0, 1.0),
        p,
        support: None,
    }
}

/// Linear-versus-series pair used throughout the acceptance criteria.
pub fn pair_spec(p: usize) -> MixtureSpec {
    mixture(
        &[0.5, 0.5],
        vec![linear(1.0, 0.5, 0.5), series(2, 3, 1.0, 0.5)],
        0.5,
        p,
    )
}

pub fn single_linear(tau: f64, sigma_eps: f64, p: usize) -> MixtureSpec {
    mixture(&[1.0], vec![linear(1.0, 0.5, tau)], sigma_eps, p)
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}
