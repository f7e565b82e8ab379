mod common;

use common::{assert_close, linear, mixture, pair_spec, series};
use icl_bayes_core::conjugate::MixturePosterior;
use icl_bayes_core::ident::{
    bound_check, compute_constants, concentration_constant, delta_sq, drift_check, drift_constant, nu_sq,
    pv_gap_check, simulate_trace, write_traces_csv, DEFAULT_K_BURN,
};
use icl_bayes_core::taskgen::{MixtureSpec, TaskDraw};

const QUAD_N: usize = 20_000;

/// Squared L² distance from `f` to the span of `basis` under U(−1, 1),
/// by least squares on a midpoint grid.
fn projection_gap(f: impl Fn(f64) -> f64, basis: &[&dyn Fn(f64) -> f64]) -> f64 {
    let n = basis.len();
    let mut gram = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    let mut ff = 0.0;
    for i in 0..QUAD_N {
        let x = -1.0 + 2.0 * (i as f64 + 0.5) / QUAD_N as f64;
        let g: Vec<f64> = basis.iter().map(|b| b(x)).collect();
        let fx = f(x);
        ff += fx * fx;
        for a in 0..n {
            rhs[a] += g[a] * fx;
            for c in 0..n {
                gram[a][c] += g[a] * g[c];
            }
        }
    }
    // Gaussian elimination on the normal equations.
    let mut coef = rhs.clone();
    let mut m = gram.clone();
    for p in 0..n {
        for r in p + 1..n {
            let f = m[r][p] / m[p][p];
            for c in p..n {
                m[r][c] -= f * m[p][c];
            }
            coef[r] -= f * coef[p];
        }
    }
    for p in (0..n).rev() {
        let s: f64 = (p + 1..n).map(|c| m[p][c] * coef[c]).sum();
        coef[p] = (coef[p] - s) / m[p][p];
    }
    let explained: f64 = coef.iter().zip(&rhs).map(|(a, b)| a * b).sum();
    (ff - explained) / QUAD_N as f64
}

fn linear_truth(w: f64, b: f64) -> TaskDraw {
    TaskDraw {
        family_index: 0,
        params: vec![w, b],
    }
}

#[test]
fn delta_sq_matches_projection_oracle() {
    let spec = pair_spec(8);
    let g2 = |x: f64| 5f64.sqrt() * 0.5 * (3.0 * x * x - 1.0);
    let g3 = |x: f64| 7f64.sqrt() * 0.5 * (5.0 * x * x * x - 3.0 * x);
    for (w, b) in [(1.0, 0.0), (0.3, -0.7), (-1.2, 0.4)] {
        let got = delta_sq(&spec, 0, 1, &[w, b]).unwrap();
        let oracle = projection_gap(|x| w * x + b, &[&g2, &g3]);
        assert_close(got, oracle, 1e-6, "linear truth gap");
    }
    assert_close(delta_sq(&spec, 0, 1, &[1.0, 0.0]).unwrap(), 1.0 / 3.0, 1e-15, "w=1 gap");
    let one = |_: f64| 1.0;
    let id = |x: f64| x;
    for a in [[1.0, 0.0], [0.2, -0.5], [-0.9, 0.9]] {
        let got = delta_sq(&spec, 1, 0, &a).unwrap();
        let oracle = projection_gap(|x| a[0] * g2(x) + a[1] * g3(x), &[&one, &id]);
        assert_close(got, oracle, 1e-6, "series truth gap");
    }
}

#[test]
fn feature_bounds_and_v_bar_for_the_pair() {
    let spec = pair_spec(8);
    let c = compute_constants(&spec, 0, &[1.0, 0.0]).unwrap();
    assert_close(c.b_phi * c.b_phi, 2.0, 1e-12, "B_phi^2");
    assert_close(c.b_psi.unwrap().powi(2), 14.0, 1e-9, "B_psi^2");
    assert_close(c.v_bar, 3.5, 1e-9, "V_bar");
    let w = c.wrong[0];
    assert_eq!(w.j, 1);
    assert_close(w.d_j, (1.0 / 3.0) / (4.0 * (0.25 + 3.5)), 1e-12, "D on the pair");
    assert_close(w.d_j, 1.0 / 45.0, 1e-9, "D = 1/45");
    assert_close(w.b_j, 2.0 * 3.5 / 0.25, 1e-9, "b");
    assert!(c.identifiable);
    assert_eq!(c.d_min, w.d_j);
    assert_eq!(c.c, w.c_j);
}

#[test]
fn constant_formulas() {
    assert_close(drift_constant(1.0 / 3.0, 0.25, 3.75), 1.0 / 48.0, 1e-15, "D example");
    let (bf, s2, vb) = (2.0, 0.25, 3.5);
    assert_close(nu_sq(bf, s2, vb), (8.0 * 4.0 * 3.75 + 12.25) / 0.0625, 1e-9, "nu^2");
    let d = 0.1;
    assert_close(concentration_constant(d, 7.0, 3.0), 0.01 / (8.0 * (7.0 + 0.15)), 1e-15, "C");
}

#[test]
fn constants_are_monotone_in_their_arguments() {
    let grid = [0.1, 0.5, 2.0];
    for w in grid.windows(2) {
        assert!(drift_constant(w[0], 0.25, 3.5) < drift_constant(w[1], 0.25, 3.5));
        assert!(drift_constant(1.0, w[0], 3.5) > drift_constant(1.0, w[1], 3.5));
        assert!(drift_constant(1.0, 0.25, w[0]) > drift_constant(1.0, 0.25, w[1]));
        assert!(nu_sq(w[0], 0.25, 3.5) < nu_sq(w[1], 0.25, 3.5));
        assert!(concentration_constant(w[0], 5.0, 2.0) < concentration_constant(w[1], 5.0, 2.0));
        assert!(concentration_constant(0.1, w[0], 2.0) > concentration_constant(0.1, w[1], 2.0));
    }
}

#[test]
fn zero_gap_is_not_identifiable() {
    let spec = pair_spec(8);
    let c = compute_constants(&spec, 0, &[0.0, 0.0]).unwrap();
    assert_eq!(c.wrong[0].delta_sq, 0.0);
    assert_eq!(c.wrong[0].d_j, 0.0);
    assert!(!c.identifiable);
}

#[test]
fn single_family_has_no_wrong_mass() {
    let spec = mixture(&[1.0], vec![linear(1.0, 0.5, 0.5)], 0.5, 16);
    let truth = linear_truth(0.4, 0.1);
    let c = compute_constants(&spec, 0, &truth.params).unwrap();
    assert!(c.wrong.is_empty());
    let tr = simulate_trace(&spec, &truth, 16, 3, 0, &c).unwrap();
    assert!(tr.rows.iter().all(|r| r.wrong_mass == 0.0 && r.bound == 0.0));
}

#[test]
fn traces_satisfy_chain_and_bayes_rules() {
    let spec = pair_spec(32);
    for (t, truth) in [linear_truth(1.0, 0.0), TaskDraw { family_index: 1, params: vec![0.6, -0.4] }]
        .iter()
        .enumerate()
    {
        let c = compute_constants(&spec, truth.family_index, &truth.params).unwrap();
        let tr = simulate_trace(&spec, truth, 32, 11, t as u64, &c).unwrap();
        assert_eq!(tr.rows.len(), 33);
        assert!(tr.chain_rule_error <= 1e-9, "chain {}", tr.chain_rule_error);
        assert!(tr.bayes_rule_error <= 1e-10, "bayes {}", tr.bayes_rule_error);
        assert_close(tr.rows[0].wrong_mass, 0.5, 1e-12, "prior wrong mass");
    }
}

#[test]
fn drift_matches_negative_kl_along_a_prompt() {
    let spec = pair_spec(16);
    let prompt = icl_bayes_core::taskgen::draw_prompt(&spec, 5, 0).unwrap();
    for k in [0, 2, 4, 8, 16] {
        let state = MixturePosterior::<f64>::from_prompt(&spec, &prompt, k).unwrap();
        for r in drift_check(&spec, 0, &state, 20_000, 5, k as u64) {
            assert!(r.within_tol, "k={k}: {r:?}");
            assert!(r.neg_kl.mean <= 0.0);
        }
    }
}

#[test]
fn identical_predictives_have_zero_drift() {
    // Two copies of the same family: every increment is exactly zero.
    let spec = mixture(&[0.5, 0.5], vec![linear(1.0, 0.5, 0.5), linear(1.0, 0.5, 0.5)], 0.5, 8);
    let state = MixturePosterior::<f64>::prior(&spec);
    for r in drift_check(&spec, 0, &state, 500, 1, 0) {
        assert_eq!(r.mc_mean_z.mean, 0.0);
        assert_eq!(r.neg_kl.mean, 0.0);
    }
}

#[test]
fn wrong_mass_decays_and_respects_the_bound() {
    let spec = pair_spec(32);
    let truth = linear_truth(1.0, 0.0);
    let table = bound_check(&spec, &truth, 200, 32, DEFAULT_K_BURN, 17).unwrap();
    assert!(table.spearman < -0.9, "spearman {}", table.spearman);
    assert!(table.holds, "{:?}", table.rows.iter().filter(|r| r.gated && !r.holds).collect::<Vec<_>>());
    assert!(table.max_chain_rule_error <= 1e-9);
    assert!(table.max_bayes_rule_error <= 1e-10);
    assert!(table.rows[32].wrong_mass.mean < table.rows[4].wrong_mass.mean);
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("k,wrong_mass,wrong_mass_se,bound,scaled_bound,holds,gated\n"));
    assert_eq!(text.lines().count(), 34);
}

#[test]
fn confident_prior_starts_with_little_wrong_mass() {
    let mut spec: MixtureSpec = pair_spec(8);
    spec.weights = vec![0.999, 0.001];
    let truth = linear_truth(1.0, 0.0);
    let c = compute_constants(&spec, 0, &truth.params).unwrap();
    let tr = simulate_trace(&spec, &truth, 8, 2, 0, &c).unwrap();
    assert!(tr.rows[0].wrong_mass <= 0.002);
    assert_close(c.theory_bound(&spec, 0), 0.001 / 0.999 + 1.0, 1e-12, "bound at k=0");
}

#[test]
fn mixture_pv_gap() {
    let single = mixture(&[1.0], vec![linear(1.0, 0.5, 0.5)], 0.5, 8);
    let r = pv_gap_check(&single, 0, 8, 200, 4).unwrap();
    assert_eq!(r.ident_term.mean, 0.0);
    assert_eq!(r.diff.mean, 0.0);
    assert!(r.holds);
    let spec = pair_spec(8);
    for k in [0, 8] {
        let r = pv_gap_check(&spec, 0, k, 2000, 4).unwrap();
        assert!(r.holds, "k={k}: {r:?}");
        assert!(r.mixture_pv.mean > 0.0);
    }
}

#[test]
fn series_truth_is_identified_too() {
    let spec = mixture(&[0.5, 0.5], vec![linear(1.0, 0.5, 0.5), series(2, 3, 1.0, 0.5)], 0.5, 24);
    let truth = TaskDraw {
        family_index: 1,
        params: vec![1.0, 0.5],
    };
    let table = bound_check(&spec, &truth, 100, 24, DEFAULT_K_BURN, 9).unwrap();
    assert_close(table.constants.wrong[0].delta_sq, 1.25, 1e-12, "series gap");
    assert!(table.rows[24].wrong_mass.mean < 0.05, "{:?}", table.rows[24].wrong_mass);
}

#[test]
fn csv_outputs() {
    let spec = pair_spec(4);
    let truth = linear_truth(1.0, 0.0);
    let c = compute_constants(&spec, 0, &truth.params).unwrap();
    let mut buf = Vec::new();
    c.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "i_star,j,delta_sq,D_j,nu_sq,b_j,C_j,V_bar,B_f,D_min,C");
    assert_eq!(text.lines().count(), 2);
    let traces: Vec<_> = (0..2).map(|t| simulate_trace(&spec, &truth, 4, 1, t, &c).unwrap()).collect();
    let mut buf = Vec::new();
    write_traces_csv(&traces, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "trace_id,k,wrong_mass,bound,S_0");
    assert_eq!(text.lines().count(), 1 + 2 * 5);
}
