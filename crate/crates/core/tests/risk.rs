mod common;

use common::{linear, mixture, pair_spec, single_linear};
use icl_bayes_core::conjugate::MixturePosterior;
use icl_bayes_core::net::Architecture;
use icl_bayes_core::risk::{
    default_f_grid, estimate_risks, minimax_dominance_check, paired_difference, pv_curve, BayesPredictor,
    ConstantPredictor, Predictor, ProbePredictor, RiskReport, TransformerPredictor,
};
use icl_bayes_core::rng;
use icl_bayes_core::net::TransformerParams;

fn untrained(spec: &icl_bayes_core::taskgen::MixtureSpec, seed: u64) -> TransformerParams {
    TransformerParams::init(1, &Architecture::default(), spec.b_f(), &mut rng::from_seed(seed))
}

fn check_report(rep: &RiskReport) {
    for row in rep.per_k.iter().chain(std::iter::once(&rep.aggregate)) {
        assert!(row.r_bg.mean >= 0.0 && row.r_pv.mean >= 0.0);
        assert!(row.identity_holds(3.0), "{}: {row:?}", rep.model);
        for e in [row.r, row.r_bg, row.r_pv, row.cross, row.residual] {
            assert!(e.mean.is_finite() && e.se.is_finite());
        }
    }
    let mean_r: f64 = rep.per_k.iter().map(|r| r.r.mean).sum::<f64>() / rep.per_k.len() as f64;
    assert!((mean_r - rep.aggregate.r.mean).abs() < 1e-12);
}

#[test]
fn bayes_predictor_has_zero_gap_bitwise() {
    let spec = pair_spec(8);
    let rep = estimate_risks(&BayesPredictor, &spec, 2000, 1).unwrap();
    check_report(&rep);
    for row in rep.per_k.iter().chain(std::iter::once(&rep.aggregate)) {
        assert_eq!(row.r_bg.mean, 0.0);
        assert_eq!(row.cross.mean, 0.0);
    }
    assert!(rep.prompt_gap.iter().all(|g| *g == 0.0));
}

#[test]
fn decomposition_holds_for_several_predictors() {
    let spec = pair_spec(8);
    let zero = estimate_risks(&ConstantPredictor(0.0), &spec, 4000, 2).unwrap();
    check_report(&zero);
    assert!(zero.aggregate.cross.within(0.0, 3.0));
    let net = TransformerPredictor::new(untrained(&spec, 3), "init");
    check_report(&estimate_risks(&net, &spec, 4000, 2).unwrap());
}

#[test]
fn bayes_has_the_smallest_risk() {
    let spec = pair_spec(8);
    let bayes = estimate_risks(&BayesPredictor, &spec, 4000, 4).unwrap();
    let others: Vec<Box<dyn Predictor>> = vec![
        Box::new(ConstantPredictor(0.0)),
        Box::new(ConstantPredictor(0.3)),
        Box::new(TransformerPredictor::new(untrained(&spec, 5), "init")),
    ];
    for m in &others {
        let rep = estimate_risks(m.as_ref(), &spec, 4000, 4).unwrap();
        let d = paired_difference(&bayes.prompt_risk, &rep.prompt_risk);
        assert!(d.mean <= 3.0 * d.se, "{}: {d:?}", m.name());
    }
}

#[test]
fn csv_has_per_k_rows_and_an_aggregate() {
    let spec = pair_spec(4);
    let rep = estimate_risks(&ConstantPredictor(0.0), &spec, 100, 6).unwrap();
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,R,R_se,R_BG,R_BG_se,R_PV,R_PV_se,cross,cross_se");
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("-1,"));
}

#[test]
fn pv_curve_starts_at_the_prior_variance_and_decreases() {
    let spec = pair_spec(16);
    let curve = pv_curve(&spec, 16, 4000, 7).unwrap();
    assert!(curve.non_increasing(3.0));
    // Prior variance of f(x): Σ α_i τ_i² E‖ψ_i(x)‖², by midpoint quadrature
    // over Uniform(−1, 1).
    let n = 10_000;
    let mut lin = 0.0;
    let mut ser = 0.0;
    for i in 0..n {
        let x: f64 = -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
        lin += (x * x + 1.0) / n as f64;
        let g2 = 5f64.sqrt() * (3.0 * x * x - 1.0) / 2.0;
        let g3 = 7f64.sqrt() * (5.0 * x.powi(3) - 3.0 * x) / 2.0;
        ser += (g2 * g2 + g3 * g3) / n as f64;
    }
    let prior = 0.5 * 0.25 * lin + 0.5 * 0.25 * ser;
    assert!(curve.levels[0].within(prior, 3.0), "{:?} vs {prior}", curve.levels[0]);
}

#[test]
fn noiseless_interpolation_collapses_the_posterior() {
    // Two distinct inputs pin down a line once the noise vanishes.
    let spec = single_linear(0.5, 1e-6, 4);
    let mut mp = MixturePosterior::<f64>::prior(&spec);
    for (x, y) in [(-0.5, 0.2), (0.6, -0.1)] {
        mp = mp.update(&spec, &[x], y).unwrap();
    }
    for q in [-1.0, -0.3, 0.0, 0.8, 1.0] {
        assert!(mp.posterior_variance(&spec, &[q]) < 1e-6);
    }
    let curve = pv_curve(&spec, 2, 200, 8).unwrap();
    assert!(curve.levels[2].mean < curve.levels[0].mean * 1e-2);
}

#[test]
fn posterior_variance_is_dominated_by_the_sup_risk() {
    let spec = mixture(&[1.0], vec![linear(1.0, 0.5, 0.5)], 0.25, 4);
    let grid = default_f_grid(&spec, 0, 64, 9);
    assert_eq!(grid.len(), 64);
    let res = minimax_dominance_check(&spec, 4, 2000, &grid, 10).unwrap();
    assert!(res.holds, "{res:?}");
    // A larger grid never lowers the sup.
    let smaller = minimax_dominance_check(&spec, 4, 2000, &grid[..16], 10).unwrap();
    assert!(smaller.sup_risk.mean <= res.sup_risk.mean);
}

#[test]
fn point_mass_prior_has_no_posterior_variance() {
    let spec = mixture(&[1.0], vec![linear(1.0, 0.5, 1e-9)], 0.25, 4);
    let grid = default_f_grid(&spec, 0, 4, 11);
    let res = minimax_dominance_check(&spec, 2, 200, &grid, 12).unwrap();
    assert!(res.pv.mean < 1e-12);
    assert!(res.holds);
}

#[test]
fn symmetrizing_the_probe_never_hurts() {
    let spec = pair_spec(8);
    let params = untrained(&spec, 13);
    let raw = ProbePredictor {
        params: params.clone(),
        n_perm: 0,
        seed: 14,
    };
    let sym = ProbePredictor {
        params,
        n_perm: 20,
        seed: 14,
    };
    let a = estimate_risks(&raw, &spec, 3000, 15).unwrap();
    let b = estimate_risks(&sym, &spec, 3000, 15).unwrap();
    let d = paired_difference(&b.prompt_risk, &a.prompt_risk);
    assert!(d.mean <= 3.0 * d.se, "{d:?}");
}
