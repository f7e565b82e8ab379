mod common;

use common::{assert_close, pair_spec};
use icl_bayes_core::linalg::{spectral_norm, Matrix};
use icl_bayes_core::net::{renorm, Architecture, TransformerParams};
use icl_bayes_core::ood::prompt_distance;
use icl_bayes_core::rng;
use icl_bayes_core::taskgen::{draw_prompt, sample_batch, Prompt};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_params(seed: u64, m: usize, b_m: f64) -> TransformerParams {
    let arch = Architecture {
        m,
        ..Architecture::default()
    };
    let mut r = rng::from_seed(seed);
    let mut p = TransformerParams::<f64>::init(1, &arch, b_m, &mut r);
    // Nonzero biases so the test exercises every parameter.
    for l in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
        for b in &mut l.bias {
            let z: f64 = StandardNormal.sample(&mut r);
            *b = 0.1 * z;
        }
    }
    p
}

fn shuffle<R: Rng>(r: &mut R, k: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    perm
}

/// Largest singular value by one-sided Jacobi orthogonalisation.
fn jacobi_sigma_max(a: &Matrix<f64>) -> f64 {
    let (n, c) = (a.rows, a.cols);
    let mut cols: Vec<Vec<f64>> = (0..c).map(|j| (0..n).map(|i| a[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..c {
            for q in p + 1..c {
                let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
                let beta: f64 = cols[q].iter().map(|v| v * v).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..n {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = cs * x - sn * y;
                    cols[q][i] = sn * x + cs * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

#[test]
fn renorm_examples() {
    assert_eq!(renorm(&[0.0; 4], 1.0), vec![0.25; 4]);
    assert_eq!(renorm(&[1.0; 4], 1.0), vec![0.25; 4]);
    assert_eq!(renorm(&[1.0, 0.0, 0.0, 0.0], 1.0), vec![0.625, 0.125, 0.125, 0.125]);
}

#[test]
fn encoder_lands_strictly_inside_the_simplex() {
    let p = random_params(1, 16, 20.0);
    let mut r = rng::from_seed(2);
    for _ in 0..100_000 {
        let u = [r.random_range(-1.0..1.0), r.random_range(-4.0..4.0)];
        let g = p.encoder_raw(&u);
        let phi = p.encode(&u);
        assert!((phi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let l1: f64 = g.iter().map(|v| v.max(0.0)).sum();
        let floor = p.tau / (p.m as f64 * (l1 + p.tau));
        assert!(phi.iter().all(|v| *v >= floor * (1.0 - 1e-12) && *v > 0.0));
    }
}

#[test]
fn forward_is_bitwise_permutation_invariant() {
    let spec = pair_spec(8);
    let params = random_params(3, 16, spec.b_f());
    let mut r = rng::from_seed(4);
    for i in 0..100 {
        let prompt = draw_prompt(&spec, 5, i).unwrap();
        let k = 1 + (i as usize % 8);
        let base = params.forward(&prompt, k);
        for _ in 0..20 {
            let q = prompt.permuted(k, &shuffle(&mut r, k));
            assert_eq!(params.forward(&q, k).to_bits(), base.to_bits());
        }
    }
}

#[test]
fn clip_bounds_every_output() {
    let spec = pair_spec(8);
    let params = random_params(6, 8, 0.05);
    for i in 0..50 {
        let prompt = draw_prompt(&spec, 7, i).unwrap();
        for v in params.forward_all_k(&prompt) {
            assert!(v.abs() <= 0.05);
        }
    }
}

#[test]
fn duplicated_context_gives_the_same_output() {
    let spec = pair_spec(4);
    let params = random_params(8, 16, spec.b_f());
    for i in 0..20 {
        let p = draw_prompt(&spec, 9, i).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for j in 0..4 {
            xs.extend_from_slice(p.x(j));
            xs.extend_from_slice(p.x(j));
            ys.push(p.ys[j]);
            ys.push(p.ys[j]);
        }
        xs.extend_from_slice(p.x(4));
        let dup = Prompt {
            d: 1,
            xs,
            ys,
            y_last: p.y_last,
            task: p.task.clone(),
        };
        assert_close(params.forward(&p, 4), params.forward(&dup, 8), 1e-12, "duplicate");
    }
}

#[test]
fn all_prefix_forward_matches_per_k() {
    let spec = pair_spec(8);
    let params = random_params(10, 16, spec.b_f());
    for i in 0..100 {
        let p = draw_prompt(&spec, 11, i).unwrap();
        let all = params.forward_all_k(&p);
        for k in 1..=8 {
            assert!((all[k - 1] - params.forward(&p, k)).abs() <= 1e-10);
        }
    }
    let one = pair_spec(1);
    let p = draw_prompt(&one, 12, 0).unwrap();
    let all = params.forward_all_k(&p);
    assert_eq!(all.len(), 1);
    assert_close(all[0], params.forward(&p, 1), 1e-12, "p = 1");
}

#[test]
fn zero_network_loss_is_mean_squared_target() {
    let spec = pair_spec(8);
    let arch = Architecture::default();
    let (enc, dec) = TransformerParams::<f64>::widths(1, &arch);
    let params = TransformerParams::<f64>::zeros(1, arch.m, arch.tau, spec.b_f(), &enc, &dec);
    let batch = sample_batch(&spec, 5, 13).unwrap();
    let expected: f64 = batch
        .iter()
        .flat_map(|p| (1..=8).map(move |k| p.target(k) * p.target(k)))
        .sum::<f64>()
        / 40.0;
    let (loss, _) = params.loss_and_grad(&batch).unwrap();
    assert_close(loss, expected, 1e-12, "zero net");
}

#[test]
fn gradient_matches_central_differences() {
    let spec = pair_spec(8);
    let params = random_params(14, 16, spec.b_f());
    let batch = sample_batch(&spec, 2, 15).unwrap();
    let (_, grad) = params.loss_and_grad(&batch).unwrap();
    let g = grad.flatten();
    let theta = params.flatten();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += h;
        probe.set_flat(&t);
        let up = probe.loss(&batch);
        t[i] -= 2.0 * h;
        probe.set_flat(&t);
        let down = probe.loss(&batch);
        let fd = (up - down) / (2.0 * h);
        let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn doubling_the_batch_changes_nothing() {
    let spec = pair_spec(8);
    let params = random_params(16, 16, spec.b_f());
    let batch = sample_batch(&spec, 7, 17).unwrap();
    let doubled: Vec<Prompt> = batch.iter().chain(&batch).cloned().collect();
    let (l1, g1) = params.loss_and_grad(&batch).unwrap();
    let (l2, g2) = params.loss_and_grad(&doubled).unwrap();
    assert_close(l1, l2, 1e-12, "loss");
    for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
        assert_close(*a, b, 1e-12, "grad");
    }
}

#[test]
fn gradient_is_identical_for_any_worker_count() {
    let spec = pair_spec(8);
    let params = random_params(18, 16, spec.b_f());
    let batch = sample_batch(&spec, 70, 19).unwrap();
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| params.loss_and_grad(&batch).unwrap())
    };
    let (l1, g1) = run(1);
    let (l3, g3) = run(3);
    assert_eq!(l1.to_bits(), l3.to_bits());
    assert_eq!(g1, g3);
}

#[test]
fn spectral_norms() {
    assert_close(spectral_norm(&Matrix::<f64>::identity(3)), 1.0, 1e-12, "I");
    assert_close(spectral_norm(&Matrix::from_diag(&[3.0, 1.0])), 3.0, 1e-6, "diag");
    let mut r = rng::from_seed(20);
    for _ in 0..10 {
        let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..8).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
        let a = Matrix::from_rows(&rows);
        let oracle = jacobi_sigma_max(&a);
        assert!((spectral_norm(&a) - oracle).abs() <= 1e-6 * oracle);
    }
}

#[test]
fn init_meets_spectral_budgets() {
    let p = random_params(21, 16, 10.0);
    let sr = p.spectral_report(2.0, 2.0);
    assert!(sr.encoder_within && sr.decoder_within, "{sr:?}");
    assert_close(sr.budget_encoder, 2.0 * 16f64.sqrt(), 1e-12, "encoder budget");
    assert_close(sr.budget_decoder, 8.0, 1e-12, "decoder budget");
}

#[test]
fn lipschitz_smoke_test() {
    let spec = pair_spec(8);
    let params = random_params(22, 16, spec.b_f());
    let lam = params.spectral_report(2.0, 2.0).lambda_1();
    let mut r = rng::from_seed(23);
    for i in 0..200 {
        let a = draw_prompt(&spec, 24, i).unwrap();
        let mut b = a.clone();
        for v in b.xs.iter_mut().chain(b.ys.iter_mut()) {
            *v += 0.05 * r.random_range(-1.0..1.0);
        }
        let k = 1 + i as usize % 8;
        let d = prompt_distance(&a, &b, k, 1.0);
        assert!((params.forward(&a, k) - params.forward(&b, k)).abs() <= lam * d + 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let params = random_params(25, 16, 11.0);
    let path = std::env::temp_dir().join(format!("icl-bayes-ckpt-{}.json", std::process::id()));
    params.save(&path).unwrap();
    let back = TransformerParams::<f64>::load(&path).unwrap();
    std::fs::remove_file(&path).ok();
    let bits = |p: &TransformerParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&params), bits(&back));
    assert_eq!(params, back);
    assert!(TransformerParams::<f64>::from_json("{\"format\":\"other\"}").is_err());
}

#[test]
fn single_precision_forward_tracks_double() {
    let spec = pair_spec(8);
    let params = random_params(26, 16, spec.b_f());
    let p32 = params.cast::<f32>();
    let prompt = draw_prompt(&spec, 27, 0).unwrap();
    let a = params.forward(&prompt, 5);
    let b = p32.forward(&prompt.cast::<f32>(), 5) as f64;
    assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encoder_output_is_a_distribution(x in -1.0f64..1.0, y in -5.0f64..5.0, seed in 0u64..8) {
        let p = random_params(seed, 8, 10.0);
        let phi = p.encode(&[x, y]);
        prop_assert!((phi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(phi.iter().all(|v| *v > 0.0));
    }
}
