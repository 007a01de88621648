use super::*;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use crate::rng::{Purpose, Stream};

fn params(beta: Vec<f64>, tau: f64, eta: DMatrix<f64>, eta0: DMatrix<f64>, fa: ExpertFamily, fp: ExpertFamily) -> ModelParams {
    ModelParams::new(beta, tau, eta, eta0, fa, fp).unwrap()
}

fn random_params(seed: u64, d: usize, k: usize, fa: ExpertFamily, fp: ExpertFamily) -> ModelParams {
    let mut s = Stream::new(seed, Purpose::Scan, 0);
    let beta = (0..d).map(|_| s.normal()).collect();
    let tau = s.normal();
    let eta = DMatrix::from_fn(d, k, |_, _| s.normal());
    let eta0 = DMatrix::from_fn(d, k, |_, _| s.normal());
    params(beta, tau, eta, eta0, fa, fp)
}

fn random_x(s: &mut Stream, d: usize) -> Vec<f64> {
    (0..d).map(|_| s.normal()).collect()
}

/// Straight-line evaluation of the mixture with plain exponentials.
fn naive_pmf(p: &ModelParams, x: &[f64]) -> Vec<f64> {
    let a: f64 = p.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>() + p.tau;
    let pi = a.exp() / (1.0 + a.exp());
    let soft = |fam: ExpertFamily, eta: &DMatrix<f64>| -> Vec<f64> {
        let e: Vec<f64> = (0..eta.ncols())
            .map(|s| fam.act((0..x.len()).map(|u| eta[(u, s)] * x[u]).sum::<f64>()).exp())
            .collect();
        let tot: f64 = e.iter().sum();
        e.into_iter().map(|v| v / tot).collect()
    };
    let f0 = soft(p.family_pretrained, &p.eta0);
    let f = soft(p.family_adapter, &p.eta);
    f0.iter().zip(&f).map(|(a, b)| a / (1.0 + (p.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>() + p.tau).exp()) + pi * b).collect()
}

#[test]
fn gate_weight_examples() {
    let p = params(vec![0.0; 3], 0.0, DMatrix::zeros(3, 2), DMatrix::zeros(3, 2), ExpertFamily::Tanh, ExpertFamily::Tanh);
    assert_eq!(gate_weight(&p, &[4.0, -1.0, 9.0]).unwrap(), 0.5);

    let p = params(vec![0.0], 3f64.ln(), DMatrix::zeros(1, 2), DMatrix::zeros(1, 2), ExpertFamily::Tanh, ExpertFamily::Tanh);
    assert_abs_diff_eq!(gate_weight(&p, &[1.0]).unwrap(), 0.75, epsilon = 1e-15);

    // z = √8 ≈ 2.82843; exp(z)/(1+exp(z)) = 0.944193 by direct scalar evaluation.
    let p = params(vec![1.0 / 8f64.sqrt(); 8], 0.0, DMatrix::zeros(8, 2), DMatrix::zeros(8, 2), ExpertFamily::Tanh, ExpertFamily::Tanh);
    let z = 8f64.sqrt();
    let expected = z.exp() / (1.0 + z.exp());
    let got = gate_weight(&p, &[1.0; 8]).unwrap();
    assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
    assert_abs_diff_eq!(got, 0.944193, epsilon = 5e-7);

    assert!(matches!(gate_weight(&p, &[1.0; 3]), Err(Error::Shape(_))));
}

#[test]
fn gate_weight_is_stable_at_extremes() {
    for a in [-700.0, 700.0, -1e4, 1e4] {
        let p = params(vec![0.0], a, DMatrix::zeros(1, 2), DMatrix::zeros(1, 2), ExpertFamily::Linear, ExpertFamily::Linear);
        let w = gate_weight(&p, &[0.0]).unwrap();
        assert!(w.is_finite() && (0.0..=1.0).contains(&w));
    }
    let p = params(vec![0.0], -700.0, DMatrix::zeros(1, 2), DMatrix::zeros(1, 2), ExpertFamily::Linear, ExpertFamily::Linear);
    assert!(gate_weight(&p, &[0.0]).unwrap() > 0.0);
}

#[test]
fn expert_pmf_examples() {
    let eta = DMatrix::from_element(2, 4, 0.7);
    let pmf = expert_pmf(ExpertFamily::Tanh, &eta, &[1.0, -2.0]).unwrap();
    for p in pmf.probs() {
        assert_abs_diff_eq!(*p, 0.25, epsilon = 1e-15);
    }

    let eta = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let pmf = expert_pmf(ExpertFamily::Linear, &eta, &[2f64.ln()]).unwrap();
    assert_abs_diff_eq!(pmf.probs()[0], 2.0 / 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(pmf.probs()[1], 1.0 / 3.0, epsilon = 1e-15);

    // softmax(tanh 1, 0, −tanh 1) by hand: t = 0.761594, e^t = 2.141751, e^−t = 0.466906.
    let eta = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, -1.0]);
    let pmf = expert_pmf(ExpertFamily::Tanh, &eta, &[1.0]).unwrap();
    let t = 1f64.tanh();
    let tot = t.exp() + 1.0 + (-t).exp();
    let expected = [t.exp() / tot, 1.0 / tot, (-t).exp() / tot];
    for (a, b) in pmf.probs().iter().zip(expected) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }
    assert_abs_diff_eq!(pmf.probs()[0], 0.593494, epsilon = 5e-7);
    assert_abs_diff_eq!(pmf.probs()[1], 0.277115, epsilon = 5e-7);
    assert_abs_diff_eq!(pmf.probs()[2], 0.129391, epsilon = 5e-7);
}

#[test]
fn expert_pmf_reports_non_finite_logit_column() {
    let eta = DMatrix::from_row_slice(1, 3, &[0.0, f64::INFINITY, 1.0]);
    match expert_pmf(ExpertFamily::Linear, &eta, &[1.0]) {
        Err(Error::NonFiniteLogit { column }) => assert_eq!(column, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn expert_pmf_survives_huge_logits() {
    let eta = DMatrix::from_row_slice(1, 2, &[1000.0, 999.0]);
    let pmf = expert_pmf(ExpertFamily::Linear, &eta, &[1.0]).unwrap();
    let e = 1f64.exp();
    assert_abs_diff_eq!(pmf.probs()[0], e / (1.0 + e), epsilon = 1e-14);
}

#[test]
fn conditional_pmf_is_convex_combination() {
    // π = 0.5 with f₀ = (0.2, 0.3, 0.5) and f = (0.4, 0.4, 0.2), realized through
    // linear experts with logits ln f at x = 1.
    let f0 = [0.2f64, 0.3, 0.5];
    let f = [0.4f64, 0.4, 0.2];
    let eta0 = DMatrix::from_row_slice(1, 3, &f0.map(f64::ln));
    let eta = DMatrix::from_row_slice(1, 3, &f.map(f64::ln));
    let p = params(vec![0.0], 0.0, eta, eta0, ExpertFamily::Linear, ExpertFamily::Linear);
    let pmf = conditional_pmf(&p, &[1.0]).unwrap();
    for (a, b) in pmf.probs().iter().zip([0.3, 0.35, 0.35]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
    }
}

#[test]
fn identical_experts_collapse() {
    let mut s = Stream::new(3, Purpose::Scan, 1);
    let p0 = random_params(5, 4, 3, ExpertFamily::Gelu, ExpertFamily::Gelu);
    let p = ModelParams { eta: p0.eta0.clone(), ..p0 };
    for _ in 0..50 {
        let x = random_x(&mut s, 4);
        let mix = conditional_pmf(&p, &x).unwrap();
        let base = expert_pmf(ExpertFamily::Gelu, &p.eta0, &x).unwrap();
        for (a, b) in mix.probs().iter().zip(base.probs()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }
}

#[test]
fn vanishing_gate_returns_pretrained_expert() {
    let mut s = Stream::new(4, Purpose::Scan, 1);
    let mut p = random_params(6, 3, 3, ExpertFamily::Tanh, ExpertFamily::Linear);
    p.beta = vec![0.5, -0.5, 0.25];
    p.tau = -50.0;
    for _ in 0..50 {
        let x: Vec<f64> = random_x(&mut s, 3).into_iter().map(|v: f64| v.clamp(-3.0, 3.0)).collect();
        let mix = conditional_pmf(&p, &x).unwrap();
        let f0 = expert_pmf(ExpertFamily::Linear, &p.eta0, &x).unwrap();
        for (a, b) in mix.probs().iter().zip(f0.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn log_likelihood_examples() {
    // A single observation given probability 0.5.
    let eta = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
    let p = params(vec![0.0], 0.0, eta.clone(), eta, ExpertFamily::Linear, ExpertFamily::Linear);
    let data = Dataset::new(vec![0.3], 1, vec![2], 2).unwrap();
    assert_abs_diff_eq!(log_likelihood(&p, &data).unwrap(), 0.5f64.ln(), epsilon = 1e-15);

    // Uniform model over K = 3 classes.
    let mut s = Stream::new(8, Purpose::Scan, 0);
    let n = 37;
    let x: Vec<f64> = (0..n * 2).map(|_| s.normal()).collect();
    let y: Vec<u32> = (0..n).map(|i| (i % 3) as u32 + 1).collect();
    let data = Dataset::new(x, 2, y, 3).unwrap();
    let eta = DMatrix::zeros(2, 3);
    let p = params(vec![0.0; 2], 0.0, eta.clone(), eta, ExpertFamily::Tanh, ExpertFamily::Tanh);
    assert_abs_diff_eq!(log_likelihood(&p, &data).unwrap(), n as f64 * (1.0f64 / 3.0).ln(), epsilon = 1e-12);
}

#[test]
fn log_likelihood_matches_naive_oracle() {
    let mut s = Stream::new(9, Purpose::Scan, 0);
    let p = random_params(10, 3, 4, ExpertFamily::Tanh, ExpertFamily::Linear);
    let x: Vec<f64> = (0..15).map(|_| s.normal()).collect();
    let y = vec![1, 4, 2, 3, 3];
    let data = Dataset::new(x.clone(), 3, y.clone(), 4).unwrap();
    let oracle: f64 = (0..5).map(|i| naive_pmf(&p, &x[i * 3..i * 3 + 3])[y[i] as usize - 1].ln()).sum();
    assert_abs_diff_eq!(log_likelihood(&p, &data).unwrap(), oracle, epsilon = 1e-10);
}

#[test]
fn log_likelihood_rejects_out_of_range_labels() {
    let p = random_params(1, 2, 2, ExpertFamily::Tanh, ExpertFamily::Linear);
    let data = Dataset::new(vec![0.0; 6], 2, vec![1, 3, 2], 3).unwrap();
    assert!(matches!(log_likelihood(&p, &data), Err(Error::Data(_))));
}

#[test]
fn restricted_space_examples() {
    let ones = DMatrix::from_element(2, 2, 1.0);
    let mut p = params(vec![1.0, -1.0], 0.0, ones.clone(), ones.clone(), ExpertFamily::Tanh, ExpertFamily::Tanh);
    assert!(in_restricted_space(&p, 1.0, 4));

    p.tau = -3.0;
    assert!(!in_restricted_space(&p, 10.0, 100));

    let mut q = p.clone();
    q.tau = 5.0;
    q.beta[1] = 0.0;
    assert!(!in_restricted_space(&q, 1.0, 4));
}

#[test]
fn permuting_expert_columns_changes_pmf() {
    let p = random_params(12, 4, 3, ExpertFamily::Tanh, ExpertFamily::Linear);
    let mut swapped = p.clone();
    swapped.eta.swap_columns(0, 2);
    let mut s = Stream::new(12, Purpose::Scan, 7);
    let x = random_x(&mut s, 4);
    let a = conditional_pmf(&p, &x).unwrap();
    let b = conditional_pmf(&swapped, &x).unwrap();
    let diff: f64 = a.probs().iter().zip(b.probs()).map(|(u, v)| (u - v).abs()).sum();
    assert!(diff > 1e-3, "diff {diff}");
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>()
}

#[test]
fn distinct_parameters_give_distinct_pmfs() {
    // Contrapositive identifiability: separated pairs never agree on the x-sample.
    let pairs = [(ExpertFamily::Tanh, ExpertFamily::Linear), (ExpertFamily::Linear, ExpertFamily::Tanh)];
    for pair_id in 0..100u64 {
        let (fa, fp) = pairs[(pair_id % 2) as usize];
        let g = random_params(1000 + pair_id, 3, 3, fa, fp);
        let mut s = Stream::new(pair_id, Purpose::Scan, 99);
        let mut shift = || {
            let v = s.uniform_in(0.01, 0.5);
            if s.uniform() < 0.5 { -v } else { v }
        };
        let g2 = ModelParams {
            beta: g.beta.iter().map(|b| b + shift()).collect(),
            tau: g.tau + shift(),
            eta: g.eta.map(|v| v + shift()),
            ..g.clone()
        };
        let mut xs = Stream::new(pair_id, Purpose::MonteCarlo, 0);
        let max_tv = (0..1000)
            .map(|_| {
                let x = random_x(&mut xs, 3);
                tv(conditional_pmf(&g, &x).unwrap().probs(), conditional_pmf(&g2, &x).unwrap().probs())
            })
            .fold(0.0, f64::max);
        assert!(max_tv > 0.0, "pair {pair_id} indistinguishable");
        assert!(max_tv > 1e-8, "pair {pair_id}: max TV {max_tv}");
    }
}

proptest! {
    #[test]
    fn pmf_is_a_distribution_and_lipschitz_in_gate(
        seed in 0u64..10_000,
        fam_a in 0usize..5,
        fam_p in 0usize..5,
        scale in 0.1f64..5.0,
    ) {
        let fa = ExpertFamily::ALL[fam_a];
        let fp = ExpertFamily::ALL[fam_p];
        let mut p = random_params(seed, 4, 3, fa, fp);
        p.eta *= scale;
        let mut s = Stream::new(seed, Purpose::MonteCarlo, 1);
        let x: Vec<f64> = random_x(&mut s, 4).into_iter().map(|v| v * scale).collect();
        let mix = conditional_pmf(&p, &x).unwrap();
        let total: f64 = mix.probs().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(mix.probs().iter().all(|v| (0.0..=1.0).contains(v)));

        let pi = gate_weight(&p, &x).unwrap();
        let f0 = expert_pmf(fp, &p.eta0, &x).unwrap();
        let f = expert_pmf(fa, &p.eta, &x).unwrap();
        let gap = f.probs().iter().zip(f0.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for (m, b) in mix.probs().iter().zip(f0.probs()) {
            prop_assert!((m - b).abs() <= pi * gap + 1e-15);
        }
    }
}
