use super::*;
use crate::model::conditional_pmf;

fn hetero() -> GenConfig {
    GenConfig::scaled_design(ExpertFamily::Linear, ExpertFamily::Tanh)
}

#[test]
fn scaled_rule_at_256_is_exactly_two_and_a_quarter() {
    let cfg = hetero().with_n(256);
    let g = ground_truth(&cfg).unwrap();
    assert_eq!(libm::pow(256.0, -0.375), 0.125);
    for (a, b) in g.eta.iter().zip(cfg.eta0.iter()) {
        assert_eq!(*a, 2.25 * b);
    }
    assert_eq!(g.eta[(1, 1)], -3.375);
    assert_eq!(g.beta, vec![1.0 / 8f64.sqrt(); 8]);
    assert_eq!(g.tau, 0.0);
}

#[test]
fn fixed_design_parameters() {
    let cfg = GenConfig::fixed_design(ExpertFamily::Tanh, ExpertFamily::Linear).with_n(5000);
    let g = ground_truth(&cfg).unwrap();
    assert_eq!(g.tau, 0.2);
    assert_eq!(g.eta.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(g.eta[(1, 1)], 0.7);
    assert_eq!(g.eta[(1, 2)], 0.0);
    assert_eq!(g.eta0[(1, 0)], 1.0);
    assert_eq!(g.eta0[(1, 1)], -0.5);
    assert_eq!(g.eta.iter().filter(|v| **v != 0.0).count(), 2);
}

#[test]
fn fixed_rule_equal_to_pretrained_has_zero_offset() {
    let mut cfg = hetero();
    cfg.adapter_rule = AdapterRule::Fixed { eta_star: cfg.eta0.clone() };
    let g = ground_truth(&cfg).unwrap();
    assert!((&g.eta - &g.eta0).iter().all(|v| *v == 0.0));
}

#[test]
fn invalid_shapes_are_config_errors() {
    let mut cfg = hetero();
    cfg.beta_star.pop();
    assert!(matches!(ground_truth(&cfg), Err(Error::Config(_))));
    let mut cfg = hetero();
    cfg.q = 4;
    assert!(matches!(generate(&cfg), Err(Error::Config(_))));
}

#[test]
fn balanced_gate_draws_are_half() {
    let mut cfg = hetero().with_n(100_000).with_seed(17);
    cfg.beta_star = vec![0.0; 8];
    cfg.tau_star = 0.0;
    let ds = generate(&cfg).unwrap();
    let draws = ds.gate_draws().unwrap();
    let mean = draws.iter().filter(|g| **g).count() as f64 / draws.len() as f64;
    assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
}

#[test]
fn saturated_gate_always_selects_adapter() {
    let mut cfg = hetero().with_n(2000).with_seed(3);
    cfg.beta_star = vec![0.0; 8];
    cfg.tau_star = 50.0;
    let ds = generate(&cfg).unwrap();
    assert!(ds.gate_draws().unwrap().iter().all(|g| *g));
}

#[test]
fn label_marginal_matches_monte_carlo_integration() {
    let cfg = hetero().with_n(200_000).with_seed(5);
    let ds = generate(&cfg).unwrap();
    let mut freq = [0.0; 3];
    ds.labels().iter().for_each(|y| freq[*y as usize - 1] += 1.0);
    freq.iter_mut().for_each(|f| *f /= ds.n() as f64);

    let truth = ground_truth(&cfg).unwrap();
    let mut s = Stream::new(99, Purpose::MonteCarlo, 0);
    let mut expected = [0.0; 3];
    let m = 200_000;
    let mut x = vec![0.0; 8];
    for _ in 0..m {
        s.normals(&mut x);
        let p = conditional_pmf(&truth, &x).unwrap();
        for (e, v) in expected.iter_mut().zip(p.probs()) {
            *e += v / m as f64;
        }
    }
    let tv = 0.5 * freq.iter().zip(&expected).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv < 0.01, "tv {tv}, freq {freq:?}, expected {expected:?}");
}

#[test]
fn slice_frequencies_pass_chi_square() {
    let cfg = hetero().with_n(100_000).with_seed(8);
    let ds = generate(&cfg).unwrap();
    let truth = ground_truth(&cfg).unwrap();
    let slices = 10;
    // Slice on the gate score with equal-probability bins of N(0, 1).
    let edges = [-1.2816, -0.8416, -0.5244, -0.2533, 0.0, 0.2533, 0.5244, 0.8416, 1.2816];
    let mut observed = vec![[0.0f64; 3]; slices];
    let mut expected = vec![[0.0f64; 3]; slices];
    for i in 0..ds.n() {
        let x = ds.row(i);
        let score = dot(&truth.beta, x);
        let b = edges.iter().filter(|e| score > **e).count();
        observed[b][ds.labels()[i] as usize - 1] += 1.0;
        let p = conditional_pmf(&truth, x).unwrap();
        for (e, v) in expected[b].iter_mut().zip(p.probs()) {
            *e += v;
        }
    }
    let stat: f64 = observed
        .iter()
        .zip(&expected)
        .flat_map(|(o, e)| o.iter().zip(e.iter()).map(|(a, b)| (a - b).powi(2) / b))
        .sum();
    // 0.999 quantile of χ² with 10·(3 − 1) = 20 degrees of freedom.
    assert!(stat < 45.315, "chi-square {stat}");
}

#[test]
fn generation_is_deterministic() {
    let cfg = hetero().with_n(3000).with_seed(42);
    let a = generate(&cfg).unwrap();
    let b = generate(&cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.covariates().iter().zip(b.covariates()).all(|(u, v)| u.to_bits() == v.to_bits()));
    let c = generate(&cfg.clone().with_seed(43)).unwrap();
    assert_ne!(a.labels(), c.labels());
}

#[test]
fn csv_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let cfg = GenConfig::fixed_design(ExpertFamily::Linear, ExpertFamily::Tanh).with_n(500).with_seed(1);
    let ds = generate(&cfg).unwrap();
    let files = ds.write_csv(&path).unwrap();
    assert_eq!(files.len(), 2);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("x1,x2,x3,x4,x5,x6,x7,x8,y\n"));

    let back = Dataset::read_csv(&path).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert!(back.covariates().iter().zip(ds.covariates()).all(|(u, v)| u.to_bits() == v.to_bits()));
    assert_eq!(back.fingerprint(), ds.fingerprint());
    assert_eq!(back.config(), ds.config());

    let side = path.with_extension("json");
    let edited = std::fs::read_to_string(&side).unwrap().replace("\"tau_star\": 0.2", "\"tau_star\": 0.3");
    std::fs::write(&side, edited).unwrap();
    assert!(matches!(Dataset::read_csv(&path), Err(Error::Data(_))));
}

#[test]
fn dataset_validation() {
    assert!(matches!(Dataset::new(vec![0.0; 5], 2, vec![1, 1], 2), Err(Error::Data(_))));
    assert!(matches!(Dataset::new(vec![0.0; 4], 2, vec![1, 0], 2), Err(Error::Data(_))));
    assert!(matches!(Dataset::new(vec![f64::NAN; 2], 2, vec![1], 2), Err(Error::Data(_))));
}
