use ae_core::harness::metrics::{finetune_distance, relative_remainder};
use ae_core::harness::{hessian_trace, FlopLedger, HarnessModel, HessianTarget, Phase};
use ae_core::harness::synth::Example;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `theta* + delta` with `|delta| = fraction * full_norm` in a random direction.
fn displaced(model: &HarnessModel, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dir = gaussian(model.p(), rng);
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = fraction * model.full_norm / n;
    model.theta_star.iter().zip(&dir).map(|(t, d)| t + r * d).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_model_has_no_remainder(seed in any::<u64>(), dim in 1usize..20, step in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = HarnessModel::linear_random(dim, 1.0, seed);
        let theta = displaced(&model, step, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..10).map(|_| gaussian(dim, &mut rng)).collect();
        for s in &inputs {
            let (h0, g) = model.output_and_gradient(&model.theta_star, s);
            let lin = h0 + g.iter().zip(&theta).zip(&model.theta_star).map(|((g, a), b)| g * (a - b)).sum::<f64>();
            let h = model.output(&theta, s);
            prop_assert!((h - lin).abs() <= 1e-12 * (1.0 + h.abs()));
        }
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        prop_assert!(relative_remainder(&model, &theta, &refs).unwrap() < 1e-9);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = HarnessModel::mlp1_random(6, 5, 1.0, seed);
        let theta = displaced(&model, 0.1, &mut rng);
        let s = gaussian(6, &mut rng);
        let (_, g) = model.output_and_gradient(&theta, &s);
        let eps = 1e-6;
        for k in 0..model.p() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += eps;
            tm[k] -= eps;
            let fd = (model.output(&tp, &s) - model.output(&tm, &s)) / (2.0 * eps);
            prop_assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0), "k={} fd={} analytic={}", k, fd, g[k]);
        }
    }

    #[test]
    fn ledger_phases_sum_to_total(ops in prop::collection::vec((0usize..6, 0u8..4, 0u64..1000), 0..200)) {
        let ledger = FlopLedger::new();
        ops.par_iter().for_each(|&(phase, kind, n)| {
            let phase = Phase::ALL[phase];
            match kind {
                0 => ledger.add_forward(phase, n),
                1 => ledger.add_backward(phase, n),
                2 => ledger.add_regression(phase, n, 3, 5),
                _ => ledger.add_eigendecompositions(phase, n),
            }
        });
        let snap = ledger.snapshot();
        let mut fwd = 0;
        let mut bwd = 0;
        let mut work = 0;
        let mut eig = 0;
        for c in snap.phases.values() {
            fwd += c.forward;
            bwd += c.backward;
            work += c.regression_work;
            eig += c.eigendecompositions;
        }
        prop_assert_eq!(fwd, snap.total.forward);
        prop_assert_eq!(bwd, snap.total.backward);
        prop_assert_eq!(work, snap.total.regression_work);
        prop_assert_eq!(eig, snap.total.eigendecompositions);
        let expect_fwd: u64 = ops.iter().filter(|o| o.1 == 0).map(|o| o.2).sum();
        prop_assert_eq!(fwd, expect_fwd);
    }
}

#[test]
fn mlp_remainder_is_small_near_the_base() {
    let model = HarnessModel::mlp1_random(64, 16, 1.0, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs: Vec<Vec<f64>> = (0..50).map(|_| gaussian(64, &mut rng)).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    for _ in 0..10 {
        let theta = displaced(&model, 0.0025, &mut rng);
        assert!(finetune_distance(&theta, &model.theta_star, model.full_norm).unwrap() <= 0.0025 + 1e-12);
        let r = relative_remainder(&model, &theta, &refs).unwrap();
        assert!(r <= 0.03, "remainder {r}");
    }
}

#[test]
fn hutchinson_is_unbiased() {
    let model = HarnessModel::mlp1_random(8, 6, 1.5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let examples: Vec<Example> = (0..10)
        .map(|i| Example { sample_id: i, input: gaussian(8, &mut rng), label: if rng.random() { 1 } else { -1 }, weight: 1.0 })
        .collect();
    let estimates: Vec<f64> = (0..50)
        .map(|seed| hessian_trace(&model, &model.theta_star, &examples, HessianTarget::MeanLoss, 10, seed).unwrap().hutchinson)
        .collect();
    let exact = hessian_trace(&model, &model.theta_star, &examples, HessianTarget::MeanLoss, 1, 0).unwrap().exact.unwrap();
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    assert!((mean - exact).abs() <= 2.0 * se, "mean {mean} exact {exact} se {se}");
}
