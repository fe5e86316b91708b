mod common;

use ae_core::cluster::Partition;
use ae_core::ensemble::{
    adaboost_alpha, adaboost_fit, boosting_step, combination_loss, fit_group_adapters, train_combination_weights,
    EnsembleModel, EnsembleParams, Routing,
};
use ae_core::probe::ProbeParams;
use ae_core::store::SampleRecord;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn adaboost_weights_stay_normalized(seed in any::<u64>(), iters in 1usize..6) {
        let store = common::planted_store(2, 30, 4, 2, seed);
        let model = adaboost_fit(&store, iters, 2, &ProbeParams { l2_reg: 1e-2, ..ProbeParams::default() }).unwrap();
        prop_assert!(!model.weight_sums.is_empty());
        for s in &model.weight_sums {
            prop_assert!((s - 1.0).abs() <= 1e-12, "weight sum {}", s);
        }
    }

    #[test]
    fn boosting_accounting_and_monotonicity(seed in any::<u64>(), eta in 0.05f64..1.0) {
        let store = common::planted_store(4, 25, 5, 2, seed);
        let partition = Partition::new(vec![vec![0, 1], vec![2, 3]]);
        let params = EnsembleParams { eta, min_rel_improvement: 0.0, ..EnsembleParams::default() };
        let stage0 = fit_group_adapters(&partition, &store, &params.probe).unwrap();
        let mut model = EnsembleModel::new(partition, stage0, eta, Routing::ByTask).unwrap();
        for _ in 0..4 {
            let step = boosting_step(&mut model, &store, &params).unwrap();
            if step.stage.is_some() {
                prop_assert!(step.post_loss <= step.pre_loss, "{} > {}", step.post_loss, step.pre_loss);
            }
            prop_assert_eq!(model.adapter_count(), model.m() + model.accepted_stages());
        }

        let val: Vec<&SampleRecord> = store.tasks.iter().flat_map(|t| t.validation.iter()).collect();
        let (w, _) = train_combination_weights(&model, &val, 500).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        let best = combination_loss(&model, &val, &w);
        let m = model.m();
        prop_assert!(best <= combination_loss(&model, &val, &vec![1.0 / m as f64; m]) + 1e-12);
        for j in 0..m {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            prop_assert!(best <= combination_loss(&model, &val, &e) + 1e-9);
        }
    }
}

#[test]
fn alpha_decreases_and_vanishes_at_chance() {
    for k in 2..10usize {
        let chance = (k - 1) as f64 / k as f64;
        assert!(adaboost_alpha(chance, k).abs() < 1e-12, "K={k}");
        let errs: Vec<f64> = (1..=200).map(|i| 1e-3 + (chance - 1e-3) * i as f64 / 200.0).collect();
        let mut prev = adaboost_alpha(1e-3, k);
        for e in errs {
            let a = adaboost_alpha(e, k);
            assert!(a < prev, "K={k} err={e}");
            prev = a;
        }
    }
}
