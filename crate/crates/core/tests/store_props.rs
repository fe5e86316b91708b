use std::collections::{BTreeMap, BTreeSet};

use ae_core::store::{read_records, read_store, split_validation, write_store, write_store_with_manifest, SampleRecord, Split, StoreHeader};
use proptest::prelude::*;

fn record_strategy(n_tasks: u32, dim: usize) -> impl Strategy<Value = SampleRecord> {
    (
        any::<u64>(),
        0..n_tasks,
        any::<bool>(),
        prop_oneof![Just(1i32), Just(-1i32)],
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), dim),
        0.0f64..10.0,
    )
        .prop_map(|(sample_id, task_id, val, label, base_output, gradient, weight)| SampleRecord {
            sample_id,
            task_id,
            split: if val { Split::Validation } else { Split::Train },
            label,
            base_output,
            gradient,
            weight,
        })
}

fn store_strategy() -> impl Strategy<Value = (StoreHeader, Vec<SampleRecord>)> {
    (1u32..5, 1usize..6).prop_flat_map(|(n_tasks, dim)| {
        prop::collection::vec(record_strategy(n_tasks, dim), 0..30).prop_map(move |recs| {
            (StoreHeader::raw(n_tasks as u64, recs.len() as u64, dim as u64, 2), recs)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_read_is_identity((header, records) in store_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.gfv1");
        write_store(&records, &header, &path).unwrap();
        let (h2, r2) = read_records(&path).unwrap();
        prop_assert_eq!(h2, header);
        prop_assert_eq!(r2.len(), records.len());
        for (a, b) in records.iter().zip(&r2) {
            prop_assert_eq!(a.sample_id, b.sample_id);
            prop_assert_eq!(a.task_id, b.task_id);
            prop_assert_eq!(a.split, b.split);
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.base_output.to_bits(), b.base_output.to_bits());
            prop_assert_eq!(a.weight.to_bits(), b.weight.to_bits());
            let ga: Vec<u64> = a.gradient.iter().map(|v| v.to_bits()).collect();
            let gb: Vec<u64> = b.gradient.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ga, gb);
        }
        // Rewriting what was read gives the same bytes.
        let again = dir.path().join("t.gfv1");
        write_store(&r2, &h2, &again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn split_is_deterministic_and_partitions_the_task(
        n in 2usize..60,
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let records: Vec<SampleRecord> = (0..n as u64)
            .map(|i| SampleRecord { sample_id: i * 3 + 1, task_id: 0, split: Split::Train, label: 1, base_output: 0.0, gradient: vec![i as f64], weight: 1.0 })
            .collect();
        let header = StoreHeader::raw(1, n as u64, 1, 2);
        let store = ae_core::store::GradientStore::from_records(header, records, &BTreeMap::new()).unwrap();
        let task = store.task(0).unwrap();
        let n_val = (fraction * n as f64).round() as usize;
        let res = split_validation(task, fraction, seed);
        if n_val < 1 || n_val >= n {
            prop_assert!(res.is_err());
            return Ok(());
        }
        let a = res.unwrap();
        let b = split_validation(task, fraction, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let train: BTreeSet<u64> = a.train.iter().map(|r| r.sample_id).collect();
        let val: BTreeSet<u64> = a.validation.iter().map(|r| r.sample_id).collect();
        prop_assert!(train.is_disjoint(&val));
        let all: BTreeSet<u64> = train.union(&val).copied().collect();
        let input: BTreeSet<u64> = task.train.iter().map(|r| r.sample_id).collect();
        prop_assert_eq!(all, input);
        prop_assert_eq!(val.len(), n_val);
        prop_assert!(a.validation.iter().all(|r| r.split == Split::Validation));
    }
}

#[test]
fn manifest_keeps_task_names() {
    let names: BTreeMap<u32, String> = [(0, "alpha".to_string()), (1, "beta".to_string())].into();
    let records = vec![
        SampleRecord { sample_id: 0, task_id: 1, split: Split::Train, label: -1, base_output: 0.5, gradient: vec![1.0, 2.0], weight: 1.0 },
        SampleRecord { sample_id: 1, task_id: 0, split: Split::Validation, label: 1, base_output: -0.5, gradient: vec![3.0, 4.0], weight: 2.0 },
    ];
    let store = ae_core::store::GradientStore::from_records(StoreHeader::raw(2, 2, 2, 2), records, &names).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("named.gfv1");
    write_store_with_manifest(&store, &path).unwrap();
    let back = read_store(&path).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.names(), names);
}
