use super::*;
use crate::rng;
use proptest::prelude::*;

#[test]
fn schedule_alternates_with_first_subset_mle_only() {
    for n in [1usize, 2, 3, 5] {
        let schedule = AlignmentSchedule::build(n, HpaAlgorithm::Dpo).unwrap();
        let phases = schedule.phases();
        assert_eq!(phases.len(), 2 * n);
        for (i, phase) in phases.iter().enumerate() {
            assert_eq!(phase.index, i + 1);
            let expected_side = if i % 2 == 0 { Side::Ifa } else { Side::Hpa };
            assert_eq!(phase.side, expected_side);
            assert_eq!(phase.subset, i / 2 + 1);
            match (phase.side, phase.subset) {
                (Side::Ifa, 1) => assert_eq!(phase.loss_kind, LossKind::MleOnly),
                (Side::Ifa, _) => assert_eq!(phase.loss_kind, LossKind::EwcIfa),
                (Side::Hpa, _) => {
                    assert_eq!(phase.loss_kind, LossKind::EwcHpa(HpaAlgorithm::Dpo))
                }
            }
        }
    }
    assert!(AlignmentSchedule::build(0, HpaAlgorithm::Dpo).is_err());
}

#[test]
fn split_is_deterministic_disjoint_and_balanced() {
    let records: Vec<u32> = (0..10).collect();
    let mut r1 = rng::stream(5, "split");
    let mut r2 = rng::stream(5, "split");
    let a = split_dataset(&records, 2, &mut r1).unwrap();
    let b = split_dataset(&records, 2, &mut r2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].len(), 5);
    assert_eq!(a[1].len(), 5);
    let mut all: Vec<u32> = a.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, records);

    let mut r3 = rng::stream(6, "split");
    let c = split_dataset(&records, 2, &mut r3).unwrap();
    assert_ne!(a, c, "different seed should shuffle differently");
}

#[test]
fn split_single_subset_keeps_everything() {
    let records: Vec<u32> = (0..7).collect();
    let mut r = rng::stream(5, "split");
    let subsets = split_dataset(&records, 1, &mut r).unwrap();
    assert_eq!(subsets.len(), 1);
    let mut all = subsets[0].clone();
    all.sort_unstable();
    assert_eq!(all, records);
}

#[test]
fn split_rejects_more_subsets_than_records() {
    let records: Vec<u32> = (0..3).collect();
    let mut r = rng::stream(5, "split");
    assert!(split_dataset(&records, 4, &mut r).is_err());
    assert!(split_dataset(&records, 0, &mut r).is_err());
}

proptest! {
    #[test]
    fn split_sizes_differ_by_at_most_one(len in 1usize..60, n in 1usize..12, seed in 0u64..500) {
        prop_assume!(n <= len);
        let records: Vec<usize> = (0..len).collect();
        let mut r = rng::seeded(seed);
        let subsets = split_dataset(&records, n, &mut r).unwrap();
        prop_assert_eq!(subsets.len(), n);
        let sizes: Vec<usize> = subsets.iter().map(|s| s.len()).collect();
        let min = sizes.iter().min().unwrap();
        let max = sizes.iter().max().unwrap();
        prop_assert!(max - min <= 1);
        let mut all: Vec<usize> = subsets.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, records);
    }
}

#[test]
fn standardize_centers_and_scales() {
    let mut values = vec![1.0, 2.0, 3.0, 4.0];
    standardize(&mut values);
    let mean: f64 = values.iter().sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    let var: f64 = values.iter().map(|v| v * v).sum::<f64>() / 4.0;
    assert!((var - 1.0).abs() < 1e-12);

    // single element untouched; constant vector only centered
    let mut single = vec![3.5];
    standardize(&mut single);
    assert_eq!(single, vec![3.5]);
    let mut flat = vec![2.0, 2.0, 2.0];
    standardize(&mut flat);
    assert_eq!(flat, vec![0.0, 0.0, 0.0]);
}

#[test]
fn config_validation_catches_bad_values() {
    let mut cfg = HbatConfig::default();
    cfg.validate().unwrap();
    cfg.n_subsets = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = HbatConfig::default();
    cfg.f_max = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = HbatConfig::default();
    cfg.freeze_fraction = 1.0;
    assert!(cfg.validate().is_err());
}
