use std::collections::BTreeSet;

use proptest::prelude::*;

use ssmcl::benchgen::{decode_dataset, encode_dataset, generate, BenchSpec};

fn spec() -> impl Strategy<Value = BenchSpec> {
    (any::<u64>(), 1usize..4, 1usize..4, 1usize..4, 1usize..3, 1usize..5, 1usize..6, 0.0f64..0.5, prop::option::of(1usize..8))
        .prop_map(|(seed, tasks, classes, train, test, seq_len, d_raw, noise, sub)| BenchSpec {
            seed,
            tasks,
            classes_per_task: classes,
            train_per_class: train,
            test_per_class: test,
            seq_len,
            d_raw,
            template_scale: 1.0,
            noise_scale: noise,
            task_subspace_dim: sub,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generation_is_deterministic_and_round_trips(spec in spec()) {
        let a = generate(&spec).unwrap();
        prop_assert_eq!(&a, &generate(&spec).unwrap());
        let bytes = encode_dataset(&a).unwrap();
        prop_assert_eq!(&bytes, &encode_dataset(&generate(&spec).unwrap()).unwrap());
        prop_assert_eq!(decode_dataset(&bytes).unwrap(), a);
    }

    #[test]
    fn labels_are_disjoint_across_tasks(spec in spec()) {
        let tasks = generate(&spec).unwrap();
        let mut seen = BTreeSet::new();
        for (t, split) in tasks.iter().enumerate() {
            let labels: BTreeSet<usize> = split.train.labels.iter().chain(&split.test.labels).copied().collect();
            let expected: BTreeSet<usize> = (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
            prop_assert_eq!(&labels, &expected);
            prop_assert!(seen.is_disjoint(&labels));
            seen.extend(labels);
        }
    }

    #[test]
    fn adding_tasks_keeps_earlier_tasks(spec in spec()) {
        let longer = BenchSpec { tasks: spec.tasks + 2, ..spec.clone() };
        let short = generate(&spec).unwrap();
        let long = generate(&longer).unwrap();
        prop_assert_eq!(&long[..spec.tasks], &short[..]);
    }

    #[test]
    fn truncated_bytes_are_rejected(spec in spec(), cut in 1usize..64) {
        let bytes = encode_dataset(&generate(&spec).unwrap()).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_dataset(&bytes[..keep]).is_err());
    }
}
