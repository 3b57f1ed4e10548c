use std::collections::BTreeSet;

use fedlgt::datagen::{
    dirichlet, disjoint_cliques, generate, partition_existing, DatasetSpec, Sample, Skew,
};
use fedlgt::seed;
use proptest::prelude::*;

fn spec(num_clients: usize, exponent: f64, seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_clients,
        num_classes: 8,
        feature_dim: 4,
        size_exponent: exponent,
        min_samples: 3,
        max_samples: 60,
        cliques: disjoint_cliques(8, 2),
        co_occurrence: 0.5,
        background: 0.0,
        noise: 0.1,
        test_samples: 10,
        seed,
    }
}

fn pool(n: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut labels = vec![0.0; classes];
            labels[i % classes] = 1.0;
            if i % 7 == 0 {
                labels[(i + 3) % classes] = 1.0;
            }
            Sample {
                features: vec![i as f64, (i * i) as f64],
                labels,
            }
        })
        .collect()
}

/// Identity of a pool sample, recovered from its first feature.
fn ids(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.features[0] as usize).collect()
}

#[test]
fn dirichlet_with_large_alpha_is_near_uniform() {
    let mut rng = seed::rng(11);
    for k in [2, 5, 10, 20] {
        for _ in 0..50 {
            let p = dirichlet(k, 1000.0, &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for &x in &p {
                assert!((x - 1.0 / k as f64).abs() < 0.05, "k={k} p={p:?}");
            }
        }
    }
}

#[test]
fn partition_conserves_the_pool() {
    for skew in [
        Skew::Iid,
        Skew::LabelDirichlet { alpha: 0.5 },
        Skew::LabelDirichlet { alpha: 1000.0 },
    ] {
        let ds = partition_existing(pool(300, 6), 5, skew, 0.2, 3).unwrap();
        let mut all: Vec<usize> = ds.clients.iter().flat_map(|c| ids(c)).collect();
        all.extend(ids(&ds.test));
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>(), "{skew:?}");
        assert_eq!(ds.test.len(), 60);
        assert!(ds.clients.iter().all(|c| !c.is_empty()));
    }
}

#[test]
fn partition_needs_a_sample_per_client() {
    assert!(partition_existing(pool(3, 2), 5, Skew::Iid, 0.0, 0).is_err());
}

#[test]
fn client_sizes_follow_the_power_law() {
    for (k, a) in [(50, 0.5), (80, 1.0), (64, 0.0)] {
        let s = spec(k, a, 4);
        let ds = generate(&s).unwrap();
        let mut got = ds.client_sizes();
        got.sort_unstable();
        // Target: one client per rank r = 1..K at max * r^-a, clamped.
        let mut want: Vec<usize> = (1..=k)
            .map(|r| {
                let v = (60.0 * (r as f64).powf(-a)).round();
                v.clamp(3.0, 60.0) as usize
            })
            .collect();
        want.sort_unstable();
        let ks = (0..=60)
            .map(|x| {
                let fg = got.iter().filter(|&&n| n <= x).count() as f64 / k as f64;
                let fw = want.iter().filter(|&&n| n <= x).count() as f64 / k as f64;
                (fg - fw).abs()
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.1, "K={k} a={a} KS={ks}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn disjoint_cliques_give_disjoint_label_sets(k in 2usize..8, seed in any::<u64>()) {
        let ds = generate(&spec(k, 0.5, seed)).unwrap();
        let sets: Vec<BTreeSet<usize>> = ds
            .clients
            .iter()
            .map(|c| c.iter().flat_map(|s| s.positives().collect::<Vec<_>>()).collect())
            .collect();
        for i in 0..k {
            for j in 0..k {
                // Clients sharing a clique (k > 4 wraps) may overlap by design.
                if i != j && i % 4 != j % 4 {
                    prop_assert!(sets[i].is_disjoint(&sets[j]));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let s = spec(4, 0.7, seed);
        prop_assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    }

    #[test]
    fn every_label_vector_has_c_entries(seed in any::<u64>(), bg in 0.0f64..1.0) {
        let mut s = spec(3, 1.0, seed);
        s.background = bg;
        let ds = generate(&s).unwrap();
        for smp in ds.clients.iter().flatten().chain(&ds.test) {
            prop_assert_eq!(smp.labels.len(), 8);
            prop_assert!(smp.labels.iter().all(|&y| y == 0.0 || y == 1.0));
        }
    }
}
