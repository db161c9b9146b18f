use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use filora::adapters::GroupId;
use filora::metrics::{entropy, gmr_from_rows, jsd, mutual_information};
use filora::synthdata::{generate_dataset, suppress, DatasetSpec, FeatureRole, Prototypes};
use filora::instructions::TemplateBank;
use filora::tensor::Tensor;

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter_map("needs mass", |w| {
        let total: f64 = w.iter().sum();
        (total > 1e-9).then(|| w.iter().map(|v| v / total).collect())
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|n| (distribution(n), distribution(n)))
}

fn labels() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(0usize..5, n), prop::collection::vec(0usize..3, n)))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn jsd_is_bounded_symmetric_and_zero_on_the_diagonal((p, q) in pair()) {
        let d = jsd(&p, &q).unwrap();
        prop_assert!(d >= -1e-15 && d <= std::f64::consts::LN_2 + 1e-12, "{d}");
        prop_assert!((d - jsd(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!(jsd(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mi_is_symmetric_nonnegative_and_self_mi_is_entropy((x, y) in labels()) {
        let xy = mutual_information(&x, &y).unwrap();
        prop_assert!((xy - mutual_information(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(xy >= -1e-12);
        prop_assert!(xy <= entropy(&x).unwrap().min(entropy(&y).unwrap()) + 1e-12);
        prop_assert!((mutual_information(&x, &x).unwrap() - entropy(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gmr_lies_in_unit_interval(
        rows in prop::collection::vec(
            (prop::collection::vec(0.0f64..=1.0, 3), prop::collection::vec(0.0f64..=1.0, 3)),
            1..20,
        ),
    ) {
        let (focus, ignore): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let layout: Vec<GroupId> = ["a", "b", "c"].into_iter().map(GroupId::from).collect();
        for v in gmr_from_rows(&layout, &focus, &ignore).unwrap().values() {
            prop_assert!((0.0..=1.0).contains(v), "{v}");
        }
        let same = gmr_from_rows(&layout, &focus, &focus).unwrap();
        prop_assert!(same.values().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn suppression_touches_only_the_targeted_groups(seed in 0u64..1000, strength in 0.0f64..=1.0, pick in 0usize..4) {
        let spec = DatasetSpec { size: 4, eval_size: 1, seed, ..DatasetSpec::reference() };
        let data = generate_dataset(&spec, &TemplateBank::builtin()).unwrap();
        let target = spec.groups[pick].id.clone();
        for s in &data.train {
            let out = suppress(s, std::slice::from_ref(&target), strength).unwrap();
            prop_assert_eq!((out.y, out.y_spurious, out.condition), (s.y, s.y_spurious, s.condition));
            prop_assert_eq!(&out.instruction, &s.instruction);
            for (g, f) in &s.features {
                if *g == target {
                    let expect = f.scaled(1.0 - strength);
                    prop_assert_eq!(out.features[g].data(), expect.data());
                } else {
                    prop_assert_eq!(out.features[g].data(), f.data());
                }
            }
        }
    }

    #[test]
    fn proxy_label_ignores_core_features(seed in 0u64..1000, noise_seed in 0u64..1000, scale in 0.0f64..10.0) {
        let spec = DatasetSpec { seed, ..DatasetSpec::reference() };
        let protos = Prototypes::draw(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features: filora::synthdata::FeatureMap = spec
            .groups
            .iter()
            .map(|g| (g.id.clone(), Tensor::randn(&[g.dim], 1.0, &mut rng)))
            .collect();
        let before = protos.proxy_label(&spec, &features, 0.2, noise_seed).unwrap();
        for g in spec.groups.iter().filter(|g| g.role == FeatureRole::Core) {
            features.insert(g.id.clone(), Tensor::randn(&[g.dim], scale, &mut rng));
        }
        prop_assert_eq!(protos.proxy_label(&spec, &features, 0.2, noise_seed).unwrap(), before);
    }
}

#[test]
fn mi_exact_cases() {
    let x: Vec<usize> = (0..1000).map(|i| i % 2).collect();
    assert!((mutual_information(&x, &x).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    // Independent by construction: every (x, y) cell holds the same count.
    let y: Vec<usize> = (0..1000).map(|i| (i / 2) % 2).collect();
    assert!(mutual_information(&x, &y).unwrap().abs() < 1e-12);
}
