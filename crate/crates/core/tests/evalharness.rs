use trajcl::evalharness::{binomial_ci95, imbalance_budget, mean, Benchmark, Protocol, Setting};
use trajcl::trajdata::{TrajInstance, TrajPoint};

fn labelled(counts: &[usize]) -> Vec<TrajInstance> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            (0..n).map(move |i| TrajInstance {
                id: format!("{c}-{i}"),
                label: c,
                points: vec![TrajPoint::new(0.0, 0.0, 0)],
                context: vec![],
            })
        })
        .collect()
}

fn class_counts(set: &[TrajInstance]) -> [usize; 2] {
    let mut c = [0; 2];
    for i in set {
        c[i.label] += 1;
    }
    c
}

#[test]
fn protocol_defaults_match_benchmark_definition() {
    let p = Protocol::default();
    assert_eq!((p.n_train, p.n_test), (4000, 1000));
    assert_eq!(p.seeds, vec![1, 2, 3, 4, 5]);
    assert_eq!((p.train.d, p.train.k), (64, 10));
    assert!(p.train.max_epochs <= 60);
    assert_eq!(p.world.spurious_rate, 0.9);
    assert_eq!(p.world.n_classes(), 2);
}

#[test]
fn imbalance_budget_is_half_unless_a_class_is_short() {
    assert_eq!(imbalance_budget(&labelled(&[50, 50])), 50);
    assert_eq!(imbalance_budget(&labelled(&[60, 40])), 50);
    // Half of 100 would need 25 of class 1 at 1:1; only 20 exist.
    assert_eq!(imbalance_budget(&labelled(&[80, 20])), 40);
    assert_eq!(imbalance_budget(&labelled(&[100, 0])), 0);
}

#[test]
fn every_setting_is_feasible_on_benchmark_seeds() {
    let bench = Benchmark::new(Protocol::default()).unwrap();
    for seed in bench.protocol.seeds.clone() {
        let data = bench.data(seed).unwrap();
        let budget = imbalance_budget(&data.train);
        assert!(budget >= 1900, "seed {seed}: budget {budget}");
        for (ratio, want) in [(0.5, 2000), (0.2, 800), (0.1, 400)] {
            let sub = bench.subset(&data, Setting::FewShot { ratio }, seed).unwrap();
            assert!(
                sub.len().abs_diff(want) <= 2,
                "seed {seed} ratio {ratio}: {}",
                sub.len()
            );
        }
        for (majority, minority) in [(1, 1), (7, 1), (15, 1)] {
            let sub = bench
                .subset(&data, Setting::Imbalance { majority, minority }, seed)
                .unwrap();
            let [a, b] = class_counts(&sub);
            assert_eq!(a + b, budget);
            let expect_a = (budget as f64 * majority as f64 / (majority + minority) as f64).round() as usize;
            assert_eq!(a, expect_a, "seed {seed} {majority}:{minority}");
        }
        assert_eq!(bench.subset(&data, Setting::Full, seed).unwrap().len(), 4000);
    }
}

#[test]
fn summary_statistics() {
    assert_eq!(mean([0.25, 0.75, 0.5]), 0.5);
    assert!(mean(std::iter::empty()).is_nan());
    let hw = binomial_ci95(0.8, 1000);
    assert!((hw - 1.96 * (0.16f64 / 1000.0).sqrt()).abs() < 1e-15);
    assert_eq!(binomial_ci95(1.0, 10), 0.0);
    assert_eq!(Setting::FewShot { ratio: 0.2 }.label(), "fewshot_0.2");
    assert_eq!(
        Setting::Imbalance {
            majority: 7,
            minority: 1
        }
        .label(),
        "imbalance_7:1"
    );
}
