mod common;

use diffcore::{AdamConfig, Graph, ParamStore, Tensor};
use trajcl::causalhead::*;

fn ce(logits: Vec<f64>, c: usize, target: Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(Tensor::matrix(logits.len() / c, c, logits).unwrap());
    let loss = g.cross_entropy(l, &target).unwrap();
    g.value(loss).item()
}

#[test]
fn causal_loss_anchors() {
    let t = one_hot::<f64>(&[2, 0], 4).unwrap();
    let confident = vec![0.0, 0.0, 30.0, 0.0, 30.0, 0.0, 0.0, 0.0];
    assert!(ce(confident, 4, t.clone()) < 1e-3);
    assert!((ce(vec![0.3; 8], 4, t) - 4f64.ln()).abs() < 1e-12);
    assert!(one_hot::<f64>(&[4], 4).is_err());
}

#[test]
fn confound_loss_minimum_is_uniform() {
    let u = uniform_target::<f64>(1, 4);
    assert!((ce(vec![1.7; 4], 4, u.clone()) - 4f64.ln()).abs() < 1e-12);
    let confident = ce(vec![12.0, 0.0, 0.0, 0.0], 4, u.clone());
    // (1/4)(−log p₁ − Σ log p_other) with p₁ ≈ 1, p_other ≈ e^{−12}.
    let p = [12f64.exp(), 1.0, 1.0, 1.0];
    let z: f64 = p.iter().sum();
    let expect = -0.25 * p.iter().map(|v| (v / z).ln()).sum::<f64>();
    assert!((confident - expect).abs() < 1e-9);
    assert!(confident > 8.0);
    // Relabeling classes leaves the loss unchanged.
    let a = ce(vec![0.1, -2.0, 3.0, 0.7], 4, u.clone());
    let b = ce(vec![3.0, 0.7, 0.1, -2.0], 4, u);
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn descent_on_confound_loss_flattens_logits() {
    let mut rng = common::rng(5);
    let mut store = ParamStore::<f64>::new();
    let head = HeadIds::register(&mut store, "heads.conf", 6, 3, &mut rng).unwrap();
    let z = Tensor::randn(&[8, 6], 1.0, &mut rng);
    let adam = AdamConfig::with_lr(0.01);
    let gap = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let h = head.bind(&mut g, store);
        let zi = g.constant(z.clone());
        let l = mlp(&mut g, &h, zi).unwrap();
        let v = g.value(l);
        (0..v.rows())
            .map(|i| {
                let r = v.row(i);
                r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min)
            })
            .fold(0.0, f64::max)
    };
    assert!(gap(&store) > 1e-2);
    for _ in 0..500 {
        let mut g = Graph::new();
        let h = head.bind(&mut g, &store);
        let zi = g.constant(z.clone());
        let (_, loss) = classify_confound(&mut g, &h, zi).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut store);
        store.adam_step(&adam);
    }
    assert!(gap(&store) < 1e-3, "gap {}", gap(&store));
}

#[test]
fn shuffle_properties() {
    let mut r = common::rng(1);
    assert_eq!(shuffle_confound(1, &mut r), vec![0]);
    let p = shuffle_confound(50, &mut common::rng(7));
    assert_eq!(p, shuffle_confound(50, &mut common::rng(7)));
    let mut sorted = p.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
}

struct Fixture {
    store: ParamStore<f64>,
    head: HeadIds,
    za: Tensor<f64>,
    zb: Tensor<f64>,
    labels: Vec<usize>,
}

fn fixture(seed: u64, b: usize) -> Fixture {
    let mut rng = common::rng(seed);
    let mut store = ParamStore::new();
    let head = HeadIds::register(&mut store, "heads.shared", 4, 3, &mut rng).unwrap();
    Fixture {
        store,
        head,
        za: Tensor::randn(&[b, 4], 1.0, &mut rng),
        zb: Tensor::randn(&[b, 4], 1.0, &mut rng),
        labels: (0..b).map(|i| (i * 7 + seed as usize) % 3).collect(),
    }
}

fn l_int(f: &Fixture, zb: &Tensor<f64>, perm: &[usize]) -> f64 {
    let mut g = Graph::new();
    let h = f.head.bind(&mut g, &f.store);
    let a = g.constant(f.za.clone());
    let b = g.constant(zb.clone());
    let (_, l) = classify_intervened(&mut g, &h, a, b, perm, &f.labels, false).unwrap();
    g.value(l).item()
}

fn l_cau(f: &Fixture) -> f64 {
    let mut g = Graph::new();
    let h = f.head.bind(&mut g, &f.store);
    let a = g.constant(f.za.clone());
    let (_, l) = classify_causal(&mut g, &h, a, &f.labels).unwrap();
    g.value(l).item()
}

#[test]
fn zero_confound_features_reduce_to_causal_loss() {
    for seed in 0..10 {
        let f = fixture(seed, 5);
        let zero = Tensor::zeros(&[5, 4]);
        assert_eq!(l_int(&f, &zero, &[4, 2, 0, 1, 3]), l_cau(&f));
    }
}

#[test]
fn identical_instances_are_exchangeable() {
    let mut f = fixture(3, 4);
    let row = f.za.row(0).to_vec();
    let rowb = f.zb.row(0).to_vec();
    f.za = Tensor::from_rows(&vec![row; 4]).unwrap();
    f.zb = Tensor::from_rows(&vec![rowb; 4]).unwrap();
    f.labels = vec![1; 4];
    let zb = f.zb.clone();
    let a = l_int(&f, &zb, &[0, 1, 2, 3]);
    assert_eq!(a, l_int(&f, &zb, &[3, 1, 0, 2]));
    assert_eq!(a, l_int(&f, &zb, &[1, 0, 3, 2]));
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Single-row loss, computed independently of the batch path.
fn pair_loss(f: &Fixture, i: usize, j: usize) -> f64 {
    let mut g = Graph::new();
    let h = f.head.bind(&mut g, &f.store);
    let z: Vec<f64> = f.za.row(i).iter().zip(f.zb.row(j)).map(|(a, b)| a + b).collect();
    let zi = g.constant(Tensor::matrix(1, 4, z).unwrap());
    let l = mlp(&mut g, &h, zi).unwrap();
    let loss = g.cross_entropy(l, &one_hot(&[f.labels[i]], 3).unwrap()).unwrap();
    g.value(loss).item()
}

#[test]
fn intervention_loss_matches_enumeration() {
    for seed in 0..5 {
        let f = fixture(seed, 3);
        let perms = permutations(3);
        assert_eq!(perms.len(), 6);
        let table: Vec<f64> = perms.iter().map(|p| l_int(&f, &f.zb, p)).collect();
        // Each entry equals the row-average of pairwise losses.
        for (p, l) in perms.iter().zip(&table) {
            let direct: f64 = (0..3).map(|i| pair_loss(&f, i, p[i])).sum::<f64>() / 3.0;
            assert!((l - direct).abs() < 1e-12);
        }
        // A sampled permutation's loss is one table entry.
        let perm = shuffle_confound(3, &mut common::rng(seed));
        let sampled = l_int(&f, &f.zb, &perm);
        assert!(table.contains(&sampled));
        // Expectation over permutations equals the mean over all (i, j) pairs.
        let mean_perm = table.iter().sum::<f64>() / 6.0;
        let mut pairs = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                pairs += pair_loss(&f, i, j);
            }
        }
        assert!((mean_perm - pairs / 9.0).abs() < 1e-12);
    }
}

#[test]
fn total_loss_arithmetic_and_linearity() {
    let w = LossWeights::default();
    assert_eq!((w.lambda, w.phi, w.eta), (1.0, 0.5, 0.5));
    assert_eq!(w.combine(1.0, 2.0, 0.5), 2.25);
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::scalar(1.0));
    let b = g.constant(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(0.5));
    let t = total_loss(&mut g, a, b, c, &w).unwrap();
    assert_eq!(g.value(t).item(), 2.25);
    let only = LossWeights {
        lambda: 1.0,
        phi: 0.0,
        eta: 0.0,
    };
    let t = total_loss(&mut g, a, b, c, &only).unwrap();
    assert_eq!(g.value(t).item(), 1.0);
    assert!(LossWeights { lambda: -1.0, ..w }.validate().is_err());
}
