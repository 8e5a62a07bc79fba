mod common;

use diffcore::{grad_check, Graph, ParamStore, Tensor};
use trajcl::encoder::*;
use trajcl::model::{Mode, ModelConfig, TrajClModel, Variant};

#[test]
fn fused_shape_with_default_width() {
    let mut rng = common::rng(1);
    let mut store = ParamStore::<f64>::new();
    let b = BranchIds::register(&mut store, "alpha", 27, 64, 3, &mut rng).unwrap();
    let mut g = Graph::new();
    let nodes = b.bind(&mut g, &store);
    let x = g.constant(Tensor::randn(&[20, 3], 1.0, &mut rng));
    let e = g.constant(Tensor::randn(&[20, 24], 1.0, &mut rng));
    let input = concat_inputs(&mut g, x, e).unwrap();
    let fused = fuse_inputs(&mut g, &nodes, input).unwrap();
    assert_eq!(g.value(fused).shape(), &[20, 64]);
    let h = encode(&mut g, &nodes, input).unwrap();
    assert_eq!(g.value(h).shape(), &[20, 64]);
}

#[test]
fn length_mismatch_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[20, 3]));
    let e = g.constant(Tensor::zeros(&[19, 24]));
    assert!(concat_inputs(&mut g, x, e).is_err());
}

#[test]
fn zero_parameters_give_zero_output() {
    let mut rng = common::rng(2);
    let mut store = ParamStore::<f64>::new();
    let b = BranchIds::register(&mut store, "alpha", 6, 8, 3, &mut rng).unwrap();
    for id in b.ids() {
        store.value_mut(id).fill(0.0);
    }
    let mut g = Graph::new();
    let nodes = b.bind(&mut g, &store);
    let x = g.constant(Tensor::randn(&[7, 6], 1.0, &mut rng));
    let fused = fuse_inputs(&mut g, &nodes, x).unwrap();
    assert!(g.value(fused).data().iter().all(|v| *v == 0.0));
    let h = encode(&mut g, &nodes, x).unwrap();
    assert!(g.value(h).data().iter().all(|v| *v == 0.0));
}

#[test]
fn fusion_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = common::rng(100 + seed);
        let mut store = ParamStore::<f64>::new();
        let b = BranchIds::register(&mut store, "alpha", 4, 3, 3, &mut rng).unwrap();
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let report = grad_check(&mut store, 1e-6, |s: &ParamStore<f64>, g: &mut Graph<f64>| {
            let nodes = b.bind(g, s);
            let xi = g.constant(x.clone());
            let h = encode(g, &nodes, xi)?;
            let sq = g.hadamard(h, h)?;
            let m = g.mean_axis(sq, 0)?;
            g.mean_axis(m, 1)
        })
        .unwrap();
        assert!(report.passes(1e-5), "seed {seed}: {report:?}");
    }
}

fn dual_model(seed: u64) -> TrajClModel<f64> {
    let cfg = ModelConfig {
        d: 6,
        ..common::small_cfg(Mode::Trajcl, Variant::Full)
    };
    TrajClModel::new(cfg, seed).unwrap()
}

fn dual_states(m: &TrajClModel<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let a = m.alpha_ids().bind(&mut g, &m.store);
    let b = m.beta_ids().unwrap().bind(&mut g, &m.store);
    let xi = g.constant(x.clone());
    let (ha, hb) = encode_dual(&mut g, &a, &b, xi).unwrap();
    (g.value(ha).clone(), g.value(hb).clone())
}

#[test]
fn branches_are_unshared_and_copyable() {
    let mut rng = common::rng(3);
    for seed in 0..10 {
        let mut m = dual_model(seed);
        let x = Tensor::randn(&[9, 7], 1.0, &mut rng);
        let (ha, hb) = dual_states(&m, &x);
        assert_eq!(ha.shape(), &[9, 6]);
        assert_eq!(hb.shape(), &[9, 6]);
        assert_ne!(ha, hb);
        let (a, b) = (m.alpha_ids().clone(), m.beta_ids().unwrap().clone());
        copy_branch(&mut m.store, &a, &b).unwrap();
        let (ha2, hb2) = dual_states(&m, &x);
        assert_eq!(ha2, hb2);
        assert_eq!(ha2, ha);
    }
}

#[test]
fn swapping_branch_parameters_swaps_outputs() {
    let mut rng = common::rng(4);
    let mut m = dual_model(11);
    let x = Tensor::randn(&[12, 7], 1.0, &mut rng);
    let (ha, hb) = dual_states(&m, &x);
    let (a, b) = (m.alpha_ids().clone(), m.beta_ids().unwrap().clone());
    for (ia, ib) in a.ids().into_iter().zip(b.ids()) {
        let va = m.store.value(ia).clone();
        let vb = m.store.value(ib).clone();
        m.store.set_value(ia, vb).unwrap();
        m.store.set_value(ib, va).unwrap();
    }
    let (ha2, hb2) = dual_states(&m, &x);
    assert_eq!(ha2, hb);
    assert_eq!(hb2, ha);
}

#[test]
fn parameter_names_are_branch_qualified() {
    let m = dual_model(0);
    let names: Vec<&str> = m.store.params().iter().map(|p| p.name.as_str()).collect();
    for prefix in [
        "alpha.conv1",
        "alpha.conv2",
        "alpha.gru",
        "beta.conv1",
        "beta.gru",
        "codebook.c",
        "heads.shared",
        "heads.conf",
    ] {
        assert!(
            names.iter().any(|n| n.starts_with(prefix)),
            "{prefix} missing from {names:?}"
        );
    }
    assert!(!names.iter().any(|n| n.starts_with("heads.int")));
}
