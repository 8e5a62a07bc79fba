mod common;

use diffcore::{grad_check, Graph, ParamStore};
use trajcl::causalhead::LossWeights;
use trajcl::model::*;
use trajcl::trajdata::Sample;

fn batch(seed: u64, b: usize, cfg: &ModelConfig) -> Vec<Sample> {
    let mut rng = common::rng(seed);
    (0..b)
        .map(|i| common::sample(&mut rng, 4 + i % 3, cfg.traj_dim, cfg.env_dim, i % cfg.classes))
        .collect()
}

/// Balances truncation against round-off: at 1e-6 the difference quotient
/// carries ~1e-10 of noise, comparable to 1e-4 of the smallest entries.
const EPS: f64 = 1e-5;

fn check_model(cfg: ModelConfig, seed: u64, weights: LossWeights) -> f64 {
    let model = TrajClModel::<f64>::new(cfg.clone(), seed).unwrap();
    let prepared = model.prepare_all(&batch(seed, 4, &cfg)).unwrap();
    let refs: Vec<&Prepared<f64>> = prepared.iter().collect();
    let noise = model.sample_noise(&refs, &mut common::rng(seed + 1000));
    let mut store = model.store.clone();
    let report = grad_check(&mut store, EPS, |s: &ParamStore<f64>, g: &mut Graph<f64>| {
        let (_, l) = model.loss_in(s, g, &refs, Some(&noise), &weights)?;
        Ok(l.total)
    })
    .unwrap();
    assert!(report.entries > 0);
    assert!(report.kinks_skipped * 100 <= report.entries, "{report:?}");
    report.max_rel_error
}

#[test]
fn full_objective_gradients() {
    for seed in 0..4 {
        let err = check_model(
            common::small_cfg(Mode::Trajcl, Variant::Full),
            seed,
            LossWeights::default(),
        );
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn variant_and_mode_gradients() {
    let mut cfgs = vec![];
    for v in Variant::ALL {
        cfgs.push(common::small_cfg(Mode::Trajcl, v));
    }
    cfgs.push(common::small_cfg(Mode::Base, Variant::Full));
    cfgs.push(common::small_cfg(Mode::Env, Variant::Full));
    cfgs.push(ModelConfig {
        share_heads: false,
        ..common::small_cfg(Mode::Trajcl, Variant::Full)
    });
    for cfg in cfgs {
        let err = check_model(cfg.clone(), 7, LossWeights::default());
        assert!(err < 1e-4, "{cfg:?}: {err}");
    }
}

fn grads(model: &TrajClModel<f64>, samples: &[Sample], w: LossWeights, seed: u64) -> ParamStore<f64> {
    let prepared = model.prepare_all(samples).unwrap();
    let refs: Vec<&Prepared<f64>> = prepared.iter().collect();
    let noise = model.sample_noise(&refs, &mut common::rng(seed));
    let mut g = Graph::new();
    let (_, l) = model.loss(&mut g, &refs, Some(&noise), &w).unwrap();
    g.backward(l.total).unwrap();
    let mut store = model.store.clone();
    store.zero_grads();
    g.accumulate_param_grads(&mut store);
    store
}

fn grad_norm(store: &ParamStore<f64>, prefix: &str) -> f64 {
    store
        .params()
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| p.grad.norm())
        .sum()
}

#[test]
fn codebook_is_trained_end_to_end() {
    let cfg = common::small_cfg(Mode::Trajcl, Variant::Full);
    let model = TrajClModel::<f64>::new(cfg.clone(), 3).unwrap();
    let s = grads(&model, &batch(3, 6, &cfg), LossWeights::default(), 1);
    for name in ["codebook.c", "codebook.w_v", "codebook.w_q", "codebook.w_k"] {
        let id = s.id_of(name).unwrap();
        assert!(s.grad(id).norm() > 0.0, "{name} has no gradient");
    }
}

#[test]
fn gradient_isolation_between_branches() {
    let cfg = ModelConfig {
        detach_intervention: true,
        ..common::small_cfg(Mode::Trajcl, Variant::Full)
    };
    let model = TrajClModel::<f64>::new(cfg.clone(), 4).unwrap();
    let no_con = LossWeights {
        phi: 0.0,
        ..LossWeights::default()
    };
    let s = grads(&model, &batch(4, 5, &cfg), no_con, 2);
    assert_eq!(grad_norm(&s, "heads.conf"), 0.0);
    assert_eq!(grad_norm(&s, "beta."), 0.0);
    assert!(grad_norm(&s, "alpha.") > 0.0);

    // Without detaching, the intervention term reaches the confounding encoder.
    let cfg = common::small_cfg(Mode::Trajcl, Variant::Full);
    let model = TrajClModel::<f64>::new(cfg.clone(), 4).unwrap();
    let s = grads(&model, &batch(4, 5, &cfg), no_con, 2);
    assert_eq!(grad_norm(&s, "heads.conf"), 0.0);
    assert!(grad_norm(&s, "beta.") > 0.0);
}

fn loss_values(
    model: &TrajClModel<f64>,
    samples: &[Sample],
    w: &LossWeights,
    seed: u64,
) -> (f64, f64, f64, f64) {
    let prepared = model.prepare_all(samples).unwrap();
    let refs: Vec<&Prepared<f64>> = prepared.iter().collect();
    let noise = model.sample_noise(&refs, &mut common::rng(seed));
    let mut g = Graph::new();
    let (_, l) = model.loss(&mut g, &refs, Some(&noise), w).unwrap();
    let v = |n: Option<diffcore::NodeId>| n.map_or(0.0, |n| g.value(n).item());
    (v(Some(l.l_cau)), v(l.l_con), v(l.l_int), g.value(l.total).item())
}

#[test]
fn no_ci_equals_full_with_zero_eta() {
    let cfg = common::small_cfg(Mode::Trajcl, Variant::Full);
    let full = TrajClModel::<f64>::new(cfg.clone(), 5).unwrap();
    let no_ci = TrajClModel::<f64>::new(
        ModelConfig {
            variant: Variant::NoCi,
            ..cfg.clone()
        },
        5,
    )
    .unwrap();
    let samples = batch(5, 6, &cfg);
    let w0 = LossWeights {
        eta: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(
        loss_values(&full, &samples, &w0, 9),
        loss_values(&no_ci, &samples, &LossWeights::default(), 9)
    );
}

#[test]
fn total_is_weighted_sum_of_components() {
    let cfg = common::small_cfg(Mode::Trajcl, Variant::Full);
    let model = TrajClModel::<f64>::new(cfg.clone(), 6).unwrap();
    let w = LossWeights::default();
    let (a, b, c, t) = loss_values(&model, &batch(6, 4, &cfg), &w, 1);
    assert!((w.combine(a, b, c) - t).abs() < 1e-12);
}

#[test]
fn no_dise_masks_are_half() {
    let cfg = common::small_cfg(Mode::Trajcl, Variant::NoDise);
    let model = TrajClModel::<f64>::new(cfg.clone(), 1).unwrap();
    let prepared = model.prepare_all(&batch(1, 3, &cfg)).unwrap();
    let refs: Vec<&Prepared<f64>> = prepared.iter().collect();
    let mut g = Graph::new();
    let rep = model
        .represent(&mut g, &refs, None, trajcl::envalign::MaskMode::Train)
        .unwrap();
    for m in &rep.masks {
        assert!(g.value(m.m_alpha).data().iter().all(|v| *v == 0.5));
        assert!(g.value(m.m_beta).data().iter().all(|v| *v == 0.5));
    }
}

#[test]
fn no_ec_freezes_prototypes_only() {
    let cfg = common::small_cfg(Mode::Trajcl, Variant::NoEc);
    let model = TrajClModel::<f64>::new(cfg.clone(), 2).unwrap();
    let s = grads(&model, &batch(2, 4, &cfg), LossWeights::default(), 3);
    assert_eq!(s.grad(s.id_of("codebook.c").unwrap()).norm(), 0.0);
    assert!(s.grad(s.id_of("codebook.w_v").unwrap()).norm() > 0.0);
}

#[test]
fn no_env_zeroes_context() {
    let cfg = common::small_cfg(Mode::Trajcl, Variant::NoEnv);
    let model = TrajClModel::<f64>::new(cfg.clone(), 2).unwrap();
    let p = model.prepare(&batch(2, 1, &cfg)[0]).unwrap();
    assert!(p.env.data().iter().all(|v| *v == 0.0));
    for i in 0..p.input.rows() {
        assert!(p.input.row(i)[cfg.traj_dim..].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn base_ignores_context() {
    let cfg = common::small_cfg(Mode::Base, Variant::Full);
    let model = TrajClModel::<f64>::new(cfg.clone(), 2).unwrap();
    let samples = batch(2, 5, &cfg);
    let mut zeroed = samples.clone();
    for s in &mut zeroed {
        s.env.fill(0.0);
    }
    let w = LossWeights::default();
    assert_eq!(
        loss_values(&model, &samples, &w, 1),
        loss_values(&model, &zeroed, &w, 1)
    );
}

#[test]
fn env_differs_from_base_only_in_input_width() {
    let base = TrajClModel::<f64>::new(common::small_cfg(Mode::Base, Variant::Full), 0).unwrap();
    let env = TrajClModel::<f64>::new(common::small_cfg(Mode::Env, Variant::Full), 0).unwrap();
    let shapes = |m: &TrajClModel<f64>| -> Vec<(String, Vec<usize>)> {
        m.store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    };
    let (sb, se) = (shapes(&base), shapes(&env));
    assert_eq!(sb.len(), se.len());
    for (a, b) in sb.iter().zip(&se) {
        assert_eq!(a.0, b.0);
        if a.0 == "alpha.conv1.w" {
            assert_eq!(a.1, vec![3, 3, 5]);
            assert_eq!(b.1, vec![3, 7, 5]);
        } else {
            assert_eq!(a.1, b.1);
        }
    }
}

#[test]
fn inference_is_deterministic_and_shift_invariant() {
    let cfg = common::small_cfg(Mode::Trajcl, Variant::Full);
    let mut model = TrajClModel::<f64>::new(cfg.clone(), 8).unwrap();
    let prepared = model.prepare_all(&batch(8, 10, &cfg)).unwrap();
    let refs: Vec<&Prepared<f64>> = prepared.iter().collect();
    let (p1, z1) = model.infer(&refs).unwrap();
    let (p2, z2) = model.infer(&refs).unwrap();
    assert_eq!((p1.clone(), z1.clone()), (p2, z2));
    assert_eq!(z1.shape(), &[10, 5]);
    let b2 = model.store.id_of("heads.shared.b2").unwrap();
    model
        .store
        .value_mut(b2)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += 3.5);
    assert_eq!(model.infer(&refs).unwrap().0, p1);
}

#[test]
fn point_masks_report_prototypes() {
    let cfg = common::small_cfg(Mode::Trajcl, Variant::Full);
    let model = TrajClModel::<f64>::new(cfg.clone(), 8).unwrap();
    let p = model.prepare(&batch(8, 1, &cfg)[0]).unwrap();
    let (ids, ma) = model.point_masks(&p).unwrap().unwrap();
    assert_eq!(ids.len(), p.input.rows());
    assert!(ids.iter().all(|i| *i < cfg.k));
    assert!(ma.iter().all(|m| (0.0..=1.0).contains(m)));
    let base = TrajClModel::<f64>::new(common::small_cfg(Mode::Base, Variant::Full), 0).unwrap();
    let pb = base.prepare(&batch(8, 1, &cfg)[0]).unwrap();
    assert!(base.point_masks(&pb).unwrap().is_none());
}

#[test]
fn prepare_checks_dimensions_and_labels() {
    let cfg = common::small_cfg(Mode::Trajcl, Variant::Full);
    let model = TrajClModel::<f64>::new(cfg.clone(), 0).unwrap();
    let mut s = batch(0, 1, &cfg).remove(0);
    s.label = 3;
    assert!(model.prepare(&s).is_err());
    let other = ModelConfig {
        traj_dim: 5,
        ..cfg.clone()
    };
    assert!(model.prepare(&batch(0, 1, &other)[0]).is_err());
    assert!(TrajClModel::<f64>::new(
        ModelConfig {
            kernel: 2,
            ..cfg.clone()
        },
        0
    )
    .is_err());
    assert!(TrajClModel::<f64>::new(ModelConfig { tau: 0.0, ..cfg }, 0).is_err());
}

#[test]
fn mode_and_variant_names_parse() {
    for m in Mode::ALL {
        assert_eq!(m.name().parse::<Mode>().unwrap(), m);
    }
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("nope".parse::<Variant>().is_err());
}
