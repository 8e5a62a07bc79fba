//! Forward values against naive-loop reimplementations.

#![allow(clippy::needless_range_loop)]

use diffcore::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn naive_conv(x: &[Vec<f64>], k: &[Vec<Vec<f64>>], b: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let ks = k.len();
    let pad = (ks / 2) as isize;
    let cout = b.len();
    let mut out = vec![vec![0.0; cout]; n];
    for t in 0..n {
        for o in 0..cout {
            let mut s = b[o];
            for (tap, kt) in k.iter().enumerate() {
                let src = t as isize + tap as isize - pad;
                if src < 0 || src >= n as isize {
                    continue;
                }
                for (c, kc) in kt.iter().enumerate() {
                    s += x[src as usize][c] * kc[o];
                }
            }
            out[t][o] = s;
        }
    }
    out
}

fn naive_gru_step(x: &[f64], h: &[f64], w: &Tensor<f64>, u: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let d = h.len();
    let pre = |gate: usize, j: usize, hin: &[f64]| {
        let col = gate * d + j;
        let mut s = b.at(0, col);
        for (i, xi) in x.iter().enumerate() {
            s += xi * w.at(i, col);
        }
        for (i, hi) in hin.iter().enumerate() {
            s += hi * u.at(i, col);
        }
        s
    };
    let z: Vec<f64> = (0..d).map(|j| sigmoid(pre(0, j, h))).collect();
    let r: Vec<f64> = (0..d).map(|j| sigmoid(pre(1, j, h))).collect();
    let rh: Vec<f64> = (0..d).map(|j| r[j] * h[j]).collect();
    (0..d)
        .map(|j| {
            let n = pre(2, j, &rh).tanh();
            (1.0 - z[j]) * h[j] + z[j] * n
        })
        .collect()
}

#[test]
fn conv1d_matches_sliding_window_loop() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let ks = [1, 3, 5][rng.gen_range(0..3)];
        let x = Tensor::<f64>::uniform(&[n, cin], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[ks, cin, cout], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[1, cout], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xn, kn, bn) = (
            g.constant(x.clone()),
            g.constant(k.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv1d(xn, kn, bn).unwrap();

        let xr: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
        let kr: Vec<Vec<Vec<f64>>> = (0..ks)
            .map(|t| {
                (0..cin)
                    .map(|c| (0..cout).map(|o| k.data()[(t * cin + c) * cout + o]).collect())
                    .collect()
            })
            .collect();
        let want = naive_conv(&xr, &kr, b.data());
        for t in 0..n {
            for o in 0..cout {
                assert!((g.value(y).at(t, o) - want[t][o]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn conv1d_fixed_cases() {
    // 5×2 input, brute-force oracle frozen by hand for a 3-tap kernel.
    let x = Tensor::matrix(5, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 0.0, 0.0, -2.0, 1.5, 1.0]).unwrap();
    let k = Tensor::new(vec![3, 2, 1], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
    let b = Tensor::matrix(1, 1, vec![0.5]).unwrap();
    let mut g = Graph::new();
    let (xn, kn, bn) = (g.constant(x), g.constant(k), g.constant(b));
    let y = g.conv1d(xn, kn, bn).unwrap();
    // out[t] = 0.5 + x[t-1][0] + x[t][1] - x[t+1][0]
    assert_eq!(g.value(y).data(), &[3.5, -1.0, -0.5, 0.0, 1.5]);

    // Averaging kernel keeps interior of a constant signal; zero kernel passes the bias.
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::full(&[6, 2], 4.0));
    let avg = g.constant(Tensor::full(&[3, 2, 3], 1.0 / 6.0));
    let zb = g.constant(Tensor::zeros(&[1, 3]));
    let y = g.conv1d(x, avg, zb).unwrap();
    for t in 1..5 {
        for o in 0..3 {
            assert!((g.value(y).at(t, o) - 4.0).abs() < 1e-12);
        }
    }
    let zk = g.constant(Tensor::zeros(&[3, 2, 3]));
    let bias = g.constant(Tensor::matrix(1, 3, vec![0.1, -2.0, 7.0]).unwrap());
    let y = g.conv1d(x, zk, bias).unwrap();
    for t in 0..6 {
        assert_eq!(g.value(y).row(t), &[0.1, -2.0, 7.0]);
    }

    let even = g.constant(Tensor::zeros(&[2, 2, 3]));
    assert!(g.conv1d(x, even, bias).unwrap_err().to_string().contains("odd"));
}

#[test]
fn gru_single_step_matches_cell_equations() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rng.gen_range(1..5);
        let d = rng.gen_range(1..5);
        let x = Tensor::<f64>::uniform(&[1, f], 1.0, &mut rng);
        let h0 = Tensor::<f64>::uniform(&[1, d], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[f, 3 * d], 1.0, &mut rng);
        let u = Tensor::<f64>::uniform(&[d, 3 * d], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[1, 3 * d], 1.0, &mut rng);
        let want = naive_gru_step(x.row(0), h0.row(0), &w, &u, &b);
        let mut g = Graph::new();
        let nodes = [x, w, u, b, h0].map(|t| g.constant(t));
        let hs = g
            .gru(nodes[0], nodes[1], nodes[2], nodes[3], Some(nodes[4]))
            .unwrap();
        for j in 0..d {
            assert!((g.value(hs).at(0, j) - want[j]).abs() < 1e-9);
        }
    }
}

#[test]
fn gru_scalar_hand_computation() {
    // Gate order z, r, n; values from a scripted scalar evaluation.
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::scalar(0.5));
    let w = g.constant(Tensor::matrix(1, 3, vec![0.3, 0.7, -0.6]).unwrap());
    let u = g.constant(Tensor::matrix(1, 3, vec![-0.4, 0.2, 0.9]).unwrap());
    let b = g.constant(Tensor::matrix(1, 3, vec![0.1, -0.3, 0.05]).unwrap());
    let h0 = g.constant(Tensor::scalar(0.2));
    let hs = g.gru(x, w, u, b, Some(h0)).unwrap();
    assert!((g.value(hs).item() - 0.007611130625592877).abs() < 1e-15);
}

#[test]
fn gru_with_zero_weights_stays_at_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::full(&[7, 3], 2.5));
    let w = g.constant(Tensor::zeros(&[3, 12]));
    let u = g.constant(Tensor::zeros(&[4, 12]));
    let b = g.constant(Tensor::zeros(&[1, 12]));
    let hs = g.gru(x, w, u, b, None).unwrap();
    assert!(g.value(hs).data().iter().all(|&v| v == 0.0));

    let empty = g.constant(Tensor::zeros(&[0, 3]));
    assert!(g.gru(empty, w, u, b, None).is_err());
}

#[test]
fn gumbel_softmax_matches_scalar_loop() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..5);
        let k = rng.gen_range(1..6);
        let logits = Tensor::<f64>::uniform(&[n, k], 2.0, &mut rng);
        let noise = diffcore::noise::gumbel_matrix::<f64, _>(n, k, &mut rng);
        let tau = 0.5;
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let s = g.gumbel_softmax(l, tau, Some(&noise)).unwrap();
        for i in 0..n {
            let e: Vec<f64> = (0..k)
                .map(|j| ((logits.at(i, j) + noise.at(i, j)) / tau).exp())
                .collect();
            let z: f64 = e.iter().sum();
            for j in 0..k {
                assert!((g.value(s).at(i, j) - e[j] / z).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn gumbel_softmax_limits() {
    let pi = [0.1, 0.2, 0.3, 0.4];
    let mut g = Graph::new();
    let l = g.constant(Tensor::matrix(1, 4, pi.iter().map(|p: &f64| p.ln()).collect()).unwrap());
    let s = g.gumbel_softmax(l, 1.0, None).unwrap();
    for (a, b) in g.value(s).data().iter().zip(pi) {
        assert!((a - b).abs() < 1e-12);
    }
    let l = g.constant(Tensor::matrix(1, 3, vec![0.3, 1.0, 0.5]).unwrap());
    let s = g.gumbel_softmax(l, 0.01, None).unwrap();
    for (a, b) in g.value(s).data().iter().zip([0.0, 1.0, 0.0]) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_agrees_with_naive_formula() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.gen_range(1..5);
        let c = rng.gen_range(2..6);
        let logits = Tensor::<f64>::uniform(&[b, c], 3.0, &mut rng);
        let mut target = Tensor::zeros(&[b, c]);
        for i in 0..b {
            target.row_mut(i)[rng.gen_range(0..c)] = 1.0;
        }
        let mut naive = 0.0;
        for i in 0..b {
            let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            for j in 0..c {
                naive -= target.at(i, j) * (logits.at(i, j).exp() / z).ln();
            }
        }
        naive /= b as f64;
        let mut g = Graph::new();
        let l = g.constant(logits);
        let ce = g.cross_entropy(l, &target).unwrap();
        assert!((g.value(ce).item() - naive).abs() < 1e-9);
    }
}

#[test]
fn confident_correct_logit_gives_small_loss() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::matrix(1, 3, vec![20.0, 0.0, 0.0]).unwrap());
    let ce = g
        .cross_entropy(l, &Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap())
        .unwrap();
    assert!(g.value(ce).item() < 1e-3);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::uniform(&[9, 3], 1.0, &mut rng));
        let w = g.constant(Tensor::uniform(&[3, 12], 1.0, &mut rng));
        let u = g.constant(Tensor::uniform(&[4, 12], 1.0, &mut rng));
        let b = g.constant(Tensor::uniform(&[1, 12], 1.0, &mut rng));
        let hs = g.gru(x, w, u, b, None).unwrap();
        g.value(hs).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        tau in 0.05f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::<f64>::uniform(&[rows, cols], 30.0, &mut rng);
        let noise = diffcore::noise::gumbel_matrix::<f64, _>(rows, cols, &mut rng);
        let mut g = Graph::new();
        let l = g.constant(logits);
        let s = g.softmax(l).unwrap();
        let gs = g.gumbel_softmax(l, tau, Some(&noise)).unwrap();
        for id in [s, gs] {
            let v = g.value(id);
            for i in 0..rows {
                prop_assert!(v.row(i).iter().all(|&p| p >= 0.0));
                prop_assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
