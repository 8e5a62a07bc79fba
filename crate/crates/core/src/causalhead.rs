//! Classifier heads and the causal, confounding and intervention losses.

use diffcore::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrajError};

/// Weights of `λ·L_cau + φ·L_con + η·L_int`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub phi: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            phi: 0.5,
            eta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda, self.phi, self.eta]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite());
        if !ok {
            return Err(TrajError::config(format!(
                "loss weights must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn combine(&self, l_cau: f64, l_con: f64, l_int: f64) -> f64 {
        self.lambda * l_cau + self.phi * l_con + self.eta * l_int
    }
}

/// Two-layer MLP `d → d → c` with a ReLU hidden layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl HeadIds {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let b = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), Tensor::uniform(&[d, d], b, rng))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, d]))?,
            w2: store.add(format!("{prefix}.w2"), Tensor::uniform(&[d, classes], b, rng))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, classes]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> HeadNodes {
        HeadNodes {
            w1: g.param(store, self.w1),
            b1: g.param(store, self.b1),
            w2: g.param(store, self.w2),
            b2: g.param(store, self.b2),
        }
    }
}

/// Logits `b×c` for pooled features `z: b×d`.
pub fn mlp<T: Real>(g: &mut Graph<T>, head: &HeadNodes, z: NodeId) -> Result<NodeId> {
    let h = g.matmul(z, head.w1)?;
    let h = g.add_bias(h, head.b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, head.w2)?;
    Ok(g.add_bias(o, head.b2)?)
}

pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(TrajError::data(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        t.data_mut()[i * classes + y] = T::one();
    }
    Ok(t)
}

pub fn uniform_target<T: Real>(rows: usize, classes: usize) -> Tensor<T> {
    Tensor::full(&[rows, classes], T::one() / T::of(classes as f64))
}

/// `(logits, L_cau)` against the true labels.
pub fn classify_causal<T: Real>(
    g: &mut Graph<T>,
    head: &HeadNodes,
    z_alpha: NodeId,
    labels: &[usize],
) -> Result<(NodeId, NodeId)> {
    let logits = mlp(g, head, z_alpha)?;
    let c = g.value(logits).cols();
    let loss = g.cross_entropy(logits, &one_hot(labels, c)?)?;
    Ok((logits, loss))
}

/// `(logits, L_con)` against the uniform distribution.
pub fn classify_confound<T: Real>(
    g: &mut Graph<T>,
    head: &HeadNodes,
    z_beta: NodeId,
) -> Result<(NodeId, NodeId)> {
    let logits = mlp(g, head, z_beta)?;
    let (b, c) = (g.value(logits).rows(), g.value(logits).cols());
    let loss = g.cross_entropy(logits, &uniform_target(b, c))?;
    Ok((logits, loss))
}

/// Uniform random permutation of `0..b`.
pub fn shuffle_confound<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    perm
}

/// `(logits, L_int)` for `Z_α + Z_β[perm]`; labels follow the causal rows.
///
/// With `detach`, no gradient reaches the confounding branch through this term.
pub fn classify_intervened<T: Real>(
    g: &mut Graph<T>,
    head: &HeadNodes,
    z_alpha: NodeId,
    z_beta: NodeId,
    perm: &[usize],
    labels: &[usize],
    detach: bool,
) -> Result<(NodeId, NodeId)> {
    let src = if detach { g.detach(z_beta) } else { z_beta };
    let shuffled = g.gather_rows(src, perm)?;
    let mixed = g.add(z_alpha, shuffled)?;
    classify_causal(g, head, mixed, labels)
}

pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    l_cau: NodeId,
    l_con: NodeId,
    l_int: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    Ok(g.weighted_sum(&[
        (l_cau, T::of(w.lambda)),
        (l_con, T::of(w.phi)),
        (l_int, T::of(w.eta)),
    ])?)
}
