//! Dual sequence encoders: per-branch fusion convolutions followed by a GRU.
//!
//! Both branches share hyperparameters but own disjoint parameters, named
//! `alpha.*` (causal) and `beta.*` (confounding).

use diffcore::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use rand::Rng;

use crate::error::Result;

/// Parameter handles of one encoder branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchIds {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub gru_w: ParamId,
    pub gru_u: ParamId,
    pub gru_b: ParamId,
}

/// Graph nodes bound from a [`BranchIds`] for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BranchNodes {
    conv1_w: NodeId,
    conv1_b: NodeId,
    conv2_w: NodeId,
    conv2_b: NodeId,
    gru_w: NodeId,
    gru_u: NodeId,
    gru_b: NodeId,
}

impl BranchIds {
    /// Registers `{prefix}.conv1.*`, `{prefix}.conv2.*`, `{prefix}.gru.*` with
    /// fan-in scaled uniform initialization and zero biases.
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        f_in: usize,
        d: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let b1 = 1.0 / ((kernel * f_in) as f64).sqrt();
        let b2 = 1.0 / ((kernel * d) as f64).sqrt();
        let bg = 1.0 / (d as f64).sqrt();
        Ok(Self {
            conv1_w: store.add(
                format!("{prefix}.conv1.w"),
                Tensor::uniform(&[kernel, f_in, d], b1, rng),
            )?,
            conv1_b: store.add(format!("{prefix}.conv1.b"), Tensor::zeros(&[1, d]))?,
            conv2_w: store.add(
                format!("{prefix}.conv2.w"),
                Tensor::uniform(&[kernel, d, d], b2, rng),
            )?,
            conv2_b: store.add(format!("{prefix}.conv2.b"), Tensor::zeros(&[1, d]))?,
            gru_w: store.add(format!("{prefix}.gru.w"), Tensor::uniform(&[d, 3 * d], bg, rng))?,
            gru_u: store.add(format!("{prefix}.gru.u"), Tensor::uniform(&[d, 3 * d], bg, rng))?,
            gru_b: store.add(format!("{prefix}.gru.b"), Tensor::zeros(&[1, 3 * d]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 7] {
        [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.gru_w,
            self.gru_u,
            self.gru_b,
        ]
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> BranchNodes {
        BranchNodes {
            conv1_w: g.param(store, self.conv1_w),
            conv1_b: g.param(store, self.conv1_b),
            conv2_w: g.param(store, self.conv2_w),
            conv2_b: g.param(store, self.conv2_b),
            gru_w: g.param(store, self.gru_w),
            gru_u: g.param(store, self.gru_u),
            gru_b: g.param(store, self.gru_b),
        }
    }
}

/// Concatenates trajectory and context features along the feature axis.
pub fn concat_inputs<T: Real>(g: &mut Graph<T>, x: NodeId, e: NodeId) -> Result<NodeId> {
    Ok(g.concat(&[x, e], 1)?)
}

/// `relu(conv2(relu(conv1(input))))`, length preserved.
pub fn fuse_inputs<T: Real>(g: &mut Graph<T>, b: &BranchNodes, input: NodeId) -> Result<NodeId> {
    let h = g.conv1d(input, b.conv1_w, b.conv1_b)?;
    let h = g.relu(h)?;
    let h = g.conv1d(h, b.conv2_w, b.conv2_b)?;
    Ok(g.relu(h)?)
}

/// Full `n×d` GRU state sequence over the fused input.
pub fn encode<T: Real>(g: &mut Graph<T>, b: &BranchNodes, input: NodeId) -> Result<NodeId> {
    let fused = fuse_inputs(g, b, input)?;
    Ok(g.gru(fused, b.gru_w, b.gru_u, b.gru_b, None)?)
}

/// `(H_α, H_β)` from the causal and confounding branches on the same input.
pub fn encode_dual<T: Real>(
    g: &mut Graph<T>,
    alpha: &BranchNodes,
    beta: &BranchNodes,
    input: NodeId,
) -> Result<(NodeId, NodeId)> {
    Ok((encode(g, alpha, input)?, encode(g, beta, input)?))
}

/// Copies every tensor of branch `from` into branch `to`.
pub fn copy_branch<T: Real>(store: &mut ParamStore<T>, from: &BranchIds, to: &BranchIds) -> Result<()> {
    for (s, d) in from.ids().into_iter().zip(to.ids()) {
        let v = store.value(s).clone();
        store.set_value(d, v)?;
    }
    Ok(())
}
