//! Environment alignment: a learnable prototype codebook, per-prototype
//! confounding degrees, Gumbel-Softmax cross-attention from context to
//! prototypes, the resulting soft-masks, and masked mean pooling.
//!
//! ```text
//! V   = sigmoid(C·W_v + b_v)                 k×1
//! Q   = E·W_q + b_q                          n×d
//! K   = C·W_k + b_k                          k×d
//! S   = GumbelSoftmax(Q·Kᵀ/√d, τ)            n×k   (argmax one-hot in eval)
//! M_α = S·V,  M_β = 1 − M_α                  n×1
//! Z_α = mean_t(H_α ⊙ M_α),  Z_β = mean_t(H_β ⊙ M_β)
//! ```

use diffcore::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use rand::Rng;

use crate::error::Result;

/// Whether prototype selection is the soft Gumbel sample or a hard argmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodebookIds {
    pub c: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct CodebookNodes {
    pub c: NodeId,
    w_v: NodeId,
    b_v: NodeId,
    w_q: NodeId,
    b_q: NodeId,
    w_k: NodeId,
    b_k: NodeId,
}

impl CodebookIds {
    /// Prototypes start as N(0, 1/d); projections use fan-in scaled uniform draws.
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        k: usize,
        d: usize,
        m_env: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let sd = 1.0 / (d as f64).sqrt();
        let sm = 1.0 / (m_env as f64).sqrt();
        Ok(Self {
            c: store.add("codebook.c", Tensor::randn(&[k, d], sd, rng))?,
            w_v: store.add("codebook.w_v", Tensor::uniform(&[d, 1], sd, rng))?,
            b_v: store.add("codebook.b_v", Tensor::zeros(&[1, 1]))?,
            w_q: store.add("codebook.w_q", Tensor::uniform(&[m_env, d], sm, rng))?,
            b_q: store.add("codebook.b_q", Tensor::zeros(&[1, d]))?,
            w_k: store.add("codebook.w_k", Tensor::uniform(&[d, d], sd, rng))?,
            b_k: store.add("codebook.b_k", Tensor::zeros(&[1, d]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 7] {
        [self.c, self.w_v, self.b_v, self.w_q, self.b_q, self.w_k, self.b_k]
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> CodebookNodes {
        CodebookNodes {
            c: g.param(store, self.c),
            w_v: g.param(store, self.w_v),
            b_v: g.param(store, self.b_v),
            w_q: g.param(store, self.w_q),
            b_q: g.param(store, self.b_q),
            w_k: g.param(store, self.w_k),
            b_k: g.param(store, self.b_k),
        }
    }
}

/// Per-batch quantities that depend only on the codebook.
#[derive(Clone, Copy, Debug)]
pub struct Prototypes {
    /// `k×1` confounding degrees.
    pub v: NodeId,
    /// `k×d` keys.
    pub keys: NodeId,
    d: usize,
}

/// `V = sigmoid(C·W_v + b_v)`, one degree in (0, 1) per prototype.
pub fn confound_degrees<T: Real>(g: &mut Graph<T>, cb: &CodebookNodes) -> Result<NodeId> {
    let raw = g.matmul(cb.c, cb.w_v)?;
    let raw = g.add_bias(raw, cb.b_v)?;
    Ok(g.sigmoid(raw)?)
}

pub fn prototypes<T: Real>(g: &mut Graph<T>, cb: &CodebookNodes) -> Result<Prototypes> {
    let v = confound_degrees(g, cb)?;
    let keys = g.matmul(cb.c, cb.w_k)?;
    let keys = g.add_bias(keys, cb.b_k)?;
    let d = g.value(cb.c).cols();
    Ok(Prototypes { v, keys, d })
}

/// Masks for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct SoftMasks {
    /// `n×1` confounding mask.
    pub m_alpha: NodeId,
    /// `n×1` causal mask, `1 − M_α`.
    pub m_beta: NodeId,
    /// `n×k` prototype weights (one-hot rows in eval mode).
    pub selection: NodeId,
}

/// Computes `M_α`, `M_β` for context `e: n×m`.
///
/// In train mode `noise` holds the `n×k` Gumbel draws (`None` = zero noise).
/// In eval mode the selection is the rowwise argmax of the attention scores
/// and `noise` is ignored.
pub fn soft_masks<T: Real>(
    g: &mut Graph<T>,
    cb: &CodebookNodes,
    protos: &Prototypes,
    e: NodeId,
    tau: T,
    noise: Option<&Tensor<T>>,
    mode: MaskMode,
) -> Result<SoftMasks> {
    let q = g.matmul(e, cb.w_q)?;
    let q = g.add_bias(q, cb.b_q)?;
    let scores = g.matmul_nt(q, protos.keys)?;
    let scores = g.scale(scores, T::one() / T::of(protos.d as f64).sqrt())?;
    let selection = match mode {
        MaskMode::Train => g.gumbel_softmax(scores, tau, noise)?,
        MaskMode::Eval => {
            let a = g.value(scores);
            let mut hard = Tensor::zeros(a.shape());
            let k = a.cols();
            for (i, j) in a.argmax_rows().into_iter().enumerate() {
                hard.data_mut()[i * k + j] = T::one();
            }
            g.constant(hard)
        }
    };
    let m_alpha = g.matmul(selection, protos.v)?;
    let m_beta = g.affine(m_alpha, -T::one(), T::one())?;
    Ok(SoftMasks {
        m_alpha,
        m_beta,
        selection,
    })
}

/// Constant masks `M_α = M_β = 0.5` for an `n`-step sequence.
pub fn fixed_masks<T: Real>(g: &mut Graph<T>, n: usize) -> SoftMasks {
    let half = g.constant(Tensor::full(&[n, 1], T::of(0.5)));
    SoftMasks {
        m_alpha: half,
        m_beta: half,
        selection: half,
    }
}

/// `(Z_α, Z_β)`, each `1×d`: masked states averaged over time.
pub fn disentangle<T: Real>(
    g: &mut Graph<T>,
    h_alpha: NodeId,
    h_beta: NodeId,
    masks: &SoftMasks,
) -> Result<(NodeId, NodeId)> {
    let a = g.scale_rows(h_alpha, masks.m_alpha)?;
    let b = g.scale_rows(h_beta, masks.m_beta)?;
    Ok((g.mean_axis(a, 0)?, g.mean_axis(b, 0)?))
}
