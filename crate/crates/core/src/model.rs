//! The assembled network: encoders, codebook alignment and heads, with the
//! ablation variants and the single-branch comparison modes.

use diffcore::{noise, Graph, NodeId, ParamStore, Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::causalhead::{self, HeadIds, HeadNodes, LossWeights};
use crate::encoder::{self, BranchIds, BranchNodes};
use crate::envalign::{self, CodebookIds, CodebookNodes, MaskMode, Prototypes, SoftMasks};
use crate::error::{Result, TrajError};
use crate::seed;
use crate::trajdata::Sample;

/// Comparison setting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One branch on trajectory features, mean pooling, cross-entropy.
    Base,
    /// One branch on trajectory and context features, mean pooling, cross-entropy.
    Env,
    /// Full dual-branch model with codebook alignment and the three losses.
    #[default]
    Trajcl,
}

/// Ablation of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Codebook prototypes frozen at their random initialization.
    NoEc,
    /// Intervention loss weight forced to zero.
    NoCi,
    /// Masks fixed at 0.5.
    NoDise,
    /// Context replaced by zeros everywhere.
    NoEnv,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Base, Mode::Env, Mode::Trajcl];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::Env => "env",
            Mode::Trajcl => "trajcl",
        }
    }
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoEc,
        Variant::NoCi,
        Variant::NoDise,
        Variant::NoEnv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEc => "no_ec",
            Variant::NoCi => "no_ci",
            Variant::NoDise => "no_dise",
            Variant::NoEnv => "no_env",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = TrajError;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrajError::config(format!("unknown mode {s:?}, expected base, env or trajcl")))
    }
}

impl std::str::FromStr for Variant {
    type Err = TrajError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            TrajError::config(format!(
                "unknown variant {s:?}, expected full, no_ec, no_ci, no_dise or no_env"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub traj_dim: usize,
    pub env_dim: usize,
    pub d: usize,
    pub k: usize,
    pub classes: usize,
    pub kernel: usize,
    pub tau: f64,
    pub share_heads: bool,
    pub detach_intervention: bool,
    pub mode: Mode,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.traj_dim == 0 || self.env_dim == 0 || self.d == 0 || self.k == 0 {
            return Err(TrajError::config("traj_dim, env_dim, d and k must be positive"));
        }
        if self.classes < 2 {
            return Err(TrajError::config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(TrajError::config(format!(
                "kernel size {} must be odd",
                self.kernel
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(TrajError::config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.mode {
            Mode::Base => self.traj_dim,
            _ => self.traj_dim + self.env_dim,
        }
    }

    fn dual(&self) -> bool {
        self.mode == Mode::Trajcl
    }
}

/// One instance converted to the model's precision and input layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared<T> {
    /// `n × input_dim`
    pub input: Tensor<T>,
    /// `n × env_dim`
    pub env: Tensor<T>,
    pub label: usize,
}

/// Explicit randomness of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise<T> {
    /// One `n_i × k` Gumbel matrix per instance.
    pub gumbel: Vec<Tensor<T>>,
    pub perm: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ModelIds {
    alpha: BranchIds,
    beta: Option<BranchIds>,
    codebook: Option<CodebookIds>,
    shared: HeadIds,
    conf: Option<HeadIds>,
    int: Option<HeadIds>,
}

struct Bound {
    alpha: BranchNodes,
    beta: Option<BranchNodes>,
    codebook: Option<(CodebookNodes, Prototypes)>,
    shared: HeadNodes,
    conf: Option<HeadNodes>,
    int: Option<HeadNodes>,
}

/// Pooled representations and masks for a batch.
#[derive(Clone, Debug)]
pub struct Representation {
    /// `b×d`
    pub z_alpha: NodeId,
    /// `b×d`, dual-branch mode only.
    pub z_beta: Option<NodeId>,
    /// Per-instance masks, dual-branch mode only.
    pub masks: Vec<SoftMasks>,
    /// `b×c` logits of the shared head on `z_alpha`.
    pub logits: NodeId,
}

#[derive(Clone, Debug)]
pub struct Losses {
    pub l_cau: NodeId,
    pub l_con: Option<NodeId>,
    pub l_int: Option<NodeId>,
    pub total: NodeId,
}

pub struct TrajClModel<T: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Real> TrajClModel<T> {
    /// Seeded initialization; parameter registration order is fixed.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed, &[seed::stream::INIT]);
        let mut store = ParamStore::new();
        let (f, d, ks) = (cfg.input_dim(), cfg.d, cfg.kernel);
        let alpha = BranchIds::register(&mut store, "alpha", f, d, ks, &mut rng)?;
        let (beta, codebook) = if cfg.dual() {
            let beta = BranchIds::register(&mut store, "beta", f, d, ks, &mut rng)?;
            let cb = CodebookIds::register(&mut store, cfg.k, d, cfg.env_dim, &mut rng)?;
            (Some(beta), Some(cb))
        } else {
            (None, None)
        };
        let shared = HeadIds::register(&mut store, "heads.shared", d, cfg.classes, &mut rng)?;
        let conf = if cfg.dual() {
            Some(HeadIds::register(
                &mut store,
                "heads.conf",
                d,
                cfg.classes,
                &mut rng,
            )?)
        } else {
            None
        };
        let int = if cfg.dual() && !cfg.share_heads {
            Some(HeadIds::register(
                &mut store,
                "heads.int",
                d,
                cfg.classes,
                &mut rng,
            )?)
        } else {
            None
        };
        if let (Variant::NoEc, Some(cb)) = (cfg.variant, &codebook) {
            store.set_frozen(cb.c, true);
        }
        Ok(Self {
            cfg,
            store,
            ids: ModelIds {
                alpha,
                beta,
                codebook,
                shared,
                conf,
                int,
            },
        })
    }

    pub fn alpha_ids(&self) -> &BranchIds {
        &self.ids.alpha
    }

    pub fn beta_ids(&self) -> Option<&BranchIds> {
        self.ids.beta.as_ref()
    }

    pub fn codebook_ids(&self) -> Option<&CodebookIds> {
        self.ids.codebook.as_ref()
    }

    pub fn shared_head_ids(&self) -> &HeadIds {
        &self.ids.shared
    }

    pub fn conf_head_ids(&self) -> Option<&HeadIds> {
        self.ids.conf.as_ref()
    }

    /// Loss weights after applying the variant and mode wiring.
    pub fn effective_weights(&self, w: &LossWeights) -> LossWeights {
        match (self.cfg.mode, self.cfg.variant) {
            (Mode::Trajcl, Variant::NoCi) => LossWeights { eta: 0.0, ..*w },
            (Mode::Trajcl, _) => *w,
            _ => LossWeights {
                lambda: 1.0,
                phi: 0.0,
                eta: 0.0,
            },
        }
    }

    /// Casts a normalized sample and lays out the encoder input for this mode.
    pub fn prepare(&self, s: &Sample) -> Result<Prepared<T>> {
        let n = s.len();
        if s.traj.cols() != self.cfg.traj_dim || s.env.cols() != self.cfg.env_dim || s.env.rows() != n {
            return Err(TrajError::data(format!(
                "sample {} has shapes {:?}/{:?}, model expects n×{} and n×{}",
                s.id,
                s.traj.shape(),
                s.env.shape(),
                self.cfg.traj_dim,
                self.cfg.env_dim
            )));
        }
        if s.label >= self.cfg.classes {
            return Err(TrajError::data(format!(
                "sample {} label {} out of range for {} classes",
                s.id, s.label, self.cfg.classes
            )));
        }
        let env: Tensor<T> = if self.cfg.variant == Variant::NoEnv && self.cfg.dual() {
            Tensor::zeros(s.env.shape())
        } else {
            s.env.cast()
        };
        let input = match self.cfg.mode {
            Mode::Base => s.traj.cast(),
            _ => {
                let f = self.cfg.input_dim();
                let mut data = Vec::with_capacity(n * f);
                for i in 0..n {
                    data.extend(s.traj.row(i).iter().map(|v| T::of(*v)));
                    data.extend_from_slice(env.row(i));
                }
                Tensor::matrix(n, f, data)?
            }
        };
        Ok(Prepared {
            input,
            env,
            label: s.label,
        })
    }

    pub fn prepare_all(&self, samples: &[Sample]) -> Result<Vec<Prepared<T>>> {
        samples.iter().map(|s| self.prepare(s)).collect()
    }

    /// Draws Gumbel noise for every instance and a batch permutation.
    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: &[&Prepared<T>], rng: &mut R) -> StepNoise<T> {
        let gumbel = if self.cfg.dual() {
            batch
                .iter()
                .map(|p| noise::gumbel_matrix(p.input.rows(), self.cfg.k, rng))
                .collect()
        } else {
            Vec::new()
        };
        StepNoise {
            gumbel,
            perm: causalhead::shuffle_confound(batch.len(), rng),
        }
    }

    fn bind(&self, s: &ParamStore<T>, g: &mut Graph<T>) -> Result<Bound> {
        let alpha = self.ids.alpha.bind(g, s);
        let beta = self.ids.beta.as_ref().map(|b| b.bind(g, s));
        let codebook = match &self.ids.codebook {
            Some(cb) if self.cfg.variant != Variant::NoDise => {
                let nodes = cb.bind(g, s);
                let protos = envalign::prototypes(g, &nodes)?;
                Some((nodes, protos))
            }
            _ => None,
        };
        Ok(Bound {
            alpha,
            beta,
            codebook,
            shared: self.ids.shared.bind(g, s),
            conf: self.ids.conf.as_ref().map(|h| h.bind(g, s)),
            int: self.ids.int.as_ref().map(|h| h.bind(g, s)),
        })
    }

    fn represent_bound(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &[&Prepared<T>],
        noise: Option<&StepNoise<T>>,
        mode: MaskMode,
    ) -> Result<Representation> {
        if batch.is_empty() {
            return Err(TrajError::data("empty batch"));
        }
        let tau = T::of(self.cfg.tau);
        let mut za = Vec::with_capacity(batch.len());
        let mut zb = Vec::with_capacity(batch.len());
        let mut masks = Vec::new();
        for (i, p) in batch.iter().enumerate() {
            let x = g.constant(p.input.clone());
            match &bound.beta {
                None => {
                    let h = encoder::encode(g, &bound.alpha, x)?;
                    za.push(g.mean_axis(h, 0)?);
                }
                Some(beta) => {
                    let (ha, hb) = encoder::encode_dual(g, &bound.alpha, beta, x)?;
                    let m = match &bound.codebook {
                        Some((cb, protos)) => {
                            let e = g.constant(p.env.clone());
                            let gn = noise.and_then(|n| n.gumbel.get(i));
                            envalign::soft_masks(g, cb, protos, e, tau, gn, mode)?
                        }
                        None => envalign::fixed_masks(g, p.input.rows()),
                    };
                    let (a, b) = envalign::disentangle(g, ha, hb, &m)?;
                    za.push(a);
                    zb.push(b);
                    masks.push(m);
                }
            }
        }
        let z_alpha = g.concat(&za, 0)?;
        let z_beta = if zb.is_empty() {
            None
        } else {
            Some(g.concat(&zb, 0)?)
        };
        let logits = causalhead::mlp(g, &bound.shared, z_alpha)?;
        Ok(Representation {
            z_alpha,
            z_beta,
            masks,
            logits,
        })
    }

    /// Pooled representations; eval mode uses hard prototype selection.
    pub fn represent(
        &self,
        g: &mut Graph<T>,
        batch: &[&Prepared<T>],
        noise: Option<&StepNoise<T>>,
        mode: MaskMode,
    ) -> Result<Representation> {
        self.represent_in(&self.store, g, batch, noise, mode)
    }

    /// [`Self::represent`] with parameter values taken from `store`, which
    /// must have this model's layout.
    pub fn represent_in(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        batch: &[&Prepared<T>],
        noise: Option<&StepNoise<T>>,
        mode: MaskMode,
    ) -> Result<Representation> {
        let bound = self.bind(store, g)?;
        self.represent_bound(g, &bound, batch, noise, mode)
    }

    /// Builds the full training objective for a batch.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        batch: &[&Prepared<T>],
        noise: Option<&StepNoise<T>>,
        weights: &LossWeights,
    ) -> Result<(Representation, Losses)> {
        self.loss_in(&self.store, g, batch, noise, weights)
    }

    /// [`Self::loss`] with parameter values taken from `store`.
    pub fn loss_in(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        batch: &[&Prepared<T>],
        noise: Option<&StepNoise<T>>,
        weights: &LossWeights,
    ) -> Result<(Representation, Losses)> {
        let bound = self.bind(store, g)?;
        let rep = self.represent_bound(g, &bound, batch, noise, MaskMode::Train)?;
        let labels: Vec<usize> = batch.iter().map(|p| p.label).collect();
        let target = causalhead::one_hot(&labels, self.cfg.classes)?;
        let l_cau = g.cross_entropy(rep.logits, &target)?;
        let w = self.effective_weights(weights);
        let losses = match (rep.z_beta, &bound.conf) {
            (Some(zb), Some(conf)) => {
                let (_, l_con) = causalhead::classify_confound(g, conf, zb)?;
                let identity: Vec<usize>;
                let perm = match noise {
                    Some(n) => &n.perm[..],
                    None => {
                        identity = (0..batch.len()).collect();
                        &identity[..]
                    }
                };
                if perm.len() != batch.len() {
                    return Err(TrajError::data(format!(
                        "permutation of length {} for batch of {}",
                        perm.len(),
                        batch.len()
                    )));
                }
                let head = bound.int.as_ref().unwrap_or(&bound.shared);
                let (_, l_int) = causalhead::classify_intervened(
                    g,
                    head,
                    rep.z_alpha,
                    zb,
                    perm,
                    &labels,
                    self.cfg.detach_intervention,
                )?;
                let total = causalhead::total_loss(g, l_cau, l_con, l_int, &w)?;
                Losses {
                    l_cau,
                    l_con: Some(l_con),
                    l_int: Some(l_int),
                    total,
                }
            }
            _ => Losses {
                l_cau,
                l_con: None,
                l_int: None,
                total: g.weighted_sum(&[(l_cau, T::one())])?,
            },
        };
        Ok((rep, losses))
    }

    /// Eval-mode predicted classes and `Z_α` rows.
    pub fn infer(&self, batch: &[&Prepared<T>]) -> Result<(Vec<usize>, Tensor<T>)> {
        let mut g = Graph::new();
        let rep = self.represent(&mut g, batch, None, MaskMode::Eval)?;
        Ok((g.value(rep.logits).argmax_rows(), g.value(rep.z_alpha).clone()))
    }

    /// Eval-mode prototype index and `M_α` per point; `None` outside the full dual model.
    pub fn point_masks(&self, p: &Prepared<T>) -> Result<Option<(Vec<usize>, Vec<f64>)>> {
        if !self.cfg.dual() || self.cfg.variant == Variant::NoDise {
            return Ok(None);
        }
        let mut g = Graph::new();
        let rep = self.represent(&mut g, &[p], None, MaskMode::Eval)?;
        let m = &rep.masks[0];
        let ids = g.value(m.selection).argmax_rows();
        let ma = g.value(m.m_alpha).data().iter().map(|v| v.f64()).collect();
        Ok(Some((ids, ma)))
    }
}
