//! Mini-batch training with step decay, early stopping and best-validation
//! checkpoints.
//!
//! All randomness is keyed by the training seed: initialization, the
//! per-epoch shuffle `(seed, epoch)`, and the Gumbel noise plus intervention
//! permutation `(seed, epoch, batch)`. Two runs with the same data and config
//! produce identical reports and checkpoint bytes.

use std::fmt::Write as _;

use diffcore::{AdamConfig, Checkpoint, DiffError, Graph, Real};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::causalhead::LossWeights;
use crate::error::{Result, TrajError};
use crate::model::{Mode, ModelConfig, Prepared, TrajClModel, Variant};
use crate::seed::{self, stream};
use crate::trajdata::{FeatureConfig, NormStats, Sample, TrajInstance, CONTEXT_DIM};

pub const CHECKPOINT_FORMAT: &str = "trajcl-model";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub d: usize,
    pub k: usize,
    pub kernel: usize,
    pub tau: f64,
    /// Per-epoch multiplier on τ; 1 keeps it constant.
    pub tau_decay: f64,
    pub tau_min: f64,
    pub share_heads: bool,
    pub detach_intervention: bool,
    pub mode: Mode,
    pub variant: Variant,
    pub features: FeatureConfig,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            lr_decay: 0.1,
            decay_every: 30,
            patience: 20,
            batch_size: 256,
            max_epochs: 150,
            seed: 0,
            weights: LossWeights::default(),
            d: 64,
            k: 50,
            kernel: 3,
            tau: 1.0,
            tau_decay: 1.0,
            tau_min: 0.1,
            share_heads: true,
            detach_intervention: false,
            mode: Mode::Trajcl,
            variant: Variant::Full,
            features: FeatureConfig { kinematics: true },
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrajError::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1");
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("patience, batch_size and max_epochs must be positive");
        }
        if !(self.tau_decay > 0.0 && self.tau_decay <= 1.0 && self.tau_min > 0.0) {
            return bad("tau_decay must lie in (0, 1] and tau_min must be positive");
        }
        self.weights.validate()
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn tau_at(&self, epoch: usize) -> f64 {
        (self.tau * self.tau_decay.powi(epoch as i32)).max(self.tau_min.min(self.tau))
    }

    pub fn model_config(&self, traj_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            traj_dim,
            env_dim: CONTEXT_DIM,
            d: self.d,
            k: self.k,
            classes,
            kernel: self.kernel,
            tau: self.tau,
            share_heads: self.share_heads,
            detach_intervention: self.detach_intervention,
            mode: self.mode,
            variant: self.variant,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cau: f64,
    pub l_con: Option<f64>,
    pub l_int: Option<f64>,
    pub total: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stop: StopReason,
}

impl TrainReport {
    /// Per-epoch rows followed by one `#`-prefixed summary line.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::from("epoch,l_cau,l_con,l_int,total,val_acc,lr\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.l_cau,
                opt(r.l_con),
                opt(r.l_int),
                r.total,
                r.val_acc,
                r.lr
            );
        }
        let _ = writeln!(
            s,
            "# best_epoch={} best_val_acc={} stop={} epochs_run={}",
            self.best_epoch,
            self.best_val_acc,
            self.stop.name(),
            self.epochs.len()
        );
        s
    }
}

/// Metadata stored alongside the weights so a checkpoint is self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub model: ModelConfig,
    pub norm: NormStats,
}

/// A model restored from (or about to become) a checkpoint.
pub struct Trained {
    pub model: TrajClModel<f32>,
    pub norm: NormStats,
}

impl Trained {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(TrajError::data(format!(
                "not a model checkpoint: format {:?}",
                meta.format
            )));
        }
        let mut model = TrajClModel::new(meta.model, 0)?;
        ck.load_into(&mut model.store)?;
        Ok(Self {
            model,
            norm: meta.norm,
        })
    }

    pub fn predict(&self, instances: &[TrajInstance]) -> Result<Vec<usize>> {
        let samples = self.norm.apply_all(instances)?;
        let prepared = self.model.prepare_all(&samples)?;
        predict_prepared(&self.model, &prepared)
    }

    /// Fraction of correctly classified instances.
    pub fn accuracy(&self, instances: &[TrajInstance]) -> Result<f64> {
        let preds = self.predict(instances)?;
        let labels: Vec<usize> = instances.iter().map(|i| i.label).collect();
        Ok(accuracy(&preds, &labels))
    }
}

const EVAL_CHUNK: usize = 256;

fn predict_prepared<T: Real>(model: &TrajClModel<T>, prepared: &[Prepared<T>]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(prepared.len());
    let refs: Vec<&Prepared<T>> = prepared.iter().collect();
    for chunk in refs.chunks(EVAL_CHUNK) {
        preds.extend(model.infer(chunk)?.0);
    }
    Ok(preds)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// `m[label][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

fn n_classes(sets: &[&[TrajInstance]]) -> usize {
    sets.iter()
        .flat_map(|s| s.iter().map(|i| i.label + 1))
        .max()
        .unwrap_or(0)
        .max(2)
}

/// Trains on `train`, selecting the epoch with the best accuracy on `val`.
pub fn train(
    train: &[TrajInstance],
    val: &[TrajInstance],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrajError::data(
            "training needs non-empty train and validation sets",
        ));
    }
    let norm = NormStats::fit(train, cfg.features)?;
    let classes = n_classes(&[train, val]);
    let mcfg = cfg.model_config(norm.traj_dim(), classes);
    let train_s = norm.apply_all(train)?;
    let val_s = norm.apply_all(val)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&train_s, &val_s, mcfg, norm, cfg),
        Precision::F64 => train_typed::<f64>(&train_s, &val_s, mcfg, norm, cfg),
    }
}

fn train_typed<T: Real>(
    train: &[Sample],
    val: &[Sample],
    mcfg: ModelConfig,
    norm: NormStats,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    let mut model = TrajClModel::<T>::new(mcfg.clone(), cfg.seed)?;
    let train_p = model.prepare_all(train)?;
    let val_p = model.prepare_all(val)?;
    let val_labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    let meta = serde_json::to_string(&CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        model: mcfg,
        norm,
    })?;

    let mut order: Vec<usize> = (0..train_p.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        model.cfg.tau = cfg.tau_at(epoch);
        let adam = AdamConfig::with_lr(lr);
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, &[stream::SHUFFLE, epoch as u64]));

        let mut sums = [0.0f64; 4];
        let mut has_aux = false;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared<T>> = idx.iter().map(|&i| &train_p[i]).collect();
            let mut rng = seed::rng(cfg.seed, &[stream::GUMBEL, epoch as u64, b as u64]);
            let noise = model.sample_noise(&batch, &mut rng);
            let mut g = Graph::new();
            let non_finite = |model: &TrajClModel<T>| TrajError::NonFiniteLoss {
                epoch,
                batch: b,
                norms: format_norms(&model.store.norms()),
            };
            let losses = match model.loss(&mut g, &batch, Some(&noise), &cfg.weights) {
                Ok((_, l)) => l,
                Err(TrajError::Diff(DiffError::NonFinite { .. })) => return Err(non_finite(&model)),
                Err(e) => return Err(e),
            };
            let total = g.value(losses.total).item().f64();
            if !total.is_finite() {
                return Err(non_finite(&model));
            }
            g.backward(losses.total)?;
            model.store.zero_grads();
            g.accumulate_param_grads(&mut model.store);
            model.store.adam_step(&adam);

            let w = batch.len() as f64;
            sums[0] += w * g.value(losses.l_cau).item().f64();
            if let (Some(c), Some(i)) = (losses.l_con, losses.l_int) {
                has_aux = true;
                sums[1] += w * g.value(c).item().f64();
                sums[2] += w * g.value(i).item().f64();
            }
            sums[3] += w * total;
        }
        let n = train_p.len() as f64;
        let preds = predict_prepared(&model, &val_p)?;
        let val_acc = accuracy(&preds, &val_labels);
        epochs.push(EpochRecord {
            epoch,
            l_cau: sums[0] / n,
            l_con: has_aux.then(|| sums[1] / n),
            l_int: has_aux.then(|| sums[2] / n),
            total: sums[3] / n,
            val_acc,
            lr,
        });
        log::debug!("epoch {epoch}: loss {:.5} val_acc {val_acc:.4}", sums[3] / n);

        let improved = best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc);
        if improved {
            best = Some((epoch, val_acc, Checkpoint::from_store(meta.clone(), &model.store)));
        } else if epoch - best.as_ref().map_or(0, |b| b.0) >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_val_acc, checkpoint) = best.expect("at least one epoch ran");
    Ok((
        checkpoint,
        TrainReport {
            epochs,
            best_epoch,
            best_val_acc,
            stop,
        },
    ))
}

fn format_norms(norms: &[(String, f64)]) -> String {
    norms
        .iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Accuracy of a checkpoint on a labelled set.
pub fn evaluate(ck: &Checkpoint, instances: &[TrajInstance]) -> Result<f64> {
    Trained::from_checkpoint(ck)?.accuracy(instances)
}

/// Trains one comparison mode and scores it on `test`.
pub fn run_mode(
    mode: Mode,
    train_set: &[TrajInstance],
    val: &[TrajInstance],
    test: &[TrajInstance],
    cfg: &TrainConfig,
) -> Result<f64> {
    let cfg = TrainConfig {
        mode,
        variant: Variant::Full,
        ..cfg.clone()
    };
    let (ck, _) = train(train_set, val, &cfg)?;
    evaluate(&ck, test)
}

/// Trains one ablation variant of the full model and scores it on `test`.
pub fn run_ablation(
    variant: Variant,
    train_set: &[TrajInstance],
    val: &[TrajInstance],
    test: &[TrajInstance],
    cfg: &TrainConfig,
) -> Result<f64> {
    let cfg = TrainConfig {
        mode: Mode::Trajcl,
        variant,
        ..cfg.clone()
    };
    let (ck, _) = train(train_set, val, &cfg)?;
    evaluate(&ck, test)
}
