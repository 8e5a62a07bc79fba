//! Synthetic benchmark protocol: comparison modes, ablations, few-shot and
//! imbalance settings evaluated on correlated and shifted test sets.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Mode, Variant};
use crate::seed::{self, stream};
use crate::synthgen::{gen_dataset, oracle_accuracy, Regime, SynthWorld, WorldConfig};
use crate::trainer::{train, TrainConfig, Trained};
use crate::trajdata::{half_budget, make_fewshot, make_imbalanced, TrajInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub world: WorldConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            world: WorldConfig::default_for(1, 3, 0.9),
            n_train: 4000,
            n_val: 500,
            n_test: 1000,
            seeds: vec![1, 2, 3, 4, 5],
            train: TrainConfig {
                k: 10,
                batch_size: 64,
                max_epochs: 40,
                ..TrainConfig::default()
            },
        }
    }
}

/// Training-set transformation applied before fitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setting {
    Full,
    FewShot { ratio: f64 },
    Imbalance { majority: u32, minority: u32 },
}

impl Setting {
    pub fn label(&self) -> String {
        match self {
            Setting::Full => "full".into(),
            Setting::FewShot { ratio } => format!("fewshot_{ratio}"),
            Setting::Imbalance { majority, minority } => format!("imbalance_{majority}:{minority}"),
        }
    }
}

pub struct SeedData {
    pub train: Vec<TrajInstance>,
    pub val: Vec<TrajInstance>,
    pub test_correlated: Vec<TrajInstance>,
    pub test_shifted: Vec<TrajInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub seed: u64,
    pub setting: String,
    pub mode: Mode,
    pub variant: Variant,
    pub acc_correlated: f64,
    pub acc_shifted: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_secs: f64,
}

pub struct Benchmark {
    pub protocol: Protocol,
    pub world: SynthWorld,
}

impl Benchmark {
    pub fn new(protocol: Protocol) -> Result<Self> {
        protocol.train.validate()?;
        let world = SynthWorld::build(protocol.world.clone())?;
        Ok(Self { protocol, world })
    }

    /// Datasets for one seed; each split has its own generation seed.
    pub fn data(&self, seed: u64) -> Result<SeedData> {
        let p = &self.protocol;
        let ds = |which: u64, n: usize, regime: Regime| -> Result<Vec<TrajInstance>> {
            let s = seed::derive(seed, &[stream::DATASET, which]);
            Ok(gen_dataset(&self.world, n, regime, s)?.instances)
        };
        Ok(SeedData {
            train: ds(0, p.n_train, Regime::TrainCorrelated)?,
            val: ds(1, p.n_val, Regime::TrainCorrelated)?,
            test_correlated: ds(2, p.n_test, Regime::TrainCorrelated)?,
            test_shifted: ds(3, p.n_test, Regime::TestShifted)?,
        })
    }

    pub fn oracle_shifted(&self, data: &SeedData) -> f64 {
        oracle_accuracy(&self.world, &data.test_shifted)
    }

    pub fn subset(&self, data: &SeedData, setting: Setting, seed: u64) -> Result<Vec<TrajInstance>> {
        match setting {
            Setting::Full => Ok(data.train.clone()),
            Setting::FewShot { ratio } => make_fewshot(&data.train, ratio, seed),
            Setting::Imbalance { majority, minority } => make_imbalanced(
                &data.train,
                0,
                1,
                (majority, minority),
                imbalance_budget(&data.train),
                seed,
            ),
        }
    }

    pub fn run(
        &self,
        data: &SeedData,
        seed: u64,
        setting: Setting,
        mode: Mode,
        variant: Variant,
    ) -> Result<RunScore> {
        let train_set = self.subset(data, setting, seed)?;
        let cfg = TrainConfig {
            seed,
            mode,
            variant,
            ..self.protocol.train.clone()
        };
        let start = Instant::now();
        let (ck, report) = train(&train_set, &data.val, &cfg)?;
        let train_secs = start.elapsed().as_secs_f64();
        let model = Trained::from_checkpoint(&ck)?;
        let score = RunScore {
            seed,
            setting: setting.label(),
            mode,
            variant,
            acc_correlated: model.accuracy(&data.test_correlated)?,
            acc_shifted: model.accuracy(&data.test_shifted)?,
            best_epoch: report.best_epoch,
            epochs_run: report.epochs.len(),
            train_secs,
        };
        log::info!(
            "seed {seed} {} {}/{}: correlated {:.4} shifted {:.4} ({} epochs, {:.0}s)",
            score.setting,
            mode.name(),
            variant.name(),
            score.acc_correlated,
            score.acc_shifted,
            score.epochs_run,
            train_secs
        );
        Ok(score)
    }
}

/// Half the training set, capped at twice the rarer of classes 0 and 1 so the
/// balanced 1:1 setting stays feasible; the same budget serves every ratio.
pub fn imbalance_budget(train: &[TrajInstance]) -> usize {
    let count = |c: usize| train.iter().filter(|i| i.label == c).count();
    half_budget(train.len()).min(2 * count(0).min(count(1)))
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Half-width of the normal-approximation 95% interval for a proportion.
pub fn binomial_ci95(p: f64, n: usize) -> f64 {
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}
