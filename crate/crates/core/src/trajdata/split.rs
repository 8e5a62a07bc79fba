//! Train/val/test splitting and the few-shot and imbalance subset protocols.

use rand::seq::SliceRandom;

use super::TrajInstance;
use crate::error::{Result, TrajError};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<TrajInstance>,
    pub val: Vec<TrajInstance>,
    pub test: Vec<TrajInstance>,
    pub seed: u64,
}

/// Seeded shuffle followed by a contiguous cut in the given proportions.
///
/// Val and test each receive at least one instance.
pub fn split(instances: Vec<TrajInstance>, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplits> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || !(a + b + c).is_finite() {
        return Err(TrajError::config(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let n = instances.len();
    if n < 3 {
        return Err(TrajError::data(format!(
            "need at least 3 instances to split, got {n}"
        )));
    }
    let total = a + b + c;
    let n_val = ((n as f64 * b / total).round() as usize).max(1);
    let n_test = ((n as f64 * c / total).round() as usize).max(1);
    let n_train = n.checked_sub(n_val + n_test).filter(|&t| t >= 1).ok_or_else(|| {
        TrajError::data(format!(
            "{n} instances leave no training data under ratios {ratios:?}"
        ))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::stream::SPLIT]));
    let mut slots: Vec<Option<TrajInstance>> = instances.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<TrajInstance> {
        order[range]
            .iter()
            .map(|&i| slots[i].take().expect("index used once"))
            .collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok(DatasetSplits {
        train,
        val,
        test,
        seed,
    })
}

fn by_class(train: &[TrajInstance]) -> Vec<Vec<usize>> {
    let n_classes = train.iter().map(|i| i.label + 1).max().unwrap_or(0);
    let mut groups = vec![Vec::new(); n_classes];
    for (i, inst) in train.iter().enumerate() {
        groups[inst.label].push(i);
    }
    groups
}

fn pick(train: &[TrajInstance], mut chosen: Vec<usize>) -> Vec<TrajInstance> {
    chosen.sort_unstable();
    chosen.into_iter().map(|i| train[i].clone()).collect()
}

/// Stratified subsample of `round(ratio · |train|)` instances, at least one per present class.
///
/// Per-class quotas use largest-remainder rounding; output keeps input order.
pub fn make_fewshot(train: &[TrajInstance], ratio: f64, seed: u64) -> Result<Vec<TrajInstance>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TrajError::config(format!(
            "few-shot ratio must be in (0, 1], got {ratio}"
        )));
    }
    let groups = by_class(train);
    let target = (ratio * train.len() as f64).round() as usize;
    let exact: Vec<f64> = groups.iter().map(|g| ratio * g.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
    rest.sort_by(|&x, &y| {
        let fx = exact[x] - quota[x] as f64;
        let fy = exact[y] - quota[y] as f64;
        fy.total_cmp(&fx).then(x.cmp(&y))
    });
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &c in &rest {
        if missing == 0 {
            break;
        }
        if quota[c] < groups[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut chosen = Vec::with_capacity(target);
    for (c, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let q = quota[c].max(1);
        let mut g = group.clone();
        g.shuffle(&mut seed::rng(seed, &[seed::stream::SUBSET, 0, c as u64]));
        chosen.extend_from_slice(&g[..q]);
    }
    Ok(pick(train, chosen))
}

/// Two-class subset of size `budget` with class counts in ratio `ratio.0 : ratio.1`.
pub fn make_imbalanced(
    train: &[TrajInstance],
    class_a: usize,
    class_b: usize,
    ratio: (u32, u32),
    budget: usize,
    seed: u64,
) -> Result<Vec<TrajInstance>> {
    if class_a == class_b {
        return Err(TrajError::config("imbalance classes must differ"));
    }
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(TrajError::config(format!(
            "ratio terms must be positive, got {ratio:?}"
        )));
    }
    let n_a = (budget as f64 * ratio.0 as f64 / (ratio.0 + ratio.1) as f64).round() as usize;
    let n_b = budget - n_a;
    let groups = by_class(train);
    let mut chosen = Vec::with_capacity(budget);
    for (class, need) in [(class_a, n_a), (class_b, n_b)] {
        let avail = groups.get(class).map_or(0, |g| g.len());
        if avail == 0 || avail < need {
            return Err(TrajError::Infeasible {
                class,
                available: avail,
                needed: need.max(1),
            });
        }
        let mut g = groups[class].clone();
        g.shuffle(&mut seed::rng(seed, &[seed::stream::SUBSET, 1, class as u64]));
        chosen.extend_from_slice(&g[..need]);
    }
    Ok(pick(train, chosen))
}

/// Imbalance budget used by the robustness protocol: half the training set.
pub fn half_budget(train_len: usize) -> usize {
    train_len / 2
}
