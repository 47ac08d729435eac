use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

/// Minimum number of distinct groups for a grouped split.
pub const MIN_GROUPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl Fold {
    pub fn name(self) -> &'static str {
        match self {
            Fold::Train => "train",
            Fold::Val => "val",
            Fold::Test => "test",
        }
    }
}

impl std::str::FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Fold::Train),
            "val" => Ok(Fold::Val),
            "test" => Ok(Fold::Test),
            other => Err(Error::Parameter(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Assign whole groups to folds.
    pub grouped: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            grouped: true,
            seed: 0,
        }
    }
}

/// Sample indices of each fold, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn fold(&self, fold: Fold) -> &[usize] {
        match fold {
            Fold::Train => &self.train,
            Fold::Val => &self.val,
            Fold::Test => &self.test,
        }
    }

    pub fn take<'a>(&self, fold: Fold, samples: &'a [Sample]) -> Vec<&'a Sample> {
        self.fold(fold).iter().map(|&i| &samples[i]).collect()
    }

    /// Fold of every sample, in sample order.
    pub fn assignments(&self, num_samples: usize) -> Vec<Option<Fold>> {
        let mut out = vec![None; num_samples];
        for fold in [Fold::Train, Fold::Val, Fold::Test] {
            for &i in self.fold(fold) {
                out[i] = Some(fold);
            }
        }
        out
    }
}

/// Shuffles `units` and cuts them at the rounded fractional boundaries.
fn partition<T: Copy>(mut units: Vec<T>, spec: &SplitSpec) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    units.shuffle(&mut rng);
    let n = units.len();
    let n_train = ((spec.train * n as f64).round() as usize).min(n);
    let n_val = ((spec.val * n as f64).round() as usize).min(n - n_train);
    let test = units.split_off(n_train + n_val);
    let val = units.split_off(n_train);
    (units, val, test)
}

pub fn split(samples: &[Sample], spec: &SplitSpec) -> Result<SplitIndices> {
    let fractions = [spec.train, spec.val, spec.test];
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut out = SplitIndices::default();
    if spec.grouped {
        let groups: Vec<u32> = samples
            .iter()
            .map(|s| s.group_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if groups.len() < MIN_GROUPS {
            return Err(Error::Data(format!(
                "grouped split needs at least {MIN_GROUPS} groups, found {}",
                groups.len()
            )));
        }
        let (train, val, test) = partition(groups, spec);
        let fold_of = |g: u32| {
            if train.contains(&g) {
                Fold::Train
            } else if val.contains(&g) {
                Fold::Val
            } else {
                debug_assert!(test.contains(&g));
                Fold::Test
            }
        };
        for (i, s) in samples.iter().enumerate() {
            match fold_of(s.group_id) {
                Fold::Train => out.train.push(i),
                Fold::Val => out.val.push(i),
                Fold::Test => out.test.push(i),
            }
        }
    } else {
        let (mut train, mut val, mut test) = partition((0..samples.len()).collect(), spec);
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        out = SplitIndices { train, val, test };
    }
    Ok(out)
}
