use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How scenes are assigned to train / validation / test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitSpec {
    FixedSceneList {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
    /// 70% / 10% / 20% of the scenes after a seeded shuffle.
    Ratio701020,
    LeaveOneSceneOut(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Partitions scene ids. Validation and test each get
/// `max(1, floor(share * n))` scenes and the remainder goes to train.
pub fn split_dataset(scenes: &[String], spec: &SplitSpec, seed: u64) -> Result<Split> {
    if scenes.is_empty() {
        return Err(Error::Split("no scenes to split".into()));
    }
    let all: BTreeSet<&String> = scenes.iter().collect();
    if all.len() != scenes.len() {
        return Err(Error::Split("duplicate scene ids".into()));
    }
    match spec {
        SplitSpec::LeaveOneSceneOut(test) => {
            if !all.contains(test) {
                return Err(Error::Split(format!("unknown test scene {test:?}")));
            }
            Ok(Split {
                train: scenes.iter().filter(|s| *s != test).cloned().collect(),
                val: Vec::new(),
                test: vec![test.clone()],
            })
        }
        SplitSpec::Ratio701020 => {
            let n = scenes.len();
            let n_val = ((n as f64 * 0.1).floor() as usize).max(1);
            let n_test = ((n as f64 * 0.2).floor() as usize).max(1);
            if n < n_val + n_test + 1 {
                return Err(Error::Split(format!(
                    "{n} scene(s) cannot form three non-empty parts"
                )));
            }
            let mut order: Vec<String> = scenes.to_vec();
            order.sort();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let test = order.split_off(n - n_test);
            let val = order.split_off(order.len() - n_val);
            Ok(Split { train: order, val, test })
        }
        SplitSpec::FixedSceneList { train, val, test } => {
            let mut seen = BTreeSet::new();
            for s in train.iter().chain(val).chain(test) {
                if !all.contains(s) {
                    return Err(Error::Split(format!("unknown scene {s:?} in fixed list")));
                }
                if !seen.insert(s) {
                    return Err(Error::Split(format!("scene {s:?} listed twice")));
                }
            }
            if seen.len() != all.len() {
                let missing: Vec<_> = all.difference(&seen).collect();
                return Err(Error::Split(format!("scenes not assigned: {missing:?}")));
            }
            Ok(Split {
                train: train.clone(),
                val: val.clone(),
                test: test.clone(),
            })
        }
    }
}
