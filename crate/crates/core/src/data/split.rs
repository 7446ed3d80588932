use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PatientRecord;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Train / validation / test proportions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Verifies that the three index sets partition `0..n`.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::InvalidParam(format!("split index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParam("splits do not cover every record".into()));
        }
        Ok(())
    }

    pub fn all(n: usize) -> Self {
        Splits {
            train: (0..n).collect(),
            val: vec![],
            test: vec![],
        }
    }
}

/// Stratified split on one designated label.
pub fn stratified_split(
    records: &[PatientRecord],
    fractions: [f64; 3],
    label_index: usize,
    seed: u64,
) -> Result<Splits> {
    let labels: Vec<u8> = records.iter().map(|r| r.y[label_index]).collect();
    stratified_split_labels(&labels, fractions, seed)
}

/// Each class is shuffled independently and cut by the fractions, so every
/// split inherits the overall class balance up to one record per class.
pub fn stratified_split_labels(labels: &[u8], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidParam(format!("split fractions {fractions:?} must sum to 1")));
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut splits = Splits::default();
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < active {
            return Err(Error::StratificationInfeasible {
                class,
                count: idx.len(),
                splits: active,
            });
        }
        idx.shuffle(&mut substream(seed, "split", class as u64));
        let n = idx.len();
        let mut n_train = (n as f64 * fractions[0]).round() as usize;
        let mut n_val = (n as f64 * fractions[1]).round() as usize;
        // every split with a positive fraction gets at least one record
        if fractions[0] > 0.0 {
            n_train = n_train.max(1);
        }
        if fractions[1] > 0.0 {
            n_val = n_val.max(1);
        }
        let reserve_test = usize::from(fractions[2] > 0.0);
        while n_train + n_val + reserve_test > n {
            if n_train >= n_val && n_train > 1 {
                n_train -= 1;
            } else {
                n_val -= 1;
            }
        }
        if fractions[2] == 0.0 {
            n_val = n - n_train;
        }
        splits.train.extend_from_slice(&idx[..n_train]);
        splits.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}
