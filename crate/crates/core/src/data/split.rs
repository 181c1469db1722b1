use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Subject-level train/val/test assignment. The remainder after `train + val` goes to test.
pub fn make_splits(manifest: &DatasetManifest, seed: u64, fractions: (f64, f64)) -> Result<DatasetManifest> {
    let (ft, fv) = fractions;
    if !(ft >= 0.0 && fv >= 0.0) {
        return Err(Error::Config(format!("split fractions must be non-negative, got {fractions:?}")));
    }
    if ft + fv > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions exceed 1 ({ft} + {fv})")));
    }
    let n = manifest.records.len();
    let ft_rest = 1.0 - ft - fv;
    let wanted = [ft, fv, ft_rest].iter().filter(|f| **f > 1e-9).count();
    if n < wanted {
        return Err(Error::Data(format!("{n} subject(s) cannot fill {wanted} splits")));
    }
    let mut n_train = ((n as f64) * ft).round() as usize;
    let mut n_val = ((n as f64) * fv).round() as usize;
    n_train = n_train.min(n);
    n_val = n_val.min(n - n_train);
    // every requested split gets at least one subject
    let mut counts = [n_train, n_val, n - n_train - n_val];
    let fr = [ft, fv, ft_rest];
    for k in 0..3 {
        if fr[k] > 1e-9 && counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).expect("three splits");
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    let order = shuffled_indices(n, seed);
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.records[i].split = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// `k` subject-level folds over the non-test subjects; fold `i` validates on the `i`-th part.
pub fn make_folds(manifest: &DatasetManifest, seed: u64, k: usize) -> Result<Vec<DatasetManifest>> {
    let pool: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split != Split::Test)
        .collect();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if pool.len() < k {
        return Err(Error::Data(format!("{} subject(s) cannot fill {k} folds", pool.len())));
    }
    let order: Vec<usize> = shuffled_indices(pool.len(), seed).into_iter().map(|j| pool[j]).collect();
    Ok((0..k)
        .map(|fold| {
            let mut m = manifest.clone();
            for (rank, &i) in order.iter().enumerate() {
                m.records[i].split = if rank % k == fold { Split::Val } else { Split::Train };
            }
            m
        })
        .collect())
}
