use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetManifest};

/// Deterministic fold assignment: a seeded permutation dealt round-robin, so
/// fold sizes differ by at most one.
pub fn assign_folds(count: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; count];
    for (slot, &i) in order.iter().enumerate() {
        fold_of[i] = slot % folds.max(1) + 1;
    }
    fold_of
}

/// Leave-one-fold-out split: `test` is fold `fold`, `train` is the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldSplit {
    pub fn new(manifest: &DatasetManifest, fold: usize) -> Result<Self, DataError> {
        if fold == 0 || fold > manifest.folds {
            return Err(DataError::InvalidFold {
                fold,
                folds: manifest.folds,
            });
        }
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..manifest.count).partition(|&i| manifest.fold_of[i] == fold);
        if test.is_empty() {
            return Err(DataError::EmptySplit { fold, which: "test" });
        }
        if train.is_empty() {
            return Err(DataError::EmptySplit { fold, which: "train" });
        }
        Ok(FoldSplit { fold, train, test })
    }

    /// Shuffled training batches for one epoch; the final partial batch is kept.
    pub fn train_batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        kfold_batches(&self.train, batch_size, Some(epoch_seed(seed, self.fold, epoch)))
    }

    pub fn test_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        kfold_batches(&self.test, batch_size, None)
    }
}

fn epoch_seed(seed: u64, fold: usize, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (fold as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x1656_67B1_9E37_79F9)
}

/// Chunks `indices` into batches, shuffling first when a seed is given.
pub fn kfold_batches(indices: &[usize], batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
