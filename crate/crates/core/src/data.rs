//! Dataset splits shared by both training stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GeoError, Result};

/// Seeded shuffle of `0..n`; the first `round(n * val_fraction)` indices
/// (at least one, never all) form the validation set. Both halves are sorted.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(GeoError::Config(format!("cannot split {n} samples")));
    }
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(GeoError::Config(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_partitions_and_repeats() {
        let (t, v) = train_val_split(10, 0.2, 3).unwrap();
        assert_eq!(v.len(), 2);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(train_val_split(10, 0.2, 3).unwrap(), (t, v));
        assert!(train_val_split(1, 0.2, 0).is_err());
        assert!(train_val_split(5, 1.0, 0).is_err());
    }
}
