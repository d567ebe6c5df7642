//! Client sampling and size-weighted aggregation of parameter deltas.

use num_rational::Ratio;
use num_traits::ToPrimitive;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chain::ParamDelta;
use crate::error::{Error, Result};
use crate::model::ModelStack;
use crate::scalar::Scalar;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream seed for `(seed, round, salt)`.
pub fn round_seed(seed: u64, round: usize, salt: u64) -> u64 {
    splitmix64(splitmix64(seed ^ salt) ^ round as u64)
}

const SAMPLING_SALT: u64 = 0x5a4d_504c_4500_0001;

/// Uniformly samples `count` distinct client ids from `0..clients`, sorted.
/// Depends only on `(seed, round)`.
pub fn sample_clients(clients: usize, count: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if count > clients {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} of {clients} clients"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(round_seed(seed, round, SAMPLING_SALT));
    let mut ids = rand::seq::index::sample(&mut rng, clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `|D_n| / Σ|D_n|` as exact rationals.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<Ratio<u64>>> {
    let total: u64 = sizes.iter().map(|&s| s as u64).sum();
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument("client sizes must be non-empty and positive".into()));
    }
    Ok(sizes.iter().map(|&s| Ratio::new(s as u64, total)).collect())
}

/// Adds the size-weighted mean delta to the matching tensors of `global`.
/// Deltas are reduced in the order given.
pub fn aggregate<S: Scalar>(
    global: &ModelStack<S>,
    deltas: &[(ParamDelta<S>, usize)],
) -> Result<ModelStack<S>> {
    let Some((first, _)) = deltas.first() else {
        return Ok(global.clone());
    };
    let keys = first.keys();
    for (d, _) in &deltas[1..] {
        if d.keys() != keys {
            return Err(Error::KeyMismatch(format!(
                "delta keys {:?} differ from {:?}",
                d.keys(),
                keys
            )));
        }
    }
    let sizes: Vec<usize> = deltas.iter().map(|(_, n)| *n).collect();
    let weights: Vec<S> = aggregation_weights(&sizes)?
        .iter()
        .map(|w| S::from_f64_lossy(w.to_f64().expect("finite ratio")))
        .collect();
    let mut out = global.clone();
    for name in keys {
        let target = out
            .trainable_tensor_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("`{name}` is not an aggregatable tensor")))?;
        let mut mean = crate::tensor::Tensor::zeros(target.shape().to_vec());
        for ((d, _), &w) in deltas.iter().zip(&weights) {
            mean.axpy(w, d.get(name).expect("key sets checked"))?;
        }
        target.axpy(S::one(), &mean)?;
        target.check_finite("aggregate")?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::{One, Zero};

    #[test]
    fn weights_sum_to_one_exactly() {
        let w = aggregation_weights(&[3, 7, 11, 1]).unwrap();
        let sum = w.iter().fold(Ratio::zero(), |a, b| a + b);
        assert!(sum.is_one());
        assert!(aggregation_weights(&[]).is_err());
        assert!(aggregation_weights(&[2, 0]).is_err());
    }

    #[test]
    fn sampling_contract() {
        assert_eq!(sample_clients(5, 5, 3, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_clients(20, 15, 7, 9).unwrap(), sample_clients(20, 15, 7, 9).unwrap());
        assert_ne!(sample_clients(20, 5, 7, 9).unwrap(), sample_clients(20, 5, 8, 9).unwrap());
        assert!(sample_clients(3, 4, 0, 0).is_err());
        assert!(sample_clients(3, 0, 0, 0).unwrap().is_empty());
    }
}
