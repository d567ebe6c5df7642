//! Splitting a labeled dataset across simulated clients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Redraws of the full class-proportion matrix before falling back to moving
/// samples into empty shards.
pub const MAX_REDRAWS: usize = 100;

/// Shuffles `0..n` and deals indices round-robin.
pub fn iid_partition(n: usize, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || n < clients {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut shards = vec![Vec::new(); clients];
    for (k, i) in idx.into_iter().enumerate() {
        shards[k % clients].push(i);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Draws one proportion vector from `Dirichlet(alpha, ..., alpha)` by
/// normalizing independent Gamma(alpha, 1) variates.
fn dirichlet_row(gamma: &Gamma<f64>, clients: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every variate underflowed (tiny alpha): all mass on one client
        let mut row = vec![0.0; clients];
        row[rand::Rng::random_range(rng, 0..clients)] = 1.0;
        row
    }
}

/// Cuts `items` at the rounded cumulative proportions.
fn split_by(items: &[usize], props: &[f64]) -> Vec<Vec<usize>> {
    let n = items.len() as f64;
    let mut out = Vec::with_capacity(props.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (k, p) in props.iter().enumerate() {
        cum += p;
        let end = if k + 1 == props.len() {
            items.len()
        } else {
            ((cum * n).round() as usize).clamp(start, items.len())
        };
        out.push(items[start..end].to_vec());
        start = end;
    }
    out
}

/// Label-skewed split: for each class, client proportions are drawn from a
/// symmetric Dirichlet(alpha). Every client ends with at least one sample.
pub fn dirichlet_partition(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    if labels.len() < clients {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples across {clients} clients",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut shards = vec![Vec::new(); clients];
    for _ in 0..MAX_REDRAWS {
        shards = vec![Vec::new(); clients];
        for members in &by_class {
            let props = dirichlet_row(&gamma, clients, &mut rng);
            for (shard, part) in shards.iter_mut().zip(split_by(members, &props)) {
                shard.extend(part);
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            break;
        }
    }
    // Fallback: hand empty clients one sample each from the largest shards.
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..clients)
            .max_by_key(|&k| (shards[k].len(), std::cmp::Reverse(k)))
            .expect("clients >= 1");
        let moved = shards[donor].pop().expect("donor has >= 2 samples since M >= N");
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_partition(shards: &[Vec<usize>], n: usize) {
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert!(shards.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn dirichlet_is_a_partition() {
        let labels: Vec<usize> = (0..300).map(|i| i % 4).collect();
        for seed in 0..5 {
            let shards = dirichlet_partition(&labels, 10, 1.0, seed).unwrap();
            assert_partition(&shards, 300);
            assert_eq!(shards, dirichlet_partition(&labels, 10, 1.0, seed).unwrap());
        }
    }

    #[test]
    fn tiny_alpha_still_fills_every_client() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let shards = dirichlet_partition(&labels, 20, 1e-3, 4).unwrap();
        assert_partition(&shards, 40);
    }

    #[test]
    fn large_alpha_matches_global_histogram() {
        let labels: Vec<usize> = (0..4000).map(|i| i % 4).collect();
        let shards = dirichlet_partition(&labels, 10, 1e6, 2).unwrap();
        for s in &shards {
            let mut h = [0usize; 4];
            for &i in s {
                h[labels[i]] += 1;
            }
            let total: usize = h.iter().sum();
            for c in h {
                let share = c as f64 / total as f64;
                assert!((share - 0.25).abs() <= 0.05 * 0.25, "{share}");
            }
        }
    }

    #[test]
    fn errors() {
        assert!(dirichlet_partition(&[0, 1], 3, 1.0, 0).is_err());
        assert!(dirichlet_partition(&[0, 1, 1], 0, 1.0, 0).is_err());
        assert!(dirichlet_partition(&[0, 1, 1], 2, 0.0, 0).is_err());
        assert!(iid_partition(2, 3, 0).is_err());
    }

    #[test]
    fn iid_is_balanced_partition() {
        let shards = iid_partition(103, 10, 5).unwrap();
        assert_partition(&shards, 103);
        assert!(shards.iter().all(|s| s.len() == 10 || s.len() == 11));
    }
}
