//! Sample buffers for rehearsal strategies.

use rand::seq::index;

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::seed;

/// Samples kept per task (or in total, for GDumb) unless configured otherwise.
pub const DEFAULT_BUFFER_BUDGET: usize = 256;

/// `min(budget, n)` distinct indices into a task of `n` samples, drawn
/// uniformly and returned in ascending order. A budget covering the whole
/// task keeps every sample without consuming randomness.
pub fn replay_store(n: usize, budget: usize, seed_value: u64) -> Vec<usize> {
    if budget >= n {
        return (0..n).collect();
    }
    let mut picked = index::sample(&mut seed::rng(seed_value), n, budget).into_vec();
    picked.sort_unstable();
    picked
}

/// Per-task GDumb quotas, oldest task first: `floor(B / n)` each, with the
/// remainder going one slot apiece to the most recent tasks.
pub fn gdumb_quotas(budget: usize, n_seen: usize) -> Result<Vec<usize>> {
    if n_seen == 0 {
        return Err(Error::Usage("GDumb quotas need at least one seen task".into()));
    }
    let q = budget / n_seen;
    let r = budget - q * n_seen;
    Ok((0..n_seen).map(|k| q + usize::from(k >= n_seen - r)).collect())
}

/// Trims every task's buffer to its quota, keeping its most recently
/// encountered samples. Returns the quotas applied.
pub fn gdumb_rebalance(buffers: &mut [TaskDataset], budget: usize) -> Result<Vec<usize>> {
    let quotas = gdumb_quotas(budget, buffers.len())?;
    for (buf, &q) in buffers.iter_mut().zip(&quotas) {
        if buf.len() > q {
            let keep: Vec<usize> = (buf.len() - q..buf.len()).collect();
            *buf = buf.subset(&keep);
        }
    }
    Ok(quotas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn task(name: &str, n: usize, offset: usize) -> TaskDataset {
        TaskDataset::new(
            name,
            1,
            1,
            (0..n).map(|i| (offset + i) as f64).collect(),
            (0..n).map(|i| (i % 2) as u8).collect(),
            (0..n as i64).collect(),
            (offset..offset + n).collect(),
        )
        .unwrap()
    }

    #[test]
    fn replay_examples() {
        assert_eq!(replay_store(100, 256, 1), (0..100).collect::<Vec<_>>());
        let picked = replay_store(1000, 256, 7);
        assert_eq!(picked.len(), 256);
        let mut dedup = picked.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 256);
        assert!(picked.windows(2).all(|w| w[0] < w[1]) && *picked.last().unwrap() < 1000);
        assert_eq!(picked, replay_store(1000, 256, 7));
        assert_ne!(picked, replay_store(1000, 256, 8));
        assert!(replay_store(50, 0, 3).is_empty());
    }

    #[test]
    fn quota_examples() {
        assert_eq!(gdumb_quotas(256, 4).unwrap(), vec![64; 4]);
        assert_eq!(gdumb_quotas(6, 4).unwrap(), vec![1, 1, 2, 2]);
        assert_eq!(gdumb_quotas(6, 1).unwrap(), vec![6]);
        assert_eq!(gdumb_quotas(3, 5).unwrap(), vec![0, 0, 1, 1, 1]);
        assert!(gdumb_quotas(6, 0).is_err());
    }

    #[test]
    fn rebalance_keeps_most_recent_samples() {
        let mut bufs = vec![task("a", 5, 0)];
        gdumb_rebalance(&mut bufs, 6).unwrap();
        assert_eq!(bufs[0].source_indices, vec![0, 1, 2, 3, 4]);
        bufs.push(task("b", 5, 100));
        gdumb_rebalance(&mut bufs, 6).unwrap();
        assert_eq!(bufs[0].source_indices, vec![2, 3, 4]);
        assert_eq!(bufs[1].source_indices, vec![102, 103, 104]);
        bufs.push(task("c", 5, 200));
        gdumb_rebalance(&mut bufs, 6).unwrap();
        assert_eq!(bufs[0].source_indices, vec![3, 4]);
        assert_eq!(bufs[1].source_indices, vec![103, 104]);
        assert_eq!(bufs[2].source_indices, vec![203, 204]);
    }

    proptest! {
        #[test]
        fn quotas_fill_budget_and_never_grow(budget in 0usize..600, n in 1usize..40) {
            let q = gdumb_quotas(budget, n).unwrap();
            prop_assert_eq!(q.iter().sum::<usize>(), budget);
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
            let next = gdumb_quotas(budget, n + 1).unwrap();
            for k in 0..n {
                prop_assert!(next[k] <= q[k]);
            }
        }

        #[test]
        fn replay_respects_budget(n in 0usize..2000, budget in 0usize..400, s in any::<u64>()) {
            let picked = replay_store(n, budget, s);
            prop_assert_eq!(picked.len(), budget.min(n));
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
