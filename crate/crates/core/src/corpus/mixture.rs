//! Stage-3 adaptation mixture: new-Eastern, paired-Eastern, and replayed
//! Western supervision in configurable proportions.

use rand::seq::SliceRandom;

use super::{CaptionRecord, CorpusError, StageMixture};
use crate::seed::seeded_rng;

/// Caption pools the mixture draws from.
pub struct MixturePools<'a> {
    pub new_eastern: Vec<&'a CaptionRecord>,
    pub paired_eastern: Vec<&'a CaptionRecord>,
    pub western_replay: Vec<&'a CaptionRecord>,
}

const CATEGORY_NAMES: [&str; 3] = ["new_eastern", "paired_eastern", "western_replay"];

/// Per-category counts: `round(total * frac)` with the rounding remainder
/// assigned to the largest-fraction category (ties broken by declaration
/// order: new-Eastern, paired-Eastern, Western replay).
pub fn mixture_counts(total: usize, mixture: &StageMixture) -> Result<[usize; 3], CorpusError> {
    let fracs = mixture.fractions();
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CorpusError::FractionSum(fracs.iter().sum()));
    }
    let sum: f64 = fracs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::FractionSum(sum));
    }

    let mut counts = [0usize; 3];
    for (count, frac) in counts.iter_mut().zip(fracs) {
        *count = (total as f64 * frac).round() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let largest = fracs
        .iter()
        .enumerate()
        .max_by(|(ai, a), (bi, b)| a.partial_cmp(b).unwrap().then(bi.cmp(ai)))
        .map(|(i, _)| i)
        .expect("three categories");
    if assigned <= total {
        counts[largest] += total - assigned;
    } else {
        let overshoot = assigned - total;
        if counts[largest] < overshoot {
            return Err(CorpusError::FractionSum(sum));
        }
        counts[largest] -= overshoot;
    }
    Ok(counts)
}

/// Assemble the stage-3 training list: exactly `total` records, category
/// counts per `mixture_counts`, in a seeded shuffled order.
pub fn build_stage3_mixture<'a>(
    total: usize,
    mixture: &StageMixture,
    pools: &MixturePools<'a>,
    seed: u64,
) -> Result<Vec<&'a CaptionRecord>, CorpusError> {
    let counts = mixture_counts(total, mixture)?;
    let pool_list = [
        &pools.new_eastern,
        &pools.paired_eastern,
        &pools.western_replay,
    ];

    let mut rng = seeded_rng(seed);
    let mut picked: Vec<&CaptionRecord> = Vec::with_capacity(total);
    for ((pool, &needed), name) in pool_list.iter().zip(&counts).zip(CATEGORY_NAMES) {
        if pool.len() < needed {
            return Err(CorpusError::InsufficientPool {
                category: name,
                needed,
                available: pool.len(),
            });
        }
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        indices.shuffle(&mut rng);
        picked.extend(indices[..needed].iter().map(|&i| pool[i]));
    }
    picked.shuffle(&mut rng);
    Ok(picked)
}
