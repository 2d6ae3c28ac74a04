use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Padded token count of a batch: size times its longest member.
pub fn padded_tokens(lengths: &[usize], batch: &[usize]) -> usize {
    batch.len() * batch.iter().map(|&i| lengths[i]).max().unwrap_or(0)
}

/// Groups example indices into batches whose padded size stays within
/// `token_budget`. Examples are shuffled, stably bucketed by
/// `ceil(len / bucket_width)`, packed greedily, and the batch order shuffled.
/// Every index appears in exactly one batch.
pub fn make_length_batches<R: Rng + ?Sized>(
    lengths: &[usize],
    token_budget: usize,
    bucket_width: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if bucket_width == 0 {
        return Err(Error::InvalidArgument("bucket width must be positive".into()));
    }
    if let Some(&length) = lengths.iter().find(|&&l| l > token_budget) {
        return Err(Error::OverBudget {
            length,
            budget: token_budget,
        });
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i].div_ceil(bucket_width));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut bucket = usize::MAX;
    let mut longest = 0;
    for i in order {
        let b = lengths[i].div_ceil(bucket_width);
        let l = longest.max(lengths[i]);
        if !current.is_empty() && (b != bucket || (current.len() + 1) * l > token_budget) {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        bucket = b;
        longest = longest.max(lengths[i]);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(rng);
    Ok(batches)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routing {
    pub to_mutate: Vec<usize>,
    pub keep_real: Vec<usize>,
    /// Members of `keep_real` that had no mutation target.
    pub untargetable: usize,
}

/// Sends about half of a batch to the mutator. Untargetable functions stay
/// real, and the mutation probability of the rest is raised so the expected
/// mutated share remains one half when possible.
pub fn route_fifty_fifty<R: Rng + ?Sized>(
    batch: &[usize],
    has_targets: impl Fn(usize) -> bool,
    rng: &mut R,
) -> Routing {
    let targetable = batch.iter().filter(|&&i| has_targets(i)).count();
    let p = if targetable == 0 {
        0.0
    } else {
        (batch.len() as f64 / 2.0 / targetable as f64).min(1.0)
    };
    let mut r = Routing::default();
    for &i in batch {
        if !has_targets(i) {
            r.keep_real.push(i);
            r.untargetable += 1;
        } else if rng.gen::<f64>() < p {
            r.to_mutate.push(i);
        } else {
            r.keep_real.push(i);
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn packing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_length_batches(&[125; 100], 12_500, 16, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 100);

        let mut lengths = vec![240; 10];
        lengths.extend([50; 10]);
        let b = make_length_batches(&lengths, 12_500, 16, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        for batch in &b {
            assert_eq!(batch.len(), 10);
            let first = lengths[batch[0]];
            assert!(batch.iter().all(|&i| lengths[i] == first));
        }

        let b = make_length_batches(&[250], 12_500, 16, &mut rng).unwrap();
        assert_eq!(padded_tokens(&[250], &b[0]), 250);
        assert!(matches!(
            make_length_batches(&[300], 250, 16, &mut rng),
            Err(Error::OverBudget { .. })
        ));
    }

    #[test]
    fn routing_rate_and_untargetable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<usize> = (0..100_000).collect();
        let r = route_fifty_fifty(&batch, |_| true, &mut rng);
        let frac = r.to_mutate.len() as f64 / 1e5;
        // sd ~ 0.0016
        assert!((frac - 0.5).abs() < 0.005);
        let r = route_fifty_fifty(&batch[..10], |_| false, &mut rng);
        assert!(r.to_mutate.is_empty());
        assert_eq!(r.untargetable, 10);
        // a quarter untargetable: the rest are mutated with p = 2/3
        let r = route_fifty_fifty(&batch, |i| i % 4 != 0, &mut rng);
        let frac = r.to_mutate.len() as f64 / 1e5;
        assert!((frac - 0.5).abs() < 0.005);
        let a = route_fifty_fifty(&[3, 4], |_| true, &mut ChaCha8Rng::seed_from_u64(7));
        let b = route_fifty_fifty(&[3, 4], |_| true, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn batches_partition_and_respect_budget(
            lengths in prop::collection::vec(1usize..=250, 0..400),
            budget in 250usize..3000,
            width in 1usize..40,
            seed in any::<u64>(),
        ) {
            let batches = make_length_batches(&lengths, budget, width, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
            for b in &batches {
                prop_assert!(!b.is_empty());
                prop_assert!(padded_tokens(&lengths, b) <= budget);
            }
            let again = make_length_batches(&lengths, budget, width, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(batches, again);
        }
    }
}
