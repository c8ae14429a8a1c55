//! Action specifications: complementary multi-hot prompt pairs and their
//! supervision targets.
//!
//! For a video with L ground-truth labels out of C classes, the full
//! construction yields 2L+1 pairs:
//! - L+1 distractor-injected specs: the i-th (i = 0..L) samples i present
//!   labels from the truth plus K-i absent labels from the complement, so
//!   every one has exactly K hot entries;
//! - L plain specs: the i-th (i = 1..L) samples i present labels and nothing
//!   else.
//!
//! Each spec (SAP) is paired with its exact bitwise complement (UAP). Targets
//! have C+1 entries: the first C are the intersection of the spec with the
//! truth, and entry C is the "no-action" flag, set when that intersection is
//! empty.

use gradtape::Tensor64;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("video has no labels; specification construction needs L >= 1")]
    NoLabels,
    #[error("K = {k} exceeds the number of classes C = {c}")]
    KTooLarge { k: usize, c: usize },
    #[error("K = {k} is below the label count L = {l}; the distractor family needs K >= L")]
    KTooSmall { k: usize, l: usize },
    #[error("K = {k} distractors cannot be drawn from {available} absent classes")]
    NotEnoughAbsent { k: usize, available: usize },
    #[error("labels[{0}] is not 0/1")]
    NotMultiHot(usize),
}

/// One SAP/UAP pair with its supervision targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpecPair {
    pub sap: Vec<u8>,
    pub uap: Vec<u8>,
    /// Length C+1; entry C is the no-action flag.
    pub y_s: Vec<u8>,
    pub y_u: Vec<u8>,
    pub distractor_injected: bool,
}

/// All pairs constructed for one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecBatch {
    pub pairs: Vec<ActionSpecPair>,
    /// Number of ground-truth labels L.
    pub num_labels: usize,
}

/// Intersection targets: entry c = spec[c] AND truth[c]; entry C flags an
/// empty intersection ("no-action").
pub fn targets_for(spec: &[u8], truth: &[u8]) -> Vec<u8> {
    debug_assert_eq!(spec.len(), truth.len());
    let mut y: Vec<u8> = spec.iter().zip(truth).map(|(&s, &t)| s & t).collect();
    let none = y.iter().all(|&v| v == 0);
    y.push(u8::from(none));
    y
}

/// A 0/1 spec as a float vector, the model input `v`.
pub fn encode_spec(spec: &[u8]) -> Tensor64 {
    let data: Vec<f64> = spec.iter().map(|&v| f64::from(v)).collect();
    Tensor64::from_vec(vec![spec.len()], data).expect("spec length")
}

/// Build a pair around a SAP: complement, then targets for both sides.
pub fn pair_from_sap(sap: Vec<u8>, truth: &[u8], distractor_injected: bool) -> ActionSpecPair {
    let uap: Vec<u8> = sap.iter().map(|&v| 1 - v).collect();
    ActionSpecPair {
        y_s: targets_for(&sap, truth),
        y_u: targets_for(&uap, truth),
        sap,
        uap,
        distractor_injected,
    }
}

/// Sample `take` distinct elements of `pool` without replacement via a
/// partial Fisher-Yates shuffle; deterministic in the rng stream.
fn sample_without_replacement(pool: &[usize], take: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    debug_assert!(take <= pool.len());
    let mut pool = pool.to_vec();
    for i in 0..take {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// The full 2L+1 construction for one video.
pub fn build_pairs(truth: &[u8], k: usize, rng: &mut ChaCha12Rng) -> Result<SpecBatch, SpecError> {
    let c = truth.len();
    if let Some(pos) = truth.iter().position(|&v| v > 1) {
        return Err(SpecError::NotMultiHot(pos));
    }
    let present: Vec<usize> = (0..c).filter(|&i| truth[i] == 1).collect();
    let absent: Vec<usize> = (0..c).filter(|&i| truth[i] == 0).collect();
    let l = present.len();
    if l == 0 {
        return Err(SpecError::NoLabels);
    }
    if k > c {
        return Err(SpecError::KTooLarge { k, c });
    }
    if k < l {
        return Err(SpecError::KTooSmall { k, l });
    }
    // The i = 0 member needs K absent labels, the worst case.
    if k > absent.len() {
        return Err(SpecError::NotEnoughAbsent { k, available: absent.len() });
    }
    let mut pairs = Vec::with_capacity(2 * l + 1);
    for i in 0..=l {
        let mut sap = vec![0u8; c];
        for idx in sample_without_replacement(&present, i, rng) {
            sap[idx] = 1;
        }
        for idx in sample_without_replacement(&absent, k - i, rng) {
            sap[idx] = 1;
        }
        pairs.push(pair_from_sap(sap, truth, true));
    }
    for i in 1..=l {
        let mut sap = vec![0u8; c];
        for idx in sample_without_replacement(&present, i, rng) {
            sap[idx] = 1;
        }
        pairs.push(pair_from_sap(sap, truth, false));
    }
    Ok(SpecBatch { pairs, num_labels: l })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn truth(c: usize, present: &[usize]) -> Vec<u8> {
        let mut t = vec![0u8; c];
        for &i in present {
            t[i] = 1;
        }
        t
    }

    #[test]
    fn five_class_example_counts() {
        // C=5, truth={0,2}, K=3: 5 pairs; injected hot-counts 3,3,3
        // (0,1,2 present + 3,2,1 absent); plain hot-counts 1,2.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let batch = build_pairs(&truth(5, &[0, 2]), 3, &mut rng).unwrap();
        assert_eq!(batch.pairs.len(), 5);
        assert_eq!(batch.num_labels, 2);
        let hot = |p: &ActionSpecPair| p.sap.iter().filter(|&&v| v == 1).count();
        let injected: Vec<usize> = batch.pairs.iter().filter(|p| p.distractor_injected).map(hot).collect();
        assert_eq!(injected, vec![3, 3, 3]);
        let plain: Vec<usize> = batch.pairs.iter().filter(|p| !p.distractor_injected).map(hot).collect();
        assert_eq!(plain, vec![1, 2]);
    }

    #[test]
    fn zeroth_injected_pair_is_pure_no_action() {
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let batch = build_pairs(&truth(7, &[1, 4]), 4, &mut rng).unwrap();
            let first = &batch.pairs[0];
            assert!(first.distractor_injected);
            // No present labels sampled: intersection empty, no-action set.
            assert_eq!(first.y_s[..7], [0; 7]);
            assert_eq!(first.y_s[7], 1);
        }
    }

    #[test]
    fn complement_example() {
        let pair = pair_from_sap(vec![0, 1, 0, 0], &truth(4, &[1]), false);
        assert_eq!(pair.uap, vec![1, 0, 1, 1]);
    }

    #[test]
    fn targets_examples() {
        // spec = truth -> truth padded with 0.
        let t = truth(3, &[0, 2]);
        assert_eq!(targets_for(&t, &t), vec![1, 0, 1, 0]);
        // Disjoint -> no-action one-hot.
        assert_eq!(targets_for(&[0, 1, 0], &[1, 0, 0]), vec![0, 0, 0, 1]);
        // Overlap by hand.
        assert_eq!(targets_for(&[1, 1, 0], &[0, 1, 1]), vec![0, 1, 0, 0]);
    }

    #[test]
    fn encode_spec_is_float_copy() {
        let v = encode_spec(&[1, 0, 1, 1]);
        assert_eq!(v.shape(), &[4]);
        assert_eq!(v.data(), &[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(v.data().iter().sum::<f64>(), 3.0);
        // Thresholding the encoding back to bits round-trips.
        let bits: Vec<u8> = v.data().iter().map(|&x| u8::from(x > 0.5)).collect();
        assert_eq!(encode_spec(&bits).data(), v.data());
    }

    #[test]
    fn errors_are_specific() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert_eq!(build_pairs(&[0, 0, 0], 2, &mut rng), Err(SpecError::NoLabels));
        assert_eq!(build_pairs(&truth(3, &[0]), 4, &mut rng), Err(SpecError::KTooLarge { k: 4, c: 3 }));
        assert_eq!(
            build_pairs(&truth(4, &[0, 1, 2]), 2, &mut rng),
            Err(SpecError::KTooSmall { k: 2, l: 3 })
        );
        assert_eq!(
            build_pairs(&truth(4, &[0, 1]), 3, &mut rng),
            Err(SpecError::NotEnoughAbsent { k: 3, available: 2 })
        );
        assert_eq!(build_pairs(&[1, 2, 0], 2, &mut rng), Err(SpecError::NotMultiHot(1)));
    }

    #[test]
    fn same_seed_reproduces_batches() {
        let t = truth(9, &[0, 3, 8]);
        let a = build_pairs(&t, 5, &mut ChaCha12Rng::seed_from_u64(7)).unwrap();
        let b = build_pairs(&t, 5, &mut ChaCha12Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn construction_invariants_over_many_seeds() {
        // Scaled-down version of the acceptance sweep: every pair satisfies
        // the complement, intersection, and no-action rules.
        for seed in 0..100 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let c = 11;
            let l = 1 + (seed as usize % 4);
            let mut present: Vec<usize> = (0..c).collect();
            for i in 0..l {
                let j = rng.gen_range(i..c);
                present.swap(i, j);
            }
            let t = truth(c, &present[..l]);
            let k = 4;
            let batch = build_pairs(&t, k, &mut rng).unwrap();
            assert_eq!(batch.pairs.len(), 2 * l + 1);
            for p in &batch.pairs {
                for i in 0..c {
                    assert_eq!(p.sap[i] & p.uap[i], 0);
                    assert_eq!(p.sap[i] | p.uap[i], 1);
                    assert_eq!(p.y_s[i], p.sap[i] & t[i]);
                    assert_eq!(p.y_u[i], p.uap[i] & t[i]);
                }
                assert_eq!(p.y_s[c] == 1, p.y_s[..c].iter().all(|&v| v == 0));
                assert_eq!(p.y_u[c] == 1, p.y_u[..c].iter().all(|&v| v == 0));
                if p.distractor_injected {
                    assert_eq!(p.sap.iter().filter(|&&v| v == 1).count(), k);
                }
                // Present picks are always a subset of the truth.
                for i in 0..c {
                    if p.sap[i] == 1 && t[i] == 0 {
                        assert!(p.distractor_injected, "plain pair contains an absent label");
                    }
                }
            }
        }
    }
}
