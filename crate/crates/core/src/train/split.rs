use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::flow::ClassId;
use crate::token::TokenSequence;

/// Indices into the original dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sizes of the three parts of `n` items: train and validation are rounded
/// to the nearest count, the remainder is test.
fn part_sizes(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    let total: f64 = ratios.iter().sum();
    let train = ((n as f64 * ratios[0] / total).round() as usize).min(n);
    let val = ((n as f64 * ratios[1] / total).round() as usize).min(n - train);
    (train, val)
}

/// Seeded shuffle-and-cut. In stratified mode each label group (unlabeled
/// items form their own group) is cut separately; label ids below the
/// largest one that have no samples are reported and skipped.
pub fn split_indices(labels: &[Option<ClassId>], ratios: [f64; 3], seed: u64, stratified: bool) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        let mut by: BTreeMap<Option<ClassId>, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            by.entry(*l).or_default().push(i);
        }
        if let Some(max) = labels.iter().flatten().max() {
            for c in 0..*max {
                if !by.contains_key(&Some(c)) {
                    log::warn!("class {c} has no samples; skipped in stratified split");
                }
            }
        }
        by.into_values().collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut split = Split::default();
    for mut idx in groups {
        idx.shuffle(&mut rng);
        let (tr, va) = part_sizes(idx.len(), ratios);
        split.train.extend(&idx[..tr]);
        split.val.extend(&idx[tr..tr + va]);
        split.test.extend(&idx[tr + va..]);
    }
    split.train.shuffle(&mut rng);
    split.val.shuffle(&mut rng);
    split.test.shuffle(&mut rng);
    split
}

/// Train, validation and test sequences.
pub fn split_dataset(
    data: &[TokenSequence],
    ratios: [f64; 3],
    seed: u64,
    stratified: bool,
) -> (Vec<TokenSequence>, Vec<TokenSequence>, Vec<TokenSequence>) {
    let labels: Vec<Option<ClassId>> = data.iter().map(|s| s.label).collect();
    let s = split_indices(&labels, ratios, seed, stratified);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect();
    (pick(&s.train), pick(&s.val), pick(&s.test))
}

/// Keeps `max(1, round(fraction * n_c))` samples of every class, in original order.
pub fn few_shot_subsample(data: &[TokenSequence], fraction: f64, seed: u64) -> Vec<TokenSequence> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must lie in (0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by: BTreeMap<Option<ClassId>, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by.entry(s.label).or_default().push(i);
    }
    let mut keep: Vec<usize> = Vec::new();
    for mut idx in by.into_values() {
        let n = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        idx.shuffle(&mut rng);
        keep.extend(&idx[..n]);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| data[i].clone()).collect()
}
