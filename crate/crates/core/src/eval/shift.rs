use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::flow::ClassId;

/// Sample indices of an out-of-distribution split; `train` and `test` are disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OodSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShiftError {
    #[error("coarse class {class}: {reason}")]
    Insufficient { class: ClassId, reason: String },
    #[error("sample {index} has fine class {fine} missing from the hierarchy")]
    Unmapped { index: usize, fine: ClassId },
    #[error("{0}")]
    Input(String),
}

/// Share of each class's time span used for training (earliest) and testing (latest).
pub const TIME_EDGE_FRACTION: f64 = 0.4;

/// Per class, flows in the first 40% of the class time span train and flows
/// in the last 40% test; the middle fifth is dropped. A class whose flows
/// share one timestamp goes entirely to train.
pub fn time_shift_split(first_ts: &[f64], labels: &[ClassId]) -> Result<OodSplit, ShiftError> {
    if first_ts.len() != labels.len() {
        return Err(ShiftError::Input("timestamps and labels differ in length".into()));
    }
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut split = OodSplit::default();
    for (class, mut idx) in by_class {
        idx.sort_by(|&a, &b| first_ts[a].total_cmp(&first_ts[b]).then(a.cmp(&b)));
        let lo = first_ts[idx[0]];
        let hi = first_ts[*idx.last().expect("non-empty")];
        let span = hi - lo;
        if span <= 0.0 {
            log::warn!("class {class} spans zero time; all {} flows go to train", idx.len());
            split.train.extend(idx);
            continue;
        }
        let train_end = lo + TIME_EDGE_FRACTION * span;
        let test_start = hi - TIME_EDGE_FRACTION * span;
        for i in idx {
            let t = first_ts[i];
            if t < train_end {
                split.train.push(i);
            } else if t > test_start {
                split.test.push(i);
            }
        }
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Position of a fine class inside its coarse class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subclass {
    pub coarse: ClassId,
    pub dominant: bool,
}

/// Fine class to coarse class mapping.
pub type Hierarchy = BTreeMap<ClassId, Subclass>;

fn group_by_coarse(fine: &[ClassId], hierarchy: &Hierarchy) -> Result<BTreeMap<ClassId, BTreeMap<ClassId, Vec<usize>>>, ShiftError> {
    let mut out: BTreeMap<ClassId, BTreeMap<ClassId, Vec<usize>>> = BTreeMap::new();
    for (i, &f) in fine.iter().enumerate() {
        let sub = hierarchy.get(&f).ok_or(ShiftError::Unmapped { index: i, fine: f })?;
        out.entry(sub.coarse).or_default().entry(f).or_default().push(i);
    }
    Ok(out)
}

/// Dominant share of a budget sampled at `dominant : minor = 4 : 1`.
fn four_to_one(budget: usize) -> usize {
    (budget * 4 + 2) / 5
}

/// Per coarse class, `train_budget` samples drawn dominant:minor = 4:1 and
/// `test_budget` samples drawn 1:4, without overlap. All minor sub-classes
/// of a coarse class form one pool.
pub fn proportion_shift_split(
    fine: &[ClassId],
    hierarchy: &Hierarchy,
    train_budget: usize,
    test_budget: usize,
    seed: u64,
) -> Result<OodSplit, ShiftError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = OodSplit::default();
    for (coarse, subs) in group_by_coarse(fine, hierarchy)? {
        let (mut dom, mut minor) = (Vec::new(), Vec::new());
        for (f, idx) in subs {
            if hierarchy[&f].dominant {
                dom.extend(idx);
            } else {
                minor.extend(idx);
            }
        }
        if dom.is_empty() || minor.is_empty() {
            return Err(ShiftError::Insufficient {
                class: coarse,
                reason: "needs both dominant and minor sub-classes".into(),
            });
        }
        let train_dom = four_to_one(train_budget);
        let train_minor = train_budget - train_dom;
        let test_minor = four_to_one(test_budget);
        let test_dom = test_budget - test_minor;
        for (pool, need, what) in [(&dom, train_dom + test_dom, "dominant"), (&minor, train_minor + test_minor, "minor")] {
            if pool.len() < need {
                return Err(ShiftError::Insufficient {
                    class: coarse,
                    reason: format!("{need} {what} samples needed, {} available", pool.len()),
                });
            }
        }
        dom.shuffle(&mut rng);
        minor.shuffle(&mut rng);
        split.train.extend(&dom[..train_dom]);
        split.test.extend(&dom[train_dom..train_dom + test_dom]);
        split.train.extend(&minor[..train_minor]);
        split.test.extend(&minor[train_minor..train_minor + test_minor]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Per coarse class, a seeded choice of `ceil(s/2)` sub-classes is held out
/// of training entirely. Every sub-class also contributes
/// `max(1, round(test_fraction * n))` of its samples to test, so the test
/// side covers all sub-classes.
pub fn compose_shift_split(
    fine: &[ClassId],
    hierarchy: &Hierarchy,
    test_fraction: f64,
    seed: u64,
) -> Result<OodSplit, ShiftError> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(ShiftError::Input(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = OodSplit::default();
    for (coarse, subs) in group_by_coarse(fine, hierarchy)? {
        if subs.len() < 2 {
            return Err(ShiftError::Insufficient {
                class: coarse,
                reason: "needs at least two sub-classes".into(),
            });
        }
        let mut names: Vec<ClassId> = subs.keys().copied().collect();
        names.shuffle(&mut rng);
        let masked = &names[..subs.len().div_ceil(2)];
        for (f, mut idx) in subs {
            if masked.contains(&f) {
                split.test.extend(idx);
                continue;
            }
            idx.shuffle(&mut rng);
            let n_test = ((test_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
            split.test.extend(&idx[..n_test]);
            split.train.extend(&idx[n_test..]);
        }
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Sub-classes of each coarse class that are absent from `train`.
pub fn masked_subclasses(fine: &[ClassId], hierarchy: &Hierarchy, split: &OodSplit) -> BTreeMap<ClassId, Vec<ClassId>> {
    let mut out: BTreeMap<ClassId, Vec<ClassId>> = BTreeMap::new();
    let seen: std::collections::BTreeSet<ClassId> = split.train.iter().map(|&i| fine[i]).collect();
    for (&f, sub) in hierarchy {
        if !seen.contains(&f) {
            out.entry(sub.coarse).or_default().push(f);
        }
    }
    out
}
