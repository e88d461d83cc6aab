//! Train/val/test splitting and class-stratified label subsampling.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::windows::WindowSet;
use crate::rng::SeedStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Windows are assigned independently.
    Random,
    /// All windows of a subject land in the same split.
    BySubject,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Fraction of training labels kept, stratified by class.
    pub label_fraction: f64,
    pub grouping: Grouping,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.72,
            val: 0.08,
            test: 0.2,
            label_fraction: 1.0,
            grouping: Grouping::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn validate(spec: &SplitSpec) -> Result<()> {
    let sum = spec.train + spec.val + spec.test;
    if (sum - 1.0).abs() >= 1e-9 {
        return Err(Error::config(format!(
            "split fractions sum to {sum}, expected 1"
        )));
    }
    if spec.train <= 0.0 || spec.val < 0.0 || spec.test < 0.0 {
        return Err(Error::config("split fractions must be non-negative with train > 0"));
    }
    if !(spec.label_fraction > 0.0 && spec.label_fraction <= 1.0) {
        return Err(Error::config(format!(
            "label fraction {} not in (0, 1]",
            spec.label_fraction
        )));
    }
    Ok(())
}

fn partition_random(order: &[usize], n_test: usize, n_val: usize) -> Splits {
    Splits {
        test: order[..n_test].to_vec(),
        val: order[n_test..n_test + n_val].to_vec(),
        train: order[n_test + n_val..].to_vec(),
    }
}

fn partition_by_subject(
    set: &WindowSet,
    order: &[usize],
    n_test: usize,
    n_val: usize,
    rng: &mut impl rand::Rng,
) -> Splits {
    let mut subjects: Vec<u32> = set.subjects.clone();
    subjects.sort_unstable();
    subjects.dedup();
    subjects.shuffle(rng);

    let mut bucket = vec![2u8; subjects.len().max(1)]; // 0 test, 1 val, 2 train
    let mut subject_slot = std::collections::HashMap::new();
    let counts: std::collections::HashMap<u32, usize> =
        subjects
            .iter()
            .map(|&s| (s, set.subjects.iter().filter(|&&x| x == s).count()))
            .collect();
    let mut assigned = 0usize;
    let mut idx = 0usize;
    // fill test then val with whole subjects until the target counts are met
    for target in [n_test, n_val] {
        let slot = if assigned == 0 { 0u8 } else { 1u8 };
        let mut filled = 0usize;
        while filled < target && idx < subjects.len() {
            bucket[idx] = slot;
            filled += counts[&subjects[idx]];
            idx += 1;
        }
        assigned += 1;
    }
    for (i, &s) in subjects.iter().enumerate() {
        subject_slot.insert(s, bucket[i]);
    }
    let mut splits = Splits { train: vec![], val: vec![], test: vec![] };
    for &i in order {
        match subject_slot[&set.subjects[i]] {
            0 => splits.test.push(i),
            1 => splits.val.push(i),
            _ => splits.train.push(i),
        }
    }
    splits
}

/// Splits window indices and subsamples training labels per class.
/// Deterministic for a fixed seed stream.
pub fn split_and_subsample(
    set: &WindowSet,
    spec: &SplitSpec,
    n_classes: usize,
    seeds: &SeedStream,
) -> Result<Splits> {
    validate(spec)?;
    let n = set.len();
    if n == 0 {
        return Err(Error::config("cannot split an empty window set"));
    }
    let mut rng = seeds.stream("data/split");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let n_test = (spec.test * n as f64).round() as usize;
    let n_val = (spec.val * n as f64).round() as usize;
    let mut splits = match spec.grouping {
        Grouping::Random => partition_random(&order, n_test, n_val),
        Grouping::BySubject => partition_by_subject(set, &order, n_test, n_val, &mut rng),
    };
    if splits.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }

    splits.train = subsample_per_class(&splits.train, set, spec.label_fraction, n_classes, seeds)?;
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

/// Keeps ceil(fraction * count) training windows per class. A fraction of 1
/// keeps every index untouched.
pub fn subsample_per_class(
    train: &[usize],
    set: &WindowSet,
    fraction: f64,
    n_classes: usize,
    seeds: &SeedStream,
) -> Result<Vec<usize>> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in train {
        let l = set.labels[i] as usize;
        if l >= n_classes {
            return Err(Error::config(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        per_class[l].push(i);
    }
    for (c, pool) in per_class.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::config(format!(
                "class {c} is absent from the training pool"
            )));
        }
    }
    if fraction == 1.0 {
        return Ok(train.to_vec());
    }
    let mut rng = seeds.stream("data/subsample");
    let mut kept = Vec::new();
    for pool in &mut per_class {
        pool.shuffle(&mut rng);
        let keep = (fraction * pool.len() as f64).ceil() as usize;
        kept.extend_from_slice(&pool[..keep.min(pool.len())]);
    }
    Ok(kept)
}
