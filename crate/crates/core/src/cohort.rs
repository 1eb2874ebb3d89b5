//! Membership counts, equal-width grouping of the count range, and seeded
//! per-group sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::MembershipSnapshot;
use crate::seed;

pub const GROUP_COUNT: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("no input: {0}")]
    Empty(&'static str),
    #[error("group {group} has {size} members, fewer than the {requested} requested")]
    DeficientGroup {
        group: usize,
        size: usize,
        requested: usize,
    },
    #[error("per_group must be at least 1")]
    ZeroPerGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipCount {
    pub ticker: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub group_index: usize,
    pub members: BTreeSet<String>,
}

/// The five groups together with the six bin edges `lo + k·(hi − lo)/5`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub boundaries: [f64; GROUP_COUNT + 1],
    pub groups: Vec<GroupAssignment>,
}

/// Counts, per ticker ever observed, how many snapshots contain it.
/// Output is sorted by ticker.
pub fn membership_counts(
    snapshots: &[MembershipSnapshot],
) -> Result<Vec<MembershipCount>, CohortError> {
    if snapshots.is_empty() {
        return Err(CohortError::Empty("snapshots"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for snap in snapshots {
        for t in &snap.constituents {
            *counts.entry(t).or_default() += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(ticker, count)| MembershipCount {
            ticker: ticker.to_string(),
            count,
        })
        .collect())
}

pub fn group_boundaries(lo: usize, hi: usize) -> [f64; GROUP_COUNT + 1] {
    let (lo, hi) = (lo as f64, hi as f64);
    let width = (hi - lo) / GROUP_COUNT as f64;
    std::array::from_fn(|k| lo + k as f64 * width)
}

/// Group index for `count` against precomputed edges. The top edge is closed.
fn group_of(count: usize, bounds: &[f64; GROUP_COUNT + 1]) -> usize {
    let c = count as f64;
    let (lo, hi) = (bounds[0], bounds[GROUP_COUNT]);
    if hi <= lo {
        return 0;
    }
    let width = (hi - lo) / GROUP_COUNT as f64;
    let mut k = (((c - lo) / width).floor().max(0.0) as usize).min(GROUP_COUNT - 1);
    // the floor can land one off when c sits on an edge; settle against the edges themselves
    while k + 1 < GROUP_COUNT && bounds[k + 1] <= c {
        k += 1;
    }
    while k > 0 && bounds[k] > c {
        k -= 1;
    }
    k
}

pub fn partition_into_fifths(counts: &[MembershipCount]) -> Result<Partition, CohortError> {
    let lo = counts.iter().map(|c| c.count).min().ok_or(CohortError::Empty("counts"))?;
    let hi = counts.iter().map(|c| c.count).max().unwrap_or(lo);
    let boundaries = group_boundaries(lo, hi);
    let mut groups: Vec<GroupAssignment> = (0..GROUP_COUNT)
        .map(|group_index| GroupAssignment {
            group_index,
            members: BTreeSet::new(),
        })
        .collect();
    for c in counts {
        groups[group_of(c.count, &boundaries)]
            .members
            .insert(c.ticker.clone());
    }
    Ok(Partition { boundaries, groups })
}

/// Samples `per_group` tickers from every group without replacement.
///
/// Groups are visited in index order and each group's members in sorted
/// order, so one generator seeded with `seed` fixes the whole draw. With
/// `allow_deficient`, a group smaller than `per_group` contributes all of its
/// members instead of failing.
pub fn sample_cohort(
    groups: &[GroupAssignment],
    per_group: usize,
    seed: u64,
    allow_deficient: bool,
) -> Result<BTreeSet<String>, CohortError> {
    if per_group == 0 {
        return Err(CohortError::ZeroPerGroup);
    }
    if !allow_deficient {
        if let Some(g) = groups.iter().find(|g| g.members.len() < per_group) {
            return Err(CohortError::DeficientGroup {
                group: g.group_index,
                size: g.members.len(),
                requested: per_group,
            });
        }
    }
    let mut rng = seed::rng(seed);
    let mut out = BTreeSet::new();
    for g in groups {
        let mut pool: Vec<&String> = g.members.iter().collect();
        let take = per_group.min(pool.len());
        // partial Fisher-Yates: the first `take` slots become the sample
        for i in 0..take {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        out.extend(pool[..take].iter().map(|s| (*s).clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortGroupReport {
    pub index: usize,
    pub size: usize,
    pub members: Vec<String>,
}

/// JSON document emitted by the `cohort` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub group_boundaries: Vec<f64>,
    pub groups: Vec<CohortGroupReport>,
    pub sample: Vec<String>,
    pub seed: u64,
    pub generator: String,
}

pub fn cohort_report(
    snapshots: &[MembershipSnapshot],
    per_group: usize,
    seed: u64,
    allow_deficient: bool,
) -> Result<CohortReport, CohortError> {
    let counts = membership_counts(snapshots)?;
    let partition = partition_into_fifths(&counts)?;
    let sample = sample_cohort(&partition.groups, per_group, seed, allow_deficient)?;
    Ok(CohortReport {
        group_boundaries: partition.boundaries.to_vec(),
        groups: partition
            .groups
            .iter()
            .map(|g| CohortGroupReport {
                index: g.group_index,
                size: g.members.len(),
                members: g.members.iter().cloned().collect(),
            })
            .collect(),
        sample: sample.into_iter().collect(),
        seed,
        generator: seed::GENERATOR.to_string(),
    })
}
