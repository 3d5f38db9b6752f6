//! Minimum set partition of a collection of target sets into mini-sets.
//!
//! Every target is exactly a union of mini-sets, and mini-sets are pairwise
//! disjoint. The partition produced is the coarsest one with that property:
//! two elements share a mini-set iff they belong to exactly the same
//! targets, which [`signature_partition`] computes directly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub type Element = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniSetPartition {
    /// Mini-sets in creation order; a mini-set's id is its position.
    pub minisets: Vec<BTreeSet<Element>>,
    /// For each input target, the ids of the mini-sets composing it.
    pub membership: Vec<Vec<usize>>,
}

impl MiniSetPartition {
    fn from_minisets(minisets: Vec<BTreeSet<Element>>, targets: &[BTreeSet<Element>]) -> Self {
        let membership = targets
            .iter()
            .map(|t| {
                minisets
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.iter().next().is_some_and(|e| t.contains(e)))
                    .map(|(id, _)| id)
                    .collect()
            })
            .collect();
        MiniSetPartition { minisets, membership }
    }

    pub fn len(&self) -> usize {
        self.minisets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.minisets.is_empty()
    }

    /// The partition as an order-free set of sets.
    pub fn as_set_of_sets(&self) -> BTreeSet<BTreeSet<Element>> {
        self.minisets.iter().cloned().collect()
    }

    /// Union of the mini-sets listed for target `t`.
    pub fn reconstruct(&self, t: usize) -> BTreeSet<Element> {
        self.membership[t]
            .iter()
            .flat_map(|&id| self.minisets[id].iter().copied())
            .collect()
    }
}

/// Splits mini-sets incrementally: each incoming target cuts every existing
/// mini-set into its intersection with the target and the remainder, and
/// whatever of the target is left over becomes a new mini-set.
pub fn min_set_partition(targets: &[BTreeSet<Element>]) -> MiniSetPartition {
    let mut result: Vec<BTreeSet<Element>> = Vec::new();
    for target in targets {
        let mut remaining = target.clone();
        let mut next = Vec::with_capacity(result.len() * 2 + 1);
        for mini in &result {
            let inside: BTreeSet<Element> = remaining.intersection(mini).copied().collect();
            let outside: BTreeSet<Element> = mini.difference(target).copied().collect();
            next.push(inside);
            next.push(outside);
            remaining = remaining.difference(mini).copied().collect();
        }
        if !remaining.is_empty() {
            next.push(remaining);
        }
        next.retain(|s| !s.is_empty());
        result = next;
    }
    MiniSetPartition::from_minisets(result, targets)
}

/// Groups elements by their membership vector over `targets`. Mini-sets
/// are ordered by their smallest element.
pub fn signature_partition(targets: &[BTreeSet<Element>]) -> MiniSetPartition {
    let universe: BTreeSet<Element> = targets.iter().flatten().copied().collect();
    let mut groups: BTreeMap<Vec<bool>, BTreeSet<Element>> = BTreeMap::new();
    for e in universe {
        let signature = targets.iter().map(|t| t.contains(&e)).collect();
        groups.entry(signature).or_default().insert(e);
    }
    let mut minisets: Vec<BTreeSet<Element>> = groups.into_values().collect();
    minisets.sort_by_key(|m| *m.iter().next().expect("non-empty group"));
    MiniSetPartition::from_minisets(minisets, targets)
}

/// For each mini-set, how many of the `(class, iteration)` pairs it takes
/// part in. `target_pairs[t]` lists the pairs behind target `t`; pairs
/// shared by several targets are counted once.
pub fn miniset_appearances<P: Ord + Clone>(p: &MiniSetPartition, target_pairs: &[Vec<P>]) -> Vec<usize> {
    let mut seen: Vec<BTreeSet<P>> = vec![BTreeSet::new(); p.len()];
    for (t, ids) in p.membership.iter().enumerate() {
        for &id in ids {
            seen[id].extend(target_pairs[t].iter().cloned());
        }
    }
    seen.into_iter().map(|s| s.len()).collect()
}
