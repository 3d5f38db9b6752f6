//! Rule-based anomaly iterations per class, and anomaly filters per
//! iteration.
//!
//! Each image contributes a 0/1 correctness sequence over dumps. The left
//! rule flags a flip that follows a window of `k` equal values; the right
//! rule flags a flip that starts a window of `k` equal values. Both flag the
//! flip position itself, so the two glyph kinds line up on the same dump.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ValidationMatrix;
use crate::store::RunStore;

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_MIN_FRACTION: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Left,
    Right,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleKind::Left => "left",
            RuleKind::Right => "right",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub class_id: u32,
    pub iteration: u64,
    pub kind: RuleKind,
    /// Number of flagged images.
    pub score: u32,
    pub score_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyScores {
    pub left: Vec<u32>,
    pub right: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyFilterSet {
    pub iteration: u64,
    pub layer_id: String,
    pub filters: BTreeSet<u32>,
}

fn check_window(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("window k must be at least 1".into()));
    }
    Ok(())
}

pub(crate) fn check_fraction(min_fraction: f64) -> Result<()> {
    if !(min_fraction > 0.0 && min_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "min_fraction must lie in (0, 1], got {min_fraction}"
        )));
    }
    Ok(())
}

fn all_equal(window: &[bool]) -> bool {
    window.iter().all(|&b| b == window[0])
}

/// `flag[j]` is set when `seq[j−k..j]` are all equal and `seq[j]` differs
/// from `seq[j−1]`.
pub fn left_flags(seq: &[bool], k: usize) -> Result<Vec<bool>> {
    check_window(k)?;
    Ok((0..seq.len())
        .map(|j| j >= k && seq[j] != seq[j - 1] && all_equal(&seq[j - k..j]))
        .collect())
}

/// `flag[j]` is set when `seq[j]` differs from `seq[j−1]` and
/// `seq[j..j+k]` are all equal. Positions without a full window are 0.
pub fn right_flags(seq: &[bool], k: usize) -> Result<Vec<bool>> {
    check_window(k)?;
    Ok((0..seq.len())
        .map(|j| j >= 1 && j + k <= seq.len() && seq[j] != seq[j - 1] && all_equal(&seq[j..j + k]))
        .collect())
}

/// Per-dump sums of the left and right flags over a class's images.
pub fn class_anomaly_scores(vm: &ValidationMatrix, class_id: u32, k: usize) -> Result<AnomalyScores> {
    check_window(k)?;
    let images = vm.class_images(class_id)?;
    let n = vm.dump_count();
    let mut left = vec![0u32; n];
    let mut right = vec![0u32; n];
    for &img in images {
        let seq = vm.sequence(img);
        for (s, f) in left.iter_mut().zip(left_flags(seq, k)?) {
            *s += u32::from(f);
        }
        for (s, f) in right.iter_mut().zip(right_flags(seq, k)?) {
            *s += u32::from(f);
        }
    }
    Ok(AnomalyScores { left, right })
}

/// Events of one class whose score reaches `min_fraction` of the class
/// size, ordered by iteration with the left rule first.
pub fn events_from_scores(
    class_id: u32,
    class_size: usize,
    iterations: &[u64],
    scores: &AnomalyScores,
    min_fraction: f64,
) -> Vec<AnomalyEvent> {
    let m = class_size as f64;
    let mut out = Vec::new();
    for (j, &iteration) in iterations.iter().enumerate() {
        for (kind, score) in [(RuleKind::Left, scores.left[j]), (RuleKind::Right, scores.right[j])] {
            let fraction = score as f64 / m;
            if score > 0 && fraction >= min_fraction {
                out.push(AnomalyEvent {
                    class_id,
                    iteration,
                    kind,
                    score,
                    score_fraction: fraction,
                });
            }
        }
    }
    out
}

/// Anomaly events across all classes, sorted by `(class, iteration)`.
pub fn detect_anomalies(
    vm: &ValidationMatrix,
    iterations: &[u64],
    k: usize,
    min_fraction: f64,
) -> Result<Vec<AnomalyEvent>> {
    check_window(k)?;
    check_fraction(min_fraction)?;
    if iterations.len() != vm.dump_count() {
        return Err(Error::LengthMismatch {
            left: iterations.len(),
            right: vm.dump_count(),
        });
    }
    let per_class: Vec<Vec<AnomalyEvent>> = (0..vm.class_count() as u32)
        .into_par_iter()
        .map(|class| {
            let scores = class_anomaly_scores(vm, class, k)?;
            let size = vm.class_size(class)?;
            Ok(events_from_scores(class, size, iterations, &scores, min_fraction))
        })
        .collect::<Result<_>>()?;
    Ok(per_class.into_iter().flatten().collect())
}

/// Distinct anomaly iterations, ascending.
pub fn anomaly_iterations(events: &[AnomalyEvent]) -> BTreeSet<u64> {
    events.iter().map(|e| e.iteration).collect()
}

/// For every distinct anomaly iteration, the global top `top_k` filters
/// grouped by layer (network order). Layers without anomaly filters at an
/// iteration are omitted.
pub fn anomaly_filters(
    store: &RunStore,
    events: &[AnomalyEvent],
    top_k: usize,
) -> Result<BTreeMap<u64, Vec<AnomalyFilterSet>>> {
    let h = store.hierarchy();
    let mut out = BTreeMap::new();
    for t in anomaly_iterations(events) {
        let mut by_layer: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
        for f in store.query_top_filters(t, top_k)? {
            let pos = h.layer_position(&f.layer_id)?;
            by_layer.entry(pos).or_default().insert(f.filter);
        }
        let sets = by_layer
            .into_iter()
            .map(|(pos, filters)| AnomalyFilterSet {
                iteration: t,
                layer_id: h.layer(pos).id.clone(),
                filters,
            })
            .collect();
        out.insert(t, sets);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &[u8]) -> Vec<bool> {
        s.iter().map(|&b| b == 1).collect()
    }

    fn ones(flags: &[bool]) -> Vec<usize> {
        flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
    }

    #[test]
    fn left_rule_examples() {
        assert_eq!(left_flags(&bits(&[1, 1, 1, 0]), 3).unwrap(), bits(&[0, 0, 0, 1]));
        assert_eq!(left_flags(&bits(&[1, 1, 1, 1]), 3).unwrap(), bits(&[0, 0, 0, 0]));
        assert!(ones(&left_flags(&bits(&[1, 0, 1, 0, 1, 0]), 3).unwrap()).is_empty());
        assert!(left_flags(&bits(&[1]), 0).is_err());
    }

    #[test]
    fn right_rule_examples() {
        assert_eq!(ones(&right_flags(&bits(&[0, 1, 1, 1]), 3).unwrap()), vec![1]);
        assert!(ones(&right_flags(&bits(&[1, 1, 1, 1, 1]), 3).unwrap()).is_empty());
        assert_eq!(ones(&right_flags(&bits(&[0, 1, 0, 0, 0]), 3).unwrap()), vec![2]);
        assert!(right_flags(&bits(&[1]), 0).is_err());
    }

    /// Brute-force restatement of both rules used to cross-check the
    /// windowed implementation on every short sequence.
    fn brute(seq: &[bool], k: usize) -> (Vec<bool>, Vec<bool>) {
        let n = seq.len();
        let mut left = vec![false; n];
        let mut right = vec![false; n];
        for j in 1..n {
            if seq[j] == seq[j - 1] {
                continue;
            }
            if j >= k {
                let mut stable = true;
                for i in j - k..j {
                    stable &= seq[i] == seq[j - 1];
                }
                left[j] = stable;
            }
            if j + k <= n {
                let mut stable = true;
                for i in j..j + k {
                    stable &= seq[i] == seq[j];
                }
                right[j] = stable;
            }
        }
        (left, right)
    }

    #[test]
    fn rules_match_brute_force() {
        for n in 1..=10usize {
            for mask in 0u32..(1 << n) {
                let seq: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
                for k in 1..=4 {
                    let (l, r) = brute(&seq, k);
                    assert_eq!(left_flags(&seq, k).unwrap(), l);
                    assert_eq!(right_flags(&seq, k).unwrap(), r);
                }
            }
        }
    }

    #[test]
    fn larger_window_never_adds_flags() {
        for n in 1..=10usize {
            for mask in 0u32..(1 << n) {
                let seq: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
                for k in 1..=4 {
                    let (l0, l1) = (left_flags(&seq, k).unwrap(), left_flags(&seq, k + 1).unwrap());
                    let (r0, r1) = (right_flags(&seq, k).unwrap(), right_flags(&seq, k + 1).unwrap());
                    assert!(l0.iter().zip(&l1).all(|(a, b)| *a || !*b));
                    assert!(r0.iter().zip(&r1).all(|(a, b)| *a || !*b));
                }
            }
        }
    }

    #[test]
    fn events_respect_threshold() {
        let scores = AnomalyScores {
            left: vec![0, 0, 0, 3],
            right: vec![0, 2, 0, 0],
        };
        let its = [0, 10, 20, 30];
        let ev = events_from_scores(4, 3, &its, &scores, 1.0);
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].iteration, ev[0].kind, ev[0].score), (30, RuleKind::Left, 3));
        let ev = events_from_scores(4, 3, &its, &scores, 0.5);
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].iteration, 10);
        assert!(check_fraction(0.0).is_err());
        assert!(check_fraction(1.5).is_err());
        assert!(check_fraction(1.0).is_ok());
    }
}
