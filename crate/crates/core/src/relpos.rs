//! Relative position of an answer span with respect to the nearest
//! question/context overlapping word.
//!
//! For an overlapping context word at index `j` and an answer occupying
//! tokens `s..=e`, the signed offset is `j - s` left of the span, `0` inside
//! it and `j - e` right of it. The label of an example is the offset with the
//! smallest magnitude; a tie between `-k` and `+k` is reported as
//! [`RelPosLabel::Ambiguous`] and no overlap at all as
//! [`RelPosLabel::NoOverlap`].
//!
//! Negative values mean the overlap precedes the answer (the answer is found
//! by looking to the right of the overlapping word).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "d", rename_all = "snake_case")]
pub enum RelPosLabel {
    Value(i64),
    Ambiguous,
    NoOverlap,
}

impl RelPosLabel {
    pub fn value(self) -> Option<i64> {
        match self {
            RelPosLabel::Value(d) => Some(d),
            _ => None,
        }
    }
}

impl fmt::Display for RelPosLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelPosLabel::Value(d) => write!(f, "{d}"),
            RelPosLabel::Ambiguous => f.write_str("ambiguous"),
            RelPosLabel::NoOverlap => f.write_str("no_overlap"),
        }
    }
}

/// Signed offset of context index `j` from the span `s..=e`.
pub fn signed_offset(j: usize, s: usize, e: usize) -> i64 {
    debug_assert!(s <= e);
    if j < s {
        j as i64 - s as i64
    } else if j > e {
        j as i64 - e as i64
    } else {
        0
    }
}

/// Labels the span `s..=e` given the context overlap mask.
///
/// Only the nearest overlap on each side matters, so this scans outward
/// instead of materialising the full offset set.
pub fn relative_position(mask: &[bool], s: usize, e: usize) -> RelPosLabel {
    debug_assert!(s <= e && e < mask.len());
    if mask[s..=e].iter().any(|&m| m) {
        return RelPosLabel::Value(0);
    }
    let left = mask[..s].iter().rposition(|&m| m).map(|j| signed_offset(j, s, e));
    let right = mask[e + 1..]
        .iter()
        .position(|&m| m)
        .map(|k| signed_offset(e + 1 + k, s, e));

    match (left, right) {
        (None, None) => RelPosLabel::NoOverlap,
        (Some(l), None) => RelPosLabel::Value(l),
        (None, Some(r)) => RelPosLabel::Value(r),
        (Some(l), Some(r)) => match (-l).cmp(&r) {
            std::cmp::Ordering::Less => RelPosLabel::Value(l),
            std::cmp::Ordering::Greater => RelPosLabel::Value(r),
            std::cmp::Ordering::Equal => RelPosLabel::Ambiguous,
        },
    }
}

/// The seven evaluation strata used for per-position reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    LeMinus3,
    Minus2,
    Minus1,
    Zero,
    Plus1,
    Plus2,
    GePlus3,
}

impl Bucket {
    pub const ALL: [Bucket; 7] = [
        Bucket::LeMinus3,
        Bucket::Minus2,
        Bucket::Minus1,
        Bucket::Zero,
        Bucket::Plus1,
        Bucket::Plus2,
        Bucket::GePlus3,
    ];

    pub fn from_value(d: i64) -> Bucket {
        match d {
            i64::MIN..=-3 => Bucket::LeMinus3,
            -2 => Bucket::Minus2,
            -1 => Bucket::Minus1,
            0 => Bucket::Zero,
            1 => Bucket::Plus1,
            2 => Bucket::Plus2,
            _ => Bucket::GePlus3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::LeMinus3 => "d<=-3",
            Bucket::Minus2 => "d=-2",
            Bucket::Minus1 => "d=-1",
            Bucket::Zero => "d=0",
            Bucket::Plus1 => "d=1",
            Bucket::Plus2 => "d=2",
            Bucket::GePlus3 => "d>=3",
        }
    }

    /// Buckets whose values are all `<= -1`.
    pub const NEGATIVE: [Bucket; 3] = [Bucket::LeMinus3, Bucket::Minus2, Bucket::Minus1];
    /// Buckets whose values are all `>= 1`.
    pub const POSITIVE: [Bucket; 3] = [Bucket::Plus1, Bucket::Plus2, Bucket::GePlus3];
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Bucket::ALL
            .into_iter()
            .find(|b| b.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown bucket `{s}`")))
    }
}

/// Maps a `Value` label to its stratum; other labels must be filtered first.
pub fn bucket(label: RelPosLabel) -> Result<Bucket, Error> {
    match label {
        RelPosLabel::Value(d) => Ok(Bucket::from_value(d)),
        other => Err(Error::Unbucketable(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    /// Enumerates every overlap offset and takes the unique argmin of |d|.
    fn oracle(mask: &[bool], s: usize, e: usize) -> RelPosLabel {
        let offsets: BTreeSet<i64> = (0..mask.len())
            .filter(|&j| mask[j])
            .map(|j| {
                let (j, s, e) = (j as i64, s as i64, e as i64);
                if j < s {
                    j - s
                } else if j > e {
                    j - e
                } else {
                    0
                }
            })
            .collect();
        let Some(best) = offsets.iter().map(|d| d.abs()).min() else {
            return RelPosLabel::NoOverlap;
        };
        let winners: Vec<i64> = offsets.into_iter().filter(|d| d.abs() == best).collect();
        if winners.len() == 1 {
            RelPosLabel::Value(winners[0])
        } else {
            RelPosLabel::Ambiguous
        }
    }

    #[test]
    fn piecewise_offset() {
        assert_eq!(signed_offset(2, 3, 5), -1);
        assert_eq!(signed_offset(4, 3, 5), 0);
        assert_eq!(signed_offset(7, 3, 5), 2);
    }

    #[test]
    fn table_one_first_example() {
        // "This changed in 1924 with formal requirements ... offering Doctorate (PhD) degrees"
        // overlaps: in, Doctorate, degrees. Answer: 1924.
        let ctx = crate::text::tokenize(
            "This changed in 1924 with formal requirements developed for graduate degrees , including offering Doctorate ( PhD ) degrees",
        );
        let q = crate::text::tokenize(
            "The granting of Doctorate degrees first occurred in what year at Notre Dame ?",
        );
        let mask = crate::text::overlap_mask(&ctx, &q);
        assert_eq!(relative_position(&mask, 3, 3), RelPosLabel::Value(-1));
    }

    #[test]
    fn table_one_second_example() {
        let ctx = crate::text::tokenize(
            "The other magazine , The Juggler , is released twice a year and focuses on student literature and artwork",
        );
        let q = crate::text::tokenize("How often is Notre Dame's the Juggler published?");
        let mask = crate::text::overlap_mask(&ctx, &q);
        let twice = ctx.surfaces().position(|w| w == "twice").unwrap();
        assert_eq!(relative_position(&mask, twice, twice), RelPosLabel::Value(-2));
    }

    #[test]
    fn symmetric_tie_is_ambiguous() {
        let mask = [false, true, false, true, false];
        assert_eq!(relative_position(&mask, 2, 2), RelPosLabel::Ambiguous);
    }

    #[test]
    fn empty_overlap() {
        assert_eq!(relative_position(&[false; 4], 1, 2), RelPosLabel::NoOverlap);
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket(RelPosLabel::Value(-5)).unwrap(), Bucket::LeMinus3);
        assert_eq!(bucket(RelPosLabel::Value(0)).unwrap(), Bucket::Zero);
        assert_eq!(bucket(RelPosLabel::Value(3)).unwrap(), Bucket::GePlus3);
        assert!(bucket(RelPosLabel::Ambiguous).is_err());
        assert!(bucket(RelPosLabel::NoOverlap).is_err());
    }

    #[test]
    fn bucket_labels_round_trip() {
        for b in Bucket::ALL {
            assert_eq!(b.label().parse::<Bucket>().unwrap(), b);
        }
    }

    #[test]
    fn exhaustive_small_contexts_match_oracle() {
        for n in 1..=8usize {
            for bits in 0u32..(1 << n) {
                let mask: Vec<bool> = (0..n).map(|i| bits & (1 << i) != 0).collect();
                for s in 0..n {
                    for e in s..n {
                        assert_eq!(
                            relative_position(&mask, s, e),
                            oracle(&mask, s, e),
                            "mask={mask:?} s={s} e={e}"
                        );
                    }
                }
            }
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<bool>, usize, usize)> {
        (1usize..=12).prop_flat_map(|n| {
            (proptest::collection::vec(any::<bool>(), n), 0..n, 0..n)
                .prop_map(|(m, a, b)| (m, a.min(b), a.max(b)))
        })
    }

    proptest! {
        #[test]
        fn random_instances_match_oracle((mask, s, e) in instance()) {
            prop_assert_eq!(relative_position(&mask, s, e), oracle(&mask, s, e));
        }

        #[test]
        fn zero_iff_overlap_inside_span((mask, s, e) in instance()) {
            let inside = mask[s..=e].iter().any(|&m| m);
            prop_assert_eq!(relative_position(&mask, s, e) == RelPosLabel::Value(0), inside);
        }

        #[test]
        fn translation_invariant((mask, s, e) in instance(), shift in 0usize..6) {
            let mut shifted = vec![false; shift];
            shifted.extend_from_slice(&mask);
            prop_assert_eq!(
                relative_position(&shifted, s + shift, e + shift),
                relative_position(&mask, s, e)
            );
        }
    }
}
