use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Per-depth partitions of the task set. Depth 0 is the block next to the
/// input; each deeper partition refines the one above it.
///
/// The text form lists depths in order, e.g. `[[{0, 1, 2}], [{0}, {2}, {1}]]`.
/// Set order and element order are kept as given so that parsing and
/// printing round-trip exactly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Layout {
    partitions: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutViolation {
    #[error("layout has no blocks")]
    NoBlocks,
    #[error("depth {depth} has no task sets")]
    EmptyDepth { depth: usize },
    #[error("depth {depth} contains an empty task set")]
    EmptySet { depth: usize },
    #[error("depth {depth}: task {task} appears in more than one set")]
    Overlap { depth: usize, task: usize },
    #[error("depth {depth} covers tasks {found:?}, expected {expected:?}")]
    Coverage { depth: usize, expected: Vec<usize>, found: Vec<usize> },
    #[error("depth {depth}: set {set:?} is not contained in a single set of depth {}", depth - 1)]
    NotARefinement { depth: usize, set: Vec<usize> },
    #[error("layout covers tasks {found:?}, expected 0..{tasks}")]
    TaskCount { tasks: usize, found: Vec<usize> },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot parse layout at byte {offset}: {reason}")]
pub struct LayoutParseError {
    pub offset: usize,
    pub reason: String,
}

impl Layout {
    /// Wraps partitions without validating them; see [`Layout::validate`].
    pub fn new(partitions: Vec<Vec<Vec<usize>>>) -> Self {
        Self { partitions }
    }

    /// Depth `k` shares everything for `k < shared`, every deeper depth puts each
    /// task in its own set. `shared == blocks` is all-shared, `0` is independent.
    pub fn sharing_level(tasks: usize, blocks: usize, shared: usize) -> Self {
        let all: Vec<usize> = (0..tasks).collect();
        let singles: Vec<Vec<usize>> = (0..tasks).map(|t| vec![t]).collect();
        let partitions =
            (0..blocks).map(|depth| if depth < shared { vec![all.clone()] } else { singles.clone() }).collect();
        Self { partitions }
    }

    pub fn all_shared(tasks: usize, blocks: usize) -> Self {
        Self::sharing_level(tasks, blocks, blocks)
    }

    pub fn independent(tasks: usize, blocks: usize) -> Self {
        Self::sharing_level(tasks, blocks, 0)
    }

    pub fn blocks(&self) -> usize {
        self.partitions.len()
    }

    pub fn partitions(&self) -> &[Vec<Vec<usize>>] {
        &self.partitions
    }

    /// Task sets at `depth`.
    pub fn depth(&self, depth: usize) -> &[Vec<usize>] {
        &self.partitions[depth]
    }

    /// Number of tasks covered by the first depth.
    pub fn task_count(&self) -> usize {
        self.partitions.first().map_or(0, |p| p.iter().map(Vec::len).sum())
    }

    /// Number of leading depths whose partition is a single set.
    pub fn shared_depths(&self) -> usize {
        self.partitions.iter().take_while(|p| p.len() == 1).count()
    }

    /// Checks both layout invariants. Depths in violations are counted from 1.
    pub fn validate(&self) -> Result<(), LayoutViolation> {
        let first = self.partitions.first().ok_or(LayoutViolation::NoBlocks)?;
        let expected: BTreeSet<usize> = first.iter().flatten().copied().collect();
        let n = expected.len();
        if expected.iter().copied().ne(0..n) {
            return Err(LayoutViolation::TaskCount { tasks: n, found: expected.into_iter().collect() });
        }
        for (i, sets) in self.partitions.iter().enumerate() {
            let depth = i + 1;
            if sets.is_empty() {
                return Err(LayoutViolation::EmptyDepth { depth });
            }
            let mut seen = BTreeSet::new();
            for set in sets {
                if set.is_empty() {
                    return Err(LayoutViolation::EmptySet { depth });
                }
                for &t in set {
                    if !seen.insert(t) {
                        return Err(LayoutViolation::Overlap { depth, task: t });
                    }
                }
            }
            if seen != expected {
                return Err(LayoutViolation::Coverage {
                    depth,
                    expected: expected.iter().copied().collect(),
                    found: seen.into_iter().collect(),
                });
            }
            if i > 0 {
                let parent = &self.partitions[i - 1];
                for set in sets {
                    let contained = parent.iter().any(|p| set.iter().all(|t| p.contains(t)));
                    if !contained {
                        return Err(LayoutViolation::NotARefinement { depth, set: set.clone() });
                    }
                }
            }
        }
        Ok(())
    }

    /// Index of the set containing `task` at `depth`.
    pub fn set_of(&self, depth: usize, task: usize) -> Option<usize> {
        self.partitions.get(depth)?.iter().position(|s| s.contains(&task))
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, sets) in self.partitions.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str("[")?;
            for (j, set) in sets.iter().enumerate() {
                if j > 0 {
                    f.write_str(", ")?;
                }
                f.write_str("{")?;
                for (k, t) in set.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{t}")?;
                }
                f.write_str("}")?;
            }
            f.write_str("]")?;
        }
        f.write_str("]")
    }
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.text[self.pos..].starts_with(char::is_whitespace) {
            self.pos += self.text[self.pos..].chars().next().map_or(1, char::len_utf8);
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.text[self.pos..].chars().next()
    }

    fn err(&self, reason: impl Into<String>) -> LayoutParseError {
        LayoutParseError { offset: self.pos, reason: reason.into() }
    }

    fn expect(&mut self, c: char) -> Result<(), LayoutParseError> {
        match self.peek() {
            Some(found) if found == c => {
                self.pos += 1;
                Ok(())
            }
            Some(found) => Err(self.err(format!("expected `{c}`, found `{found}`"))),
            None => Err(self.err(format!("expected `{c}`, found end of input"))),
        }
    }

    /// Parses `open item (, item)* close`, allowing an empty list.
    fn list<T>(
        &mut self,
        open: char,
        close: char,
        mut item: impl FnMut(&mut Self) -> Result<T, LayoutParseError>,
    ) -> Result<Vec<T>, LayoutParseError> {
        self.expect(open)?;
        let mut out = Vec::new();
        if self.peek() == Some(close) {
            self.pos += 1;
            return Ok(out);
        }
        loop {
            out.push(item(self)?);
            match self.peek() {
                Some(',') => self.pos += 1,
                Some(c) if c == close => {
                    self.pos += 1;
                    return Ok(out);
                }
                _ => return Err(self.err(format!("expected `,` or `{close}`"))),
            }
        }
    }

    fn number(&mut self) -> Result<usize, LayoutParseError> {
        self.skip_ws();
        let digits = self.text[self.pos..].bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return Err(self.err("expected a task id"));
        }
        let v = self.text[self.pos..self.pos + digits].parse().map_err(|_| self.err("task id out of range"))?;
        self.pos += digits;
        Ok(v)
    }
}

impl FromStr for Layout {
    type Err = LayoutParseError;

    /// Parses the bracketed text form. The result is not validated.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut c = Cursor { text: s, pos: 0 };
        let partitions = c.list('[', ']', |c| c.list('[', ']', |c| c.list('{', '}', Cursor::number)))?;
        if c.peek().is_some() {
            return Err(c.err("trailing characters"));
        }
        Ok(Layout { partitions })
    }
}

impl Serialize for Layout {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Layout {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_rows_validate() {
        let all_shared: Layout = "[[{0, 1, 2}], [{0, 1, 2}], [{0, 1, 2}], [{0, 1, 2}], [{0, 1, 2}]]".parse().unwrap();
        assert_eq!(all_shared.validate(), Ok(()));
        assert_eq!(all_shared, Layout::all_shared(3, 5));
        let ind: Layout =
            "[[{0}, {2}, {1}], [{0}, {2}, {1}], [{0}, {2}, {1}], [{0}, {2}, {1}], [{0}, {2}, {1}]]".parse().unwrap();
        assert_eq!(ind.validate(), Ok(()));
        let mixed: Layout = "[[{0, 1, 2}], [{0, 1, 2}], [{2}, {0, 1}], [{2}, {1}, {0}], [{2}, {1}, {0}]]".parse().unwrap();
        assert_eq!(mixed.validate(), Ok(()));
    }

    #[test]
    fn re_merging_is_rejected_at_second_depth() {
        let l: Layout = "[[{0}, {1}], [{0, 1}]]".parse().unwrap();
        assert_eq!(l.validate(), Err(LayoutViolation::NotARefinement { depth: 2, set: vec![0, 1] }));
    }

    #[test]
    fn other_violations() {
        assert_eq!(Layout::new(vec![]).validate(), Err(LayoutViolation::NoBlocks));
        let overlap: Layout = "[[{0, 1}, {1}]]".parse().unwrap();
        assert_eq!(overlap.validate(), Err(LayoutViolation::Overlap { depth: 1, task: 1 }));
        let missing: Layout = "[[{0, 1}], [{0}]]".parse().unwrap();
        assert!(matches!(missing.validate(), Err(LayoutViolation::Coverage { depth: 2, .. })));
        let gap: Layout = "[[{0, 2}]]".parse().unwrap();
        assert!(matches!(gap.validate(), Err(LayoutViolation::TaskCount { .. })));
        let empty: Layout = "[[{0}, {}]]".parse().unwrap();
        assert_eq!(empty.validate(), Err(LayoutViolation::EmptySet { depth: 1 }));
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let e = "[[{0, 1}], [{0}".parse::<Layout>().unwrap_err();
        assert_eq!(e.offset, 15);
        assert!("[[{a}]]".parse::<Layout>().is_err());
        assert!("[[{0}]] x".parse::<Layout>().is_err());
    }

    #[test]
    fn sharing_levels() {
        for k in 0..=5 {
            let l = Layout::sharing_level(3, 5, k);
            l.validate().unwrap();
            assert_eq!(l.shared_depths(), k);
        }
        assert_eq!(Layout::independent(2, 2).to_string(), "[[{0}, {1}], [{0}, {1}]]");
    }

    /// Random valid layout built by splitting sets while descending.
    fn random_layout(rng: &mut ChaCha8Rng, tasks: usize, blocks: usize) -> Layout {
        let mut ids: Vec<usize> = (0..tasks).collect();
        ids.shuffle(rng);
        let mut current = vec![ids];
        let mut partitions = Vec::new();
        for _ in 0..blocks {
            let mut next = Vec::new();
            for set in current {
                if set.len() > 1 && rng.random_bool(0.4) {
                    let cut = rng.random_range(1..set.len());
                    next.push(set[..cut].to_vec());
                    next.push(set[cut..].to_vec());
                } else {
                    next.push(set);
                }
            }
            next.shuffle(rng);
            partitions.push(next.clone());
            current = next;
        }
        Layout::new(partitions)
    }

    proptest! {
        #[test]
        fn split_sequences_validate_and_round_trip(seed in any::<u64>(), tasks in 1usize..7, blocks in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_layout(&mut rng, tasks, blocks);
            prop_assert_eq!(l.validate(), Ok(()));
            let text = l.to_string();
            let back: Layout = text.parse().unwrap();
            prop_assert_eq!(&back, &l);
            prop_assert_eq!(back.to_string(), text);
        }

        #[test]
        fn merging_after_a_split_is_rejected(seed in any::<u64>(), tasks in 2usize..7, blocks in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_layout(&mut rng, tasks, blocks);
            let mut parts = l.partitions().to_vec();
            let Some(d) = (0..blocks).find(|&d| parts[d].len() > 1) else { return Ok(()) };
            let last = parts.len() - 1;
            if d == last {
                return Ok(());
            }
            // Re-merge everything one level below the first split.
            parts[d + 1] = vec![(0..tasks).collect()];
            let merged = Layout::new(parts);
            let rejected = matches!(merged.validate(), Err(LayoutViolation::NotARefinement { depth, .. }) if depth == d + 2);
            prop_assert!(rejected);
        }
    }
}
