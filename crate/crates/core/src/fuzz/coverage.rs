//! Bucketed edge coverage plus the set of executed memory accesses.

use std::collections::BTreeSet;

use crate::exec::MAP_SIZE;

/// Coverage observed by a single execution.
#[derive(Clone, Debug, Default)]
pub struct TraceCoverage {
    /// Raw hit counters, `MAP_SIZE` entries (empty if nothing ran).
    pub edges: Box<[u8]>,
    /// Ids of the memory instructions that executed.
    pub accesses: Vec<u32>,
}

/// Maps a hit count to its bucket bit: 1, 2, 3, 4-7, 8-15, 16-31, 32-127,
/// 128 and above.
pub fn bucket(count: u8) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 4,
        4..=7 => 8,
        8..=15 => 16,
        16..=31 => 32,
        32..=127 => 64,
        _ => 128,
    }
}

/// Campaign-wide coverage: for each edge, the set of buckets seen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageMap {
    seen: Box<[u8]>,
    accesses: BTreeSet<u32>,
}

impl Default for CoverageMap {
    fn default() -> Self {
        CoverageMap {
            seen: vec![0u8; MAP_SIZE].into_boxed_slice(),
            accesses: BTreeSet::new(),
        }
    }
}

impl CoverageMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_trace(t: &TraceCoverage) -> Self {
        let mut m = CoverageMap::new();
        m.merge_trace(t);
        m
    }

    /// Whether `t` would add a bucket or an access.
    pub fn has_new(&self, t: &TraceCoverage) -> bool {
        t.edges
            .iter()
            .zip(self.seen.iter())
            .any(|(&c, &s)| bucket(c) & !s != 0)
            || t.accesses.iter().any(|a| !self.accesses.contains(a))
    }

    /// Adds `t`; returns whether anything was new.
    pub fn merge_trace(&mut self, t: &TraceCoverage) -> bool {
        let mut new = false;
        for (s, &c) in self.seen.iter_mut().zip(t.edges.iter()) {
            let b = bucket(c);
            if b & !*s != 0 {
                *s |= b;
                new = true;
            }
        }
        for &a in &t.accesses {
            new |= self.accesses.insert(a);
        }
        new
    }

    /// Union with another map; returns whether anything was new.
    pub fn merge(&mut self, other: &CoverageMap) -> bool {
        let mut new = false;
        for (s, &o) in self.seen.iter_mut().zip(other.seen.iter()) {
            if o & !*s != 0 {
                *s |= o;
                new = true;
            }
        }
        for &a in &other.accesses {
            new |= self.accesses.insert(a);
        }
        new
    }

    /// Number of (edge, bucket) pairs seen.
    pub fn nonzero_buckets(&self) -> usize {
        self.seen.iter().map(|s| s.count_ones() as usize).sum()
    }

    pub fn edges_hit(&self) -> usize {
        self.seen.iter().filter(|&&s| s != 0).count()
    }

    pub fn accesses(&self) -> &BTreeSet<u32> {
        &self.accesses
    }

    /// Whether every bucket and access of `self` is also in `other`.
    pub fn is_subset(&self, other: &CoverageMap) -> bool {
        self.seen.iter().zip(other.seen.iter()).all(|(&a, &b)| a & !b == 0) && self.accesses.is_subset(&other.accesses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_boundaries() {
        let expect = [(0, 0), (1, 1), (2, 2), (3, 4), (4, 8), (7, 8), (8, 16), (15, 16), (16, 32), (31, 32), (32, 64), (127, 64), (128, 128), (255, 128)];
        for (c, b) in expect {
            assert_eq!(bucket(c), b, "count {c}");
        }
    }

    #[test]
    fn repeated_trace_is_not_new() {
        let mut edges = vec![0u8; MAP_SIZE];
        edges[5] = 3;
        let t = TraceCoverage {
            edges: edges.into_boxed_slice(),
            accesses: vec![1],
        };
        let mut m = CoverageMap::new();
        assert!(m.merge_trace(&t));
        assert!(!m.has_new(&t));
        assert!(!m.merge_trace(&t));
        assert_eq!(m.nonzero_buckets(), 1);
    }
}
