//! Timing-free data cache: line membership is the only observable.

use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheModel {
    line_size: u64,
    lines: BTreeSet<u64>,
}

impl CacheModel {
    pub fn new(line_size: u64) -> Self {
        assert!(line_size.is_power_of_two());
        CacheModel { line_size, lines: BTreeSet::new() }
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr & !(self.line_size - 1)
    }

    /// Bring in every line touched by an access of `len` bytes.
    pub fn touch(&mut self, addr: u64, len: u64) {
        let first = self.line_of(addr);
        let last = self.line_of(addr.wrapping_add(len - 1));
        self.lines.insert(first);
        self.lines.insert(last);
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.lines.contains(&self.line_of(addr))
    }

    pub fn flush(&mut self) {
        self.lines.clear();
    }

    pub fn flush_range(&mut self, lo: u64, hi: u64) {
        let lo = self.line_of(lo);
        self.lines.retain(|&l| l < lo || l >= hi);
    }

    pub fn lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.lines.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straddling_access_touches_two_lines() {
        let mut c = CacheModel::new(64);
        c.touch(60, 8);
        assert!(c.contains(0) && c.contains(64));
        assert_eq!(c.len(), 2);
        c.flush_range(64, 128);
        assert!(c.contains(0) && !c.contains(64));
    }
}
