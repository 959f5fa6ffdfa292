//! Branch predictors: a direct-mapped target buffer, a 1-bit direction
//! table and a circular return stack.

/// Direct-mapped, untagged branch target buffer. Entries hold raw targets,
/// so any branch aliasing a slot can poison it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Btb {
    slots: Vec<Option<u64>>,
}

impl Btb {
    pub fn new(slots: usize) -> Self {
        assert!(slots.is_power_of_two(), "BTB size must be a power of two");
        Btb { slots: vec![None; slots] }
    }

    pub fn index(&self, pc: u64) -> usize {
        ((pc >> 2) as usize) & (self.slots.len() - 1)
    }

    pub fn lookup(&self, pc: u64) -> Option<u64> {
        self.slots[self.index(pc)]
    }

    pub fn update(&mut self, pc: u64, target: u64) {
        let i = self.index(pc);
        self.slots[i] = Some(target);
    }

    pub fn clear(&mut self) {
        self.slots.fill(None);
    }
}

/// Last-outcome predictor for conditional branches, indexed like the BTB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionTable {
    taken: Vec<bool>,
}

impl DirectionTable {
    pub fn new(slots: usize) -> Self {
        assert!(slots.is_power_of_two());
        DirectionTable { taken: vec![false; slots] }
    }

    fn index(&self, pc: u64) -> usize {
        ((pc >> 2) as usize) & (self.taken.len() - 1)
    }

    pub fn predict(&self, pc: u64) -> bool {
        self.taken[self.index(pc)]
    }

    pub fn update(&mut self, pc: u64, taken: bool) {
        let i = self.index(pc);
        self.taken[i] = taken;
    }
}

/// Return stack buffer of fixed depth. Pushing onto a full stack
/// overwrites the oldest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rsb {
    ring: Vec<u64>,
    top: usize,
    len: usize,
}

impl Rsb {
    pub fn new(depth: usize) -> Self {
        assert!(depth > 0);
        Rsb { ring: vec![0; depth], top: 0, len: 0 }
    }

    pub fn push(&mut self, addr: u64) {
        self.ring[self.top] = addr;
        self.top = (self.top + 1) % self.ring.len();
        self.len = (self.len + 1).min(self.ring.len());
    }

    pub fn pop(&mut self) -> Option<u64> {
        if self.len == 0 {
            return None;
        }
        self.top = (self.top + self.ring.len() - 1) % self.ring.len();
        self.len -= 1;
        Some(self.ring[self.top])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn btb_aliases_by_slot() {
        let mut b = Btb::new(64);
        b.update(0x8000, 0x9000);
        assert_eq!(b.lookup(0x8000), Some(0x9000));
        assert_eq!(b.lookup(0x8000 + 64 * 4), Some(0x9000));
        assert_eq!(b.lookup(0x8004), None);
    }

    #[test]
    fn rsb_wraps() {
        let mut r = Rsb::new(2);
        r.push(1);
        r.push(2);
        r.push(3);
        assert_eq!(r.len(), 2);
        assert_eq!(r.pop(), Some(3));
        assert_eq!(r.pop(), Some(2));
        assert_eq!(r.pop(), None);
    }

    #[test]
    fn direction_learns_last_outcome() {
        let mut d = DirectionTable::new(64);
        assert!(!d.predict(0x8010));
        d.update(0x8010, true);
        assert!(d.predict(0x8010));
    }
}
