//! Architectural state: registers, program counter and sparse memory.

use std::collections::BTreeMap;

use crate::isa::{Gpr, NUM_GPRS};

const PAGE: u64 = 4096;

/// Sparse byte-addressed memory; untouched bytes read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    pages: BTreeMap<u64, Box<[u8; PAGE as usize]>>,
}

impl Memory {
    pub fn read_u8(&self, addr: u64) -> u8 {
        self.pages.get(&(addr / PAGE)).map_or(0, |p| p[(addr % PAGE) as usize])
    }

    pub fn write_u8(&mut self, addr: u64, v: u8) {
        let page = self.pages.entry(addr / PAGE).or_insert_with(|| Box::new([0; PAGE as usize]));
        page[(addr % PAGE) as usize] = v;
    }

    pub fn read_u64(&self, addr: u64) -> u64 {
        let mut b = [0u8; 8];
        for (i, byte) in b.iter_mut().enumerate() {
            *byte = self.read_u8(addr.wrapping_add(i as u64));
        }
        u64::from_le_bytes(b)
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) {
        for (i, byte) in v.to_le_bytes().into_iter().enumerate() {
            self.write_u8(addr.wrapping_add(i as u64), byte);
        }
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) {
        for (i, &b) in bytes.iter().enumerate() {
            self.write_u8(addr + i as u64, b);
        }
    }

    /// Aligned doublewords that differ from `before`, in address order.
    pub fn changed_words<'a>(&'a self, before: &'a Memory) -> impl Iterator<Item = (u64, u64)> + 'a {
        self.pages.iter().flat_map(move |(&pn, page)| {
            let old = before.pages.get(&pn);
            page.chunks_exact(8).enumerate().filter_map(move |(i, c)| {
                let v = u64::from_le_bytes(c.try_into().unwrap());
                let was = old.map_or(0, |p| u64::from_le_bytes(p[i * 8..i * 8 + 8].try_into().unwrap()));
                (v != was).then_some((pn * PAGE + i as u64 * 8, v))
            })
        })
    }

    /// Non-zero doublewords at 8-byte aligned addresses, in address order.
    pub fn nonzero_words(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.pages.iter().flat_map(|(&pn, page)| {
            page.chunks_exact(8).enumerate().filter_map(move |(i, c)| {
                let v = u64::from_le_bytes(c.try_into().unwrap());
                (v != 0).then_some((pn * PAGE + i as u64 * 8, v))
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub gprs: [u64; NUM_GPRS as usize],
    pub lr: u64,
    pub ctr: u64,
    pub pc: u64,
    pub mem: Memory,
    pub halted: bool,
}

impl Default for MachineState {
    fn default() -> Self {
        MachineState { gprs: [0; NUM_GPRS as usize], lr: 0, ctr: 0, pc: 0, mem: Memory::default(), halted: false }
    }
}

impl MachineState {
    pub fn gpr(&self, r: Gpr) -> u64 {
        self.gprs[r.index() as usize]
    }

    pub fn set_gpr(&mut self, r: Gpr, v: u64) {
        self.gprs[r.index() as usize] = v;
    }
}

/// Register state saved when speculation starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Checkpoint {
    pub gprs: [u64; NUM_GPRS as usize],
    pub lr: u64,
    pub ctr: u64,
    pub pc: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubleword_round_trip_across_pages() {
        let mut m = Memory::default();
        m.write_u64(PAGE - 3, 0x0102_0304_0506_0708);
        assert_eq!(m.read_u64(PAGE - 3), 0x0102_0304_0506_0708);
        assert_eq!(m.read_u8(PAGE - 3), 0x08);
        assert_eq!(m.read_u64(0x10_0000), 0);
    }

    #[test]
    fn nonzero_words_are_sorted() {
        let mut m = Memory::default();
        m.write_u64(0x2008, 7);
        m.write_u64(0x1000, 5);
        assert_eq!(m.nonzero_words().collect::<Vec<_>>(), vec![(0x1000, 5), (0x2008, 7)]);
    }
}
