//! VKM1 container reader, written independently of the emitter.

use thiserror::Error;

use crate::image::{Bundle, LayoutImage, Symbol};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error("bad magic {0:02x?}, expected \"VKM1\"")]
    BadMagic([u8; 4]),
    #[error("truncated: need {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("bundle size {0} is not a positive multiple of 4")]
    BundleSize(u32),
    #[error("{bundles} bundles of {bundle_size} bytes need {expected} code bytes, found {found}")]
    SizeMismatch { bundles: u32, bundle_size: u32, expected: u64, found: u64 },
    #[error("symbol {index} name is not UTF-8")]
    SymbolName { index: usize },
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(LoadError::Truncated {
            offset: self.pos,
            needed: n,
            len: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse a VKM1 container.
pub fn load_image(bytes: &[u8]) -> Result<LayoutImage, LoadError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match r.take(4) {
        Ok(m) => m.try_into().unwrap(),
        Err(e) => {
            let mut got = [0u8; 4];
            got[..bytes.len()].copy_from_slice(bytes);
            return if b"VKM1".starts_with(bytes) { Err(e) } else { Err(LoadError::BadMagic(got)) };
        }
    };
    if &magic != b"VKM1" {
        return Err(LoadError::BadMagic(magic));
    }
    let bundle_size = r.u32()?;
    let base_address = r.u64()?;
    let bundle_count = r.u32()?;
    let symbol_count = r.u32()?;
    if bundle_size == 0 || bundle_size % 4 != 0 {
        return Err(LoadError::BundleSize(bundle_size));
    }

    let mut symbols = Vec::new();
    for index in 0..symbol_count as usize {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| LoadError::SymbolName { index })?.to_owned();
        let addr = r.u64()?;
        symbols.push(Symbol { name, addr });
    }

    let rest = &bytes[r.pos..];
    let expected = bundle_count as u64 * bundle_size as u64;
    if rest.len() as u64 != expected {
        return Err(LoadError::SizeMismatch { bundles: bundle_count, bundle_size, expected, found: rest.len() as u64 });
    }
    let bundles = rest
        .chunks_exact(bundle_size as usize)
        .enumerate()
        .map(|(i, chunk)| Bundle {
            base_addr: base_address.wrapping_add(i as u64 * bundle_size as u64),
            words: chunk.chunks_exact(4).map(|w| u32::from_le_bytes(w.try_into().unwrap())).collect(),
        })
        .collect();
    Ok(LayoutImage { bundle_size, base_address, bundles, symbols })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(bundle_size: u32, count: u32) -> Vec<u8> {
        let mut v = b"VKM1".to_vec();
        v.extend_from_slice(&bundle_size.to_le_bytes());
        v.extend_from_slice(&0x8000u64.to_le_bytes());
        v.extend_from_slice(&count.to_le_bytes());
        v.extend_from_slice(&0u32.to_le_bytes());
        v
    }

    #[test]
    fn header_only() {
        let img = load_image(&header(32, 0)).unwrap();
        assert!(img.bundles.is_empty());
        assert_eq!(img.base_address, 0x8000);
    }

    #[test]
    fn wrong_magic() {
        let mut v = header(32, 0);
        v[3] = b'2';
        assert_eq!(load_image(&v), Err(LoadError::BadMagic(*b"VKM2")));
        assert!(matches!(load_image(b"EL"), Err(LoadError::BadMagic(_))));
        assert!(matches!(load_image(b"VK"), Err(LoadError::Truncated { .. })));
    }

    #[test]
    fn count_mismatch() {
        let mut v = header(8, 2);
        v.extend_from_slice(&[0; 12]);
        assert!(matches!(load_image(&v), Err(LoadError::SizeMismatch { expected: 16, found: 12, .. })));
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let mut v = header(32, u32::MAX);
        v[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(load_image(&v), Err(LoadError::Truncated { .. })));
    }
}
