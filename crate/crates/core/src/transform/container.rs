//! VKM1 binary container writer.

use crate::image::LayoutImage;

pub const MAGIC: [u8; 4] = *b"VKM1";

/// Serialize an image: magic, `u32` bundle size, `u64` base address,
/// `u32` bundle count, `u32` symbol count, symbols as `u32` name length +
/// UTF-8 name + `u64` address, then the instruction words of every bundle.
/// All integers are little-endian.
pub fn emit_image(img: &LayoutImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + img.code_bytes() as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&img.bundle_size.to_le_bytes());
    out.extend_from_slice(&img.base_address.to_le_bytes());
    out.extend_from_slice(&(img.bundles.len() as u32).to_le_bytes());
    out.extend_from_slice(&(img.symbols.len() as u32).to_le_bytes());
    for s in &img.symbols {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&s.addr.to_le_bytes());
    }
    for w in img.bundles.iter().flat_map(|b| &b.words) {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}
