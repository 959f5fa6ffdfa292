//! Bundle formation, fence placement and final address layout.

use std::collections::HashMap;

use crate::cfg::{BlockId, FunctionCfg, Origin, Slot};
use crate::image::{AddressMap, Bundle, HardeningConfig, LayoutImage, Symbol};
use crate::isa::{encode, Instruction, Target, INSTR_BYTES};

use super::TransformError;

/// Contents of one bundle before padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedBundle {
    pub slots: Vec<Slot>,
    /// Last group ends in a call and must occupy the final slots.
    pub call_tail: bool,
    /// A slot was held back for a fence ahead of the first load.
    pub fence_reserved: bool,
}

impl PlannedBundle {
    fn new() -> Self {
        PlannedBundle { slots: Vec::new(), call_tail: false, fence_reserved: false }
    }

    fn used(&self) -> usize {
        self.slots.len() + (self.fence_reserved && !self.has_fence()) as usize
    }

    fn has_fence(&self) -> bool {
        self.slots.iter().any(|s| s.instr == Instruction::Fence)
    }

    pub fn has_load(&self) -> bool {
        self.slots.iter().any(|s| s.instr.is_load())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionPlan {
    pub name: String,
    pub bundles: Vec<PlannedBundle>,
    /// First bundle of each block, indexed by block id.
    pub block_start: Vec<usize>,
    pub labels: HashMap<String, BlockId>,
}

/// Split a slot run into atomic groups along `joins_next` links.
fn groups(slots: &[Slot]) -> Vec<&[Slot]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, s) in slots.iter().enumerate() {
        if !s.joins_next || i + 1 == slots.len() {
            out.push(&slots[start..=i]);
            start = i + 1;
        }
    }
    out
}

fn describe(group: &[Slot]) -> String {
    group.iter().map(|s| s.instr.to_string()).collect::<Vec<_>>().join("; ")
}

/// Pack one function's blocks into bundles. Every block starts a fresh
/// bundle; atomic groups never straddle a bundle boundary; a group ending
/// in a call closes its bundle. With `reserve_fence`, one slot per
/// load-carrying bundle is held for [`pass_fence`].
pub fn plan_function(f: &FunctionCfg, config: &HardeningConfig, reserve_fence: bool) -> Result<FunctionPlan, TransformError> {
    let cap = config.capacity();
    let mut bundles = Vec::new();
    let mut block_start = Vec::with_capacity(f.blocks.len());

    for block in &f.blocks {
        block_start.push(bundles.len());
        if !config.align {
            for s in &block.slots {
                bundles.push(PlannedBundle { slots: vec![s.clone()], call_tail: s.instr.is_call(), fence_reserved: false });
            }
            continue;
        }
        let mut cur = PlannedBundle::new();
        for g in groups(&block.slots) {
            let has_load = g.iter().any(|s| s.instr.is_load());
            let need = |b: &PlannedBundle| g.len() + (reserve_fence && has_load && !b.fence_reserved) as usize;
            if cur.used() + need(&cur) > cap {
                if !cur.slots.is_empty() {
                    bundles.push(std::mem::replace(&mut cur, PlannedBundle::new()));
                }
                if need(&cur) > cap {
                    return Err(TransformError::GroupTooLarge {
                        function: f.name.clone(),
                        line: g[0].line,
                        group: describe(g),
                        size: need(&cur),
                        capacity: cap,
                    });
                }
            }
            cur.slots.extend(g.iter().cloned());
            cur.fence_reserved |= reserve_fence && has_load;
            if g.last().is_some_and(|s| s.instr.is_call()) {
                cur.call_tail = true;
                bundles.push(std::mem::replace(&mut cur, PlannedBundle::new()));
            } else if cur.used() == cap {
                bundles.push(std::mem::replace(&mut cur, PlannedBundle::new()));
            }
        }
        if !cur.slots.is_empty() {
            bundles.push(cur);
        }
    }

    let labels = f.blocks.iter().flat_map(|b| b.labels.iter().map(move |l| (l.clone(), b.id))).collect();
    Ok(FunctionPlan { name: f.name.clone(), bundles, block_start, labels })
}

fn group_start(slots: &[Slot], idx: usize) -> usize {
    let mut k = idx;
    while k > 0 && slots[k - 1].joins_next {
        k -= 1;
    }
    k
}

/// Insert one fence ahead of the first load in every load-carrying
/// bundle. Returns the number of fences inserted.
pub fn pass_fence(plan: &mut FunctionPlan, config: &HardeningConfig) -> Result<usize, TransformError> {
    let cap = config.capacity();
    let mut added = 0;
    for (bi, b) in plan.bundles.iter_mut().enumerate() {
        let Some(first_load) = b.slots.iter().position(|s| s.instr.is_load()) else {
            continue;
        };
        if b.has_fence() {
            continue;
        }
        if b.slots.len() + 1 > cap {
            return Err(TransformError::NoRoomForFence { function: plan.name.clone(), bundle: bi });
        }
        let at = group_start(&b.slots, first_load);
        let line = b.slots[first_load].line;
        b.slots.insert(at, Slot::inserted(Instruction::Fence, Origin::Fence, line));
        b.fence_reserved = false;
        added += 1;
    }
    Ok(added)
}

/// Pad every bundle to capacity. Calls are pushed to the final slot by
/// padding just before their group.
pub fn pad_function(plan: &mut FunctionPlan, config: &HardeningConfig) -> usize {
    let cap = config.capacity();
    let mut padded = 0;
    for b in &mut plan.bundles {
        let pad = cap.saturating_sub(b.slots.len());
        if pad == 0 {
            continue;
        }
        let nops = std::iter::repeat_with(|| Slot { instr: Instruction::Nop, origin: Origin::Padding, joins_next: false, line: 0 }).take(pad);
        if b.call_tail {
            let at = group_start(&b.slots, b.slots.len() - 1);
            b.slots.splice(at..at, nops);
        } else {
            b.slots.extend(nops);
        }
        padded += pad;
    }
    padded
}

/// Assign addresses from `code_lo`, resolve branch targets to bundle bases
/// and encode the image.
pub fn layout(plans: &[FunctionPlan], config: &HardeningConfig, m: &AddressMap) -> Result<LayoutImage, TransformError> {
    let unit = config.unit_bytes() as u64;
    let mut image = LayoutImage::empty(unit as u32, m.code_lo);

    let mut first_bundle = Vec::with_capacity(plans.len());
    let mut count = 0usize;
    for p in plans {
        first_bundle.push(count);
        count += p.bundles.len();
    }
    let bundle_addr = |global: usize| m.code_lo + global as u64 * unit;
    let end = bundle_addr(count);
    if count > 0 && end - 1 > m.code_hi {
        return Err(TransformError::ImageTooLarge { end, limit: m.code_hi });
    }

    let symbols: HashMap<&str, u64> =
        plans.iter().zip(&first_bundle).map(|(p, &fb)| (p.name.as_str(), bundle_addr(fb))).collect();
    image.symbols = plans.iter().map(|p| Symbol { name: p.name.clone(), addr: symbols[p.name.as_str()] }).collect();

    for (p, &fb) in plans.iter().zip(&first_bundle) {
        for (bi, b) in p.bundles.iter().enumerate() {
            let base = bundle_addr(fb + bi);
            let mut words = Vec::with_capacity(b.slots.len());
            for (k, s) in b.slots.iter().enumerate() {
                let pc = base + k as u64 * INSTR_BYTES;
                let mut instr = s.instr.clone();
                if let Some(t) = instr.target_mut() {
                    if let Target::Label(l) = t {
                        let dest = match p.labels.get(l.as_str()) {
                            Some(&block) => bundle_addr(fb + p.block_start[block]),
                            None => *symbols.get(l.as_str()).ok_or_else(|| TransformError::UnresolvedTarget {
                                function: p.name.clone(),
                                label: l.clone(),
                            })?,
                        };
                        let words = (dest as i64 - pc as i64) / INSTR_BYTES as i64;
                        *t = Target::Rel(i32::try_from(words).map_err(|_| TransformError::Encode {
                            function: p.name.clone(),
                            line: s.line,
                            message: format!("branch displacement {words} words out of range"),
                        })?);
                    }
                }
                let w = encode(&instr).map_err(|e| TransformError::Encode {
                    function: p.name.clone(),
                    line: s.line,
                    message: e.to_string(),
                })?;
                words.push(w);
            }
            image.bundles.push(Bundle { base_addr: base, words });
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::build_cfg;
    use crate::image::Preset;
    use crate::isa::parse_asm;

    fn plan(src: &str, config: &HardeningConfig) -> FunctionPlan {
        let cfgs = build_cfg(&parse_asm(src).unwrap()).unwrap();
        plan_function(&cfgs[0], config, config.enable_fence).unwrap()
    }

    #[test]
    fn ten_instructions_make_two_bundles() {
        let body: String = (0..9).map(|_| " addi r3, r3, 1\n").collect();
        let src = format!(".func f\n{body} halt\n.endfunc\n");
        let c = HardeningConfig::preset(Preset::Align);
        let mut p = plan(&src, &c);
        assert_eq!(p.bundles.len(), 2);
        assert_eq!(pad_function(&mut p, &c), 6);
        assert!(p.bundles[1].slots[2..].iter().all(|s| s.instr == Instruction::Nop));
    }

    #[test]
    fn call_lands_in_last_slot() {
        let src = ".func f\n addi r3, r3, 1\n addi r3, r3, 1\n addi r3, r3, 1\n bl g\n halt\n.endfunc\n.func g\n blr\n.endfunc\n";
        let c = HardeningConfig::preset(Preset::Align);
        let mut p = plan(src, &c);
        pad_function(&mut p, &c);
        let first = &p.bundles[0].slots;
        assert_eq!(first.len(), 8);
        assert!(matches!(first[7].instr, Instruction::Bl { .. }));
        assert!(first[3..7].iter().all(|s| s.instr == Instruction::Nop));
    }

    #[test]
    fn fence_goes_before_first_load() {
        let src = ".func f\n addi r3, r3, 1\n ld_d r4, r2, 0\n ld_d r5, r2, 8\n halt\n.endfunc\n";
        let mut c = HardeningConfig::preset(Preset::Align);
        c.enable_fence = true;
        let mut p = plan(src, &c);
        assert_eq!(pass_fence(&mut p, &c).unwrap(), 1);
        let names: Vec<String> = p.bundles[0].slots.iter().map(|s| s.instr.opcode().to_string()).collect();
        assert_eq!(names, ["addi", "fence", "ld_d", "ld_d", "halt"]);
    }

    #[test]
    fn no_load_no_fence() {
        let mut c = HardeningConfig::preset(Preset::Align);
        c.enable_fence = true;
        let mut p = plan(".func f\n addi r3, r3, 1\n halt\n.endfunc\n", &c);
        assert_eq!(pass_fence(&mut p, &c).unwrap(), 0);
    }

    #[test]
    fn fence_without_reservation_can_overflow() {
        let body: String = (0..7).map(|_| " ld_d r3, r2, 0\n").collect();
        let src = format!(".func f\n{body} halt\n.endfunc\n");
        let c = HardeningConfig::preset(Preset::Align);
        let mut p = plan(&src, &c);
        assert!(matches!(pass_fence(&mut p, &c), Err(TransformError::NoRoomForFence { .. })));
    }

    #[test]
    fn groups_follow_links() {
        let mk = |j| Slot { instr: Instruction::Nop, origin: Origin::Original, joins_next: j, line: 0 };
        let slots = vec![mk(true), mk(false), mk(false), mk(true), mk(true), mk(false)];
        let lens: Vec<usize> = groups(&slots).iter().map(|g| g.len()).collect();
        assert_eq!(lens, vec![2, 1, 3]);
    }
}
