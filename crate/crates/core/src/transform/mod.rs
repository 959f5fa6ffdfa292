//! The hardening pipeline: target masking, store/load SFI, fence
//! insertion, bundling and layout.

mod bundle;
mod container;
mod masks;
mod passes;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::{build_cfg, CfgError, FunctionCfg, Origin};
use crate::image::{AddressMap, ConfigError, HardeningConfig, LayoutImage, Preset};
use crate::isa::{AsmProgram, Gpr, Target};

pub use bundle::{layout, pad_function, pass_fence, plan_function, FunctionPlan, PlannedBundle};
pub use container::{emit_image, MAGIC};
pub use masks::{
    code_mask_sequence, load_mask_sequence, mask_code_pointer_value, mask_load_pointer_value, mask_store_pointer_value,
    store_mask_sequence,
};
pub use passes::{pass_cfi, pass_sfi_load, pass_sfi_store, SfiOutput};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransformError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cfg(#[from] CfgError),
    #[error("function `{function}` line {line}: r31 is reserved as the toolchain scratch register")]
    ReservedRegister { function: String, line: usize },
    #[error("function `{function}` line {line}: relative branch targets cannot survive relayout; use a label")]
    RelativeTarget { function: String, line: usize },
    #[error("function `{function}` line {line}: atomic group of {size} slots exceeds bundle capacity {capacity}: {group}")]
    GroupTooLarge { function: String, line: usize, group: String, size: usize, capacity: usize },
    #[error("function `{function}`: bundle {bundle} has no free slot for a fence")]
    NoRoomForFence { function: String, bundle: usize },
    #[error("image ends at {end:#x}, past the code segment limit {limit:#x}")]
    ImageTooLarge { end: u64, limit: u64 },
    #[error("function `{function}`: unresolved branch target `{label}`")]
    UnresolvedTarget { function: String, label: String },
    #[error("function `{function}` line {line}: {message}")]
    Encode { function: String, line: usize, message: String },
}

/// Instruction accounting for one transformed program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub original_instrs: usize,
    pub cfi_added: usize,
    pub sfi_store_added: usize,
    pub sfi_load_added: usize,
    pub fence_added: usize,
    pub nop_padding: usize,
    pub total_instrs: usize,
    pub code_bytes: u64,
    /// `code_bytes` over the unhardened layout of the same program.
    pub ratio_vs_baseline: f64,
    /// X-Form rewrites routed through the scratch register.
    pub scratch_sequences: usize,
}

impl Stats {
    pub fn added(&self) -> usize {
        self.cfi_added + self.sfi_store_added + self.sfi_load_added + self.fence_added
    }

    pub fn is_conserved(&self) -> bool {
        self.original_instrs + self.added() + self.nop_padding == self.total_instrs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformOutput {
    pub image: LayoutImage,
    pub stats: Stats,
    pub config: HardeningConfig,
}

fn check_input(prog: &AsmProgram) -> Result<(), TransformError> {
    for f in &prog.functions {
        for item in &f.items {
            let crate::isa::AsmItem::Instr { instr, line } = item else { continue };
            if instr.gprs().contains(&Gpr::SCRATCH) {
                return Err(TransformError::ReservedRegister { function: f.name.clone(), line: *line });
            }
            if matches!(instr.target(), Some(Target::Rel(_))) {
                return Err(TransformError::RelativeTarget { function: f.name.clone(), line: *line });
            }
        }
    }
    Ok(())
}

fn count_origin(cfgs: &[FunctionCfg], origin: Origin) -> usize {
    cfgs.iter().flat_map(|f| &f.blocks).flat_map(|b| &b.slots).filter(|s| s.origin == origin).count()
}

/// Run the passes selected by `config` and lay the result out from
/// `m.code_lo`.
pub fn transform(prog: &AsmProgram, config: &HardeningConfig, m: &AddressMap) -> Result<TransformOutput, TransformError> {
    config.validate()?;
    check_input(prog)?;
    let mut cfgs = build_cfg(prog)?;
    let original_instrs: usize = cfgs.iter().map(FunctionCfg::instruction_count).sum();

    let mut scratch = 0;
    if config.enable_cfi {
        cfgs = cfgs.into_iter().map(|f| pass_cfi(f, config, m)).collect();
    }
    if config.enable_sfi_store {
        cfgs = cfgs
            .into_iter()
            .map(|f| {
                let out = pass_sfi_store(f, config, m);
                scratch += out.scratch_sequences;
                out.cfg
            })
            .collect();
    }
    if config.enable_sfi_load {
        cfgs = cfgs
            .into_iter()
            .map(|f| {
                let out = pass_sfi_load(f, config);
                scratch += out.scratch_sequences;
                out.cfg
            })
            .collect();
    }

    let mut plans = cfgs
        .iter()
        .map(|f| plan_function(f, config, config.enable_fence))
        .collect::<Result<Vec<_>, _>>()?;
    let mut fence_added = 0;
    if config.enable_fence {
        for p in &mut plans {
            fence_added += pass_fence(p, config)?;
        }
    }
    let nop_padding = plans.iter_mut().map(|p| pad_function(p, config)).sum();
    let image = layout(&plans, config, m)?;

    let baseline_bytes = original_instrs as u64 * crate::isa::INSTR_BYTES;
    let code_bytes = image.code_bytes();
    let stats = Stats {
        original_instrs,
        cfi_added: count_origin(&cfgs, Origin::Cfi),
        sfi_store_added: count_origin(&cfgs, Origin::SfiStore),
        sfi_load_added: count_origin(&cfgs, Origin::SfiLoad),
        fence_added,
        nop_padding,
        total_instrs: image.instruction_count(),
        code_bytes,
        ratio_vs_baseline: if baseline_bytes == 0 { 1.0 } else { code_bytes as f64 / baseline_bytes as f64 },
        scratch_sequences: scratch,
    };
    Ok(TransformOutput { image, stats, config: *config })
}

/// Shorthand for [`transform`] with a named preset and the default map.
pub fn transform_preset(prog: &AsmProgram, preset: Preset) -> Result<TransformOutput, TransformError> {
    transform(prog, &HardeningConfig::preset(preset), &AddressMap::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{decode, parse_asm, Instruction};

    const CALLS: &str = "
.func main
    mflr r10
    addi r3, r0, 5
    bl helper
    st_d r3, r2, 0
    st_x r3, r2, r4
    mtlr r10
    blr
.endfunc
.func helper
    ld_d r4, r2, 8
    add r3, r3, r4
    blr
.endfunc
";

    fn decoded(img: &LayoutImage) -> Vec<Instruction> {
        img.words().map(|(_, w)| decode(w).unwrap()).collect()
    }

    #[test]
    fn baseline_is_identity_layout() {
        let prog = parse_asm(CALLS).unwrap();
        let out = transform_preset(&prog, Preset::Baseline).unwrap();
        assert_eq!(out.stats.total_instrs, prog.instruction_count());
        assert_eq!(out.stats.ratio_vs_baseline, 1.0);
        assert_eq!(out.image.bundle_size, 4);
        assert_eq!(out.image.symbol("helper"), Some(0x8000 + 7 * 4));
    }

    #[test]
    fn every_preset_conserves_counts() {
        let prog = parse_asm(CALLS).unwrap();
        for p in Preset::ALL {
            let out = transform_preset(&prog, p).unwrap();
            assert!(out.stats.is_conserved(), "{p:?}: {:?}", out.stats);
            assert_eq!(out.stats.code_bytes, out.stats.total_instrs as u64 * 4);
        }
    }

    #[test]
    fn full_config_counts() {
        let prog = parse_asm(CALLS).unwrap();
        let out = transform_preset(&prog, Preset::Fence).unwrap();
        assert_eq!(out.stats.cfi_added, 2);
        assert_eq!(out.stats.sfi_store_added, 2 + 4);
        assert_eq!(out.stats.fence_added, 1);
        assert_eq!(out.stats.sfi_load_added, 0);
    }

    #[test]
    fn bundles_are_full_and_aligned() {
        let prog = parse_asm(CALLS).unwrap();
        let out = transform_preset(&prog, Preset::SfiLoad).unwrap();
        for b in &out.image.bundles {
            assert_eq!(b.base_addr % 32, 0);
            assert_eq!(b.words.len(), 8);
        }
        assert!(decoded(&out.image).iter().all(|i| !matches!(i, Instruction::StX { .. } | Instruction::LdX { .. })));
    }

    #[test]
    fn branch_targets_are_bundle_bases() {
        let src = ".func main\n addi r3, r0, 3\nloop:\n addi r3, r3, -1\n bc nz, r3, loop\n halt\n.endfunc\n";
        let out = transform_preset(&parse_asm(src).unwrap(), Preset::Align).unwrap();
        for (addr, w) in out.image.words() {
            if let Some(Target::Rel(off)) = decode(w).unwrap().target() {
                let dest = Target::Rel(*off).resolve(addr).unwrap();
                assert_eq!(dest % 32, 0);
            }
        }
    }

    #[test]
    fn scratch_register_rejected() {
        let prog = parse_asm(".func main\n addi r31, r0, 1\n halt\n.endfunc\n").unwrap();
        assert!(matches!(transform_preset(&prog, Preset::Align), Err(TransformError::ReservedRegister { line: 2, .. })));
    }

    #[test]
    fn bad_bundle_size_rejected() {
        let prog = parse_asm(".func main\n halt\n.endfunc\n").unwrap();
        let c = HardeningConfig::preset(Preset::Cfi).with_bundle_size(24);
        assert!(matches!(transform(&prog, &c, &AddressMap::default()), Err(TransformError::Config(_))));
    }

    #[test]
    fn oversized_group_is_an_error() {
        let prog = parse_asm(".func main\n st_x r3, r2, r4\n halt\n.endfunc\n").unwrap();
        let c = HardeningConfig::preset(Preset::SfiStore);
        assert!(transform(&prog, &c, &AddressMap::default()).is_ok());
        let err = transform(&prog, &c.with_bundle_size(16), &AddressMap::default()).unwrap_err();
        assert!(matches!(err, TransformError::GroupTooLarge { size: 5, capacity: 4, .. }), "{err}");
    }
}
