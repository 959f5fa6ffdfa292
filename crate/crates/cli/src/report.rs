//! Per-program breakdown over the six cumulative configurations.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use venkman::corpus::load_corpus;
use venkman::image::{AddressMap, Preset};
use venkman::specsim::{run, spectre_v2_scenario, ScenarioConfig, SimConfig};
use venkman::transform::{transform_preset, Stats};
use venkman::verifier::verify;

/// Geomeans reported for large benchmark suites, for comparison only.
pub const REFERENCE_ALIGN_GEOMEAN: f64 = 1.61;
pub const REFERENCE_FENCE_GEOMEAN: f64 = 1.93;

#[derive(Debug, Serialize)]
pub struct ConfigRow {
    pub config: &'static str,
    pub code_bytes: u64,
    pub ratio: f64,
    pub verified: bool,
    pub outputs_match_baseline: bool,
    pub stats: Stats,
}

#[derive(Debug, Serialize)]
pub struct AttackOutcome {
    pub baseline_leaked: bool,
    pub baseline_bytes_recovered: usize,
    pub defended_leaked: bool,
}

#[derive(Debug, Serialize)]
pub struct ProgramRow {
    pub name: String,
    pub baseline_bytes: u64,
    pub configs: Vec<ConfigRow>,
    /// Present for programs that contain the attack's victim symbols.
    pub attack: Option<AttackOutcome>,
}

#[derive(Debug, Serialize)]
pub struct CorpusReport {
    pub programs: Vec<ProgramRow>,
    /// Geometric mean ratio per configuration, in table order.
    pub geomean: Vec<(&'static str, f64)>,
    pub reference_align_geomean: f64,
    pub reference_fence_geomean: f64,
}

pub fn build(dir: &Path) -> Result<CorpusReport> {
    let m = AddressMap::default();
    let corpus = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    let mut programs = Vec::new();
    for p in &corpus {
        let mut configs = Vec::new();
        let mut images = Vec::new();
        let mut baseline_outputs = None;
        for preset in Preset::ALL {
            let out = transform_preset(&p.program, preset).with_context(|| format!("{} under {}", p.name, preset.name()))?;
            let verified = verify(&out.image, &out.config, &m).passed();
            let outputs = run(&out.image, &p.inputs, SimConfig::default(), &m)
                .with_context(|| format!("running {} under {}", p.name, preset.name()))?
                .outputs;
            let base = baseline_outputs.get_or_insert_with(|| outputs.clone());
            configs.push(ConfigRow {
                config: preset.name(),
                code_bytes: out.stats.code_bytes,
                ratio: out.stats.ratio_vs_baseline,
                verified,
                outputs_match_baseline: outputs == *base,
                stats: out.stats,
            });
            images.push(out.image);
        }
        let attack = if images[0].symbol("victim_function").is_some() {
            let cfg = ScenarioConfig::default();
            let b = spectre_v2_scenario(&images[0], &cfg, &m)?;
            let fence = Preset::ALL.iter().position(|&p| p == Preset::Fence).expect("fence preset");
            let d = spectre_v2_scenario(&images[fence], &cfg, &m)?;
            Some(AttackOutcome { baseline_leaked: b.leaked, baseline_bytes_recovered: b.bytes_recovered, defended_leaked: d.leaked })
        } else {
            None
        };
        programs.push(ProgramRow { name: p.name.clone(), baseline_bytes: configs[0].code_bytes, configs, attack });
    }
    let geomean = Preset::ALL
        .iter()
        .enumerate()
        .map(|(i, preset)| {
            let logs: f64 = programs.iter().map(|r| r.configs[i].ratio.ln()).sum();
            (preset.name(), (logs / programs.len().max(1) as f64).exp())
        })
        .collect();
    Ok(CorpusReport {
        programs,
        geomean,
        reference_align_geomean: REFERENCE_ALIGN_GEOMEAN,
        reference_fence_geomean: REFERENCE_FENCE_GEOMEAN,
    })
}

impl CorpusReport {
    pub fn markdown(&self) -> String {
        let mut s = String::from("| program | bytes |");
        for p in Preset::ALL {
            let _ = write!(s, " {} |", p.name());
        }
        s.push_str(" verified | outputs |\n|---|---:|");
        s.push_str(&"---:|".repeat(Preset::ALL.len()));
        s.push_str("---|---|\n");
        for r in &self.programs {
            let _ = write!(s, "| {} | {} |", r.name, r.baseline_bytes);
            for c in &r.configs {
                let _ = write!(s, " {:.2} |", c.ratio);
            }
            let all = |f: fn(&ConfigRow) -> bool| if r.configs.iter().all(f) { "all" } else { "NO" };
            let _ = writeln!(s, " {} | {} |", all(|c| c.verified), all(|c| c.outputs_match_baseline));
        }
        s.push_str("| geomean | |");
        for (_, g) in &self.geomean {
            let _ = write!(s, " {g:.2} |");
        }
        s.push_str(" | |\n\n");
        let _ = writeln!(
            s,
            "Reference geomeans from large benchmark suites: alignment {:.2}x, fence {:.2}x.",
            self.reference_align_geomean, self.reference_fence_geomean
        );
        for r in &self.programs {
            if let Some(a) = &r.attack {
                let _ = writeln!(
                    s,
                    "Attack on {}: baseline leaked {} ({} bytes), defended leaked {}.",
                    r.name, a.baseline_leaked, a.baseline_bytes_recovered, a.defended_leaked
                );
            }
        }
        s
    }
}
