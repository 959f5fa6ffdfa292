//! `venkman`: transform, verify, simulate and attack toy-ISA programs.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use venkman::cfg::build_cfg;
use venkman::image::{AddressMap, HardeningConfig, Preset};
use venkman::isa::parse_asm;
use venkman::specsim::{run, spectre_v2_scenario, victim_program, RunInputs, ScenarioConfig, SimConfig};
use venkman::transform::{emit_image, transform, transform_preset};
use venkman::verifier::{load_image, verify};

#[derive(Parser)]
#[command(name = "venkman", version, about = "Bundle-aligned hardening against speculative control-flow hijacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble and harden a program into a VKM1 image.
    Transform(TransformArgs),
    /// Check an image against the layout rules; exits 0 on pass, 1 on fail, 2 if unreadable.
    Verify(VerifyArgs),
    /// Run an image in the speculative simulator.
    Sim(SimArgs),
    /// Run the branch-target-injection scenario against the bundled victim.
    Attack(AttackArgs),
    /// Size, verification and differential report over a corpus directory.
    Report(ReportArgs),
}

fn bundle_size(s: &str) -> Result<u32, String> {
    let n: u32 = s.parse().map_err(|e| format!("{e}"))?;
    if !n.is_power_of_two() || n < 16 {
        return Err(format!("{n} is not a power of two of at least 16"));
    }
    Ok(n)
}

#[derive(Args, Clone)]
struct Hardening {
    #[arg(long, value_parser = bundle_size, default_value_t = HardeningConfig::DEFAULT_BUNDLE_BYTES)]
    bundle_size: u32,
    /// Plain sequential layout with no protections.
    #[arg(long, conflicts_with_all = ["cfi", "sfi_store", "sfi_load", "fence"])]
    baseline: bool,
    /// Mask LR/CTR writes (default).
    #[arg(long, overrides_with = "no_cfi")]
    cfi: bool,
    #[arg(long)]
    no_cfi: bool,
    #[arg(long)]
    sfi_store: bool,
    #[arg(long)]
    sfi_load: bool,
    #[arg(long)]
    fence: bool,
}

impl Hardening {
    fn config(&self) -> HardeningConfig {
        if self.baseline {
            return HardeningConfig::preset(Preset::Baseline);
        }
        HardeningConfig {
            bundle_size_bytes: self.bundle_size,
            align: true,
            enable_cfi: !self.no_cfi,
            enable_sfi_store: self.sfi_store,
            enable_sfi_load: self.sfi_load,
            enable_fence: self.fence,
        }
    }
}

#[derive(Args)]
struct TransformArgs {
    input: PathBuf,
    /// Output image; defaults to the input with a `.vkm` extension.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    hardening: Hardening,
    /// Skip the post-transform verifier run.
    #[arg(long)]
    unverified: bool,
    /// Print stats as JSON instead of a summary.
    #[arg(long)]
    json: bool,
    /// Write the control-flow graphs in Graphviz format.
    #[arg(long, value_name = "FILE")]
    dot: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    image: PathBuf,
    #[command(flatten)]
    hardening: Hardening,
    /// Print the full JSON report.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    image: PathBuf,
    /// Inputs JSON: entry, regs, memory, limit.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    limit: Option<u64>,
    /// Simulator parameters JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    window: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    Defended,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum, default_value = "baseline")]
    mode: Mode,
    /// Scenario JSON: simulator parameters plus `secret`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    window: Option<u32>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(default_value = "corpus")]
    corpus: PathBuf,
    /// Write the JSON report here.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Print JSON instead of the markdown table.
    #[arg(long)]
    json: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_transform(a: TransformArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let name = a.input.display();
    let prog = parse_asm(&text).with_context(|| format!("{name}"))?;
    if let Some(dot) = &a.dot {
        let cfgs = build_cfg(&prog).with_context(|| format!("{name}"))?;
        write(dot, cfgs.iter().map(|f| f.to_dot()).collect::<String>())?;
    }
    let config = a.hardening.config();
    let m = AddressMap::default();
    let out = transform(&prog, &config, &m).with_context(|| format!("{name}"))?;
    if !a.unverified {
        let report = verify(&out.image, &config, &m);
        if !report.passed() {
            bail!("{name}: transformed image fails verification:\n{}", report.to_json());
        }
    }
    let output = a.output.unwrap_or_else(|| a.input.with_extension("vkm"));
    write(&output, emit_image(&out.image))?;
    let stats_json = serde_json::to_string_pretty(&out.stats)?;
    write(&output.with_extension("stats.json"), &stats_json)?;
    if a.json {
        println!("{stats_json}");
    } else {
        let s = &out.stats;
        println!(
            "{}: {} -> {} instructions ({} bytes, {:.2}x), {} bundles",
            output.display(),
            s.original_instrs,
            s.total_instrs,
            s.code_bytes,
            s.ratio_vs_baseline,
            out.image.bundles.len()
        );
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let bytes = match std::fs::read(&a.image) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: reading {}: {e}", a.image.display());
            return Ok(ExitCode::from(2));
        }
    };
    let img = match load_image(&bytes) {
        Ok(img) => img,
        Err(e) => {
            eprintln!("error: {}: {e}", a.image.display());
            return Ok(ExitCode::from(2));
        }
    };
    let report = verify(&img, &a.hardening.config(), &AddressMap::default());
    let json = report.to_json();
    if let Some(o) = &a.output {
        write(o, &json)?;
    }
    if a.json {
        println!("{json}");
    } else {
        for v in &report.violations {
            println!("{} at {:#x}+{}: {}", v.rule, v.addr, v.offset * 4, v.msg);
        }
        println!("{}: {}", a.image.display(), if report.passed() { "pass" } else { "fail" });
    }
    Ok(ExitCode::from(if report.passed() { 0 } else { 1 }))
}

fn cmd_sim(a: SimArgs) -> Result<()> {
    let bytes = std::fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let img = load_image(&bytes).with_context(|| format!("{}", a.image.display()))?;
    let mut inputs: RunInputs = match &a.input {
        Some(p) => read_json(p)?,
        None => RunInputs::default(),
    };
    if let Some(l) = a.limit {
        inputs.limit = l;
    }
    let mut config: SimConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(w) = a.window {
        config.spec_window = w;
    }
    let r = run(&img, &inputs, config, &AddressMap::default())?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let mut cfg: ScenarioConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(w) = a.window {
        cfg.sim.spec_window = w;
    }
    let preset = match a.mode {
        Mode::Baseline => Preset::Baseline,
        Mode::Defended => Preset::Fence,
    };
    let prog = parse_asm(victim_program()).context("bundled victim program")?;
    let img = transform_preset(&prog, preset)?.image;
    let r = spectre_v2_scenario(&img, &cfg, &AddressMap::default())?;
    println!("{}", r.to_json());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let r = report::build(&a.corpus)?;
    let json = serde_json::to_string_pretty(&r)?;
    if let Some(o) = &a.output {
        write(o, &json)?;
    }
    if a.json {
        println!("{json}");
    } else {
        print!("{}", r.markdown());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Transform(a) => cmd_transform(a).map(|()| ExitCode::SUCCESS),
        Command::Verify(a) => cmd_verify(a),
        Command::Sim(a) => cmd_sim(a).map(|()| ExitCode::SUCCESS),
        Command::Attack(a) => cmd_attack(a).map(|()| ExitCode::SUCCESS),
        Command::Report(a) => cmd_report(a).map(|()| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
