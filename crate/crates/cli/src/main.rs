//! Command-line driver for packed plan forests.
//!
//! Subcommands: `build` (pack a plan or an ambiguous-spec family into a
//! forest, emitting certificates for pruned branches), `label` (fixed-point
//! feasibility over a forest file), `unpack`, `explain`, `bench`
//! (seeded synthetic scenarios), and `compare-baselines`.
//!
//! Exit codes are the contract: 0 success/feasible, 2 input error,
//! 3 infeasible or all candidates pruned. Every run writes a manifest with
//! output digests so reruns are checkable.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest as _, Sha256};

use ppf_core::bench::{
    compare_baselines, correlation_report, preset, preset_names, run_scenario,
    ScenarioConfig, ScenarioRow,
};
use ppf_core::forest::{build, BuildOptions, PackedPlanForest};
use ppf_core::labeling::{extract_feasible, is_feasible, label, verdict_doc, FeasibilityVerdict};
use ppf_core::{AmbiguousQuerySpec, Catalog, Plan};

/// Allocation tracker for the peak-memory column: high-water mark of live
/// bytes since the last reset, as seen by the global allocator.
struct TrackingAllocator;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let live = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(live, Ordering::Relaxed);
        }
        p
    }
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
        System.dealloc(ptr, layout);
    }
}

#[global_allocator]
static ALLOCATOR: TrackingAllocator = TrackingAllocator;

fn reset_peak() {
    PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
}

fn peak_kb() -> u64 {
    (PEAK.load(Ordering::Relaxed) / 1024) as u64
}

#[derive(Parser)]
#[command(name = "ppf", version, about = "Packed plan forests for cross-model query plans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Records,
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory (defaults to the current directory).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Table output format: aligned text or comma-separated records.
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Pack candidates (a plan file or an ambiguous query spec) into a
    /// forest; exit 3 when every candidate is pruned.
    Build {
        /// Plan file (line format or JSON) or ambiguous spec (JSON with
        /// `skeleton` and `choice_points`).
        input: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// Insert declared CRS reprojections before checking.
        #[arg(long)]
        repair_crs: bool,
        /// Process at most this many candidates.
        #[arg(long)]
        limit: Option<u64>,
        /// Print the stats row as well.
        #[arg(long)]
        stats: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Fixed-point feasibility labeling of a forest file; exit 3 when no
    /// root survives.
    Label {
        forest: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Enumerate the feasible plans a forest encodes.
    Unpack {
        forest: PathBuf,
        #[arg(long)]
        limit: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Print the human-readable form of a certificates file.
    Explain { certificates: PathBuf },
    /// Run synthetic scenarios and report evaluation rows plus the
    /// correlation summary.
    Bench {
        /// Preset names (s1..s6, all when empty); use --config for a custom
        /// scenario.
        #[arg(conflicts_with = "config")]
        presets: Vec<String>,
        /// JSON scenario config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the workload seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run scenarios in parallel.
        #[arg(long, default_value = "1")]
        jobs: usize,
        /// Write per-pair (x, y) plot data files.
        #[arg(long)]
        plot_data: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Naive enumeration and annotation-agnostic memoization next to the
    /// packed forest, for one preset or a spec+catalog pair.
    CompareBaselines {
        /// Preset name, or omit and pass --spec/--catalog.
        #[arg(conflicts_with_all = ["spec", "catalog"])]
        preset: Option<String>,
        #[arg(long, requires = "catalog")]
        spec: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Write the bundled example plans, family, and catalog into a directory.
    Fixtures {
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    inputs: Vec<String>,
    seed: Option<u64>,
    flags: Vec<String>,
    version: String,
    catalog_digest: Option<String>,
    output_digests: BTreeMap<String, String>,
}

struct Outputs {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Outputs { dir: dir.to_path_buf(), digests: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, content)
            .with_context(|| format!("cannot write {}", path.display()))?;
        self.digests.insert(name.to_string(), sha256_hex(content.as_bytes()));
        Ok(())
    }

    fn manifest(
        self,
        command: &str,
        inputs: &[&Path],
        seed: Option<u64>,
        flags: Vec<String>,
        catalog_digest: Option<String>,
    ) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            seed,
            flags,
            version: env!("CARGO_PKG_VERSION").to_string(),
            catalog_digest,
            output_digests: self.digests.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
}

fn load_catalog(path: &Path) -> Result<Catalog> {
    Catalog::from_json(&read_file(path)?)
        .with_context(|| format!("invalid catalog {}", path.display()))
}

/// A build input is either an ambiguous spec (JSON with `skeleton`) or a
/// single plan file.
enum BuildInput {
    Spec(AmbiguousQuerySpec),
    Single(Plan),
}

fn load_build_input(path: &Path) -> Result<BuildInput> {
    let text = read_file(path)?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') && text.contains("\"skeleton\"") {
        return Ok(BuildInput::Spec(
            AmbiguousQuerySpec::from_json(&text)
                .with_context(|| format!("invalid spec {}", path.display()))?,
        ));
    }
    Ok(BuildInput::Single(
        Plan::parse(&text).with_context(|| format!("invalid plan {}", path.display()))?,
    ))
}

const EXIT_INFEASIBLE: u8 = 3;
const EXIT_INPUT: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Build { input, catalog, repair_crs, limit, stats, output } => {
            cmd_build(&input, &catalog, repair_crs, limit, stats, output)
        }
        Command::Label { forest, output } => cmd_label(&forest, output),
        Command::Unpack { forest, limit, output } => cmd_unpack(&forest, limit, output),
        Command::Explain { certificates } => cmd_explain(&certificates),
        Command::Bench { presets, config, seed, jobs, plot_data, output } => {
            cmd_bench(presets, config, seed, jobs, plot_data, output)
        }
        Command::CompareBaselines { preset, spec, catalog, seed, output } => {
            cmd_compare(preset, spec, catalog, seed, output)
        }
        Command::Fixtures { out } => {
            ppf_core::fixtures::write_all(&out)?;
            println!("fixtures written to {}", out.display());
            Ok(0)
        }
    }
}

fn stats_text(stats: &ppf_core::SizeStats) -> String {
    format!(
        "{:>6} {:>6.1} {:>8} {:>8} {:>6.2} {:>6.2} {:>8} {:>9.1} {:>9}",
        stats.num_plans,
        stats.nodes_per_plan,
        stats.unique_all,
        stats.unique_feasible,
        stats.packed_ratio_pre,
        stats.packed_ratio_post,
        stats.pruned_unique,
        stats.build_ms,
        stats.peak_mem_kb,
    )
}

fn stats_header() -> &'static str {
    "  scen     #P      N    UniqA    UniqF    PkA    PkF      PrU      t_ms      MemK"
}

fn stats_record(name: &str, stats: &ppf_core::SizeStats) -> String {
    format!(
        "{},{},{},{},{},{:.4},{:.4},{},{:.3},{}",
        name,
        stats.num_plans,
        stats.nodes_per_plan,
        stats.unique_all,
        stats.unique_feasible,
        stats.packed_ratio_pre,
        stats.packed_ratio_post,
        stats.pruned_unique,
        stats.build_ms,
        stats.peak_mem_kb,
    )
}

fn cmd_build(
    input: &Path,
    catalog_path: &Path,
    repair_crs: bool,
    limit: Option<u64>,
    print_stats: bool,
    output: OutputArgs,
) -> Result<u8> {
    let catalog = load_catalog(catalog_path)?;
    let parsed = load_build_input(input)?;
    let options = BuildOptions { repair_crs, limit, ..Default::default() };
    reset_peak();
    let out = match &parsed {
        BuildInput::Spec(spec) => {
            spec.validate(&catalog.leaf_kinds())
                .map_err(|e| anyhow!("invalid spec {}: {e}", input.display()))?;
            build(spec.expand(limit), &catalog, &options)?
        }
        BuildInput::Single(plan) => build([plan.clone()], &catalog, &options)?,
    };
    let mut outputs = Outputs::new(&output.out)?;
    let mut forest = out.forest;
    forest.stats.peak_mem_kb = peak_kb();
    outputs.write("forest.json", &forest.to_json())?;
    outputs.write("certificates.json", &serde_json::to_string_pretty(&out.certificates)?)?;
    outputs.write("stats.json", &serde_json::to_string_pretty(&forest.stats)?)?;
    if print_stats {
        match output.format {
            Format::Text => {
                println!("{}", stats_header());
                println!("  build {}", stats_text(&forest.stats));
            }
            Format::Records => println!("{}", stats_record("build", &forest.stats)),
        }
    }
    println!(
        "candidates: {} total, {} survived, {} certificate(s)",
        forest.stats.num_plans,
        out.surviving_candidates,
        out.certificates.len()
    );
    for record in &out.certificates {
        println!("  [{}] {}", record.certificate.family, record.message);
    }
    let flags = vec![format!("repair_crs={repair_crs}"), format!("limit={limit:?}")];
    let digest = format!("{:016x}", catalog.digest());
    outputs.manifest("build", &[input, catalog_path], None, flags, Some(digest))?;
    Ok(if out.surviving_candidates > 0 { 0 } else { EXIT_INFEASIBLE })
}

fn cmd_label(forest_path: &Path, output: OutputArgs) -> Result<u8> {
    let forest = PackedPlanForest::from_json(&read_file(forest_path)?)
        .map_err(|e| anyhow!("corrupt forest {}: {e}", forest_path.display()))?;
    let labels = label(&forest);
    let verdict = is_feasible(&forest, &labels);
    let doc = verdict_doc(&forest, &labels, &verdict);
    let mut outputs = Outputs::new(&output.out)?;
    outputs.write("verdict.json", &serde_json::to_string_pretty(&doc)?)?;
    match &verdict {
        FeasibilityVerdict::Feasible => println!("feasible: every root keeps a label"),
        FeasibilityVerdict::Infeasible(certs) => {
            if forest.roots.is_empty() {
                println!("infeasible: no roots");
            } else {
                println!("infeasible: {} certificate(s)", certs.len());
            }
            for record in certs {
                println!("  [{}] {}", record.certificate.family, record.message);
            }
        }
    }
    let digest = format!("{:016x}", forest.catalog.digest());
    outputs.manifest("label", &[forest_path], None, Vec::new(), Some(digest))?;
    Ok(if verdict.is_feasible() { 0 } else { EXIT_INFEASIBLE })
}

fn cmd_unpack(forest_path: &Path, limit: Option<u64>, output: OutputArgs) -> Result<u8> {
    let forest = PackedPlanForest::from_json(&read_file(forest_path)?)
        .map_err(|e| anyhow!("corrupt forest {}: {e}", forest_path.display()))?;
    let labels = label(&forest);
    let (plans, truncated) = extract_feasible(&forest, &labels, limit);
    let mut text = String::new();
    for (i, plan) in plans.iter().enumerate() {
        text.push_str(&format!("# plan {i}\n"));
        text.push_str(&plan.serialize()?);
        text.push('\n');
    }
    let mut outputs = Outputs::new(&output.out)?;
    outputs.write("plans.txt", &text)?;
    println!(
        "{} plan(s){}",
        plans.len(),
        if truncated { " (truncated by --limit)" } else { "" }
    );
    outputs.manifest(
        "unpack",
        &[forest_path],
        None,
        vec![format!("limit={limit:?}")],
        None,
    )?;
    Ok(0)
}

fn cmd_explain(certificates: &Path) -> Result<u8> {
    let records: Vec<ppf_core::CertificateRecord> =
        serde_json::from_str(&read_file(certificates)?)
            .with_context(|| format!("invalid certificates file {}", certificates.display()))?;
    if records.is_empty() {
        println!("no certificates: every candidate was feasible");
        return Ok(0);
    }
    for (i, record) in records.iter().enumerate() {
        let cert = &record.certificate;
        println!("certificate {i}:");
        println!("  family:   {}", cert.family);
        println!("  operator: node {}", cert.operator);
        println!(
            "  subplan:  {{{}}}",
            cert.subplan
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        );
        for e in &cert.witness.evidence {
            println!("  evidence: {} expected {}, got {}", e.facet, e.expected, e.actual);
        }
        println!("  {}", record.message);
    }
    Ok(0)
}

fn load_scenarios(
    presets: Vec<String>,
    config: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<Vec<(String, ScenarioConfig)>> {
    let mut scenarios = Vec::new();
    if let Some(path) = config {
        let cfg: ScenarioConfig = serde_json::from_str(&read_file(&path)?)
            .with_context(|| format!("invalid scenario config {}", path.display()))?;
        scenarios.push(("custom".to_string(), cfg));
    } else {
        let names: Vec<String> = if presets.is_empty() {
            preset_names().iter().map(|s| s.to_string()).collect()
        } else {
            presets
        };
        for name in names {
            let cfg = preset(&name).ok_or_else(|| {
                anyhow!("unknown preset `{name}` (available: {})", preset_names().join(", "))
            })?;
            scenarios.push((name, cfg));
        }
    }
    if let Some(seed) = seed {
        for (_, cfg) in &mut scenarios {
            cfg.seed = seed;
        }
    }
    Ok(scenarios)
}

fn cmd_bench(
    presets: Vec<String>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    jobs: usize,
    plot_data: bool,
    output: OutputArgs,
) -> Result<u8> {
    let scenarios = load_scenarios(presets, config, seed)?;
    let jobs = jobs.max(1);
    let mut rows: Vec<ScenarioRow> = Vec::with_capacity(scenarios.len());
    reset_peak();
    if jobs == 1 {
        for (name, cfg) in &scenarios {
            let mut row = run_scenario(name, cfg).map_err(|e| anyhow!("{name}: {e}"))?;
            row.stats.peak_mem_kb = peak_kb();
            rows.push(row);
            reset_peak();
        }
    } else {
        let results: Vec<Result<ScenarioRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = scenarios
                .iter()
                .map(|(name, cfg)| {
                    scope.spawn(move || {
                        run_scenario(name, cfg).map_err(|e| anyhow!("{name}: {e}"))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("scenario thread")).collect()
        });
        let shared_peak = peak_kb();
        for result in results {
            let mut row = result?;
            row.stats.peak_mem_kb = shared_peak; // process-wide when parallel
            rows.push(row);
        }
    }

    match output.format {
        Format::Text => {
            println!("{}", stats_header());
            for row in &rows {
                println!("  {:<5} {}", row.name, stats_text(&row.stats));
            }
        }
        Format::Records => {
            for row in &rows {
                println!("{}", stats_record(&row.name, &row.stats));
            }
        }
    }
    let report = correlation_report(&rows);
    println!("correlations (r):");
    for pair in &report.pairs {
        println!("  {:<18} vs {:<18} r = {:+.3}", pair.y, pair.x, pair.r);
    }

    let mut outputs = Outputs::new(&output.out)?;
    outputs.write("bench_rows.json", &serde_json::to_string_pretty(&rows)?)?;
    outputs.write("correlations.json", &serde_json::to_string_pretty(&report)?)?;
    if plot_data {
        for pair in &report.pairs {
            let name = format!("plot_{}_vs_{}.dat", pair.y, pair.x);
            let mut data = String::new();
            for (x, y) in &pair.points {
                data.push_str(&format!("{x} {y}\n"));
            }
            outputs.write(&name, &data)?;
        }
    }
    outputs.manifest("bench", &[], seed, vec![format!("jobs={jobs}")], None)?;
    Ok(0)
}

fn cmd_compare(
    preset_name: Option<String>,
    spec_path: Option<PathBuf>,
    catalog_path: Option<PathBuf>,
    seed: Option<u64>,
    output: OutputArgs,
) -> Result<u8> {
    let (spec, catalog, workload) = match (&preset_name, &spec_path, &catalog_path) {
        (_, Some(spec_path), Some(catalog_path)) => {
            let catalog = load_catalog(catalog_path)?;
            let spec = AmbiguousQuerySpec::from_json(&read_file(spec_path)?)
                .with_context(|| format!("invalid spec {}", spec_path.display()))?;
            (spec, catalog, spec_path.display().to_string())
        }
        _ => {
            let name = preset_name.as_deref().unwrap_or("s1");
            let mut cfg =
                preset(name).ok_or_else(|| anyhow!("unknown preset `{name}`"))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let (spec, catalog) = ppf_core::bench::generate(&cfg)?;
            (spec, catalog, name.to_string())
        }
    };
    spec.validate(&catalog.leaf_kinds()).map_err(|e| anyhow!("invalid spec: {e}"))?;
    let report = compare_baselines(&spec, &catalog)?;
    println!("workload: {workload}");
    println!(
        "naive enumeration:     {} total operator instances across {} candidates ({:.1} ms)",
        report.naive.total_operator_instances, report.ppf.num_plans, report.naive.runtime_ms
    );
    println!(
        "memo (no annotations): {} merged nodes, {} incorrect ({}%)",
        report.memo_no_ann.memo_merges,
        report.memo_no_ann.incorrect_merges,
        report.memo_no_ann.incorrect_pct
    );
    println!(
        "packed forest:         {} distinct nodes pre-prune, {} post-prune (PkA {:.2}, PkF {:.2})",
        report.ppf.unique_all,
        report.ppf.unique_feasible,
        report.ppf.packed_ratio_pre,
        report.ppf.packed_ratio_post
    );
    let mut outputs = Outputs::new(&output.out)?;
    outputs.write("baselines.json", &serde_json::to_string_pretty(&report)?)?;
    outputs.manifest("compare-baselines", &[], seed, Vec::new(), None)?;
    Ok(0)
}
