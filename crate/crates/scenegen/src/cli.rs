//! Command-line entry points: `stats`, `plan`, `generate`, `report`.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backend::ImageBackendSpec;
use crate::digest::bytes_digest;
use crate::label_stats::{self, ClassConfig};
use crate::manifest;
use crate::orchestrator::{self, RunOptions, MANIFEST_FILE, PLAN_FILE};
use crate::prompts::bank::DescriptorBank;
use crate::prompts::llm::{HttpTextBackend, TextBackendConfig, TextCompletion};
use crate::prompts::{EnrichSettings, Enricher, PromptTemplate, DEFAULT_INSTRUCTION};
use crate::sampling::{self, ConditionGrid, GenerationPlan, SamplingTable};

#[derive(Parser)]
#[command(
    name = "scenegen",
    version,
    about = "Balanced prompt planning and synthetic driving-scene image generation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the class distribution and sampling table from label data
    Stats(StatsArgs),
    /// Build a balanced, seeded generation plan from a sampling table
    Plan(PlanArgs),
    /// Execute a plan: prompts, images, manifest (resumable)
    Generate(GenerateArgs),
    /// Check realized output against the plan and sampling table
    Report(ReportArgs),
}

#[derive(Args)]
struct StatsArgs {
    /// Class taxonomy JSON; defaults to the 19-class Cityscapes taxonomy
    #[arg(long)]
    class_config: Option<PathBuf>,
    #[command(flatten)]
    source: StatsSource,
    /// Pixels added to every thing class before normalizing
    #[arg(long, default_value_t = 1)]
    smoothing: u64,
    /// Where to write the sampling table JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct StatsSource {
    /// Precomputed counts document (JSON)
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Directory of ID-encoded single-channel PNG label maps
    #[arg(long)]
    label_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Sampling table JSON produced by `stats`
    #[arg(long)]
    table: PathBuf,
    /// Number of items to plan
    #[arg(long, default_value_t = 1000)]
    total: u64,
    /// Comma-separated weather labels
    #[arg(long, default_value = "snowy,rainy,foggy")]
    weathers: String,
    /// Comma-separated time-of-day labels
    #[arg(long, default_value = "daytime,nighttime")]
    times: String,
    /// Master seed; the plan is a pure function of table, grid, total, seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the plan TSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Plan TSV produced by `plan`
    #[arg(long)]
    plan: PathBuf,
    /// Output directory (images/, manifest.jsonl, plan.tsv, run.lock)
    #[arg(long)]
    out_dir: PathBuf,
    /// Image backend: `mock` or a descriptor JSON path
    #[arg(long, default_value = "mock")]
    image_backend: String,
    /// Text-completion backend descriptor JSON path
    #[arg(long)]
    text_backend: Option<PathBuf>,
    /// Use only the offline descriptor bank, never the text backend
    #[arg(long)]
    fallback_only: bool,
    /// Worker threads / max in-flight backend requests
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Maximum words per enriched prompt
    #[arg(long, default_value_t = 60)]
    word_budget: usize,
    /// Drop the identifier phrase from composed prompts
    #[arg(long)]
    omit_identifier: bool,
    /// Re-queue previously failed items
    #[arg(long)]
    retry_failed: bool,
    /// Sampling table to copy into the output directory for `report`
    #[arg(long)]
    table: Option<PathBuf>,
    /// Descriptor bank JSON overriding the built-in bank
    #[arg(long)]
    descriptor_bank: Option<PathBuf>,
    /// Identifier token the image model was fine-tuned on
    #[arg(long, default_value = "V*")]
    identifier_token: String,
    /// Noun phrase following the identifier token
    #[arg(long, default_value = "driving scene")]
    scene_noun: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `generate`
    #[arg(long)]
    out_dir: PathBuf,
    /// Sampling table path; defaults to <out-dir>/table.json
    #[arg(long)]
    table: Option<PathBuf>,
    /// Machine-readable report path; defaults to <out-dir>/report.json
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Parse argv and run. Returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stats(args) => cmd_stats(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

fn cmd_stats(args: StatsArgs) -> anyhow::Result<i32> {
    let cfg = match &args.class_config {
        Some(path) => ClassConfig::from_json_file(path)?,
        None => ClassConfig::cityscapes(),
    };
    let (counts, source_note) = match (&args.source.counts, &args.source.label_dir) {
        (Some(path), None) => (
            label_stats::load_counts(path, &cfg)?,
            format!("counts file {}", path.display()),
        ),
        (None, Some(dir)) => {
            let outcome = label_stats::scan_label_maps(dir, &cfg)?;
            for issue in &outcome.skipped {
                log::warn!("skipped {}: {}", issue.path.display(), issue.reason);
            }
            let note = format!(
                "label dir {} ({} file(s) scanned, {} skipped)",
                dir.display(),
                outcome.counts.files_scanned,
                outcome.skipped.len()
            );
            (outcome.counts, note)
        }
        _ => unreachable!("clap group enforces exactly one source"),
    };
    let dist = label_stats::thing_distribution(&counts, &cfg, args.smoothing)?;
    let mut table = sampling::sampling_probabilities(&dist, &cfg)?;
    table.source = Some(format!("{source_note}, smoothing {}", args.smoothing));
    table.to_json_file(&args.out)?;

    println!("source: {source_note}");
    println!("smoothing: {} pixel(s) per thing class", args.smoothing);
    println!("inverse-share normalization constant: {:.6}", table.inverse_sum);
    println!("{:<16} {:>12} {:>10} {:>10}", "class", "pixels", "E", "P");
    for entry in &table.entries {
        let pixels = counts.counts.get(&entry.class_id).copied().unwrap_or(0);
        println!(
            "{:<16} {:>12} {:>10.4} {:>10.4}",
            entry.name, pixels, entry.share, entry.probability
        );
    }
    println!("table written to {} (digest {})", args.out.display(), table.digest());
    Ok(0)
}

fn parse_labels(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn cmd_plan(args: PlanArgs) -> anyhow::Result<i32> {
    let table = SamplingTable::from_json_file(&args.table)?;
    let grid = ConditionGrid::new(parse_labels(&args.weathers), parse_labels(&args.times))?;
    let plan = sampling::make_plan(&table, &grid, args.total, args.seed)?;
    plan.to_tsv_file(&args.out)?;
    println!(
        "planned {} item(s) over {} cell(s), master seed {}",
        plan.items.len(),
        grid.cells().len(),
        plan.master_seed
    );
    for ((weather, time), count) in plan.cell_counts() {
        println!("  {weather}/{time}: {count}");
    }
    println!("plan written to {} (digest {})", args.out.display(), plan.digest());
    Ok(0)
}

/// Text backend descriptor file: transport settings plus the standing
/// enrichment instruction.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TextBackendFile {
    #[serde(flatten)]
    transport: TextBackendConfig,
    #[serde(default = "default_instruction")]
    instruction: String,
    #[serde(default = "default_temperature")]
    temperature: f64,
    #[serde(default = "default_max_tokens")]
    max_tokens: u32,
}

fn default_instruction() -> String {
    DEFAULT_INSTRUCTION.to_string()
}

fn default_temperature() -> f64 {
    0.7
}

fn default_max_tokens() -> u32 {
    160
}

/// Everything that shaped a run, echoed into the output directory.
/// Secrets never appear here: auth fields name environment variables.
#[derive(Serialize)]
struct EffectiveConfig<'a> {
    plan_path: String,
    plan_digest: String,
    image_backend: &'a ImageBackendSpec,
    text_backend: Option<&'a TextBackendFile>,
    fallback_only: bool,
    concurrency: usize,
    word_budget: usize,
    omit_identifier: bool,
    identifier_token: &'a str,
    scene_noun: &'a str,
    retry_failed: bool,
    descriptor_bank: String,
}

fn place_table_copy(out_dir: &Path, source: &Path, plan: &GenerationPlan) -> anyhow::Result<()> {
    let table = SamplingTable::from_json_file(source)?;
    if table.digest() != plan.table_digest {
        anyhow::bail!(
            "table {} (digest {}) is not the table this plan was built from ({})",
            source.display(),
            table.digest(),
            plan.table_digest
        );
    }
    let dest = out_dir.join("table.json");
    if dest.exists() {
        let existing = fs::read(&dest)?;
        if bytes_digest(&existing) != bytes_digest(&fs::read(source)?) {
            anyhow::bail!("{} already exists with different content", dest.display());
        }
        return Ok(());
    }
    orchestrator::write_atomic(&dest, &fs::read(source)?)?;
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<i32> {
    let plan = GenerationPlan::from_tsv_file(&args.plan)?;
    let image_spec = ImageBackendSpec::from_arg(&args.image_backend)?;
    let image_backend = image_spec.build()?;

    let bank = match &args.descriptor_bank {
        Some(path) => DescriptorBank::from_json_file(path)?,
        None => DescriptorBank::builtin(),
    };
    let text_file: Option<TextBackendFile> = match (&args.text_backend, args.fallback_only) {
        (Some(path), false) => {
            let text = fs::read_to_string(path)?;
            Some(serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?)
        }
        _ => None,
    };
    let text_backend: Option<Arc<dyn TextCompletion>> = match &text_file {
        Some(file) => Some(Arc::new(HttpTextBackend::new(file.transport.clone())?)),
        None => None,
    };
    let settings = match &text_file {
        Some(file) => EnrichSettings {
            instruction: file.instruction.clone(),
            temperature: file.temperature,
            max_tokens: file.max_tokens,
        },
        None => EnrichSettings::default(),
    };
    let enricher = Enricher::new(text_backend, true, bank, settings, args.word_budget)?;
    let template = PromptTemplate {
        identifier_token: args.identifier_token.clone(),
        scene_noun: args.scene_noun.clone(),
        include_identifier: !args.omit_identifier,
    };

    fs::create_dir_all(&args.out_dir)?;
    if let Some(table_path) = &args.table {
        place_table_copy(&args.out_dir, table_path, &plan)?;
    }
    let effective = EffectiveConfig {
        plan_path: args.plan.display().to_string(),
        plan_digest: plan.digest(),
        image_backend: &image_spec,
        text_backend: text_file.as_ref(),
        fallback_only: args.fallback_only,
        concurrency: args.concurrency,
        word_budget: args.word_budget,
        omit_identifier: args.omit_identifier,
        identifier_token: &args.identifier_token,
        scene_noun: &args.scene_noun,
        retry_failed: args.retry_failed,
        descriptor_bank: args
            .descriptor_bank
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "builtin".to_string()),
    };
    let mut config_json = serde_json::to_string_pretty(&effective)?;
    config_json.push('\n');
    fs::write(args.out_dir.join("config.json"), config_json)?;

    let options = RunOptions {
        concurrency: args.concurrency,
        retry_failed: args.retry_failed,
        generation: image_spec.generation.clone(),
    };
    let report = orchestrator::run(
        &plan,
        &template,
        &enricher,
        image_backend.as_ref(),
        &args.out_dir,
        &options,
    )?;

    println!(
        "requested {} | succeeded {} | failed {} | skipped (resume) {} | {:.2}s",
        report.requested, report.succeeded, report.failed, report.skipped_resume, report.wall_time_secs
    );
    for (cell, count) in &report.cell_counts {
        println!("  {cell}: {count}");
    }
    if report.failed_total > 0 {
        eprintln!(
            "{} item(s) are in failed state; rerun with --retry-failed to re-queue them",
            report.failed_total
        );
        return Ok(1);
    }
    Ok(0)
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<i32> {
    let manifest_path = args.out_dir.join(MANIFEST_FILE);
    let plan_path = args.out_dir.join(PLAN_FILE);
    let table_path = args.table.clone().unwrap_or_else(|| args.out_dir.join("table.json"));
    if !table_path.exists() {
        anyhow::bail!(
            "sampling table not found at {} (pass --table, or give `generate` --table to place a copy)",
            table_path.display()
        );
    }
    let report = manifest::report(&manifest_path, &plan_path, &table_path)?;
    print!("{}", report.render_text());
    let json_path = args.json.clone().unwrap_or_else(|| args.out_dir.join("report.json"));
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&json_path, json)?;
    println!("report written to {}", json_path.display());
    Ok(0)
}
