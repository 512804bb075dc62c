//! Append-only run manifest and conformance reporting.
//!
//! One JSON record per line. Line 1 is a header tying the manifest to a
//! plan digest; every following line is a `ManifestEntry`. Appends are
//! flushed and fsynced, and a partially written trailing line (from a
//! crash mid-append) is detected and truncated away on the next open, so
//! a reader never sees a torn record.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::PromptSource;
use crate::sampling::{GenerationPlan, SamplingTable};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate manifest index {index}")]
    DuplicateIndex { index: u32 },
    #[error("invalid {what}: {message}")]
    Validation { what: String, message: String },
    #[error("digest mismatch: {what} carries {found}, expected {expected}")]
    DigestMismatch {
        what: String,
        found: String,
        expected: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Succeeded,
    Failed,
}

/// Durable record of one generation attempt.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub index: u32,
    pub class_name: String,
    pub weather: String,
    pub time: String,
    pub base_prompt: String,
    pub enriched_prompt: String,
    pub prompt_source: PromptSource,
    pub seed: u64,
    pub status: EntryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempt_count: u32,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<(), ManifestError> {
        let complete = self.image_path.is_some() && self.image_digest.is_some();
        let valid = match self.status {
            EntryStatus::Succeeded => complete,
            EntryStatus::Failed => self.image_path.is_none() && self.image_digest.is_none(),
        };
        if !valid {
            return Err(ManifestError::Validation {
                what: format!("manifest entry {}", self.index),
                message: "image path/digest must be present exactly when status is succeeded".into(),
            });
        }
        if self.attempt_count < 1 {
            return Err(ManifestError::Validation {
                what: format!("manifest entry {}", self.index),
                message: "attempt_count must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Line-1 header binding the manifest to its plan.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestHeader {
    pub manifest_version: u32,
    pub plan_digest: String,
    pub master_seed: u64,
}

#[derive(Debug)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
    /// A torn trailing line was dropped during load.
    pub truncated_tail: bool,
}

impl Manifest {
    pub fn by_index(&self) -> BTreeMap<u32, &ManifestEntry> {
        self.entries.iter().map(|e| (e.index, e)).collect()
    }
}

/// Split raw bytes into complete lines plus an optional torn tail.
///
/// The final segment counts as torn when the file does not end in a
/// newline or the segment fails to parse; everything before it must parse.
fn split_lines(bytes: &[u8]) -> (Vec<&[u8]>, Option<&[u8]>) {
    let mut lines = Vec::new();
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            lines.push(&bytes[start..i]);
            start = i + 1;
        }
    }
    let tail = if start < bytes.len() {
        Some(&bytes[start..])
    } else {
        None
    };
    (lines, tail)
}

/// Load and validate a manifest file.
pub fn load(path: &Path) -> Result<Manifest, ManifestError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (lines, torn_tail) = split_lines(&bytes);
    let mut truncated_tail = torn_tail.is_some();
    if truncated_tail {
        log::warn!(
            "{}: dropping torn trailing line ({} bytes)",
            path.display(),
            torn_tail.map(<[u8]>::len).unwrap_or(0)
        );
    }

    let mut iter = lines.into_iter().enumerate().peekable();
    let (_, header_line) = iter.next().ok_or_else(|| ManifestError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "empty manifest (missing header)".into(),
    })?;
    let header: ManifestHeader =
        serde_json::from_slice(header_line).map_err(|e| ManifestError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("header: {e}"),
        })?;

    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while let Some((zero_based, line)) = iter.next() {
        if line.is_empty() {
            continue;
        }
        let entry: ManifestEntry = match serde_json::from_slice(line) {
            Ok(entry) => entry,
            // a complete-looking final line that does not parse is treated
            // as torn only if nothing follows it
            Err(e) if iter.peek().is_none() && torn_tail.is_none() => {
                log::warn!("{}: dropping unparseable final line: {e}", path.display());
                truncated_tail = true;
                break;
            }
            Err(e) => {
                return Err(ManifestError::Parse {
                    path: path.to_path_buf(),
                    line: zero_based + 1,
                    message: e.to_string(),
                })
            }
        };
        entry.validate()?;
        if !seen.insert(entry.index) {
            return Err(ManifestError::DuplicateIndex { index: entry.index });
        }
        entries.push(entry);
    }
    Ok(Manifest {
        header,
        entries,
        truncated_tail,
    })
}

/// Append-side handle. Opening repairs any torn trailing line in place, so
/// subsequent appends cannot concatenate onto a torn record.
pub struct ManifestWriter {
    file: File,
    path: PathBuf,
}

impl ManifestWriter {
    /// Create a fresh manifest with its header.
    pub fn create(path: &Path, header: &ManifestHeader) -> Result<Self, ManifestError> {
        let mut file = OpenOptions::new()
            .create_new(true)
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut line = serde_json::to_vec(header).expect("header serializes");
        line.push(b'\n');
        file.write_all(&line).map_err(io_err(path))?;
        file.sync_data().map_err(io_err(path))?;
        Ok(ManifestWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Open an existing manifest for appending, truncating a torn tail.
    pub fn open_append(path: &Path) -> Result<Self, ManifestError> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(path))?;
        let (lines, tail) = split_lines(&bytes);
        let mut keep = bytes.len() - tail.map(<[u8]>::len).unwrap_or(0);
        if tail.is_some() {
            log::warn!("{}: truncating torn trailing line", path.display());
        } else if let Some(last) = lines.last() {
            // newline-terminated but unparseable final line: also torn
            if !last.is_empty()
                && lines.len() > 1
                && serde_json::from_slice::<ManifestEntry>(last).is_err()
            {
                keep -= last.len() + 1;
                log::warn!("{}: truncating unparseable final line", path.display());
            }
        }
        if keep != bytes.len() {
            file.set_len(keep as u64).map_err(io_err(path))?;
            file.sync_data().map_err(io_err(path))?;
        }
        file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        Ok(ManifestWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Durably append one entry: single write, flushed and fsynced.
    pub fn append(&mut self, entry: &ManifestEntry) -> Result<(), ManifestError> {
        entry.validate()?;
        let mut line = serde_json::to_vec(entry).expect("entry serializes");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        Ok(())
    }
}

/// Rewrite the manifest without its failed entries (atomic replace).
/// Explicit operator action backing `--retry-failed`.
pub fn compact_failed(path: &Path) -> Result<usize, ManifestError> {
    let manifest = load(path)?;
    let dropped = manifest
        .entries
        .iter()
        .filter(|e| e.status == EntryStatus::Failed)
        .count();
    if dropped == 0 && !manifest.truncated_tail {
        return Ok(0);
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut line = serde_json::to_vec(&manifest.header).expect("header serializes");
        line.push(b'\n');
        file.write_all(&line).map_err(io_err(&tmp))?;
        for entry in manifest.entries.iter().filter(|e| e.status == EntryStatus::Succeeded) {
            let mut line = serde_json::to_vec(entry).expect("entry serializes");
            line.push(b'\n');
            file.write_all(&line).map_err(io_err(&tmp))?;
        }
        file.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(dropped)
}

// ---------------------------------------------------------------------------
// Conformance report

/// Realized-vs-planned accounting for one class.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassReport {
    pub class_name: String,
    pub planned_probability: f64,
    pub succeeded: u64,
    pub realized_frequency: f64,
    pub deviation: f64,
}

/// Realized-vs-planned accounting for one (weather, time) cell.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellReport {
    pub weather: String,
    pub time: String,
    pub planned: u64,
    pub succeeded: u64,
    pub failed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistributionReport {
    pub plan_digest: String,
    pub table_digest: String,
    pub total_planned: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub classes: Vec<ClassReport>,
    pub cells: Vec<CellReport>,
    pub max_class_deviation: f64,
    pub cell_balance_ok: bool,
    /// No succeeded entries; frequencies are vacuous.
    pub no_data: bool,
}

/// Build the conformance report from the manifest, plan, and table files.
/// Digests must chain: manifest -> plan -> table.
pub fn report(
    manifest_path: &Path,
    plan_path: &Path,
    table_path: &Path,
) -> Result<DistributionReport, ManifestError> {
    let manifest = load(manifest_path)?;
    let plan = GenerationPlan::from_tsv_file(plan_path).map_err(|e| ManifestError::Validation {
        what: "plan file".into(),
        message: e.to_string(),
    })?;
    let table = SamplingTable::from_json_file(table_path).map_err(|e| ManifestError::Validation {
        what: "table file".into(),
        message: e.to_string(),
    })?;

    let plan_digest = plan.digest();
    if manifest.header.plan_digest != plan_digest {
        return Err(ManifestError::DigestMismatch {
            what: "manifest header".into(),
            found: manifest.header.plan_digest.clone(),
            expected: plan_digest,
        });
    }
    let table_digest = table.digest();
    if plan.table_digest != table_digest {
        return Err(ManifestError::DigestMismatch {
            what: "plan header".into(),
            found: plan.table_digest.clone(),
            expected: table_digest,
        });
    }

    let planned_cells = plan.cell_counts();
    let plan_indices: std::collections::HashSet<u32> = plan.items.iter().map(|i| i.index).collect();
    for entry in &manifest.entries {
        if !plan_indices.contains(&entry.index) {
            return Err(ManifestError::Validation {
                what: "manifest".into(),
                message: format!("entry index {} is not in the plan", entry.index),
            });
        }
    }

    let succeeded: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.status == EntryStatus::Succeeded)
        .collect();
    let succeeded_total = succeeded.len() as u64;
    let failed_total = manifest.entries.len() as u64 - succeeded_total;
    let no_data = succeeded.is_empty();

    let mut class_hits: BTreeMap<&str, u64> = BTreeMap::new();
    let mut cell_hits: BTreeMap<(String, String), (u64, u64)> = BTreeMap::new();
    for entry in &manifest.entries {
        let cell = cell_hits
            .entry((entry.weather.clone(), entry.time.clone()))
            .or_insert((0, 0));
        match entry.status {
            EntryStatus::Succeeded => {
                *class_hits.entry(entry.class_name.as_str()).or_insert(0) += 1;
                cell.0 += 1;
            }
            EntryStatus::Failed => cell.1 += 1,
        }
    }

    let classes: Vec<ClassReport> = table
        .entries
        .iter()
        .map(|weight| {
            let hits = class_hits.get(weight.name.as_str()).copied().unwrap_or(0);
            let realized_frequency = if no_data {
                0.0
            } else {
                hits as f64 / succeeded_total as f64
            };
            ClassReport {
                class_name: weight.name.clone(),
                planned_probability: weight.probability,
                succeeded: hits,
                realized_frequency,
                deviation: if no_data {
                    0.0
                } else {
                    (realized_frequency - weight.probability).abs()
                },
            }
        })
        .collect();
    let max_class_deviation = classes.iter().map(|c| c.deviation).fold(0.0, f64::max);

    let cells: Vec<CellReport> = planned_cells
        .iter()
        .map(|((weather, time), &planned)| {
            let (ok, bad) = cell_hits
                .get(&(weather.clone(), time.clone()))
                .copied()
                .unwrap_or((0, 0));
            CellReport {
                weather: weather.clone(),
                time: time.clone(),
                planned,
                succeeded: ok,
                failed: bad,
            }
        })
        .collect();
    for cell in &cells {
        if cell.succeeded > cell.planned {
            return Err(ManifestError::Validation {
                what: "manifest".into(),
                message: format!(
                    "cell ({}, {}) has {} succeeded entries but only {} planned",
                    cell.weather, cell.time, cell.succeeded, cell.planned
                ),
            });
        }
    }
    let cell_balance_ok = if no_data {
        false
    } else {
        let max = cells.iter().map(|c| c.succeeded).max().unwrap_or(0);
        let min = cells.iter().map(|c| c.succeeded).min().unwrap_or(0);
        max - min <= 1
    };

    Ok(DistributionReport {
        plan_digest,
        table_digest,
        total_planned: plan.items.len() as u64,
        succeeded: succeeded_total,
        failed: failed_total,
        classes,
        cells,
        max_class_deviation,
        cell_balance_ok,
        no_data,
    })
}

impl DistributionReport {
    /// Human-readable table.
    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "plan digest   {}", self.plan_digest);
        let _ = writeln!(out, "table digest  {}", self.table_digest);
        let _ = writeln!(
            out,
            "entries       {} planned, {} succeeded, {} failed",
            self.total_planned, self.succeeded, self.failed
        );
        if self.no_data {
            let _ = writeln!(out, "no succeeded entries: frequencies unavailable");
        }
        let _ = writeln!(out, "\n{:<16} {:>10} {:>10} {:>10}", "cell", "planned", "ok", "failed");
        for cell in &self.cells {
            let _ = writeln!(
                out,
                "{:<16} {:>10} {:>10} {:>10}",
                format!("{}/{}", cell.weather, cell.time),
                cell.planned,
                cell.succeeded,
                cell.failed
            );
        }
        let _ = writeln!(
            out,
            "cell balance: {}",
            if self.cell_balance_ok { "ok" } else { "UNBALANCED" }
        );
        let _ = writeln!(out, "\n{:<16} {:>10} {:>12} {:>12}", "class", "ok", "planned P", "realized");
        for class in &self.classes {
            let _ = writeln!(
                out,
                "{:<16} {:>10} {:>12.4} {:>12.4}",
                class.class_name, class.succeeded, class.planned_probability, class.realized_frequency
            );
        }
        let _ = writeln!(out, "max class deviation: {:.6}", self.max_class_deviation);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(index: u32, status: EntryStatus) -> ManifestEntry {
        ManifestEntry {
            index,
            class_name: "car".into(),
            weather: "rainy".into(),
            time: "daytime".into(),
            base_prompt: "A photo of V* driving scene, car, rainy, daytime".into(),
            enriched_prompt: "a car on a wet road".into(),
            prompt_source: PromptSource::FallbackBank,
            seed: 100 + index as u64,
            status,
            image_path: matches!(status, EntryStatus::Succeeded)
                .then(|| format!("images/{index:06}_car_rainy_daytime.png")),
            image_digest: matches!(status, EntryStatus::Succeeded).then(|| "sha256:ab".into()),
            error: matches!(status, EntryStatus::Failed).then(|| "boom".into()),
            attempt_count: 1,
        }
    }

    fn header() -> ManifestHeader {
        ManifestHeader {
            manifest_version: 1,
            plan_digest: "sha256:plan".into(),
            master_seed: 42,
        }
    }

    #[test]
    fn append_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let mut writer = ManifestWriter::create(&path, &header()).unwrap();
        let a = entry(0, EntryStatus::Succeeded);
        let b = entry(1, EntryStatus::Failed);
        writer.append(&a).unwrap();
        writer.append(&b).unwrap();
        drop(writer);

        let manifest = load(&path).unwrap();
        assert_eq!(manifest.header, header());
        assert_eq!(manifest.entries, vec![a, b]);
        assert!(!manifest.truncated_tail);
    }

    #[test]
    fn torn_tail_is_dropped_on_load_and_repaired_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let mut writer = ManifestWriter::create(&path, &header()).unwrap();
        writer.append(&entry(0, EntryStatus::Succeeded)).unwrap();
        drop(writer);
        // simulate a crash mid-append
        let mut file = OpenOptions::new().append(true).open(&path).unwrap();
        file.write_all(b"{\"index\": 1, \"class_na").unwrap();
        drop(file);

        let manifest = load(&path).unwrap();
        assert_eq!(manifest.entries.len(), 1);
        assert!(manifest.truncated_tail);

        let mut writer = ManifestWriter::open_append(&path).unwrap();
        writer.append(&entry(1, EntryStatus::Succeeded)).unwrap();
        drop(writer);
        let manifest = load(&path).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        assert!(!manifest.truncated_tail);
    }

    #[test]
    fn duplicate_index_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let mut writer = ManifestWriter::create(&path, &header()).unwrap();
        writer.append(&entry(3, EntryStatus::Succeeded)).unwrap();
        writer.append(&entry(3, EntryStatus::Succeeded)).unwrap();
        drop(writer);
        let err = load(&path).unwrap_err();
        assert!(matches!(err, ManifestError::DuplicateIndex { index: 3 }));
    }

    #[test]
    fn status_image_consistency_enforced() {
        let mut bad = entry(0, EntryStatus::Succeeded);
        bad.image_digest = None;
        assert!(bad.validate().is_err());
        let mut bad = entry(0, EntryStatus::Failed);
        bad.image_path = Some("x.png".into());
        assert!(bad.validate().is_err());
    }

    /// Write table/plan/manifest fixture files for a synthetic run where
    /// every plan item got the status `pick` assigns, bypassing the
    /// orchestrator (fast enough for statistical sizes).
    fn synthetic_run(
        dir: &Path,
        total: u64,
        master_seed: u64,
        pick: impl Fn(&crate::sampling::PlanItem) -> EntryStatus,
    ) -> (PathBuf, PathBuf, PathBuf) {
        use crate::label_stats::{thing_distribution, ClassConfig, ClassDef, PixelCounts};
        use crate::sampling::{make_plan, sampling_probabilities, ConditionGrid};
        use std::io::BufWriter;

        let cfg = ClassConfig::new(
            vec![
                ClassDef { id: 13, name: "car".into(), is_thing: true },
                ClassDef { id: 12, name: "rider".into(), is_thing: true },
                ClassDef { id: 17, name: "motorcycle".into(), is_thing: true },
            ],
            255,
        )
        .unwrap();
        let counts = PixelCounts {
            counts: [(13u8, 600u64), (12, 100), (17, 300)].into_iter().collect(),
            total_pixels: 1000,
            files_scanned: 1,
        };
        let dist = thing_distribution(&counts, &cfg, 0).unwrap();
        let table = sampling_probabilities(&dist, &cfg).unwrap();
        let plan = make_plan(&table, &ConditionGrid::default_grid(), total, master_seed).unwrap();

        let table_path = dir.join("table.json");
        table.to_json_file(&table_path).unwrap();
        let plan_path = dir.join("plan.tsv");
        plan.to_tsv_file(&plan_path).unwrap();

        let manifest_path = dir.join("manifest.jsonl");
        let mut out = BufWriter::new(File::create(&manifest_path).unwrap());
        let header = ManifestHeader {
            manifest_version: 1,
            plan_digest: plan.digest(),
            master_seed,
        };
        serde_json::to_writer(&mut out, &header).unwrap();
        out.write_all(b"\n").unwrap();
        for item in &plan.items {
            let status = pick(item);
            let entry = ManifestEntry {
                index: item.index,
                class_name: item.class_name.clone(),
                weather: item.weather.clone(),
                time: item.time.clone(),
                base_prompt: "base".into(),
                enriched_prompt: format!("an enriched {}", item.class_name),
                prompt_source: PromptSource::FallbackBank,
                seed: item.derived_seed,
                status,
                image_path: matches!(status, EntryStatus::Succeeded)
                    .then(|| format!("images/{:06}.png", item.index)),
                image_digest: matches!(status, EntryStatus::Succeeded).then(|| "sha256:0".into()),
                error: matches!(status, EntryStatus::Failed).then(|| "down".into()),
                attempt_count: 1,
            };
            serde_json::to_writer(&mut out, &entry).unwrap();
            out.write_all(b"\n").unwrap();
        }
        out.flush().unwrap();
        (manifest_path, plan_path, table_path)
    }

    #[test]
    fn report_full_6000_run_has_perfect_cells() {
        let dir = tempfile::tempdir().unwrap();
        let (m, p, t) = synthetic_run(dir.path(), 6000, 7, |_| EntryStatus::Succeeded);
        let report = report(&m, &p, &t).unwrap();
        assert_eq!(report.cells.len(), 6);
        assert!(report.cells.iter().all(|c| c.planned == 1000 && c.succeeded == 1000));
        assert!(report.cell_balance_ok);
        assert!(!report.no_data);
    }

    #[test]
    fn report_deviation_small_at_statistical_scale() {
        let dir = tempfile::tempdir().unwrap();
        let (m, p, t) = synthetic_run(dir.path(), 100_000, 99, |_| EntryStatus::Succeeded);
        let report = report(&m, &p, &t).unwrap();
        assert_eq!(report.succeeded, 100_000);
        assert!(
            report.max_class_deviation < 0.01,
            "deviation {}",
            report.max_class_deviation
        );
    }

    #[test]
    fn report_with_zero_successes_flags_no_data() {
        let dir = tempfile::tempdir().unwrap();
        let (m, p, t) = synthetic_run(dir.path(), 12, 3, |_| EntryStatus::Failed);
        let report = report(&m, &p, &t).unwrap();
        assert!(report.no_data);
        assert_eq!(report.succeeded, 0);
        assert_eq!(report.failed, 12);
        assert_eq!(report.max_class_deviation, 0.0);
        assert!(report.classes.iter().all(|c| c.realized_frequency == 0.0));
    }

    #[test]
    fn report_rejects_cell_overflow() {
        let dir = tempfile::tempdir().unwrap();
        let (m, p, t) = synthetic_run(dir.path(), 12, 3, |_| EntryStatus::Succeeded);
        // doctor one entry into a different cell so that cell exceeds plan
        let text = std::fs::read_to_string(&m).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[1] = lines[1].replace("\"weather\":\"snowy\"", "\"weather\":\"rainy\"");
        std::fs::write(&m, lines.join("\n") + "\n").unwrap();
        let err = report(&m, &p, &t).unwrap_err();
        assert!(matches!(err, ManifestError::Validation { .. }), "{err}");
    }

    #[test]
    fn report_rejects_digest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (m, p, _) = synthetic_run(dir.path(), 6, 1, |_| EntryStatus::Succeeded);
        let other = tempfile::tempdir().unwrap();
        // a table with different content (smoothing shifts the shares)
        let (_, _, other_table) = {
            use crate::label_stats::{thing_distribution, ClassConfig, ClassDef, PixelCounts};
            use crate::sampling::sampling_probabilities;
            let cfg = ClassConfig::new(
                vec![
                    ClassDef { id: 13, name: "car".into(), is_thing: true },
                    ClassDef { id: 12, name: "rider".into(), is_thing: true },
                    ClassDef { id: 17, name: "motorcycle".into(), is_thing: true },
                ],
                255,
            )
            .unwrap();
            let counts = PixelCounts {
                counts: [(13u8, 600u64), (12, 100), (17, 300)].into_iter().collect(),
                total_pixels: 1000,
                files_scanned: 1,
            };
            let dist = thing_distribution(&counts, &cfg, 5).unwrap();
            let table = sampling_probabilities(&dist, &cfg).unwrap();
            let path = other.path().join("table.json");
            table.to_json_file(&path).unwrap();
            (0, 0, path)
        };
        let err = report(&m, &p, &other_table).unwrap_err();
        assert!(matches!(err, ManifestError::DigestMismatch { .. }), "{err}");
    }

    #[test]
    fn compact_drops_failed_entries_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let mut writer = ManifestWriter::create(&path, &header()).unwrap();
        writer.append(&entry(0, EntryStatus::Succeeded)).unwrap();
        writer.append(&entry(1, EntryStatus::Failed)).unwrap();
        writer.append(&entry(2, EntryStatus::Succeeded)).unwrap();
        drop(writer);

        let dropped = compact_failed(&path).unwrap();
        assert_eq!(dropped, 1);
        let manifest = load(&path).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        assert!(manifest.entries.iter().all(|e| e.status == EntryStatus::Succeeded));
        assert!(!dir.path().join("manifest.jsonl.tmp").exists());
    }
}
