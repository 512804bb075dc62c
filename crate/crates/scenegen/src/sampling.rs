//! Class sampling and plan construction.
//!
//! The share distribution is inverted into draw probabilities
//! `P_i = (1/E_i) / sum_j (1/E_j)`, so underrepresented classes are drawn
//! more often. Plans spread items round-robin across the weather x time
//! grid (cell sizes never differ by more than one) and give every item an
//! independently derivable seed, making plan materialization a pure
//! function of `(table, grid, total, master_seed)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{self, Hasher};
use crate::label_stats::{ClassConfig, ClassDistribution};
use crate::seed;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("class {class_id} has share {share}; every share must be positive")]
    DegenerateDistribution { class_id: u8, share: f64 },
    #[error("invalid {what}: {message}")]
    Validation { what: String, message: String },
    #[error("{path}:{line}: {message}")]
    PlanParse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn validation(what: &str, message: impl std::fmt::Display) -> SamplerError {
    SamplerError::Validation {
        what: what.to_string(),
        message: message.to_string(),
    }
}

/// Draw weight for one class.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassWeight {
    pub class_id: u8,
    pub name: String,
    /// Share the weight was derived from.
    pub share: f64,
    /// Normalized sampling probability.
    pub probability: f64,
}

/// Per-class sampling probabilities, in class-config order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplingTable {
    pub entries: Vec<ClassWeight>,
    /// Digest of the distribution this table was derived from.
    pub distribution_digest: String,
    /// Normalization constant sum_j (1/E_j) that was divided out.
    pub inverse_sum: f64,
    /// Where the counts came from. Annotation only; not part of the digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl SamplingTable {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.entries.is_empty() {
            return Err(validation("sampling table", "no entries"));
        }
        let sum: f64 = self.entries.iter().map(|e| e.probability).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(validation("sampling table", format!("probabilities sum to {sum}")));
        }
        for entry in &self.entries {
            if entry.probability <= 0.0 {
                return Err(validation(
                    "sampling table",
                    format!("class {:?} has probability {}", entry.name, entry.probability),
                ));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = Hasher::new("scenegen-table-v1");
        h.field("distribution_digest", &self.distribution_digest);
        for entry in &self.entries {
            h.line(&[
                &entry.class_id.to_string(),
                &entry.name,
                &digest::f64_bits(entry.share),
                &digest::f64_bits(entry.probability),
            ]);
        }
        h.finish()
    }

    pub fn to_json_file(&self, path: &Path) -> Result<(), SamplerError> {
        let mut text = serde_json::to_string_pretty(self).expect("table serializes");
        text.push('\n');
        fs::write(path, text).map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self, SamplerError> {
        let text = fs::read_to_string(path).map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let table: SamplingTable = serde_json::from_str(&text).map_err(|e| SamplerError::PlanParse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        table.validate()?;
        Ok(table)
    }
}

/// Invert shares into sampling probabilities (normalized inverse frequency).
pub fn sampling_probabilities(
    dist: &ClassDistribution,
    cfg: &ClassConfig,
) -> Result<SamplingTable, SamplerError> {
    for &(class_id, share) in &dist.shares {
        if share <= 0.0 {
            return Err(SamplerError::DegenerateDistribution { class_id, share });
        }
    }
    let inverse_sum: f64 = dist.shares.iter().map(|(_, e)| 1.0 / e).sum();
    let entries = dist
        .shares
        .iter()
        .map(|&(class_id, share)| {
            let name = cfg
                .classes
                .iter()
                .find(|c| c.id == class_id)
                .map(|c| c.name.clone())
                .ok_or_else(|| validation("sampling table", format!("class id {class_id} not in config")))?;
            Ok(ClassWeight {
                class_id,
                name,
                share,
                probability: (1.0 / share) / inverse_sum,
            })
        })
        .collect::<Result<Vec<_>, SamplerError>>()?;
    let table = SamplingTable {
        entries,
        distribution_digest: dist.digest(),
        inverse_sum,
        source: None,
    };
    table.validate()?;
    Ok(table)
}

/// Draw one class from the table. Consumes exactly one u64 from the stream.
pub fn sample_class<'t>(table: &'t SamplingTable, rng: &mut impl RngCore) -> &'t ClassWeight {
    let u = seed::unit_f64(rng.next_u64());
    let mut cumulative = 0.0;
    for entry in &table.entries {
        cumulative += entry.probability;
        if u < cumulative {
            return entry;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    table.entries.last().expect("table validated non-empty")
}

fn check_label(kind: &str, label: &str) -> Result<(), SamplerError> {
    if label.trim().is_empty() {
        return Err(validation(kind, "empty label"));
    }
    if label.contains(['\t', '\n', ',']) {
        return Err(validation(kind, format!("label {label:?} contains a reserved character")));
    }
    Ok(())
}

/// The weather x time cross product that generation is balanced over.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConditionGrid {
    pub weathers: Vec<String>,
    pub times: Vec<String>,
}

impl ConditionGrid {
    pub fn new(weathers: Vec<String>, times: Vec<String>) -> Result<Self, SamplerError> {
        let grid = ConditionGrid { weathers, times };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        for (kind, labels) in [("weathers", &self.weathers), ("times", &self.times)] {
            if labels.is_empty() {
                return Err(validation(kind, "must not be empty"));
            }
            let mut seen = std::collections::HashSet::new();
            for label in labels {
                check_label(kind, label)?;
                if !seen.insert(label.as_str()) {
                    return Err(validation(kind, format!("duplicate label {label:?}")));
                }
            }
        }
        Ok(())
    }

    /// Cells in lexicographic (weather-major, time-minor) list order.
    pub fn cells(&self) -> Vec<(&str, &str)> {
        self.weathers
            .iter()
            .flat_map(|w| self.times.iter().map(move |t| (w.as_str(), t.as_str())))
            .collect()
    }

    /// The default grid: snowy/rainy/foggy x daytime/nighttime.
    pub fn default_grid() -> Self {
        ConditionGrid {
            weathers: vec!["snowy".into(), "rainy".into(), "foggy".into()],
            times: vec!["daytime".into(), "nighttime".into()],
        }
    }
}

/// One planned generation: what to depict, under which conditions, and the
/// seed that makes it reproducible.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PlanItem {
    pub index: u32,
    pub class_name: String,
    pub weather: String,
    pub time: String,
    pub derived_seed: u64,
}

/// Deterministic, balanced generation plan.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenerationPlan {
    pub items: Vec<PlanItem>,
    pub master_seed: u64,
    pub table_digest: String,
    pub weathers: Vec<String>,
    pub times: Vec<String>,
}

impl GenerationPlan {
    pub fn digest(&self) -> String {
        let mut h = Hasher::new("scenegen-plan-v1");
        h.field("master_seed", self.master_seed.to_string());
        h.field("table_digest", &self.table_digest);
        h.field("weathers", self.weathers.join(","));
        h.field("times", self.times.join(","));
        for item in &self.items {
            h.line(&[
                &item.index.to_string(),
                &item.class_name,
                &item.weather,
                &item.time,
                &item.derived_seed.to_string(),
            ]);
        }
        h.finish()
    }

    /// Planned item count per (weather, time) cell.
    pub fn cell_counts(&self) -> BTreeMap<(String, String), u64> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            *counts.entry((item.weather.clone(), item.time.clone())).or_insert(0) += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        for (expect, item) in self.items.iter().enumerate() {
            if item.index as usize != expect {
                return Err(validation(
                    "plan",
                    format!("index {} at position {expect}; indices must be contiguous", item.index),
                ));
            }
        }
        let mut seeds: Vec<u64> = self.items.iter().map(|i| i.derived_seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.items.len() {
            return Err(validation("plan", "derived seeds are not pairwise distinct"));
        }
        let counts = self.cell_counts();
        if let (Some(max), Some(min)) = (counts.values().max(), counts.values().min()) {
            if max - min > 1 {
                return Err(validation("plan", format!("cell counts unbalanced: min {min}, max {max}")));
            }
        }
        Ok(())
    }

    /// Serialize as TSV: a `#` header record carrying the master seed and
    /// table digest, then one `index class weather time seed` record per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "#scenegen-plan\tv1\tmaster_seed={}\ttable_digest={}\tweathers={}\ttimes={}",
            self.master_seed,
            self.table_digest,
            self.weathers.join(","),
            self.times.join(",")
        );
        for item in &self.items {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                item.index, item.class_name, item.weather, item.time, item.derived_seed
            );
        }
        out
    }

    pub fn to_tsv_file(&self, path: &Path) -> Result<(), SamplerError> {
        fs::write(path, self.to_tsv()).map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self, SamplerError> {
        let parse_err = |line: usize, message: String| SamplerError::PlanParse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty plan file".into()))?;
        if !header.starts_with("#scenegen-plan\tv1") {
            return Err(parse_err(1, "missing plan header record".into()));
        }
        let mut master_seed = None;
        let mut table_digest = None;
        let mut weathers = Vec::new();
        let mut times = Vec::new();
        for field in header.split('\t').skip(2) {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| parse_err(1, format!("malformed header field {field:?}")))?;
            match key {
                "master_seed" => {
                    master_seed = Some(value.parse::<u64>().map_err(|e| parse_err(1, e.to_string()))?)
                }
                "table_digest" => table_digest = Some(value.to_string()),
                "weathers" => weathers = value.split(',').map(str::to_string).collect(),
                "times" => times = value.split(',').map(str::to_string).collect(),
                other => return Err(parse_err(1, format!("unknown header field {other:?}"))),
            }
        }
        let master_seed = master_seed.ok_or_else(|| parse_err(1, "header lacks master_seed".into()))?;
        let table_digest = table_digest.ok_or_else(|| parse_err(1, "header lacks table_digest".into()))?;

        let mut items = Vec::new();
        for (zero_based, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = zero_based + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(parse_err(lineno, format!("expected 5 fields, got {}", fields.len())));
            }
            items.push(PlanItem {
                index: fields[0].parse().map_err(|e| parse_err(lineno, format!("index: {e}")))?,
                class_name: fields[1].to_string(),
                weather: fields[2].to_string(),
                time: fields[3].to_string(),
                derived_seed: fields[4]
                    .parse()
                    .map_err(|e| parse_err(lineno, format!("derived_seed: {e}")))?,
            });
        }
        let plan = GenerationPlan {
            items,
            master_seed,
            table_digest,
            weathers,
            times,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_tsv_file(path: &Path) -> Result<Self, SamplerError> {
        let text = fs::read_to_string(path).map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_tsv(&text, path)
    }
}

/// Build a balanced plan of `total` items over the grid.
///
/// Item `k` lands in cell `k % cells` of the weather-major cell order, so
/// per-cell counts are `ceil(total/cells)` or `floor(total/cells)`. Its
/// class is drawn from the per-item stream seeded by
/// `derive_seed(master_seed, k)`.
pub fn make_plan(
    table: &SamplingTable,
    grid: &ConditionGrid,
    total: u64,
    master_seed: u64,
) -> Result<GenerationPlan, SamplerError> {
    table.validate()?;
    grid.validate()?;
    if total < 1 {
        return Err(validation("plan total", "must be at least 1"));
    }
    if total > u32::MAX as u64 {
        return Err(validation("plan total", format!("{total} exceeds the plan index range")));
    }
    for entry in &table.entries {
        check_label("class name", &entry.name)?;
    }
    let cells = grid.cells();
    let items = (0..total)
        .map(|k| {
            let (weather, time) = cells[(k % cells.len() as u64) as usize];
            let derived_seed = seed::derive_seed(master_seed, k);
            let mut rng = seed::item_rng(derived_seed);
            let class = sample_class(table, &mut rng);
            PlanItem {
                index: k as u32,
                class_name: class.name.clone(),
                weather: weather.to_string(),
                time: time.to_string(),
                derived_seed,
            }
        })
        .collect();
    let plan = GenerationPlan {
        items,
        master_seed,
        table_digest: table.digest(),
        weathers: grid.weathers.clone(),
        times: grid.times.clone(),
    };
    plan.validate()?;
    Ok(plan)
}
