//! Reference-dataset label statistics.
//!
//! Scans ID-encoded semantic label maps (or loads precomputed counts) and
//! turns the per-class pixel tallies into the thing-class share
//! distribution that drives sampling: `E_i = (D_i + s) / sum_j (D_j + s)`
//! over thing classes only, where `s` is additive smoothing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{self, Hasher};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no label-map image files found under {0}")]
    EmptyInput(PathBuf),
    #[error("all {count} label-map files failed to decode under {dir}")]
    AllFilesFailed { dir: PathBuf, count: usize },
    #[error("{path}: expected a single-channel 8-bit label map, got {found}")]
    Format { path: PathBuf, found: String },
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid {what}: {message}")]
    Validation { what: String, message: String },
    #[error("all thing-class counts are zero and smoothing is 0")]
    DegenerateDistribution,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn validation(what: &str, message: impl fmt::Display) -> StatsError {
    StatsError::Validation {
        what: what.to_string(),
        message: message.to_string(),
    }
}

/// One semantic class of the reference taxonomy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClassDef {
    pub id: u8,
    pub name: String,
    pub is_thing: bool,
}

/// The class taxonomy: ordered class list plus the ignore ID.
///
/// Pixel values equal to `ignore_id` or to no configured class count
/// toward `total_pixels` but never toward a class tally.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClassConfig {
    pub classes: Vec<ClassDef>,
    #[serde(default = "default_ignore_id")]
    pub ignore_id: u8,
}

fn default_ignore_id() -> u8 {
    255
}

impl ClassConfig {
    pub fn new(classes: Vec<ClassDef>, ignore_id: u8) -> Result<Self, StatsError> {
        let cfg = ClassConfig { classes, ignore_id };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        let mut seen_ids = std::collections::HashSet::new();
        let mut seen_names = std::collections::HashSet::new();
        for class in &self.classes {
            if !seen_ids.insert(class.id) {
                return Err(validation("class config", format!("duplicate class id {}", class.id)));
            }
            if class.name.trim().is_empty() {
                return Err(validation("class config", format!("class {} has an empty name", class.id)));
            }
            if !seen_names.insert(class.name.as_str()) {
                return Err(validation("class config", format!("duplicate class name {:?}", class.name)));
            }
            if class.id == self.ignore_id {
                return Err(validation(
                    "class config",
                    format!("class id {} collides with ignore_id", class.id),
                ));
            }
        }
        if !self.classes.iter().any(|c| c.is_thing) {
            return Err(validation("class config", "at least one thing class is required"));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, StatsError> {
        let text = fs::read_to_string(path).map_err(|source| StatsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ClassConfig = serde_json::from_str(&text).map_err(|e| StatsError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn thing_classes(&self) -> impl Iterator<Item = &ClassDef> {
        self.classes.iter().filter(|c| c.is_thing)
    }

    /// The 19-class Cityscapes evaluation taxonomy (train IDs), with the
    /// 10 conventional thing classes marked.
    pub fn cityscapes() -> Self {
        let defs = [
            (0u8, "road", false),
            (1, "sidewalk", false),
            (2, "building", false),
            (3, "wall", false),
            (4, "fence", false),
            (5, "pole", false),
            (6, "traffic light", true),
            (7, "traffic sign", true),
            (8, "vegetation", false),
            (9, "terrain", false),
            (10, "sky", false),
            (11, "person", true),
            (12, "rider", true),
            (13, "car", true),
            (14, "truck", true),
            (15, "bus", true),
            (16, "train", true),
            (17, "motorcycle", true),
            (18, "bicycle", true),
        ];
        ClassConfig {
            classes: defs
                .iter()
                .map(|&(id, name, is_thing)| ClassDef {
                    id,
                    name: name.to_string(),
                    is_thing,
                })
                .collect(),
            ignore_id: 255,
        }
    }
}

/// Exact pixel tallies for the configured classes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PixelCounts {
    pub counts: BTreeMap<u8, u64>,
    pub total_pixels: u64,
    pub files_scanned: u64,
}

impl PixelCounts {
    pub fn validate(&self) -> Result<(), StatsError> {
        let sum: u64 = self.counts.values().sum();
        if sum > self.total_pixels {
            return Err(validation(
                "pixel counts",
                format!("class counts sum to {sum} but total_pixels is {}", self.total_pixels),
            ));
        }
        Ok(())
    }
}

/// A file the scanner could not use, with the reason.
#[derive(Debug, Clone)]
pub struct ScanIssue {
    pub path: PathBuf,
    pub reason: String,
}

/// Scan result: exact tallies plus any per-file failures that were skipped.
#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub counts: PixelCounts,
    pub skipped: Vec<ScanIssue>,
}

/// Thing-class share distribution, ordered as in the class config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassDistribution {
    /// (class_id, share) per thing class; shares sum to 1.
    pub shares: Vec<(u8, f64)>,
    /// Total smoothed thing pixels the shares were computed over.
    pub thing_total: u64,
    /// Smoothing constant that was applied per class.
    pub smoothing: u64,
}

impl ClassDistribution {
    pub fn share(&self, class_id: u8) -> Option<f64> {
        self.shares.iter().find(|(id, _)| *id == class_id).map(|(_, e)| *e)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.shares.is_empty() {
            return Err(validation("distribution", "no thing classes"));
        }
        let sum: f64 = self.shares.iter().map(|(_, e)| e).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(validation("distribution", format!("shares sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Digest over class ids and exact share bits.
    pub fn digest(&self) -> String {
        let mut h = Hasher::new("scenegen-distribution-v1");
        h.field("thing_total", self.thing_total.to_string());
        h.field("smoothing", self.smoothing.to_string());
        for (id, share) in &self.shares {
            h.line(&[&id.to_string(), &digest::f64_bits(*share)]);
        }
        h.finish()
    }
}

/// Per-file tally: one slot per possible 8-bit ID, plus the pixel total.
type FileHistogram = ([u64; 256], u64);

fn file_histogram(path: &Path) -> Result<FileHistogram, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(buf) => buf,
        other => {
            return Err(format!(
                "expected a single-channel 8-bit label map, got {}",
                color_name(&other)
            ))
        }
    };
    let mut hist = [0u64; 256];
    for pixel in gray.pixels() {
        hist[pixel.0[0] as usize] += 1;
    }
    let total = gray.width() as u64 * gray.height() as u64;
    Ok((hist, total))
}

fn color_name(img: &image::DynamicImage) -> String {
    format!("{:?}", img.color())
}

fn is_label_map(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false)
}

/// Count class pixels across every PNG label map under `dir` (recursive).
///
/// Tallies are exact integer sums, so the result is independent of file
/// order and of how the work is split across threads. Files that fail to
/// decode are collected in `skipped`; only if every file fails does the
/// scan error out.
pub fn scan_label_maps(dir: &Path, cfg: &ClassConfig) -> Result<ScanOutcome, StatsError> {
    cfg.validate()?;
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().is_file() && is_label_map(entry.path()))
        .map(|entry| entry.into_path())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(StatsError::EmptyInput(dir.to_path_buf()));
    }

    let per_file: Vec<(PathBuf, Result<FileHistogram, String>)> = files
        .into_par_iter()
        .map(|path| {
            let result = file_histogram(&path);
            (path, result)
        })
        .collect();

    let mut hist = [0u64; 256];
    let mut total_pixels = 0u64;
    let mut files_scanned = 0u64;
    let mut skipped = Vec::new();
    for (path, result) in per_file {
        match result {
            Ok((file_hist, file_total)) => {
                for (slot, count) in hist.iter_mut().zip(file_hist.iter()) {
                    *slot += count;
                }
                total_pixels += file_total;
                files_scanned += 1;
            }
            Err(reason) => skipped.push(ScanIssue { path, reason }),
        }
    }
    if files_scanned == 0 {
        return Err(StatsError::AllFilesFailed {
            dir: dir.to_path_buf(),
            count: skipped.len(),
        });
    }

    let counts = cfg
        .classes
        .iter()
        .map(|class| (class.id, hist[class.id as usize]))
        .collect();
    Ok(ScanOutcome {
        counts: PixelCounts {
            counts,
            total_pixels,
            files_scanned,
        },
        skipped,
    })
}

#[derive(Deserialize)]
struct CountsDoc {
    counts: BTreeMap<String, i64>,
    #[serde(default)]
    total_pixels: Option<u64>,
}

/// Load a precomputed counts document (JSON: `{"counts": {name: count},
/// "total_pixels": n?}`). Names must exist in the class config.
pub fn load_counts(path: &Path, cfg: &ClassConfig) -> Result<PixelCounts, StatsError> {
    cfg.validate()?;
    let text = fs::read_to_string(path).map_err(|source| StatsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: CountsDoc = serde_json::from_str(&text).map_err(|e| StatsError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;

    let mut counts: BTreeMap<u8, u64> = cfg.classes.iter().map(|c| (c.id, 0)).collect();
    for (name, count) in &doc.counts {
        let class = cfg
            .by_name(name)
            .ok_or_else(|| validation("counts document", format!("unknown class {name:?}")))?;
        if *count < 0 {
            return Err(validation(
                "counts document",
                format!("class {name:?} has negative count {count}"),
            ));
        }
        counts.insert(class.id, *count as u64);
    }
    let sum: u64 = counts.values().sum();
    let total_pixels = doc.total_pixels.unwrap_or(sum);
    let pixel_counts = PixelCounts {
        counts,
        total_pixels,
        files_scanned: 0,
    };
    pixel_counts.validate()?;
    Ok(pixel_counts)
}

/// Thing-class share distribution with additive smoothing.
///
/// Stuff classes are excluded entirely; `smoothing` pixels are added to
/// every thing class so no share can be zero (unless smoothing is 0).
pub fn thing_distribution(
    counts: &PixelCounts,
    cfg: &ClassConfig,
    smoothing: u64,
) -> Result<ClassDistribution, StatsError> {
    cfg.validate()?;
    counts.validate()?;
    let smoothed: Vec<(u8, u64)> = cfg
        .thing_classes()
        .map(|class| {
            let raw = counts.counts.get(&class.id).copied().unwrap_or(0);
            (class.id, raw + smoothing)
        })
        .collect();
    let thing_total: u64 = smoothed.iter().map(|(_, d)| d).sum();
    if thing_total == 0 {
        return Err(StatsError::DegenerateDistribution);
    }
    let shares = smoothed
        .into_iter()
        .map(|(id, d)| (id, d as f64 / thing_total as f64))
        .collect();
    let dist = ClassDistribution {
        shares,
        thing_total,
        smoothing,
    };
    dist.validate()?;
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, RgbImage};

    fn three_thing_cfg() -> ClassConfig {
        ClassConfig::new(
            vec![
                ClassDef { id: 13, name: "car".into(), is_thing: true },
                ClassDef { id: 12, name: "rider".into(), is_thing: true },
                ClassDef { id: 17, name: "motorcycle".into(), is_thing: true },
                ClassDef { id: 0, name: "road".into(), is_thing: false },
            ],
            255,
        )
        .unwrap()
    }

    fn write_gray(path: &Path, pixels: &[u8], width: u32) {
        let height = pixels.len() as u32 / width;
        let img = GrayImage::from_fn(width, height, |x, y| {
            Luma([pixels[(y * width + x) as usize]])
        });
        img.save(path).unwrap();
    }

    #[test]
    fn scan_counts_four_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ClassConfig::new(
            vec![
                ClassDef { id: 13, name: "car".into(), is_thing: true },
                ClassDef { id: 11, name: "person".into(), is_thing: true },
            ],
            255,
        )
        .unwrap();
        write_gray(&dir.path().join("a.png"), &[13, 13, 11, 255], 2);
        let outcome = scan_label_maps(dir.path(), &cfg).unwrap();
        assert_eq!(outcome.counts.counts[&13], 2);
        assert_eq!(outcome.counts.counts[&11], 1);
        assert_eq!(outcome.counts.total_pixels, 4);
        assert_eq!(outcome.counts.files_scanned, 1);
        assert!(outcome.skipped.is_empty());

        // additivity: a second identical file doubles every tally
        write_gray(&dir.path().join("b.png"), &[13, 13, 11, 255], 2);
        let outcome = scan_label_maps(dir.path(), &cfg).unwrap();
        assert_eq!(outcome.counts.counts[&13], 4);
        assert_eq!(outcome.counts.counts[&11], 2);
        assert_eq!(outcome.counts.total_pixels, 8);
    }

    #[test]
    fn scan_ignores_ignore_id_but_counts_total() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = three_thing_cfg();
        write_gray(&dir.path().join("ignored.png"), &[255; 6], 3);
        let outcome = scan_label_maps(dir.path(), &cfg).unwrap();
        assert!(outcome.counts.counts.values().all(|&c| c == 0));
        assert_eq!(outcome.counts.total_pixels, 6);
    }

    #[test]
    fn scan_empty_dir_is_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        let err = scan_label_maps(dir.path(), &three_thing_cfg()).unwrap_err();
        assert!(matches!(err, StatsError::EmptyInput(_)));
    }

    #[test]
    fn scan_collects_per_file_failures() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = three_thing_cfg();
        write_gray(&dir.path().join("good.png"), &[13, 13], 2);
        fs::write(dir.path().join("corrupt.png"), b"not a png").unwrap();
        let rgb = RgbImage::from_pixel(2, 2, image::Rgb([1, 2, 3]));
        rgb.save(dir.path().join("multichannel.png")).unwrap();

        let outcome = scan_label_maps(dir.path(), &cfg).unwrap();
        assert_eq!(outcome.counts.counts[&13], 2);
        assert_eq!(outcome.counts.files_scanned, 1);
        assert_eq!(outcome.skipped.len(), 2);
        assert!(outcome
            .skipped
            .iter()
            .any(|issue| issue.path.ends_with("multichannel.png")
                && issue.reason.contains("single-channel")));
    }

    #[test]
    fn scan_fails_when_all_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.png"), b"junk").unwrap();
        let err = scan_label_maps(dir.path(), &three_thing_cfg()).unwrap_err();
        assert!(matches!(err, StatsError::AllFilesFailed { .. }));
    }

    #[test]
    fn load_counts_decodes_document() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("counts.json");
        fs::write(&path, r#"{"counts": {"car": 600, "rider": 100, "motorcycle": 300}}"#).unwrap();
        let counts = load_counts(&path, &three_thing_cfg()).unwrap();
        assert_eq!(counts.counts[&13], 600);
        assert_eq!(counts.counts[&12], 100);
        assert_eq!(counts.counts[&17], 300);
        assert_eq!(counts.total_pixels, 1000);
    }

    #[test]
    fn load_counts_rejects_negative_and_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = three_thing_cfg();

        let neg = dir.path().join("neg.json");
        fs::write(&neg, r#"{"counts": {"car": -5}}"#).unwrap();
        let err = load_counts(&neg, &cfg).unwrap_err();
        assert!(matches!(err, StatsError::Validation { .. }), "{err}");

        let unknown = dir.path().join("unknown.json");
        fs::write(&unknown, r#"{"counts": {"zeppelin": 5}}"#).unwrap();
        let err = load_counts(&unknown, &cfg).unwrap_err();
        assert!(err.to_string().contains("zeppelin"));

        let malformed = dir.path().join("malformed.json");
        fs::write(&malformed, "{counts:").unwrap();
        let err = load_counts(&malformed, &cfg).unwrap_err();
        assert!(matches!(err, StatsError::Parse { .. }));
    }

    #[test]
    fn distribution_matches_exact_shares() {
        let cfg = three_thing_cfg();
        let counts = PixelCounts {
            counts: BTreeMap::from([(13, 600), (12, 100), (17, 300)]),
            total_pixels: 1000,
            files_scanned: 1,
        };
        let dist = thing_distribution(&counts, &cfg, 0).unwrap();
        // exact: 600/1000, 100/1000, 300/1000
        assert!((dist.share(13).unwrap() - 0.6).abs() < 1e-15);
        assert!((dist.share(12).unwrap() - 0.1).abs() < 1e-15);
        assert!((dist.share(17).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(dist.thing_total, 1000);
    }

    #[test]
    fn distribution_symmetry_and_smoothing() {
        let cfg = ClassConfig::new(
            vec![
                ClassDef { id: 1, name: "a".into(), is_thing: true },
                ClassDef { id: 2, name: "b".into(), is_thing: true },
            ],
            255,
        )
        .unwrap();
        let equal = PixelCounts {
            counts: BTreeMap::from([(1, 70), (2, 70)]),
            total_pixels: 140,
            files_scanned: 1,
        };
        let dist = thing_distribution(&equal, &cfg, 0).unwrap();
        assert_eq!(dist.share(1), Some(0.5));
        assert_eq!(dist.share(2), Some(0.5));

        let zeros = PixelCounts {
            counts: BTreeMap::from([(1, 0), (2, 0)]),
            total_pixels: 0,
            files_scanned: 1,
        };
        let dist = thing_distribution(&zeros, &cfg, 1).unwrap();
        assert_eq!(dist.share(1), Some(0.5));
        assert_eq!(dist.share(2), Some(0.5));

        let err = thing_distribution(&zeros, &cfg, 0).unwrap_err();
        assert!(matches!(err, StatsError::DegenerateDistribution));
    }

    #[test]
    fn cityscapes_default_has_ten_things() {
        let cfg = ClassConfig::cityscapes();
        cfg.validate().unwrap();
        assert_eq!(cfg.classes.len(), 19);
        assert_eq!(cfg.thing_classes().count(), 10);
        assert!(cfg.by_name("traffic light").unwrap().is_thing);
        assert!(!cfg.by_name("road").unwrap().is_thing);
    }

    proptest::proptest! {
        /// Shares sum to 1, scaling all counts changes nothing, and more
        /// pixels always means a larger share (smoothing 0).
        #[test]
        fn distribution_invariants(
            counts in proptest::collection::vec(1u64..=1_000_000, 2..=12),
            scale in 1u64..=1000,
        ) {
            let cfg = ClassConfig::new(
                counts
                    .iter()
                    .enumerate()
                    .map(|(i, _)| ClassDef { id: i as u8, name: format!("c{i}"), is_thing: true })
                    .collect(),
                255,
            )
            .unwrap();
            let pixel_counts = |mult: u64| PixelCounts {
                counts: counts.iter().enumerate().map(|(i, &n)| (i as u8, n * mult)).collect(),
                total_pixels: counts.iter().map(|&n| n * mult).sum(),
                files_scanned: 1,
            };
            let dist = thing_distribution(&pixel_counts(1), &cfg, 0).unwrap();
            let sum: f64 = dist.shares.iter().map(|(_, e)| e).sum();
            proptest::prop_assert!((sum - 1.0).abs() <= 1e-12);

            let scaled = thing_distribution(&pixel_counts(scale), &cfg, 0).unwrap();
            for ((_, a), (_, b)) in dist.shares.iter().zip(scaled.shares.iter()) {
                proptest::prop_assert!((a - b).abs() <= 1e-12, "scale changed {a} to {b}");
            }

            for (i, &di) in counts.iter().enumerate() {
                for (j, &dj) in counts.iter().enumerate() {
                    if di < dj {
                        proptest::prop_assert!(
                            dist.share(i as u8).unwrap() < dist.share(j as u8).unwrap()
                        );
                    }
                }
            }
        }
    }
}
