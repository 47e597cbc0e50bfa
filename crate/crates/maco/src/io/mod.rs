//! Dataset ingestion, artifact files, and run orchestration.
//!
//! Everything here is deterministic on purpose: class ids come from sorted
//! directory names, files are visited in sorted order, and all text outputs
//! are built as strings before a single write. A run is reproducible from
//! its config file and seed alone.

mod run;

pub use run::{
    run_eval, run_splits, run_synth, run_train, AccuracyRow, DatasetSource, EpisodeSpec,
    ModelOverrides, OptimizerSpec, OutputSpec, RunArtifacts, RunConfig, SplitSpec, Variant,
};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::episodes::{ClassSplits, Dataset, DatasetClass, SplitKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::MetricsRecord;

/// Bilinear resize of an [h, w, c] image using half-pixel centers and
/// clamp-to-edge sampling.
pub fn bilinear_resize(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::shape("bilinear_resize", "[h, w, c]", format!("{shape:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output extents must be positive"));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let mut out = vec![0.0f32; out_h * out_w * c];
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor();
        let fy = (sy - y0) as f32;
        let ya = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let yb = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..out_w {
            let sx = (ox as f64 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor();
            let fx = (sx - x0) as f32;
            let xa = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let xb = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            for ch in 0..c {
                let v00 = src[(ya * w + xa) * c + ch];
                let v01 = src[(ya * w + xb) * c + ch];
                let v10 = src[(yb * w + xa) * c + ch];
                let v11 = src[(yb * w + xb) * c + ch];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[(oy * out_w + ox) * c + ch] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Outcome of walking a dataset directory tree.
pub struct IngestReport {
    pub dataset: Dataset,
    /// Files that failed to decode and were skipped with a warning.
    pub skipped: usize,
}

/// Loads a directory-per-class image tree.
///
/// Class ids are the subdirectory names in lexicographic order; files inside
/// each class are visited in lexicographic order as well, so two ingestions
/// of the same tree are identical. Images decode to 3 channels (grayscale is
/// replicated), scale to [0, 1], and resize to `image_size` square. Files
/// that fail to decode are skipped with a warning on stderr; a class with no
/// decodable images is an error.
pub fn ingest_dataset(root: &Path, image_size: usize) -> Result<IngestReport> {
    if image_size == 0 {
        return Err(Error::invalid("ingest_dataset", "image_size must be positive"));
    }
    let mut class_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_dir())
        .map(|entry| entry.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::invalid(
            "ingest_dataset",
            format!("no class subdirectories under {}", root.display()),
        ));
    }

    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut skipped = 0usize;
    for dir in &class_dirs {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::invalid("ingest_dataset", "unnamed class directory"))?;
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|entry| entry.ok())
            .map(|entry| entry.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();

        let mut images = Vec::with_capacity(files.len());
        for file in &files {
            match image::open(file) {
                Ok(decoded) => {
                    let rgb = decoded.to_rgb8();
                    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                    let data: Vec<f32> = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
                    let img = Tensor::new(vec![h, w, 3], data)?;
                    images.push(bilinear_resize(&img, image_size, image_size)?);
                }
                Err(err) => {
                    eprintln!("warning: skipping {}: {err}", file.display());
                    skipped += 1;
                }
            }
        }
        if images.is_empty() {
            return Err(Error::invalid(
                "ingest_dataset",
                format!("class directory {} has no decodable images", dir.display()),
            ));
        }
        classes.push(DatasetClass { id, images });
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} undecodable file(s)");
    }
    Ok(IngestReport { dataset: Dataset::new(classes)?, skipped })
}

/// Writes a split manifest: one `class_id,split` line per class, train block
/// first, then val, then test.
pub fn write_split_manifest(path: &Path, splits: &ClassSplits) -> Result<()> {
    let mut text = String::new();
    for (id, kind) in splits.assignments() {
        let _ = writeln!(text, "{id},{}", kind.as_str());
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a split manifest back into (class id, split) pairs in file order.
pub fn read_split_manifest(path: &Path) -> Result<Vec<(String, SplitKind)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, kind) = line.split_once(',').ok_or_else(|| {
            Error::invalid(
                "read_split_manifest",
                format!("line {}: expected `class_id,split`, got {line:?}", lineno + 1),
            )
        })?;
        pairs.push((id.trim().to_string(), SplitKind::parse(kind.trim())?));
    }
    Ok(pairs)
}

/// Renders training history as CSV text: fixed header, one row per record,
/// six fractional digits, newline-terminated. Byte-deterministic for a given
/// history.
pub fn render_metrics_csv(history: &[MetricsRecord]) -> String {
    let mut text = String::from("epoch,split,loss,accuracy,episodes\n");
    for rec in history {
        let _ = writeln!(
            text,
            "{},{},{:.6},{:.6},{}",
            rec.epoch,
            rec.split.as_str(),
            rec.loss,
            rec.accuracy,
            rec.episodes
        );
    }
    text
}

/// Writes training history to `path` in the fixed CSV format.
pub fn emit_metrics_csv(history: &[MetricsRecord], path: &Path) -> Result<()> {
    fs::write(path, render_metrics_csv(history)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses CSV produced by [`render_metrics_csv`] back into records.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "epoch,split,loss,accuracy,episodes" {
        return Err(Error::invalid("parse_metrics_csv", format!("unexpected header {header:?}")));
    }
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::invalid(
                "parse_metrics_csv",
                format!("expected 5 fields, got {}: {line:?}", fields.len()),
            ));
        }
        let parse_err = |what: &str| {
            Error::invalid("parse_metrics_csv", format!("bad {what} in {line:?}"))
        };
        records.push(MetricsRecord {
            epoch: fields[0].parse().map_err(|_| parse_err("epoch"))?,
            split: SplitKind::parse(fields[1])?,
            loss: fields[2].parse().map_err(|_| parse_err("loss"))?,
            accuracy: fields[3].parse().map_err(|_| parse_err("accuracy"))?,
            episodes: fields[4].parse().map_err(|_| parse_err("episodes"))?,
        });
    }
    Ok(records)
}

/// Half-width of a 95% normal-approximation binomial confidence interval.
pub fn binomial_half_width(p: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}
