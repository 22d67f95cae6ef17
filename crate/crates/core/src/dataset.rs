//! Data model and on-disk formats for images, annotations, and predictions.
//!
//! Label files are UTF-8 text with one annotation per line in normalized
//! `class cx cy w h` form; prediction files carry a trailing confidence
//! field. The in-memory representation is always pixel-space corner boxes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of built-in fault classes.
pub const CLASS_COUNT: u8 = 4;

/// Slack allowed when a written coordinate rounds marginally past an image
/// edge, expressed as a fraction of the image dimension. Anything inside the
/// slack is clamped back onto the edge; anything beyond it is rejected.
const EDGE_SLACK: f64 = 1e-6;

/// One fault category with the synonyms accepted when matching free text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultClass {
    pub id: u8,
    pub canonical_name: String,
    pub synonyms: Vec<String>,
}

/// The built-in four-class taxonomy plus text-matching helpers.
#[derive(Debug, Clone)]
pub struct ClassTable {
    classes: Vec<FaultClass>,
    mention_patterns: Vec<Regex>,
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ClassTable {
    /// The four component fault categories: crack, skin debonding,
    /// surface blemish, pitted surface.
    pub fn builtin() -> Self {
        let spec: [(&str, &[&str]); 4] = [
            ("crack", &["crack", "cracks", "cracking", "fissure", "fissures"]),
            (
                "skin debonding",
                &[
                    "skin debonding",
                    "debonding",
                    "debonded",
                    "skin peeling",
                    "delamination",
                ],
            ),
            (
                "surface blemish",
                &["surface blemish", "surface blemishes", "blemish", "blemishes"],
            ),
            (
                "pitted surface",
                &[
                    "pitted surface",
                    "pitted surfaces",
                    "pitted",
                    "pitting",
                    "surface pitting",
                ],
            ),
        ];
        let classes = spec
            .iter()
            .enumerate()
            .map(|(id, (name, synonyms))| FaultClass {
                id: id as u8,
                canonical_name: name.to_string(),
                synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        Self::from_classes(classes).expect("builtin table is valid")
    }

    /// Builds a table from explicit classes. Every synonym list must be
    /// non-empty and contain the canonical name.
    pub fn from_classes(classes: Vec<FaultClass>) -> Result<Self> {
        let mut mention_patterns = Vec::with_capacity(classes.len());
        for class in &classes {
            if class.synonyms.is_empty() {
                return Err(Error::Domain(format!(
                    "class '{}' has an empty synonym list",
                    class.canonical_name
                )));
            }
            if !class.synonyms.iter().any(|s| *s == class.canonical_name) {
                return Err(Error::Domain(format!(
                    "synonyms of '{}' must include the canonical name",
                    class.canonical_name
                )));
            }
            // Word-boundary, case-insensitive match over all synonyms, so
            // "cracks" in prose does not count as a mention of "crack"
            // unless the plural is itself listed.
            let alternation = class
                .synonyms
                .iter()
                .map(|s| regex::escape(s))
                .collect::<Vec<_>>()
                .join("|");
            let pattern = Regex::new(&format!(r"(?i)\b(?:{alternation})\b"))
                .map_err(|e| Error::Domain(format!("bad synonym pattern: {e}")))?;
            mention_patterns.push(pattern);
        }
        Ok(Self {
            classes,
            mention_patterns,
        })
    }

    pub fn classes(&self) -> &[FaultClass] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: u8) -> Option<&FaultClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Canonical name for an id, or "unknown" for ids outside the table.
    pub fn name(&self, id: u8) -> &str {
        self.get(id).map(|c| c.canonical_name.as_str()).unwrap_or("unknown")
    }

    /// Ids of every class mentioned in `text` (canonical name or synonym,
    /// case-insensitive, word-boundary aware).
    pub fn mentions(&self, text: &str) -> BTreeSet<u8> {
        self.classes
            .iter()
            .zip(&self.mention_patterns)
            .filter(|(_, pattern)| pattern.is_match(text))
            .map(|(class, _)| class.id)
            .collect()
    }
}

/// Axis-aligned pixel-space box with exclusive ordering invariants:
/// `x1 < x2`, `y1 < y2`, all coordinates non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::Domain("box coordinates must be finite".into()));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(Error::Domain(format!(
                "box coordinates must be non-negative, got ({x1}, {y1})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Domain(format!(
                "box must have positive extent, got ({x1}, {y1})-({x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).abs() * (self.y2 - self.y1).abs()
    }

    /// Intersection rectangle, or `None` when the overlap is empty.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        if x1 < x2 && y1 < y2 {
            Some(BBox { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    pub(crate) fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn fits_in(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// Ground-truth fault label: class plus pixel-space box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: u8,
    pub bbox: BBox,
}

/// Detector output: an annotation with a confidence score in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u8,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(class_id: u8, bbox: BBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Domain(format!(
                "confidence must lie in [0, 1], got {confidence}"
            )));
        }
        Ok(Self {
            class_id,
            bbox,
            confidence,
        })
    }
}

/// An image on disk together with its dimensions and ground-truth labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn new(
        path: impl Into<PathBuf>,
        width: u32,
        height: u32,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain("image dimensions must be at least 1x1".into()));
        }
        for ann in &annotations {
            if !ann.bbox.fits_in(width as f64, height as f64) {
                return Err(Error::Domain(format!(
                    "annotation box ({}, {})-({}, {}) exceeds image bounds {}x{}",
                    ann.bbox.x1, ann.bbox.y1, ann.bbox.x2, ann.bbox.y2, width, height
                )));
            }
        }
        Ok(Self {
            path: path.into(),
            width,
            height,
            annotations,
        })
    }

    pub fn stem(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

struct LabelRow {
    class_id: u8,
    bbox: BBox,
    confidence: Option<f64>,
}

fn parse_row(
    line: &str,
    line_num: usize,
    width: u32,
    height: u32,
    expect_confidence: bool,
    source: &str,
) -> Result<LabelRow> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let expected = if expect_confidence { 6 } else { 5 };
    if fields.len() != expected {
        return Err(Error::Parse {
            path: source.to_string(),
            line: line_num,
            message: format!("expected {expected} fields, found {}", fields.len()),
        });
    }

    let class_raw: i64 = fields[0].parse().map_err(|_| Error::Parse {
        path: source.to_string(),
        line: line_num,
        message: format!("invalid class id '{}'", fields[0]),
    })?;
    if !(0..CLASS_COUNT as i64).contains(&class_raw) {
        return Err(Error::Domain(format!(
            "{source}:{line_num}: class id {class_raw} outside 0-{}",
            CLASS_COUNT - 1
        )));
    }

    let mut values = [0f64; 5];
    for (slot, field) in values.iter_mut().zip(&fields[1..]) {
        *slot = field.parse().map_err(|_| Error::Parse {
            path: source.to_string(),
            line: line_num,
            message: format!("invalid number '{field}'"),
        })?;
    }
    let [cx, cy, w, h, conf] = values;

    for (name, v) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!(
                "{source}:{line_num}: normalized {name}={v} outside [0, 1]"
            )));
        }
    }
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::Domain(format!(
            "{source}:{line_num}: zero-area box (w={w}, h={h})"
        )));
    }

    let confidence = if expect_confidence {
        if !(0.0..=1.0).contains(&conf) {
            return Err(Error::Domain(format!(
                "{source}:{line_num}: confidence {conf} outside [0, 1]"
            )));
        }
        Some(conf)
    } else {
        None
    };

    let (fw, fh) = (width as f64, height as f64);
    let mut x1 = (cx - w / 2.0) * fw;
    let mut y1 = (cy - h / 2.0) * fh;
    let mut x2 = (cx + w / 2.0) * fw;
    let mut y2 = (cy + h / 2.0) * fh;

    // Six-decimal writes can land a hair outside the image; clamp within the
    // slack, reject anything worse.
    let (sx, sy) = (EDGE_SLACK * fw, EDGE_SLACK * fh);
    if x1 < -sx || y1 < -sy || x2 > fw + sx || y2 > fh + sy {
        return Err(Error::Domain(format!(
            "{source}:{line_num}: box ({x1:.3}, {y1:.3})-({x2:.3}, {y2:.3}) exceeds image bounds {width}x{height}"
        )));
    }
    x1 = x1.clamp(0.0, fw);
    y1 = y1.clamp(0.0, fh);
    x2 = x2.clamp(0.0, fw);
    y2 = y2.clamp(0.0, fh);

    Ok(LabelRow {
        class_id: class_raw as u8,
        bbox: BBox::new(x1, y1, x2, y2)
            .map_err(|e| Error::Domain(format!("{source}:{line_num}: {e}")))?,
        confidence,
    })
}

/// Parses normalized `class cx cy w h` label text into pixel-space annotations.
/// Blank lines are skipped; line order is preserved.
pub fn parse_label_file(text: &str, width: u32, height: u32) -> Result<Vec<Annotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            parse_row(line, idx + 1, width, height, false, "<labels>").map(|row| Annotation {
                class_id: row.class_id,
                bbox: row.bbox,
            })
        })
        .collect()
}

/// Parses `class cx cy w h confidence` prediction text.
pub fn parse_prediction_file(text: &str, width: u32, height: u32) -> Result<Vec<Detection>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            parse_row(line, idx + 1, width, height, true, "<predictions>").map(|row| Detection {
                class_id: row.class_id,
                bbox: row.bbox,
                confidence: row.confidence.expect("prediction row has confidence"),
            })
        })
        .collect()
}

fn normalized_fields(bbox: &BBox, width: u32, height: u32) -> Result<(f64, f64, f64, f64)> {
    let (fw, fh) = (width as f64, height as f64);
    if !bbox.fits_in(fw, fh) {
        return Err(Error::Domain(format!(
            "box ({}, {})-({}, {}) exceeds image bounds {width}x{height}",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        )));
    }
    Ok((
        (bbox.x1 + bbox.x2) / 2.0 / fw,
        (bbox.y1 + bbox.y2) / 2.0 / fh,
        (bbox.x2 - bbox.x1) / fw,
        (bbox.y2 - bbox.y1) / fh,
    ))
}

/// Writes annotations as normalized label text, six decimal digits per field.
/// Round-trips through [`parse_label_file`] within 1e-6 per normalized
/// coordinate.
pub fn write_label_file(annotations: &[Annotation], width: u32, height: u32) -> Result<String> {
    let mut out = String::new();
    for ann in annotations {
        let (cx, cy, w, h) = normalized_fields(&ann.bbox, width, height)?;
        out.push_str(&format!(
            "{} {cx:.6} {cy:.6} {w:.6} {h:.6}\n",
            ann.class_id
        ));
    }
    Ok(out)
}

/// Writes detections as prediction text with a trailing confidence field.
pub fn write_prediction_file(detections: &[Detection], width: u32, height: u32) -> Result<String> {
    let mut out = String::new();
    for det in detections {
        let (cx, cy, w, h) = normalized_fields(&det.bbox, width, height)?;
        out.push_str(&format!(
            "{} {cx:.6} {cy:.6} {w:.6} {h:.6} {:.6}\n",
            det.class_id, det.confidence
        ));
    }
    Ok(out)
}

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];
pub const LABEL_EXTENSION: &str = "txt";

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

/// Result of a dataset validation/replenishment pass.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub images_seen: usize,
    pub labels_seen: usize,
    /// Stems of images that have no sibling label file.
    pub missing_labels: Vec<String>,
    /// Stems of label files that have no sibling image.
    pub missing_images: Vec<String>,
    /// Image files whose header failed to decode.
    pub undecodable_images: Vec<String>,
    pub pairs_copied: usize,
    pub files_copied: usize,
    pub skipped_existing: usize,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.missing_labels.is_empty()
            && self.missing_images.is_empty()
            && self.undecodable_images.is_empty()
    }
}

fn copy_checked(src: &Path, dst: &Path, report: &mut IntegrityReport) -> Result<bool> {
    if dst.exists() {
        let existing = fs::read(dst).map_err(|e| Error::io(dst, e))?;
        let incoming = fs::read(src).map_err(|e| Error::io(src, e))?;
        if existing == incoming {
            report.skipped_existing += 1;
            return Ok(false);
        }
        return Err(Error::Integrity(format!(
            "target file {} already exists with different content",
            dst.display()
        )));
    }
    fs::copy(src, dst).map_err(|e| Error::io(dst, e))?;
    report.files_copied += 1;
    Ok(true)
}

/// Validates image/label pairing under `source_dir` and copies every complete
/// pair to `target_dir`. Never deletes; a second run over the same directories
/// copies nothing new. Unpaired or undecodable files are reported, not copied.
pub fn validate_and_replenish(source_dir: &Path, target_dir: &Path) -> Result<IntegrityReport> {
    let mut stems: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();

    let entries = fs::read_dir(source_dir).map_err(|e| Error::io(source_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(source_dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let slot = stems.entry(stem.to_string()).or_default();
        if is_image_path(&path) {
            slot.0 = Some(path);
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.eq_ignore_ascii_case(LABEL_EXTENSION))
            .unwrap_or(false)
        {
            slot.1 = Some(path);
        }
    }

    let mut report = IntegrityReport::default();
    let mut pairs: Vec<(PathBuf, PathBuf)> = Vec::new();

    for (stem, (image, label)) in &stems {
        match (image, label) {
            (Some(image), Some(label)) => {
                report.images_seen += 1;
                report.labels_seen += 1;
                if image::image_dimensions(image).is_err() {
                    report.undecodable_images.push(stem.clone());
                } else {
                    pairs.push((image.clone(), label.clone()));
                }
            }
            (Some(image), None) => {
                report.images_seen += 1;
                if image::image_dimensions(image).is_err() {
                    report.undecodable_images.push(stem.clone());
                }
                report.missing_labels.push(stem.clone());
            }
            (None, Some(_)) => {
                report.labels_seen += 1;
                report.missing_images.push(stem.clone());
            }
            (None, None) => {}
        }
    }

    if !pairs.is_empty() {
        fs::create_dir_all(target_dir).map_err(|e| Error::io(target_dir, e))?;
    }
    for (image, label) in pairs {
        let image_dst = target_dir.join(image.file_name().expect("file has a name"));
        let label_dst = target_dir.join(label.file_name().expect("file has a name"));
        let copied_image = copy_checked(&image, &image_dst, &mut report)?;
        let copied_label = copy_checked(&label, &label_dst, &mut report)?;
        if copied_image && copied_label {
            report.pairs_copied += 1;
        }
    }

    Ok(report)
}

/// Loads every image/label pair under `dir` into [`ImageRecord`]s, sorted by
/// stem. Images without a label file get an empty annotation list.
pub fn load_image_records(dir: &Path) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    paths.sort();

    for path in paths {
        let (width, height) = image::image_dimensions(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let label_path = path.with_extension(LABEL_EXTENSION);
        let annotations = if label_path.is_file() {
            let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
            parse_label_file(&text, width, height)?
        } else {
            Vec::new()
        };
        records.push(ImageRecord::new(path, width, height, annotations)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn builtin_table_has_four_classes() {
        let table = ClassTable::builtin();
        assert_eq!(table.len(), 4);
        let names: Vec<_> = table.classes().iter().map(|c| c.canonical_name.as_str()).collect();
        assert_eq!(
            names,
            ["crack", "skin debonding", "surface blemish", "pitted surface"]
        );
        for class in table.classes() {
            assert!(!class.synonyms.is_empty());
            assert!(class.synonyms.contains(&class.canonical_name));
        }
    }

    #[test]
    fn mentions_are_word_boundary_aware() {
        let table = ClassTable::builtin();
        let found = table.mentions("Severe CRACKS near the skin debonding zone");
        assert!(found.contains(&0));
        assert!(found.contains(&1));
        assert!(!found.contains(&2));
        // "crackle" must not count as a crack mention
        assert!(table.mentions("crackle finish").is_empty());
    }

    #[test]
    fn parse_center_box() {
        let anns = parse_label_file("0 0.5 0.5 0.5 0.5", 100, 100).unwrap();
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].class_id, 0);
        let b = anns[0].bbox;
        assert!(approx(b.x1, 25.0) && approx(b.y1, 25.0));
        assert!(approx(b.x2, 75.0) && approx(b.y2, 75.0));
    }

    #[test]
    fn parse_empty_file() {
        assert!(parse_label_file("", 100, 100).unwrap().is_empty());
        assert!(parse_prediction_file("", 100, 100).unwrap().is_empty());
    }

    #[test]
    fn parse_full_image_box() {
        let anns = parse_label_file("1 0.5 0.5 1.0 1.0", 640, 640).unwrap();
        let b = anns[0].bbox;
        assert_eq!(anns[0].class_id, 1);
        assert!(approx(b.x1, 0.0) && approx(b.y1, 0.0));
        assert!(approx(b.x2, 640.0) && approx(b.y2, 640.0));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = parse_label_file("0 0.5 0.5 0.5 0.5\n0 0.5 bad 0.5 0.5", 100, 100).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn class_out_of_range_is_domain_error() {
        let err = parse_label_file("4 0.5 0.5 0.5 0.5", 100, 100).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn zero_area_box_rejected() {
        let err = parse_label_file("0 0.5 0.5 0.0 0.5", 100, 100).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        // cx + w/2 = 1.1 puts the box 10% past the right edge
        let err = parse_label_file("0 0.6 0.5 1.0 0.5", 100, 100).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn prediction_confidence_attached() {
        let dets = parse_prediction_file("0 0.5 0.5 0.5 0.5 0.9", 100, 100).unwrap();
        assert_eq!(dets.len(), 1);
        assert!(approx(dets[0].confidence, 0.9));
        assert!(approx(dets[0].bbox.x1, 25.0) && approx(dets[0].bbox.x2, 75.0));
    }

    #[test]
    fn prediction_confidence_out_of_range() {
        let err = parse_prediction_file("0 0.5 0.5 0.5 0.5 1.5", 100, 100).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn write_empty_and_full_image_box() {
        assert_eq!(write_label_file(&[], 640, 640).unwrap(), "");
        let ann = Annotation {
            class_id: 1,
            bbox: BBox::new(0.0, 0.0, 640.0, 640.0).unwrap(),
        };
        assert_eq!(
            write_label_file(&[ann], 640, 640).unwrap(),
            "1 0.500000 0.500000 1.000000 1.000000\n"
        );
    }

    #[test]
    fn write_rejects_out_of_bounds() {
        let ann = Annotation {
            class_id: 0,
            bbox: BBox::new(0.0, 0.0, 700.0, 640.0).unwrap(),
        };
        assert!(matches!(
            write_label_file(&[ann], 640, 640),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn round_trip_preserves_coordinates() {
        let anns = parse_label_file("0 0.5 0.5 0.5 0.5", 100, 100).unwrap();
        let text = write_label_file(&anns, 100, 100).unwrap();
        let back = parse_label_file(&text, 100, 100).unwrap();
        for (a, b) in anns.iter().zip(&back) {
            assert!((a.bbox.x1 - b.bbox.x1).abs() < 1e-6);
            assert!((a.bbox.y1 - b.bbox.y1).abs() < 1e-6);
            assert!((a.bbox.x2 - b.bbox.x2).abs() < 1e-6);
            assert!((a.bbox.y2 - b.bbox.y2).abs() < 1e-6);
        }
    }

    #[test]
    fn bbox_rejects_inverted_and_negative() {
        assert!(BBox::new(10.0, 0.0, 5.0, 5.0).is_err());
        assert!(BBox::new(-1.0, 0.0, 5.0, 5.0).is_err());
        assert!(BBox::new(0.0, 5.0, 5.0, 5.0).is_err());
    }

    mod replenish {
        use super::*;
        use std::fs;

        fn png_bytes() -> Vec<u8> {
            let img = image::RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]));
            let mut buf = std::io::Cursor::new(Vec::new());
            img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
            buf.into_inner()
        }

        #[test]
        fn reports_and_copies_pairs() {
            let src = tempfile::tempdir().unwrap();
            let dst = tempfile::tempdir().unwrap();
            for stem in ["a", "b", "c"] {
                fs::write(src.path().join(format!("{stem}.png")), png_bytes()).unwrap();
                fs::write(src.path().join(format!("{stem}.txt")), "0 0.5 0.5 0.5 0.5\n").unwrap();
            }
            fs::write(src.path().join("orphan.png"), png_bytes()).unwrap();

            let report = validate_and_replenish(src.path(), dst.path()).unwrap();
            assert_eq!(report.missing_labels, vec!["orphan".to_string()]);
            assert!(report.missing_images.is_empty());
            assert_eq!(report.pairs_copied, 3);
            assert_eq!(report.files_copied, 6);
            assert!(!dst.path().join("orphan.png").exists());
        }

        #[test]
        fn empty_source_is_empty_report() {
            let src = tempfile::tempdir().unwrap();
            let dst = tempfile::tempdir().unwrap();
            let report = validate_and_replenish(src.path(), dst.path()).unwrap();
            assert_eq!(report.images_seen, 0);
            assert_eq!(report.files_copied, 0);
            assert!(report.is_clean());
        }

        #[test]
        fn rerun_copies_nothing_new() {
            let src = tempfile::tempdir().unwrap();
            let dst = tempfile::tempdir().unwrap();
            fs::write(src.path().join("a.png"), png_bytes()).unwrap();
            fs::write(src.path().join("a.txt"), "0 0.5 0.5 0.5 0.5\n").unwrap();

            let first = validate_and_replenish(src.path(), dst.path()).unwrap();
            assert_eq!(first.files_copied, 2);
            let second = validate_and_replenish(src.path(), dst.path()).unwrap();
            assert_eq!(second.files_copied, 0);
            assert_eq!(second.pairs_copied, 0);
            assert_eq!(second.skipped_existing, 2);
        }

        #[test]
        fn collision_with_different_content_errors() {
            let src = tempfile::tempdir().unwrap();
            let dst = tempfile::tempdir().unwrap();
            fs::write(src.path().join("a.png"), png_bytes()).unwrap();
            fs::write(src.path().join("a.txt"), "0 0.5 0.5 0.5 0.5\n").unwrap();
            fs::write(dst.path().join("a.txt"), "1 0.5 0.5 0.5 0.5\n").unwrap();

            let err = validate_and_replenish(src.path(), dst.path()).unwrap_err();
            assert!(matches!(err, Error::Integrity(_)));
        }

        #[test]
        fn undecodable_image_is_reported() {
            let src = tempfile::tempdir().unwrap();
            let dst = tempfile::tempdir().unwrap();
            fs::write(src.path().join("bad.png"), b"not a png at all").unwrap();
            fs::write(src.path().join("bad.txt"), "0 0.5 0.5 0.5 0.5\n").unwrap();

            let report = validate_and_replenish(src.path(), dst.path()).unwrap();
            assert_eq!(report.undecodable_images, vec!["bad".to_string()]);
            assert!(!report.is_clean());
            assert_eq!(report.files_copied, 0);
        }
    }
}
