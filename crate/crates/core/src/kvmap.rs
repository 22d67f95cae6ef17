//! Key-Value detection-to-text mapping.
//!
//! Converts a detection set into a deterministic structured summary: per-class
//! counts and occurrence frequencies, a descriptive quantifier per frequency
//! band, and a large-area flag for classes whose biggest box exceeds an area
//! threshold. The rendered text is the textual bridge handed to the language
//! stages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, ClassTable};
use crate::detector::DetectionSet;
use crate::error::{Error, Result};

/// Thresholds driving the qualitative and quantitative descriptions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KvConfig {
    /// Fraction of the source image area above which a box counts as
    /// large-area.
    pub area_threshold_fraction: f64,
    /// Frequency break points for the quantifier bands, strictly increasing
    /// in (0, 1].
    pub quantifier_thresholds: [f64; 4],
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            area_threshold_fraction: 0.05,
            quantifier_thresholds: [0.2, 0.4, 0.5, 0.8],
        }
    }
}

impl KvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.area_threshold_fraction > 0.0 && self.area_threshold_fraction <= 1.0) {
            return Err(Error::Domain(format!(
                "area threshold fraction must lie in (0, 1], got {}",
                self.area_threshold_fraction
            )));
        }
        let t = &self.quantifier_thresholds;
        let increasing = t.windows(2).all(|w| w[0] < w[1]);
        if !increasing || t[0] <= 0.0 || t[3] > 1.0 {
            return Err(Error::Domain(format!(
                "quantifier thresholds must be strictly increasing in (0, 1], got {t:?}"
            )));
        }
        Ok(())
    }
}

/// One class line of a fault summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub class_id: u8,
    pub count: u64,
    pub frequency: f64,
    pub quantifier: Option<String>,
    pub large_area: bool,
    /// Largest box area observed for this class, in squared pixels.
    pub max_box_area: f64,
}

/// Per-class counts, frequencies, quantifiers, and large-area flags for one
/// detection set. Entries are ordered by descending frequency, ties broken by
/// ascending class id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultSummary {
    pub total: u64,
    pub entries: Vec<SummaryEntry>,
}

/// Per-class detection counts and occurrence frequencies
/// `f_k = N_k / N_total`. An empty set yields an empty map.
pub fn class_frequencies(dset: &DetectionSet) -> BTreeMap<u8, (u64, f64)> {
    let mut counts: BTreeMap<u8, u64> = BTreeMap::new();
    for det in &dset.detections {
        *counts.entry(det.class_id).or_insert(0) += 1;
    }
    let total = dset.detections.len() as f64;
    counts
        .into_iter()
        .map(|(class_id, n)| (class_id, (n, n as f64 / total)))
        .collect()
}

/// Descriptive quantifier for an occurrence frequency. Bands are
/// left-open/right-closed at the configured break points; frequencies at or
/// below the first break point carry no quantifier.
pub fn quantifier(frequency: f64, config: &KvConfig) -> Option<&'static str> {
    let [t1, t2, t3, t4] = config.quantifier_thresholds;
    if frequency > t4 {
        Some("almost all")
    } else if frequency > t3 {
        Some("over half")
    } else if frequency > t2 {
        Some("some")
    } else if frequency > t1 {
        Some("few")
    } else {
        None
    }
}

/// Box area in squared pixels: `|x2 - x1| * |y2 - y1|`.
pub fn box_area(bbox: &BBox) -> f64 {
    bbox.area()
}

/// Builds the per-class summary for a detection set over an image of
/// `image_area` squared pixels. A class is flagged large-area when its
/// biggest box exceeds `area_threshold_fraction * image_area`.
pub fn summarize(dset: &DetectionSet, image_area: f64, config: &KvConfig) -> Result<FaultSummary> {
    config.validate()?;
    if image_area <= 0.0 {
        return Err(Error::Domain(format!(
            "image area must be positive, got {image_area}"
        )));
    }
    let area_threshold = config.area_threshold_fraction * image_area;

    let mut entries: Vec<SummaryEntry> = class_frequencies(dset)
        .into_iter()
        .map(|(class_id, (count, frequency))| {
            let max_box_area = dset
                .detections
                .iter()
                .filter(|d| d.class_id == class_id)
                .map(|d| box_area(&d.bbox))
                .fold(0.0f64, f64::max);
            SummaryEntry {
                class_id,
                count,
                frequency,
                quantifier: quantifier(frequency, config).map(str::to_string),
                large_area: max_box_area > area_threshold,
                max_box_area,
            }
        })
        .collect();

    entries.sort_by(|a, b| {
        b.frequency
            .partial_cmp(&a.frequency)
            .expect("frequencies are finite")
            .then(a.class_id.cmp(&b.class_id))
    });

    Ok(FaultSummary {
        total: dset.detections.len() as u64,
        entries,
    })
}

/// Renders a summary as one deterministic paragraph. Each entry appears as
/// `[quantifier ]<name> (<count> of <total>[, large-area])` in summary order;
/// an empty summary renders the fixed sentence `No faults detected.`
pub fn render_text(summary: &FaultSummary, table: &ClassTable) -> String {
    if summary.entries.is_empty() {
        return "No faults detected.".to_string();
    }
    let parts: Vec<String> = summary
        .entries
        .iter()
        .map(|entry| {
            let name = table.name(entry.class_id);
            let quantifier = entry
                .quantifier
                .as_deref()
                .map(|q| format!("{q} "))
                .unwrap_or_default();
            let large = if entry.large_area { ", large-area" } else { "" };
            format!(
                "{quantifier}{name} ({} of {}{large})",
                entry.count, summary.total
            )
        })
        .collect();
    format!("Detected faults: {}.", parts.join(", "))
}
