//! Evaluation suite: detection metrics, report-consistency scoring, and the
//! ablation harness.
//!
//! Detection metrics use greedy confidence-ordered matching at a fixed IoU
//! threshold; AP uses all-point interpolation over the precision envelope.
//! True negatives are ill-defined for open-world detection, so TN is pinned
//! at 0 and accuracy reduces to TP / (TP + FP + FN).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, BBox, ClassTable, Detection, ImageRecord};
use crate::detector::ProviderConfig;
use crate::error::{Error, Result};
use crate::kvmap::KvConfig;
use crate::llm::{ChatTransport, DiagnosticReport, Pipeline, StageConfig};

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    match a.intersection(b) {
        Some(overlap) => {
            let inter = overlap.area();
            inter / (a.area() + b.area() - inter)
        }
        None => 0.0,
    }
}

/// Match counts plus the per-detection assignment (index into the
/// ground-truth list, in the original prediction order).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Pinned at 0: detection has no enumerable negatives.
    pub true_negatives: usize,
    pub assignments: Vec<Option<usize>>,
}

/// Greedy matching in descending confidence: each prediction takes the
/// highest-IoU unmatched ground truth of its own class with IoU at or above
/// the threshold; every ground truth is matched at most once.
pub fn match_detections(
    predictions: &[Detection],
    ground_truths: &[Annotation],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .confidence
            .partial_cmp(&predictions[a].confidence)
            .expect("confidences are finite")
    });

    let mut taken = vec![false; ground_truths.len()];
    let mut assignments = vec![None; predictions.len()];
    let mut true_positives = 0;

    for pred_idx in order {
        let pred = &predictions[pred_idx];
        let mut best: Option<(usize, f64)> = None;
        for (gt_idx, gt) in ground_truths.iter().enumerate() {
            if taken[gt_idx] || gt.class_id != pred.class_id {
                continue;
            }
            let overlap = iou(&pred.bbox, &gt.bbox);
            if overlap < iou_threshold {
                continue;
            }
            let better = match best {
                Some((_, best_iou)) => overlap > best_iou,
                None => true,
            };
            if better {
                best = Some((gt_idx, overlap));
            }
        }
        if let Some((gt_idx, _)) = best {
            taken[gt_idx] = true;
            assignments[pred_idx] = Some(gt_idx);
            true_positives += 1;
        }
    }

    MatchResult {
        true_positives,
        false_positives: predictions.len() - true_positives,
        false_negatives: ground_truths.len() - true_positives,
        true_negatives: 0,
        assignments,
    }
}

/// Precision, recall, F1, and accuracy from match counts. Zero denominators
/// yield 0 by convention.
pub fn summary_metrics(m: &MatchResult) -> (f64, f64, f64, f64) {
    let tp = m.true_positives as f64;
    let fp = m.false_positives as f64;
    let fn_ = m.false_negatives as f64;
    let tn = m.true_negatives as f64;
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let accuracy = ratio(tp + tn, tp + fp + fn_ + tn);
    (precision, recall, f1, accuracy)
}

/// Predictions and ground truths sharing one coordinate frame (one image).
#[derive(Debug, Clone, Default)]
pub struct EvalSample {
    pub predictions: Vec<Detection>,
    pub ground_truths: Vec<Annotation>,
}

/// Confidence-tagged TP/FP flags for one class across samples, matched
/// greedily per sample.
fn score_class(samples: &[EvalSample], class_id: u8, iou_threshold: f64) -> (Vec<(f64, bool)>, usize) {
    let mut flags: Vec<(f64, bool)> = Vec::new();
    let mut total_gt = 0;
    for sample in samples {
        let gts: Vec<&Annotation> = sample
            .ground_truths
            .iter()
            .filter(|g| g.class_id == class_id)
            .collect();
        total_gt += gts.len();
        let mut preds: Vec<&Detection> = sample
            .predictions
            .iter()
            .filter(|p| p.class_id == class_id)
            .collect();
        preds.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite"));

        let mut taken = vec![false; gts.len()];
        for pred in preds {
            let mut best: Option<(usize, f64)> = None;
            for (gt_idx, gt) in gts.iter().enumerate() {
                if taken[gt_idx] {
                    continue;
                }
                let overlap = iou(&pred.bbox, &gt.bbox);
                if overlap >= iou_threshold && best.map(|(_, b)| overlap > b).unwrap_or(true) {
                    best = Some((gt_idx, overlap));
                }
            }
            let is_tp = if let Some((gt_idx, _)) = best {
                taken[gt_idx] = true;
                true
            } else {
                false
            };
            flags.push((pred.confidence, is_tp));
        }
    }
    flags.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite"));
    (flags, total_gt)
}

/// Average precision for one class via all-point interpolation: accumulate
/// precision/recall in descending confidence order, apply the precision
/// envelope, and integrate the area under the curve. Returns 0 when the
/// class has no ground truth or no predictions.
pub fn average_precision_samples(
    samples: &[EvalSample],
    class_id: u8,
    iou_threshold: f64,
) -> f64 {
    let (flags, total_gt) = score_class(samples, class_id, iou_threshold);
    if total_gt == 0 || flags.is_empty() {
        return 0.0;
    }

    let mut points: Vec<(f64, f64)> = Vec::with_capacity(flags.len()); // (recall, precision)
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in &flags {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / total_gt as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }

    // Precision envelope: monotone non-increasing from the right.
    let mut envelope = points.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }

    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in envelope {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Single-frame form of [`average_precision_samples`].
pub fn average_precision(
    predictions: &[Detection],
    ground_truths: &[Annotation],
    class_id: u8,
    iou_threshold: f64,
) -> f64 {
    average_precision_samples(
        &[EvalSample {
            predictions: predictions.to_vec(),
            ground_truths: ground_truths.to_vec(),
        }],
        class_id,
        iou_threshold,
    )
}

/// Unweighted mean AP over the classes with at least one ground-truth
/// instance. Errors when no class has ground truth.
pub fn mean_ap_samples(samples: &[EvalSample], classes: &[u8], iou_threshold: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut counted = 0;
    for &class_id in classes {
        let has_gt = samples
            .iter()
            .any(|s| s.ground_truths.iter().any(|g| g.class_id == class_id));
        if !has_gt {
            continue;
        }
        sum += average_precision_samples(samples, class_id, iou_threshold);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Domain(
            "mean AP is undefined: no class has ground truth".into(),
        ));
    }
    Ok(sum / counted as f64)
}

/// Single-frame form of [`mean_ap_samples`].
pub fn mean_ap(
    predictions: &[Detection],
    ground_truths: &[Annotation],
    classes: &[u8],
    iou_threshold: f64,
) -> Result<f64> {
    mean_ap_samples(
        &[EvalSample {
            predictions: predictions.to_vec(),
            ground_truths: ground_truths.to_vec(),
        }],
        classes,
        iou_threshold,
    )
}

/// Loads evaluation samples from a ground-truth label directory and a
/// prediction directory sharing stems. Predictions may omit the confidence
/// field (assumed 1.0), so a label directory evaluates against itself at a
/// perfect score. Without an image directory, boxes are parsed in the
/// normalized frame; IoU is invariant under per-axis scaling, so the metrics
/// are unchanged.
pub fn load_samples_from_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    images_dir: Option<&Path>,
) -> Result<Vec<EvalSample>> {
    use crate::dataset::{is_image_path, parse_label_file, parse_prediction_file};

    let mut dims: BTreeMap<String, (u32, u32)> = BTreeMap::new();
    if let Some(dir) = images_dir {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() && is_image_path(&path) {
                if let (Some(stem), Ok((w, h))) = (
                    path.file_stem().and_then(|s| s.to_str()),
                    image::image_dimensions(&path),
                ) {
                    dims.insert(stem.to_string(), (w, h));
                }
            }
        }
    }

    let list_label_stems = |dir: &Path| -> Result<Vec<String>> {
        let mut stems: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file() && p.extension().and_then(|e| e.to_str()) == Some("txt")
            })
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
            .collect();
        stems.sort();
        Ok(stems)
    };

    let gt_stems = list_label_stems(gt_dir)?;
    let pred_stems = list_label_stems(pred_dir)?;
    let mut all_stems: BTreeSet<String> = gt_stems.into_iter().collect();
    all_stems.extend(pred_stems);

    let lenient_predictions = |text: &str, w: u32, h: u32| -> Result<Vec<Detection>> {
        let padded: String = text
            .lines()
            .map(|line| {
                if line.split_whitespace().count() == 5 {
                    format!("{line} 1.000000\n")
                } else {
                    format!("{line}\n")
                }
            })
            .collect();
        parse_prediction_file(&padded, w, h)
    };

    let mut samples = Vec::new();
    for stem in all_stems {
        let (w, h) = dims.get(&stem).copied().unwrap_or((1, 1));
        let gt_path = gt_dir.join(format!("{stem}.txt"));
        let ground_truths = if gt_path.is_file() {
            let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
            parse_label_file(&text, w, h)?
        } else {
            Vec::new()
        };
        let pred_path = pred_dir.join(format!("{stem}.txt"));
        let predictions = if pred_path.is_file() {
            let text = fs::read_to_string(&pred_path).map_err(|e| Error::io(&pred_path, e))?;
            lenient_predictions(&text, w, h)?
        } else {
            Vec::new()
        };
        samples.push(EvalSample {
            predictions,
            ground_truths,
        });
    }
    Ok(samples)
}

/// Aggregate evaluation over a sample set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub ap_per_class: BTreeMap<String, f64>,
    pub map50: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fcs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aps: Option<f64>,
}

/// Match counts summed over samples plus per-class AP and mAP at the given
/// IoU threshold.
pub fn evaluate_samples(
    samples: &[EvalSample],
    table: &ClassTable,
    iou_threshold: f64,
) -> Result<EvalResult> {
    let mut totals = MatchResult {
        true_positives: 0,
        false_positives: 0,
        false_negatives: 0,
        true_negatives: 0,
        assignments: Vec::new(),
    };
    for sample in samples {
        let m = match_detections(&sample.predictions, &sample.ground_truths, iou_threshold);
        totals.true_positives += m.true_positives;
        totals.false_positives += m.false_positives;
        totals.false_negatives += m.false_negatives;
    }
    let (precision, recall, f1, accuracy) = summary_metrics(&totals);

    let mut ap_per_class = BTreeMap::new();
    for class in table.classes() {
        let has_gt = samples
            .iter()
            .any(|s| s.ground_truths.iter().any(|g| g.class_id == class.id));
        if has_gt {
            ap_per_class.insert(
                class.canonical_name.clone(),
                average_precision_samples(samples, class.id, iou_threshold),
            );
        }
    }
    let class_ids: Vec<u8> = table.classes().iter().map(|c| c.id).collect();
    let map50 = mean_ap_samples(samples, &class_ids, iou_threshold)?;

    Ok(EvalResult {
        precision,
        recall,
        f1,
        accuracy,
        ap_per_class,
        map50,
        fcs: None,
        aps: None,
    })
}

/// Fault Consistency Score: the fraction of detected fault categories whose
/// name (or any synonym) appears in the report text. Errors when no class
/// was detected, since the ratio is undefined.
pub fn fcs(report_text: &str, detected_classes: &BTreeSet<u8>, table: &ClassTable) -> Result<f64> {
    if detected_classes.is_empty() {
        return Err(Error::Domain(
            "consistency score is undefined without detected classes".into(),
        ));
    }
    let mentioned = table.mentions(report_text);
    let matched = detected_classes.intersection(&mentioned).count();
    Ok(matched as f64 / detected_classes.len() as f64)
}

/// Expected keywords per fault class, loaded from a JSON map of canonical
/// class name to keyword list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeywordSpec {
    pub keywords: BTreeMap<String, Vec<String>>,
}

impl KeywordSpec {
    /// The keyword spec shipped with the binary (`data/keywords.json`).
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../data/keywords.json"))
            .expect("builtin keyword spec parses")
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("keyword spec {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (class, words) in &self.keywords {
            if words.is_empty() {
                return Err(Error::Config(format!(
                    "keyword list for '{class}' is empty"
                )));
            }
        }
        Ok(())
    }

    /// Union of the keywords expected for the given classes.
    pub fn expected_for(&self, classes: &BTreeSet<u8>, table: &ClassTable) -> Vec<String> {
        let mut out = Vec::new();
        for &id in classes {
            if let Some(words) = self.keywords.get(table.name(id)) {
                out.extend(words.iter().cloned());
            }
        }
        out
    }
}

/// One report paired with the fault classes it was expected to cover.
pub struct ScoredReport<'a> {
    pub report: &'a DiagnosticReport,
    pub expected_classes: BTreeSet<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApsResult {
    pub score: f64,
    pub scored_reports: usize,
    /// Reports skipped for lack of any expected keyword.
    pub skipped_reports: usize,
}

/// Average Precision Score: per report, the fraction of expected keywords
/// present (case-insensitive) anywhere in the report sections; averaged over
/// reports. Reports with an empty expected-keyword set are skipped and
/// counted.
pub fn aps(reports: &[ScoredReport<'_>], spec: &KeywordSpec, table: &ClassTable) -> Result<ApsResult> {
    spec.validate()?;
    let mut sum = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for item in reports {
        let expected = spec.expected_for(&item.expected_classes, table);
        if expected.is_empty() {
            skipped += 1;
            continue;
        }
        let haystack = item.report.full_text().to_lowercase();
        let matched = expected
            .iter()
            .filter(|kw| haystack.contains(&kw.to_lowercase()))
            .count();
        sum += matched as f64 / expected.len() as f64;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Domain(
            "keyword score is undefined: no scorable reports".into(),
        ));
    }
    Ok(ApsResult {
        score: sum / scored as f64,
        scored_reports: scored,
        skipped_reports: skipped,
    })
}

/// One ablation configuration and its outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub enable_detector: bool,
    pub enable_stage1: bool,
    pub enable_stage2: bool,
    pub detection: bool,
    pub analysis: bool,
    pub advice: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned plain-text rendering, one row per configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>9} {:>8} {:>6} {:>7}\n",
            "configuration", "detection", "analysis", "advice", "aps"
        ));
        for row in &self.rows {
            let mark = |b: bool| if b { "yes" } else { "-" };
            let aps = row
                .aps
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "n/a".to_string());
            out.push_str(&format!(
                "{:<24} {:>9} {:>8} {:>6} {:>7}\n",
                row.name,
                mark(row.detection),
                mark(row.analysis),
                mark(row.advice),
                aps
            ));
            if let Some(err) = &row.error {
                out.push_str(&format!("  error: {err}\n"));
            }
        }
        out
    }
}

/// The four stage configurations exercised by the ablation harness, in
/// fixed presentation order.
pub const ABLATION_CONFIGS: [(&str, bool, bool, bool); 4] = [
    ("detector+advice", true, false, true),
    ("detector+analysis", true, true, false),
    ("analysis+advice", false, true, true),
    ("full", true, true, true),
];

pub struct AblationInputs<'a> {
    pub records: &'a [ImageRecord],
    pub detector: &'a ProviderConfig,
    pub kv: &'a KvConfig,
    pub stages: &'a StageConfig,
    pub transport: &'a dyn ChatTransport,
    pub keywords: &'a KeywordSpec,
    pub table: &'a ClassTable,
}

/// Runs the pipeline under the four toggle configurations and records the
/// output-category presence and keyword score per configuration. A failing
/// configuration is recorded in its own row without affecting the others.
/// An empty dataset yields an empty table.
pub fn run_ablation(inputs: &AblationInputs<'_>) -> AblationTable {
    if inputs.records.is_empty() {
        return AblationTable::default();
    }

    let mut table = AblationTable::default();
    for (name, enable_detector, enable_stage1, enable_stage2) in ABLATION_CONFIGS {
        let stages = inputs
            .stages
            .with_toggles(enable_detector, enable_stage1, enable_stage2);
        let pipeline = Pipeline {
            detector: inputs.detector,
            kv: inputs.kv,
            stages: &stages,
            transport: inputs.transport,
            table: inputs.table,
        };

        let mut row = AblationRow {
            name: name.to_string(),
            enable_detector,
            enable_stage1,
            enable_stage2,
            detection: false,
            analysis: false,
            advice: false,
            aps: None,
            error: None,
        };

        let mut results = Vec::with_capacity(inputs.records.len());
        let mut failure: Option<Error> = None;
        for record in inputs.records {
            match pipeline.run(record) {
                Ok(result) => results.push((record, result)),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }

        match failure {
            Some(e) => row.error = Some(e.to_string()),
            None => {
                row.detection = results.iter().all(|(_, r)| r.categories.detection);
                row.analysis = results.iter().all(|(_, r)| r.categories.analysis);
                row.advice = results.iter().all(|(_, r)| r.categories.advice);

                let scored: Vec<ScoredReport<'_>> = results
                    .iter()
                    .map(|(record, result)| ScoredReport {
                        report: &result.report,
                        expected_classes: record
                            .annotations
                            .iter()
                            .map(|a| a.class_id)
                            .collect(),
                    })
                    .collect();
                match aps(&scored, inputs.keywords, inputs.table) {
                    Ok(result) => row.aps = Some(result.score),
                    Err(e) => row.error = Some(e.to_string()),
                }
            }
        }
        table.rows.push(row);
    }
    table
}
