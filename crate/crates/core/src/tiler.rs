//! Multi-scale sliding-window cropping with annotation remapping.
//!
//! Window sizes shrink (or grow) geometrically with the scale index, the
//! stride is a fixed fraction of the window size, and an optional edge-aligned
//! window closes the right/bottom margin so no pixel is left uncovered.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_label_file, Annotation, ClassTable, ImageRecord};
use crate::error::{Error, Result};

/// Geometry parameters for the cropping engine.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TilingConfig {
    pub base_width: u32,
    pub base_height: u32,
    /// Scale factor applied per scale index; both shrinking (< 1) and
    /// growing (> 1) factors are accepted.
    pub scale_factor: f64,
    pub scale_count: u32,
    /// Fraction of the window size reused as stride.
    pub overlap_ratio: f64,
    /// Smallest visible fraction of an annotation kept in a crop.
    pub min_visibility: f64,
    /// Append an edge-aligned window when the stride leaves a margin.
    pub edge_clamp: bool,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            base_width: 640,
            base_height: 640,
            scale_factor: 0.5,
            scale_count: 2,
            overlap_ratio: 0.25,
            min_visibility: 0.3,
            edge_clamp: true,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.base_height == 0 {
            return Err(Error::Domain("base window must be at least 1x1".into()));
        }
        if self.scale_factor <= 0.0 || !self.scale_factor.is_finite() {
            return Err(Error::Domain(format!(
                "scale factor must be positive, got {}",
                self.scale_factor
            )));
        }
        if self.scale_count == 0 {
            return Err(Error::Domain("scale count must be at least 1".into()));
        }
        if !(self.overlap_ratio > 0.0 && self.overlap_ratio < 1.0) {
            return Err(Error::Domain(format!(
                "overlap ratio must lie in (0, 1), got {}",
                self.overlap_ratio
            )));
        }
        if !(self.min_visibility > 0.0 && self.min_visibility <= 1.0) {
            return Err(Error::Domain(format!(
                "min visibility must lie in (0, 1], got {}",
                self.min_visibility
            )));
        }
        Ok(())
    }
}

/// One concrete crop rectangle at a scale index; always fits its source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub scale_index: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub width: u32,
    pub height: u32,
}

/// A cropped sub-image with its remapped annotations.
#[derive(Debug, Clone)]
pub struct CropResult {
    pub window: CropWindow,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
    pub provenance: PathBuf,
}

/// Window size at scale `k`: the base size scaled by `r^k`, rounded half-up
/// to whole pixels.
pub fn window_size(config: &TilingConfig, k: u32) -> Result<(u32, u32)> {
    if k >= config.scale_count {
        return Err(Error::Domain(format!(
            "scale index {k} outside 0..{}",
            config.scale_count
        )));
    }
    let factor = config.scale_factor.powi(k as i32);
    let w = (config.base_width as f64 * factor).round();
    let h = (config.base_height as f64 * factor).round();
    if w < 1.0 || h < 1.0 {
        return Err(Error::Domain(format!(
            "window size rounds to zero at scale {k} (factor {factor})"
        )));
    }
    Ok((w as u32, h as u32))
}

/// Sliding stride for a window dimension: `floor(size * overlap)`, clamped
/// to a minimum of 1 so tiny windows still advance.
pub fn stride(window_extent: u32, overlap_ratio: f64) -> u32 {
    ((window_extent as f64 * overlap_ratio).floor() as u32).max(1)
}

/// Window origins along one axis: `floor((extent - window) / stride) + 1`
/// positions starting at 0, plus an edge-aligned origin when clamping is on
/// and the last stride position leaves a margin.
pub fn axis_positions(
    extent: u32,
    window_extent: u32,
    stride: u32,
    edge_clamp: bool,
) -> Result<Vec<u32>> {
    if window_extent > extent {
        return Err(Error::Domain(format!(
            "window extent {window_extent} exceeds image extent {extent}"
        )));
    }
    let steps = (extent - window_extent) / stride + 1;
    let mut origins: Vec<u32> = (0..steps).map(|i| i * stride).collect();
    if edge_clamp {
        let last = origins.last().copied().unwrap_or(0);
        if last + window_extent < extent {
            let clamped = extent - window_extent;
            if Some(&clamped) != origins.last() {
                origins.push(clamped);
            }
        }
    }
    Ok(origins)
}

/// All crop windows for an image: the Cartesian product of per-axis origins
/// at every scale whose window fits the image. Ordering is ascending scale,
/// then row-major. Scales that exceed the image (or round to zero) are
/// skipped.
pub fn windows_for_dims(width: u32, height: u32, config: &TilingConfig) -> Result<Vec<CropWindow>> {
    config.validate()?;
    let mut windows = Vec::new();
    for k in 0..config.scale_count {
        let Ok((w, h)) = window_size(config, k) else {
            continue;
        };
        if w > width || h > height {
            continue;
        }
        let xs = axis_positions(width, w, stride(w, config.overlap_ratio), config.edge_clamp)?;
        let ys = axis_positions(height, h, stride(h, config.overlap_ratio), config.edge_clamp)?;
        for &y in &ys {
            for &x in &xs {
                windows.push(CropWindow {
                    scale_index: k,
                    origin_x: x,
                    origin_y: y,
                    width: w,
                    height: h,
                });
            }
        }
    }
    Ok(windows)
}

pub fn generate_windows(image: &ImageRecord, config: &TilingConfig) -> Result<Vec<CropWindow>> {
    windows_for_dims(image.width, image.height, config)
}

/// Annotations visible in `window`, translated to window-local coordinates
/// and clipped. A source box is kept iff at least `min_visibility` of its
/// area falls inside the window.
pub fn remap_annotations(
    annotations: &[Annotation],
    window: &CropWindow,
    min_visibility: f64,
) -> Vec<Annotation> {
    let win_box = crate::dataset::BBox {
        x1: window.origin_x as f64,
        y1: window.origin_y as f64,
        x2: (window.origin_x + window.width) as f64,
        y2: (window.origin_y + window.height) as f64,
    };
    annotations
        .iter()
        .filter_map(|ann| {
            let clipped = ann.bbox.intersection(&win_box)?;
            let visible = clipped.area() / ann.bbox.area();
            if visible < min_visibility {
                return None;
            }
            let local = clipped.translated(-(window.origin_x as f64), -(window.origin_y as f64));
            Some(Annotation {
                class_id: ann.class_id,
                bbox: local,
            })
        })
        .collect()
}

/// Summary of one augmentation run, serialized as JSON next to the outputs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub images_in: usize,
    pub images_out: usize,
    /// Originals all of whose scales exceeded the image; copied through.
    pub unprocessed_originals: usize,
    /// Crops written with an empty label file (kept as negative samples).
    pub empty_label_crops: usize,
    pub annotations_in: BTreeMap<String, u64>,
    pub annotations_out: BTreeMap<String, u64>,
    /// images_out / images_in; 0 for an empty input set.
    pub expansion_factor: f64,
}

struct ImageOutput {
    crops_written: usize,
    passed_through: bool,
    empty_crops: usize,
    annotations_in: [u64; 4],
    annotations_out: [u64; 4],
}

fn count_into(counts: &mut [u64; 4], annotations: &[Annotation]) {
    for ann in annotations {
        if let Some(slot) = counts.get_mut(ann.class_id as usize) {
            *slot += 1;
        }
    }
}

fn crop_name(stem: &str, window: &CropWindow) -> String {
    format!(
        "{stem}_s{}_x{}_y{}",
        window.scale_index, window.origin_x, window.origin_y
    )
}

fn augment_one(
    record: &ImageRecord,
    config: &TilingConfig,
    output_dir: &Path,
) -> Result<ImageOutput> {
    let windows = generate_windows(record, config)?;
    let stem = record.stem();
    let mut out = ImageOutput {
        crops_written: 0,
        passed_through: false,
        empty_crops: 0,
        annotations_in: [0; 4],
        annotations_out: [0; 4],
    };
    count_into(&mut out.annotations_in, &record.annotations);

    if windows.is_empty() {
        // No applicable scale: replenish the original untouched.
        let ext = record
            .path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("png");
        let image_dst = output_dir.join(format!("{stem}.{ext}"));
        fs::copy(&record.path, &image_dst).map_err(|e| Error::io(&image_dst, e))?;
        let label_dst = output_dir.join(format!("{stem}.txt"));
        let text = write_label_file(&record.annotations, record.width, record.height)?;
        fs::write(&label_dst, text).map_err(|e| Error::io(&label_dst, e))?;
        out.passed_through = true;
        out.crops_written = 1;
        count_into(&mut out.annotations_out, &record.annotations);
        return Ok(out);
    }

    let pixels = image::open(&record.path)
        .map_err(|e| Error::Image {
            path: record.path.clone(),
            message: e.to_string(),
        })?
        .to_rgb8();
    if pixels.width() != record.width || pixels.height() != record.height {
        return Err(Error::Integrity(format!(
            "{}: recorded dimensions {}x{} disagree with decoded {}x{}",
            record.path.display(),
            record.width,
            record.height,
            pixels.width(),
            pixels.height()
        )));
    }

    for window in &windows {
        let crop = image::imageops::crop_imm(
            &pixels,
            window.origin_x,
            window.origin_y,
            window.width,
            window.height,
        )
        .to_image();
        let annotations = remap_annotations(&record.annotations, window, config.min_visibility);

        let name = crop_name(&stem, window);
        let image_dst = output_dir.join(format!("{name}.png"));
        crop.save(&image_dst).map_err(|e| Error::Image {
            path: image_dst.clone(),
            message: e.to_string(),
        })?;
        let label_dst = output_dir.join(format!("{name}.txt"));
        let text = write_label_file(&annotations, window.width, window.height)?;
        fs::write(&label_dst, text).map_err(|e| Error::io(&label_dst, e))?;

        if annotations.is_empty() {
            out.empty_crops += 1;
        }
        count_into(&mut out.annotations_out, &annotations);
        out.crops_written += 1;
    }
    Ok(out)
}

/// Tiles every record into `output_dir`, writing `<stem>_s<k>_x<x>_y<y>.png`
/// crops with sibling `.txt` labels. Untileable originals are copied through
/// unchanged. Images are processed in parallel but the manifest is
/// accumulated in source order, so repeated runs are byte-identical.
pub fn augment_dataset(
    records: &[ImageRecord],
    config: &TilingConfig,
    output_dir: &Path,
    parallelism: usize,
) -> Result<AugmentManifest> {
    config.validate()?;
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outputs: Vec<Result<ImageOutput>> = pool.install(|| {
        records
            .par_iter()
            .map(|record| augment_one(record, config, output_dir))
            .collect()
    });

    let table = ClassTable::builtin();
    let mut manifest = AugmentManifest {
        images_in: records.len(),
        ..Default::default()
    };
    let mut in_counts = [0u64; 4];
    let mut out_counts = [0u64; 4];
    for output in outputs {
        let output = output.map_err(|e| {
            e.in_stage("augment aborted; partial crops may remain in the output directory")
        })?;
        manifest.images_out += output.crops_written;
        manifest.empty_label_crops += output.empty_crops;
        if output.passed_through {
            manifest.unprocessed_originals += 1;
        }
        for i in 0..4 {
            in_counts[i] += output.annotations_in[i];
            out_counts[i] += output.annotations_out[i];
        }
    }
    for class in table.classes() {
        let name = class.canonical_name.clone();
        manifest
            .annotations_in
            .insert(name.clone(), in_counts[class.id as usize]);
        manifest
            .annotations_out
            .insert(name, out_counts[class.id as usize]);
    }
    manifest.expansion_factor = if manifest.images_in == 0 {
        0.0
    } else {
        manifest.images_out as f64 / manifest.images_in as f64
    };
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BBox;
    use proptest::prelude::*;

    fn cfg(base: u32, r: f64, k: u32, o: f64) -> TilingConfig {
        TilingConfig {
            base_width: base,
            base_height: base,
            scale_factor: r,
            scale_count: k,
            overlap_ratio: o,
            ..TilingConfig::default()
        }
    }

    #[test]
    fn window_size_identity_at_k0() {
        for r in [0.25, 0.5, 1.3, 2.0] {
            let c = cfg(640, r, 3, 0.25);
            assert_eq!(window_size(&c, 0).unwrap(), (640, 640));
        }
    }

    #[test]
    fn window_size_halves() {
        let c = cfg(640, 0.5, 3, 0.25);
        assert_eq!(window_size(&c, 1).unwrap(), (320, 320));
        assert_eq!(window_size(&c, 2).unwrap(), (160, 160));
    }

    #[test]
    fn window_size_out_of_range() {
        let c = cfg(640, 0.5, 2, 0.25);
        assert!(window_size(&c, 2).is_err());
    }

    #[test]
    fn window_size_zero_rejected() {
        let c = cfg(1, 0.1, 2, 0.25);
        assert!(window_size(&c, 1).is_err());
    }

    #[test]
    fn stride_examples() {
        assert_eq!(stride(320, 0.25), 80);
        assert_eq!(stride(3, 0.25), 1); // floor(0.75) clamps up to 1
        assert_eq!(stride(640, 0.5), 320);
    }

    #[test]
    fn axis_positions_exact_cover() {
        let origins = axis_positions(1920, 640, 320, true).unwrap();
        assert_eq!(origins, vec![0, 320, 640, 960, 1280]);
    }

    #[test]
    fn axis_positions_degenerate() {
        assert_eq!(axis_positions(640, 640, 160, true).unwrap(), vec![0]);
    }

    #[test]
    fn axis_positions_edge_clamp() {
        let origins = axis_positions(1000, 640, 160, true).unwrap();
        assert_eq!(origins, vec![0, 160, 320, 360]);
        let unclamped = axis_positions(1000, 640, 160, false).unwrap();
        assert_eq!(unclamped, vec![0, 160, 320]);
    }

    #[test]
    fn axis_positions_window_too_large() {
        assert!(axis_positions(100, 640, 160, true).is_err());
    }

    #[test]
    fn generate_windows_1920x1080() {
        let c = cfg(640, 0.5, 2, 0.5);
        let windows = windows_for_dims(1920, 1080, &c).unwrap();
        let k0: Vec<_> = windows.iter().filter(|w| w.scale_index == 0).collect();
        let k1: Vec<_> = windows.iter().filter(|w| w.scale_index == 1).collect();
        // k=0: 5 x-origins, y gives floor((1080-640)/320)+1 = 2 plus clamped 440
        assert_eq!(k0.len(), 5 * 3);
        assert!(k0.iter().any(|w| w.origin_y == 440));
        // k=1: 11 x-origins, 5 y-origins plus clamped 760
        assert_eq!(k1.len(), 11 * 6);
        // deterministic ordering: ascending scale then row-major
        let mut sorted = windows.clone();
        sorted.sort_by_key(|w| (w.scale_index, w.origin_y, w.origin_x));
        assert_eq!(windows, sorted);
    }

    #[test]
    fn generate_windows_image_too_small() {
        let c = cfg(640, 0.5, 2, 0.25);
        assert!(windows_for_dims(100, 100, &c).unwrap().is_empty());
    }

    #[test]
    fn generate_windows_exact_fit() {
        let c = cfg(640, 0.5, 1, 0.25);
        let windows = windows_for_dims(640, 640, &c).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].origin_x, 0);
        assert_eq!(windows[0].width, 640);
    }

    fn window(x: u32, y: u32, w: u32, h: u32) -> CropWindow {
        CropWindow {
            scale_index: 0,
            origin_x: x,
            origin_y: y,
            width: w,
            height: h,
        }
    }

    #[test]
    fn remap_keeps_contained_box() {
        let ann = Annotation {
            class_id: 2,
            bbox: BBox::new(110.0, 120.0, 150.0, 160.0).unwrap(),
        };
        let out = remap_annotations(&[ann], &window(100, 100, 100, 100), 0.3);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, BBox::new(10.0, 20.0, 50.0, 60.0).unwrap());
        assert!((out[0].bbox.area() - ann.bbox.area()).abs() < 1e-9);
    }

    #[test]
    fn remap_drops_outside_box() {
        let ann = Annotation {
            class_id: 0,
            bbox: BBox::new(0.0, 0.0, 50.0, 50.0).unwrap(),
        };
        assert!(remap_annotations(&[ann], &window(100, 100, 100, 100), 0.3).is_empty());
    }

    #[test]
    fn remap_visibility_threshold() {
        // Box straddles the window's left edge, exactly half visible.
        let ann = Annotation {
            class_id: 1,
            bbox: BBox::new(60.0, 120.0, 140.0, 160.0).unwrap(),
        };
        let win = window(100, 100, 100, 100);
        let kept = remap_annotations(&[ann], &win, 0.3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox, BBox::new(0.0, 20.0, 40.0, 60.0).unwrap());
        assert!(remap_annotations(&[ann], &win, 0.6).is_empty());
    }

    fn test_png(dir: &Path, stem: &str, w: u32, h: u32) -> PathBuf {
        let path = dir.join(format!("{stem}.png"));
        image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]))
            .save(&path)
            .unwrap();
        path
    }

    #[test]
    fn augment_counts_match_recount() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let path = test_png(src.path(), "img", 1920, 1080);
        let record = ImageRecord::new(
            path,
            1920,
            1080,
            vec![
                Annotation {
                    class_id: 0,
                    bbox: BBox::new(100.0, 100.0, 300.0, 300.0).unwrap(),
                },
                Annotation {
                    class_id: 3,
                    bbox: BBox::new(900.0, 500.0, 1100.0, 700.0).unwrap(),
                },
            ],
        )
        .unwrap();

        let config = TilingConfig {
            overlap_ratio: 0.5,
            ..TilingConfig::default()
        };
        let manifest = augment_dataset(&[record.clone()], &config, out.path(), 2).unwrap();
        let windows = generate_windows(&record, &config).unwrap();
        assert_eq!(manifest.images_out, windows.len());
        assert_eq!(manifest.expansion_factor, windows.len() as f64);

        // Recount emitted label files independently.
        let mut recount = [0u64; 4];
        let mut label_files = 0;
        for entry in fs::read_dir(out.path()).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().and_then(|e| e.to_str()) == Some("txt") {
                label_files += 1;
                let text = fs::read_to_string(&p).unwrap();
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let class: usize = line.split_whitespace().next().unwrap().parse().unwrap();
                    recount[class] += 1;
                }
            }
        }
        assert_eq!(label_files, windows.len());
        for class in ClassTable::builtin().classes() {
            assert_eq!(
                manifest.annotations_out[&class.canonical_name],
                recount[class.id as usize]
            );
        }
    }

    #[test]
    fn augment_passes_through_small_image() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let path = test_png(src.path(), "tiny", 32, 32);
        let record = ImageRecord::new(path, 32, 32, vec![]).unwrap();
        let manifest =
            augment_dataset(&[record], &TilingConfig::default(), out.path(), 1).unwrap();
        assert_eq!(manifest.unprocessed_originals, 1);
        assert_eq!(manifest.images_out, 1);
        assert!(out.path().join("tiny.png").exists());
        assert!(out.path().join("tiny.txt").exists());
    }

    #[test]
    fn augment_empty_input() {
        let out = tempfile::tempdir().unwrap();
        let manifest = augment_dataset(&[], &TilingConfig::default(), out.path(), 1).unwrap();
        assert_eq!(manifest.images_in, 0);
        assert_eq!(manifest.images_out, 0);
        assert_eq!(manifest.expansion_factor, 0.0);
    }

    proptest! {
        /// With edge clamping on, windows cover the full axis extent.
        #[test]
        fn axis_cover(extent in 1u32..4000, window in 1u32..4000, o in 0.05f64..0.95) {
            prop_assume!(window <= extent);
            let origins = axis_positions(extent, window, stride(window, o), true).unwrap();
            let mut covered = 0u32; // frontier of contiguous coverage from 0
            for &origin in &origins {
                prop_assert!(origin <= covered, "gap before origin {origin}");
                covered = covered.max(origin + window);
            }
            prop_assert_eq!(covered, extent);
        }

        /// Count law: per-axis origin count equals Eq. (3)'s n plus at most
        /// one clamped window.
        #[test]
        fn axis_count_law(extent in 1u32..4000, window in 1u32..4000, o in 0.05f64..0.95) {
            prop_assume!(window <= extent);
            let s = stride(window, o);
            let n = (extent - window) / s + 1;
            let origins = axis_positions(extent, window, s, true).unwrap();
            prop_assert!(origins.len() as u32 == n || origins.len() as u32 == n + 1);
        }

        /// With r < 1 the window size is non-increasing in k, and strictly
        /// decreasing as long as the continuous size shrinks by more than a
        /// pixel (below that, rounding may plateau).
        #[test]
        fn window_size_monotone(base in 2u32..4096, r in 0.2f64..0.95) {
            let c = cfg(base, r, 8, 0.25);
            let mut prev = base;
            for k in 1..8 {
                match window_size(&c, k) {
                    Ok((w, _)) => {
                        prop_assert!(w <= prev);
                        let continuous_prev = base as f64 * r.powi(k as i32 - 1);
                        if continuous_prev * (1.0 - r) > 1.0 {
                            prop_assert!(w < prev, "no strict decrease at k={k}: {prev} -> {w}");
                        }
                        prev = w;
                    }
                    Err(_) => break,
                }
            }
        }

        /// Remap soundness: every emitted box lies inside its crop.
        #[test]
        fn remap_boxes_in_bounds(
            ox in 0u32..500, oy in 0u32..500,
            w in 10u32..400, h in 10u32..400,
            bx in 0f64..900.0, by in 0f64..900.0,
            bw in 1f64..200.0, bh in 1f64..200.0,
            v_min in 0.05f64..1.0,
        ) {
            let ann = Annotation {
                class_id: 0,
                bbox: BBox::new(bx, by, bx + bw, by + bh).unwrap(),
            };
            let win = window(ox, oy, w, h);
            for out in remap_annotations(&[ann], &win, v_min) {
                prop_assert!(out.bbox.fits_in(w as f64, h as f64));
            }
        }
    }
}
