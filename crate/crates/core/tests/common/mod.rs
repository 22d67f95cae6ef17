//! Shared fixture builders for the integration suites.

use std::path::{Path, PathBuf};

use bladescan::dataset::{write_label_file, Annotation, BBox, ImageRecord};

pub fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn annotation(class_id: u8, x1: f64, y1: f64, x2: f64, y2: f64) -> Annotation {
    Annotation {
        class_id,
        bbox: bbox(x1, y1, x2, y2),
    }
}

/// Writes a PNG plus its sibling label file and returns the record.
pub fn write_fixture_image(
    dir: &Path,
    stem: &str,
    width: u32,
    height: u32,
    annotations: Vec<Annotation>,
) -> ImageRecord {
    let path = dir.join(format!("{stem}.png"));
    let img = image::RgbImage::from_fn(width, height, |x, y| {
        image::Rgb([(x % 251) as u8, (y % 241) as u8, ((x + y) % 239) as u8])
    });
    img.save(&path).unwrap();
    let label = write_label_file(&annotations, width, height).unwrap();
    std::fs::write(dir.join(format!("{stem}.txt")), label).unwrap();
    ImageRecord::new(path, width, height, annotations).unwrap()
}

/// A fixture of `count` images, each carrying one box per fault class at
/// identical geometry, so per-class annotation growth under tiling is exactly
/// balanced.
pub fn four_class_fixture(
    dir: &Path,
    count: usize,
    width: u32,
    height: u32,
) -> Vec<ImageRecord> {
    (0..count)
        .map(|i| {
            let offset = (i % 5) as f64 * 16.0;
            let (x1, y1) = (40.0 + offset, 40.0 + offset);
            let annotations = (0u8..4)
                .map(|class_id| annotation(class_id, x1, y1, x1 + 80.0, y1 + 80.0))
                .collect();
            write_fixture_image(dir, &format!("img{i:03}"), width, height, annotations)
        })
        .collect()
}

#[allow(dead_code)]
pub fn binary_path() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_bladescan"))
}
