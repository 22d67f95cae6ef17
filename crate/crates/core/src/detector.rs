//! Pluggable detection providers and overlay rendering.
//!
//! Three providers stand in for the detection network: file-backed
//! predictions, a remote HTTP inference endpoint, and a synthetic provider
//! that derives detections from ground-truth annotations with optional
//! seeded noise.

use std::fs;
use std::path::PathBuf;

use base64::Engine;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{parse_prediction_file, BBox, Detection, ImageRecord, LABEL_EXTENSION};
use crate::error::{Error, Result};
use crate::net::InFlightPermit;

/// Detections for one image, tagged with the provider that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_path: PathBuf,
    pub image_width: u32,
    pub image_height: u32,
    pub detections: Vec<Detection>,
    pub provider_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    File,
    Http,
    Synthetic,
}

/// Where detections come from and how they are filtered.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Prediction directory for `file`, endpoint URL for `http`.
    #[serde(default)]
    pub location: Option<String>,
    #[serde(default)]
    pub confidence_floor: f64,
    /// Synthetic noise controls.
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub jitter_px: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_in_flight() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    30
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Synthetic,
            location: None,
            confidence_floor: 0.0,
            noise_seed: 0,
            drop_rate: 0.0,
            jitter_px: 0.0,
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::Domain(format!(
                "confidence floor must lie in [0, 1], got {}",
                self.confidence_floor
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::Domain(format!(
                "drop rate must lie in [0, 1], got {}",
                self.drop_rate
            )));
        }
        if self.jitter_px < 0.0 {
            return Err(Error::Domain("jitter must be non-negative".into()));
        }
        if matches!(self.kind, ProviderKind::File | ProviderKind::Http) && self.location.is_none() {
            return Err(Error::Config(
                "file and http providers require a location".into(),
            ));
        }
        Ok(())
    }

    pub fn tag(&self) -> String {
        match self.kind {
            ProviderKind::File => format!("file:{}", self.location.as_deref().unwrap_or("?")),
            ProviderKind::Http => format!("http:{}", self.location.as_deref().unwrap_or("?")),
            ProviderKind::Synthetic => format!(
                "synthetic:seed={},drop={},jitter={}",
                self.noise_seed, self.drop_rate, self.jitter_px
            ),
        }
    }
}

/// Runs the configured provider for one image and filters the result by the
/// confidence floor. File and synthetic providers are pure functions of
/// their inputs and seed.
pub fn detect(image: &ImageRecord, provider: &ProviderConfig) -> Result<DetectionSet> {
    provider.validate()?;
    let detections = match provider.kind {
        ProviderKind::File => detect_from_file(image, provider)?,
        ProviderKind::Http => detect_over_http(image, provider)?,
        ProviderKind::Synthetic => detect_synthetic(image, provider),
    };
    let detections = detections
        .into_iter()
        .filter(|d| d.confidence >= provider.confidence_floor)
        .collect();
    Ok(DetectionSet {
        image_path: image.path.clone(),
        image_width: image.width,
        image_height: image.height,
        detections,
        provider_tag: provider.tag(),
    })
}

fn detect_from_file(image: &ImageRecord, provider: &ProviderConfig) -> Result<Vec<Detection>> {
    let dir = PathBuf::from(provider.location.as_deref().expect("validated"));
    let path = dir.join(format!("{}.{LABEL_EXTENSION}", image.stem()));
    if !path.is_file() {
        return Err(Error::NotFound(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_prediction_file(&text, image.width, image.height)
}

#[derive(Serialize)]
struct InferenceRequest<'a> {
    image: &'a str,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct InferenceResponse {
    detections: Vec<WireDetection>,
}

#[derive(Deserialize)]
struct WireDetection {
    class_id: u8,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    confidence: f64,
}

fn detect_over_http(image: &ImageRecord, provider: &ProviderConfig) -> Result<Vec<Detection>> {
    let url = provider.location.as_deref().expect("validated");
    let bytes = fs::read(&image.path).map_err(|e| Error::io(&image.path, e))?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(&bytes);
    let body = InferenceRequest {
        image: &encoded,
        width: image.width,
        height: image.height,
    };

    let _permit = InFlightPermit::acquire(provider.max_in_flight);
    let client = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(provider.timeout_secs))
        .build()
        .map_err(|e| Error::Transport {
            status: None,
            message: e.to_string(),
        })?;
    let response = client.post(url).json(&body).send().map_err(|e| {
        if e.is_timeout() {
            Error::Timeout(std::time::Duration::from_secs(provider.timeout_secs))
        } else {
            Error::Transport {
                status: None,
                message: e.to_string(),
            }
        }
    })?;
    let status = response.status();
    if !status.is_success() {
        return Err(Error::Transport {
            status: Some(status.as_u16()),
            message: format!("inference endpoint returned {status}"),
        });
    }
    let parsed: InferenceResponse = response
        .json()
        .map_err(|e| Error::Protocol(format!("malformed inference response: {e}")))?;

    let (fw, fh) = (image.width as f64, image.height as f64);
    parsed
        .detections
        .into_iter()
        .map(|d| {
            let bbox = BBox::new(
                d.x1.clamp(0.0, fw),
                d.y1.clamp(0.0, fh),
                d.x2.clamp(0.0, fw),
                d.y2.clamp(0.0, fh),
            )
            .map_err(|e| Error::Protocol(format!("invalid box in response: {e}")))?;
            Detection::new(d.class_id, bbox, d.confidence)
                .map_err(|e| Error::Protocol(format!("invalid detection in response: {e}")))
        })
        .collect()
}

/// Derives detections from the image's ground-truth annotations. With zero
/// noise this is an exact identity with confidence 1.0; with noise, drops
/// and coordinate jitter are drawn from a ChaCha stream seeded by
/// `noise_seed`, so identical inputs always reproduce the same output.
fn detect_synthetic(image: &ImageRecord, provider: &ProviderConfig) -> Vec<Detection> {
    let noiseless = provider.drop_rate == 0.0 && provider.jitter_px == 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(provider.noise_seed);
    let (fw, fh) = (image.width as f64, image.height as f64);
    let mut out = Vec::with_capacity(image.annotations.len());
    for ann in &image.annotations {
        if noiseless {
            out.push(Detection {
                class_id: ann.class_id,
                bbox: ann.bbox,
                confidence: 1.0,
            });
            continue;
        }
        if provider.drop_rate > 0.0 && rng.gen::<f64>() < provider.drop_rate {
            continue;
        }
        let mut bbox = ann.bbox;
        if provider.jitter_px > 0.0 {
            let j = provider.jitter_px;
            let x1 = (bbox.x1 + rng.gen_range(-j..=j)).clamp(0.0, fw);
            let y1 = (bbox.y1 + rng.gen_range(-j..=j)).clamp(0.0, fh);
            let x2 = (bbox.x2 + rng.gen_range(-j..=j)).clamp(0.0, fw);
            let y2 = (bbox.y2 + rng.gen_range(-j..=j)).clamp(0.0, fh);
            let (x1, x2) = (x1.min(x2), x1.max(x2));
            let (y1, y2) = (y1.min(y2), y1.max(y2));
            match BBox::new(x1, y1, x2, y2) {
                Ok(b) => bbox = b,
                Err(_) => continue, // jittered into a degenerate box
            }
        }
        let confidence = rng.gen_range(0.5..=1.0);
        out.push(Detection {
            class_id: ann.class_id,
            bbox,
            confidence,
        });
    }
    out
}

/// Fixed per-class stroke colors; the color itself is the class label in the
/// overlay, which keeps byte-level golden tests stable.
pub const CLASS_COLORS: [Rgb<u8>; 4] = [
    Rgb([220, 20, 60]),  // crack
    Rgb([30, 144, 255]), // skin debonding
    Rgb([255, 165, 0]),  // surface blemish
    Rgb([50, 205, 50]),  // pitted surface
];

const FALLBACK_COLOR: Rgb<u8> = Rgb([200, 200, 200]);
const STROKE_PX: u32 = 2;

pub fn class_color(class_id: u8) -> Rgb<u8> {
    CLASS_COLORS
        .get(class_id as usize)
        .copied()
        .unwrap_or(FALLBACK_COLOR)
}

fn draw_box(img: &mut RgbImage, bbox: &BBox, color: Rgb<u8>) {
    let w = img.width();
    let h = img.height();
    let x1 = (bbox.x1.round().max(0.0) as u32).min(w);
    let y1 = (bbox.y1.round().max(0.0) as u32).min(h);
    let x2 = (bbox.x2.round().max(0.0) as u32).min(w);
    let y2 = (bbox.y2.round().max(0.0) as u32).min(h);
    if x1 >= x2 || y1 >= y2 {
        return;
    }
    let inset = STROKE_PX.min((x2 - x1) / 2 + 1).min((y2 - y1) / 2 + 1);
    for y in y1..y2 {
        for x in x1..x2 {
            let on_border =
                x < x1 + inset || x >= x2 - inset.min(x2) || y < y1 + inset || y >= y2 - inset.min(y2);
            if on_border {
                img.put_pixel(x, y, color);
            }
        }
    }
}

/// Draws a 2-pixel per-class-colored perimeter for every detection. A pure
/// function of its inputs: identical inputs produce a byte-identical buffer.
pub fn render_overlay(image: &RgbImage, detections: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    for det in detections {
        draw_box(&mut out, &det.bbox, class_color(det.class_id));
    }
    out
}
