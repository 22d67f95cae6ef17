//! Two-stage diagnosis pipeline over a generic chat wire protocol.
//!
//! Stage one sends the overlay image plus the KV fault summary to a
//! multimodal endpoint for visual analysis; stage two turns the analysis into
//! a structured four-section maintenance report. Both stages speak a
//! chat-completions-style JSON protocol and can run against a remote endpoint
//! or a deterministic local stub.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassTable, ImageRecord};
use crate::detector::{detect, render_overlay, DetectionSet, ProviderConfig};
use crate::error::{Error, Result};
use crate::kvmap::{render_text, summarize, KvConfig};
use crate::net::InFlightPermit;

/// Versioned built-in system prompts; the canonical copies live under
/// `prompts/` and are compiled in.
pub const STAGE1_WITH_KV_PROMPT: &str = include_str!("../prompts/stage1_with_kv.v1.txt");
pub const STAGE1_IMAGE_ONLY_PROMPT: &str = include_str!("../prompts/stage1_image_only.v1.txt");
pub const STAGE2_REPORT_PROMPT: &str = include_str!("../prompts/stage2_report.v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One part of a chat message: plain text or an inline base64 image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Image { media_type: String, data: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

/// A fully assembled chat call: endpoint, model, messages, and limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub endpoint: String,
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
}

impl ChatRequest {
    /// The JSON body actually posted to the endpoint. Deterministic for
    /// identical requests.
    pub fn wire_body(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model_name,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": self.messages,
        })
    }

    fn text_of_role(&self, role: Role) -> String {
        let mut out = String::new();
        for message in self.messages.iter().filter(|m| m.role == role) {
            for part in &message.content {
                if let ContentPart::Text { text } = part {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(text);
                }
            }
        }
        out
    }
}

/// Per-stage request template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmStageSettings {
    pub endpoint: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Replaces the built-in versioned system prompt when set.
    #[serde(default)]
    pub system_prompt_path: Option<PathBuf>,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_timeout_secs() -> u64 {
    60
}

impl Default for LlmStageSettings {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model_name: "local-model".into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
            system_prompt_path: None,
        }
    }
}

impl LlmStageSettings {
    fn system_prompt(&self, builtin: &str) -> Result<String> {
        match &self.system_prompt_path {
            Some(path) => fs::read_to_string(path).map_err(|e| Error::io(path, e)),
            None => Ok(builtin.to_string()),
        }
    }
}

/// Stage templates plus the ablation toggles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    #[serde(default)]
    pub stage1: LlmStageSettings,
    #[serde(default)]
    pub stage2: LlmStageSettings,
    #[serde(default = "enabled")]
    pub enable_detector: bool,
    #[serde(default = "enabled")]
    pub enable_stage1: bool,
    #[serde(default = "enabled")]
    pub enable_stage2: bool,
}

fn enabled() -> bool {
    true
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage1: LlmStageSettings::default(),
            stage2: LlmStageSettings::default(),
            enable_detector: true,
            enable_stage1: true,
            enable_stage2: true,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.enable_detector || self.enable_stage1 || self.enable_stage2) {
            return Err(Error::Config("at least one stage must be enabled".into()));
        }
        if self.enable_stage2 && !(self.enable_stage1 || self.enable_detector) {
            return Err(Error::Config(
                "the advice stage needs input from the detector or the analysis stage".into(),
            ));
        }
        Ok(())
    }

    pub fn with_toggles(&self, detector: bool, stage1: bool, stage2: bool) -> Self {
        Self {
            enable_detector: detector,
            enable_stage1: stage1,
            enable_stage2: stage2,
            ..self.clone()
        }
    }
}

/// Builds the multimodal analysis request: a fixed system instruction plus a
/// user message carrying the overlay image and then the KV text. An absent
/// or blank KV text switches to the image-only instruction variant.
pub fn build_stage1_prompt(
    kv_text: Option<&str>,
    overlay_png: &[u8],
    settings: &LlmStageSettings,
) -> Result<ChatRequest> {
    if overlay_png.is_empty() {
        return Err(Error::Encoding("overlay image is empty".into()));
    }
    let kv_text = kv_text.map(str::trim).filter(|t| !t.is_empty());
    let system = settings.system_prompt(match kv_text {
        Some(_) => STAGE1_WITH_KV_PROMPT,
        None => STAGE1_IMAGE_ONLY_PROMPT,
    })?;

    let mut user_parts = vec![ContentPart::Image {
        media_type: "image/png".into(),
        data: base64::engine::general_purpose::STANDARD.encode(overlay_png),
    }];
    if let Some(text) = kv_text {
        user_parts.push(ContentPart::Text { text: text.into() });
    }

    Ok(ChatRequest {
        endpoint: settings.endpoint.clone(),
        model_name: settings.model_name.clone(),
        messages: vec![
            ChatMessage {
                role: Role::System,
                content: vec![ContentPart::Text { text: system }],
            },
            ChatMessage {
                role: Role::User,
                content: user_parts,
            },
        ],
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
        timeout_secs: settings.timeout_secs,
    })
}

/// Builds the text-only report request: the system message names the four
/// report sections and the user message carries the stage-one text verbatim.
pub fn build_stage2_prompt(stage1_text: &str, settings: &LlmStageSettings) -> Result<ChatRequest> {
    if stage1_text.trim().is_empty() {
        return Err(Error::Domain("stage-two input text is empty".into()));
    }
    let system = settings.system_prompt(STAGE2_REPORT_PROMPT)?;
    Ok(ChatRequest {
        endpoint: settings.endpoint.clone(),
        model_name: settings.model_name.clone(),
        messages: vec![
            ChatMessage {
                role: Role::System,
                content: vec![ContentPart::Text { text: system }],
            },
            ChatMessage {
                role: Role::User,
                content: vec![ContentPart::Text {
                    text: stage1_text.into(),
                }],
            },
        ],
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
        timeout_secs: settings.timeout_secs,
    })
}

/// A chat backend: either the remote HTTP endpoint or the local stub.
pub trait ChatTransport: Sync {
    fn invoke(&self, request: &ChatRequest) -> Result<String>;
    fn tag(&self) -> String;
    /// True when identical requests always yield identical text.
    fn deterministic(&self) -> bool;
}

/// Sends a request through the given transport.
pub fn invoke(request: &ChatRequest, transport: &dyn ChatTransport) -> Result<String> {
    transport.invoke(request)
}

/// Deterministic local stand-in for a hosted model. It echoes, in fixed
/// template sentences, every fault-class name found in the user text of the
/// request (or "unknown" if none). When the system message asks for the
/// four-section report it answers in report form, otherwise in analysis
/// form. A suppression set can hide classes to exercise consistency
/// scoring.
pub struct StubTransport {
    table: ClassTable,
    suppress: BTreeSet<u8>,
}

impl Default for StubTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl StubTransport {
    pub fn new() -> Self {
        Self {
            table: ClassTable::builtin(),
            suppress: BTreeSet::new(),
        }
    }

    pub fn suppressing(suppress: BTreeSet<u8>) -> Self {
        Self {
            table: ClassTable::builtin(),
            suppress,
        }
    }

    fn analysis_detail(class_id: u8) -> &'static str {
        match class_id {
            0 => "linear fracture patterns consistent with fatigue loading are visible",
            1 => "adhesive separation between the protective skin layers is visible",
            2 => "localized coating discoloration marks the affected area",
            3 => "clustered erosion pits cover part of the surface",
            _ => "an unclassified anomaly is visible",
        }
    }

    fn cause_detail(class_id: u8) -> &'static str {
        match class_id {
            0 => "cyclic structural loading concentrated at the affected section",
            1 => "bond-line degradation under moisture ingress",
            2 => "surface abrasion and weathering",
            3 => "repeated rain and particle impact",
            _ => "undetermined",
        }
    }

    fn maintenance_detail(class_id: u8) -> &'static str {
        match class_id {
            0 => "apply resin sealing and schedule a follow-up inspection",
            1 => "perform rebonding of the separated skin",
            2 => "clean the area and apply recoating",
            3 => "fill the pits with filler compound and recoat",
            _ => "perform a manual inspection",
        }
    }
}

impl ChatTransport for StubTransport {
    fn invoke(&self, request: &ChatRequest) -> Result<String> {
        let user_text = request.text_of_role(Role::User);
        let system_text = request.text_of_role(Role::System);
        let classes: Vec<u8> = self
            .table
            .mentions(&user_text)
            .into_iter()
            .filter(|id| !self.suppress.contains(id))
            .collect();

        let report_mode = system_text.contains("Maintenance recommendation");
        if !report_mode {
            if classes.is_empty() {
                return Ok(
                    "Image analysis: no known fault category is identifiable in the image."
                        .to_string(),
                );
            }
            let details: Vec<String> = classes
                .iter()
                .map(|&id| {
                    format!(
                        "Detected {}: {}.",
                        self.table.name(id),
                        Self::analysis_detail(id)
                    )
                })
                .collect();
            return Ok(format!("Image analysis: {}", details.join(" ")));
        }

        if classes.is_empty() {
            return Ok([
                "Fault type: unknown",
                "Severity: unknown: indeterminate.",
                "Cause: unknown: undetermined.",
                "Maintenance recommendation: unknown: perform a manual inspection.",
            ]
            .join("\n"));
        }
        let names: Vec<&str> = classes.iter().map(|&id| self.table.name(id)).collect();
        let line = |f: &dyn Fn(u8) -> &'static str| -> String {
            classes
                .iter()
                .map(|&id| format!("{}: {}.", self.table.name(id), f(id)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        Ok(format!(
            "Fault type: {}\nSeverity: {}\nCause: {}\nMaintenance recommendation: {}",
            names.join(", "),
            line(&|id| {
                let _ = id;
                "moderate"
            }),
            line(&Self::cause_detail),
            line(&Self::maintenance_detail),
        ))
    }

    fn tag(&self) -> String {
        if self.suppress.is_empty() {
            "stub".to_string()
        } else {
            format!("stub(suppress={:?})", self.suppress)
        }
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// HTTP chat-completions transport with bounded retries and exponential
/// backoff on transient failures (5xx, connection errors, timeouts).
pub struct RemoteTransport {
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_in_flight: usize,
}

impl Default for RemoteTransport {
    fn default() -> Self {
        Self {
            api_key: None,
            max_retries: 2,
            initial_backoff: Duration::from_millis(250),
            max_in_flight: 4,
        }
    }
}

impl RemoteTransport {
    fn send_once(&self, request: &ChatRequest) -> Result<String> {
        let _permit = InFlightPermit::acquire(self.max_in_flight);
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(request.timeout_secs))
            .build()
            .map_err(|e| Error::Transport {
                status: None,
                message: e.to_string(),
            })?;
        let mut builder = client.post(&request.endpoint).json(&request.wire_body());
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                Error::Timeout(Duration::from_secs(request.timeout_secs))
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
                message: format!("chat endpoint returned {status}"),
            });
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| Error::Protocol(format!("malformed chat response: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                Error::Protocol("chat response carries no completion text".to_string())
            })
    }

    fn is_transient(error: &Error) -> bool {
        matches!(
            error,
            Error::Timeout(_)
                | Error::Transport { status: None, .. }
                | Error::Transport {
                    status: Some(500..=599),
                    ..
                }
        )
    }
}

impl ChatTransport for RemoteTransport {
    fn invoke(&self, request: &ChatRequest) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.send_once(request) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.max_retries && Self::is_transient(&e) => {
                    std::thread::sleep(self.initial_backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn tag(&self) -> String {
        "remote".to_string()
    }

    fn deterministic(&self) -> bool {
        false
    }
}

/// Where each artifact of a report came from, plus parse diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub detector_tag: Option<String>,
    pub transport_tag: Option<String>,
    /// Report sections the parser could not locate.
    pub missing_sections: Vec<String>,
    /// Unset for deterministic transports so repeated runs are
    /// byte-identical.
    pub timestamp_unix_ms: Option<u64>,
}

/// Structured diagnosis: fault types with per-fault severity, cause, and
/// maintenance text, plus the raw stage outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    /// Canonical class names, or "unknown".
    pub fault_types: Vec<String>,
    pub severity: BTreeMap<String, String>,
    pub cause: BTreeMap<String, String>,
    pub maintenance: BTreeMap<String, String>,
    pub raw_stage1: String,
    pub raw_stage2: String,
    pub provenance: ReportProvenance,
}

impl DiagnosticReport {
    /// Every section and raw stage text joined, for keyword and consistency
    /// scoring.
    pub fn full_text(&self) -> String {
        let mut parts = vec![self.fault_types.join(", ")];
        for map in [&self.severity, &self.cause, &self.maintenance] {
            parts.extend(map.values().cloned());
        }
        parts.push(self.raw_stage1.clone());
        parts.push(self.raw_stage2.clone());
        parts.join("\n")
    }
}

const SECTION_NAMES: [&str; 4] = ["fault type", "severity", "cause", "maintenance recommendation"];

fn section_pattern() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(?:\*\*)?(fault\s+types?|severity|causes?|maintenance(?:\s+recommendations?)?)(?:\*\*)?\s*:\s*(.*)$",
        )
        .expect("section pattern compiles")
    })
}

fn canonical_section(header: &str) -> &'static str {
    let lower = header.to_ascii_lowercase();
    if lower.starts_with("fault") {
        "fault type"
    } else if lower.starts_with("severity") {
        "severity"
    } else if lower.starts_with("cause") {
        "cause"
    } else {
        "maintenance recommendation"
    }
}

fn per_fault_lines(section: &str, faults: &[String], table: &ClassTable) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for fault in faults {
        let matching: Vec<&str> = section
            .lines()
            .filter(|line| {
                if fault == "unknown" {
                    line.to_ascii_lowercase().contains("unknown")
                } else {
                    table
                        .mentions(line)
                        .iter()
                        .any(|&id| table.name(id) == fault)
                }
            })
            .collect();
        let text = if matching.is_empty() {
            section.trim().to_string()
        } else {
            matching.join("\n").trim().to_string()
        };
        if !text.is_empty() {
            out.insert(fault.clone(), text);
        }
    }
    out
}

/// Lenient parse of a stage-two report. Section headers are located
/// case-insensitively; missing sections yield empty fields and are flagged
/// in the provenance. Fault names are matched against the class synonym
/// table.
pub fn parse_report(stage2_text: &str, table: &ClassTable) -> DiagnosticReport {
    let mut sections: BTreeMap<&'static str, String> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    for line in stage2_text.lines() {
        if let Some(captures) = section_pattern().captures(line) {
            let name = canonical_section(captures.get(1).expect("group 1").as_str());
            let first_line = captures.get(2).map(|m| m.as_str()).unwrap_or("");
            sections.insert(name, first_line.to_string());
            current = Some(name);
        } else if let Some(name) = current {
            let body = sections.get_mut(name).expect("section started");
            body.push('\n');
            body.push_str(line);
        }
    }

    let missing_sections: Vec<String> = SECTION_NAMES
        .iter()
        .filter(|name| !sections.contains_key(*name))
        .map(|name| name.to_string())
        .collect();

    let fault_types: Vec<String> = match sections.get("fault type") {
        Some(section) => {
            let mentioned = table.mentions(section);
            if mentioned.is_empty() {
                vec!["unknown".to_string()]
            } else {
                mentioned.iter().map(|&id| table.name(id).to_string()).collect()
            }
        }
        None => Vec::new(),
    };

    let severity = sections
        .get("severity")
        .map(|s| per_fault_lines(s, &fault_types, table))
        .unwrap_or_default();
    let cause = sections
        .get("cause")
        .map(|s| per_fault_lines(s, &fault_types, table))
        .unwrap_or_default();
    let maintenance = sections
        .get("maintenance recommendation")
        .map(|s| per_fault_lines(s, &fault_types, table))
        .unwrap_or_default();

    DiagnosticReport {
        fault_types,
        severity,
        cause,
        maintenance,
        raw_stage1: String::new(),
        raw_stage2: stage2_text.to_string(),
        provenance: ReportProvenance {
            missing_sections,
            ..ReportProvenance::default()
        },
    }
}

/// Which of the three output categories a pipeline run produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputCategories {
    pub detection: bool,
    pub analysis: bool,
    pub advice: bool,
}

/// Everything one pipeline run produced for one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineResult {
    pub image: PathBuf,
    pub detections: Option<DetectionSet>,
    pub kv_text: Option<String>,
    pub report: DiagnosticReport,
    pub categories: OutputCategories,
}

/// Wiring for end-to-end runs: detector, KV mapping, stage toggles, and the
/// chat transport shared by both stages.
pub struct Pipeline<'a> {
    pub detector: &'a ProviderConfig,
    pub kv: &'a KvConfig,
    pub stages: &'a StageConfig,
    pub transport: &'a dyn ChatTransport,
    pub table: &'a ClassTable,
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Encoding(e.to_string()))?;
    Ok(buf.into_inner())
}

impl Pipeline<'_> {
    /// Runs detector → KV mapping → analysis → advice for one image,
    /// honoring the stage toggles. With the detector disabled, the analysis
    /// stage receives the raw image only; with the analysis stage disabled,
    /// the advice stage consumes the KV text directly.
    pub fn run(&self, image: &ImageRecord) -> Result<PipelineResult> {
        self.stages.validate()?;

        let mut detections: Option<DetectionSet> = None;
        let mut kv_text: Option<String> = None;
        if self.stages.enable_detector {
            let dset = detect(image, self.detector).map_err(|e| e.in_stage("detector"))?;
            let image_area = image.width as f64 * image.height as f64;
            let summary = summarize(&dset, image_area, self.kv)?;
            kv_text = Some(render_text(&summary, self.table));
            detections = Some(dset);
        }

        let mut raw_stage1 = String::new();
        if self.stages.enable_stage1 {
            let pixels = image::open(&image.path)
                .map_err(|e| Error::Image {
                    path: image.path.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            let overlay = match &detections {
                Some(dset) => render_overlay(&pixels, &dset.detections),
                None => pixels,
            };
            let png = encode_png(&overlay)?;
            let request = build_stage1_prompt(kv_text.as_deref(), &png, &self.stages.stage1)?;
            raw_stage1 = invoke(&request, self.transport).map_err(|e| e.in_stage("stage1"))?;
        }

        let mut report = if self.stages.enable_stage2 {
            let input = if raw_stage1.is_empty() {
                kv_text.clone().unwrap_or_default()
            } else {
                raw_stage1.clone()
            };
            let request = build_stage2_prompt(&input, &self.stages.stage2)?;
            let raw_stage2 = invoke(&request, self.transport).map_err(|e| e.in_stage("stage2"))?;
            parse_report(&raw_stage2, self.table)
        } else {
            // Advice stage off: carry detection/analysis fault types only.
            let fault_types: Vec<String> = if !raw_stage1.is_empty() {
                let found = self.table.mentions(&raw_stage1);
                if found.is_empty() {
                    vec!["unknown".to_string()]
                } else {
                    found.iter().map(|&id| self.table.name(id).to_string()).collect()
                }
            } else if let Some(dset) = &detections {
                let mut ids: Vec<u8> = dset.detections.iter().map(|d| d.class_id).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.iter().map(|&id| self.table.name(id).to_string()).collect()
            } else {
                Vec::new()
            };
            DiagnosticReport {
                fault_types,
                ..DiagnosticReport::default()
            }
        };

        report.raw_stage1 = raw_stage1.clone();
        report.provenance.detector_tag = detections.as_ref().map(|d| d.provider_tag.clone());
        if self.stages.enable_stage1 || self.stages.enable_stage2 {
            report.provenance.transport_tag = Some(self.transport.tag());
        }
        report.provenance.timestamp_unix_ms = if self.transport.deterministic() {
            None
        } else {
            Some(
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .unwrap_or_default()
                    .as_millis() as u64,
            )
        };

        let categories = OutputCategories {
            detection: detections.is_some(),
            analysis: !raw_stage1.is_empty(),
            advice: self.stages.enable_stage2 && !report.maintenance.is_empty(),
        };

        Ok(PipelineResult {
            image: image.path.clone(),
            detections,
            kv_text,
            report,
            categories,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, BBox};
    use crate::detector::ProviderKind;

    fn settings() -> LlmStageSettings {
        LlmStageSettings::default()
    }

    fn fake_png() -> Vec<u8> {
        encode_png(&RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]))).unwrap()
    }

    #[test]
    fn stage1_prompt_structure() {
        let request =
            build_stage1_prompt(Some("some crack (2 of 4)"), &fake_png(), &settings()).unwrap();
        assert_eq!(request.messages.len(), 2);
        assert_eq!(request.messages[0].role, Role::System);
        assert_eq!(request.messages[1].role, Role::User);
        assert_eq!(request.messages[1].content.len(), 2);
        assert!(matches!(
            request.messages[1].content[0],
            ContentPart::Image { .. }
        ));
        assert!(matches!(
            request.messages[1].content[1],
            ContentPart::Text { .. }
        ));
    }

    #[test]
    fn stage1_prompt_is_deterministic() {
        let a = build_stage1_prompt(Some("text"), &fake_png(), &settings()).unwrap();
        let b = build_stage1_prompt(Some("text"), &fake_png(), &settings()).unwrap();
        assert_eq!(
            serde_json::to_string(&a.wire_body()).unwrap(),
            serde_json::to_string(&b.wire_body()).unwrap()
        );
    }

    #[test]
    fn stage1_prompt_without_kv_uses_image_only_variant() {
        let with_kv = build_stage1_prompt(Some("x"), &fake_png(), &settings()).unwrap();
        let without = build_stage1_prompt(None, &fake_png(), &settings()).unwrap();
        let blank = build_stage1_prompt(Some("   "), &fake_png(), &settings()).unwrap();
        assert_eq!(without.messages[1].content.len(), 1);
        assert_ne!(
            with_kv.text_of_role(Role::System),
            without.text_of_role(Role::System)
        );
        assert_eq!(
            blank.text_of_role(Role::System),
            without.text_of_role(Role::System)
        );
    }

    #[test]
    fn stage2_prompt_names_four_sections() {
        let request = build_stage2_prompt("analysis text", &settings()).unwrap();
        let system = request.text_of_role(Role::System);
        for section in ["Fault type", "Severity", "Cause", "Maintenance recommendation"] {
            assert!(system.contains(section), "missing {section}");
        }
        assert_eq!(request.text_of_role(Role::User), "analysis text");
    }

    #[test]
    fn stage2_prompt_rejects_empty_input() {
        assert!(matches!(
            build_stage2_prompt("  ", &settings()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn stub_names_classes_from_request_text() {
        let stub = StubTransport::new();
        let request = build_stage2_prompt("analysis finds crack here", &settings()).unwrap();
        let text = stub.invoke(&request).unwrap();
        assert!(text.contains("Fault type: crack"));
        assert!(text.contains("Maintenance recommendation:"));
        // purity
        assert_eq!(text, stub.invoke(&request).unwrap());
    }

    #[test]
    fn stub_analysis_mode_without_sections() {
        let stub = StubTransport::new();
        let request = build_stage1_prompt(
            Some("Detected faults: few pitted surface (1 of 4)."),
            &fake_png(),
            &settings(),
        )
        .unwrap();
        let text = stub.invoke(&request).unwrap();
        assert!(text.contains("pitted surface"));
        assert!(!text.contains("Maintenance recommendation:"));
    }

    #[test]
    fn stub_ignores_system_text_for_class_scan() {
        let stub = StubTransport::new();
        let mut request = build_stage2_prompt("no faults here", &settings()).unwrap();
        // sanity: system prompt mentions no class names
        request.messages[0].content.push(ContentPart::Text {
            text: "section guide".into(),
        });
        let text = stub.invoke(&request).unwrap();
        assert!(text.contains("Fault type: unknown"));
    }

    #[test]
    fn stub_suppression_hides_class() {
        let stub = StubTransport::suppressing([0u8].into_iter().collect());
        let request =
            build_stage2_prompt("crack and pitted surface are visible", &settings()).unwrap();
        let text = stub.invoke(&request).unwrap();
        assert!(!text.to_lowercase().contains("crack"));
        assert!(text.contains("pitted surface"));
    }

    #[test]
    fn parse_report_well_formed() {
        let text = "Fault type: crack, pitted surface\nSeverity: crack: moderate. pitted surface: moderate.\nCause: crack: cyclic loading.\nMaintenance recommendation: crack: apply resin sealing.";
        let report = parse_report(text, &ClassTable::builtin());
        assert_eq!(report.fault_types, vec!["crack", "pitted surface"]);
        assert!(report.provenance.missing_sections.is_empty());
        assert!(report.severity.contains_key("crack"));
        assert!(report.maintenance.contains_key("crack"));
    }

    #[test]
    fn parse_report_missing_section_is_flagged() {
        let text = "Fault type: crack\nCause: cyclic loading.\nMaintenance recommendation: sealing.";
        let report = parse_report(text, &ClassTable::builtin());
        assert!(report.severity.is_empty());
        assert_eq!(report.provenance.missing_sections, vec!["severity"]);
    }

    #[test]
    fn parse_report_stub_round_trip() {
        let stub = StubTransport::new();
        let request = build_stage2_prompt(
            "analysis shows crack, skin debonding, surface blemish and pitted surface",
            &settings(),
        )
        .unwrap();
        let text = stub.invoke(&request).unwrap();
        let report = parse_report(&text, &ClassTable::builtin());
        assert_eq!(
            report.fault_types,
            vec!["crack", "skin debonding", "surface blemish", "pitted surface"]
        );
        assert_eq!(report.severity.len(), 4);
        assert_eq!(report.maintenance.len(), 4);
    }

    #[test]
    fn remote_transport_gives_up_after_retry_budget() {
        let server = crate::testserver::TestServer::spawn(vec![(500, "{}".to_string())]);
        let transport = RemoteTransport {
            max_retries: 2,
            initial_backoff: Duration::from_millis(1),
            ..RemoteTransport::default()
        };
        let request = ChatRequest {
            endpoint: server.url.clone(),
            model_name: "m".into(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: vec![ContentPart::Text { text: "hi".into() }],
            }],
            temperature: 0.0,
            max_tokens: 16,
            timeout_secs: 5,
        };
        let err = transport.invoke(&request).unwrap_err();
        assert!(matches!(err, Error::Transport { status: Some(500), .. }));
        assert_eq!(server.hits(), 3); // initial try + 2 retries
    }

    #[test]
    fn remote_transport_recovers_and_extracts_completion() {
        let ok =
            r#"{"choices":[{"message":{"role":"assistant","content":"stubbed completion"}}]}"#;
        let server = crate::testserver::TestServer::spawn(vec![
            (500, "{}".to_string()),
            (200, ok.to_string()),
        ]);
        let transport = RemoteTransport {
            max_retries: 2,
            initial_backoff: Duration::from_millis(1),
            ..RemoteTransport::default()
        };
        let request = ChatRequest {
            endpoint: server.url.clone(),
            model_name: "m".into(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: vec![ContentPart::Text { text: "hi".into() }],
            }],
            temperature: 0.0,
            max_tokens: 16,
            timeout_secs: 5,
        };
        assert_eq!(transport.invoke(&request).unwrap(), "stubbed completion");
        assert_eq!(server.hits(), 2);
    }

    #[test]
    fn remote_transport_flags_missing_completion() {
        let server =
            crate::testserver::TestServer::spawn(vec![(200, r#"{"choices":[]}"#.to_string())]);
        let transport = RemoteTransport::default();
        let request = ChatRequest {
            endpoint: server.url.clone(),
            model_name: "m".into(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: vec![ContentPart::Text { text: "hi".into() }],
            }],
            temperature: 0.0,
            max_tokens: 16,
            timeout_secs: 5,
        };
        assert!(matches!(
            transport.invoke(&request).unwrap_err(),
            Error::Protocol(_)
        ));
    }

    fn fixture_image(dir: &std::path::Path) -> ImageRecord {
        let path = dir.join("unit.png");
        RgbImage::from_pixel(64, 64, image::Rgb([120, 120, 120]))
            .save(&path)
            .unwrap();
        ImageRecord::new(
            path,
            64,
            64,
            vec![
                Annotation {
                    class_id: 0,
                    bbox: BBox::new(4.0, 4.0, 20.0, 20.0).unwrap(),
                },
                Annotation {
                    class_id: 3,
                    bbox: BBox::new(30.0, 30.0, 60.0, 60.0).unwrap(),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn pipeline_toggle_matrix_matches_expected_categories() {
        let dir = tempfile::tempdir().unwrap();
        let image = fixture_image(dir.path());
        let detector = ProviderConfig {
            kind: ProviderKind::Synthetic,
            ..ProviderConfig::default()
        };
        let kv = KvConfig::default();
        let stub = StubTransport::new();
        let table = ClassTable::builtin();
        let base = StageConfig::default();

        let cases = [
            ((true, false, true), (true, false, true)),
            ((true, true, false), (true, true, false)),
            ((false, true, true), (false, true, true)),
            ((true, true, true), (true, true, true)),
        ];
        for ((d, s1, s2), (detection, analysis, advice)) in cases {
            let stages = base.with_toggles(d, s1, s2);
            let pipeline = Pipeline {
                detector: &detector,
                kv: &kv,
                stages: &stages,
                transport: &stub,
                table: &table,
            };
            let result = pipeline.run(&image).unwrap();
            assert_eq!(
                result.categories,
                OutputCategories {
                    detection,
                    analysis,
                    advice
                },
                "toggles ({d}, {s1}, {s2})"
            );
        }
    }

    #[test]
    fn pipeline_stub_runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let image = fixture_image(dir.path());
        let detector = ProviderConfig::default();
        let kv = KvConfig::default();
        let stub = StubTransport::new();
        let table = ClassTable::builtin();
        let stages = StageConfig::default();
        let pipeline = Pipeline {
            detector: &detector,
            kv: &kv,
            stages: &stages,
            transport: &stub,
            table: &table,
        };
        let a = serde_json::to_string_pretty(&pipeline.run(&image).unwrap()).unwrap();
        let b = serde_json::to_string_pretty(&pipeline.run(&image).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage_config_validation() {
        let none = StageConfig::default().with_toggles(false, false, false);
        assert!(none.validate().is_err());
        let advice_without_input = StageConfig::default().with_toggles(false, false, true);
        assert!(advice_without_input.validate().is_err());
        assert!(StageConfig::default().validate().is_ok());
    }
}
