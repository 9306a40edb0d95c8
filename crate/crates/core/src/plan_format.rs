//! Planner output format: a reasoning block, a global hint and a list of
//! region–hint pairs.
//!
//! ```text
//! <think>…</think>
//! <global>…</global>
//! <region>[{"bbox":[x1,y1,x2,y2],"hint":"…"}, …]</region>
//! ```
//!
//! Whitespace between blocks is ignored. Anything else outside the three
//! blocks is a structural error. [`parse_plan`] is strict and returns a
//! validated [`EditPlan`]; [`inspect_plan`] is total and grades malformed
//! output so that format rewards still get a signal.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const THINK_TAG: &str = "think";
pub const GLOBAL_TAG: &str = "global";
pub const REGION_TAG: &str = "region";

const BLOCK_ORDER: [&str; 3] = [THINK_TAG, GLOBAL_TAG, REGION_TAG];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("tag structure: {0}")]
    TagStructure(String),
    #[error("region payload: {0}")]
    RegionPayload(String),
    #[error("region {index}: degenerate bbox {bbox} after clamping")]
    Bbox { index: usize, bbox: BBox },
    #[error("image size must be positive, got {width}x{height}")]
    ImageSize { width: u32, height: u32 },
}

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

/// Pixel rectangle `[x1, y1, x2, y2)`, half-open on the far edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub const fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> u32 {
        self.x2.saturating_sub(self.x1)
    }

    pub fn height(&self) -> u32 {
        self.y2.saturating_sub(self.y1)
    }

    pub fn is_degenerate(&self) -> bool {
        self.x1 >= self.x2 || self.y1 >= self.y2
    }

    pub fn fits(&self, size: ImageSize) -> bool {
        !self.is_degenerate() && self.x2 <= size.width && self.y2 <= size.height
    }
}

impl From<[u32; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [u32; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionHint {
    pub bbox: BBox,
    pub hint: String,
    /// Keep-unchanged hint. Detected from the hint text unless the region
    /// object carries an explicit `"negative"` key.
    #[serde(default)]
    pub negative: bool,
}

impl RegionHint {
    /// Builds a region with the negative flag inferred from the hint text.
    pub fn new(bbox: BBox, hint: impl Into<String>) -> Self {
        let hint = hint.into();
        let negative = is_negative_hint(&hint, &ParseOptions::default().negative_markers);
        Self { bbox, hint, negative }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPlan {
    pub reasoning: String,
    pub global_hint: String,
    pub regions: Vec<RegionHint>,
}

impl EditPlan {
    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    /// Hints in group order: `h0` (global) followed by `h1..hK`.
    pub fn hints(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.global_hint.as_str()).chain(self.regions.iter().map(|r| r.hint.as_str()))
    }

    /// Checks the invariants that [`serialize_plan`] relies on for an exact
    /// round trip: trimmed block text, no embedded tag literals, non-empty
    /// trimmed hints and boxes inside `size`.
    pub fn validate(&self, size: ImageSize) -> Result<(), PlanError> {
        for (name, text) in [(THINK_TAG, &self.reasoning), (GLOBAL_TAG, &self.global_hint)] {
            if text.trim() != text {
                return Err(PlanError::TagStructure(format!("{name} text has surrounding whitespace")));
            }
            if contains_tag_literal(text) {
                return Err(PlanError::TagStructure(format!("{name} text contains a tag literal")));
            }
        }
        for (index, region) in self.regions.iter().enumerate() {
            if region.hint.trim().is_empty() || region.hint.trim() != region.hint {
                return Err(PlanError::RegionPayload(format!("region {index}: hint must be non-empty and trimmed")));
            }
            if contains_tag_literal(&region.hint) {
                return Err(PlanError::RegionPayload(format!("region {index}: hint contains a tag literal")));
            }
            if !region.bbox.fits(size) {
                return Err(PlanError::Bbox { index, bbox: region.bbox });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOptions {
    /// Lower-case words that mark a hint as negative when they open it.
    pub negative_markers: Vec<String>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { negative_markers: vec!["keep".to_string()] }
    }
}

/// Graded view of a planner output. Never fails to build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanParseReport {
    pub tag_ok: bool,
    pub region_json_ok: bool,
    pub reasoning_word_count: usize,
    pub violations: Vec<String>,
}

impl PlanParseReport {
    pub fn is_valid(&self) -> bool {
        self.tag_ok && self.region_json_ok
    }
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<(/?)(think|global|region)>").expect("static regex"))
}

fn contains_tag_literal(text: &str) -> bool {
    tag_regex().is_match(text)
}

#[derive(Debug, Clone, Copy)]
struct TagToken<'a> {
    name: &'a str,
    closing: bool,
    start: usize,
    end: usize,
}

fn tokenize(text: &str) -> Vec<TagToken<'_>> {
    tag_regex()
        .captures_iter(text)
        .map(|c| {
            let whole = c.get(0).expect("match");
            TagToken {
                name: c.get(2).expect("name group").as_str(),
                closing: !c[1].is_empty(),
                start: whole.start(),
                end: whole.end(),
            }
        })
        .collect()
}

/// Block contents when the canonical layout holds exactly, otherwise the
/// list of structural violations.
fn split_blocks(text: &str) -> Result<[&str; 3], Vec<String>> {
    let tokens = tokenize(text);
    let mut violations = Vec::new();

    for name in BLOCK_ORDER {
        for closing in [false, true] {
            let n = tokens.iter().filter(|t| t.name == name && t.closing == closing).count();
            let tag = if closing { format!("</{name}>") } else { format!("<{name}>") };
            match n {
                0 => violations.push(format!("missing {tag}")),
                1 => {}
                _ => violations.push(format!("{tag} appears {n} times")),
            }
        }
    }
    if !violations.is_empty() {
        return Err(violations);
    }

    let expected: Vec<(&str, bool)> = BLOCK_ORDER.iter().flat_map(|&n| [(n, false), (n, true)]).collect();
    let actual: Vec<(&str, bool)> = tokens.iter().map(|t| (t.name, t.closing)).collect();
    if actual != expected {
        let order: Vec<String> =
            tokens.iter().map(|t| format!("<{}{}>", if t.closing { "/" } else { "" }, t.name)).collect();
        return Err(vec![format!("tags out of order: {}", order.join(" "))]);
    }

    // Only whitespace may sit before, between and after the blocks.
    let mut cursor = 0;
    for pair in tokens.chunks(2) {
        if !text[cursor..pair[0].start].trim().is_empty() {
            violations.push(format!("stray text before <{}>", pair[0].name));
        }
        cursor = pair[1].end;
    }
    if !text[cursor..].trim().is_empty() {
        violations.push("stray text after </region>".to_string());
    }
    if !violations.is_empty() {
        return Err(violations);
    }

    let body = |i: usize| &text[tokens[2 * i].end..tokens[2 * i + 1].start];
    Ok([body(0), body(1), body(2)])
}

/// First `<name>…</name>` span, ignoring the rest of the structure.
fn find_block<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let start = text.find(&open)? + open.len();
    let len = text[start..].find(&close)?;
    Some(&text[start..start + len])
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// One region object as it appears in the payload, before clamping.
struct RawRegion {
    corners: [f64; 4],
    hint: String,
    negative: Option<bool>,
}

fn parse_region_payload(payload: &str) -> Result<Vec<RawRegion>, String> {
    let value: Value = serde_json::from_str(payload.trim()).map_err(|e| format!("invalid JSON: {e}"))?;
    let items = value.as_array().ok_or_else(|| "payload is not a JSON list".to_string())?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let obj = item.as_object().ok_or_else(|| format!("item {i} is not an object"))?;
            let bbox =
                obj.get("bbox").and_then(Value::as_array).ok_or_else(|| format!("item {i}: missing \"bbox\" list"))?;
            if bbox.len() != 4 {
                return Err(format!("item {i}: bbox has {} entries, expected 4", bbox.len()));
            }
            let mut corners = [0.0; 4];
            for (slot, v) in corners.iter_mut().zip(bbox) {
                *slot = v
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| format!("item {i}: bbox entries must be numbers"))?;
            }
            let hint = obj
                .get("hint")
                .and_then(Value::as_str)
                .ok_or_else(|| format!("item {i}: missing \"hint\" string"))?
                .trim();
            if hint.is_empty() {
                return Err(format!("item {i}: empty hint"));
            }
            let negative = match obj.get("negative") {
                None => None,
                Some(Value::Bool(b)) => Some(*b),
                Some(_) => return Err(format!("item {i}: \"negative\" must be a boolean")),
            };
            Ok(RawRegion { corners, hint: hint.to_string(), negative })
        })
        .collect()
}

fn clamp_coord(v: f64, max: u32) -> u32 {
    v.round().clamp(0.0, max as f64) as u32
}

/// True when the first word of `hint` is one of `markers` (case-insensitive).
pub fn is_negative_hint(hint: &str, markers: &[String]) -> bool {
    let first = hint.trim_start().split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_lowercase();
    !first.is_empty() && markers.iter().any(|m| m.eq_ignore_ascii_case(&first))
}

pub fn parse_plan(text: &str, image_size: ImageSize) -> Result<EditPlan, PlanError> {
    parse_plan_with(text, image_size, &ParseOptions::default())
}

pub fn parse_plan_with(text: &str, image_size: ImageSize, options: &ParseOptions) -> Result<EditPlan, PlanError> {
    if image_size.width == 0 || image_size.height == 0 {
        return Err(PlanError::ImageSize { width: image_size.width, height: image_size.height });
    }
    let [think, global, region] = split_blocks(text).map_err(|v| PlanError::TagStructure(v.join("; ")))?;
    let raw = parse_region_payload(region).map_err(PlanError::RegionPayload)?;

    let regions = raw
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            let bbox = BBox::new(
                clamp_coord(r.corners[0], image_size.width),
                clamp_coord(r.corners[1], image_size.height),
                clamp_coord(r.corners[2], image_size.width),
                clamp_coord(r.corners[3], image_size.height),
            );
            if bbox.is_degenerate() {
                return Err(PlanError::Bbox { index, bbox });
            }
            let negative = r.negative.unwrap_or_else(|| is_negative_hint(&r.hint, &options.negative_markers));
            Ok(RegionHint { bbox, hint: r.hint, negative })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(EditPlan { reasoning: think.trim().to_string(), global_hint: global.trim().to_string(), regions })
}

pub fn inspect_plan(text: &str) -> PlanParseReport {
    let mut violations = Vec::new();
    let tag_ok = match split_blocks(text) {
        Ok(_) => true,
        Err(v) => {
            violations.extend(v);
            false
        }
    };
    let region_json_ok = match find_block(text, REGION_TAG) {
        Some(payload) => match parse_region_payload(payload) {
            Ok(_) => true,
            Err(e) => {
                violations.push(e);
                false
            }
        },
        None => {
            if tag_ok {
                violations.push("region block not found".to_string());
            }
            false
        }
    };
    let reasoning_word_count = find_block(text, THINK_TAG).map(word_count).unwrap_or(0);
    PlanParseReport { tag_ok, region_json_ok, reasoning_word_count, violations }
}

/// Lossy UTF-8 front end for [`inspect_plan`].
pub fn inspect_plan_bytes(bytes: &[u8]) -> PlanParseReport {
    inspect_plan(&String::from_utf8_lossy(bytes))
}

#[derive(Serialize)]
struct RegionOut<'a> {
    bbox: [u32; 4],
    hint: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    negative: Option<bool>,
}

/// Canonical planner text. The `negative` key is only written when the flag
/// disagrees with what the hint text implies, so plans round-trip exactly.
pub fn serialize_plan(plan: &EditPlan) -> String {
    let markers = ParseOptions::default().negative_markers;
    let regions: Vec<RegionOut<'_>> = plan
        .regions
        .iter()
        .map(|r| RegionOut {
            bbox: r.bbox.into(),
            hint: &r.hint,
            negative: (r.negative != is_negative_hint(&r.hint, &markers)).then_some(r.negative),
        })
        .collect();
    let payload = serde_json::to_string(&regions).expect("region list serializes");
    format!(
        "<think>\n{}\n</think>\n<global>\n{}\n</global>\n<region>{}</region>\n",
        plan.reasoning, plan.global_hint, payload
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIZE: ImageSize = ImageSize { width: 100, height: 100 };

    fn two_region_text() -> String {
        r#"<think>The mug on the left is the target.</think>
<global>Make the mugs look metallic</global>
<region>[{"bbox":[10,10,40,40],"hint":"turn the left mug silver"},
         {"bbox":[60,10,90,40],"hint":"Keep the right mug unchanged"}]</region>"#
            .to_string()
    }

    #[test]
    fn parses_two_regions_in_order() {
        let plan = parse_plan(&two_region_text(), SIZE).unwrap();
        assert_eq!(plan.region_count(), 2);
        assert_eq!(plan.regions[0].bbox, BBox::new(10, 10, 40, 40));
        assert_eq!(plan.regions[1].bbox, BBox::new(60, 10, 90, 40));
        assert!(!plan.regions[0].negative);
        assert!(plan.regions[1].negative);
        assert_eq!(plan.reasoning, "The mug on the left is the target.");
        assert_eq!(plan.global_hint, "Make the mugs look metallic");
    }

    #[test]
    fn missing_closing_region_tag() {
        let text = "<think>a</think><global>b</global><region>[]";
        assert!(matches!(parse_plan(text, SIZE), Err(PlanError::TagStructure(_))));
    }

    #[test]
    fn duplicated_and_misordered_tags() {
        let dup = "<think>a</think><think>b</think><global>g</global><region>[]</region>";
        assert!(matches!(parse_plan(dup, SIZE), Err(PlanError::TagStructure(_))));
        let swapped = "<global>g</global><think>a</think><region>[]</region>";
        assert!(matches!(parse_plan(swapped, SIZE), Err(PlanError::TagStructure(_))));
        let stray = "note <think>a</think><global>g</global><region>[]</region>";
        assert!(matches!(parse_plan(stray, SIZE), Err(PlanError::TagStructure(_))));
    }

    #[test]
    fn inverted_corners_are_a_bbox_error() {
        let text = r#"<think></think><global></global><region>[{"bbox":[50,50,10,10],"hint":"x"}]</region>"#;
        assert!(matches!(parse_plan(text, SIZE), Err(PlanError::Bbox { index: 0, .. })));
    }

    #[test]
    fn clamps_overshoot_before_validating() {
        let text = r#"<think></think><global></global><region>[{"bbox":[-3,0,101,100.4],"hint":"x"}]</region>"#;
        let plan = parse_plan(text, SIZE).unwrap();
        assert_eq!(plan.regions[0].bbox, BBox::new(0, 0, 100, 100));
        // Fully outside collapses to zero width.
        let text = r#"<think></think><global></global><region>[{"bbox":[120,0,140,10],"hint":"x"}]</region>"#;
        assert!(matches!(parse_plan(text, SIZE), Err(PlanError::Bbox { .. })));
    }

    #[test]
    fn payload_errors() {
        for payload in [
            "{not json",
            r#"{"bbox":[0,0,1,1],"hint":"x"}"#,
            r#"[{"bbox":[0,0,1],"hint":"x"}]"#,
            r#"[{"bbox":[0,0,1,1]}]"#,
            r#"[{"bbox":[0,0,1,1],"hint":"   "}]"#,
            r#"[{"bbox":[0,0,1,1],"hint":"x","negative":"yes"}]"#,
            r#"[3]"#,
        ] {
            let text = format!("<think></think><global></global><region>{payload}</region>");
            assert!(matches!(parse_plan(&text, SIZE), Err(PlanError::RegionPayload(_))), "payload {payload}");
        }
    }

    #[test]
    fn zero_image_size_rejected() {
        let text = "<think></think><global></global><region>[]</region>";
        assert!(matches!(parse_plan(text, ImageSize::new(0, 10)), Err(PlanError::ImageSize { .. })));
    }

    #[test]
    fn negative_marker_needs_word_boundary() {
        let markers = ParseOptions::default().negative_markers;
        assert!(is_negative_hint("keep it", &markers));
        assert!(is_negative_hint("  KEEP, unchanged", &markers));
        assert!(!is_negative_hint("keeper of the gate", &markers));
        assert!(!is_negative_hint("do not keep", &markers));
    }

    #[test]
    fn inspect_valid_plan_counts_words() {
        let think = vec!["word"; 150].join(" ");
        let text = format!("<think>{think}</think><global>g</global><region>[]</region>");
        let report = inspect_plan(&text);
        assert_eq!(
            report,
            PlanParseReport { tag_ok: true, region_json_ok: true, reasoning_word_count: 150, violations: vec![] }
        );
    }

    #[test]
    fn inspect_broken_json() {
        let text = "<think>one two three</think><global>g</global><region>{not json</region>";
        let report = inspect_plan(text);
        assert!(report.tag_ok);
        assert!(!report.region_json_ok);
        assert_eq!(report.reasoning_word_count, 3);
        assert_eq!(report.violations.len(), 1);
    }

    #[test]
    fn inspect_empty_input() {
        let report = inspect_plan("");
        assert!(!report.tag_ok && !report.region_json_ok);
        assert_eq!(report.reasoning_word_count, 0);
        assert!(!report.violations.is_empty());
    }

    #[test]
    fn inspect_grades_partial_structure() {
        // Think block present, structure broken: words still counted.
        let report = inspect_plan("<think>a b c d</think> trailing");
        assert!(!report.tag_ok);
        assert_eq!(report.reasoning_word_count, 4);
    }

    #[test]
    fn serialize_empty_region_list() {
        let plan = EditPlan { reasoning: "r".into(), global_hint: "g".into(), regions: vec![] };
        let text = serialize_plan(&plan);
        assert!(text.contains("<region>[]</region>"));
        assert_eq!(parse_plan(&text, SIZE).unwrap(), plan);
    }

    #[test]
    fn serialize_keeps_three_regions_in_order() {
        let plan = EditPlan {
            reasoning: "why".into(),
            global_hint: "global".into(),
            regions: vec![
                RegionHint::new(BBox::new(0, 0, 10, 10), "a"),
                RegionHint::new(BBox::new(20, 20, 30, 30), "keep b"),
                RegionHint { bbox: BBox::new(40, 0, 50, 90), hint: "c".into(), negative: true },
            ],
        };
        let text = serialize_plan(&plan);
        let back = parse_plan(&text, SIZE).unwrap();
        assert_eq!(back, plan);
        let hints: Vec<&str> = back.regions.iter().map(|r| r.hint.as_str()).collect();
        assert_eq!(hints, ["a", "keep b", "c"]);
    }

    #[test]
    fn validate_rejects_tag_literals() {
        let plan = EditPlan { reasoning: "a </think> b".into(), global_hint: "g".into(), regions: vec![] };
        assert!(plan.validate(SIZE).is_err());
    }
}
