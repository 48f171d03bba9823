//! Evaluation rubric: the builtin eight-dimension criteria catalog plus a
//! parser for external rule documents.
//!
//! Rule document format: `## <Dimension>` headings, `- <item>` bullets,
//! an optional `threshold: N%` line, and an optional per-item check
//! annotation suffix in square brackets:
//!
//!   - `[kw: a, b/c]`      keyword set — every comma entry must be present,
//!                         `/` separates acceptable alternatives
//!   - `[structure: name]` named structural rule
//!   - `[stat: name lo..hi]` named content statistic with numeric bounds
//!   - `[llm]`             judgmental item; heuristic mode approximates it
//!                         from keywords derived from the item text

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PASS_THRESHOLD: f64 = 0.70;
pub const DEFAULT_SCALE_MAX: f64 = 100.0;

#[derive(Debug, Error)]
pub enum RubricError {
    #[error("rule document contains no headings with list items")]
    EmptyRubric,
    #[error("unknown check annotation: [{0}]")]
    UnknownAnnotation(String),
    #[error("malformed stat bounds in annotation: [{0}]")]
    MalformedBounds(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Check {
    /// Every entry must be present; entries are (alternative...) groups.
    KeywordSet(Vec<Vec<String>>),
    StructureRule(String),
    StatRule { name: String, lo: f64, hi: f64 },
    LlmOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionItem {
    pub text: String,
    pub check: Check,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub items: Vec<CriterionItem>,
}

impl Dimension {
    pub fn max_points(&self) -> usize {
        self.items.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub dimensions: Vec<Dimension>,
    pub pass_threshold: f64,
    pub scale_max: f64,
}

impl Rubric {
    pub fn total_points(&self) -> usize {
        self.dimensions.iter().map(Dimension::max_points).sum()
    }
}

const CATALOG: &str = include_str!("../data/rubric_catalog.md");

/// The bundled criteria catalog: 8 dimensions, 49 items, threshold 0.70.
pub fn builtin_rubric() -> Rubric {
    parse_rule_document(CATALOG).expect("bundled rubric catalog is valid")
}

fn parse_keyword_set(body: &str) -> Check {
    let groups = body
        .split(',')
        .map(|entry| {
            entry
                .trim()
                .split('/')
                .map(|alt| alt.trim().to_lowercase())
                .filter(|alt| !alt.is_empty())
                .collect::<Vec<_>>()
        })
        .filter(|g| !g.is_empty())
        .collect();
    Check::KeywordSet(groups)
}

fn parse_annotation(ann: &str) -> Result<Check, RubricError> {
    let ann = ann.trim();
    if ann == "llm" {
        return Ok(Check::LlmOnly);
    }
    if let Some(body) = ann.strip_prefix("kw:") {
        return Ok(parse_keyword_set(body));
    }
    if let Some(body) = ann.strip_prefix("structure:") {
        return Ok(Check::StructureRule(body.trim().to_string()));
    }
    if let Some(body) = ann.strip_prefix("stat:") {
        let body = body.trim();
        let (name, bounds) = body
            .split_once(' ')
            .ok_or_else(|| RubricError::MalformedBounds(ann.to_string()))?;
        let (lo, hi) = bounds
            .split_once("..")
            .ok_or_else(|| RubricError::MalformedBounds(ann.to_string()))?;
        let lo: f64 = lo
            .trim()
            .parse()
            .map_err(|_| RubricError::MalformedBounds(ann.to_string()))?;
        let hi: f64 = hi
            .trim()
            .parse()
            .map_err(|_| RubricError::MalformedBounds(ann.to_string()))?;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(RubricError::MalformedBounds(ann.to_string()));
        }
        return Ok(Check::StatRule {
            name: name.trim().to_string(),
            lo,
            hi,
        });
    }
    Err(RubricError::UnknownAnnotation(ann.to_string()))
}

/// Split a bullet into item text and optional trailing `[annotation]`.
fn split_item(line: &str) -> Result<CriterionItem, RubricError> {
    let line = line.trim();
    if line.ends_with(']') {
        if let Some(open) = line.rfind('[') {
            let text = line[..open].trim_end().to_string();
            let ann = &line[open + 1..line.len() - 1];
            return Ok(CriterionItem {
                text,
                check: parse_annotation(ann)?,
            });
        }
    }
    Ok(CriterionItem {
        text: line.to_string(),
        check: Check::LlmOnly,
    })
}

/// Parse an external rule document into a rubric. Headings become
/// dimensions, bullets become items; `threshold: N%` overrides the
/// default 0.70 pass threshold.
pub fn parse_rule_document(doc: &str) -> Result<Rubric, RubricError> {
    let mut dimensions: Vec<Dimension> = Vec::new();
    let mut pass_threshold = DEFAULT_PASS_THRESHOLD;
    let mut current: Option<Dimension> = None;

    for line in doc.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("## ") {
            if let Some(dim) = current.take() {
                if !dim.items.is_empty() {
                    dimensions.push(dim);
                }
            }
            current = Some(Dimension {
                name: rest.trim().to_string(),
                items: Vec::new(),
            });
        } else if let Some(rest) = trimmed.strip_prefix("- ") {
            if let Some(dim) = current.as_mut() {
                let item = split_item(rest)?;
                if !item.text.is_empty() && !dim.items.iter().any(|i| i.text == item.text) {
                    dim.items.push(item);
                }
            }
        } else if let Some(rest) = trimmed.strip_prefix("threshold:") {
            let rest = rest.trim().trim_end_matches('%');
            if let Ok(pct) = rest.parse::<f64>() {
                if pct > 0.0 && pct <= 100.0 {
                    pass_threshold = pct / 100.0;
                }
            }
        }
    }
    if let Some(dim) = current.take() {
        if !dim.items.is_empty() {
            dimensions.push(dim);
        }
    }
    if dimensions.is_empty() {
        return Err(RubricError::EmptyRubric);
    }
    Ok(Rubric {
        dimensions,
        pass_threshold,
        scale_max: DEFAULT_SCALE_MAX,
    })
}

fn annotation_suffix(check: &Check) -> String {
    match check {
        Check::LlmOnly => " [llm]".to_string(),
        Check::KeywordSet(groups) => {
            let entries: Vec<String> = groups.iter().map(|g| g.join("/")).collect();
            format!(" [kw: {}]", entries.join(", "))
        }
        Check::StructureRule(name) => format!(" [structure: {name}]"),
        Check::StatRule { name, lo, hi } => format!(" [stat: {name} {lo}..{hi}]"),
    }
}

/// Render a rubric back into rule-document form; `parse_rule_document`
/// round-trips dimension names, item texts, and threshold exactly.
pub fn serialize_rubric(rubric: &Rubric) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "threshold: {}%\n",
        rubric.pass_threshold * 100.0
    ));
    for dim in &rubric.dimensions {
        out.push_str(&format!("\n## {}\n", dim.name));
        for item in &dim.items {
            out.push_str(&format!("- {}{}\n", item.text, annotation_suffix(&item.check)));
        }
    }
    out
}

// ---- mechanical checks used by the heuristic evaluator ----

fn sentences(text: &str) -> Vec<&str> {
    text.split(|c| c == '.' || c == '!' || c == '?' || c == '\n')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

fn count_code_blocks(text: &str) -> usize {
    text.lines().filter(|l| l.trim().starts_with("```")).count() / 2
}

fn count_headings(text: &str) -> usize {
    text.lines().filter(|l| l.trim_start().starts_with('#')).count()
}

const TECH_TERMS: &[&str] = &["API", "CLI", "SDK", "JSON", "HTTP", "URL", "REST", "YAML", "CSV", "UTF-8"];

fn structure_rule_satisfied(name: &str, text: &str) -> bool {
    match name {
        "intro_paragraph" => {
            // A non-heading paragraph before the second heading.
            let mut headings = 0;
            for line in text.lines() {
                let t = line.trim();
                if t.starts_with('#') {
                    headings += 1;
                    if headings >= 2 {
                        return false;
                    }
                } else if !t.is_empty() && t != "---" && !t.contains(':') {
                    return true;
                } else if !t.is_empty() && t != "---" && headings > 0 {
                    return true;
                }
            }
            false
        }
        "has_shell_block" => {
            let lower = text.to_lowercase();
            ["```bash", "```sh", "```shell", "```console"]
                .iter()
                .any(|t| lower.contains(t))
                || text.contains("\n$ ")
        }
        "min_code_blocks_3" => count_code_blocks(text) >= 3,
        "min_tech_terms_2" => TECH_TERMS.iter().filter(|t| text.contains(**t)).count() >= 2,
        "headers_lists_code" => {
            count_headings(text) >= 3
                && text
                    .lines()
                    .any(|l| l.trim_start().starts_with("- ") || l.trim_start().starts_with("* "))
                && count_code_blocks(text) >= 1
        }
        "has_subheaders" => text
            .lines()
            .any(|l| l.trim_start().starts_with("## ") || l.trim_start().starts_with("### ")),
        _ => false,
    }
}

fn stat_rule_satisfied(name: &str, lo: f64, hi: f64, text: &str) -> bool {
    match name {
        "char_length" => {
            let n = text.chars().count() as f64;
            n >= lo && n <= hi
        }
        "avg_sentence_words" => {
            let sents = sentences(text);
            if sents.is_empty() {
                return false;
            }
            let words: usize = sents.iter().map(|s| s.split_whitespace().count()).sum();
            let avg = words as f64 / sents.len() as f64;
            avg >= lo && avg < hi
        }
        _ => false,
    }
}

/// Keywords derived from an LlmOnly item's own wording, used as the
/// heuristic proxy: at least half of them must appear.
fn derived_keywords(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() >= 5)
        .map(str::to_lowercase)
        .take(4)
        .collect()
}

impl CriterionItem {
    /// Deterministic mechanical check of this item against an
    /// instruction text.
    pub fn satisfied_by(&self, instruction: &str) -> bool {
        let lower = instruction.to_lowercase();
        match &self.check {
            Check::KeywordSet(groups) => groups
                .iter()
                .all(|alts| alts.iter().any(|kw| lower.contains(kw.as_str()))),
            Check::StructureRule(name) => structure_rule_satisfied(name, instruction),
            Check::StatRule { name, lo, hi } => stat_rule_satisfied(name, *lo, *hi, instruction),
            Check::LlmOnly => {
                let kws = derived_keywords(&self.text);
                if kws.is_empty() || instruction.is_empty() {
                    return false;
                }
                let hits = kws.iter().filter(|k| lower.contains(k.as_str())).count();
                hits * 2 >= kws.len()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_eight_dimensions_and_49_items() {
        let r = builtin_rubric();
        assert_eq!(r.dimensions.len(), 8);
        let counts: Vec<usize> = r.dimensions.iter().map(|d| d.items.len()).collect();
        assert_eq!(counts, vec![7, 6, 6, 6, 6, 6, 6, 6]);
        assert_eq!(r.total_points(), 49);
        assert!((r.pass_threshold - 0.70).abs() < 1e-12);
    }

    #[test]
    fn builtin_clarity_dimension_bounds_content_length() {
        let r = builtin_rubric();
        let clarity = r
            .dimensions
            .iter()
            .find(|d| d.name == "Clarity & Readability")
            .unwrap();
        let item = clarity
            .items
            .iter()
            .find(|i| i.text.contains("500-15000 characters"))
            .unwrap();
        assert_eq!(
            item.check,
            Check::StatRule {
                name: "char_length".into(),
                lo: 500.0,
                hi: 15000.0
            }
        );
    }

    #[test]
    fn builtin_is_constant_across_calls() {
        assert_eq!(builtin_rubric(), builtin_rubric());
    }

    #[test]
    fn parses_headings_bullets_and_threshold() {
        let doc = "## A\n- one\n- two\n- three\n## B\n- x\n- y\n- z\nthreshold: 60%\n";
        let r = parse_rule_document(doc).unwrap();
        assert_eq!(r.dimensions.len(), 2);
        assert_eq!(r.total_points(), 6);
        assert!((r.pass_threshold - 0.60).abs() < 1e-12);
    }

    #[test]
    fn missing_threshold_defaults_to_70_percent() {
        let r = parse_rule_document("## A\n- one\n").unwrap();
        assert!((r.pass_threshold - 0.70).abs() < 1e-12);
    }

    #[test]
    fn prose_only_document_is_empty_rubric() {
        assert!(matches!(
            parse_rule_document("just some prose\nno structure here\n"),
            Err(RubricError::EmptyRubric)
        ));
    }

    #[test]
    fn serialize_round_trips() {
        let r = builtin_rubric();
        let parsed = parse_rule_document(&serialize_rubric(&r)).unwrap();
        assert_eq!(parsed.pass_threshold, r.pass_threshold);
        for (a, b) in parsed.dimensions.iter().zip(&r.dimensions) {
            assert_eq!(a.name, b.name);
            let ta: Vec<_> = a.items.iter().map(|i| &i.text).collect();
            let tb: Vec<_> = b.items.iter().map(|i| &i.text).collect();
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn empty_instruction_satisfies_nothing() {
        let r = builtin_rubric();
        for dim in &r.dimensions {
            for item in &dim.items {
                assert!(
                    !item.satisfied_by(""),
                    "item unexpectedly satisfied by empty text: {}",
                    item.text
                );
            }
        }
    }

    #[test]
    fn stat_rules_hold_on_fixtures() {
        let item = CriterionItem {
            text: "length".into(),
            check: Check::StatRule {
                name: "char_length".into(),
                lo: 5.0,
                hi: 10.0,
            },
        };
        assert!(item.satisfied_by("123456"));
        assert!(!item.satisfied_by("1234"));
        assert!(!item.satisfied_by("12345678901"));
    }
}
