//! Criterion-by-criterion scoring of execution records, version-level
//! metric aggregation, instruction-quality rubric scoring (LLM-backed
//! with heuristic fallback), and the retain-or-discard decision.

use serde::{Deserialize, Serialize};

use crate::exec::{ExecMode, ExecutionRecord, SkillVersion, VirtualOutcome};
use crate::gateway::{CompletionRequest, CompletionResult, Gateway};
use crate::rubric::Rubric;
use crate::taskgen::{CheckWhere, CriterionKind, Task, Tier};

const EVIDENCE_CAP: usize = 512;

fn cap_evidence(mut s: String) -> String {
    if s.chars().count() > EVIDENCE_CAP {
        s = s.chars().take(EVIDENCE_CAP - 1).collect();
        s.push('…');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub criterion_index: usize,
    pub satisfied: bool,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    pub version: SkillVersion,
    pub tier: Tier,
    pub per_criterion: Vec<CriterionScore>,
    pub points: usize,
    pub max_points: usize,
    pub normalized: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub pass_rate: f64,
    pub average_score: f64,
    pub standard_score: Option<f64>,
    pub advanced_score: Option<f64>,
    pub error_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Retain,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub justification: String,
    pub evidence_refs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreMode {
    Llm,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub name: String,
    pub score: f64,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScores {
    pub per_dimension: Vec<DimensionScore>,
    pub overall: f64,
    pub mode: ScoreMode,
    pub warnings: Vec<String>,
}

fn fragment_around(text: &str, needle_pos: usize, needle_len: usize) -> String {
    let start = text[..needle_pos]
        .char_indices()
        .rev()
        .nth(30)
        .map(|(i, _)| i)
        .unwrap_or(0);
    let end = (needle_pos + needle_len + 30).min(text.len());
    let end = text
        .char_indices()
        .map(|(i, _)| i)
        .chain([text.len()])
        .filter(|&i| i >= end)
        .next()
        .unwrap_or(text.len());
    text[start..end].replace('\n', " ")
}

fn check_criterion_real(
    record: &ExecutionRecord,
    criterion: &crate::taskgen::ValidationCriterion,
) -> (bool, String) {
    match criterion.kind {
        CriterionKind::FileExists => {
            let found = record
                .artifacts
                .iter()
                .find(|(path, _, _)| path == &criterion.target || path.ends_with(&criterion.target));
            match found {
                Some((path, size, digest)) => {
                    (true, format!("artifact {path} ({size} bytes, {digest})"))
                }
                None => (false, format!("no artifact matching {}", criterion.target)),
            }
        }
        CriterionKind::KeywordPresent | CriterionKind::RegexMatch => {
            let content: Option<&str> = match &criterion.location {
                CheckWhere::Stdout => Some(&record.stdout),
                CheckWhere::Stderr => Some(&record.stderr),
                CheckWhere::OutputFile(path) => record
                    .captured_files
                    .iter()
                    .find(|(p, _)| p == path)
                    .map(|(_, c)| c.as_str()),
            };
            let content = match content {
                Some(c) => c,
                // CriterionUnresolvable: content target missing; the
                // criterion is unsatisfied, never a thrown failure.
                None => return (false, "target missing".to_string()),
            };
            if criterion.kind == CriterionKind::KeywordPresent {
                let lower = content.to_lowercase();
                let needle = criterion.target.to_lowercase();
                match lower.find(&needle) {
                    Some(pos) => (
                        true,
                        format!("…{}…", fragment_around(&lower, pos, needle.len())),
                    ),
                    None => (false, format!("keyword {:?} absent", criterion.target)),
                }
            } else {
                match regex::Regex::new(&criterion.target) {
                    Ok(re) => match re.find(content) {
                        Some(m) => (
                            true,
                            format!("…{}…", fragment_around(content, m.start(), m.len())),
                        ),
                        None => (false, format!("regex {:?} unmatched", criterion.target)),
                    },
                    Err(e) => (false, format!("regex failed to compile: {e}")),
                }
            }
        }
    }
}

/// Score one execution record against its task's criteria. Virtual
/// records mirror the VirtualOutcome; real records are checked
/// mechanically against artifacts and captured streams.
pub fn evaluate_task(
    record: &ExecutionRecord,
    task: &Task,
    rubric: &Rubric,
    virtual_outcome: Option<&VirtualOutcome>,
) -> TaskScore {
    debug_assert_eq!(record.task_id, task.id);
    let per_criterion: Vec<CriterionScore> = match (record.mode, virtual_outcome) {
        (ExecMode::Virtual, Some(outcome)) => outcome
            .per_criterion
            .iter()
            .map(|c| CriterionScore {
                criterion_index: c.criterion_index,
                satisfied: c.passed,
                evidence: cap_evidence(format!(
                    "virtual: coverage {:.4}, draw {:.6}",
                    c.keyword_coverage, c.draw
                )),
            })
            .collect(),
        _ => task
            .criteria
            .iter()
            .enumerate()
            .map(|(i, criterion)| {
                let (satisfied, evidence) = check_criterion_real(record, criterion);
                CriterionScore {
                    criterion_index: i,
                    satisfied,
                    evidence: cap_evidence(evidence),
                }
            })
            .collect(),
    };
    let points = per_criterion.iter().filter(|c| c.satisfied).count();
    let max_points = per_criterion.len().max(1);
    let normalized = points as f64 / max_points as f64;
    TaskScore {
        task_id: task.id.clone(),
        version: record.skill_version.clone(),
        tier: task.tier,
        per_criterion,
        points,
        max_points,
        normalized,
        // Inclusive comparison: meeting the threshold counts as passing.
        passed: normalized >= rubric.pass_threshold,
    }
}

/// Pure heuristic instruction-quality scoring: each rubric item checked
/// per its annotation; dimension score = 100 × satisfied / items.
pub fn evaluate_instruction_heuristic(instruction: &str, rubric: &Rubric) -> DimensionScores {
    let per_dimension: Vec<DimensionScore> = rubric
        .dimensions
        .iter()
        .map(|dim| {
            let satisfied: Vec<&str> = dim
                .items
                .iter()
                .filter(|i| i.satisfied_by(instruction))
                .map(|i| i.text.as_str())
                .collect();
            let score = rubric.scale_max * satisfied.len() as f64 / dim.items.len() as f64;
            DimensionScore {
                name: dim.name.clone(),
                score,
                evidence: cap_evidence(format!(
                    "{}/{} items satisfied: {}",
                    satisfied.len(),
                    dim.items.len(),
                    satisfied.join("; ")
                )),
            }
        })
        .collect();
    let overall = per_dimension.iter().map(|d| d.score).sum::<f64>() / per_dimension.len() as f64;
    DimensionScores {
        per_dimension,
        overall,
        mode: ScoreMode::Heuristic,
        warnings: Vec::new(),
    }
}

#[derive(Deserialize)]
struct LlmDimensionPayload {
    name: String,
    score: f64,
    #[serde(default)]
    evidence: String,
}

#[derive(Deserialize)]
struct LlmScoresPayload {
    dimensions: Vec<LlmDimensionPayload>,
}

fn parse_llm_scores(text: &str, rubric: &Rubric) -> Option<(Vec<DimensionScore>, Vec<String>)> {
    let payload: LlmScoresPayload = serde_json::from_str(text).ok()?;
    let mut warnings = Vec::new();
    let mut per_dimension = Vec::with_capacity(rubric.dimensions.len());
    for dim in &rubric.dimensions {
        let found = payload.dimensions.iter().find(|d| d.name == dim.name)?;
        let mut score = found.score;
        if score < 0.0 || score > rubric.scale_max {
            warnings.push(format!(
                "dimension {:?} score {} clamped to [0, {}]",
                dim.name, score, rubric.scale_max
            ));
            score = score.clamp(0.0, rubric.scale_max);
        }
        per_dimension.push(DimensionScore {
            name: dim.name.clone(),
            score,
            evidence: cap_evidence(found.evidence.clone()),
        });
    }
    Some((per_dimension, warnings))
}

/// LLM-backed instruction scoring with one retry on schema failure and
/// heuristic fallback on unavailability or timeout.
pub fn evaluate_instruction_llm(
    instruction: &str,
    rubric: &Rubric,
    gateway: &Gateway,
) -> DimensionScores {
    let dims: Vec<String> = rubric.dimensions.iter().map(|d| d.name.clone()).collect();
    let req = CompletionRequest {
        system: format!(
            "Score the document against each dimension on a 0-{} scale. Reply with JSON: \
             {{\"dimensions\": [{{\"name\", \"score\", \"evidence\"}}]}} using exactly these \
             dimension names: {}",
            rubric.scale_max,
            dims.join(", ")
        ),
        user: instruction.to_string(),
        schema_hint: Some(vec!["dimensions".to_string()]),
    };
    for _ in 0..2 {
        match gateway.complete(&req) {
            CompletionResult::Text(text) => {
                if let Some((per_dimension, warnings)) = parse_llm_scores(&text, rubric) {
                    let overall = per_dimension.iter().map(|d| d.score).sum::<f64>()
                        / per_dimension.len() as f64;
                    return DimensionScores {
                        per_dimension,
                        overall,
                        mode: ScoreMode::Llm,
                        warnings,
                    };
                }
                // Schema-invalid content: retry once, then fall back.
            }
            CompletionResult::Unavailable(_) => break,
        }
    }
    evaluate_instruction_heuristic(instruction, rubric)
}

/// Aggregate task scores into version-level metrics. A tier with zero
/// tasks yields an absent tier score, never 0.
pub fn compute_metrics(scores: &[TaskScore], records: &[ExecutionRecord]) -> MetricsSummary {
    assert!(!scores.is_empty(), "compute_metrics needs at least one score");
    let n = scores.len() as f64;
    let pass_rate = scores.iter().filter(|s| s.passed).count() as f64 / n;
    let average_score = scores.iter().map(|s| s.normalized).sum::<f64>() / n;
    let tier_mean = |standard: bool| {
        let vals: Vec<f64> = scores
            .iter()
            .filter(|s| s.tier.is_standard() == standard)
            .map(|s| s.normalized)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let error_rate = if records.is_empty() {
        0.0
    } else {
        records.iter().filter(|r| r.error.is_some()).count() as f64 / records.len() as f64
    };
    MetricsSummary {
        pass_rate,
        average_score,
        standard_score: tier_mean(true),
        advanced_score: tier_mean(false),
        error_rate,
    }
}

/// Retain iff the optimized version strictly improves the average score
/// without regressing the pass rate; ties keep the original.
pub fn decide_retention(
    original: &MetricsSummary,
    optimized: &MetricsSummary,
    evidence_refs: Vec<String>,
) -> Decision {
    let improves_avg = optimized.average_score > original.average_score;
    let holds_pass = optimized.pass_rate >= original.pass_rate;
    let verdict = if improves_avg && holds_pass {
        Verdict::Retain
    } else {
        Verdict::Discard
    };
    let justification = format!(
        "average_score {:.4} -> {:.4} ({}), pass_rate {:.4} -> {:.4} ({}); rule: retain iff \
         average_score strictly improves and pass_rate does not regress => {:?}",
        original.average_score,
        optimized.average_score,
        if improves_avg { "strict improvement" } else { "no strict improvement" },
        original.pass_rate,
        optimized.pass_rate,
        if holds_pass { "no regression" } else { "regression" },
        verdict
    );
    Decision {
        verdict,
        justification,
        evidence_refs,
    }
}
