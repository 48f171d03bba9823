//! Train/test task suite generation: deterministic, isolated, tiered
//! tasks with machine-checkable validation criteria.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, CompletionResult, Gateway};
use crate::skill::{CapabilityProfile, SkillPackage};

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("profile has no core functions and the skill has no commands")]
    InsufficientProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    Standard,
    Advanced,
    Boundary,
}

impl Tier {
    fn tag(self) -> &'static str {
        match self {
            Tier::Standard => "standard",
            Tier::Advanced => "advanced",
            Tier::Boundary => "boundary",
        }
    }

    /// Boundary counts toward the advanced bucket for split accounting.
    pub fn is_standard(self) -> bool {
        matches!(self, Tier::Standard)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriterionKind {
    FileExists,
    KeywordPresent,
    RegexMatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckWhere {
    Stdout,
    Stderr,
    OutputFile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCriterion {
    pub kind: CriterionKind,
    pub target: String,
    #[serde(rename = "where")]
    pub location: CheckWhere,
    pub weight: u32,
    /// Concept keywords consulted by virtual mode.
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub split: Split,
    pub tier: Tier,
    pub description: String,
    pub context: Vec<(String, String)>,
    pub criteria: Vec<ValidationCriterion>,
    /// Capability-profile area this task was generated from; drives the
    /// report's boundary analysis.
    pub capability_area: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub skill_name: String,
    pub generation_seed: u64,
    pub generator_version: String,
    pub train: Vec<Task>,
    pub test: Vec<Task>,
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            train_count: 12,
            test_count: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ConceptKeywords {
    by_kind: HashMap<String, Vec<String>>,
    by_tier: HashMap<String, Vec<String>>,
}

const CONCEPT_KEYWORDS_JSON: &str = include_str!("../data/concept_keywords.json");

fn concept_keywords() -> ConceptKeywords {
    serde_json::from_str(CONCEPT_KEYWORDS_JSON).expect("bundled concept_keywords.json is valid")
}

/// Slot-value pool for task contexts. Partitioned disjointly between
/// the train and test splits so descriptions can never collide.
const SCENARIOS: &[&str] = &[
    "quarterly-report", "customer-feedback", "inventory-audit", "weather-archive",
    "release-notes", "survey-responses", "sensor-readings", "meeting-minutes",
    "sales-ledger", "travel-itinerary", "support-backlog", "research-digest",
    "budget-forecast", "event-schedule", "catalog-update", "incident-review",
    "onboarding-pack", "usage-metrics", "draft-proposal", "archive-cleanup",
    "vendor-summary", "press-briefing", "feature-matrix", "migration-plan",
    "health-checkup", "training-roster", "content-calendar", "risk-register",
];

fn topics(profile: &CapabilityProfile, pkg: &SkillPackage) -> Vec<String> {
    let mut t: Vec<String> = profile
        .core_functions
        .iter()
        .map(|f| f.trim_end_matches('.').to_string())
        .collect();
    t.extend(pkg.commands.iter().map(|c| format!("run `{}`", c.raw)));
    t
}

fn tier_sequence(count: usize) -> Vec<Tier> {
    // First half standard, remainder alternates advanced/boundary.
    let standard = count.div_ceil(2);
    (0..count)
        .map(|i| {
            if i < standard {
                Tier::Standard
            } else if (i - standard) % 2 == 0 {
                Tier::Advanced
            } else {
                Tier::Boundary
            }
        })
        .collect()
}

fn describe(skill: &str, tier: Tier, topic: &str, scenario: &str, outfile: &str) -> String {
    match tier {
        Tier::Standard => format!(
            "Use the {skill} skill to {topic} for the {scenario} scenario and save the result to {outfile}, reporting a short status summary on stdout."
        ),
        Tier::Advanced => format!(
            "Carry out a multi-step workflow with the {skill} skill for the {scenario} scenario: {topic}, return the results in JSON format on stdout, and save the combined output to {outfile}."
        ),
        Tier::Boundary => format!(
            "Probe the operational limits of the {skill} skill on the {scenario} scenario: {topic} with maximum-size or invalid input, report any error handling on stdout, and save diagnostics to {outfile}."
        ),
    }
}

fn make_task(
    skill: &str,
    split: Split,
    tier: Tier,
    ordinal: usize,
    topic: &str,
    area: &str,
    scenario: &str,
    profile: &CapabilityProfile,
) -> Task {
    let outfile = format!("result_{scenario}.json");
    let description = describe(skill, tier, topic, scenario, &outfile);
    let task = Task {
        id: format!("{skill}-{}-{}-{ordinal}", split.tag(), tier.tag()),
        split,
        tier,
        description,
        context: vec![(
            format!("input_{scenario}.txt"),
            format!("scenario: {scenario}\ntopic: {topic}\n"),
        )],
        criteria: Vec::new(),
        capability_area: area.to_string(),
    };
    attach_validation_criteria(task, profile, skill)
}

static FILE_MENTION: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();

fn file_mention_re() -> &'static regex::Regex {
    FILE_MENTION.get_or_init(|| {
        regex::Regex::new(r"\b([\w./-]+\.(?:json|txt|csv|md|log))\b").unwrap()
    })
}

/// Attach machine-checkable criteria to a task: output-file mentions gain
/// FileExists, JSON-format mentions gain a RegexMatch on stdout, stdout
/// mentions gain KeywordPresent; every criterion carries concept keywords
/// for virtual mode. A task matching no rule falls back to a
/// KeywordPresent criterion for the skill name.
pub fn attach_validation_criteria(mut task: Task, _profile: &CapabilityProfile, skill: &str) -> Task {
    let ck = concept_keywords();
    let tier_kw = ck
        .by_tier
        .get(task.tier.tag_title())
        .cloned()
        .unwrap_or_default();
    let kws = |kind: &str| -> Vec<String> {
        let mut v = ck.by_kind.get(kind).cloned().unwrap_or_default();
        v.extend(tier_kw.iter().cloned());
        v
    };

    let desc = task.description.to_lowercase();
    let mut criteria = Vec::new();

    if let Some(cap) = file_mention_re().captures(&task.description) {
        let path = cap[1].to_string();
        criteria.push(ValidationCriterion {
            kind: CriterionKind::FileExists,
            target: path.clone(),
            location: CheckWhere::OutputFile(path),
            weight: 1,
            keywords: kws("FileExists"),
        });
    }
    if desc.contains("json format") || desc.contains("in json") {
        criteria.push(ValidationCriterion {
            kind: CriterionKind::RegexMatch,
            target: r"\{".to_string(),
            location: CheckWhere::Stdout,
            weight: 1,
            keywords: kws("RegexMatch"),
        });
    }
    if desc.contains("stdout") || desc.contains("output") || desc.contains("report") {
        let keyword = if desc.contains("error") { "error" } else { "status" };
        criteria.push(ValidationCriterion {
            kind: CriterionKind::KeywordPresent,
            target: keyword.to_string(),
            location: CheckWhere::Stdout,
            weight: 1,
            keywords: kws("KeywordPresent"),
        });
    }
    if criteria.is_empty() {
        criteria.push(ValidationCriterion {
            kind: CriterionKind::KeywordPresent,
            target: skill.to_string(),
            location: CheckWhere::Stdout,
            weight: 1,
            keywords: kws("KeywordPresent"),
        });
    }
    // Virtual mode needs at least one concept keyword per criterion.
    for c in &mut criteria {
        if c.keywords.is_empty() {
            c.keywords.push("save".to_string());
        }
    }
    task.criteria = criteria;
    task
}

impl Tier {
    fn tag_title(self) -> &'static str {
        match self {
            Tier::Standard => "Standard",
            Tier::Advanced => "Advanced",
            Tier::Boundary => "Boundary",
        }
    }
}

fn finalize_ids(tasks: &mut [Task]) {
    // Re-number ordinals per (split, tier) so ids are unique and stable.
    let mut counters: HashMap<(Split, Tier), usize> = HashMap::new();
    for t in tasks.iter_mut() {
        let n = counters.entry((t.split, t.tier)).or_insert(0);
        let base = t.id.rsplit_once('-').map(|(b, _)| b.to_string()).unwrap();
        t.id = format!("{base}-{n}");
        *n += 1;
    }
}

/// Generate a deterministic train/test suite. Template mode is a pure
/// function of (profile, pkg, seed); when a gateway is supplied, task
/// phrasing may be LLM-backed, with per-task fallback to the template
/// when the response fails validation.
pub fn generate_task_suite(
    profile: &CapabilityProfile,
    pkg: &SkillPackage,
    cfg: &GenerationConfig,
    gateway: Option<&Gateway>,
) -> Result<TaskSuite, TaskGenError> {
    let topics = topics(profile, pkg);
    if topics.is_empty() {
        return Err(TaskGenError::InsufficientProfile);
    }
    let areas: Vec<String> = profile
        .core_functions
        .iter()
        .cloned()
        .chain(pkg.commands.iter().map(|c| c.raw.clone()))
        .collect();

    let mut scenarios: Vec<&str> = SCENARIOS.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    scenarios.shuffle(&mut rng);
    // Disjoint slot-value partition: even indices feed train, odd feed
    // test, cycling if counts exceed the pool half.
    let train_pool: Vec<&str> = scenarios.iter().step_by(2).copied().collect();
    let test_pool: Vec<&str> = scenarios.iter().skip(1).step_by(2).copied().collect();

    let build_split = |split: Split, count: usize, pool: &[&str]| -> Vec<Task> {
        let tiers = tier_sequence(count);
        let mut tasks: Vec<Task> = tiers
            .iter()
            .enumerate()
            .map(|(i, &tier)| {
                let topic = &topics[i % topics.len()];
                let area = &areas[i % areas.len()];
                let scenario = pool[i % pool.len()];
                make_task(&pkg.name, split, tier, i, topic, area, scenario, profile)
            })
            .collect();
        finalize_ids(&mut tasks);
        tasks
    };

    let mut train = build_split(Split::Train, cfg.train_count, &train_pool);
    let mut test = build_split(Split::Test, cfg.test_count, &test_pool);

    if let Some(gw) = gateway {
        rephrase_with_gateway(gw, &mut train, &mut test, profile);
    }

    Ok(TaskSuite {
        skill_name: pkg.name.clone(),
        generation_seed: cfg.seed,
        generator_version: env!("CARGO_PKG_VERSION").to_string(),
        train,
        test,
    })
}

/// Ask the gateway for alternative phrasings; any response that breaks
/// the suite invariants is discarded in favor of the template text. If
/// the rephrased suite as a whole violates isolation, every rephrasing
/// is reverted.
fn rephrase_with_gateway(
    gw: &Gateway,
    train: &mut [Task],
    test: &mut [Task],
    profile: &CapabilityProfile,
) {
    let originals: Vec<Task> = train.iter().chain(test.iter()).cloned().collect();

    let rephrase = |task: &mut Task| {
        let req = CompletionRequest {
            system: "Rewrite the task statement in one sentence. Keep every file name \
                     and the scenario token unchanged. Reply with the sentence only."
                .to_string(),
            user: task.description.clone(),
            schema_hint: None,
        };
        if let CompletionResult::Text(text) = gw.complete(&req) {
            let text = text.trim().to_string();
            let scenario_kept = task
                .context
                .first()
                .map(|(name, _)| {
                    let scen = name
                        .trim_start_matches("input_")
                        .trim_end_matches(".txt");
                    text.contains(scen)
                })
                .unwrap_or(false);
            let files_kept = task
                .criteria
                .iter()
                .filter(|c| c.kind == CriterionKind::FileExists)
                .all(|c| text.contains(&c.target));
            if !text.is_empty() && scenario_kept && files_kept {
                let skill = task.id.split('-').next().unwrap_or("skill").to_string();
                let mut rewritten = task.clone();
                rewritten.description = text;
                *task = attach_validation_criteria(rewritten, profile, &skill);
            }
        }
    };
    for t in train.iter_mut() {
        rephrase(t);
    }
    for t in test.iter_mut() {
        rephrase(t);
    }

    let suite = TaskSuite {
        skill_name: String::new(),
        generation_seed: 0,
        generator_version: String::new(),
        train: train.to_vec(),
        test: test.to_vec(),
    };
    if !verify_isolation(&suite).is_empty() {
        for (slot, original) in train.iter_mut().chain(test.iter_mut()).zip(originals) {
            *slot = original;
        }
    }
}

#[cfg(test)]
fn placeholder_task() -> Task {
    Task {
        id: String::new(),
        split: Split::Train,
        tier: Tier::Standard,
        description: String::new(),
        context: vec![],
        criteria: vec![],
        capability_area: String::new(),
    }
}

/// Cross-split substring check over task descriptions. Empty iff no
/// train description appears inside a test description or vice versa.
pub fn verify_isolation(suite: &TaskSuite) -> Vec<String> {
    let mut violations = Vec::new();
    for tr in &suite.train {
        for te in &suite.test {
            if te.description.contains(&tr.description)
                || tr.description.contains(&te.description)
            {
                violations.push(format!(
                    "train task {} and test task {} share description text",
                    tr.id, te.id
                ));
            }
        }
    }
    violations
}
