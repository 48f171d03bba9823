//! Epoch-based skill improvement: group-relative instruction variant
//! selection plus a three-tier code pathway (rule transforms, command
//! refinement, failure-driven auto-fix). Only train tasks ever reach
//! this module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::TaskScore;
use crate::exec::ExecutionRecord;
use crate::gateway::{CompletionRequest, CompletionResult, Gateway};
use crate::skill::{CommandSpec, SkillPackage, SkillType};
use crate::taskgen::Task;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("base instruction is empty")]
    DegenerateBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantGroup {
    pub base_instruction: String,
    pub variants: Vec<(String, String)>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LessonEntry {
    pub epoch: usize,
    pub variant_id: String,
    pub failed_criteria: Vec<String>,
    pub advantage: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LessonLedger {
    entries: Vec<LessonEntry>,
}

impl LessonLedger {
    /// Append-only; entries stay ordered by (epoch, variant_id).
    pub fn append(&mut self, entry: LessonEntry) {
        debug_assert!(self
            .entries
            .last()
            .map(|last| (last.epoch, &last.variant_id) <= (entry.epoch, &entry.variant_id))
            .unwrap_or(true));
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LessonEntry] {
        &self.entries
    }

    /// The 10 most recent negative-advantage entries, the only lessons
    /// injected into variant prompts.
    pub fn recent_failures(&self) -> Vec<&LessonEntry> {
        let mut recent: Vec<&LessonEntry> = self
            .entries
            .iter()
            .rev()
            .filter(|e| e.advantage < 0.0)
            .take(10)
            .collect();
        recent.reverse();
        recent
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IssueClass {
    DependencyConflict,
    ParameterMisconfiguration,
    PathError,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixAttempt {
    pub iteration: usize,
    pub issue_class: IssueClass,
    pub patch_description: String,
    pub resulting_train_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeLogEntry {
    pub file: String,
    pub rule: String,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochHistory {
    pub epoch: usize,
    pub group: VariantGroup,
    pub code_changes: Vec<ChangeLogEntry>,
    pub refined_commands: Option<Vec<String>>,
    pub fix_attempts: Vec<FixAttempt>,
    pub baseline_train_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationHistory {
    pub epochs: Vec<EpochHistory>,
    pub lessons: LessonLedger,
    /// Every task id the optimizer consulted, for firewall audits.
    pub consulted_task_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub num_epochs: usize,
    pub group_size: usize,
    pub max_iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            num_epochs: 3,
            group_size: 3,
            max_iterations: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskEvaluationOutput {
    pub record: ExecutionRecord,
    pub score: TaskScore,
}

/// Executes and scores a package on train tasks; injected so the
/// optimizer is agnostic to real vs virtual mode (and instrumentable).
pub trait TrainRunner: Sync {
    fn evaluate(&self, pkg: &SkillPackage, tasks: &[Task]) -> Vec<TaskEvaluationOutput>;
}

pub fn mean_train_score(outputs: &[TaskEvaluationOutput]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    outputs.iter().map(|o| o.score.normalized).sum::<f64>() / outputs.len() as f64
}

const FALLBACK_SECTIONS: &[(&str, &str)] = &[
    (
        "Error Handling",
        "If a command fails, report the exact error message on stdout, verify input \
         paths and arguments, and retry once with corrected values. Preserve and save \
         any partial output file so progress is not lost.",
    ),
    (
        "Usage Examples",
        "Example: run the primary command on a small input and save the output file. \
         Example: request the result in JSON format and confirm the output file exists. \
         Expected output: a short status line followed by the saved result.",
    ),
    (
        "Troubleshooting",
        "Known limits: inputs past the maximum size are rejected with a clear error \
         message. If the output file is missing, check the working directory and \
         re-run. Verify error handling by passing an invalid input first.",
    ),
];

/// Candidate instruction rewrites. LLM-backed when the gateway answers;
/// the deterministic fallback appends one distinct section per variant,
/// cycling through the fixed section catalog.
pub fn propose_variants(
    base: &str,
    lessons: &LessonLedger,
    count: usize,
    gateway: Option<&Gateway>,
) -> Result<Vec<String>, OptimizerError> {
    if base.trim().is_empty() {
        return Err(OptimizerError::DegenerateBase);
    }
    if let Some(gw) = gateway {
        if let Some(variants) = propose_via_gateway(base, lessons, count, gw) {
            return Ok(variants);
        }
    }
    // Fallback: template transforms, one appended section per variant.
    let variants = (0..count)
        .map(|i| {
            let (title, body) = FALLBACK_SECTIONS[i % FALLBACK_SECTIONS.len()];
            let cycle = i / FALLBACK_SECTIONS.len();
            if cycle == 0 {
                format!("{base}\n## {title}\n{body}\n")
            } else {
                format!("{base}\n## {title} (revision {cycle})\n{body}\n")
            }
        })
        .collect();
    Ok(variants)
}

fn lesson_summary(lessons: &LessonLedger) -> String {
    lessons
        .recent_failures()
        .iter()
        .map(|e| {
            format!(
                "epoch {} variant {} (advantage {:.3}) failed: {}",
                e.epoch,
                e.variant_id,
                e.advantage,
                e.failed_criteria.join(", ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn propose_via_gateway(
    base: &str,
    lessons: &LessonLedger,
    count: usize,
    gw: &Gateway,
) -> Option<Vec<String>> {
    let req = CompletionRequest {
        system: format!(
            "Produce {count} improved rewrites of the skill instruction below. Address the \
             failure lessons. Reply with JSON: {{\"variants\": [\"...\"]}}."
        ),
        user: format!("Lessons:\n{}\n\nInstruction:\n{base}", lesson_summary(lessons)),
        schema_hint: Some(vec!["variants".to_string()]),
    };
    match gw.complete(&req) {
        CompletionResult::Text(text) => {
            #[derive(Deserialize)]
            struct Payload {
                variants: Vec<String>,
            }
            let payload: Payload = serde_json::from_str(&text).ok()?;
            let mut variants: Vec<String> = payload
                .variants
                .into_iter()
                .filter(|v| !v.trim().is_empty())
                .take(count)
                .collect();
            variants.dedup();
            if variants.len() == count {
                Some(variants)
            } else {
                None
            }
        }
        CompletionResult::Unavailable(_) => None,
    }
}

/// Group-relative advantages: z-scores under the population standard
/// deviation, all zero for a zero-variance group.
pub fn group_relative_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // Treat numerically-zero spread as zero variance: equal rewards can
    // yield a std on the order of f64 rounding noise.
    if std < 1e-12 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Index of the highest reward, lowest index on ties.
pub fn select_variant(group: &VariantGroup) -> usize {
    let mut best = 0;
    for (i, r) in group.rewards.iter().enumerate() {
        if *r > group.rewards[best] {
            best = i;
        }
    }
    best
}

const GUARD_MARKER: &str = "skillopt: exception-guard";
const VALIDATION_MARKER: &str = "skillopt: arg-validation";
const MEMO_MARKER: &str = "skillopt: memoized-read";

fn is_python(path: &str) -> bool {
    path.ends_with(".py")
}

fn is_shell(path: &str) -> bool {
    path.ends_with(".sh")
}

fn apply_exception_guard(path: &str, content: &str) -> Option<String> {
    if content.contains(GUARD_MARKER) {
        return None;
    }
    if is_python(path) {
        Some(format!(
            "# {GUARD_MARKER}\nimport sys as _skillopt_sys\ndef _skillopt_excepthook(_t, _v, _tb):\n    _skillopt_sys.stderr.write(\"error: %s\\n\" % _v)\n    _skillopt_sys.exit(1)\n_skillopt_sys.excepthook = _skillopt_excepthook\n{content}"
        ))
    } else if is_shell(path) {
        let (shebang, rest) = split_shebang(content);
        Some(format!("{shebang}# {GUARD_MARKER}\nset -u\n{rest}"))
    } else {
        None
    }
}

fn split_shebang(content: &str) -> (String, &str) {
    if content.starts_with("#!") {
        match content.find('\n') {
            Some(i) => (content[..=i].to_string(), &content[i + 1..]),
            None => (format!("{content}\n"), ""),
        }
    } else {
        (String::new(), content)
    }
}

fn apply_arg_validation(path: &str, content: &str) -> Option<String> {
    if content.contains(VALIDATION_MARKER) {
        return None;
    }
    if is_python(path) && content.contains("sys.argv") {
        Some(format!(
            "# {VALIDATION_MARKER}\nimport sys\nif len(sys.argv) < 2:\n    sys.stderr.write(\"usage: missing required argument\\n\")\n    raise SystemExit(2)\n{content}"
        ))
    } else if is_shell(path) && (content.contains("$1") || content.contains("${1")) {
        let (shebang, rest) = split_shebang(content);
        Some(format!(
            "{shebang}# {VALIDATION_MARKER}\n[ \"$#\" -ge 1 ] || {{ echo \"usage: missing required argument\" >&2; exit 2; }}\n{rest}"
        ))
    } else {
        None
    }
}

fn apply_memoized_reads(path: &str, content: &str) -> Option<String> {
    if content.contains(MEMO_MARKER) || !is_python(path) {
        return None;
    }
    let re = regex::Regex::new(r#"open\((['"][^'"]+['"])\)\.read\(\)"#).unwrap();
    let mut counts = std::collections::HashMap::new();
    for cap in re.captures_iter(content) {
        *counts.entry(cap[1].to_string()).or_insert(0usize) += 1;
    }
    if !counts.values().any(|&c| c >= 2) {
        return None;
    }
    let rewritten = re.replace_all(content, "_skillopt_cached_read($1)");
    Some(format!(
        "# {MEMO_MARKER}\nimport functools\n@functools.lru_cache(maxsize=None)\ndef _skillopt_cached_read(path):\n    with open(path) as _f:\n        return _f.read()\n{rewritten}"
    ))
}

/// Apply the fixed transform catalog to code files: exception guard,
/// argument-presence validation, memoized repeated reads. Each rule is
/// applied at most once per file (marker comments make re-application a
/// no-op) and every decision is logged.
pub fn apply_rule_optimizations(
    code_files: &[(String, String)],
) -> (Vec<(String, String)>, Vec<ChangeLogEntry>) {
    let rules: &[(&str, fn(&str, &str) -> Option<String>)] = &[
        ("exception_guard", apply_exception_guard),
        ("arg_validation", apply_arg_validation),
        ("memoize_reads", apply_memoized_reads),
    ];
    let mut out = Vec::with_capacity(code_files.len());
    let mut log = Vec::new();
    for (path, content) in code_files {
        let mut current = content.clone();
        for (rule, f) in rules {
            match f(path, &current) {
                Some(next) => {
                    current = next;
                    log.push(ChangeLogEntry {
                        file: path.clone(),
                        rule: rule.to_string(),
                        applied: true,
                    });
                }
                None => log.push(ChangeLogEntry {
                    file: path.clone(),
                    rule: rule.to_string(),
                    applied: false,
                }),
            }
        }
        out.push((path.clone(), current));
    }
    (out, log)
}

/// Normalize command paths against the package's file tree: a bare
/// script name that exists elsewhere in the tree (unique basename match)
/// is rewritten to its workspace-relative path. LLM refinement, when
/// available, runs on top and is discarded unless it preserves shape.
pub fn refine_commands(pkg: &SkillPackage, gateway: Option<&Gateway>) -> Vec<CommandSpec> {
    let normalized: Vec<CommandSpec> = pkg
        .commands
        .iter()
        .map(|cmd| {
            let args: Vec<String> = cmd
                .args
                .iter()
                .map(|arg| normalize_path_arg(arg, &pkg.code_files))
                .collect();
            let raw = std::iter::once(cmd.program.clone())
                .chain(args.iter().cloned())
                .collect::<Vec<_>>()
                .join(" ");
            CommandSpec {
                raw,
                program: cmd.program.clone(),
                args,
                source_block_index: cmd.source_block_index,
            }
        })
        .collect();

    if let Some(gw) = gateway {
        if let Some(refined) = refine_via_gateway(&normalized, pkg, gw) {
            return refined;
        }
    }
    normalized
}

fn normalize_path_arg(arg: &str, code_files: &[(String, String)]) -> String {
    if arg.starts_with('-') || arg.contains('/') {
        return arg.to_string();
    }
    if code_files.iter().any(|(p, _)| p == arg) {
        return arg.to_string();
    }
    let matches: Vec<&String> = code_files
        .iter()
        .map(|(p, _)| p)
        .filter(|p| p.rsplit('/').next() == Some(arg))
        .collect();
    match matches.as_slice() {
        [unique] => (*unique).clone(),
        _ => arg.to_string(),
    }
}

fn refine_via_gateway(
    commands: &[CommandSpec],
    pkg: &SkillPackage,
    gw: &Gateway,
) -> Option<Vec<CommandSpec>> {
    if commands.is_empty() {
        return None;
    }
    let listing: Vec<&str> = pkg.code_files.iter().map(|(p, _)| p.as_str()).collect();
    let req = CompletionRequest {
        system: format!(
            "Refine these commands: normalize paths against the file tree and add obviously \
             missing required flags named in the instruction. Keep one command per input \
             command. Reply with JSON: {{\"commands\": [\"...\"]}}. Files: {}",
            listing.join(", ")
        ),
        user: format!(
            "Commands:\n{}\n\nInstruction:\n{}",
            commands.iter().map(|c| c.raw.as_str()).collect::<Vec<_>>().join("\n"),
            pkg.instruction
        ),
        schema_hint: Some(vec!["commands".to_string()]),
    };
    match gw.complete(&req) {
        CompletionResult::Text(text) => {
            #[derive(Deserialize)]
            struct Payload {
                commands: Vec<String>,
            }
            let payload: Payload = serde_json::from_str(&text).ok()?;
            if payload.commands.len() != commands.len() {
                return None;
            }
            payload
                .commands
                .iter()
                .enumerate()
                .map(|(i, raw)| CommandSpec::from_line(raw, commands[i].source_block_index))
                .collect()
        }
        CompletionResult::Unavailable(_) => None,
    }
}

/// Classify one failure record from its stderr and error message.
pub fn classify_failure(record: &ExecutionRecord) -> IssueClass {
    let text = format!(
        "{}\n{}",
        record.stderr,
        record.error.as_ref().map(|e| e.message.as_str()).unwrap_or("")
    );
    let lower = text.to_lowercase();
    if lower.contains("modulenotfounderror")
        || lower.contains("importerror")
        || lower.contains("version conflict")
        || lower.contains("failed to spawn")
        || lower.contains("command not found")
    {
        IssueClass::DependencyConflict
    } else if lower.contains("usage:")
        || lower.contains("unrecognized")
        || lower.contains("invalid argument")
        || lower.contains("arguments are required")
        || lower.contains("missing required")
    {
        IssueClass::ParameterMisconfiguration
    } else if lower.contains("no such file or directory") || lower.contains("filenotfounderror") {
        IssueClass::PathError
    } else {
        IssueClass::Other
    }
}

static PATH_AFTER_ERROR: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
static ANY_PATH: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();

/// Both common stderr orders are handled: "No such file or directory:
/// <path>" (Python) and "<path>: No such file or directory" (shell).
fn missing_path_from(text: &str) -> Option<String> {
    let after = PATH_AFTER_ERROR.get_or_init(|| {
        regex::Regex::new(r"[Nn]o such file or directory:?\s*'?([\w./-]+)'?").unwrap()
    });
    if let Some(c) = after.captures(text) {
        return Some(c[1].to_string());
    }
    if !text.to_lowercase().contains("no such file or directory") {
        return None;
    }
    let any = ANY_PATH
        .get_or_init(|| regex::Regex::new(r"([\w.-]+(?:/[\w.-]+)+/?)").unwrap());
    any.captures(text).map(|c| c[1].to_string())
}

fn apply_patch(pkg: &mut SkillPackage, class: IssueClass, record: &ExecutionRecord) -> Option<String> {
    match class {
        IssueClass::PathError => {
            let text = format!(
                "{} {}",
                record.stderr,
                record.error.as_ref().map(|e| e.message.as_str()).unwrap_or("")
            );
            let path = missing_path_from(&text)?;
            let dir = if path.ends_with('/') {
                path.trim_end_matches('/').to_string()
            } else if std::path::Path::new(&path).extension().is_some() {
                std::path::Path::new(&path)
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())?
                    .to_string_lossy()
                    .to_string()
            } else {
                path.clone()
            };
            let setup = format!("mkdir -p {dir}");
            if pkg.commands.iter().any(|c| c.raw == setup) {
                return None;
            }
            pkg.commands.insert(0, CommandSpec::from_line(&setup, 0)?);
            Some(format!("prepended `{setup}` for missing path {path}"))
        }
        IssueClass::DependencyConflict => {
            // Guard bare imports of the missing module with a clear
            // diagnostic instead of a raw traceback.
            let module = regex::Regex::new(r"No module named '?(\w+)'?")
                .unwrap()
                .captures(&record.stderr)
                .map(|c| c[1].to_string())?;
            let mut patched = false;
            for (_, content) in pkg.code_files.iter_mut() {
                let needle = format!("import {module}");
                if content.contains(&needle) && !content.contains("skillopt: import-guard") {
                    *content = content.replace(
                        &needle,
                        &format!(
                            "# skillopt: import-guard\ntry:\n    import {module}\nexcept ImportError:\n    raise SystemExit(\"missing dependency: {module}\")"
                        ),
                    );
                    patched = true;
                }
            }
            patched.then(|| format!("guarded import of missing module {module}"))
        }
        IssueClass::ParameterMisconfiguration => {
            // Pull a fuller invocation of the same program from the
            // instruction, if one exists.
            let failing = pkg
                .commands
                .iter()
                .position(|c| record.error.as_ref().is_some_and(|e| e.message.contains(&c.raw)))?;
            let program = pkg.commands[failing].program.clone();
            let candidates = crate::skill::extract_commands(&pkg.instruction);
            let richer = candidates
                .into_iter()
                .find(|c| c.program == program && c.args.len() > pkg.commands[failing].args.len())?;
            let desc = format!(
                "replaced `{}` with fuller invocation `{}`",
                pkg.commands[failing].raw, richer.raw
            );
            pkg.commands[failing] = richer;
            Some(desc)
        }
        IssueClass::Other => None,
    }
}

/// Classify and patch failures, re-running the failing train tasks after
/// each patch, up to `max_iterations` rounds. Returns the best-scoring
/// intermediate package (never worse on train score than the input).
pub fn auto_fix(
    pkg: &SkillPackage,
    failures: &[ExecutionRecord],
    max_iterations: usize,
    train_tasks: &[Task],
    runner: &dyn TrainRunner,
) -> (SkillPackage, Vec<FixAttempt>) {
    assert!(!failures.is_empty(), "auto_fix requires failures");
    assert!(max_iterations >= 1);

    let failing_ids: Vec<&str> = failures.iter().map(|r| r.task_id.as_str()).collect();
    let failing_tasks: Vec<Task> = train_tasks
        .iter()
        .filter(|t| failing_ids.contains(&t.id.as_str()))
        .cloned()
        .collect();

    let baseline_score = mean_train_score(&runner.evaluate(pkg, train_tasks));
    let mut best = (pkg.clone(), baseline_score);
    let mut current = pkg.clone();
    let mut current_failures: Vec<ExecutionRecord> = failures.to_vec();
    let mut attempts = Vec::new();

    for iteration in 1..=max_iterations {
        let class = classify_failure(&current_failures[0]);
        let patch = apply_patch(&mut current, class, &current_failures[0]);
        let patch_description = match &patch {
            Some(d) => d.clone(),
            None => "no applicable patch for this failure class".to_string(),
        };
        let outputs = runner.evaluate(&current, train_tasks);
        let score = mean_train_score(&outputs);
        attempts.push(FixAttempt {
            iteration,
            issue_class: class,
            patch_description,
            resulting_train_score: score,
        });
        if score > best.1 {
            best = (current.clone(), score);
        }
        if patch.is_none() {
            break;
        }
        // Re-analyze: do the previously failing tasks still fail?
        let still_failing: Vec<ExecutionRecord> = outputs
            .iter()
            .filter(|o| {
                failing_tasks.iter().any(|t| t.id == o.record.task_id)
                    && (o.record.error.is_some() || !o.score.passed)
            })
            .map(|o| o.record.clone())
            .collect();
        if still_failing.is_empty() {
            break;
        }
        current_failures = still_failing;
    }
    (best.0, attempts)
}

/// Run the full epoch loop: instruction pathway every epoch, plus the
/// sequential code pathway for code-inclusive skills, each step rolled
/// back if it lowers the train score.
pub fn optimize_skill(
    pkg: &SkillPackage,
    train_tasks: &[Task],
    cfg: &OptimizerConfig,
    runner: &dyn TrainRunner,
    gateway: Option<&Gateway>,
) -> Result<(SkillPackage, OptimizationHistory), OptimizerError> {
    assert!(!train_tasks.is_empty(), "optimize_skill requires train tasks");
    assert!(cfg.group_size >= 2, "group size must admit the incumbent plus a proposal");

    let mut history = OptimizationHistory {
        consulted_task_ids: train_tasks.iter().map(|t| t.id.clone()).collect(),
        ..Default::default()
    };
    let mut baseline = pkg.clone();

    for epoch in 0..cfg.num_epochs {
        // Instruction pathway: variant 0 is always the unmodified
        // incumbent, so selection can never regress the baseline.
        let proposals = propose_variants(
            &baseline.instruction,
            &history.lessons,
            cfg.group_size - 1,
            gateway,
        )?;
        let mut variants: Vec<(String, String)> =
            vec![(format!("e{epoch}-v0"), baseline.instruction.clone())];
        for (i, text) in proposals.into_iter().enumerate() {
            variants.push((format!("e{epoch}-v{}", i + 1), text));
        }

        let mut rewards = Vec::with_capacity(variants.len());
        let mut failed_by_variant: Vec<Vec<String>> = Vec::with_capacity(variants.len());
        for (_, text) in &variants {
            // Instruction variants keep the incumbent's curated commands
            // and code files; only the text under evaluation changes.
            let mut candidate = baseline.clone();
            candidate.instruction = text.clone();
            let outputs = runner.evaluate(&candidate, train_tasks);
            rewards.push(mean_train_score(&outputs));
            let mut failed: Vec<String> = outputs
                .iter()
                .flat_map(|o| {
                    let task = train_tasks.iter().find(|t| t.id == o.record.task_id);
                    o.score
                        .per_criterion
                        .iter()
                        .filter(|c| !c.satisfied)
                        .filter_map(move |c| {
                            task.and_then(|t| t.criteria.get(c.criterion_index))
                                .map(|crit| format!("{:?} {}", crit.kind, crit.target))
                        })
                })
                .collect();
            failed.sort();
            failed.dedup();
            failed_by_variant.push(failed);
        }

        let advantages = group_relative_advantages(&rewards);
        let mut group = VariantGroup {
            base_instruction: baseline.instruction.clone(),
            variants: variants.clone(),
            rewards: rewards.clone(),
            advantages: advantages.clone(),
            selected: 0,
        };
        group.selected = select_variant(&group);

        for (i, (variant_id, _)) in variants.iter().enumerate() {
            history.lessons.append(LessonEntry {
                epoch,
                variant_id: variant_id.clone(),
                failed_criteria: failed_by_variant[i].clone(),
                advantage: advantages[i],
            });
        }

        baseline.instruction = variants[group.selected].1.clone();
        let mut baseline_score = rewards[group.selected];

        // Code pathway, sequential by priority with per-step rollback.
        let mut code_changes = Vec::new();
        let mut refined_commands = None;
        let mut fix_attempts = Vec::new();
        if baseline.skill_type == SkillType::CodeInclusive {
            let (new_files, log) = apply_rule_optimizations(&baseline.code_files);
            let mut candidate = baseline.clone();
            candidate.code_files = new_files;
            let score = mean_train_score(&runner.evaluate(&candidate, train_tasks));
            if score >= baseline_score {
                baseline = candidate;
                baseline_score = score;
                code_changes = log;
            } else {
                code_changes = log
                    .into_iter()
                    .map(|mut e| {
                        e.applied = false;
                        e.rule = format!("{} (rolled back)", e.rule);
                        e
                    })
                    .collect();
            }

            let refined = refine_commands(&baseline, gateway);
            if refined != baseline.commands {
                let mut candidate = baseline.clone();
                candidate.commands = refined.clone();
                let score = mean_train_score(&runner.evaluate(&candidate, train_tasks));
                if score >= baseline_score {
                    baseline = candidate;
                    baseline_score = score;
                    refined_commands = Some(refined.iter().map(|c| c.raw.clone()).collect());
                }
            }

            let outputs = runner.evaluate(&baseline, train_tasks);
            let failures: Vec<ExecutionRecord> = outputs
                .iter()
                .filter(|o| o.record.error.is_some())
                .map(|o| o.record.clone())
                .collect();
            if !failures.is_empty() {
                let (fixed, attempts) =
                    auto_fix(&baseline, &failures, cfg.max_iterations, train_tasks, runner);
                fix_attempts = attempts;
                let score = mean_train_score(&runner.evaluate(&fixed, train_tasks));
                if score >= baseline_score {
                    baseline = fixed;
                    baseline_score = score;
                }
            }
        }

        history.epochs.push(EpochHistory {
            epoch,
            group,
            code_changes,
            refined_commands,
            fix_attempts,
            baseline_train_score: baseline_score,
        });
    }

    Ok((baseline, history))
}
