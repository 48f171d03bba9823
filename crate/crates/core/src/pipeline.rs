//! End-to-end orchestration: parse, generate tasks, optimize on the
//! train split, execute both versions on the held-out test split, score,
//! decide, and persist a traceable report tree.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{
    compute_metrics, decide_retention, evaluate_instruction_heuristic, evaluate_instruction_llm,
    evaluate_task, Decision, DimensionScores, MetricsSummary, TaskScore, Verdict,
};
use crate::exec::{
    check_environment, execute_task, run_comparative, ComparativeRunLog, EnvReport, ExecMode,
    Limits, SkillVersion, VirtualParams,
};
use crate::gateway::{Gateway, GatewayConfig};
use crate::hash::{fnv1a64_hex, FrozenSeed};
use crate::optimizer::{
    optimize_skill, OptimizationHistory, OptimizerConfig, OptimizerError, TaskEvaluationOutput,
    TrainRunner,
};
use crate::rubric::{builtin_rubric, Rubric};
use crate::skill::{extract_capability_profile, parse_skill_package, SkillError, SkillPackage};
use crate::taskgen::{
    generate_task_suite, verify_isolation, GenerationConfig, Task, TaskGenError, TaskSuite, Tier,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: ExecMode,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub epochs: usize,
    pub group_size: usize,
    pub max_iterations: usize,
    pub parallelism: usize,
    pub limits: Limits,
    pub virtual_params: VirtualParams,
    pub gateway: GatewayConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: ExecMode::Real,
            seed: 0,
            train_count: 12,
            test_count: 8,
            epochs: 3,
            group_size: 3,
            max_iterations: 2,
            parallelism: 4,
            limits: Limits::default(),
            virtual_params: VirtualParams::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

/// The configuration as embedded in report.json: a flat, serializable
/// snapshot of everything that influenced the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub mode: ExecMode,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub epochs: usize,
    pub group_size: usize,
    pub max_iterations: usize,
    pub parallelism: usize,
    pub timeout_ms: u64,
    pub max_output_bytes: usize,
    pub virtual_floor: f64,
    pub virtual_slope: f64,
    pub model: String,
    pub offline: bool,
}

impl PipelineConfig {
    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            mode: self.mode,
            seed: self.seed,
            train_count: self.train_count,
            test_count: self.test_count,
            epochs: self.epochs,
            group_size: self.group_size,
            max_iterations: self.max_iterations,
            parallelism: self.parallelism,
            timeout_ms: self.limits.timeout_ms,
            max_output_bytes: self.limits.max_output_bytes,
            virtual_floor: self.virtual_params.floor,
            virtual_slope: self.virtual_params.slope,
            model: self.gateway.model.clone(),
            offline: self.gateway.offline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTaskScore {
    pub task_id: String,
    pub tier: Tier,
    pub capability_area: String,
    pub original_score: f64,
    pub original_passed: bool,
    pub optimized_score: f64,
    pub optimized_passed: bool,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryArea {
    pub area: String,
    pub task_count: usize,
    pub original_average: f64,
    pub optimized_average: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub skill_name: String,
    pub original_instruction_digest: String,
    pub optimized_instruction_digest: String,
    pub config: ConfigSnapshot,
    pub environment: EnvReport,
    pub isolation_violations: Vec<String>,
    pub original_metrics: MetricsSummary,
    pub optimized_metrics: MetricsSummary,
    pub original_quality: DimensionScores,
    pub optimized_quality: DimensionScores,
    pub per_task: Vec<PairedTaskScore>,
    pub boundary_analysis: Vec<BoundaryArea>,
    pub decision: Decision,
    pub warnings: Vec<String>,
}

/// Everything a run produces, before persistence.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: RunReport,
    pub suite: TaskSuite,
    pub history: OptimizationHistory,
    pub log: ComparativeRunLog,
    pub original: SkillPackage,
    pub optimized: SkillPackage,
}

/// Executes and scores candidate packages on the tasks it is handed;
/// the optimizer only ever hands it the train split.
pub struct PipelineRunner<'a> {
    cfg: &'a PipelineConfig,
    rubric: &'a Rubric,
    frozen_seed: FrozenSeed,
}

impl<'a> PipelineRunner<'a> {
    pub fn new(cfg: &'a PipelineConfig, rubric: &'a Rubric, frozen_seed: FrozenSeed) -> Self {
        PipelineRunner {
            cfg,
            rubric,
            frozen_seed,
        }
    }
}

impl TrainRunner for PipelineRunner<'_> {
    fn evaluate(&self, pkg: &SkillPackage, tasks: &[Task]) -> Vec<TaskEvaluationOutput> {
        tasks
            .iter()
            .map(|task| {
                let out = execute_task(
                    pkg,
                    task,
                    SkillVersion::Variant("candidate".to_string()),
                    self.cfg.mode,
                    &self.cfg.limits,
                    self.frozen_seed,
                    &self.cfg.virtual_params,
                );
                let score =
                    evaluate_task(&out.record, task, self.rubric, out.virtual_outcome.as_ref());
                TaskEvaluationOutput {
                    record: out.record,
                    score,
                }
            })
            .collect()
    }
}

fn score_version(
    log: &ComparativeRunLog,
    version: &SkillVersion,
    tasks: &[Task],
    rubric: &Rubric,
) -> Vec<TaskScore> {
    tasks
        .iter()
        .filter_map(|task| {
            let record = log
                .records()
                .find(|r| &r.skill_version == version && r.task_id == task.id)?;
            let outcome = log.outcome_for(version, &task.id);
            Some(evaluate_task(record, task, rubric, outcome))
        })
        .collect()
}

fn instruction_quality(
    instruction: &str,
    rubric: &Rubric,
    gateway: Option<&Gateway>,
) -> DimensionScores {
    match gateway {
        Some(gw) if !gw.is_offline() => evaluate_instruction_llm(instruction, rubric, gw),
        _ => evaluate_instruction_heuristic(instruction, rubric),
    }
}

fn boundary_analysis(tasks: &[Task], paired: &[PairedTaskScore]) -> Vec<BoundaryArea> {
    let mut areas: Vec<String> = tasks.iter().map(|t| t.capability_area.clone()).collect();
    areas.sort();
    areas.dedup();
    areas
        .into_iter()
        .map(|area| {
            let rows: Vec<&PairedTaskScore> = paired
                .iter()
                .filter(|p| p.capability_area == area)
                .collect();
            let n = rows.len().max(1) as f64;
            let original_average = rows.iter().map(|p| p.original_score).sum::<f64>() / n;
            let optimized_average = rows.iter().map(|p| p.optimized_score).sum::<f64>() / n;
            BoundaryArea {
                area,
                task_count: rows.len(),
                original_average,
                optimized_average,
                delta: optimized_average - original_average,
            }
        })
        .collect()
}

/// Execute both versions on the held-out test split and assemble the
/// full report. Exposed separately from `run_pipeline` so a candidate
/// package from any source (including a deliberately broken one) flows
/// through the same comparison machinery.
pub fn compare_and_report(
    original: &SkillPackage,
    optimized: &SkillPackage,
    suite: &TaskSuite,
    cfg: &PipelineConfig,
    gateway: Option<&Gateway>,
    extra_warnings: Vec<String>,
) -> (RunReport, ComparativeRunLog) {
    let rubric = builtin_rubric();
    // Common random numbers: virtual draws are keyed to the ORIGINAL
    // instruction so both versions face identical stochastic conditions.
    let frozen_seed = FrozenSeed::from_instruction(&original.instruction);
    let log = run_comparative(
        original,
        optimized,
        &suite.test,
        cfg.mode,
        cfg.parallelism,
        &cfg.limits,
        frozen_seed,
        &cfg.virtual_params,
    );

    let original_scores = score_version(&log, &SkillVersion::Original, &suite.test, &rubric);
    let optimized_scores = score_version(&log, &SkillVersion::Optimized, &suite.test, &rubric);

    let original_records: Vec<_> = log
        .records_for(&SkillVersion::Original)
        .into_iter()
        .cloned()
        .collect();
    let optimized_records: Vec<_> = log
        .records_for(&SkillVersion::Optimized)
        .into_iter()
        .cloned()
        .collect();
    let original_metrics = compute_metrics(&original_scores, &original_records);
    let optimized_metrics = compute_metrics(&optimized_scores, &optimized_records);

    let per_task: Vec<PairedTaskScore> = suite
        .test
        .iter()
        .filter_map(|task| {
            let o = original_scores.iter().find(|s| s.task_id == task.id)?;
            let n = optimized_scores.iter().find(|s| s.task_id == task.id)?;
            Some(PairedTaskScore {
                task_id: task.id.clone(),
                tier: task.tier,
                capability_area: task.capability_area.clone(),
                original_score: o.normalized,
                original_passed: o.passed,
                optimized_score: n.normalized,
                optimized_passed: n.passed,
                delta: n.normalized - o.normalized,
            })
        })
        .collect();

    let decision = decide_retention(
        &original_metrics,
        &optimized_metrics,
        vec![
            "report.json#/per_task".to_string(),
            "execution.log.jsonl".to_string(),
        ],
    );

    let mut warnings = original.warnings.clone();
    warnings.extend(extra_warnings);

    let boundary = boundary_analysis(&suite.test, &per_task);
    let report = RunReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        skill_name: original.name.clone(),
        original_instruction_digest: fnv1a64_hex(original.instruction.as_bytes()),
        optimized_instruction_digest: fnv1a64_hex(optimized.instruction.as_bytes()),
        config: cfg.snapshot(),
        environment: check_environment(original),
        isolation_violations: verify_isolation(suite),
        original_metrics,
        optimized_metrics,
        original_quality: instruction_quality(&original.instruction, &rubric, gateway),
        optimized_quality: instruction_quality(&optimized.instruction, &rubric, gateway),
        per_task,
        boundary_analysis: boundary,
        decision,
        warnings,
    };
    (report, log)
}

/// Run the whole pipeline on a skill directory.
pub fn run_pipeline(skill_dir: &Path, cfg: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    let gateway = if cfg.gateway.offline {
        None
    } else {
        Some(Gateway::new(cfg.gateway.clone()))
    };
    run_pipeline_with(skill_dir, cfg, gateway.as_ref())
}

/// As `run_pipeline`, with an injected gateway (tests swap in a
/// recording transport here).
pub fn run_pipeline_with(
    skill_dir: &Path,
    cfg: &PipelineConfig,
    gateway: Option<&Gateway>,
) -> Result<PipelineOutcome, PipelineError> {
    let pkg = parse_skill_package(skill_dir)?;
    let profile = extract_capability_profile(&pkg);
    let suite = generate_task_suite(
        &profile,
        &pkg,
        &GenerationConfig {
            train_count: cfg.train_count,
            test_count: cfg.test_count,
            seed: cfg.seed,
        },
        gateway,
    )?;

    let rubric = builtin_rubric();
    let frozen_seed = FrozenSeed::from_instruction(&pkg.instruction);
    let runner = PipelineRunner::new(cfg, &rubric, frozen_seed);
    let (optimized, history) = optimize_skill(
        &pkg,
        &suite.train,
        &OptimizerConfig {
            num_epochs: cfg.epochs,
            group_size: cfg.group_size,
            max_iterations: cfg.max_iterations,
        },
        &runner,
        gateway,
    )?;

    let (report, log) = compare_and_report(&pkg, &optimized, &suite, cfg, gateway, Vec::new());
    Ok(PipelineOutcome {
        report,
        suite,
        history,
        log,
        original: pkg,
        optimized,
    })
}

/// Wall-clock metadata, kept out of report.json so the report stays
/// byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub duration_ms: u128,
}

impl RunMeta {
    pub fn between(started: std::time::SystemTime, finished: std::time::SystemTime) -> Self {
        let to_ms = |t: std::time::SystemTime| {
            t.duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0)
        };
        let (s, f) = (to_ms(started), to_ms(finished));
        RunMeta {
            started_unix_ms: s,
            finished_unix_ms: f,
            duration_ms: f.saturating_sub(s),
        }
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, content).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Render the human-readable side-by-side comparison.
pub fn render_markdown(report: &RunReport) -> String {
    let fmt_opt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    };
    let o = &report.original_metrics;
    let n = &report.optimized_metrics;
    let mut md = String::new();
    md.push_str(&format!("# Skill Optimization Report: {}\n\n", report.skill_name));
    md.push_str(&format!(
        "Decision: **{:?}**\n\n{}\n\n",
        report.decision.verdict, report.decision.justification
    ));
    md.push_str("## Metrics\n\n");
    md.push_str("| Metric | Original | Optimized | Improvement |\n");
    md.push_str("|---|---|---|---|\n");
    md.push_str(&format!(
        "| Average score | {:.4} | {:.4} | {:+.4} |\n",
        o.average_score,
        n.average_score,
        n.average_score - o.average_score
    ));
    md.push_str(&format!(
        "| Pass rate | {:.4} | {:.4} | {:+.4} |\n",
        o.pass_rate,
        n.pass_rate,
        n.pass_rate - o.pass_rate
    ));
    md.push_str(&format!(
        "| Standard-tier score | {} | {} | |\n",
        fmt_opt(o.standard_score),
        fmt_opt(n.standard_score)
    ));
    md.push_str(&format!(
        "| Advanced-tier score | {} | {} | |\n",
        fmt_opt(o.advanced_score),
        fmt_opt(n.advanced_score)
    ));
    md.push_str(&format!(
        "| Error rate | {:.4} | {:.4} | |\n\n",
        o.error_rate, n.error_rate
    ));
    md.push_str("## Per-task results\n\n");
    md.push_str("| Task | Tier | Original | Optimized | Delta |\n");
    md.push_str("|---|---|---|---|---|\n");
    for p in &report.per_task {
        md.push_str(&format!(
            "| {} | {:?} | {:.4} | {:.4} | {:+.4} |\n",
            p.task_id, p.tier, p.original_score, p.optimized_score, p.delta
        ));
    }
    md.push_str("\n## Capability-area analysis\n\n");
    md.push_str("| Area | Tasks | Original | Optimized | Delta |\n");
    md.push_str("|---|---|---|---|---|\n");
    for b in &report.boundary_analysis {
        let area = if b.area.chars().count() > 60 {
            let truncated: String = b.area.chars().take(59).collect();
            format!("{truncated}…")
        } else {
            b.area.clone()
        };
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:+.4} |\n",
            area, b.task_count, b.original_average, b.optimized_average, b.delta
        ));
    }
    if !report.warnings.is_empty() {
        md.push_str("\n## Warnings\n\n");
        for w in &report.warnings {
            md.push_str(&format!("- {w}\n"));
        }
    }
    md
}

/// Persist the full output tree: report.json, report.md, run.meta.json,
/// tasks.json, execution.log.jsonl, history.json, and (on Retain) the
/// optimized skill under optimized/.
pub fn persist_outcome(
    outcome: &PipelineOutcome,
    meta: &RunMeta,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    write_file(
        &out_dir.join("report.json"),
        &serde_json::to_string_pretty(&outcome.report)?,
    )?;
    write_file(&out_dir.join("report.md"), &render_markdown(&outcome.report))?;
    write_file(
        &out_dir.join("run.meta.json"),
        &serde_json::to_string_pretty(meta)?,
    )?;
    write_file(
        &out_dir.join("tasks.json"),
        &serde_json::to_string_pretty(&outcome.suite)?,
    )?;
    let mut log_lines = vec![serde_json::to_string(&outcome.log.summary)?];
    for run in &outcome.log.runs {
        log_lines.push(serde_json::to_string(run)?);
    }
    log_lines.push(String::new());
    write_file(&out_dir.join("execution.log.jsonl"), &log_lines.join("\n"))?;
    write_file(
        &out_dir.join("history.json"),
        &serde_json::to_string_pretty(&outcome.history)?,
    )?;

    if outcome.report.decision.verdict == Verdict::Retain {
        let opt_dir = out_dir.join("optimized");
        write_file(&opt_dir.join("SKILL.md"), &outcome.optimized.instruction)?;
        for (rel, content) in &outcome.optimized.code_files {
            write_file(&opt_dir.join(rel), content)?;
        }
        for (rel, content) in &outcome.optimized.auxiliary_docs {
            write_file(&opt_dir.join(rel), content)?;
        }
    }
    Ok(())
}
