//! Task execution against a skill version: real mode runs commands in
//! isolated temporary workspaces with full capture; virtual mode
//! simulates criterion outcomes from keyword coverage and hash-derived
//! draws. Fan-out across tasks is rayon-backed when the `parallel`
//! feature is on.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::hash::{fnv1a64_hex, FrozenSeed};
use crate::skill::{SkillPackage, SkillType};
use crate::taskgen::{CheckWhere, Task};

pub const WORKSPACE_PREFIX: &str = "skillopt-ws-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecMode {
    Real,
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkillVersion {
    Original,
    Optimized,
    Variant(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecError {
    pub class: String,
    pub message: String,
    pub partial_output_preserved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub task_id: String,
    pub skill_version: SkillVersion,
    pub mode: ExecMode,
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    /// (relative path, byte size, hex FNV-1a digest) of files created or
    /// modified by the task.
    pub artifacts: Vec<(String, u64, String)>,
    /// Contents of output files named by the task's criteria, captured
    /// before the workspace is purged.
    pub captured_files: Vec<(String, String)>,
    pub duration_ms: u64,
    pub error: Option<ExecError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvReport {
    pub required: Vec<String>,
    pub present: Vec<String>,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualCriterionOutcome {
    pub criterion_index: usize,
    pub keyword_coverage: f64,
    pub draw: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualOutcome {
    pub task_id: String,
    pub per_criterion: Vec<VirtualCriterionOutcome>,
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub timeout_ms: u64,
    pub max_output_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            timeout_ms: 30_000,
            max_output_bytes: 1024 * 1024,
        }
    }
}

/// Virtual-mode pass probability: floor + slope * coverage, so outcomes
/// stay informative (never certain) while rewarding keyword coverage.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VirtualParams {
    pub floor: f64,
    pub slope: f64,
}

impl Default for VirtualParams {
    fn default() -> Self {
        VirtualParams {
            floor: 0.3,
            slope: 0.6,
        }
    }
}

impl VirtualParams {
    pub fn pass_probability(&self, coverage: f64) -> f64 {
        self.floor + self.slope * coverage
    }
}

fn interpreter_for_extension(ext: &str) -> Option<&'static str> {
    match ext {
        "py" => Some("python"),
        "sh" => Some("sh"),
        "js" | "ts" => Some("node"),
        "rb" => Some("ruby"),
        _ => None,
    }
}

fn program_on_path(program: &str) -> bool {
    if program.contains('/') {
        return Path::new(program).is_file();
    }
    std::env::var_os("PATH")
        .map(|paths| {
            std::env::split_paths(&paths).any(|dir| dir.join(program).is_file())
        })
        .unwrap_or(false)
}

/// Required programs are the distinct command programs plus interpreters
/// implied by code-file extensions; presence is a PATH lookup, nothing
/// is installed.
pub fn check_environment(pkg: &SkillPackage) -> EnvReport {
    let mut required: Vec<String> = Vec::new();
    for cmd in &pkg.commands {
        if !required.contains(&cmd.program) {
            required.push(cmd.program.clone());
        }
    }
    for (path, _) in &pkg.code_files {
        if let Some(ext) = Path::new(path).extension().and_then(|e| e.to_str()) {
            if let Some(interp) = interpreter_for_extension(ext) {
                if !required.contains(&interp.to_string()) {
                    required.push(interp.to_string());
                }
            }
        }
    }
    let (present, missing): (Vec<String>, Vec<String>) =
        required.iter().cloned().partition(|p| program_on_path(p));
    EnvReport {
        required,
        present,
        missing,
    }
}

fn write_workspace(ws: &Path, pkg: &SkillPackage, task: &Task) -> std::io::Result<()> {
    let write = |rel: &str, content: &str| -> std::io::Result<()> {
        let p = ws.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(p, content)
    };
    write("SKILL.md", &pkg.instruction)?;
    for (rel, content) in &pkg.auxiliary_docs {
        write(rel, content)?;
    }
    for (rel, content) in &pkg.code_files {
        write(rel, content)?;
    }
    for (rel, content) in &task.context {
        write(rel, content)?;
    }
    Ok(())
}

fn snapshot(ws: &Path) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for entry in walkdir::WalkDir::new(ws).into_iter().filter_map(|e| e.ok()) {
        if entry.file_type().is_file() {
            let rel = entry
                .path()
                .strip_prefix(ws)
                .unwrap()
                .to_string_lossy()
                .replace('\\', "/");
            if let Ok(bytes) = std::fs::read(entry.path()) {
                map.insert(rel, fnv1a64_hex(&bytes));
            }
        }
    }
    map
}

struct CommandOutcome {
    exit_code: Option<i32>,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    error: Option<ExecError>,
}

/// Run one command with capped capture and a wall-clock timeout; on
/// timeout the child is killed and partial output preserved.
fn run_command(
    program: &str,
    args: &[String],
    cwd: &Path,
    limits: &Limits,
) -> CommandOutcome {
    let spawned = Command::new(program)
        .args(args)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => {
            return CommandOutcome {
                exit_code: None,
                stdout: Vec::new(),
                stderr: Vec::new(),
                error: Some(ExecError {
                    class: "SpawnError".to_string(),
                    message: format!("failed to spawn {program}: {e}"),
                    partial_output_preserved: false,
                }),
            }
        }
    };

    let cap = limits.max_output_bytes;
    let collect = |stream: Option<Box<dyn Read + Send>>| -> Arc<Mutex<Vec<u8>>> {
        let buf = Arc::new(Mutex::new(Vec::new()));
        if let Some(mut stream) = stream {
            let buf = buf.clone();
            std::thread::spawn(move || {
                let mut chunk = [0u8; 8192];
                loop {
                    match stream.read(&mut chunk) {
                        Ok(0) | Err(_) => break,
                        Ok(n) => {
                            let mut b = buf.lock().unwrap();
                            if b.len() < cap {
                                let take = n.min(cap - b.len());
                                b.extend_from_slice(&chunk[..take]);
                            }
                        }
                    }
                }
            });
        }
        buf
    };
    let stdout_buf = collect(child.stdout.take().map(|s| Box::new(s) as _));
    let stderr_buf = collect(child.stderr.take().map(|s| Box::new(s) as _));

    let deadline = Instant::now() + Duration::from_millis(limits.timeout_ms);
    let mut timed_out = false;
    let exit_code = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status.code(),
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    timed_out = true;
                    break None;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => break None,
        }
    };
    // Give reader threads a moment to drain after exit.
    std::thread::sleep(Duration::from_millis(10));

    let stdout = stdout_buf.lock().unwrap().clone();
    let stderr = stderr_buf.lock().unwrap().clone();
    let error = if timed_out {
        Some(ExecError {
            class: "Timeout".to_string(),
            message: format!("{program} exceeded {} ms", limits.timeout_ms),
            partial_output_preserved: true,
        })
    } else {
        None
    };
    CommandOutcome {
        exit_code,
        stdout,
        stderr,
        error,
    }
}

fn truncate_utf8(bytes: &[u8], cap: usize) -> (String, bool) {
    let truncated = bytes.len() >= cap;
    (String::from_utf8_lossy(bytes).into_owned(), truncated)
}

/// Execute one task against a skill in a fresh exclusive temporary
/// workspace. Commands run in instruction order; the first nonzero exit
/// short-circuits. All failures become error-bearing records.
pub fn execute_task_real(pkg: &SkillPackage, task: &Task, limits: &Limits) -> ExecutionRecord {
    let started = Instant::now();

    if pkg.skill_type == SkillType::InstructionOnly || pkg.commands.is_empty() {
        // Document-quality evaluation path: the record carries the
        // instruction itself so stdout criteria stay well-defined.
        return ExecutionRecord {
            task_id: task.id.clone(),
            skill_version: SkillVersion::Original,
            mode: ExecMode::Real,
            exit_code: Some(0),
            stdout: pkg.instruction.clone(),
            stderr: String::new(),
            stdout_truncated: false,
            stderr_truncated: false,
            artifacts: Vec::new(),
            captured_files: Vec::new(),
            duration_ms: started.elapsed().as_millis() as u64,
            error: None,
        };
    }

    let workspace = match tempfile::Builder::new().prefix(WORKSPACE_PREFIX).tempdir() {
        Ok(ws) => ws,
        Err(e) => {
            return error_record(task, started, "WorkspaceError", &e.to_string());
        }
    };
    if let Err(e) = write_workspace(workspace.path(), pkg, task) {
        return error_record(task, started, "WorkspaceError", &e.to_string());
    }
    let before = snapshot(workspace.path());

    let mut stdout_all = Vec::new();
    let mut stderr_all = Vec::new();
    let mut exit_code = Some(0);
    let mut error = None;
    for cmd in &pkg.commands {
        let outcome = run_command(&cmd.program, &cmd.args, workspace.path(), limits);
        stdout_all.extend_from_slice(&outcome.stdout);
        stderr_all.extend_from_slice(&outcome.stderr);
        exit_code = outcome.exit_code;
        if let Some(e) = outcome.error {
            error = Some(e);
            break;
        }
        match outcome.exit_code {
            Some(0) => {}
            Some(code) => {
                error = Some(ExecError {
                    class: "CommandFailed".to_string(),
                    message: format!("`{}` exited with code {code}", cmd.raw),
                    partial_output_preserved: true,
                });
                break;
            }
            None => {
                error = Some(ExecError {
                    class: "CommandFailed".to_string(),
                    message: format!("`{}` terminated by signal", cmd.raw),
                    partial_output_preserved: true,
                });
                break;
            }
        }
    }

    let after = snapshot(workspace.path());
    let mut artifacts = Vec::new();
    for (rel, digest) in &after {
        if before.get(rel) != Some(digest) {
            let size = std::fs::metadata(workspace.path().join(rel))
                .map(|m| m.len())
                .unwrap_or(0);
            artifacts.push((rel.clone(), size, digest.clone()));
        }
    }

    let mut captured_files = Vec::new();
    for criterion in &task.criteria {
        if let CheckWhere::OutputFile(path) = &criterion.location {
            let p = workspace.path().join(path);
            if p.is_file() {
                if let Ok(content) = std::fs::read(&p) {
                    let (text, _) = truncate_utf8(&content, limits.max_output_bytes);
                    if !captured_files.iter().any(|(existing, _)| existing == path) {
                        captured_files.push((path.clone(), text));
                    }
                }
            }
        }
    }

    let (stdout, stdout_truncated) = truncate_utf8(&stdout_all, limits.max_output_bytes);
    let (stderr, stderr_truncated) = truncate_utf8(&stderr_all, limits.max_output_bytes);
    // TempDir drop purges the workspace before this record is returned.
    drop(workspace);

    ExecutionRecord {
        task_id: task.id.clone(),
        skill_version: SkillVersion::Original,
        mode: ExecMode::Real,
        exit_code,
        stdout,
        stderr,
        stdout_truncated,
        stderr_truncated,
        artifacts,
        captured_files,
        duration_ms: started.elapsed().as_millis() as u64,
        error,
    }
}

fn error_record(task: &Task, started: Instant, class: &str, message: &str) -> ExecutionRecord {
    ExecutionRecord {
        task_id: task.id.clone(),
        skill_version: SkillVersion::Original,
        mode: ExecMode::Real,
        exit_code: None,
        stdout: String::new(),
        stderr: String::new(),
        stdout_truncated: false,
        stderr_truncated: false,
        artifacts: Vec::new(),
        captured_files: Vec::new(),
        duration_ms: started.elapsed().as_millis() as u64,
        error: Some(ExecError {
            class: class.to_string(),
            message: message.to_string(),
            partial_output_preserved: false,
        }),
    }
}

/// Simulate one task: per criterion, keyword coverage over the CURRENT
/// instruction, paired with a draw that depends only on
/// (frozen_seed, task id, criterion index).
pub fn execute_task_virtual(
    frozen_seed: FrozenSeed,
    instruction: &str,
    task: &Task,
    params: &VirtualParams,
) -> (ExecutionRecord, VirtualOutcome) {
    let lower = instruction.to_lowercase();
    let mut per_criterion = Vec::with_capacity(task.criteria.len());
    let mut stdout = String::new();
    for (i, criterion) in task.criteria.iter().enumerate() {
        let coverage = if criterion.keywords.is_empty() {
            0.0
        } else {
            let hits = criterion
                .keywords
                .iter()
                .filter(|k| lower.contains(k.to_lowercase().as_str()))
                .count();
            hits as f64 / criterion.keywords.len() as f64
        };
        let draw = frozen_seed.draw(&task.id, i);
        let passed = draw < params.pass_probability(coverage);
        stdout.push_str(&format!(
            "criterion {i}: coverage {coverage:.4} draw {draw:.6} {}\n",
            if passed { "pass" } else { "fail" }
        ));
        per_criterion.push(VirtualCriterionOutcome {
            criterion_index: i,
            keyword_coverage: coverage,
            draw,
            passed,
        });
    }
    let record = ExecutionRecord {
        task_id: task.id.clone(),
        skill_version: SkillVersion::Original,
        mode: ExecMode::Virtual,
        exit_code: None,
        stdout,
        stderr: String::new(),
        stdout_truncated: false,
        stderr_truncated: false,
        artifacts: Vec::new(),
        captured_files: Vec::new(),
        duration_ms: 0,
        error: None,
    };
    (
        record,
        VirtualOutcome {
            task_id: task.id.clone(),
            per_criterion,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRunOutput {
    pub record: ExecutionRecord,
    pub virtual_outcome: Option<VirtualOutcome>,
}

/// Execute one task against one skill version in the given mode.
pub fn execute_task(
    pkg: &SkillPackage,
    task: &Task,
    version: SkillVersion,
    mode: ExecMode,
    limits: &Limits,
    frozen_seed: FrozenSeed,
    params: &VirtualParams,
) -> TaskRunOutput {
    match mode {
        ExecMode::Real => {
            let mut record = execute_task_real(pkg, task, limits);
            record.skill_version = version;
            TaskRunOutput {
                record,
                virtual_outcome: None,
            }
        }
        ExecMode::Virtual => {
            let (mut record, outcome) =
                execute_task_virtual(frozen_seed, &pkg.instruction, task, params);
            record.skill_version = version;
            TaskRunOutput {
                record,
                virtual_outcome: Some(outcome),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total_tasks: usize,
    pub original_successes: usize,
    pub optimized_successes: usize,
    /// Environment-variable policy note recorded in the run log header.
    pub environment_policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparativeRunLog {
    pub runs: Vec<TaskRunOutput>,
    pub summary: RunSummary,
}

impl ComparativeRunLog {
    pub fn records(&self) -> impl Iterator<Item = &ExecutionRecord> {
        self.runs.iter().map(|r| &r.record)
    }

    pub fn records_for(&self, version: &SkillVersion) -> Vec<&ExecutionRecord> {
        self.runs
            .iter()
            .map(|r| &r.record)
            .filter(|r| &r.skill_version == version)
            .collect()
    }

    pub fn outcome_for(&self, version: &SkillVersion, task_id: &str) -> Option<&VirtualOutcome> {
        self.runs
            .iter()
            .find(|r| &r.record.skill_version == version && r.record.task_id == task_id)
            .and_then(|r| r.virtual_outcome.as_ref())
    }
}

fn run_one_task(
    original: &SkillPackage,
    optimized: &SkillPackage,
    task: &Task,
    mode: ExecMode,
    limits: &Limits,
    frozen_seed: FrozenSeed,
    params: &VirtualParams,
) -> [TaskRunOutput; 2] {
    // Original then Optimized, sequential within a task.
    let a = execute_task(
        original,
        task,
        SkillVersion::Original,
        mode,
        limits,
        frozen_seed,
        params,
    );
    let b = execute_task(
        optimized,
        task,
        SkillVersion::Optimized,
        mode,
        limits,
        frozen_seed,
        params,
    );
    [a, b]
}

/// Run both versions over the test set, fanning tasks out across up to
/// `parallelism` workers. Produces exactly 2 × |tasks| records keyed by
/// (task id, version); no scoring happens here.
pub fn run_comparative(
    original: &SkillPackage,
    optimized: &SkillPackage,
    tasks: &[Task],
    mode: ExecMode,
    parallelism: usize,
    limits: &Limits,
    frozen_seed: FrozenSeed,
    params: &VirtualParams,
) -> ComparativeRunLog {
    let mut runs: Vec<TaskRunOutput> =
        fan_out(tasks, parallelism, |task| {
            run_one_task(original, optimized, task, mode, limits, frozen_seed, params)
        })
        .into_iter()
        .flatten()
        .collect();
    // Linearized, order-independent aggregation.
    runs.sort_by(|a, b| {
        (&a.record.task_id, &a.record.skill_version)
            .cmp(&(&b.record.task_id, &b.record.skill_version))
    });

    let successes = |v: &SkillVersion| {
        runs.iter()
            .filter(|r| &r.record.skill_version == v && r.record.error.is_none())
            .count()
    };
    let summary = RunSummary {
        total_tasks: tasks.len(),
        original_successes: successes(&SkillVersion::Original),
        optimized_successes: successes(&SkillVersion::Optimized),
        environment_policy: "parent environment variables passed through unchanged".to_string(),
    };
    ComparativeRunLog { runs, summary }
}

#[cfg(feature = "parallel")]
fn fan_out<T: Send, F: Fn(&Task) -> T + Sync>(
    tasks: &[Task],
    parallelism: usize,
    f: F,
) -> Vec<T> {
    use rayon::prelude::*;
    if parallelism <= 1 {
        return tasks.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .expect("thread pool");
    pool.install(|| tasks.par_iter().map(|t| f(t)).collect())
}

#[cfg(not(feature = "parallel"))]
fn fan_out<T: Send, F: Fn(&Task) -> T + Sync>(
    tasks: &[Task],
    _parallelism: usize,
    f: F,
) -> Vec<T> {
    tasks.iter().map(f).collect()
}
