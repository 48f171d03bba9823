use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use skillopt::evaluate::evaluate_instruction_heuristic;
use skillopt::exec::{ExecMode, Limits};
use skillopt::gateway::GatewayConfig;
use skillopt::pipeline::{
    persist_outcome, render_markdown, run_pipeline, PipelineConfig, RunMeta, RunReport,
};
use skillopt::rubric::builtin_rubric;
use skillopt::skill::{extract_capability_profile, parse_skill_package};
use skillopt::taskgen::{generate_task_suite, GenerationConfig};

#[derive(Parser)]
#[command(name = "skillopt", version, about = "Autonomous skill optimization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Skill package directory (contains SKILL.md or README.md).
    #[arg(long)]
    skill: PathBuf,
    /// Generation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Allow LLM calls; without this flag the run is fully offline.
    #[arg(long)]
    online: bool,
    /// Chat-completions endpoint (used only with --online).
    #[arg(long, default_value = "http://localhost:8000/v1/chat/completions")]
    endpoint: String,
    /// Model name sent to the provider.
    #[arg(long, default_value = skillopt::gateway::DEFAULT_MODEL)]
    model: String,
    /// Log LLM requests and responses to stderr.
    #[arg(long)]
    trace_llm: bool,
}

impl CommonOpts {
    fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            offline: !self.online,
            trace: self.trace_llm,
            ..Default::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full optimize-execute-evaluate-decide pipeline.
    Run {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory for the report tree.
        #[arg(long, default_value = "skillopt-out")]
        out: PathBuf,
        /// Execution mode: real subprocess runs or virtual simulation.
        #[arg(long, value_parser = parse_mode, default_value = "real")]
        mode: ExecMode,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 3)]
        group_size: usize,
        #[arg(long, default_value_t = 2)]
        max_iterations: usize,
        #[arg(long, default_value_t = 12)]
        train_count: usize,
        #[arg(long, default_value_t = 8)]
        test_count: usize,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        /// Per-command timeout in milliseconds.
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Generate and print the train/test task suite as JSON.
    GenerateTasks {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 12)]
        train_count: usize,
        #[arg(long, default_value_t = 8)]
        test_count: usize,
    },
    /// Score a skill's instruction against the built-in rubric.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Render report.md from an existing report.json.
    Report {
        /// Path to a report.json produced by `run`.
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<ExecMode, String> {
    match s {
        "real" => Ok(ExecMode::Real),
        "virtual" => Ok(ExecMode::Virtual),
        other => Err(format!("unknown mode {other:?}, expected real or virtual")),
    }
}

/// Print to stdout, treating a broken pipe (e.g. piping into `head`) as
/// a clean stop rather than a panic.
fn emit(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            common,
            out,
            mode,
            epochs,
            group_size,
            max_iterations,
            train_count,
            test_count,
            parallelism,
            timeout_ms,
        } => {
            let cfg = PipelineConfig {
                mode,
                seed: common.seed,
                train_count,
                test_count,
                epochs,
                group_size,
                max_iterations,
                parallelism,
                limits: Limits {
                    timeout_ms,
                    ..Default::default()
                },
                gateway: common.gateway_config(),
                ..Default::default()
            };
            let started = std::time::SystemTime::now();
            let outcome = run_pipeline(&common.skill, &cfg)?;
            let meta = RunMeta::between(started, std::time::SystemTime::now());
            persist_outcome(&outcome, &meta, &out)?;
            emit(&outcome.report.decision.justification)?;
            emit(&format!("report written to {}", out.display()))?;
        }
        Command::GenerateTasks {
            common,
            train_count,
            test_count,
        } => {
            let pkg = parse_skill_package(&common.skill)?;
            let profile = extract_capability_profile(&pkg);
            let suite = generate_task_suite(
                &profile,
                &pkg,
                &GenerationConfig {
                    train_count,
                    test_count,
                    seed: common.seed,
                },
                None,
            )?;
            emit(&serde_json::to_string_pretty(&suite)?)?;
        }
        Command::Evaluate { common } => {
            let pkg = parse_skill_package(&common.skill)?;
            let scores = evaluate_instruction_heuristic(&pkg.instruction, &builtin_rubric());
            emit(&serde_json::to_string_pretty(&scores)?)?;
        }
        Command::Report { input } => {
            let text = std::fs::read_to_string(&input)?;
            let report: RunReport = serde_json::from_str(&text)?;
            emit(&render_markdown(&report))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
