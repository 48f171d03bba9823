//! Autonomous skill optimization pipeline: parse an agent skill package,
//! generate a deterministic train/test task suite, improve the skill via
//! group-relative instruction selection plus code transforms, execute
//! original vs optimized on held-out tasks, and decide retain-or-discard
//! with a traceable report.

pub mod evaluate;
pub mod exec;
pub mod gateway;
pub mod hash;
pub mod optimizer;
pub mod pipeline;
pub mod rubric;
pub mod skill;
pub mod taskgen;

pub use evaluate::{compute_metrics, decide_retention, Decision, MetricsSummary, Verdict};
pub use exec::{ExecMode, ExecutionRecord, SkillVersion};
pub use hash::FrozenSeed;
pub use optimizer::{optimize_skill, OptimizationHistory, OptimizerConfig};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineError, RunReport};
pub use rubric::{builtin_rubric, Rubric};
pub use skill::{parse_skill_package, SkillPackage, SkillType};
pub use taskgen::{generate_task_suite, verify_isolation, GenerationConfig, Task, TaskSuite};
