//! Compares comparative-run throughput with the rayon fan-out against a
//! single worker, on a virtual workload and on a small real subprocess
//! workload. Build with `--no-default-features` to measure the
//! sequential fallback implementation itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use skillopt::exec::{run_comparative, ExecMode, Limits, VirtualParams};
use skillopt::hash::FrozenSeed;
use skillopt::skill::{CommandSpec, SkillPackage, SkillType};
use skillopt::taskgen::{CheckWhere, CriterionKind, Split, Task, Tier, ValidationCriterion};

fn bench_pkg(real: bool) -> SkillPackage {
    let (code_files, commands, skill_type) = if real {
        (
            vec![("go.sh".to_string(), "echo status ok\n".to_string())],
            vec![CommandSpec::from_line("sh go.sh", 0).unwrap()],
            SkillType::CodeInclusive,
        )
    } else {
        (Vec::new(), Vec::new(), SkillType::InstructionOnly)
    };
    SkillPackage {
        name: "bench".into(),
        description: None,
        instruction: "# Bench\nSave the output and report a status line.\n".into(),
        auxiliary_docs: vec![],
        code_files,
        commands,
        skill_type,
        root: std::path::PathBuf::from("."),
        warnings: vec![],
    }
}

fn bench_tasks(n: usize) -> Vec<Task> {
    (0..n)
        .map(|i| Task {
            id: format!("bench-{i}"),
            split: Split::Test,
            tier: Tier::Standard,
            description: format!("bench task {i}"),
            context: vec![("input.txt".into(), "data\n".into())],
            criteria: vec![ValidationCriterion {
                kind: CriterionKind::KeywordPresent,
                target: "status".into(),
                location: CheckWhere::Stdout,
                weight: 1,
                keywords: vec!["save".into(), "status".into(), "output".into()],
            }],
            capability_area: "core".into(),
        })
        .collect()
}

fn bench_comparative(c: &mut Criterion) {
    let limits = Limits::default();
    let params = VirtualParams::default();

    let mut group = c.benchmark_group("virtual_fan_out");
    let pkg = bench_pkg(false);
    let tasks = bench_tasks(64);
    let seed = FrozenSeed::from_instruction(&pkg.instruction);
    for parallelism in [1usize, 4] {
        group.bench_with_input(
            BenchmarkId::from_parameter(parallelism),
            &parallelism,
            |b, &p| {
                b.iter(|| {
                    run_comparative(&pkg, &pkg, &tasks, ExecMode::Virtual, p, &limits, seed, &params)
                })
            },
        );
    }
    group.finish();

    let mut group = c.benchmark_group("real_fan_out");
    group.sample_size(10);
    let pkg = bench_pkg(true);
    let tasks = bench_tasks(8);
    let seed = FrozenSeed::from_instruction(&pkg.instruction);
    for parallelism in [1usize, 4] {
        group.bench_with_input(
            BenchmarkId::from_parameter(parallelism),
            &parallelism,
            |b, &p| {
                b.iter(|| {
                    run_comparative(&pkg, &pkg, &tasks, ExecMode::Real, p, &limits, seed, &params)
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_comparative);
criterion_main!(benches);
