//! Skill package parsing: load a skill directory from disk, extract its
//! runnable commands, and bucket its instruction text into a capability
//! profile.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

/// File extensions that mark a file as executable skill code.
pub const DEFAULT_EXECUTABLE_EXTENSIONS: &[&str] = &["py", "sh", "js", "ts", "rb"];

#[derive(Debug, Error)]
pub enum SkillError {
    #[error("no instruction document (SKILL.md or README.md) in {0}")]
    MissingInstructionDoc(PathBuf),
    #[error("unreadable file {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkillType {
    InstructionOnly,
    CodeInclusive,
}

/// One runnable command extracted from a fenced shell block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub raw: String,
    pub program: String,
    pub args: Vec<String>,
    pub source_block_index: usize,
}

impl CommandSpec {
    pub fn from_line(raw: &str, source_block_index: usize) -> Option<Self> {
        let raw = raw.trim();
        if raw.is_empty() {
            return None;
        }
        let mut tokens = raw.split_whitespace().map(str::to_string);
        let program = tokens.next()?;
        Some(CommandSpec {
            raw: raw.to_string(),
            program,
            args: tokens.collect(),
            source_block_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillPackage {
    pub name: String,
    pub description: Option<String>,
    pub instruction: String,
    pub auxiliary_docs: Vec<(String, String)>,
    pub code_files: Vec<(String, String)>,
    pub commands: Vec<CommandSpec>,
    pub skill_type: SkillType,
    pub root: PathBuf,
    /// Non-fatal problems found while parsing (e.g. malformed frontmatter).
    pub warnings: Vec<String>,
}

impl SkillPackage {
    /// Rebuild derived fields after the instruction or code files change.
    pub fn refresh(&mut self) {
        self.commands = extract_commands(&self.instruction);
        self.skill_type = if self.code_files.is_empty() {
            SkillType::InstructionOnly
        } else {
            SkillType::CodeInclusive
        };
    }
}

/// Instruction content bucketed by section headings and line keywords.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityProfile {
    pub core_functions: Vec<String>,
    pub optional_features: Vec<String>,
    pub boundary_conditions: Vec<String>,
    pub failure_scenarios: Vec<String>,
    pub io_formats: Vec<String>,
    pub constraints: Vec<String>,
}

/// Keyword lists that drive capability bucketing, shipped as a bundled
/// data file so the heuristics stay auditable.
#[derive(Debug, Clone, Deserialize)]
pub struct BucketKeywords {
    pub core_functions: Vec<String>,
    pub optional_features: Vec<String>,
    pub boundary_conditions: Vec<String>,
    pub failure_scenarios: Vec<String>,
    pub io_formats: Vec<String>,
    pub constraints: Vec<String>,
}

const BUCKET_KEYWORDS_JSON: &str = include_str!("../data/capability_buckets.json");

pub fn bucket_keywords() -> BucketKeywords {
    serde_json::from_str(BUCKET_KEYWORDS_JSON).expect("bundled capability_buckets.json is valid")
}

fn normalize_newlines(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

fn read_file(path: &Path) -> Result<String, SkillError> {
    let bytes = std::fs::read(path).map_err(|source| SkillError::UnreadableFile {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(normalize_newlines(&String::from_utf8_lossy(&bytes)))
}

/// Parse `---`-fenced `key: value` frontmatter. Returns the key map and
/// the byte offset where the body starts, or None when no frontmatter.
/// A malformed block (opened but never closed) yields Err.
fn parse_frontmatter(text: &str) -> Result<Option<(BTreeMap<String, String>, usize)>, String> {
    let mut lines = text.split_inclusive('\n');
    let first = match lines.next() {
        Some(l) => l,
        None => return Ok(None),
    };
    if first.trim_end() != "---" {
        return Ok(None);
    }
    let mut map = BTreeMap::new();
    let mut offset = first.len();
    for line in lines {
        offset += line.len();
        let trimmed = line.trim_end();
        if trimmed == "---" {
            return Ok(Some((map, offset)));
        }
        if let Some((k, v)) = trimmed.split_once(':') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Err("frontmatter opened with --- but never closed".to_string())
}

/// Load a skill package from a directory. The primary instruction
/// document is SKILL.md, falling back to README.md; both present means
/// README.md becomes an auxiliary doc.
pub fn parse_skill_package(root: &Path) -> Result<SkillPackage, SkillError> {
    parse_skill_package_with(root, DEFAULT_EXECUTABLE_EXTENSIONS)
}

pub fn parse_skill_package_with(
    root: &Path,
    executable_extensions: &[&str],
) -> Result<SkillPackage, SkillError> {
    let skill_md = root.join("SKILL.md");
    let readme_md = root.join("README.md");
    let primary = if skill_md.is_file() {
        skill_md
    } else if readme_md.is_file() {
        readme_md
    } else {
        return Err(SkillError::MissingInstructionDoc(root.to_path_buf()));
    };

    let raw_instruction = read_file(&primary)?;
    let mut warnings = Vec::new();
    let dir_name = root
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "skill".to_string());

    let (name, description) = match parse_frontmatter(&raw_instruction) {
        Ok(Some((map, _))) => (
            map.get("name")
                .filter(|n| !n.is_empty() && !n.contains('/') && !n.contains('\\'))
                .cloned()
                .unwrap_or_else(|| dir_name.clone()),
            map.get("description").cloned(),
        ),
        Ok(None) => (dir_name.clone(), None),
        Err(msg) => {
            warnings.push(format!("malformed frontmatter: {msg}"));
            (dir_name.clone(), None)
        }
    };

    let primary_name = primary.file_name().unwrap().to_string_lossy().to_string();
    let mut auxiliary_docs = Vec::new();
    let mut code_files = Vec::new();

    let mut entries: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    entries.sort();

    for path in entries {
        let rel = path
            .strip_prefix(root)
            .unwrap()
            .to_string_lossy()
            .replace('\\', "/");
        if rel == primary_name {
            continue;
        }
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if executable_extensions.contains(&ext.as_str()) {
            code_files.push((rel, read_file(&path)?));
        } else if ext == "md" || ext == "txt" {
            auxiliary_docs.push((rel, read_file(&path)?));
        }
    }

    let commands = extract_commands(&raw_instruction);
    let skill_type = if code_files.is_empty() {
        SkillType::InstructionOnly
    } else {
        SkillType::CodeInclusive
    };

    Ok(SkillPackage {
        name,
        description,
        instruction: raw_instruction,
        auxiliary_docs,
        code_files,
        commands,
        skill_type,
        root: root.to_path_buf(),
        warnings,
    })
}

const SHELL_FENCE_TAGS: &[&str] = &["bash", "sh", "shell", "console"];

/// One CommandSpec per non-comment, non-blank line inside fenced code
/// blocks tagged bash/sh/shell/console. A leading `$ ` prompt is
/// stripped; order of appearance is preserved.
pub fn extract_commands(instruction: &str) -> Vec<CommandSpec> {
    let mut commands = Vec::new();
    let mut block_index = 0usize;
    let mut in_shell_block = false;
    let mut in_other_block = false;
    for line in instruction.lines() {
        let trimmed = line.trim();
        if let Some(tag) = trimmed.strip_prefix("```") {
            if in_shell_block {
                in_shell_block = false;
                block_index += 1;
            } else if in_other_block {
                in_other_block = false;
            } else if SHELL_FENCE_TAGS.contains(&tag.trim()) {
                in_shell_block = true;
            } else {
                in_other_block = true;
            }
            continue;
        }
        if !in_shell_block {
            continue;
        }
        let line = trimmed.strip_prefix("$ ").unwrap_or(trimmed);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(spec) = CommandSpec::from_line(line, block_index) {
            commands.push(spec);
        }
    }
    commands
}

/// Strip frontmatter and return the instruction body.
pub fn instruction_body(instruction: &str) -> &str {
    match parse_frontmatter(instruction) {
        Ok(Some((_, offset))) => &instruction[offset..],
        _ => instruction,
    }
}

fn heading_bucket<'a>(heading: &str, kw: &'a BucketKeywords) -> Option<&'static str> {
    let h = heading.to_lowercase();
    let hit = |words: &[String]| words.iter().any(|w| h.contains(w.as_str()));
    // Order matters: more specific buckets win over core_functions.
    if hit(&kw.failure_scenarios) {
        Some("failure")
    } else if hit(&kw.boundary_conditions) {
        Some("boundary")
    } else if hit(&kw.io_formats) {
        Some("io")
    } else if hit(&kw.optional_features) {
        Some("optional")
    } else if hit(&kw.constraints) {
        Some("constraints")
    } else if hit(&kw.core_functions) {
        Some("core")
    } else {
        let _ = kw;
        None
    }
}

fn line_bucket(line: &str, kw: &BucketKeywords) -> Option<&'static str> {
    let l = line.to_lowercase();
    let hit = |words: &[String]| words.iter().any(|w| l.contains(w.as_str()));
    if hit(&kw.boundary_conditions) {
        Some("boundary")
    } else if hit(&kw.failure_scenarios) {
        Some("failure")
    } else {
        None
    }
}

/// Deterministically bucket the instruction into a capability profile
/// using heading and keyword heuristics from the bundled data file.
pub fn extract_capability_profile(pkg: &SkillPackage) -> CapabilityProfile {
    let kw = bucket_keywords();
    let body = instruction_body(&pkg.instruction);
    let mut profile = CapabilityProfile::default();
    let mut current: Option<&'static str> = None;
    let mut saw_content = false;

    let push = |profile: &mut CapabilityProfile, bucket: &str, text: &str| {
        let text = text.trim();
        if text.is_empty() {
            return;
        }
        let list = match bucket {
            "core" => &mut profile.core_functions,
            "optional" => &mut profile.optional_features,
            "boundary" => &mut profile.boundary_conditions,
            "failure" => &mut profile.failure_scenarios,
            "io" => &mut profile.io_formats,
            "constraints" => &mut profile.constraints,
            _ => return,
        };
        if !list.iter().any(|e| e == text) {
            list.push(text.to_string());
        }
    };

    for line in body.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(heading) = trimmed.strip_prefix('#') {
            let heading = heading.trim_start_matches('#').trim();
            current = heading_bucket(heading, &kw);
            continue;
        }
        saw_content = true;
        if let Some(bucket) = line_bucket(trimmed, &kw) {
            push(&mut profile, bucket, trimmed);
        } else if let Some(bucket) = current {
            push(&mut profile, bucket, trimmed);
        }
    }

    let empty = profile.core_functions.is_empty()
        && profile.optional_features.is_empty()
        && profile.boundary_conditions.is_empty()
        && profile.failure_scenarios.is_empty()
        && profile.io_formats.is_empty()
        && profile.constraints.is_empty();
    if empty && saw_content {
        // No recognizable sections: first paragraph becomes the single
        // core function entry.
        let first_para: String = body
            .lines()
            .map(str::trim)
            .skip_while(|l| l.is_empty() || l.starts_with('#'))
            .take_while(|l| !l.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        if !first_para.is_empty() {
            profile.core_functions.push(first_para);
        }
    }
    profile
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::TempDir;

    fn write(dir: &Path, rel: &str, content: &str) {
        let p = dir.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, content).unwrap();
    }

    #[test]
    fn parses_instruction_only_skill_with_frontmatter_name() {
        let tmp = TempDir::new().unwrap();
        write(
            tmp.path(),
            "SKILL.md",
            "---\nname: weather\ndescription: forecasts\n---\n# Weather\nGet forecasts.\n",
        );
        let pkg = parse_skill_package(tmp.path()).unwrap();
        assert_eq!(pkg.name, "weather");
        assert_eq!(pkg.skill_type, SkillType::InstructionOnly);
        assert!(pkg.code_files.is_empty());
        assert!(pkg.warnings.is_empty());
    }

    #[test]
    fn code_files_force_code_inclusive() {
        let tmp = TempDir::new().unwrap();
        write(tmp.path(), "SKILL.md", "# S\nRun things.\n");
        write(tmp.path(), "scripts/run.py", "print('hi')\n");
        let pkg = parse_skill_package(tmp.path()).unwrap();
        assert_eq!(pkg.skill_type, SkillType::CodeInclusive);
        assert_eq!(pkg.code_files.len(), 1);
        assert_eq!(pkg.code_files[0].0, "scripts/run.py");
    }

    #[test]
    fn empty_directory_is_missing_instruction_doc() {
        let tmp = TempDir::new().unwrap();
        assert!(matches!(
            parse_skill_package(tmp.path()),
            Err(SkillError::MissingInstructionDoc(_))
        ));
    }

    #[test]
    fn skill_md_preferred_over_readme() {
        let tmp = TempDir::new().unwrap();
        write(tmp.path(), "SKILL.md", "primary\n");
        write(tmp.path(), "README.md", "aux\n");
        let pkg = parse_skill_package(tmp.path()).unwrap();
        assert_eq!(pkg.instruction, "primary\n");
        assert_eq!(pkg.auxiliary_docs.len(), 1);
        assert_eq!(pkg.auxiliary_docs[0].0, "README.md");
    }

    #[test]
    fn malformed_frontmatter_falls_back_to_dir_name() {
        let tmp = TempDir::new().unwrap();
        write(tmp.path(), "SKILL.md", "---\nname: broken\nno closing fence\n");
        let pkg = parse_skill_package(tmp.path()).unwrap();
        assert_eq!(pkg.name, tmp.path().file_name().unwrap().to_string_lossy());
        assert_eq!(pkg.warnings.len(), 1);
    }

    #[test]
    fn crlf_normalized_to_lf() {
        let tmp = TempDir::new().unwrap();
        write(tmp.path(), "SKILL.md", "line one\r\nline two\r\n");
        let pkg = parse_skill_package(tmp.path()).unwrap();
        assert_eq!(pkg.instruction, "line one\nline two\n");
    }

    #[test]
    fn parse_is_deterministic() {
        let tmp = TempDir::new().unwrap();
        write(tmp.path(), "SKILL.md", "# S\nbody\n```bash\nls -l\n```\n");
        write(tmp.path(), "a.py", "pass\n");
        write(tmp.path(), "b.sh", "true\n");
        let a = parse_skill_package(tmp.path()).unwrap();
        let b = parse_skill_package(tmp.path()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extracts_commands_with_prompt_stripping() {
        let text = "intro\n```bash\n$ python scripts/run.py --city Tokyo\n```\n";
        let cmds = extract_commands(text);
        assert_eq!(cmds.len(), 1);
        assert_eq!(cmds[0].raw, "python scripts/run.py --city Tokyo");
        assert_eq!(cmds[0].program, "python");
        assert_eq!(cmds[0].args, vec!["scripts/run.py", "--city", "Tokyo"]);
    }

    #[test]
    fn no_fenced_blocks_means_no_commands() {
        assert!(extract_commands("just prose, `inline code` only").is_empty());
    }

    #[test]
    fn block_indices_count_shell_blocks_in_order() {
        let text = "```bash\necho one\n```\nmiddle\n```python\nprint(1)\n```\n```sh\necho two\n```\n";
        let cmds = extract_commands(text);
        assert_eq!(cmds.len(), 2);
        assert_eq!(cmds[0].source_block_index, 0);
        assert_eq!(cmds[1].source_block_index, 1);
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let text = "```bash\n# setup\n\necho hi\n```\n";
        let cmds = extract_commands(text);
        assert_eq!(cmds.len(), 1);
        assert_eq!(cmds[0].raw, "echo hi");
    }

    fn pkg_from(instruction: &str) -> SkillPackage {
        SkillPackage {
            name: "t".into(),
            description: None,
            instruction: instruction.into(),
            auxiliary_docs: vec![],
            code_files: vec![],
            commands: extract_commands(instruction),
            skill_type: SkillType::InstructionOnly,
            root: PathBuf::from("."),
            warnings: vec![],
        }
    }

    #[test]
    fn profile_buckets_by_heading() {
        let pkg = pkg_from("## Usage\nrun the tool\n## Troubleshooting\nfix errors\n");
        let profile = extract_capability_profile(&pkg);
        assert!(!profile.core_functions.is_empty());
        assert!(!profile.failure_scenarios.is_empty());
    }

    #[test]
    fn empty_instruction_gives_empty_profile() {
        let pkg = pkg_from("");
        let profile = extract_capability_profile(&pkg);
        assert_eq!(profile, CapabilityProfile::default());
    }

    #[test]
    fn boundary_keyword_line_lands_in_boundary_conditions() {
        let pkg = pkg_from("## Usage\nMaximum file size: 10MB\nnormal line\n");
        let profile = extract_capability_profile(&pkg);
        assert!(profile
            .boundary_conditions
            .iter()
            .any(|l| l.contains("Maximum file size: 10MB")));
    }

    #[test]
    fn headingless_prose_becomes_first_paragraph_core_function() {
        let pkg = pkg_from("This skill fetches weather.\nIt is simple.\n\nMore.\n");
        let profile = extract_capability_profile(&pkg);
        assert_eq!(profile.core_functions.len(), 1);
        assert!(profile.core_functions[0].contains("fetches weather"));
    }

    #[test]
    fn profile_lists_never_contain_empty_strings() {
        let pkg = pkg_from("## Usage\n\nrun\n## Limits\n\nmax 5\n");
        let profile = extract_capability_profile(&pkg);
        for list in [
            &profile.core_functions,
            &profile.optional_features,
            &profile.boundary_conditions,
            &profile.failure_scenarios,
            &profile.io_formats,
            &profile.constraints,
        ] {
            assert!(list.iter().all(|s| !s.is_empty()));
        }
    }
}
