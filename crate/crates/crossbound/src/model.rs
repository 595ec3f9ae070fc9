//! Core domain types: job specifications, tool descriptors, validated jobs,
//! and reproducibility manifests.
//!
//! All types here are immutable value objects once constructed and can be
//! shared freely across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::registry::ToolRegistry;
use crate::staging::StagedLayout;

/// Resource demand of a job: cores, memory, GPUs, and wall time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub cpus: u32,
    pub mem_mb: u64,
    pub gpus: u32,
    pub walltime_s: u64,
}

impl ResourceRequest {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.cpus == 0 || self.mem_mb == 0 || self.walltime_s == 0 {
            return Err(ValidationError::BadResources(format!(
                "cpus, mem_mb and walltime_s must be positive (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Requested core-seconds, the unit the quota ledger charges in.
    pub fn core_seconds(&self) -> u64 {
        u64::from(self.cpus) * self.walltime_s
    }
}

/// How an input's bytes reach the target cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Small per-job data uploaded through the broker.
    Inline,
    /// Resolved directly on the target; bytes never pass through the broker.
    ObjectStore,
    /// Large reusable data cached per cluster under its content digest.
    ReferenceBundle,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::Inline => "inline",
            DataKind::ObjectStore => "object_store",
            DataKind::ReferenceBundle => "reference_bundle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Inline { path: PathBuf, size_bytes: u64 },
    ObjectStore { endpoint: String, key: String },
    ReferenceBundle,
}

impl DataSource {
    pub fn kind(&self) -> DataKind {
        match self {
            DataSource::Inline { .. } => DataKind::Inline,
            DataSource::ObjectStore { .. } => DataKind::ObjectStore,
            DataSource::ReferenceBundle => DataKind::ReferenceBundle,
        }
    }
}

/// One named input of a job. The digest is mandatory for inline and
/// reference-bundle data; for object-store data it may be declared up front
/// or resolved when the target fetches the object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRef {
    pub name: String,
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<Digest>,
}

/// An ordered job parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: String,
}

/// A portal's request: which tool to run, on what data, with what
/// resources, and which outputs to bring back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Broker-assigned, unique within the broker's store.
    pub job_id: String,
    pub tool_id: String,
    pub tool_version: String,
    #[serde(default)]
    pub inputs: Vec<DataRef>,
    #[serde(default)]
    pub parameters: Vec<Parameter>,
    /// Falls back to the descriptor's defaults when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resources: Option<ResourceRequest>,
    #[serde(default)]
    pub output_names: Vec<String>,
    #[serde(default)]
    pub notify_to: String,
}

/// A job request as a portal submits it: everything in a `JobSpec` except
/// the broker-assigned job id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobDraft {
    pub tool_id: String,
    pub tool_version: String,
    #[serde(default)]
    pub inputs: Vec<DataRef>,
    #[serde(default)]
    pub parameters: Vec<Parameter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resources: Option<ResourceRequest>,
    #[serde(default)]
    pub output_names: Vec<String>,
    #[serde(default)]
    pub notify_to: String,
}

impl JobDraft {
    pub fn into_spec(self, job_id: String) -> JobSpec {
        JobSpec {
            job_id,
            tool_id: self.tool_id,
            tool_version: self.tool_version,
            inputs: self.inputs,
            parameters: self.parameters,
            resources: self.resources,
            output_names: self.output_names,
            notify_to: self.notify_to,
        }
    }
}

/// Declared input of a tool: the name the command template may reference
/// and the data kind the tool expects it to arrive as.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredInput {
    pub name: String,
    pub kind: DataKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredParam {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

/// Parsed tool wrapper: container pin, command template, and the declared
/// inputs, parameters, outputs, and resource defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub tool_id: String,
    pub version: String,
    pub container_image: String,
    /// Pin required: reproducibility is meaningless without it.
    pub container_digest: Digest,
    pub command_template: String,
    pub declared_inputs: Vec<DeclaredInput>,
    pub declared_params: Vec<DeclaredParam>,
    pub declared_outputs: Vec<String>,
    pub default_resources: ResourceRequest,
    #[serde(default)]
    pub reference_bundles: Vec<Digest>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("unknown tool {tool_id:?} version {version:?}")]
    UnknownTool { tool_id: String, version: String },
    #[error("declared input {0:?} has no data reference")]
    MissingInput(String),
    #[error("placeholder {{{0}}} does not reference a declared input, parameter, or output")]
    UnboundPlaceholder(String),
    #[error("output name {0:?} escapes the work directory")]
    BadPath(String),
    #[error("output name {0:?} is not declared by the tool")]
    UnknownOutput(String),
    #[error("parameter {name:?}: {reason}")]
    BadParameter { name: String, reason: String },
    #[error("duplicate input name {0:?}")]
    DuplicateInput(String),
    #[error("input {name:?} of kind {kind} requires a digest")]
    MissingDigest { name: String, kind: DataKind },
    #[error("input {name:?} is declared as {declared} but provided as {provided}")]
    InputKindMismatch {
        name: String,
        declared: DataKind,
        provided: DataKind,
    },
    #[error("bad resource request: {0}")]
    BadResources(String),
    #[error("malformed command template: {0}")]
    BadTemplate(String),
}

/// One `{kind:name}` site in a command template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placeholder {
    Input(String),
    Param(String),
    Output(String),
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placeholder::Input(n) => write!(f, "input:{n}"),
            Placeholder::Param(n) => write!(f, "param:{n}"),
            Placeholder::Output(n) => write!(f, "output:{n}"),
        }
    }
}

/// Extract every placeholder from a command template.
///
/// The template grammar is strict: any `{` must open a well-formed
/// `{input:NAME}`, `{param:NAME}`, or `{output:NAME}` site, so that after
/// substitution no brace can survive.
pub fn parse_placeholders(template: &str) -> Result<Vec<Placeholder>, ValidationError> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(ValidationError::BadTemplate(
                "unmatched '}' in command template".into(),
            ));
        }
        let tail = &rest[open + 1..];
        let close = tail.find(['{', '}']).ok_or_else(|| {
            ValidationError::BadTemplate("unterminated '{' in command template".into())
        })?;
        if tail.as_bytes()[close] != b'}' {
            return Err(ValidationError::BadTemplate(
                "nested '{' in command template".into(),
            ));
        }
        let body = &tail[..close];
        let (kind, name) = body.split_once(':').ok_or_else(|| {
            ValidationError::BadTemplate(format!("placeholder {{{body}}} lacks a kind prefix"))
        })?;
        if name.is_empty() || !name.bytes().all(is_name_byte) {
            return Err(ValidationError::BadTemplate(format!(
                "placeholder name {name:?} contains invalid characters"
            )));
        }
        out.push(match kind {
            "input" => Placeholder::Input(name.to_string()),
            "param" => Placeholder::Param(name.to_string()),
            "output" => Placeholder::Output(name.to_string()),
            other => {
                return Err(ValidationError::BadTemplate(format!(
                    "unknown placeholder kind {other:?}"
                )))
            }
        });
        rest = &tail[close + 1..];
    }
    Ok(out)
}

fn is_name_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-' | b'/')
}

/// Check that a declared output name stays inside the work directory:
/// relative, non-empty, and free of `..` components.
pub fn check_output_name(name: &str) -> Result<(), ValidationError> {
    let bad = name.is_empty()
        || name.starts_with('/')
        || name.ends_with('/')
        || name.split('/').any(|c| c.is_empty() || c == "..");
    if bad {
        return Err(ValidationError::BadPath(name.to_string()));
    }
    Ok(())
}

/// A job spec bound to its resolved descriptor, with every declared input
/// satisfied, parameters resolved against defaults, and resources settled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedJob {
    pub spec: JobSpec,
    pub descriptor: ToolDescriptor,
    pub resources: ResourceRequest,
    /// Effective parameter values: descriptor defaults overridden by the spec.
    pub params: BTreeMap<String, String>,
}

impl ValidatedJob {
    /// Output names the broker will fetch: the job spec's explicit
    /// selection when given, otherwise everything the tool declares.
    pub fn output_names(&self) -> &[String] {
        if self.spec.output_names.is_empty() {
            &self.descriptor.declared_outputs
        } else {
            &self.spec.output_names
        }
    }
}

/// Bind a spec to the registry: resolve the tool, check every declared
/// input has a data reference of the declared kind, resolve parameters,
/// and settle resources.
pub fn validate_jobspec(
    spec: &JobSpec,
    registry: &ToolRegistry,
) -> Result<ValidatedJob, ValidationError> {
    let descriptor = registry
        .resolve(&spec.tool_id, Some(&spec.tool_version))
        .map_err(|_| ValidationError::UnknownTool {
            tool_id: spec.tool_id.clone(),
            version: spec.tool_version.clone(),
        })?;

    let mut seen = BTreeSet::new();
    for input in &spec.inputs {
        if !seen.insert(input.name.as_str()) {
            return Err(ValidationError::DuplicateInput(input.name.clone()));
        }
        let needs_digest = matches!(
            input.source.kind(),
            DataKind::Inline | DataKind::ReferenceBundle
        );
        if needs_digest && input.digest.is_none() {
            return Err(ValidationError::MissingDigest {
                name: input.name.clone(),
                kind: input.source.kind(),
            });
        }
    }

    for declared in &descriptor.declared_inputs {
        match spec.inputs.iter().find(|r| r.name == declared.name) {
            None => return Err(ValidationError::MissingInput(declared.name.clone())),
            Some(r) if r.source.kind() != declared.kind => {
                return Err(ValidationError::InputKindMismatch {
                    name: declared.name.clone(),
                    declared: declared.kind,
                    provided: r.source.kind(),
                })
            }
            Some(_) => {}
        }
    }

    let mut params: BTreeMap<String, String> = descriptor
        .declared_params
        .iter()
        .filter_map(|p| p.default.clone().map(|d| (p.name.clone(), d)))
        .collect();
    for p in &spec.parameters {
        if !descriptor.declared_params.iter().any(|d| d.name == p.name) {
            return Err(ValidationError::BadParameter {
                name: p.name.clone(),
                reason: "not declared by the tool".into(),
            });
        }
        // Values are substituted verbatim with no quoting layer, so keep the
        // accepted value space away from shell metacharacters.
        if p.value.chars().any(char::is_whitespace) || p.value.contains(['{', '}']) {
            return Err(ValidationError::BadParameter {
                name: p.name.clone(),
                reason: "value must not contain whitespace or braces".into(),
            });
        }
        params.insert(p.name.clone(), p.value.clone());
    }
    for declared in &descriptor.declared_params {
        if !params.contains_key(&declared.name) {
            return Err(ValidationError::BadParameter {
                name: declared.name.clone(),
                reason: "no value given and no default declared".into(),
            });
        }
    }

    for name in &spec.output_names {
        check_output_name(name)?;
        if !descriptor.declared_outputs.contains(name) {
            return Err(ValidationError::UnknownOutput(name.clone()));
        }
    }

    for ph in parse_placeholders(&descriptor.command_template)? {
        let bound = match &ph {
            Placeholder::Input(n) => descriptor.declared_inputs.iter().any(|i| &i.name == n),
            Placeholder::Param(n) => params.contains_key(n),
            Placeholder::Output(n) => descriptor.declared_outputs.contains(n),
        };
        if !bound {
            return Err(ValidationError::UnboundPlaceholder(ph.to_string()));
        }
    }

    let resources = spec.resources.unwrap_or(descriptor.default_resources);
    resources.validate()?;

    Ok(ValidatedJob {
        spec: spec.clone(),
        descriptor: descriptor.clone(),
        resources,
        params,
    })
}

/// Substitute every placeholder in the job's command template with staged
/// absolute paths and parameter values. Deterministic for fixed inputs.
pub fn render_command(job: &ValidatedJob, layout: &StagedLayout) -> Result<String, ValidationError> {
    let template = &job.descriptor.command_template;
    let mut out = String::with_capacity(template.len());
    let mut rest = template.as_str();
    for ph in parse_placeholders(template)? {
        let site = format!("{{{ph}}}");
        let at = rest.find(&site).expect("placeholder present in template");
        out.push_str(&rest[..at]);
        match &ph {
            Placeholder::Input(name) => match layout.staged.get(name) {
                Some(path) => out.push_str(path),
                None => return Err(ValidationError::UnboundPlaceholder(ph.to_string())),
            },
            Placeholder::Param(name) => match job.params.get(name) {
                Some(value) => out.push_str(value),
                None => return Err(ValidationError::UnboundPlaceholder(ph.to_string())),
            },
            Placeholder::Output(name) => {
                out.push_str(&format!("{}/{}", layout.work_dir, name));
            }
        }
        rest = &rest[at + site.len()..];
    }
    out.push_str(rest);
    debug_assert!(!out.contains('{'), "no unsubstituted brace may remain");
    Ok(out)
}

/// Content digests of everything that shaped one job run: enough to decide
/// whether two runs were bitwise identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReproducibilityManifest {
    pub job_id: String,
    pub cluster_id: String,
    pub tool_id: String,
    pub tool_version: String,
    pub container_digest: Digest,
    /// Sorted by input name.
    pub input_digests: Vec<(String, Digest)>,
    /// Digest of the rendered batch script bytes.
    pub script_digest: Digest,
    pub exit_code: i32,
    /// Sorted by output name.
    pub output_digests: Vec<(String, Digest)>,
}

impl ReproducibilityManifest {
    /// Normalize: digest lists sorted by name.
    pub fn normalized(mut self) -> Self {
        self.input_digests.sort();
        self.output_digests.sort();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReproDiff {
    pub field: String,
    pub left: String,
    pub right: String,
}

/// Outcome of comparing two manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReproReport {
    /// Output digests equal element-wise.
    pub bit_identical: bool,
    /// Container digest, tool identity, input digests, and script digest all equal.
    pub same_setup: bool,
    pub diffs: Vec<ReproDiff>,
}

/// Compare two manifests field by field. Symmetric up to left/right labels
/// and reflexive.
pub fn verify_reproduction(a: &ReproducibilityManifest, b: &ReproducibilityManifest) -> ReproReport {
    let mut diffs = Vec::new();
    let mut push = |field: &str, left: &dyn fmt::Display, right: &dyn fmt::Display| {
        diffs.push(ReproDiff {
            field: field.to_string(),
            left: left.to_string(),
            right: right.to_string(),
        });
    };

    if a.job_id != b.job_id {
        push("job_id", &a.job_id, &b.job_id);
    }
    if a.cluster_id != b.cluster_id {
        push("cluster_id", &a.cluster_id, &b.cluster_id);
    }
    if a.tool_id != b.tool_id {
        push("tool_id", &a.tool_id, &b.tool_id);
    }
    if a.tool_version != b.tool_version {
        push("tool_version", &a.tool_version, &b.tool_version);
    }
    if a.container_digest != b.container_digest {
        push("container_digest", &a.container_digest, &b.container_digest);
    }
    if a.script_digest != b.script_digest {
        push("script_digest", &a.script_digest, &b.script_digest);
    }
    if a.exit_code != b.exit_code {
        push("exit_code", &a.exit_code, &b.exit_code);
    }
    diff_digest_lists("input", &a.input_digests, &b.input_digests, &mut diffs);
    diff_digest_lists("output", &a.output_digests, &b.output_digests, &mut diffs);

    let same_setup = a.tool_id == b.tool_id
        && a.tool_version == b.tool_version
        && a.container_digest == b.container_digest
        && a.input_digests == b.input_digests
        && a.script_digest == b.script_digest;
    let bit_identical = a.output_digests == b.output_digests;

    ReproReport {
        bit_identical,
        same_setup,
        diffs,
    }
}

fn diff_digest_lists(
    prefix: &str,
    a: &[(String, Digest)],
    b: &[(String, Digest)],
    diffs: &mut Vec<ReproDiff>,
) {
    let left: BTreeMap<_, _> = a.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let right: BTreeMap<_, _> = b.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let names: BTreeSet<_> = left.keys().chain(right.keys()).copied().collect();
    for name in names {
        match (left.get(name), right.get(name)) {
            (Some(l), Some(r)) if l != r => diffs.push(ReproDiff {
                field: format!("{prefix}:{name}"),
                left: l.to_string(),
                right: r.to_string(),
            }),
            (Some(l), None) => diffs.push(ReproDiff {
                field: format!("{prefix}:{name}"),
                left: l.to_string(),
                right: "<absent>".into(),
            }),
            (None, Some(r)) => diffs.push(ReproDiff {
                field: format!("{prefix}:{name}"),
                left: "<absent>".into(),
                right: r.to_string(),
            }),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::ToolRegistry;

    pub(crate) fn sample_descriptor() -> ToolDescriptor {
        ToolDescriptor {
            tool_id: "shmatch".into(),
            version: "1.0".into(),
            container_image: "shmatch.sif".into(),
            container_digest: Digest::of_bytes(b"container-v1"),
            command_template: "shmatch -i {input:seqs} -n {param:n} -o {output:result.txt}".into(),
            declared_inputs: vec![DeclaredInput {
                name: "seqs".into(),
                kind: DataKind::Inline,
            }],
            declared_params: vec![DeclaredParam {
                name: "n".into(),
                default: Some("10".into()),
            }],
            declared_outputs: vec!["result.txt".into()],
            default_resources: ResourceRequest {
                cpus: 2,
                mem_mb: 1024,
                gpus: 0,
                walltime_s: 3600,
            },
            reference_bundles: vec![],
        }
    }

    fn sample_spec() -> JobSpec {
        JobSpec {
            job_id: "j000001".into(),
            tool_id: "shmatch".into(),
            tool_version: "1.0".into(),
            inputs: vec![DataRef {
                name: "seqs".into(),
                source: DataSource::Inline {
                    path: "/tmp/seqs.fa".into(),
                    size_bytes: 5,
                },
                digest: Some(Digest::of_bytes(b"seqs!")),
            }],
            parameters: vec![],
            resources: None,
            output_names: vec!["result.txt".into()],
            notify_to: "user@example.org".into(),
        }
    }

    fn registry_with_sample() -> ToolRegistry {
        let mut reg = ToolRegistry::new();
        reg.install(sample_descriptor(), 0).unwrap();
        reg
    }

    fn sample_layout(work_dir: &str) -> StagedLayout {
        let mut staged = BTreeMap::new();
        staged.insert("seqs".to_string(), format!("{work_dir}/seqs"));
        StagedLayout {
            job_id: "j000001".into(),
            work_dir: work_dir.to_string(),
            staged,
            bundle_paths: BTreeMap::new(),
            container_path: "/scratch/.bundles/x/image.sif".into(),
        }
    }

    #[test]
    fn well_formed_spec_validates() {
        let job = validate_jobspec(&sample_spec(), &registry_with_sample()).unwrap();
        assert_eq!(job.resources, sample_descriptor().default_resources);
        assert_eq!(job.params.get("n").map(String::as_str), Some("10"));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut spec = sample_spec();
        spec.tool_version = "9.9.9".into();
        let err = validate_jobspec(&spec, &registry_with_sample()).unwrap_err();
        assert!(matches!(err, ValidationError::UnknownTool { .. }));
    }

    #[test]
    fn escaping_output_name_is_rejected() {
        let mut spec = sample_spec();
        spec.output_names = vec!["../etc/x".into()];
        let err = validate_jobspec(&spec, &registry_with_sample()).unwrap_err();
        assert_eq!(err, ValidationError::BadPath("../etc/x".into()));
    }

    #[test]
    fn missing_declared_input_is_rejected() {
        let mut spec = sample_spec();
        spec.inputs.clear();
        let err = validate_jobspec(&spec, &registry_with_sample()).unwrap_err();
        assert_eq!(err, ValidationError::MissingInput("seqs".into()));
    }

    #[test]
    fn whitespace_in_parameter_value_is_rejected() {
        let mut spec = sample_spec();
        spec.parameters = vec![Parameter {
            name: "n".into(),
            value: "10 20".into(),
        }];
        let err = validate_jobspec(&spec, &registry_with_sample()).unwrap_err();
        assert!(matches!(err, ValidationError::BadParameter { .. }));
    }

    #[test]
    fn renders_paths_and_parameters() {
        let job = validate_jobspec(&sample_spec(), &registry_with_sample()).unwrap();
        let cmd = render_command(&job, &sample_layout("/scratch/j000001")).unwrap();
        assert_eq!(
            cmd,
            "shmatch -i /scratch/j000001/seqs -n 10 -o /scratch/j000001/result.txt"
        );
    }

    #[test]
    fn template_without_placeholders_is_verbatim() {
        let mut desc = sample_descriptor();
        desc.command_template = "shmatch --selftest".into();
        desc.declared_inputs.clear();
        let mut reg = ToolRegistry::new();
        reg.install(desc, 0).unwrap();
        let mut spec = sample_spec();
        spec.inputs.clear();
        let job = validate_jobspec(&spec, &reg).unwrap();
        let cmd = render_command(&job, &sample_layout("/scratch/j000001")).unwrap();
        assert_eq!(cmd, "shmatch --selftest");
    }

    #[test]
    fn rendering_is_deterministic() {
        let job = validate_jobspec(&sample_spec(), &registry_with_sample()).unwrap();
        let layout = sample_layout("/scratch/j000001");
        let a = render_command(&job, &layout).unwrap();
        let b = render_command(&job, &layout).unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn placeholders_of_validated_job_are_declared() {
        let job = validate_jobspec(&sample_spec(), &registry_with_sample()).unwrap();
        for ph in parse_placeholders(&job.descriptor.command_template).unwrap() {
            let bound = match &ph {
                Placeholder::Input(n) => {
                    job.descriptor.declared_inputs.iter().any(|i| &i.name == n)
                }
                Placeholder::Param(n) => job.params.contains_key(n),
                Placeholder::Output(n) => job.descriptor.declared_outputs.contains(n),
            };
            assert!(bound, "unbound placeholder {ph}");
        }
    }

    #[test]
    fn stray_braces_are_malformed() {
        assert!(parse_placeholders("tool {input:x").is_err());
        assert!(parse_placeholders("tool }x").is_err());
        assert!(parse_placeholders("tool {bogus}").is_err());
        assert!(parse_placeholders("tool {{input:x}}").is_err());
    }

    fn sample_manifest() -> ReproducibilityManifest {
        ReproducibilityManifest {
            job_id: "j000001".into(),
            cluster_id: "alpha".into(),
            tool_id: "shmatch".into(),
            tool_version: "1.0".into(),
            container_digest: Digest::of_bytes(b"container-v1"),
            input_digests: vec![("seqs".into(), Digest::of_bytes(b"seqs!"))],
            script_digest: Digest::of_bytes(b"script"),
            exit_code: 0,
            output_digests: vec![("result.txt".into(), Digest::of_bytes(b"out"))],
        }
    }

    #[test]
    fn verify_is_reflexive() {
        let m = sample_manifest();
        let report = verify_reproduction(&m, &m);
        assert!(report.bit_identical && report.same_setup);
        assert!(report.diffs.is_empty());
    }

    #[test]
    fn differing_output_keeps_same_setup() {
        let a = sample_manifest();
        let mut b = a.clone();
        b.output_digests = vec![("result.txt".into(), Digest::of_bytes(b"other"))];
        let report = verify_reproduction(&a, &b);
        assert!(report.same_setup);
        assert!(!report.bit_identical);
        assert!(report.diffs.iter().any(|d| d.field == "output:result.txt"));
    }

    #[test]
    fn verify_is_symmetric_in_verdicts() {
        let a = sample_manifest();
        let mut b = a.clone();
        b.script_digest = Digest::of_bytes(b"script2");
        b.output_digests = vec![("result.txt".into(), Digest::of_bytes(b"other"))];
        let ab = verify_reproduction(&a, &b);
        let ba = verify_reproduction(&b, &a);
        assert_eq!(ab.bit_identical, ba.bit_identical);
        assert_eq!(ab.same_setup, ba.same_setup);
        let fields = |r: &ReproReport| {
            r.diffs
                .iter()
                .map(|d| d.field.clone())
                .collect::<BTreeSet<_>>()
        };
        assert_eq!(fields(&ab), fields(&ba));
    }

    #[test]
    fn jobspec_round_trips_through_json() {
        let spec = sample_spec();
        let text = serde_json::to_string(&spec).unwrap();
        let back: JobSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
