//! Versioned tool registry and the XML wrapper-descriptor dialect.
//!
//! Installing a new version never removes or mutates an existing one, so a
//! workflow pinned to an old version keeps resolving forever. The registry
//! persists as one XML file per (id, version) under a registry directory.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::digest::Digest;
use crate::model::{
    parse_placeholders, DataKind, DeclaredInput, DeclaredParam, Placeholder, ResourceRequest,
    ToolDescriptor,
};

#[derive(Debug, thiserror::Error)]
pub enum DescriptorError {
    #[error("malformed descriptor document: {0}")]
    Parse(String),
    #[error("descriptor schema violation: {0}")]
    Schema(String),
    #[error("command template placeholder error: {0}")]
    Placeholder(String),
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown tool {tool_id:?} version {version:?}")]
    UnknownTool { tool_id: String, version: String },
    #[error("tool {tool_id:?} version {version:?} already installed with different content")]
    DuplicateVersion { tool_id: String, version: String },
    #[error("registry io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

/// Parse a wrapper-descriptor document.
///
/// Expected shape:
/// ```xml
/// <tool id="shmatch" version="1.0">
///   <container image="shmatch.sif" digest="sha256:..."/>
///   <command>shmatch -i {input:seqs} -o {output:result.txt}</command>
///   <inputs><input name="seqs"/></inputs>
///   <params><param name="n" default="10"/></params>
///   <outputs><output name="result.txt"/></outputs>
///   <resources cpus="2" mem_mb="1024" gpus="0" walltime_s="3600"/>
///   <bundles><bundle digest="sha256:..."/></bundles>
/// </tool>
/// ```
/// `<container>` (with its digest pin), `<command>`, and `<resources>` are
/// mandatory; an `<input>` may carry a `kind` attribute (`inline`,
/// `object_store`, `reference_bundle`), defaulting to `inline`.
pub fn parse_descriptor(document: &[u8]) -> Result<ToolDescriptor, DescriptorError> {
    let text =
        std::str::from_utf8(document).map_err(|e| DescriptorError::Parse(e.to_string()))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| DescriptorError::Parse(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "tool" {
        return Err(DescriptorError::Schema("root element must be <tool>".into()));
    }
    let tool_id = required_attr(&root, "id")?;
    let version = required_attr(&root, "version")?;

    let container = required_child(&root, "container")?;
    let container_image = required_attr(&container, "image")?;
    let container_digest = parse_prefixed_digest(&required_attr(&container, "digest")?)?;

    let command_template = required_child(&root, "command")?
        .text()
        .unwrap_or("")
        .trim()
        .to_string();
    if command_template.is_empty() {
        return Err(DescriptorError::Schema("<command> must be non-empty".into()));
    }

    let mut declared_inputs = Vec::new();
    if let Some(inputs) = child(&root, "inputs") {
        for node in inputs.children().filter(|n| n.is_element()) {
            expect_tag(&node, "input")?;
            let kind = match node.attribute("kind") {
                None | Some("inline") => DataKind::Inline,
                Some("object_store") => DataKind::ObjectStore,
                Some("reference_bundle") => DataKind::ReferenceBundle,
                Some(other) => {
                    return Err(DescriptorError::Schema(format!(
                        "unknown input kind {other:?}"
                    )))
                }
            };
            declared_inputs.push(DeclaredInput {
                name: required_attr(&node, "name")?,
                kind,
            });
        }
    }

    let mut declared_params = Vec::new();
    if let Some(params) = child(&root, "params") {
        for node in params.children().filter(|n| n.is_element()) {
            expect_tag(&node, "param")?;
            declared_params.push(DeclaredParam {
                name: required_attr(&node, "name")?,
                default: node.attribute("default").map(str::to_string),
            });
        }
    }

    let mut declared_outputs = Vec::new();
    if let Some(outputs) = child(&root, "outputs") {
        for node in outputs.children().filter(|n| n.is_element()) {
            expect_tag(&node, "output")?;
            declared_outputs.push(required_attr(&node, "name")?);
        }
    }

    let resources = required_child(&root, "resources")?;
    let default_resources = ResourceRequest {
        cpus: parse_attr(&resources, "cpus")?,
        mem_mb: parse_attr(&resources, "mem_mb")?,
        gpus: parse_attr(&resources, "gpus")?,
        walltime_s: parse_attr(&resources, "walltime_s")?,
    };

    let mut reference_bundles = Vec::new();
    if let Some(bundles) = child(&root, "bundles") {
        for node in bundles.children().filter(|n| n.is_element()) {
            expect_tag(&node, "bundle")?;
            reference_bundles.push(parse_prefixed_digest(&required_attr(&node, "digest")?)?);
        }
    }

    let descriptor = ToolDescriptor {
        tool_id,
        version,
        container_image,
        container_digest,
        command_template,
        declared_inputs,
        declared_params,
        declared_outputs,
        default_resources,
        reference_bundles,
    };
    check_placeholder_closure(&descriptor)?;
    Ok(descriptor)
}

/// Every placeholder in the command template must reference a declared
/// input, parameter, or output.
fn check_placeholder_closure(d: &ToolDescriptor) -> Result<(), DescriptorError> {
    let placeholders = parse_placeholders(&d.command_template)
        .map_err(|e| DescriptorError::Placeholder(e.to_string()))?;
    for ph in placeholders {
        let bound = match &ph {
            Placeholder::Input(n) => d.declared_inputs.iter().any(|i| &i.name == n),
            Placeholder::Param(n) => d.declared_params.iter().any(|p| &p.name == n),
            Placeholder::Output(n) => d.declared_outputs.contains(n),
        };
        if !bound {
            return Err(DescriptorError::Placeholder(format!(
                "{{{ph}}} is not declared"
            )));
        }
    }
    Ok(())
}

/// Render a descriptor back to its XML form. `parse_descriptor` of the
/// result reproduces the descriptor exactly.
pub fn serialize_descriptor(d: &ToolDescriptor) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<tool id=\"{}\" version=\"{}\">",
        escape_attr(&d.tool_id),
        escape_attr(&d.version)
    );
    let _ = writeln!(
        out,
        "  <container image=\"{}\" digest=\"sha256:{}\"/>",
        escape_attr(&d.container_image),
        d.container_digest
    );
    let _ = writeln!(out, "  <command>{}</command>", escape_text(&d.command_template));
    let _ = writeln!(out, "  <inputs>");
    for input in &d.declared_inputs {
        let _ = writeln!(
            out,
            "    <input name=\"{}\" kind=\"{}\"/>",
            escape_attr(&input.name),
            input.kind
        );
    }
    let _ = writeln!(out, "  </inputs>");
    let _ = writeln!(out, "  <params>");
    for param in &d.declared_params {
        match &param.default {
            Some(default) => {
                let _ = writeln!(
                    out,
                    "    <param name=\"{}\" default=\"{}\"/>",
                    escape_attr(&param.name),
                    escape_attr(default)
                );
            }
            None => {
                let _ = writeln!(out, "    <param name=\"{}\"/>", escape_attr(&param.name));
            }
        }
    }
    let _ = writeln!(out, "  </params>");
    let _ = writeln!(out, "  <outputs>");
    for output in &d.declared_outputs {
        let _ = writeln!(out, "    <output name=\"{}\"/>", escape_attr(output));
    }
    let _ = writeln!(out, "  </outputs>");
    let r = d.default_resources;
    let _ = writeln!(
        out,
        "  <resources cpus=\"{}\" mem_mb=\"{}\" gpus=\"{}\" walltime_s=\"{}\"/>",
        r.cpus, r.mem_mb, r.gpus, r.walltime_s
    );
    let _ = writeln!(out, "  <bundles>");
    for bundle in &d.reference_bundles {
        let _ = writeln!(out, "    <bundle digest=\"sha256:{bundle}\"/>");
    }
    let _ = writeln!(out, "  </bundles>");
    out.push_str("</tool>\n");
    out
}

fn parse_prefixed_digest(value: &str) -> Result<Digest, DescriptorError> {
    let hex = value.strip_prefix("sha256:").ok_or_else(|| {
        DescriptorError::Schema(format!("digest {value:?} lacks the sha256: prefix"))
    })?;
    Digest::parse(hex).map_err(|e| DescriptorError::Schema(e.to_string()))
}

fn required_attr(node: &roxmltree::Node, name: &str) -> Result<String, DescriptorError> {
    node.attribute(name).map(str::to_string).ok_or_else(|| {
        DescriptorError::Schema(format!(
            "<{}> is missing mandatory attribute {name:?}",
            node.tag_name().name()
        ))
    })
}

fn child<'a, 'd>(
    node: &roxmltree::Node<'a, 'd>,
    name: &str,
) -> Option<roxmltree::Node<'a, 'd>> {
    node.children()
        .find(|n| n.is_element() && n.tag_name().name() == name)
}

fn required_child<'a, 'd>(
    node: &roxmltree::Node<'a, 'd>,
    name: &str,
) -> Result<roxmltree::Node<'a, 'd>, DescriptorError> {
    child(node, name)
        .ok_or_else(|| DescriptorError::Schema(format!("missing mandatory element <{name}>")))
}

fn expect_tag(node: &roxmltree::Node, name: &str) -> Result<(), DescriptorError> {
    if node.tag_name().name() == name {
        Ok(())
    } else {
        Err(DescriptorError::Schema(format!(
            "unexpected element <{}>, expected <{name}>",
            node.tag_name().name()
        )))
    }
}

fn parse_attr<T: std::str::FromStr>(
    node: &roxmltree::Node,
    name: &str,
) -> Result<T, DescriptorError> {
    required_attr(node, name)?
        .parse()
        .map_err(|_| DescriptorError::Schema(format!("attribute {name:?} is not a valid number")))
}

fn escape_text(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn escape_attr(s: &str) -> String {
    escape_text(s).replace('"', "&quot;")
}

/// Compare dotted version strings segment by segment: numerically where
/// both segments are numeric, lexicographically otherwise.
pub fn cmp_versions(a: &str, b: &str) -> Ordering {
    let mut left = a.split('.');
    let mut right = b.split('.');
    loop {
        match (left.next(), right.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(l), Some(r)) => {
                let ord = match (l.parse::<u64>(), r.parse::<u64>()) {
                    (Ok(ln), Ok(rn)) => ln.cmp(&rn),
                    _ => l.cmp(r),
                };
                if ord != Ordering::Equal {
                    return ord;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstallEvent {
    pub timestamp: u64,
    pub tool_id: String,
    pub version: String,
}

/// In-memory registry of tool descriptors, keyed by (id, version).
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    entries: BTreeMap<String, BTreeMap<String, ToolDescriptor>>,
    install_log: Vec<InstallEvent>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Install a descriptor. Re-installing identical content is an
    /// idempotent no-op; same (id, version) with different content is an
    /// immutability violation.
    pub fn install(&mut self, descriptor: ToolDescriptor, now: u64) -> Result<(), RegistryError> {
        let versions = self.entries.entry(descriptor.tool_id.clone()).or_default();
        if let Some(existing) = versions.get(&descriptor.version) {
            if *existing == descriptor {
                return Ok(());
            }
            return Err(RegistryError::DuplicateVersion {
                tool_id: descriptor.tool_id,
                version: descriptor.version,
            });
        }
        self.install_log.push(InstallEvent {
            timestamp: now,
            tool_id: descriptor.tool_id.clone(),
            version: descriptor.version.clone(),
        });
        versions.insert(descriptor.version.clone(), descriptor);
        Ok(())
    }

    /// Exact-match lookup when a version is given; highest version by
    /// dotted ordering when omitted.
    pub fn resolve(
        &self,
        tool_id: &str,
        version: Option<&str>,
    ) -> Result<&ToolDescriptor, RegistryError> {
        let unknown = || RegistryError::UnknownTool {
            tool_id: tool_id.to_string(),
            version: version.unwrap_or("<latest>").to_string(),
        };
        let versions = self.entries.get(tool_id).ok_or_else(unknown)?;
        match version {
            Some(v) => versions.get(v).ok_or_else(unknown),
            None => versions
                .values()
                .max_by(|a, b| cmp_versions(&a.version, &b.version))
                .ok_or_else(unknown),
        }
    }

    pub fn tools(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.entries.values().flat_map(|v| v.values())
    }

    pub fn install_log(&self) -> &[InstallEvent] {
        &self.install_log
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn descriptor_filename(tool_id: &str, version: &str) -> String {
    format!("{tool_id}__{version}.xml")
}

/// Load every `<id>__<version>.xml` under a registry directory, plus the
/// install log if present.
pub fn load_registry_dir(dir: &Path) -> Result<ToolRegistry, RegistryError> {
    let mut registry = ToolRegistry::new();
    if !dir.exists() {
        return Ok(registry);
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "xml"))
        .collect();
    paths.sort();
    for path in paths {
        let descriptor = parse_descriptor(&fs::read(&path)?)?;
        registry.install(descriptor, 0)?;
    }
    registry.install_log = load_install_log(dir)?;
    Ok(registry)
}

/// Persist one descriptor into the registry directory and append to the
/// install log. Returns the written path.
pub fn persist_descriptor(
    dir: &Path,
    descriptor: &ToolDescriptor,
    now: u64,
) -> Result<std::path::PathBuf, RegistryError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(descriptor_filename(&descriptor.tool_id, &descriptor.version));
    if path.exists() {
        let existing = parse_descriptor(&fs::read(&path)?)?;
        if existing != *descriptor {
            return Err(RegistryError::DuplicateVersion {
                tool_id: descriptor.tool_id.clone(),
                version: descriptor.version.clone(),
            });
        }
        return Ok(path);
    }
    fs::write(&path, serialize_descriptor(descriptor))?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("install.log"))?;
    writeln!(log, "{now} {} {}", descriptor.tool_id, descriptor.version)?;
    Ok(path)
}

fn load_install_log(dir: &Path) -> Result<Vec<InstallEvent>, RegistryError> {
    let path = dir.join("install.log");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut events = Vec::new();
    for line in fs::read_to_string(&path)?.lines() {
        let mut parts = line.splitn(3, ' ');
        if let (Some(ts), Some(id), Some(ver)) = (parts.next(), parts.next(), parts.next()) {
            events.push(InstallEvent {
                timestamp: ts.parse().unwrap_or(0),
                tool_id: id.to_string(),
                version: ver.to_string(),
            });
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
<tool id="itsx" version="1.0">
  <container image="itsx.sif" digest="sha256:aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa"/>
  <command>itsx -i {input:seqs} -o {output:out.txt}</command>
  <inputs><input name="seqs"/></inputs>
  <outputs><output name="out.txt"/></outputs>
  <resources cpus="1" mem_mb="512" gpus="0" walltime_s="600"/>
</tool>
"#;

    #[test]
    fn minimal_document_parses() {
        let d = parse_descriptor(MINIMAL.as_bytes()).unwrap();
        assert_eq!(d.tool_id, "itsx");
        assert_eq!(d.declared_inputs.len(), 1);
        assert_eq!(d.declared_inputs[0].kind, DataKind::Inline);
        assert_eq!(d.declared_outputs, vec!["out.txt".to_string()]);
        assert_eq!(d.default_resources.cpus, 1);
    }

    #[test]
    fn missing_container_digest_is_schema_error() {
        let doc = MINIMAL.replace(
            " digest=\"sha256:aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa\"",
            "",
        );
        let err = parse_descriptor(doc.as_bytes()).unwrap_err();
        assert!(matches!(err, DescriptorError::Schema(_)), "{err}");
    }

    #[test]
    fn undeclared_placeholder_is_placeholder_error() {
        let doc = MINIMAL.replace("{input:seqs}", "{input:x}");
        let err = parse_descriptor(doc.as_bytes()).unwrap_err();
        assert!(matches!(err, DescriptorError::Placeholder(_)), "{err}");
    }

    #[test]
    fn garbage_is_parse_error() {
        let err = parse_descriptor(b"<tool").unwrap_err();
        assert!(matches!(err, DescriptorError::Parse(_)));
    }

    #[test]
    fn serialize_parse_round_trip() {
        let d = parse_descriptor(MINIMAL.as_bytes()).unwrap();
        let text = serialize_descriptor(&d);
        let back = parse_descriptor(text.as_bytes()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn round_trip_survives_markup_in_template() {
        let mut d = parse_descriptor(MINIMAL.as_bytes()).unwrap();
        d.command_template = "itsx -i {input:seqs} -o {output:out.txt} --fancy \"<&>\"".into();
        let back = parse_descriptor(serialize_descriptor(&d).as_bytes()).unwrap();
        assert_eq!(d, back);
    }

    fn versioned(version: &str) -> ToolDescriptor {
        let mut d = parse_descriptor(MINIMAL.as_bytes()).unwrap();
        d.version = version.to_string();
        d
    }

    #[test]
    fn install_keeps_previous_versions() {
        let mut reg = ToolRegistry::new();
        reg.install(versioned("1.0"), 1).unwrap();
        reg.install(versioned("2.0"), 2).unwrap();
        assert!(reg.resolve("itsx", Some("1.0")).is_ok());
        assert!(reg.resolve("itsx", Some("2.0")).is_ok());
        assert_eq!(reg.install_log().len(), 2);
    }

    #[test]
    fn identical_reinstall_is_idempotent() {
        let mut reg = ToolRegistry::new();
        reg.install(versioned("1.0"), 1).unwrap();
        reg.install(versioned("1.0"), 2).unwrap();
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.install_log().len(), 1);
    }

    #[test]
    fn changed_reinstall_is_rejected() {
        let mut reg = ToolRegistry::new();
        reg.install(versioned("1.0"), 1).unwrap();
        let mut changed = versioned("1.0");
        changed.command_template = "itsx --other {input:seqs} {output:out.txt}".into();
        let err = reg.install(changed, 2).unwrap_err();
        assert!(matches!(err, RegistryError::DuplicateVersion { .. }));
    }

    #[test]
    fn resolve_without_version_picks_highest() {
        let mut reg = ToolRegistry::new();
        for v in ["1.0", "1.2", "1.10"] {
            reg.install(versioned(v), 0).unwrap();
        }
        // Enumerate the expected ordering over the installed set by pairwise
        // comparison, independent of the registry's internal choice.
        let mut versions = ["1.0", "1.2", "1.10"];
        versions.sort_by(|a, b| cmp_versions(a, b));
        let expected = *versions.last().unwrap();
        assert_eq!(expected, "1.10");
        assert_eq!(reg.resolve("itsx", None).unwrap().version, expected);
    }

    #[test]
    fn resolve_miss_is_unknown_tool() {
        let reg = ToolRegistry::new();
        assert!(matches!(
            reg.resolve("nope", Some("1")),
            Err(RegistryError::UnknownTool { .. })
        ));
    }

    #[test]
    fn version_ordering_mixes_numeric_and_text() {
        assert_eq!(cmp_versions("1.2", "1.10"), Ordering::Less);
        assert_eq!(cmp_versions("1.0", "1.0.1"), Ordering::Less);
        assert_eq!(cmp_versions("1.0b", "1.0a"), Ordering::Greater);
        assert_eq!(cmp_versions("2.0", "10.0"), Ordering::Less);
    }

    #[test]
    fn retention_is_monotone_over_random_installs() {
        let mut reg = ToolRegistry::new();
        let mut resolvable: Vec<String> = Vec::new();
        for i in 0..40u64 {
            let v = format!("{}.{}", i % 7, (i * 13) % 5);
            let _ = reg.install(versioned(&v), i);
            if !resolvable.contains(&v) {
                resolvable.push(v);
            }
            for seen in &resolvable {
                assert!(
                    reg.resolve("itsx", Some(seen)).is_ok(),
                    "version {seen} lost after install #{i}"
                );
            }
        }
    }

    #[test]
    fn persists_one_file_per_version() {
        let dir = tempfile::tempdir().unwrap();
        persist_descriptor(dir.path(), &versioned("1.0"), 5).unwrap();
        persist_descriptor(dir.path(), &versioned("2.0"), 6).unwrap();
        assert!(dir.path().join("itsx__1.0.xml").exists());
        assert!(dir.path().join("itsx__2.0.xml").exists());
        let reg = load_registry_dir(dir.path()).unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.install_log().len(), 2);
    }
}
