//! Plugin manifests, argument validation and the registry.
//!
//! Manifest files are UTF-8 text with `[plugin]`, `[param <name>]` and
//! `[example <label>]` sections holding `key = value` lines. Values may be
//! bare (trimmed) or double-quoted with `\"`, `\\`, `\n` and `\t` escapes.
//! Lines starting with `#` are comments. See `data/plugins/` for samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::{is_valid_slug, Language};

pub const MANIFEST_EXTENSION: &str = "plugin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    String,
    Integer,
    Number,
    Boolean,
    Enum,
    FilePath,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::String => "string",
            ParamKind::Integer => "integer",
            ParamKind::Number => "number",
            ParamKind::Boolean => "boolean",
            ParamKind::Enum => "enum",
            ParamKind::FilePath => "file_path",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "string" => ParamKind::String,
            "integer" => ParamKind::Integer,
            "number" => ParamKind::Number,
            "boolean" => ParamKind::Boolean,
            "enum" => ParamKind::Enum,
            "file_path" => ParamKind::FilePath,
            _ => return None,
        })
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A parameter or argument value. JSON numbers without a fractional part
/// deserialize as integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Boolean(bool),
    Integer(i64),
    Number(f64),
    String(String),
}

impl ParamValue {
    fn type_name(&self) -> &'static str {
        match self {
            ParamValue::Boolean(_) => "boolean",
            ParamValue::Integer(_) => "integer",
            ParamValue::Number(_) => "number",
            ParamValue::String(_) => "string",
        }
    }

    /// Plain text form, used for command substitution and enum matching.
    pub fn to_text(&self) -> String {
        match self {
            ParamValue::Boolean(b) => b.to_string(),
            ParamValue::Integer(i) => i.to_string(),
            ParamValue::Number(n) => n.to_string(),
            ParamValue::String(s) => s.clone(),
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::String(s) => write!(f, "{s:?}"),
            other => f.write_str(&other.to_text()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub allowed_values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputExample {
    pub values: BTreeMap<String, ParamValue>,
    pub caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingKind {
    Subprocess,
    BuiltinSim,
}

/// For `builtin_sim` the command names a built-in effect; for `subprocess`
/// it is a `sh -c` template with `{param}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorBinding {
    pub kind: BindingKind,
    pub command: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Bundled,
    UserDefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginManifest {
    pub plugin_id: String,
    pub display_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name_zh: Option<String>,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_zh: Option<String>,
    #[serde(default)]
    pub parameters: Vec<ParameterSpec>,
    #[serde(default)]
    pub input_examples: Vec<InputExample>,
    pub executor_binding: ExecutorBinding,
    pub idempotent: bool,
    pub origin: Origin,
}

impl PluginManifest {
    pub fn display_name_in(&self, language: Language) -> &str {
        match (language, &self.display_name_zh) {
            (Language::Zh, Some(s)) => s,
            _ => &self.display_name,
        }
    }

    pub fn description_in(&self, language: Language) -> &str {
        match (language, &self.description_zh) {
            (Language::Zh, Some(s)) => s,
            _ => &self.description,
        }
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn field_error(field: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArgumentError {
    #[error("missing required argument {0:?}")]
    MissingRequired(String),
    #[error("argument {name:?} expects {expected}, got {got}")]
    TypeMismatch {
        name: String,
        expected: ParamKind,
        got: String,
    },
    #[error("unknown argument {0:?}")]
    UnknownArgument(String),
    #[error("argument {name:?} must be one of the allowed values, got {value:?}")]
    EnumViolation { name: String, value: String },
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("plugin {0:?} is bundled and cannot be replaced")]
    DuplicateBundled(String),
    #[error("invalid manifest: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidManifest(Vec<FieldError>),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unknown plugin {0:?}")]
    NotFound(String),
}

/// Parameter names allow underscores in addition to the slug alphabet.
pub fn is_valid_param_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

fn mismatch(spec: &ParameterSpec, value: &ParamValue) -> ArgumentError {
    ArgumentError::TypeMismatch {
        name: spec.name.clone(),
        expected: spec.kind,
        got: format!("{} {}", value.type_name(), value),
    }
}

/// Converts `value` to the parameter's kind where the reading is
/// unambiguous, e.g. text "3" for an integer parameter.
fn coerce(spec: &ParameterSpec, value: &ParamValue) -> Result<ParamValue, ArgumentError> {
    use ParamValue as V;
    let out = match (spec.kind, value) {
        (ParamKind::Integer, V::Integer(i)) => V::Integer(*i),
        (ParamKind::Integer, V::Number(n))
            if n.fract() == 0.0 && n.abs() < 9.0e15 =>
        {
            V::Integer(*n as i64)
        }
        (ParamKind::Integer, V::String(s)) => match s.trim().parse::<i64>() {
            Ok(i) => V::Integer(i),
            Err(_) => return Err(mismatch(spec, value)),
        },
        (ParamKind::Number, V::Number(n)) if n.is_finite() => V::Number(*n),
        (ParamKind::Number, V::Integer(i)) => V::Number(*i as f64),
        (ParamKind::Number, V::String(s)) => match s.trim().parse::<f64>() {
            Ok(n) if n.is_finite() => V::Number(n),
            _ => return Err(mismatch(spec, value)),
        },
        (ParamKind::Boolean, V::Boolean(b)) => V::Boolean(*b),
        (ParamKind::Boolean, V::String(s)) => match s.trim() {
            "true" => V::Boolean(true),
            "false" => V::Boolean(false),
            _ => return Err(mismatch(spec, value)),
        },
        (ParamKind::String, V::String(s)) => V::String(s.clone()),
        (ParamKind::FilePath, V::String(s)) if !s.is_empty() && !s.contains('\0') => {
            V::String(s.clone())
        }
        (ParamKind::Enum, v) => {
            let text = v.to_text();
            if !spec.allowed_values.contains(&text) {
                return Err(ArgumentError::EnumViolation {
                    name: spec.name.clone(),
                    value: text,
                });
            }
            V::String(text)
        }
        _ => return Err(mismatch(spec, value)),
    };
    Ok(out)
}

/// Checks `args` against the manifest and returns the normalized map with
/// defaults filled in. Unknown names are reported first (sorted), then
/// parameters in manifest order.
pub fn validate_arguments(
    manifest: &PluginManifest,
    args: &BTreeMap<String, ParamValue>,
) -> Result<BTreeMap<String, ParamValue>, ArgumentError> {
    if let Some(unknown) = args.keys().find(|k| manifest.parameter(k).is_none()) {
        return Err(ArgumentError::UnknownArgument(unknown.clone()));
    }
    let mut out = BTreeMap::new();
    for spec in &manifest.parameters {
        match args.get(&spec.name) {
            Some(value) => {
                out.insert(spec.name.clone(), coerce(spec, value)?);
            }
            None => match &spec.default {
                Some(default) => {
                    out.insert(spec.name.clone(), coerce(spec, default)?);
                }
                None if spec.required => {
                    return Err(ArgumentError::MissingRequired(spec.name.clone()))
                }
                None => {}
            },
        }
    }
    Ok(out)
}

// `{{` and `}}` stand for literal braces
fn placeholder_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{|\}\}|\{([^{}]*)\}").expect("static regex"))
}

pub fn placeholders(template: &str) -> Vec<String> {
    placeholder_regex()
        .captures_iter(template)
        .filter_map(|c| c.get(1).map(|m| m.as_str().to_string()))
        .collect()
}

/// POSIX single-quote quoting.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Replaces each `{name}` with the quoted argument, or `''` when absent.
/// `{{` and `}}` become literal braces.
pub fn substitute_command(template: &str, args: &BTreeMap<String, ParamValue>) -> String {
    placeholder_regex()
        .replace_all(template, |c: &regex::Captures| match c.get(1) {
            Some(name) => shell_quote(
                &args
                    .get(name.as_str())
                    .map(ParamValue::to_text)
                    .unwrap_or_default(),
            ),
            None => c[0][..1].to_string(),
        })
        .into_owned()
}

fn value_matches_kind(spec: &ParameterSpec, value: &ParamValue) -> bool {
    matches!(
        (spec.kind, value),
        (ParamKind::Integer, ParamValue::Integer(_))
            | (ParamKind::Number, ParamValue::Number(_))
            | (ParamKind::Number, ParamValue::Integer(_))
            | (ParamKind::Boolean, ParamValue::Boolean(_))
            | (ParamKind::String, ParamValue::String(_))
            | (ParamKind::FilePath, ParamValue::String(_))
    ) || (spec.kind == ParamKind::Enum
        && matches!(value, ParamValue::String(s) if spec.allowed_values.contains(s)))
}

/// All field-level problems of a manifest; empty means valid.
pub fn manifest_problems(m: &PluginManifest) -> Vec<FieldError> {
    let mut errs = Vec::new();
    if !is_valid_slug(&m.plugin_id) {
        errs.push(field_error("plugin_id", "must match [a-z0-9-]{1,64}"));
    }
    if m.display_name.trim().is_empty() {
        errs.push(field_error("display_name", "must not be empty"));
    }
    if m.description.trim().is_empty() {
        errs.push(field_error("description", "must not be empty"));
    }
    let mut names = BTreeSet::new();
    for (i, p) in m.parameters.iter().enumerate() {
        let field = format!("parameters[{i}]");
        if !is_valid_param_name(&p.name) {
            errs.push(field_error(format!("{field}.name"), "must match [a-z0-9_-]{1,64}"));
        }
        if !names.insert(p.name.as_str()) {
            errs.push(field_error(format!("{field}.name"), format!("duplicate parameter {:?}", p.name)));
        }
        if p.kind == ParamKind::Enum {
            if p.allowed_values.is_empty() {
                errs.push(field_error(format!("{field}.allowed_values"), "enum needs at least one value"));
            }
            let unique: BTreeSet<_> = p.allowed_values.iter().collect();
            if unique.len() != p.allowed_values.len() {
                errs.push(field_error(format!("{field}.allowed_values"), "values must be unique"));
            }
            if p.allowed_values.iter().any(|v| v.trim().is_empty() || v.contains(',') || v.trim() != v) {
                errs.push(field_error(
                    format!("{field}.allowed_values"),
                    "values must be non-empty, trimmed and free of commas",
                ));
            }
        } else if !p.allowed_values.is_empty() {
            errs.push(field_error(format!("{field}.allowed_values"), "only enum parameters take allowed values"));
        }
        if let Some(d) = &p.default {
            if !value_matches_kind(p, d) {
                errs.push(field_error(
                    format!("{field}.default"),
                    format!("{} does not type-check as {}", d, p.kind),
                ));
            }
        }
    }
    for (i, ex) in m.input_examples.iter().enumerate() {
        if let Err(e) = validate_arguments(m, &ex.values) {
            errs.push(field_error(format!("input_examples[{i}]"), e.to_string()));
        }
    }
    let command = &m.executor_binding.command;
    if command.trim().is_empty() {
        errs.push(field_error("executor_binding.command", "must not be empty"));
    }
    match m.executor_binding.kind {
        BindingKind::BuiltinSim => {
            if !crate::executor::BUILTIN_EFFECTS.contains(&command.as_str()) {
                errs.push(field_error(
                    "executor_binding.command",
                    format!("unknown built-in effect {command:?}"),
                ));
            }
        }
        BindingKind::Subprocess => {
            for name in placeholders(command) {
                if m.parameter(&name).is_none() {
                    errs.push(field_error(
                        "executor_binding.command",
                        format!("placeholder {{{name}}} names no parameter"),
                    ));
                }
            }
        }
    }
    errs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginRow {
    pub plugin_id: String,
    pub display_name: String,
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub manifests: BTreeMap<String, PluginManifest>,
    pub version: u64,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, manifest: PluginManifest) -> Result<(), RegistryError> {
        let problems = manifest_problems(&manifest);
        if !problems.is_empty() {
            return Err(RegistryError::InvalidManifest(problems));
        }
        if let Some(existing) = self.manifests.get(&manifest.plugin_id) {
            if existing.origin == Origin::Bundled || manifest.origin == Origin::Bundled {
                return Err(RegistryError::DuplicateBundled(manifest.plugin_id));
            }
        }
        self.manifests.insert(manifest.plugin_id.clone(), manifest);
        self.version += 1;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PluginManifest> {
        self.manifests.get(id)
    }

    pub fn len(&self) -> usize {
        self.manifests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifests.is_empty()
    }

    /// Rows sorted by plugin id.
    pub fn list_plugins(&self, language: Language) -> Vec<PluginRow> {
        self.manifests
            .values()
            .map(|m| PluginRow {
                plugin_id: m.plugin_id.clone(),
                display_name: m.display_name_in(language).to_string(),
                description: m.description_in(language).to_string(),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Loads every `*.plugin` file in `dir`, in file-name order, as bundled.
pub fn load_dir(dir: &Path) -> Result<Registry, RegistryError> {
    let io = |source| RegistryError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    files.retain(|p| p.extension().is_some_and(|e| e == MANIFEST_EXTENSION));
    files.sort();
    let mut registry = Registry::new();
    for file in files {
        let text = std::fs::read_to_string(&file).map_err(|source| RegistryError::Io {
            path: file.clone(),
            source,
        })?;
        let mut manifest = parse_manifest(&text).map_err(|e| RegistryError::Parse {
            file: file.clone(),
            line: e.line,
            message: e.message,
        })?;
        manifest.origin = Origin::Bundled;
        registry.register(manifest).map_err(|e| match e {
            RegistryError::InvalidManifest(errs) => RegistryError::Parse {
                file: file.clone(),
                line: 0,
                message: RegistryError::InvalidManifest(errs).to_string(),
            },
            other => other,
        })?;
    }
    Ok(registry)
}

/// Registry behind a lock; readers get an immutable snapshot.
#[derive(Debug, Default)]
pub struct SharedRegistry {
    inner: RwLock<Arc<Registry>>,
}

impl SharedRegistry {
    pub fn new(registry: Registry) -> Self {
        Self {
            inner: RwLock::new(Arc::new(registry)),
        }
    }

    pub fn current(&self) -> Arc<Registry> {
        self.inner.read().expect("registry lock").clone()
    }

    pub fn register(&self, manifest: PluginManifest) -> Result<Arc<Registry>, RegistryError> {
        let mut guard = self.inner.write().expect("registry lock");
        let mut next = (**guard).clone();
        next.register(manifest)?;
        let next = Arc::new(next);
        *guard = next.clone();
        Ok(next)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ManifestParseError {
    pub line: usize,
    pub message: String,
}

enum Section {
    None,
    Plugin,
    Param(usize),
    Example(usize),
}

pub(crate) fn parse_value(raw: &str) -> Result<String, String> {
    let raw = raw.trim();
    let Some(inner) = raw.strip_prefix('"') else {
        return Ok(raw.to_string());
    };
    let mut out = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '"' => {
                let rest: String = chars.collect();
                if !rest.trim().is_empty() {
                    return Err(format!("unexpected text after closing quote: {rest:?}"));
                }
                return Ok(out);
            }
            '\\' => match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('"') => out.push('"'),
                Some('\\') => out.push('\\'),
                other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
            },
            c => out.push(c),
        }
    }
    Err("unterminated quoted value".into())
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}

/// Interprets manifest text for a parameter; falls back to a string so that
/// validation can report the mismatch.
fn typed_value(kind: Option<ParamKind>, text: &str) -> ParamValue {
    let as_string = ParamValue::String(text.to_string());
    let spec = match kind {
        Some(kind) if kind != ParamKind::Enum => ParameterSpec {
            name: String::new(),
            kind,
            required: false,
            default: None,
            allowed_values: vec![],
            unit: None,
            description: String::new(),
        },
        _ => return as_string,
    };
    coerce(&spec, &as_string).unwrap_or(as_string)
}

/// Parses manifest text. The origin defaults to bundled unless an `origin`
/// key says otherwise.
pub fn parse_manifest(text: &str) -> Result<PluginManifest, ManifestParseError> {
    let mut m = PluginManifest {
        plugin_id: String::new(),
        display_name: String::new(),
        display_name_zh: None,
        description: String::new(),
        description_zh: None,
        parameters: vec![],
        input_examples: vec![],
        executor_binding: ExecutorBinding {
            kind: BindingKind::BuiltinSim,
            command: String::new(),
        },
        idempotent: true,
        origin: Origin::Bundled,
    };
    let mut seen_plugin = false;
    let mut binding_set = false;
    // example values are typed once all parameters are known
    let mut raw_examples: Vec<(usize, Vec<(usize, String, String)>)> = Vec::new();
    let mut section = Section::None;
    let mut keys_in_section = BTreeSet::new();

    for (idx, line) in text.lines().enumerate() {
        let n = idx + 1;
        let err = |message: String| ManifestParseError { line: n, message };
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(header) = t.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated section header".into()))?
                .trim();
            keys_in_section.clear();
            let (kind, label) = match header.split_once(char::is_whitespace) {
                Some((k, l)) => (k, l.trim()),
                None => (header, ""),
            };
            section = match (kind, label) {
                ("plugin", "") => {
                    if seen_plugin {
                        return Err(err("duplicate [plugin] section".into()));
                    }
                    seen_plugin = true;
                    Section::Plugin
                }
                ("param", name) if !name.is_empty() => {
                    m.parameters.push(ParameterSpec {
                        name: name.to_string(),
                        kind: ParamKind::String,
                        required: false,
                        default: None,
                        allowed_values: vec![],
                        unit: None,
                        description: String::new(),
                    });
                    Section::Param(m.parameters.len() - 1)
                }
                ("example", label) if !label.is_empty() => {
                    m.input_examples.push(InputExample {
                        values: BTreeMap::new(),
                        caption: String::new(),
                    });
                    raw_examples.push((n, Vec::new()));
                    Section::Example(m.input_examples.len() - 1)
                }
                _ => return Err(err(format!("unknown section [{header}]"))),
            };
            continue;
        }
        let (key, raw) = t
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {t:?}")))?;
        let key = key.trim();
        let value = parse_value(raw).map_err(err)?;
        if !keys_in_section.insert(key.to_string()) {
            return Err(err(format!("duplicate key {key:?}")));
        }
        match section {
            Section::None => return Err(err("key outside of any section".into())),
            Section::Plugin => match key {
                "id" => m.plugin_id = value,
                "display_name" => m.display_name = value,
                "display_name_zh" => m.display_name_zh = Some(value),
                "description" => m.description = value,
                "description_zh" => m.description_zh = Some(value),
                "binding" => {
                    binding_set = true;
                    m.executor_binding.kind = match value.as_str() {
                        "builtin_sim" => BindingKind::BuiltinSim,
                        "subprocess" => BindingKind::Subprocess,
                        other => return Err(err(format!("unknown binding {other:?}"))),
                    }
                }
                "command" => m.executor_binding.command = value,
                "idempotent" => m.idempotent = parse_bool(&value).map_err(err)?,
                "origin" => {
                    m.origin = match value.as_str() {
                        "bundled" => Origin::Bundled,
                        "user_defined" => Origin::UserDefined,
                        other => return Err(err(format!("unknown origin {other:?}"))),
                    }
                }
                other => return Err(err(format!("unknown plugin key {other:?}"))),
            },
            Section::Param(i) => {
                let p = &mut m.parameters[i];
                match key {
                    "kind" => {
                        p.kind = ParamKind::parse(&value)
                            .ok_or_else(|| err(format!("unknown kind {value:?}")))?
                    }
                    "required" => p.required = parse_bool(&value).map_err(err)?,
                    "default" => p.default = Some(ParamValue::String(value)),
                    "unit" => p.unit = Some(value),
                    "description" => p.description = value,
                    "allowed_values" => {
                        p.allowed_values = value.split(',').map(|v| v.trim().to_string()).collect()
                    }
                    other => return Err(err(format!("unknown param key {other:?}"))),
                }
            }
            Section::Example(i) => {
                if key == "caption" {
                    m.input_examples[i].caption = value;
                } else {
                    raw_examples[i].1.push((n, key.to_string(), value));
                }
            }
        }
    }
    if !seen_plugin {
        return Err(ManifestParseError {
            line: 0,
            message: "missing [plugin] section".into(),
        });
    }
    if !binding_set {
        return Err(ManifestParseError {
            line: 0,
            message: "missing binding".into(),
        });
    }
    for p in &mut m.parameters {
        if let Some(ParamValue::String(text)) = &p.default {
            p.default = Some(typed_value(Some(p.kind), text));
        }
    }
    let kinds: BTreeMap<String, ParamKind> =
        m.parameters.iter().map(|p| (p.name.clone(), p.kind)).collect();
    for (i, (_, values)) in raw_examples.into_iter().enumerate() {
        for (_, key, text) in values {
            let v = typed_value(kinds.get(&key).copied(), &text);
            m.input_examples[i].values.insert(key, v);
        }
    }
    Ok(m)
}

pub(crate) fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn render_value(v: &ParamValue) -> String {
    match v {
        ParamValue::String(s) => quote(s),
        other => other.to_text(),
    }
}

/// Renders a manifest in the on-disk format; `parse_manifest` reads it back.
pub fn render_manifest(m: &PluginManifest) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("[plugin]\n");
    let _ = writeln!(out, "id = {}", m.plugin_id);
    let _ = writeln!(out, "display_name = {}", quote(&m.display_name));
    if let Some(s) = &m.display_name_zh {
        let _ = writeln!(out, "display_name_zh = {}", quote(s));
    }
    let _ = writeln!(out, "description = {}", quote(&m.description));
    if let Some(s) = &m.description_zh {
        let _ = writeln!(out, "description_zh = {}", quote(s));
    }
    let binding = match m.executor_binding.kind {
        BindingKind::BuiltinSim => "builtin_sim",
        BindingKind::Subprocess => "subprocess",
    };
    let _ = writeln!(out, "binding = {binding}");
    let _ = writeln!(out, "command = {}", quote(&m.executor_binding.command));
    let _ = writeln!(out, "idempotent = {}", m.idempotent);
    let origin = match m.origin {
        Origin::Bundled => "bundled",
        Origin::UserDefined => "user_defined",
    };
    let _ = writeln!(out, "origin = {origin}");
    for p in &m.parameters {
        let _ = writeln!(out, "\n[param {}]", p.name);
        let _ = writeln!(out, "kind = {}", p.kind);
        let _ = writeln!(out, "required = {}", p.required);
        if let Some(d) = &p.default {
            let _ = writeln!(out, "default = {}", render_value(d));
        }
        if !p.allowed_values.is_empty() {
            let _ = writeln!(out, "allowed_values = {}", quote(&p.allowed_values.join(", ")));
        }
        if let Some(u) = &p.unit {
            let _ = writeln!(out, "unit = {}", quote(u));
        }
        let _ = writeln!(out, "description = {}", quote(&p.description));
    }
    for (i, ex) in m.input_examples.iter().enumerate() {
        let _ = writeln!(out, "\n[example {}]", i + 1);
        let _ = writeln!(out, "caption = {}", quote(&ex.caption));
        for (k, v) in &ex.values {
            let _ = writeln!(out, "{k} = {}", render_value(v));
        }
    }
    out
}
