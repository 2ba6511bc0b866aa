//! Argument elicitation and plugin execution against a [`Workspace`].
//!
//! Every execution snapshots the workspace first. Rejected runs never touch
//! it, failed runs are rolled back, so in both cases the serialized state is
//! unchanged. Subprocess plugins run via `sh -c` inside a temporary jail
//! directory holding `workspace.ws`; on Linux the child is confined to that
//! directory with landlock.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::plugins::{
    substitute_command, validate_arguments, ArgumentError, BindingKind, InputExample, ParamKind,
    ParamValue, PluginManifest, Registry,
};
use crate::workspace::{diff, apply_diff, DiffEntry, Item, ItemKind, Workspace, WorkspaceError, WorkspaceState};

/// Effects available to `builtin_sim` manifests.
pub const BUILTIN_EFFECTS: &[&str] = &["round-tracker", "teardrop", "track-width", "add-text"];

pub const WORKSPACE_FILE_NAME: &str = "workspace.ws";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const EXCERPT_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPrompt {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
    pub unit: Option<String>,
    pub default: Option<ParamValue>,
    pub allowed_values: Vec<String>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationForm {
    pub plugin_id: String,
    pub display_name: String,
    pub prompts: Vec<ParamPrompt>,
    pub examples: Vec<InputExample>,
}

impl ElicitationForm {
    /// True when nothing has to be asked before running.
    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// One prompt per parameter in manifest order, plus the manifest's examples.
pub fn elicit(manifest: &PluginManifest) -> ElicitationForm {
    ElicitationForm {
        plugin_id: manifest.plugin_id.clone(),
        display_name: manifest.display_name.clone(),
        prompts: manifest
            .parameters
            .iter()
            .map(|p| ParamPrompt {
                name: p.name.clone(),
                kind: p.kind,
                required: p.required,
                unit: p.unit.clone(),
                default: p.default.clone(),
                allowed_values: p.allowed_values.clone(),
                description: p.description.clone(),
            })
            .collect(),
        examples: manifest.input_examples.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Failed,
    Rejected,
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("validation failed: {0}")]
    ValidationFailed(#[from] ArgumentError),
    #[error("subprocess exited with {code:?}: {stderr}")]
    SubprocessFailed { code: Option<i32>, stderr: String },
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("effect failed: {0}")]
    EffectFailed(String),
    #[error("jail setup failed: {0}")]
    Jail(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub exec_id: String,
    pub workspace_id: String,
    pub plugin_id: String,
    pub args: BTreeMap<String, ParamValue>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub outcome: Outcome,
    pub diff: Vec<DiffEntry>,
    pub stdout_excerpt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub version_before: u64,
    pub version_after: u64,
}

impl ExecutionRecord {
    /// Re-applies this record's diff to the pre-execution state.
    pub fn replay(&self, pre: &WorkspaceState) -> Result<WorkspaceState, WorkspaceError> {
        let mut next = apply_diff(pre, &self.diff)?;
        next.version = self.version_after;
        if self.version_after != self.version_before {
            next.dirty = true;
        }
        Ok(next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JailMode {
    /// Fail subprocess runs when the kernel cannot enforce the jail.
    Required,
    /// Enforce when possible, log a warning otherwise.
    BestEffort,
    Off,
}

#[derive(Debug, Clone)]
pub struct ExecutorConfig {
    pub timeout: Duration,
    pub jail: JailMode,
    /// Append-only JSON-lines log of execution records.
    pub log_path: Option<PathBuf>,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            jail: JailMode::BestEffort,
            log_path: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct Executor {
    pub config: ExecutorConfig,
    log_lock: Mutex<()>,
}

impl Executor {
    pub fn new(config: ExecutorConfig) -> Self {
        Self {
            config,
            log_lock: Mutex::new(()),
        }
    }

    /// Runs `plugin_id` against `ws`. The outcome is encoded in the record;
    /// the workspace is left untouched unless the outcome is ok.
    pub fn execute(
        &self,
        plugin_id: &str,
        args: &BTreeMap<String, ParamValue>,
        registry: &Registry,
        ws: &mut Workspace,
    ) -> ExecutionRecord {
        self.execute_as(&uuid::Uuid::new_v4().to_string(), plugin_id, args, registry, ws)
    }

    /// Same as [`Executor::execute`] with a caller-chosen execution id.
    pub fn execute_as(
        &self,
        exec_id: &str,
        plugin_id: &str,
        args: &BTreeMap<String, ParamValue>,
        registry: &Registry,
        ws: &mut Workspace,
    ) -> ExecutionRecord {
        let started_at = Utc::now();
        let version_before = ws.state.version;
        let mut record = ExecutionRecord {
            exec_id: exec_id.to_string(),
            workspace_id: ws.id.clone(),
            plugin_id: plugin_id.to_string(),
            args: args.clone(),
            started_at,
            finished_at: started_at,
            outcome: Outcome::Rejected,
            diff: vec![],
            stdout_excerpt: String::new(),
            error: None,
            version_before,
            version_after: version_before,
        };

        let prepared = registry
            .get(plugin_id)
            .ok_or_else(|| ExecError::UnknownPlugin(plugin_id.to_string()))
            .and_then(|m| Ok((m, validate_arguments(m, args)?)));
        let (manifest, normalized) = match prepared {
            Ok(p) => p,
            Err(e) => {
                record.error = Some(e.to_string());
                return self.finish(record);
            }
        };
        record.args = normalized.clone();

        let token = ws.snapshot();
        let pre = ws.state.clone();
        let run = match manifest.executor_binding.kind {
            BindingKind::BuiltinSim => {
                apply_builtin(&manifest.executor_binding.command, &normalized, &mut ws.state)
                    .map(|_| String::new())
            }
            BindingKind::Subprocess => self.run_subprocess(manifest, &normalized, &mut ws.state),
        };
        match run {
            Ok(stdout) => {
                // header fields belong to the executor, not the plugin
                ws.state.version = pre.version;
                ws.state.dirty = pre.dirty;
                let d = diff(&pre, &ws.state);
                if !d.is_empty() || !manifest.idempotent {
                    ws.state.version += 1;
                    ws.state.dirty = true;
                }
                record.outcome = Outcome::Ok;
                record.diff = d;
                record.stdout_excerpt = excerpt(&stdout);
                record.version_after = ws.state.version;
                ws.clear_snapshots();
            }
            Err(e) => {
                if let Err(rb) = ws.rollback(token) {
                    // snapshot was taken above, so this cannot happen
                    ws.state = pre;
                    tracing::error!("rollback failed: {rb}");
                }
                ws.clear_snapshots();
                record.outcome = match e {
                    ExecError::ValidationFailed(_) => Outcome::Rejected,
                    _ => Outcome::Failed,
                };
                if let ExecError::SubprocessFailed { stderr, .. } = &e {
                    record.stdout_excerpt = excerpt(stderr);
                }
                record.error = Some(e.to_string());
            }
        }
        self.finish(record)
    }

    fn finish(&self, mut record: ExecutionRecord) -> ExecutionRecord {
        record.finished_at = Utc::now();
        if let Some(path) = &self.config.log_path {
            let _guard = self.log_lock.lock().expect("exec log lock");
            let line = serde_json::to_string(&record).expect("record serializes") + "\n";
            let written = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(line.as_bytes()));
            if let Err(e) = written {
                tracing::warn!("cannot append to execution log {}: {e}", path.display());
            }
        }
        record
    }

    fn run_subprocess(
        &self,
        manifest: &PluginManifest,
        args: &BTreeMap<String, ParamValue>,
        state: &mut WorkspaceState,
    ) -> Result<String, ExecError> {
        let jail = tempfile::Builder::new().prefix("helmsman-jail-").tempdir()?;
        let ws_file = jail.path().join(WORKSPACE_FILE_NAME);
        state.save(&ws_file)?;
        let command = substitute_command(&manifest.executor_binding.command, args);
        let out = run_jailed(&command, jail.path(), &ws_file, self.config.timeout, self.config.jail)?;
        if out.code != Some(0) {
            return Err(ExecError::SubprocessFailed {
                code: out.code,
                stderr: excerpt(&out.stderr),
            });
        }
        *state = WorkspaceState::load(&ws_file)?;
        Ok(out.stdout)
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(EXCERPT_CHARS).collect()
}

struct ProcessOutput {
    code: Option<i32>,
    stdout: String,
    stderr: String,
}

fn drain(mut r: impl Read + Send + 'static) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// True when the running kernel can fully enforce the subprocess jail.
pub fn jail_supported() -> bool {
    std::thread::spawn(|| {
        restrict_current_thread(Path::new("/nonexistent-helmsman-jail")).unwrap_or(false)
    })
    .join()
    .unwrap_or(false)
}

/// Landlock domains are per thread and inherited by children, so the
/// restriction is applied on a throwaway thread that then spawns the child.
fn restrict_current_thread(jail: &Path) -> Result<bool, String> {
    use landlock::{
        path_beneath_rules, Access, AccessFs, Ruleset, RulesetAttr, RulesetCreatedAttr,
        RulesetStatus, ABI,
    };
    let abi = ABI::V2;
    let system: Vec<&str> = ["/usr", "/bin", "/lib", "/lib64"]
        .into_iter()
        .filter(|p| Path::new(p).exists())
        .collect();
    let mut jail_paths = vec![jail];
    if !jail.exists() {
        jail_paths.clear();
    }
    let status = Ruleset::default()
        .handle_access(AccessFs::from_all(abi))
        .and_then(|r| r.create())
        .and_then(|r| r.add_rules(path_beneath_rules(&system, AccessFs::from_read(abi))))
        .and_then(|r| {
            r.add_rules(path_beneath_rules(
                ["/dev/null"].iter().filter(|p| Path::new(p).exists()),
                AccessFs::ReadFile | AccessFs::WriteFile,
            ))
        })
        .and_then(|r| r.add_rules(path_beneath_rules(&jail_paths, AccessFs::from_all(abi))))
        .and_then(|r| r.restrict_self())
        .map_err(|e| e.to_string())?;
    Ok(status.ruleset == RulesetStatus::FullyEnforced)
}

fn run_jailed(
    command: &str,
    jail: &Path,
    ws_file: &Path,
    timeout: Duration,
    mode: JailMode,
) -> Result<ProcessOutput, ExecError> {
    let command = command.to_string();
    let jail = jail.to_path_buf();
    let ws_file = ws_file.to_path_buf();
    std::thread::spawn(move || {
        if mode != JailMode::Off {
            match restrict_current_thread(&jail) {
                Ok(true) => {}
                Ok(false) | Err(_) if mode == JailMode::BestEffort => {
                    tracing::warn!("subprocess jail is not fully enforced on this kernel");
                }
                Ok(false) => return Err(ExecError::Jail("kernel cannot enforce the jail".into())),
                Err(e) => return Err(ExecError::Jail(e)),
            }
        }
        spawn_and_wait(&command, &jail, &ws_file, timeout)
    })
    .join()
    .map_err(|_| ExecError::Jail("jail thread panicked".into()))?
}

fn spawn_and_wait(
    command: &str,
    jail: &Path,
    ws_file: &Path,
    timeout: Duration,
) -> Result<ProcessOutput, ExecError> {
    use std::os::unix::process::CommandExt;
    let mut child = Command::new("/bin/sh")
        .arg("-c")
        .arg(command)
        .current_dir(jail)
        .env_clear()
        .env("PATH", "/usr/bin:/bin")
        .env("HOME", jail)
        .env("WORKSPACE_FILE", ws_file)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()?;
    let out = drain(child.stdout.take().expect("piped stdout"));
    let err = drain(child.stderr.take().expect("piped stderr"));
    let deadline = Instant::now() + timeout;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            // the child leads its own group, so this reaches its children too
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.wait();
            return Err(ExecError::Timeout(timeout));
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    Ok(ProcessOutput {
        code: status.code(),
        stdout: out.join().unwrap_or_default(),
        stderr: err.join().unwrap_or_default(),
    })
}

fn arg_text(args: &BTreeMap<String, ParamValue>, name: &str) -> Option<String> {
    args.get(name).map(ParamValue::to_text)
}

fn is_locked(item: &Item) -> bool {
    item.prop("locked") == Some("true")
}

/// Applies a built-in effect in place. Effects that fail part-way leave the
/// state partially modified; the caller rolls back.
pub fn apply_builtin(
    effect: &str,
    args: &BTreeMap<String, ParamValue>,
    state: &mut WorkspaceState,
) -> Result<(), ExecError> {
    match effect {
        "round-tracker" => {
            let radius = arg_text(args, "radius_mil");
            for (id, item) in state.items.iter_mut().filter(|(_, i)| i.kind == ItemKind::Track) {
                if is_locked(item) {
                    return Err(ExecError::EffectFailed(format!("track {id} is locked")));
                }
                item.properties.insert("corner_style".into(), "rounded".into());
                if let Some(r) = &radius {
                    item.properties.insert("corner_radius_mil".into(), r.clone());
                }
            }
        }
        "teardrop" => {
            let size = arg_text(args, "size_percent");
            for (_, item) in state.items.iter_mut().filter(|(_, i)| i.kind == ItemKind::Pad) {
                item.properties.insert("teardrop".into(), "true".into());
                if let Some(s) = &size {
                    item.properties.insert("teardrop_size_percent".into(), s.clone());
                }
            }
        }
        "track-width" => {
            let width = arg_text(args, "width_mil")
                .ok_or_else(|| ExecError::EffectFailed("width_mil is required".into()))?;
            let layer = arg_text(args, "layer");
            for (id, item) in state.items.iter_mut().filter(|(_, i)| i.kind == ItemKind::Track) {
                if layer.as_deref().is_some_and(|l| item.prop("layer") != Some(l)) {
                    continue;
                }
                if is_locked(item) {
                    return Err(ExecError::EffectFailed(format!("track {id} is locked")));
                }
                item.properties.insert("width_mil".into(), width.clone());
            }
        }
        "add-text" => {
            let text = arg_text(args, "text").unwrap_or_default();
            let n = (1..)
                .find(|n| !state.items.contains_key(&format!("text-{n}")))
                .expect("unbounded range");
            let mut item = Item::new(ItemKind::Text).with("text", &text);
            if let Some(layer) = arg_text(args, "layer") {
                item = item.with("layer", &layer);
            }
            state.items.insert(format!("text-{n}"), item);
        }
        other => return Err(ExecError::EffectFailed(format!("unknown built-in effect {other:?}"))),
    }
    Ok(())
}

/// Workspaces keyed by id, each behind its own lock so executions on one
/// workspace are serialized while distinct workspaces run concurrently.
#[derive(Debug, Default)]
pub struct WorkspaceStore {
    inner: Mutex<HashMap<String, Arc<Mutex<Workspace>>>>,
}

impl WorkspaceStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// The workspace for `id`, created from `template` on first use.
    pub fn get_or_create(&self, id: &str, template: &WorkspaceState) -> Arc<Mutex<Workspace>> {
        self.inner
            .lock()
            .expect("workspace store lock")
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(Workspace::new(id, template.clone()))))
            .clone()
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<Workspace>>> {
        self.inner.lock().expect("workspace store lock").get(id).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plugins::{parse_manifest, Origin};

    const ROUND: &str = "[plugin]\nid = round-tracker\ndisplay_name = Round tracker\n\
        description = rounds sharp track corners\nbinding = builtin_sim\ncommand = round-tracker\n\
        idempotent = true\n\n[param radius_mil]\nkind = number\nunit = mil\ndescription = radius\n\n\
        [example 1]\ncaption = fifteen\nradius_mil = 15\n";

    const ADD_TEXT: &str = "[plugin]\nid = add-text\ndisplay_name = Add text\n\
        description = adds a text label\nbinding = builtin_sim\ncommand = add-text\n\
        idempotent = false\n\n[param text]\nkind = string\nrequired = true\ndescription = label\n";

    fn registry(extra: &[&str]) -> Registry {
        let mut r = Registry::new();
        for text in [ROUND, ADD_TEXT].iter().chain(extra) {
            let mut m = parse_manifest(text).unwrap();
            m.origin = Origin::Bundled;
            r.register(m).unwrap();
        }
        r
    }

    fn two_tracks() -> Workspace {
        let mut s = WorkspaceState::default();
        s.items.insert("track-1".into(), Item::new(ItemKind::Track).with("corner_style", "sharp"));
        s.items.insert("track-2".into(), Item::new(ItemKind::Track).with("corner_style", "sharp"));
        s.items.insert("pad-1".into(), Item::new(ItemKind::Pad));
        Workspace::new("ws", s)
    }

    fn args(pairs: &[(&str, &str)]) -> BTreeMap<String, ParamValue> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), ParamValue::String(v.to_string())))
            .collect()
    }

    #[test]
    fn elicit_passes_examples_through() {
        let m = parse_manifest(ROUND).unwrap();
        let form = elicit(&m);
        assert_eq!(form.prompts.len(), 1);
        assert_eq!(form.examples, m.input_examples);
        let mut bare = m.clone();
        bare.parameters.clear();
        bare.input_examples.clear();
        assert!(elicit(&bare).is_empty());
    }

    #[test]
    fn round_tracker_then_idempotent_rerun() {
        let reg = registry(&[]);
        let ex = Executor::default();
        let mut ws = two_tracks();
        let r = ex.execute("round-tracker", &BTreeMap::new(), &reg, &mut ws);
        assert_eq!(r.outcome, Outcome::Ok);
        assert_eq!(r.diff.len(), 2);
        assert_eq!(ws.state.version, 1);
        let after_first = ws.state.render();
        let r = ex.execute("round-tracker", &BTreeMap::new(), &reg, &mut ws);
        assert_eq!(r.outcome, Outcome::Ok);
        assert!(r.diff.is_empty());
        assert_eq!(ws.state.render(), after_first);
    }

    #[test]
    fn non_idempotent_always_bumps() {
        let reg = registry(&[]);
        let ex = Executor::default();
        let mut ws = two_tracks();
        ex.execute("add-text", &args(&[("text", "A")]), &reg, &mut ws);
        let r = ex.execute("add-text", &args(&[("text", "A")]), &reg, &mut ws);
        assert_eq!(r.diff[0].item_id, "text-2");
        assert_eq!(ws.state.version, 2);
    }

    #[test]
    fn rejected_and_failed_leave_state() {
        let reg = registry(&[]);
        let ex = Executor::default();
        let mut ws = two_tracks();
        ws.state.items.get_mut("track-2").unwrap().properties.insert("locked".into(), "true".into());
        let before = ws.state.render();
        let r = ex.execute("round-tracker", &args(&[("radius_mil", "wide")]), &reg, &mut ws);
        assert_eq!(r.outcome, Outcome::Rejected);
        assert!(r.error.is_some());
        assert_eq!(ws.state.render(), before);
        let r = ex.execute("round-tracker", &BTreeMap::new(), &reg, &mut ws);
        assert_eq!(r.outcome, Outcome::Failed);
        assert_eq!(ws.state.render(), before);
        let r = ex.execute("nope", &BTreeMap::new(), &reg, &mut ws);
        assert_eq!(r.outcome, Outcome::Rejected);
    }

    #[test]
    fn replay_reproduces_post_state() {
        let reg = registry(&[]);
        let ex = Executor::default();
        let mut ws = two_tracks();
        let pre = ws.state.clone();
        let r = ex.execute("round-tracker", &args(&[("radius_mil", "12.5")]), &reg, &mut ws);
        assert_eq!(r.replay(&pre).unwrap(), ws.state);
    }

    const LOCK: &str = "[plugin]\nid = lock-all\ndisplay_name = Lock\ndescription = locks tracks\n\
        binding = subprocess\ncommand = \"sed -i 's/^kind = track$/kind = track\\\\nlocked = \\\"true\\\"/' \\\"$WORKSPACE_FILE\\\" && echo {tag}\"\n\
        idempotent = true\n\n[param tag]\nkind = string\ndefault = done\ndescription = echo\n";

    #[test]
    fn subprocess_rewrites_workspace() {
        let reg = registry(&[LOCK]);
        let ex = Executor::default();
        let mut ws = two_tracks();
        let r = ex.execute("lock-all", &BTreeMap::new(), &reg, &mut ws);
        assert_eq!(r.outcome, Outcome::Ok, "{:?}", r.error);
        assert_eq!(r.stdout_excerpt.trim(), "done");
        assert_eq!(ws.state.items["track-1"].prop("locked"), Some("true"));
        assert_eq!(ws.state.version, 1);
    }

    #[test]
    fn subprocess_failure_and_timeout_roll_back() {
        let fail = "[plugin]\nid = fail\ndisplay_name = F\ndescription = breaks\nbinding = subprocess\n\
            command = \"echo junk > \\\"$WORKSPACE_FILE\\\"; echo oops >&2; exit 3\"\n";
        let slow = "[plugin]\nid = slow\ndisplay_name = S\ndescription = sleeps\nbinding = subprocess\n\
            command = \"sleep 5 & sleep 5\"\n";
        let reg = registry(&[fail, slow]);
        let ex = Executor::new(ExecutorConfig {
            timeout: Duration::from_millis(300),
            ..Default::default()
        });
        let mut ws = two_tracks();
        let before = ws.state.render();
        let r = ex.execute("fail", &BTreeMap::new(), &reg, &mut ws);
        assert_eq!(r.outcome, Outcome::Failed);
        assert!(r.error.as_deref().unwrap().contains("Some(3)"));
        assert_eq!(r.stdout_excerpt.trim(), "oops");
        assert_eq!(ws.state.render(), before);

        let t = Instant::now();
        let r = ex.execute("slow", &BTreeMap::new(), &reg, &mut ws);
        assert_eq!(r.outcome, Outcome::Failed);
        assert!(r.error.as_deref().unwrap().contains("timed out"));
        assert!(t.elapsed() < Duration::from_secs(3));
        assert_eq!(ws.state.render(), before);
    }

    #[test]
    fn jail_blocks_escape() {
        if !jail_supported() {
            eprintln!("landlock unavailable, skipping containment check");
            return;
        }
        let outside = tempfile::tempdir().unwrap();
        let secret = outside.path().join("secret.txt");
        std::fs::write(&secret, "s3cret").unwrap();
        let probe = format!(
            "[plugin]\nid = probe\ndisplay_name = P\ndescription = escapes\nbinding = subprocess\n\
             command = \"cat {0}/secret.txt; echo x > {0}/written.txt; echo inside > ./ok.txt; cat ./ok.txt\"\n",
            outside.path().display()
        );
        let reg = registry(&[&probe]);
        let ex = Executor::new(ExecutorConfig {
            jail: JailMode::Required,
            ..Default::default()
        });
        let mut ws = two_tracks();
        let r = ex.execute("probe", &BTreeMap::new(), &reg, &mut ws);
        // the last command succeeds inside the jail, so the run is ok
        assert_eq!(r.outcome, Outcome::Ok, "{:?}", r.error);
        assert!(!r.stdout_excerpt.contains("s3cret"));
        assert!(r.stdout_excerpt.contains("inside"));
        assert!(!outside.path().join("written.txt").exists());
    }

    #[test]
    fn log_appends_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("exec.jsonl");
        let ex = Executor::new(ExecutorConfig {
            log_path: Some(log.clone()),
            ..Default::default()
        });
        let reg = registry(&[]);
        let mut ws = two_tracks();
        ex.execute("round-tracker", &BTreeMap::new(), &reg, &mut ws);
        ex.execute("nope", &BTreeMap::new(), &reg, &mut ws);
        let text = std::fs::read_to_string(&log).unwrap();
        let outcomes: Vec<String> = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["outcome"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(outcomes, ["ok", "rejected"]);
    }
}
