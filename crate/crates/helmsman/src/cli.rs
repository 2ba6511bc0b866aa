//! Admin CLI. Exit codes: 0 success, 1 validation or runtime failure,
//! 2 usage error.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use helmsman_core::corpus;
use helmsman_core::engine::Engine;
use helmsman_core::llm::{self, BackendKind};
use helmsman_core::session::Session;
use helmsman_core::Language;

use crate::chat::{Chat, CHAT_SESSION_ID};
use crate::config::Config;
use crate::runtime;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "helmsman", version, about = "Task routing, tailored docs and plugin execution for a design-tool assistant")]
pub struct Cli {
    /// Configuration file (TOML). HELMSMAN_* variables override it.
    #[arg(long, global = true, env = "HELMSMAN_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the source manuals into fragments and report what was found.
    Ingest {
        /// Also write fragments.<lang>.json files here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-check taxonomy, both corpora, plugins and the workspace.
    Validate,
    /// Headless chat against a scripted model.
    Chat {
        /// Model script (tab-separated rules).
        #[arg(long)]
        script: PathBuf,
        /// Input lines; reads stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "en")]
        lang: Language,
    },
    /// Run the HTTP service.
    Serve {
        /// Overrides server.bind.
        #[arg(long)]
        bind: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<Config, String> {
    Config::load(cli.config.as_deref(), std::env::vars()).map_err(|e| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let mut config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    match cli.command {
        Command::Ingest { out: dir } => ingest(&config, dir, out, err),
        Command::Validate => validate(&config, out, err),
        Command::Chat { script, input, lang } => {
            config.backend.kind = BackendKind::Scripted;
            config.backend.script_path = Some(script);
            chat(&config, input, lang, out, err)
        }
        Command::Serve { bind } => {
            if let Some(b) = bind {
                config.server.bind = b;
            }
            match crate::serve(config) {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    EXIT_FAILURE
                }
            }
        }
    }
}

fn ingest(config: &Config, dir: Option<PathBuf>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut status = EXIT_OK;
    for (language, src) in [(Language::En, &config.data.docs_en), (Language::Zh, &config.data.docs_zh)] {
        match corpus::ingest(src, language) {
            Ok(fragments) => {
                let assets: usize = fragments.iter().map(|f| f.assets.len()).sum();
                let _ = writeln!(out, "{language}: {} fragments, {assets} assets", fragments.len());
                if let Some(dir) = &dir {
                    let path = dir.join(format!("fragments.{language}.json"));
                    let json = serde_json::to_string_pretty(&fragments).expect("fragments serialize");
                    if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, json)) {
                        let _ = writeln!(err, "error: writing {}: {e}", path.display());
                        status = EXIT_FAILURE;
                    }
                }
            }
            Err(e) => {
                let _ = writeln!(err, "error: {language}: {e}");
                status = EXIT_FAILURE;
            }
        }
    }
    status
}

fn validate(config: &Config, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let report = runtime::validate(config);
    for w in &report.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    for e in &report.errors {
        let _ = writeln!(err, "error: {e}");
    }
    match &report.loaded {
        Some(l) if report.is_ok() => {
            let _ = writeln!(
                out,
                "ok: {} main tasks, {} subtasks, {} en fragments, {} zh fragments, {} plugins",
                l.taxonomy.main_tasks.len(),
                l.taxonomy.subtasks().count(),
                l.fragments.ids(Language::En).len(),
                l.fragments.ids(Language::Zh).len(),
                l.registry.len()
            );
            EXIT_OK
        }
        _ => {
            let _ = writeln!(err, "validation failed with {} error(s)", report.errors.len());
            EXIT_FAILURE
        }
    }
}

fn chat(config: &Config, input: Option<PathBuf>, lang: Language, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let report = runtime::validate(config);
    let Some(loaded) = report.loaded else {
        for e in &report.errors {
            let _ = writeln!(err, "error: {e}");
        }
        return EXIT_FAILURE;
    };
    let backend = match llm::connect(&config.backend_config()) {
        Ok(b) => b,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_FAILURE;
        }
    };
    // in-memory stores only: a headless run leaves nothing behind
    let mut engine = Engine::new(backend, loaded.taxonomy, loaded.fragments, loaded.registry, loaded.workspace);
    engine.settings = config.engine_settings();
    let engine = Arc::new(engine);
    let mut chat = Chat::new(&engine, Session::with_id(CHAT_SESSION_ID, lang));

    let lines: Box<dyn Iterator<Item = std::io::Result<String>>> = match input {
        Some(path) => match std::fs::read_to_string(&path) {
            Ok(text) => Box::new(text.lines().map(|l| Ok(l.to_string())).collect::<Vec<_>>().into_iter()),
            Err(e) => {
                let _ = writeln!(err, "error: reading {}: {e}", path.display());
                return EXIT_FAILURE;
            }
        },
        None => Box::new(std::io::stdin().lock().lines()),
    };
    let mut first = true;
    for line in lines {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                let _ = writeln!(err, "error: reading input: {e}");
                return EXIT_FAILURE;
            }
        };
        if let Some(block) = chat.step(&line) {
            if !first {
                let _ = writeln!(out);
            }
            first = false;
            let _ = write!(out, "{block}");
            let _ = out.flush();
        }
    }
    EXIT_OK
}
