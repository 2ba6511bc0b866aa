//! Checks against the demo data shipped in the repository.

use std::collections::BTreeMap;
use std::path::PathBuf;

use helmsman_core::corpus::{ingest, FragmentStore};
use helmsman_core::executor::{Executor, Outcome};
use helmsman_core::plugins::{load_dir, parse_manifest, render_manifest, Origin};
use helmsman_core::taxonomy::{read_taxonomy, DEFAULT_MAIN_TASKS};
use helmsman_core::workspace::{ItemKind, Workspace, WorkspaceState};
use helmsman_core::Language;

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn fragments() -> FragmentStore {
    FragmentStore::load(&[
        (Language::En, data().join("docs/en")),
        (Language::Zh, data().join("docs/zh")),
    ])
    .unwrap()
}

#[test]
fn taxonomy_resolves_in_both_languages() {
    let tax = read_taxonomy(&data().join("taxonomy.toml")).unwrap();
    assert_eq!(tax.main_tasks.len(), DEFAULT_MAIN_TASKS);
    assert!(tax.problems().is_empty());
    let store = fragments();
    assert!(tax.dangling_fragments(&store, &Language::ALL).is_empty());
    assert!(store.parity_gaps().is_empty());
    for main in &tax.main_tasks {
        assert!(!main.subtasks.is_empty(), "{} has no subtasks", main.id);
    }
}

#[test]
fn ingest_is_deterministic() {
    for lang in Language::ALL {
        let dir = data().join("docs").join(lang.as_str());
        let a = serde_json::to_string(&ingest(&dir, lang).unwrap()).unwrap();
        let b = serde_json::to_string(&ingest(&dir, lang).unwrap()).unwrap();
        assert_eq!(a, b, "{lang}");
    }
    assert_eq!(fragments().version(), fragments().version());
}

#[test]
fn every_bundled_plugin_round_trips() {
    let registry = load_dir(&data().join("plugins")).unwrap();
    assert_eq!(registry.len(), 5);
    for m in registry.manifests.values() {
        assert_eq!(m.origin, Origin::Bundled, "{}", m.plugin_id);
        let back = parse_manifest(&render_manifest(m)).unwrap();
        assert_eq!(&back, m);
        assert!(m.display_name_zh.is_some() && m.description_zh.is_some(), "{} lacks zh text", m.plugin_id);
    }
}

fn demo() -> Workspace {
    Workspace::new("demo", WorkspaceState::load(&data().join("workspace/demo.ws")).unwrap())
}

#[test]
fn round_tracker_rounds_the_sharp_tracks() {
    let registry = load_dir(&data().join("plugins")).unwrap();
    let mut ws = demo();
    let sharp = ws
        .state
        .items_of(ItemKind::Track)
        .filter(|(_, t)| t.prop("corner_style") == Some("sharp"))
        .count();
    let r = Executor::default().execute("round-tracker", &BTreeMap::new(), &registry, &mut ws);
    assert_eq!(r.outcome, Outcome::Ok, "{:?}", r.error);
    assert_eq!(r.diff.len(), sharp);
    assert!(ws
        .state
        .items_of(ItemKind::Track)
        .all(|(_, t)| t.prop("corner_style") == Some("rounded")));
}

#[test]
fn lock_footprints_in_a_subprocess() {
    let registry = load_dir(&data().join("plugins")).unwrap();
    let ex = Executor::default();
    let mut ws = demo();
    let footprints = ws.state.items_of(ItemKind::Footprint).count();
    let first = ex.execute("lock-footprints", &BTreeMap::new(), &registry, &mut ws);
    assert_eq!(first.outcome, Outcome::Ok, "{:?}", first.error);
    assert_eq!(first.diff.len(), footprints);
    assert_eq!(ws.state.version, 1);
    assert!(first.stdout_excerpt.contains("footprints locked"));

    // declared idempotent: a second run changes nothing
    let second = ex.execute("lock-footprints", &BTreeMap::new(), &registry, &mut ws);
    assert_eq!(second.outcome, Outcome::Ok);
    assert!(second.diff.is_empty());
    assert_eq!(ws.state.version, 1);

    // locking footprints does not block track edits
    let r = ex.execute("round-tracker", &BTreeMap::new(), &registry, &mut ws);
    assert_eq!(r.outcome, Outcome::Ok);
}
