//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS or FAIL line; exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{engine_with, repo_root, shipped, FnBackend};
use helmsman_core::corpus::{qa_context, stitch};
use helmsman_core::engine::{Effect, Engine, EngineError};
use helmsman_core::executor::{Executor, Outcome, BUILTIN_EFFECTS};
use helmsman_core::llm::{load_script, CompletionRequest, Purpose, RecordingBackend, Role, ScriptedBackend};
use helmsman_core::plugins::{
    parse_manifest, render_manifest, BindingKind, ExecutorBinding, InputExample, Origin, ParamKind, ParamValue,
    ParameterSpec, PluginManifest, Registry,
};
use helmsman_core::recommender::lexical_ranking;
use helmsman_core::router::{RouterError, Router, RoutingEpisode};
use helmsman_core::session::{Event, Phase, Session, SessionStore};
use helmsman_core::workspace::{Item, ItemKind, Workspace};
use helmsman_core::Language;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: &[(&str, Check)] = &[
        ("routing bounds", routing_bounds),
        ("feedback exclusion and termination", feedback_exclusion_and_termination),
        ("default taxonomy", default_taxonomy),
        ("stitching determinism and completeness", stitching),
        ("qa grounding and context containment", qa_grounding),
        ("augmentation flow", augmentation_flow),
        ("recommender oracle equivalence", recommender_oracle),
        ("executor atomicity", executor_atomicity),
        ("end-to-end headless transcript", golden_transcript),
        ("persistence round-trips", persistence_round_trips),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = started.elapsed().as_millis();
        match result {
            Ok(detail) => println!("PASS {name} ({detail}; {ms} ms)"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- routing

const JUNK: &[&str] = &["", " ", ",", ";;", "Routing", "ROUTING!", "n/a", "task-42", "drc,drc", "\"zones\"", "-", "1)"];

/// A reply mixing valid ids (some rejected), junk and separators.
fn fuzz_id_reply(rng: &mut StdRng, ids: &[String]) -> String {
    let n = rng.gen_range(0..8);
    let mut parts = Vec::new();
    for _ in 0..n {
        if rng.gen_bool(0.6) {
            parts.push(ids.choose(rng).unwrap().clone());
        } else {
            parts.push(JUNK.choose(rng).unwrap().to_string());
        }
    }
    let sep = [", ", ",", " ", "\n", "; ", " and "].choose(rng).unwrap();
    parts.join(sep)
}

fn routing_bounds() -> Result<String, String> {
    let l = shipped();
    let tax = l.taxonomy;
    let ids: Vec<String> = tax.main_tasks.iter().map(|m| m.id.clone()).collect();
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let started = Instant::now();
    let (mut ok, mut fallbacks) = (0, 0);
    for _ in 0..1500 {
        let reply = fuzz_id_reply(&mut rng, &ids);
        let backend = FnBackend::new(move |_: &CompletionRequest| reply.clone());
        let mut episode = RoutingEpisode::new(3);
        let k = rng.gen_range(0..ids.len());
        episode.rejected_main = ids.choose_multiple(&mut rng, k).cloned().collect();
        let language = *Language::ALL.choose(&mut rng).unwrap();
        match Router::new(&backend, language).select_main("route my board traces", &tax, &episode) {
            Ok(sel) => {
                ok += 1;
                fallbacks += sel.fallback as usize;
                ensure((1..=3).contains(&sel.candidates.len()), || format!("{} candidates", sel.candidates.len()))?;
                let unique: HashSet<_> = sel.candidates.iter().collect();
                ensure(unique.len() == sel.candidates.len(), || format!("duplicates in {:?}", sel.candidates))?;
                for c in &sel.candidates {
                    ensure(ids.contains(c), || format!("unknown id {c}"))?;
                    ensure(!episode.rejected_main.contains(c), || format!("rejected id {c} returned"))?;
                }
            }
            Err(e) => return Err(format!("unexpected error {e}")),
        }
    }
    let elapsed = started.elapsed();
    ensure(ok >= 1000, || format!("only {ok} successful selections"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("{ok} fuzzed replies, {fallbacks} lexical fallbacks, {elapsed:.2?}"))
}

fn feedback_exclusion_and_termination() -> Result<String, String> {
    let tax = shipped().taxonomy;
    let main_ids: Vec<String> = tax.main_tasks.iter().map(|m| m.id.clone()).collect();
    let sub_ids: Vec<String> = tax.subtasks().map(|s| s.id.clone()).collect();
    let mut rng = StdRng::seed_from_u64(0x5eed_0002);
    let reply_rng = Arc::new(std::sync::Mutex::new(StdRng::seed_from_u64(0x5eed_0003)));
    let (m, s) = (main_ids.clone(), sub_ids.clone());
    let r = reply_rng.clone();
    let engine = engine_with(Arc::new(FnBackend::new(move |req: &CompletionRequest| {
        let mut rng = r.lock().unwrap();
        match req.purpose {
            Purpose::RouteMain => fuzz_id_reply(&mut rng, &m),
            _ => fuzz_id_reply(&mut rng, &s),
        }
    })));

    let mut outcomes: BTreeMap<&str, usize> = BTreeMap::new();
    for episode in 0..300 {
        let mut session = Session::with_id(format!("ep{episode}"), Language::En);
        let adv = engine
            .advance(&session, Event::Query { text: "fix my layout".into() })
            .map_err(|e| e.to_string())?;
        session = adv.session;
        let (mut rejected_main, mut rejected_sub) = (BTreeSet::new(), BTreeSet::new());
        let mut rejections = 0;
        let mut steps = 0;
        let end = loop {
            steps += 1;
            ensure(steps <= 8, || "episode did not terminate".into())?;
            let rs = session.routing_state.as_ref().unwrap();
            ensure(rs.episode.round <= 3, || format!("round {}", rs.episode.round))?;
            let event = match session.phase {
                Phase::RoutingMain if rng.gen_bool(0.7) => {
                    let k = rng.gen_range(1..=rs.candidates.len());
                    let ids: Vec<String> = rs.candidates.choose_multiple(&mut rng, k).cloned().collect();
                    Event::Reject { ids, reason: "not this".into() }
                }
                Phase::RoutingMain => Event::ConfirmMain {
                    main_id: rs.candidates.choose(&mut rng).cloned(),
                },
                Phase::RoutingSub if rng.gen_bool(0.6) => Event::Reject {
                    ids: vec![],
                    reason: "wrong subtask".into(),
                },
                Phase::RoutingSub => Event::ConfirmSub { subtask_id: None },
                Phase::ViewingDoc => break "confirmed",
                p => return Err(format!("unexpected phase {p}")),
            };
            let pending: Vec<String> = match &event {
                Event::Reject { ids, .. } if ids.is_empty() => rs.proposed_sub.iter().cloned().collect(),
                Event::Reject { ids, .. } => ids.clone(),
                _ => vec![],
            };
            let phase = session.phase;
            match engine.advance(&session, event) {
                Ok(adv) => {
                    if !pending.is_empty() {
                        rejections += 1;
                        match phase {
                            Phase::RoutingMain => rejected_main.extend(pending),
                            _ => rejected_sub.extend(pending),
                        }
                    }
                    for e in &adv.effects {
                        match e {
                            Effect::MainCandidates { candidates, .. } => {
                                for c in candidates {
                                    ensure(!rejected_main.contains(&c.id), || format!("{} reappeared", c.id))?;
                                }
                            }
                            Effect::SubProposal { subtask, .. } => {
                                ensure(!rejected_sub.contains(&subtask.id), || format!("{} reappeared", subtask.id))?;
                            }
                            _ => {}
                        }
                    }
                    session = adv.session;
                }
                Err(EngineError::Router(RouterError::RoundsExhausted { .. })) => break "rounds_exhausted",
                Err(EngineError::Router(RouterError::NoCandidatesLeft)) => break "no_candidates_left",
                Err(e) => return Err(format!("unexpected error {e}")),
            }
        };
        ensure(rejections <= 2, || format!("{rejections} rejections accepted"))?;
        *outcomes.entry(end).or_default() += 1;
    }
    ensure(outcomes.len() >= 2, || format!("fuzz did not cover endings: {outcomes:?}"))?;
    Ok(format!("300 episodes, endings {outcomes:?}"))
}

// --------------------------------------------------------- taxonomy, docs

fn default_taxonomy() -> Result<String, String> {
    let l = shipped();
    ensure(l.taxonomy.main_tasks.len() == 20, || format!("{} main tasks", l.taxonomy.main_tasks.len()))?;
    let mut refs = 0;
    for sub in l.taxonomy.subtasks() {
        for f in &sub.fragment_ids {
            for lang in Language::ALL {
                refs += 1;
                ensure(l.fragments.get(f, lang).is_some(), || format!("{f} missing in {lang} for {}", sub.id))?;
            }
        }
    }
    Ok(format!("20 main tasks, {refs} fragment references resolved"))
}

fn strip_tags(html: &str) -> String {
    let re = regex::Regex::new(r"<[^>]*>").unwrap();
    re.replace_all(html, " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&amp;", "&")
}

fn stitching() -> Result<String, String> {
    let l = shipped();
    let subs: Vec<_> = l.taxonomy.subtasks().cloned().collect();
    let mut rng = StdRng::seed_from_u64(0x5eed_0004);
    for _ in 0..100 {
        let sub = subs.choose(&mut rng).unwrap();
        let lang = *Language::ALL.choose(&mut rng).unwrap();
        let a = stitch(&sub.fragment_ids, lang, &l.fragments).map_err(|e| e.to_string())?;
        let b = stitch(&sub.fragment_ids, lang, &l.fragments).map_err(|e| e.to_string())?;
        ensure(a.html == b.html && a.doc_id == b.doc_id, || format!("{} not deterministic", sub.id))?;

        let mut last = 0;
        for f in &sub.fragment_ids {
            let marker = format!("data-fragment=\"{f}\"");
            ensure(a.html.matches(&marker).count() == 1, || format!("{f} not exactly once"))?;
            let at = a.html.find(&marker).unwrap();
            ensure(at > last, || format!("{f} out of order"))?;
            last = at;
        }

        let ctx = qa_context(&a);
        let ctx_words: Vec<&str> = ctx.split_whitespace().collect();
        for (i, f) in sub.fragment_ids.iter().enumerate() {
            let start = ctx.find(&format!("== {f} ==")).ok_or(format!("no marker for {f}"))?;
            let end = sub
                .fragment_ids
                .get(i + 1)
                .and_then(|n| ctx.find(&format!("== {n} ==")))
                .unwrap_or(ctx.len());
            let section = &ctx[start..end];
            let frag = l.fragments.get(f, lang).unwrap();
            for word in strip_tags(&frag.body_html).split_whitespace() {
                ensure(section.contains(word), || format!("{f}: {word:?} missing from qa_context"))?;
            }
        }
        ensure(!ctx_words.is_empty(), || "empty context".into())?;
    }
    Ok("100 random selections".into())
}

// -------------------------------------------------------------------- qa

fn happy_script() -> ScriptedBackend {
    load_script(&repo_root().join("data/scripts/happy.script")).unwrap()
}

fn open_diff_pairs(engine: &Engine) -> Result<Session, String> {
    let mut s = Session::with_id("qa", Language::En);
    for e in [
        Event::Query {
            text: "how do I route a differential pair".into(),
        },
        Event::ConfirmMain { main_id: None },
        Event::ConfirmSub { subtask_id: None },
    ] {
        s = engine.advance(&s, e).map_err(|e| e.to_string())?.session;
    }
    ensure(s.phase == Phase::ViewingDoc, || format!("phase {}", s.phase))?;
    Ok(s)
}

fn qa_grounding() -> Result<String, String> {
    // containment: the outgoing prompt carries the whole context
    let recorder = Arc::new(RecordingBackend::new(happy_script()));
    let engine = engine_with(recorder.clone());
    let s = open_diff_pairs(&engine)?;
    let doc = engine.document(s.active_doc.as_deref().unwrap()).unwrap();
    let ctx = qa_context(&doc);
    engine
        .advance(&s, Event::Question { text: "which key starts a differential pair".into() })
        .map_err(|e| e.to_string())?;
    let req = recorder.last_request().unwrap();
    ensure(req.purpose == Purpose::QaAnswer, || "last request is not qa".into())?;
    let system = &req.messages.iter().find(|m| m.role == Role::System).unwrap().content;
    ensure(system.contains(&ctx), || "qa prompt lacks the full context".into())?;

    // grounding: fuzzed citation mixes against an answer we built ourselves
    let present: Vec<String> = doc.fragment_ids.clone();
    let absent = ["ghost", "zones-intro", "x-1", "drc"];
    let mut rng = StdRng::seed_from_u64(0x5eed_0005);
    let mut grounded_seen = [0usize; 2];
    for _ in 0..500 {
        let mut cites = Vec::new();
        for _ in 0..rng.gen_range(0..4) {
            if rng.gen_bool(0.7) {
                cites.push(present.choose(&mut rng).unwrap().clone());
            } else {
                cites.push(absent.choose(&mut rng).unwrap().to_string());
            }
        }
        let expected = !cites.is_empty() && cites.iter().all(|c| present.contains(c));
        let answer: String = cites.iter().map(|c| format!("see [{c}] ")).collect::<String>() + "done";
        let exchange = helmsman_core::qa::answer(
            "q",
            &ctx,
            &[],
            &FnBackend::new(move |_: &CompletionRequest| answer.clone()),
        )
        .map_err(|e| e.to_string())?;
        ensure(exchange.grounded == expected, || format!("cites {cites:?}: grounded={}", exchange.grounded))?;
        for c in &exchange.cited_fragments {
            ensure(present.contains(c), || format!("{c} kept but not in context"))?;
        }
        grounded_seen[expected as usize] += 1;
    }
    ensure(grounded_seen.iter().all(|&n| n > 0), || "fuzz missed a case".into())?;
    Ok(format!("prompt holds {} context bytes; 500 citation mixes", ctx.len()))
}

fn augmentation_flow() -> Result<String, String> {
    for n in 1..=5usize {
        let notes: Vec<String> = (0..n).map(|i| format!("note {i}: pair gap is set in the rules dialog")).collect();
        let reply = notes.iter().map(|n| format!("- {n}")).collect::<Vec<_>>().join("\n");
        let recorder = Arc::new(RecordingBackend::new(FnBackend::new(move |req: &CompletionRequest| {
            match req.purpose {
                Purpose::RouteMain => "routing".into(),
                Purpose::RouteSub => "diff-pairs".into(),
                Purpose::Augment => reply.clone(),
                _ => "I am not sure.".into(),
            }
        })));
        let engine = engine_with(recorder.clone());
        let mut s = open_diff_pairs(&engine)?;
        let mut sizes = vec![engine.augmentations.len()];
        let mut fired = None;
        for i in 0..3 {
            let adv = engine
                .advance(&s, Event::Question { text: format!("question {i}") })
                .map_err(|e| e.to_string())?;
            s = adv.session;
            sizes.push(engine.augmentations.len());
            for e in adv.effects {
                if let Effect::Bottleneck { notes_added, .. } = e {
                    fired = Some((i, notes_added));
                }
            }
        }
        ensure(fired == Some((2, n)), || format!("bottleneck {fired:?}, expected after 3rd answer with {n} notes"))?;
        s = engine.advance(&s, Event::DeclineReroute).map_err(|e| e.to_string())?.session;
        engine
            .advance(&s, Event::Question { text: "one more".into() })
            .map_err(|e| e.to_string())?;
        sizes.push(engine.augmentations.len());
        ensure(sizes.windows(2).all(|w| w[0] <= w[1]), || format!("store shrank: {sizes:?}"))?;
        ensure(*sizes.last().unwrap() == n, || format!("store holds {sizes:?}"))?;
        let req = recorder.last_request().unwrap();
        ensure(req.purpose == Purpose::QaAnswer, || "last request is not qa".into())?;
        let system = &req.messages[0].content;
        for note in &notes {
            ensure(system.contains(note.as_str()), || format!("prompt lacks {note:?}"))?;
        }
    }
    Ok("N = 1..=5 notes reach the next prompt".into())
}

// ------------------------------------------------------------ recommender

/// Independent tokenizer: lowercase alphanumeric runs; Han characters one
/// per token.
fn oracle_tokens(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut word = String::new();
    for c in text.chars() {
        let han = ('\u{4e00}'..='\u{9fff}').contains(&c) || ('\u{3400}'..='\u{4dbf}').contains(&c);
        if c.is_alphanumeric() && !han {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.insert(std::mem::take(&mut word));
        }
        if han {
            out.insert(c.to_string());
        }
    }
    if !word.is_empty() {
        out.insert(word);
    }
    out
}

/// Brute force: exact rational scores, sorted by cross-multiplication.
fn oracle_rank(need: &str, docs: &[(String, String)]) -> Vec<(String, usize, usize)> {
    let q = oracle_tokens(need);
    let mut scored: Vec<(String, usize, usize)> = docs
        .iter()
        .map(|(id, text)| {
            let d = oracle_tokens(text);
            let inter = q.iter().filter(|t| d.contains(*t)).count();
            let union = q.len() + d.len() - inter;
            (id.clone(), inter, union)
        })
        .collect();
    scored.sort_by(|a, b| {
        let lhs = a.1 as u128 * b.2.max(1) as u128;
        let rhs = b.1 as u128 * a.2.max(1) as u128;
        rhs.cmp(&lhs).then_with(|| a.0.cmp(&b.0))
    });
    scored
}

const VOCAB: &[&str] = &[
    "track", "Tracks", "corner", "round", "ROUND", "pad", "teardrop", "export", "bill", "materials", "via",
    "width", "layer", "F.Cu", "silk-screen", "text", "label", "lock", "footprint", "3D", "zone", "fill",
    "差分", "走线", "圆角", "泪滴", "封装", "mil", "50", "x2", "and", "the", "!", ",", "(net)",
];

fn fuzz_text(rng: &mut StdRng, max_words: usize) -> String {
    let n = rng.gen_range(1..=max_words);
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn builtin_manifest(id: &str, name: &str, description: &str) -> PluginManifest {
    PluginManifest {
        plugin_id: id.into(),
        display_name: name.into(),
        display_name_zh: None,
        description: description.into(),
        description_zh: None,
        parameters: vec![],
        input_examples: vec![],
        executor_binding: ExecutorBinding {
            kind: BindingKind::BuiltinSim,
            command: "teardrop".into(),
        },
        idempotent: true,
        origin: Origin::UserDefined,
    }
}

fn recommender_oracle() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0x5eed_0006);
    let started = Instant::now();
    let mut ties = 0;
    for _ in 0..200 {
        let mut registry = Registry::new();
        let size = rng.gen_range(1..=50);
        let mut descriptions: Vec<String> = Vec::new();
        for i in 0..size {
            let description = if !descriptions.is_empty() && rng.gen_bool(0.15) {
                descriptions.choose(&mut rng).unwrap().clone()
            } else {
                fuzz_text(&mut rng, 8)
            };
            descriptions.push(description.clone());
            let name = fuzz_text(&mut rng, 2);
            let id = format!("p{:02}-{}", rng.gen_range(0..100), i);
            registry
                .register(builtin_manifest(&id, &name, &description))
                .map_err(|e| e.to_string())?;
        }
        let need = fuzz_text(&mut rng, 6);
        let docs: Vec<(String, String)> = registry
            .manifests
            .values()
            .map(|m| (m.plugin_id.clone(), format!("{} {}", m.description, m.display_name)))
            .collect();
        let expected = oracle_rank(&need, &docs);
        let got = lexical_ranking(&need, &registry, Language::En);
        ensure(got.len() == expected.len(), || "length differs".into())?;
        for ((gid, gscore), (eid, inter, union)) in got.iter().zip(&expected) {
            let escore = if *union == 0 { 0.0 } else { *inter as f64 / *union as f64 };
            ensure(gid == eid && *gscore == escore, || {
                format!("need {need:?}: got ({gid}, {gscore}) expected ({eid}, {escore})")
            })?;
        }
        ties += got.windows(2).filter(|w| w[0].1 == w[1].1).count();
    }
    let elapsed = started.elapsed();
    ensure(ties > 0, || "fuzz produced no ties".into())?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("200 instances, {ties} tied neighbours, {elapsed:.2?}"))
}

// --------------------------------------------------------------- executor

fn fuzz_value(rng: &mut StdRng, spec: &ParameterSpec) -> ParamValue {
    match rng.gen_range(0..10) {
        // deliberately wrong shapes
        0 => ParamValue::Boolean(rng.gen()),
        1 => ParamValue::String("not-a-number".into()),
        _ => match spec.kind {
            ParamKind::Integer => ParamValue::Integer(rng.gen_range(-5..60)),
            ParamKind::Number => ParamValue::Number(rng.gen_range(-2.0..40.0)),
            ParamKind::Boolean => ParamValue::Boolean(rng.gen()),
            ParamKind::Enum => ParamValue::String(
                spec.allowed_values
                    .choose(rng)
                    .cloned()
                    .filter(|_| rng.gen_bool(0.8))
                    .unwrap_or_else(|| "In1.Cu".into()),
            ),
            _ => ParamValue::String(fuzz_text(rng, 3)),
        },
    }
}

fn executor_atomicity() -> Result<String, String> {
    let l = shipped();
    let registry = l.registry;
    let mut rng = StdRng::seed_from_u64(0x5eed_0007);
    let mut ws = Workspace::new("fuzz", l.workspace.clone());
    let executor = Executor::default();
    let builtin: Vec<&PluginManifest> = registry
        .manifests
        .values()
        .filter(|m| m.executor_binding.kind == BindingKind::BuiltinSim)
        .collect();
    ensure(builtin.len() == BUILTIN_EFFECTS.len(), || "bundled builtin plugins missing".into())?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..400 {
        if rng.gen_bool(0.1) {
            // new sharp tracks, some locked, so effects keep having work to do
            let mut item = Item::new(ItemKind::Track)
                .with("corner_style", "sharp")
                .with("layer", ["F.Cu", "B.Cu"].choose(&mut rng).unwrap())
                .with("width_mil", "10");
            if rng.gen_bool(0.3) {
                item = item.with("locked", "true");
            }
            ws.state.items.insert(format!("track-fuzz-{i}"), item);
        }
        if rng.gen_bool(0.05) {
            ws.state.items.retain(|_, it| it.prop("locked") != Some("true"));
        }
        let (plugin_id, manifest) = if rng.gen_bool(0.05) {
            ("no-such-plugin".to_string(), None)
        } else {
            let m = *builtin.choose(&mut rng).unwrap();
            (m.plugin_id.clone(), Some(m))
        };
        let mut args = BTreeMap::new();
        if let Some(m) = manifest {
            for p in &m.parameters {
                if p.required || rng.gen_bool(0.5) {
                    if !rng.gen_bool(0.05) {
                        args.insert(p.name.clone(), fuzz_value(&mut rng, p));
                    }
                }
            }
        }
        if rng.gen_bool(0.05) {
            args.insert("bogus".into(), ParamValue::Integer(1));
        }

        let pre = ws.state.clone();
        let pre_text = pre.render();
        let record = executor.execute(&plugin_id, &args, &registry, &mut ws);
        let post_text = ws.state.render();
        ensure(record.version_before == pre.version, || "version_before mismatch".into())?;
        match record.outcome {
            Outcome::Ok => {
                let m = manifest.unwrap();
                let expected = u64::from(!record.diff.is_empty() || !m.idempotent);
                ensure(ws.state.version == pre.version + expected, || {
                    format!("{plugin_id}: version {} -> {}", pre.version, ws.state.version)
                })?;
                ensure(record.version_after == ws.state.version, || "version_after mismatch".into())?;
                let replayed = record.replay(&pre).map_err(|e| e.to_string())?;
                ensure(replayed.render() == post_text, || format!("{plugin_id}: replay differs"))?;
                *counts.entry(if expected == 1 { "ok" } else { "ok-unchanged" }).or_default() += 1;
            }
            other => {
                ensure(post_text == pre_text, || format!("{plugin_id} {other:?} changed the workspace"))?;
                ensure(record.diff.is_empty(), || "failed run recorded a diff".into())?;
                *counts
                    .entry(if other == Outcome::Failed { "failed" } else { "rejected" })
                    .or_default() += 1;
            }
        }
    }
    for k in ["ok", "ok-unchanged", "failed", "rejected"] {
        ensure(counts.contains_key(k), || format!("fuzz never produced {k}: {counts:?}"))?;
    }
    Ok(format!("400 runs {counts:?}"))
}

// ------------------------------------------------------------- transcript

fn golden_transcript() -> Result<String, String> {
    let root = repo_root();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_helmsman"))
        .arg("--config")
        .arg(root.join("helmsman.toml"))
        .arg("chat")
        .arg("--script")
        .arg(root.join("data/scripts/happy.script"))
        .arg("--input")
        .arg(root.join("data/scripts/happy.input"))
        .env_remove("HELMSMAN_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
    })?;
    let golden = std::fs::read(root.join("data/scripts/happy.golden")).map_err(|e| e.to_string())?;
    if out.stdout != golden {
        let got = String::from_utf8_lossy(&out.stdout);
        let want = String::from_utf8_lossy(&golden);
        let line = got
            .lines()
            .zip(want.lines())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| got.lines().count().min(want.lines().count()));
        return Err(format!(
            "transcript differs at line {}: got {:?}, want {:?}",
            line + 1,
            got.lines().nth(line),
            want.lines().nth(line)
        ));
    }
    Ok(format!("{} bytes identical", golden.len()))
}

// ------------------------------------------------------------ persistence

fn random_text(rng: &mut StdRng) -> String {
    const PIECES: &[&str] = &["route", "差分对", "\"quoted\"", "back\\slash", "tab\t", "line\nbreak", "é", "🙂", "#", "/topic", "  "];
    (0..rng.gen_range(1..5)).map(|_| *PIECES.choose(rng).unwrap()).collect()
}

fn fuzz_manifest(rng: &mut StdRng, i: usize) -> PluginManifest {
    let mut params = Vec::new();
    for j in 0..rng.gen_range(0..5) {
        let kind = *[
            ParamKind::String,
            ParamKind::Integer,
            ParamKind::Number,
            ParamKind::Boolean,
            ParamKind::Enum,
            ParamKind::FilePath,
        ]
        .choose(rng)
        .unwrap();
        let allowed_values: Vec<String> = if kind == ParamKind::Enum {
            vec!["F.Cu".into(), "B.Cu".into(), format!("In{j}.Cu")]
        } else {
            vec![]
        };
        let default = if rng.gen_bool(0.5) {
            Some(match kind {
                ParamKind::String => ParamValue::String(random_text(rng)),
                ParamKind::Integer => ParamValue::Integer(rng.gen_range(-1000..1000)),
                ParamKind::Number => ParamValue::Number(rng.gen_range(-100..100) as f64 + 0.25),
                ParamKind::Boolean => ParamValue::Boolean(rng.gen()),
                ParamKind::Enum => ParamValue::String(allowed_values[1].clone()),
                ParamKind::FilePath => ParamValue::String("out/board.kicad_pcb".into()),
            })
        } else {
            None
        };
        params.push(ParameterSpec {
            name: format!("p_{j}"),
            kind,
            required: default.is_none() && rng.gen_bool(0.5),
            default,
            allowed_values,
            unit: rng.gen_bool(0.3).then(|| "mil".to_string()),
            description: random_text(rng),
        });
    }
    let mut examples = Vec::new();
    if rng.gen_bool(0.5) {
        let values = params
            .iter()
            .filter(|p| p.required)
            .map(|p| {
                let v = match p.kind {
                    ParamKind::Integer => ParamValue::Integer(7),
                    ParamKind::Number => ParamValue::Number(1.5),
                    ParamKind::Boolean => ParamValue::Boolean(true),
                    ParamKind::Enum => ParamValue::String("F.Cu".into()),
                    _ => ParamValue::String("x".into()),
                };
                (p.name.clone(), v)
            })
            .collect();
        examples.push(InputExample {
            values,
            caption: random_text(rng),
        });
    }
    let subprocess = rng.gen_bool(0.3);
    PluginManifest {
        plugin_id: format!("fuzz-{i}"),
        display_name: format!("Fuzz {}", random_text(rng)),
        display_name_zh: rng.gen_bool(0.5).then(|| "模糊".to_string()),
        description: format!("d {}", random_text(rng)),
        description_zh: rng.gen_bool(0.5).then(|| format!("描述 {}", random_text(rng))),
        executor_binding: ExecutorBinding {
            kind: if subprocess { BindingKind::Subprocess } else { BindingKind::BuiltinSim },
            command: if subprocess {
                params
                    .iter()
                    .map(|p| format!("{{{}}}", p.name))
                    .fold("echo".to_string(), |a, b| a + " " + &b)
            } else {
                BUILTIN_EFFECTS.choose(rng).unwrap().to_string()
            },
        },
        parameters: params,
        input_examples: examples,
        idempotent: rng.gen(),
        origin: if rng.gen_bool(0.5) { Origin::Bundled } else { Origin::UserDefined },
    }
}

fn fuzz_session(engine: &Engine, rng: &mut StdRng, id: usize) -> Session {
    let mut s = Session::with_id(format!("fz-{id}"), *Language::ALL.choose(rng).unwrap());
    for _ in 0..rng.gen_range(0..14) {
        let event = match rng.gen_range(0..12) {
            0 => Event::Query { text: random_text(rng) },
            1 => Event::ConfirmMain { main_id: None },
            2 => Event::ConfirmSub { subtask_id: None },
            3 => Event::Reject {
                ids: vec![],
                reason: random_text(rng),
            },
            4 | 5 => Event::Question { text: random_text(rng) },
            6 => Event::Command { text: random_text(rng) },
            7 => Event::ConfirmPlugin {
                plugin_id: None,
                override_ranking: false,
            },
            8 => Event::SubmitArguments {
                args: [("width_mil".to_string(), ParamValue::Integer(rng.gen_range(1..40)))].into(),
            },
            9 => Event::AcceptReroute,
            10 => Event::Say { text: random_text(rng) },
            _ => Event::Cancel,
        };
        if let Ok(adv) = engine.advance(&s, event) {
            s = adv.session;
        }
    }
    s
}

fn persistence_round_trips() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0x5eed_0008);
    let reply_rng = std::sync::Mutex::new(StdRng::seed_from_u64(0x5eed_0009));
    let engine = engine_with(Arc::new(FnBackend::new(move |req: &CompletionRequest| {
        let mut r = reply_rng.lock().unwrap();
        match req.purpose {
            Purpose::RouteMain => ["routing", "drc, zones", "zzz"].choose(&mut *r).unwrap().to_string(),
            Purpose::RouteSub => ["diff-pairs", "length-tuning", "?"].choose(&mut *r).unwrap().to_string(),
            Purpose::QaAnswer => ["ok [routing-intro]", "unsure", "[ghost] maybe"].choose(&mut *r).unwrap().to_string(),
            Purpose::Recommend => ["track-width, teardrop", "nothing"].choose(&mut *r).unwrap().to_string(),
            Purpose::Augment => "- a note\n- another".into(),
        }
    })));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = SessionStore::open(dir.path()).map_err(|e| e.to_string())?;
    let mut phases = BTreeSet::new();
    for i in 0..100 {
        let s = fuzz_session(&engine, &mut rng, i);
        phases.insert(s.phase.as_str());
        store.persist(&s).map_err(|e| e.to_string())?;
        let back = store.restore(&s.session_id).map_err(|e| e.to_string())?;
        ensure(back == s, || format!("session {} differs after restore", s.session_id))?;
    }
    ensure(phases.len() >= 4, || format!("fuzz reached only {phases:?}"))?;

    for i in 0..100 {
        let mut registry = Registry::new();
        for j in 0..rng.gen_range(0..6) {
            let m = fuzz_manifest(&mut rng, i * 10 + j);
            registry.register(m.clone()).map_err(|e| format!("{e} for {m:?}"))?;
            let text = render_manifest(&m);
            let parsed = parse_manifest(&text).map_err(|e| format!("{e}\n{text}"))?;
            ensure(parsed == m, || format!("manifest text round trip differs:\n{text}"))?;
        }
        let back = Registry::from_json(&registry.to_json()).map_err(|e| e.to_string())?;
        ensure(back == registry, || "registry differs after restore".into())?;
    }
    Ok(format!("100 sessions over phases {phases:?}, 100 registries"))
}
