//! Documentation fragments and tailored documents.
//!
//! Source manuals are split into fragments by an explicit mapping file
//! (`mapping.tsv` in the source directory), one line per fragment:
//!
//! ```text
//! <fragment-id> TAB <source-file> TAB <anchor> TAB <language>
//! ```
//!
//! A fragment starts at the element carrying `id="<anchor>"` (or at the
//! heading enclosing an `<a name="<anchor>">`) and runs until the next mapped
//! anchor in the same file or until its parent element closes. Bodies pass
//! through the [`html`](crate::html) whitelist; relative links become
//! in-page anchors and images are renamed by content hash under `assets/`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::html::{self, Pos, SanitizeError, TextCollector, Token};
use crate::taxonomy::FragmentLookup;
use crate::{is_valid_slug, Language};

pub const MAPPING_FILE: &str = "mapping.tsv";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("reading {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("mapping line {line}: {message}")]
    MappingParse { line: usize, message: String },
    #[error("anchor {anchor:?} not found in {file}")]
    MappingMiss { anchor: String, file: String },
    #[error("{file}:{pos}: disallowed markup: {construct}")]
    SanitizeReject {
        file: String,
        construct: String,
        pos: Pos,
    },
    #[error("{file}:{pos}: image {src:?} not found")]
    MissingAsset { file: String, src: String, pos: Pos },
    #[error("fragment {id:?} ({language}) defined twice")]
    DuplicateFragment { id: String, language: Language },
    #[error("unknown fragment {0:?}")]
    UnknownFragment(String),
    #[error("fragment selection is empty")]
    EmptySelection,
    #[error("fragment {0:?} selected twice")]
    DuplicateSelection(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRef {
    /// File name under `assets/`, prefixed with a content hash.
    pub name: String,
    pub source: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocFragment {
    pub id: String,
    pub language: Language,
    pub title: String,
    pub body_html: String,
    pub source_ref: String,
    /// Hex SHA-256 of `body_html`.
    pub checksum: String,
    #[serde(default)]
    pub assets: Vec<AssetRef>,
}

pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(data.as_ref()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingEntry {
    pub fragment_id: String,
    pub source_file: String,
    pub anchor: String,
    pub language: Language,
    pub line: usize,
}

pub fn parse_mapping(text: &str) -> Result<Vec<MappingEntry>, CorpusError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let err = |message: String| CorpusError::MappingParse { line, message };
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        if !is_valid_slug(fields[0]) {
            return Err(err(format!("invalid fragment id {:?}", fields[0])));
        }
        if fields[1].is_empty() || fields[1].contains("..") || fields[1].starts_with('/') {
            return Err(err(format!("source file {:?} must be a relative path", fields[1])));
        }
        if fields[2].is_empty() {
            return Err(err("empty anchor".into()));
        }
        let language = fields[3].parse().map_err(|e: crate::UnknownLanguage| err(e.to_string()))?;
        out.push(MappingEntry {
            fragment_id: fields[0].to_string(),
            source_file: fields[1].to_string(),
            anchor: fields[2].to_string(),
            language,
            line,
        });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Splits the manuals under `source_dir` into fragments for `language`, in
/// mapping order. Deterministic for a fixed tree.
pub fn ingest(source_dir: &Path, language: Language) -> Result<Vec<DocFragment>, CorpusError> {
    let mapping = parse_mapping(&read(&source_dir.join(MAPPING_FILE))?)?;
    let entries: Vec<_> = mapping.into_iter().filter(|e| e.language == language).collect();

    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.fragment_id.as_str()) {
            return Err(CorpusError::DuplicateFragment {
                id: e.fragment_id.clone(),
                language,
            });
        }
    }

    let mut by_file: BTreeMap<&str, Vec<&MappingEntry>> = BTreeMap::new();
    for e in &entries {
        by_file.entry(e.source_file.as_str()).or_default().push(e);
    }
    let mut fragments: HashMap<String, DocFragment> = HashMap::new();
    for (file, file_entries) in by_file {
        let path = source_dir.join(file);
        let tokens = html::tokenize(&read(&path)?);
        for frag in split_file(file, &path, &tokens, &file_entries, language)? {
            fragments.insert(frag.id.clone(), frag);
        }
    }
    Ok(entries
        .iter()
        .map(|e| fragments.remove(&e.fragment_id).expect("every entry produced a fragment"))
        .collect())
}

struct Start {
    token: usize,
    entry: usize,
}

fn split_file(
    file: &str,
    path: &Path,
    tokens: &[Token],
    entries: &[&MappingEntry],
    language: Language,
) -> Result<Vec<DocFragment>, CorpusError> {
    // locate every mapped anchor, remembering enclosing headings for the
    // source reference
    let mut starts = Vec::new();
    let mut heading_path: Vec<(usize, String)> = Vec::new();
    let mut paths: HashMap<usize, String> = HashMap::new();
    let mut stack: Vec<(String, usize)> = Vec::new();
    for (i, token) in tokens.iter().enumerate() {
        match token {
            Token::StartTag { name, .. } => {
                let anchor = token.attr("id").or_else(|| {
                    if name == "a" {
                        token.attr("name")
                    } else {
                        None
                    }
                });
                if let Some(anchor) = anchor {
                    if let Some(entry) = entries.iter().position(|e| e.anchor == anchor) {
                        let at = match stack.last() {
                            Some((parent, idx)) if name == "a" && html::is_heading(parent) => *idx,
                            _ => i,
                        };
                        if !starts.iter().any(|s: &Start| s.entry == entry) {
                            starts.push(Start { token: at, entry });
                        }
                    }
                }
                if html::is_heading(name) {
                    let level = name.as_bytes()[1] as usize;
                    heading_path.retain(|(l, _)| *l < level);
                    heading_path.push((level, element_text(tokens, i)));
                    let mut p = file.to_string();
                    for (_, t) in &heading_path {
                        p.push_str(" > ");
                        p.push_str(t);
                    }
                    paths.insert(i, p);
                }
                if html::opens_element(token) {
                    stack.push((name.clone(), i));
                }
            }
            Token::EndTag { name, .. } => {
                if let Some(idx) = stack.iter().rposition(|(n, _)| n == name) {
                    stack.truncate(idx);
                }
            }
            _ => {}
        }
    }
    if let Some(missing) = entries
        .iter()
        .enumerate()
        .find(|(i, _)| !starts.iter().any(|s| s.entry == *i))
    {
        return Err(CorpusError::MappingMiss {
            anchor: missing.1.anchor.clone(),
            file: file.to_string(),
        });
    }
    starts.sort_by_key(|s| s.token);

    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (k, start) in starts.iter().enumerate() {
        let limit = starts.get(k + 1).map_or(tokens.len(), |s| s.token);
        let end = region_end(tokens, start.token, limit);
        let entry = entries[start.entry];
        let mut assets = Vec::new();
        let body_html = html::sanitize(&tokens[start.token..end], |src, pos| -> Result<String, Wrapped> {
            let source = base.join(src.split(['?', '#']).next().unwrap_or(src));
            let bytes = std::fs::read(&source).map_err(|_| CorpusError::MissingAsset {
                file: file.to_string(),
                src: src.to_string(),
                pos,
            })?;
            let file_name = source
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let name = format!("{}-{}", &sha256_hex(&bytes)[..12], file_name);
            if !assets.iter().any(|a: &AssetRef| a.name == name) {
                assets.push(AssetRef {
                    name: name.clone(),
                    source,
                });
            }
            Ok(format!("assets/{name}"))
        })
        .map_err(|e| match e {
            Wrapped::Sanitize(SanitizeError { construct, pos }) => CorpusError::SanitizeReject {
                file: file.to_string(),
                construct,
                pos,
            },
            Wrapped::Corpus(c) => c,
        })?;
        let title = element_text(tokens, start.token);
        let source_ref = format!(
            "{}#{}",
            paths.get(&start.token).cloned().unwrap_or_else(|| file.to_string()),
            entry.anchor
        );
        out.push(DocFragment {
            id: entry.fragment_id.clone(),
            language,
            title: if title.is_empty() { entry.anchor.clone() } else { title },
            checksum: sha256_hex(&body_html),
            body_html,
            source_ref,
            assets,
        });
    }
    Ok(out)
}

enum Wrapped {
    Sanitize(SanitizeError),
    Corpus(CorpusError),
}

impl From<SanitizeError> for Wrapped {
    fn from(e: SanitizeError) -> Self {
        Wrapped::Sanitize(e)
    }
}

impl From<CorpusError> for Wrapped {
    fn from(e: CorpusError) -> Self {
        Wrapped::Corpus(e)
    }
}

/// First token index after the region starting at `start`: stops at `limit`
/// or where the element enclosing `start` closes.
fn region_end(tokens: &[Token], start: usize, limit: usize) -> usize {
    let mut open: Vec<&str> = Vec::new();
    for (i, token) in tokens.iter().enumerate().take(limit).skip(start) {
        match token {
            Token::StartTag { name, .. } if html::opens_element(token) => open.push(name),
            Token::EndTag { name, .. } => match open.iter().rposition(|n| n == name) {
                Some(idx) => open.truncate(idx),
                None => return i,
            },
            _ => {}
        }
    }
    limit
}

/// Visible text of the element opened at `start`, on one line.
fn element_text(tokens: &[Token], start: usize) -> String {
    let mut collector = TextCollector::default();
    let mut depth = 0usize;
    for token in &tokens[start..] {
        match token {
            Token::StartTag { .. } if html::opens_element(token) => depth += 1,
            Token::EndTag { .. } => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    break;
                }
            }
            Token::Text(t) => collector.push_text(t),
            _ => {}
        }
        if depth == 0 {
            break;
        }
    }
    collector.finish().join(" ")
}

/// Immutable set of fragments keyed by (id, language).
#[derive(Debug, Clone, Default)]
pub struct FragmentStore {
    fragments: BTreeMap<(String, Language), DocFragment>,
}

impl FragmentStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ingests each `(language, directory)` pair into one store.
    pub fn load(sources: &[(Language, PathBuf)]) -> Result<Self, CorpusError> {
        let mut store = Self::new();
        for (language, dir) in sources {
            for fragment in ingest(dir, *language)? {
                store.insert(fragment)?;
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, fragment: DocFragment) -> Result<(), CorpusError> {
        let key = (fragment.id.clone(), fragment.language);
        if self.fragments.contains_key(&key) {
            return Err(CorpusError::DuplicateFragment {
                id: key.0,
                language: key.1,
            });
        }
        self.fragments.insert(key, fragment);
        Ok(())
    }

    pub fn get(&self, id: &str, language: Language) -> Option<&DocFragment> {
        self.fragments.get(&(id.to_string(), language))
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    pub fn ids(&self, language: Language) -> BTreeSet<String> {
        self.fragments
            .keys()
            .filter(|(_, l)| *l == language)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn languages(&self) -> BTreeSet<Language> {
        self.fragments.keys().map(|(_, l)| *l).collect()
    }

    /// Fragment ids present in one language but not the other.
    pub fn parity_gaps(&self) -> Vec<(String, Language)> {
        let en = self.ids(Language::En);
        let zh = self.ids(Language::Zh);
        let mut gaps: Vec<_> = en.difference(&zh).map(|id| (id.clone(), Language::Zh)).collect();
        gaps.extend(zh.difference(&en).map(|id| (id.clone(), Language::En)));
        gaps
    }

    /// Content hash over every fragment; changes whenever any body changes.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        for ((id, language), f) in &self.fragments {
            h.update(format!("{id}\t{language}\t{}\n", f.checksum));
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

impl FragmentLookup for FragmentStore {
    fn has_fragment(&self, id: &str, language: Language) -> bool {
        self.get(id, language).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailoredDocument {
    pub doc_id: String,
    pub fragment_ids: Vec<String>,
    pub language: Language,
    pub html: String,
    pub created_at: DateTime<Utc>,
}

pub fn document_id(fragment_ids: &[String], language: Language, corpus_version: &str) -> String {
    sha256_hex(format!("{}\n{language}\n{corpus_version}", fragment_ids.join(",")))[..16].to_string()
}

const STYLE: &str = "body{font-family:system-ui,sans-serif;margin:0;display:flex;color:#222}\
#toc{position:sticky;top:0;align-self:flex-start;min-width:14em;max-height:100vh;overflow:auto;padding:1em;background:#f4f5f7;border-right:1px solid #ddd}\
#toc ol{padding-left:1.2em}#toc a{color:#1d4f91;text-decoration:none}#toc a.active{font-weight:bold}\
main{padding:1em 2em;max-width:52em}section.fragment{border-bottom:1px solid #eee;padding-bottom:1em}\
img{max-width:100%}code,kbd{background:#f0f0f0;padding:0 .2em}";

const SCRIPT: &str = "(function(){var links=document.querySelectorAll('#toc a');\
links.forEach(function(a){a.addEventListener('click',function(){\
links.forEach(function(b){b.classList.remove('active');});a.classList.add('active');});});})();";

/// Joins fragments into one self-contained page with an inline stylesheet,
/// a table of contents and a small navigation script.
pub fn stitch(
    fragment_ids: &[String],
    language: Language,
    store: &FragmentStore,
) -> Result<TailoredDocument, CorpusError> {
    if fragment_ids.is_empty() {
        return Err(CorpusError::EmptySelection);
    }
    let mut seen = BTreeSet::new();
    let mut fragments = Vec::with_capacity(fragment_ids.len());
    for id in fragment_ids {
        if !seen.insert(id) {
            return Err(CorpusError::DuplicateSelection(id.clone()));
        }
        fragments.push(
            store
                .get(id, language)
                .ok_or_else(|| CorpusError::UnknownFragment(id.clone()))?,
        );
    }
    let doc_id = document_id(fragment_ids, language, &store.version());
    let (title, contents) = match language {
        Language::En => ("Tailored documentation", "Contents"),
        Language::Zh => ("定制文档", "目录"),
    };

    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html lang=\"{language}\">\n<head>\n<meta charset=\"utf-8\">\n\
         <title>{title}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n\
         <nav id=\"toc\">\n<h2>{contents}</h2>\n<ol>\n"
    );
    for f in &fragments {
        let _ = writeln!(
            out,
            "<li><a href=\"#fragment-{}\">{}</a></li>",
            f.id,
            html::escape_text(&f.title)
        );
    }
    out.push_str("</ol>\n</nav>\n<main>\n");
    let asset_prefix = format!("src=\"assets/{doc_id}/");
    for f in &fragments {
        let _ = write!(
            out,
            "<section id=\"fragment-{id}\" class=\"fragment\" data-fragment=\"{id}\">\n{body}\n</section>\n",
            id = f.id,
            body = f.body_html.replace("src=\"assets/", &asset_prefix),
        );
    }
    let _ = write!(out, "</main>\n<script>{SCRIPT}</script>\n</body>\n</html>\n");

    Ok(TailoredDocument {
        doc_id,
        fragment_ids: fragment_ids.to_vec(),
        language,
        html: out,
        created_at: Utc::now(),
    })
}

/// Plain text of a stitched document, fragment by fragment, each preceded
/// by a `== <fragment_id> ==` marker line.
pub fn qa_context(doc: &TailoredDocument) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut current: Option<TextCollector> = None;
    let mut skip: Option<String> = None;
    for token in html::tokenize(&doc.html) {
        if let Some(name) = &skip {
            if matches!(&token, Token::EndTag { name: n, .. } if n == name) {
                skip = None;
            }
            continue;
        }
        match &token {
            Token::StartTag { name, .. } if name == "section" => {
                if let Some(id) = token.attr("data-fragment") {
                    out.push(format!("== {id} =="));
                    current = Some(TextCollector::default());
                }
            }
            Token::EndTag { name, .. } if name == "section" => {
                if let Some(c) = current.take() {
                    out.extend(c.finish());
                }
            }
            Token::StartTag { name, self_closing: false, .. }
                if name == "script" || name == "style" =>
            {
                skip = Some(name.clone());
            }
            _ => {
                if let Some(c) = current.as_mut() {
                    c.token(&token);
                }
            }
        }
    }
    out.join("\n")
}

/// Writes `<out_dir>/<doc_id>.html` and copies its images to
/// `<out_dir>/assets/<doc_id>/` so the page opens offline.
pub fn write_document(
    doc: &TailoredDocument,
    store: &FragmentStore,
    out_dir: &Path,
) -> Result<PathBuf, CorpusError> {
    let io = |path: &Path, e: std::io::Error| CorpusError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let asset_dir = out_dir.join("assets").join(&doc.doc_id);
    for id in &doc.fragment_ids {
        let Some(fragment) = store.get(id, doc.language) else {
            continue;
        };
        for asset in &fragment.assets {
            std::fs::create_dir_all(&asset_dir).map_err(|e| io(&asset_dir, e))?;
            let target = asset_dir.join(&asset.name);
            std::fs::copy(&asset.source, &target).map_err(|e| io(&asset.source, e))?;
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let path = out_dir.join(format!("{}.html", doc.doc_id));
    std::fs::write(&path, &doc.html).map_err(|e| io(&path, e))?;
    Ok(path)
}

/// Stitched documents keyed by `doc_id`; the first insert wins and is
/// never evicted.
#[derive(Debug, Default)]
pub struct DocCache {
    docs: RwLock<HashMap<String, Arc<TailoredDocument>>>,
}

impl DocCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, doc_id: &str) -> Option<Arc<TailoredDocument>> {
        self.docs.read().expect("doc cache lock").get(doc_id).cloned()
    }

    pub fn get_or_stitch(
        &self,
        fragment_ids: &[String],
        language: Language,
        store: &FragmentStore,
    ) -> Result<Arc<TailoredDocument>, CorpusError> {
        let doc_id = document_id(fragment_ids, language, &store.version());
        if let Some(doc) = self.get(&doc_id) {
            return Ok(doc);
        }
        let doc = stitch(fragment_ids, language, store)?;
        let mut docs = self.docs.write().expect("doc cache lock");
        Ok(docs.entry(doc.doc_id.clone()).or_insert_with(|| Arc::new(doc)).clone())
    }

    pub fn len(&self) -> usize {
        self.docs.read().expect("doc cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fragment(id: &str, language: Language, body: &str) -> DocFragment {
        DocFragment {
            id: id.into(),
            language,
            title: format!("Title {id}"),
            body_html: body.into(),
            source_ref: "t.html".into(),
            checksum: sha256_hex(body),
            assets: vec![],
        }
    }

    fn store() -> FragmentStore {
        let mut s = FragmentStore::new();
        s.insert(fragment("frag-a", Language::En, "<p>Hello</p>")).unwrap();
        s.insert(fragment("frag-b", Language::En, "<p>World &amp; more</p>")).unwrap();
        s
    }

    #[test]
    fn mapping_parse_errors() {
        assert!(matches!(
            parse_mapping("# c\nbad id\tf.html\ta\ten\n"),
            Err(CorpusError::MappingParse { line: 2, .. })
        ));
        assert!(matches!(
            parse_mapping("a\tf.html\ta\tfr\n"),
            Err(CorpusError::MappingParse { line: 1, .. })
        ));
        assert!(matches!(
            parse_mapping("a\t../f.html\ta\ten\n"),
            Err(CorpusError::MappingParse { .. })
        ));
        assert_eq!(parse_mapping("a\tf.html\tx\tzh\n").unwrap()[0].language, Language::Zh);
    }

    #[test]
    fn qa_context_single() {
        let doc = stitch(&["frag-a".into()], Language::En, &store()).unwrap();
        assert_eq!(qa_context(&doc), "== frag-a ==\nHello");
    }

    #[test]
    fn stitch_order_and_toc() {
        let ids = vec!["frag-b".to_string(), "frag-a".to_string()];
        let doc = stitch(&ids, Language::En, &store()).unwrap();
        let b = doc.html.find("World").unwrap();
        let a = doc.html.find("Hello").unwrap();
        assert!(b < a);
        assert_eq!(doc.html.matches("<li><a href=\"#fragment-").count(), 2);
        assert_eq!(qa_context(&doc), "== frag-b ==\nWorld & more\n== frag-a ==\nHello");
    }

    #[test]
    fn stitch_errors() {
        let s = store();
        assert_eq!(stitch(&[], Language::En, &s).unwrap_err(), CorpusError::EmptySelection);
        assert_eq!(
            stitch(&["nope".into()], Language::En, &s).unwrap_err(),
            CorpusError::UnknownFragment("nope".into())
        );
        assert_eq!(
            stitch(&["frag-a".into()], Language::Zh, &s).unwrap_err(),
            CorpusError::UnknownFragment("frag-a".into())
        );
        assert_eq!(
            stitch(&["frag-a".into(), "frag-a".into()], Language::En, &s).unwrap_err(),
            CorpusError::DuplicateSelection("frag-a".into())
        );
    }

    #[test]
    fn cache_shares_documents() {
        let s = store();
        let cache = DocCache::new();
        let a = cache.get_or_stitch(&["frag-a".into()], Language::En, &s).unwrap();
        let b = cache.get_or_stitch(&["frag-a".into()], Language::En, &s).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
        assert!(cache.get(&a.doc_id).is_some());
    }

    #[test]
    fn region_stops_at_parent_close() {
        let tokens = html::tokenize("<div><h2 id=a>A</h2><p>x</p></div><p>outside</p>");
        let end = region_end(&tokens, 1, tokens.len());
        assert!(matches!(&tokens[end], Token::EndTag { name, .. } if name == "div"));
    }

    #[test]
    fn parity_gaps() {
        let mut s = store();
        s.insert(fragment("frag-a", Language::Zh, "<p>你好</p>")).unwrap();
        assert_eq!(s.parity_gaps(), vec![("frag-b".to_string(), Language::Zh)]);
    }
}
