//! Small HTML lexer, whitelist sanitizer and text extractor.
//!
//! Source documentation is curated HTML, so a position-tracking tokenizer is
//! enough: no tree building, no error recovery beyond dropping stray end
//! tags. Every token carries its line and column so the sanitizer can point
//! at the exact construct it refuses.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Doctype(String),
    Comment(String),
    StartTag {
        name: String,
        attrs: Vec<(String, Option<String>)>,
        self_closing: bool,
        pos: Pos,
    },
    EndTag {
        name: String,
        pos: Pos,
    },
    /// Raw text, entities still encoded.
    Text(String),
}

impl Token {
    pub fn attr(&self, key: &str) -> Option<&str> {
        match self {
            Token::StartTag { attrs, .. } => attrs
                .iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, v)| v.as_deref()),
            _ => None,
        }
    }

    pub fn start_name(&self) -> Option<&str> {
        match self {
            Token::StartTag { name, .. } => Some(name),
            _ => None,
        }
    }
}

pub const VOID_ELEMENTS: &[&str] = &[
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta", "param", "source",
    "track", "wbr",
];

const RAW_TEXT: &[&str] = &["script", "style"];

pub fn is_void(name: &str) -> bool {
    VOID_ELEMENTS.contains(&name)
}

pub fn is_heading(name: &str) -> bool {
    matches!(name, "h1" | "h2" | "h3" | "h4" | "h5" | "h6")
}

/// Whether this start tag opens an element that needs a matching end tag.
pub fn opens_element(token: &Token) -> bool {
    matches!(token, Token::StartTag { name, self_closing: false, .. } if !is_void(name))
}

struct Cursor<'a> {
    src: &'a str,
    at: usize,
    line_starts: Vec<usize>,
}

impl<'a> Cursor<'a> {
    fn pos(&self, byte: usize) -> Pos {
        let line = self.line_starts.partition_point(|&s| s <= byte);
        let start = self.line_starts[line - 1];
        Pos {
            line,
            col: self.src[start..byte].chars().count() + 1,
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.at..]
    }
}

/// Splits `src` into tokens. Never fails: anything that does not look like
/// markup is text.
pub fn tokenize(src: &str) -> Vec<Token> {
    let mut line_starts = vec![0];
    line_starts.extend(src.match_indices('\n').map(|(i, _)| i + 1));
    let mut cur = Cursor {
        src,
        at: 0,
        line_starts,
    };
    let mut out = Vec::new();
    let mut text_start = 0;

    while cur.at < src.len() {
        let rest = cur.rest();
        if !rest.starts_with('<') {
            let next = rest.find('<').map_or(src.len(), |i| cur.at + i);
            cur.at = next;
            continue;
        }
        let lt = cur.at;
        let parsed = if let Some(body) = rest.strip_prefix("<!--") {
            let end = body.find("-->").map_or(body.len(), |i| i);
            let consumed = 4 + end + if end < body.len() { 3 } else { 0 };
            Some((Token::Comment(body[..end].to_string()), consumed))
        } else if let Some(body) = rest.strip_prefix("<!") {
            body.find('>')
                .map(|end| (Token::Doctype(body[..end].trim().to_string()), 2 + end + 1))
        } else if let Some(body) = rest.strip_prefix("</") {
            lex_end_tag(body).map(|(name, used)| {
                (
                    Token::EndTag {
                        name,
                        pos: cur.pos(lt),
                    },
                    2 + used,
                )
            })
        } else {
            lex_start_tag(&rest[1..]).map(|(name, attrs, self_closing, used)| {
                (
                    Token::StartTag {
                        name,
                        attrs,
                        self_closing,
                        pos: cur.pos(lt),
                    },
                    1 + used,
                )
            })
        };
        match parsed {
            None => {
                // a lone '<' is text
                cur.at += 1;
            }
            Some((token, used)) => {
                if text_start < lt {
                    out.push(Token::Text(src[text_start..lt].to_string()));
                }
                cur.at += used;
                let raw_name = match &token {
                    Token::StartTag {
                        name,
                        self_closing: false,
                        ..
                    } if RAW_TEXT.contains(&name.as_str()) => Some(name.clone()),
                    _ => None,
                };
                out.push(token);
                if let Some(name) = raw_name {
                    let close = format!("</{name}");
                    let body_end = find_ascii_ci(cur.rest(), &close).map_or(src.len(), |i| cur.at + i);
                    if cur.at < body_end {
                        out.push(Token::Text(src[cur.at..body_end].to_string()));
                    }
                    cur.at = body_end;
                }
                text_start = cur.at;
            }
        }
    }
    if text_start < src.len() {
        out.push(Token::Text(src[text_start..].to_string()));
    }
    out
}

fn find_ascii_ci(haystack: &str, needle: &str) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    (0..h.len().saturating_sub(n.len() - 1)).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-' || c == ':' || c == '_'
}

fn lex_end_tag(body: &str) -> Option<(String, usize)> {
    let name_len = body.find(|c: char| !is_name_char(c)).unwrap_or(body.len());
    if name_len == 0 || !body.starts_with(|c: char| c.is_ascii_alphabetic()) {
        return None;
    }
    let close = body.find('>')?;
    Some((body[..name_len].to_ascii_lowercase(), close + 1))
}

type StartTag = (String, Vec<(String, Option<String>)>, bool, usize);

fn lex_start_tag(body: &str) -> Option<StartTag> {
    if !body.starts_with(|c: char| c.is_ascii_alphabetic()) {
        return None;
    }
    let name_len = body.find(|c: char| !is_name_char(c)).unwrap_or(body.len());
    let name = body[..name_len].to_ascii_lowercase();
    let mut i = name_len;
    let mut attrs = Vec::new();
    let bytes = body.as_bytes();
    loop {
        while i < body.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= body.len() {
            return None;
        }
        if body[i..].starts_with("/>") {
            return Some((name, attrs, true, i + 2));
        }
        if bytes[i] == b'>' {
            return Some((name, attrs, false, i + 1));
        }
        if bytes[i] == b'/' {
            i += 1;
            continue;
        }
        let key_len = body[i..]
            .find(|c: char| c.is_whitespace() || c == '=' || c == '>' || c == '/')
            .unwrap_or(body.len() - i);
        if key_len == 0 {
            return None;
        }
        let key = body[i..i + key_len].to_ascii_lowercase();
        i += key_len;
        while i < body.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < body.len() && bytes[i] == b'=' {
            i += 1;
            while i < body.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i >= body.len() {
                return None;
            }
            let value = if bytes[i] == b'"' || bytes[i] == b'\'' {
                let q = bytes[i] as char;
                let end = body[i + 1..].find(q)?;
                let v = &body[i + 1..i + 1 + end];
                i += end + 2;
                v
            } else {
                let len = body[i..]
                    .find(|c: char| c.is_whitespace() || c == '>')
                    .unwrap_or(body.len() - i);
                let v = &body[i..i + len];
                i += len;
                v
            };
            attrs.push((key, Some(value.to_string())));
        } else {
            attrs.push((key, None));
        }
    }
}

/// Decodes the named entities the corpus uses plus numeric references.
pub fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let decoded = rest[1..].find(';').filter(|&i| i <= 10).and_then(|semi| {
            let name = &rest[1..1 + semi];
            let c = match name {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some('\u{a0}'),
                _ => name
                    .strip_prefix("#x")
                    .or_else(|| name.strip_prefix("#X"))
                    .and_then(|h| u32::from_str_radix(h, 16).ok())
                    .or_else(|| name.strip_prefix('#').and_then(|d| d.parse().ok()))
                    .and_then(char::from_u32),
            };
            c.map(|c| (c, semi + 2))
        });
        match decoded {
            Some((c, used)) => {
                out.push(c);
                rest = &rest[used..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Same as [`escape_text`]; attribute values are always double-quoted.
pub fn escape_attr(s: &str) -> String {
    escape_text(s)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{construct} at {pos}")]
pub struct SanitizeError {
    pub construct: String,
    pub pos: Pos,
}

/// Elements kept as-is (after attribute filtering).
const KEEP: &[&str] = &[
    "a", "abbr", "b", "blockquote", "br", "caption", "code", "dd", "div", "dl", "dt", "em",
    "figcaption", "figure", "h1", "h2", "h3", "h4", "h5", "h6", "hr", "i", "img", "kbd", "li",
    "mark", "ol", "p", "pre", "s", "small", "span", "strong", "sub", "sup", "table", "tbody", "td",
    "tfoot", "th", "thead", "tr", "u", "ul",
];

/// Elements removed together with everything inside them.
const DROP_WITH_CONTENT: &[&str] = &["script", "style", "noscript", "template", "title", "head"];

/// Elements that make the whole document unacceptable.
const REJECT: &[&str] = &[
    "applet", "base", "button", "embed", "form", "frame", "frameset", "iframe", "input", "link",
    "math", "meta", "object", "option", "select", "svg", "textarea",
];

fn attr_allowed(tag: &str, attr: &str) -> bool {
    matches!(attr, "id" | "class" | "title" | "lang")
        || matches!(
            (tag, attr),
            ("a", "href")
                | ("img", "src")
                | ("img", "alt")
                | ("img", "width")
                | ("img", "height")
                | ("td", "colspan")
                | ("td", "rowspan")
                | ("th", "colspan")
                | ("th", "rowspan")
                | ("ol", "start")
        )
}

fn has_scheme(url: &str) -> bool {
    match url.find(':') {
        Some(i) => {
            let scheme = &url[..i];
            !scheme.is_empty()
                && scheme
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '+' || c == '-' || c == '.')
                && url[..i].find(['/', '?', '#']).is_none()
        }
        None => false,
    }
}

fn dangerous_url(url: &str) -> bool {
    let lower: String = url
        .chars()
        .filter(|c| !c.is_whitespace() && !c.is_control())
        .collect::<String>()
        .to_ascii_lowercase();
    lower.starts_with("javascript:") || lower.starts_with("vbscript:") || lower.starts_with("data:")
}

/// Relative document links become in-page anchors; external links are kept.
pub fn rewrite_href(href: &str) -> Option<String> {
    if href.starts_with('#') || has_scheme(href) || href.starts_with("//") {
        return Some(href.to_string());
    }
    href.split_once('#')
        .map(|(_, anchor)| format!("#{anchor}"))
        .filter(|a| a.len() > 1)
}

/// Serializes `tokens` through the whitelist. `rewrite_src` maps relative
/// image sources (it may fail, e.g. when the file is missing).
pub fn sanitize<E>(
    tokens: &[Token],
    mut rewrite_src: impl FnMut(&str, Pos) -> Result<String, E>,
) -> Result<String, E>
where
    E: From<SanitizeError>,
{
    let mut out = String::new();
    let mut open: Vec<String> = Vec::new();
    let mut skip_until: Option<(String, usize)> = None;

    for token in tokens {
        if let Some((name, depth)) = &mut skip_until {
            match token {
                Token::StartTag { name: n, self_closing: false, .. } if n == name => *depth += 1,
                Token::EndTag { name: n, .. } if n == name => {
                    *depth -= 1;
                    if *depth == 0 {
                        skip_until = None;
                    }
                }
                _ => {}
            }
            continue;
        }
        match token {
            Token::Doctype(_) | Token::Comment(_) => {}
            Token::Text(t) => out.push_str(&escape_text(&decode_entities(t))),
            Token::StartTag {
                name,
                attrs,
                self_closing,
                pos,
            } => {
                if REJECT.contains(&name.as_str()) {
                    return Err(SanitizeError {
                        construct: format!("<{name}> element"),
                        pos: *pos,
                    }
                    .into());
                }
                for (key, value) in attrs {
                    if key.starts_with("on") {
                        return Err(SanitizeError {
                            construct: format!("event handler attribute {key} on <{name}>"),
                            pos: *pos,
                        }
                        .into());
                    }
                    if matches!(key.as_str(), "href" | "src") {
                        if let Some(v) = value.as_deref().filter(|v| dangerous_url(v)) {
                            return Err(SanitizeError {
                                construct: format!("{key}={v:?} on <{name}>"),
                                pos: *pos,
                            }
                            .into());
                        }
                    }
                }
                if DROP_WITH_CONTENT.contains(&name.as_str()) {
                    if !self_closing {
                        skip_until = Some((name.clone(), 1));
                    }
                    continue;
                }
                if !KEEP.contains(&name.as_str()) {
                    continue;
                }
                out.push('<');
                out.push_str(name);
                for (key, value) in attrs {
                    if !attr_allowed(name, key) {
                        continue;
                    }
                    let value = value.as_deref().map(decode_entities);
                    let value = match (name.as_str(), key.as_str(), value) {
                        ("a", "href", Some(v)) => rewrite_href(&v),
                        ("img", "src", Some(v)) if !has_scheme(&v) && !v.starts_with("//") => {
                            Some(rewrite_src(&v, *pos)?)
                        }
                        (_, _, v) => v,
                    };
                    match value {
                        Some(v) => {
                            out.push(' ');
                            out.push_str(key);
                            out.push_str("=\"");
                            out.push_str(&escape_attr(&v));
                            out.push('"');
                        }
                        None if !matches!(key.as_str(), "href" | "src") => {
                            out.push(' ');
                            out.push_str(key);
                        }
                        None => {}
                    }
                }
                out.push('>');
                if !is_void(name) && !self_closing {
                    open.push(name.clone());
                } else if !is_void(name) {
                    out.push_str(&format!("</{name}>"));
                }
            }
            Token::EndTag { name, .. } => {
                if let Some(idx) = open.iter().rposition(|n| n == name) {
                    for n in open.drain(idx..).rev() {
                        out.push_str(&format!("</{n}>"));
                    }
                }
            }
        }
    }
    for n in open.into_iter().rev() {
        out.push_str(&format!("</{n}>"));
    }
    Ok(out)
}

const BLOCK: &[&str] = &[
    "address", "article", "aside", "blockquote", "br", "caption", "dd", "div", "dl", "dt",
    "figcaption", "figure", "footer", "h1", "h2", "h3", "h4", "h5", "h6", "header", "hr", "li",
    "main", "nav", "ol", "p", "pre", "section", "table", "tbody", "tfoot", "thead", "tr", "ul",
];

/// Accumulates visible text as normalized lines: block elements break
/// lines, runs of whitespace collapse to one space, empty lines vanish.
#[derive(Debug, Default)]
pub struct TextCollector {
    lines: Vec<String>,
    current: String,
}

impl TextCollector {
    pub fn push_text(&mut self, raw: &str) {
        self.current.push_str(&decode_entities(raw));
    }

    pub fn separator(&mut self) {
        self.current.push(' ');
    }

    pub fn break_line(&mut self) {
        let line = self
            .current
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        if !line.is_empty() {
            self.lines.push(line);
        }
        self.current.clear();
    }

    pub fn token(&mut self, token: &Token) {
        match token {
            Token::Text(t) => self.push_text(t),
            Token::StartTag { name, .. } | Token::EndTag { name, .. } => {
                if BLOCK.contains(&name.as_str()) {
                    self.break_line();
                } else if matches!(name.as_str(), "td" | "th") {
                    self.separator();
                }
            }
            _ => {}
        }
    }

    pub fn finish(mut self) -> Vec<String> {
        self.break_line();
        self.lines
    }
}

/// Visible text of an HTML snippet, one line per block.
pub fn text_lines(html: &str) -> Vec<String> {
    let mut collector = TextCollector::default();
    let mut skip: Option<String> = None;
    for token in tokenize(html) {
        if let Some(name) = &skip {
            if matches!(&token, Token::EndTag { name: n, .. } if n == name) {
                skip = None;
            }
            continue;
        }
        if let Token::StartTag { name, self_closing: false, .. } = &token {
            if RAW_TEXT.contains(&name.as_str()) {
                skip = Some(name.clone());
                continue;
            }
        }
        collector.token(&token);
    }
    collector.finish()
}
