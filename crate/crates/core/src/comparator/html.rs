//! Lightweight markup scanning: enough to find the tag or element that
//! encloses a byte offset. No DOM is built.

use std::ops::Range;

use super::{ContextKind, DifferenceContext, DifferenceToken};

/// Width, in characters, of the window reported for differences outside any
/// markup.
pub const RAW_WINDOW_CHARS: usize = 64;

const VOID_ELEMENTS: &[&str] = &[
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta", "param",
    "source", "track", "wbr",
];
const RAW_TEXT_ELEMENTS: &[&str] = &["script", "style", "textarea", "title"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TagKind {
    Open,
    SelfClosing,
    Close,
    /// Comments, doctype, processing instructions.
    Other,
}

#[derive(Debug, Clone)]
pub(crate) struct Tag {
    pub span: Range<usize>,
    pub name: String,
    pub kind: TagKind,
}

/// Tokenizes `body` into tags. Returns `None` for markup that cannot be
/// scanned, e.g. an unterminated tag.
pub(crate) fn scan_tags(body: &str) -> Option<Vec<Tag>> {
    let bytes = body.as_bytes();
    let mut tags = Vec::new();
    let mut i = 0;
    while let Some(rel) = memchr(b'<', &bytes[i..]) {
        let start = i + rel;
        let rest = &body[start..];
        if rest.starts_with("<!--") {
            let end = rest.find("-->")? + 3;
            tags.push(Tag {
                span: start..start + end,
                name: String::new(),
                kind: TagKind::Other,
            });
            i = start + end;
            continue;
        }
        let next = bytes.get(start + 1).copied();
        match next {
            Some(b'!') | Some(b'?') => {
                let end = rest.find('>')? + 1;
                tags.push(Tag {
                    span: start..start + end,
                    name: String::new(),
                    kind: TagKind::Other,
                });
                i = start + end;
            }
            Some(b'/') if bytes.get(start + 2).is_some_and(u8::is_ascii_alphabetic) => {
                let end = rest.find('>')? + 1;
                let name = tag_name(&rest[2..]);
                tags.push(Tag {
                    span: start..start + end,
                    name,
                    kind: TagKind::Close,
                });
                i = start + end;
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let end = open_tag_end(rest)?;
                let name = tag_name(&rest[1..]);
                let self_closing = rest[..end - 1].trim_end().ends_with('/');
                let kind = if self_closing || VOID_ELEMENTS.contains(&name.as_str()) {
                    TagKind::SelfClosing
                } else {
                    TagKind::Open
                };
                let raw_text = kind == TagKind::Open && RAW_TEXT_ELEMENTS.contains(&name.as_str());
                tags.push(Tag {
                    span: start..start + end,
                    name: name.clone(),
                    kind,
                });
                i = start + end;
                if raw_text {
                    // Content is opaque up to the matching close tag.
                    let needle = format!("</{name}");
                    let lower = body[i..].to_ascii_lowercase();
                    // Unterminated: the rest of the body is its content.
                    i += lower.find(&needle).unwrap_or(body.len() - i);
                }
            }
            // A literal '<' in text.
            _ => i = start + 1,
        }
    }
    Some(tags)
}

fn memchr(needle: u8, hay: &[u8]) -> Option<usize> {
    hay.iter().position(|&b| b == needle)
}

pub(crate) fn tag_name(s: &str) -> String {
    s.chars()
        .take_while(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | ':'))
        .collect::<String>()
        .to_ascii_lowercase()
}

/// Byte length of an open tag starting at `s[0] == '<'`, honouring quoted
/// attribute values that may contain `>`.
pub(crate) fn open_tag_end(s: &str) -> Option<usize> {
    let mut quote: Option<char> = None;
    for (i, c) in s.char_indices().skip(1) {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '"') | (None, '\'') => quote = Some(c),
            (None, '>') => return Some(i + 1),
            (None, '<') => return None,
            _ => {}
        }
    }
    None
}

/// The tag whose angle brackets strictly enclose `offset`.
pub(crate) fn tag_at<'a>(body: &'a str, tags: &[Tag], offset: usize) -> Option<&'a str> {
    tags.iter()
        .find(|t| t.span.start < offset && offset < t.span.end)
        .map(|t| &body[t.span.clone()])
}

/// Convenience wrapper that scans first.
pub fn enclosing_tag(body: &str, offset: usize) -> Option<&str> {
    let tags = scan_tags(body)?;
    tag_at(body, &tags, offset)
}

/// Context for a difference token located in `body` (the main body).
pub fn extract_context(body: &str, token: &DifferenceToken) -> DifferenceContext {
    match token.byte_offset_main {
        Some(offset) if offset <= body.len() && body.is_char_boundary(offset) => {
            extract_context_at(body, offset, token.main_token.len())
        }
        _ => raw_window(body, 0, 0),
    }
}

pub(crate) fn extract_context_at(body: &str, offset: usize, len: usize) -> DifferenceContext {
    if !body.contains('<') {
        return raw_window(body, offset, len);
    }
    let Some(tags) = scan_tags(body) else {
        return raw_window(body, offset, len);
    };

    if let Some(tag) = tag_at(body, &tags, offset) {
        return DifferenceContext {
            kind: ContextKind::HtmlTag,
            locator: tag.to_owned(),
        };
    }

    // Open elements at `offset`, innermost last.
    let mut stack: Vec<&Tag> = Vec::new();
    let mut text_start = 0;
    let mut next_tag: Option<&Tag> = None;
    for tag in &tags {
        if tag.span.start >= offset {
            next_tag = Some(tag);
            break;
        }
        text_start = tag.span.end;
        match tag.kind {
            TagKind::Open => stack.push(tag),
            TagKind::Close => {
                if let Some(pos) = stack.iter().rposition(|t| t.name == tag.name) {
                    stack.truncate(pos);
                }
            }
            TagKind::SelfClosing | TagKind::Other => {}
        }
    }
    let Some(element) = stack.last() else {
        return raw_window(body, offset, len);
    };

    let text_end = next_tag.map_or(body.len(), |t| t.span.start);
    let closes_element = next_tag
        .is_some_and(|t| t.kind == TagKind::Close && t.name == element.name);
    let end = match next_tag {
        Some(t) if closes_element => t.span.end,
        _ => text_end,
    };

    let locator = if text_start == element.span.end {
        body[element.span.start..end].to_owned()
    } else {
        format!(
            "{}…{}",
            &body[element.span.clone()],
            &body[text_start..end]
        )
    };
    DifferenceContext {
        kind: ContextKind::HtmlTag,
        locator,
    }
}

/// A window of [`RAW_WINDOW_CHARS`] characters centred on the token.
pub(crate) fn raw_window(body: &str, offset: usize, len: usize) -> DifferenceContext {
    let char_starts: Vec<usize> = body.char_indices().map(|(i, _)| i).collect();
    let total = char_starts.len();
    let mid_byte = offset + len / 2;
    let mid = char_starts.partition_point(|&b| b < mid_byte);
    let half = RAW_WINDOW_CHARS / 2;
    let start = mid.saturating_sub(half).min(total.saturating_sub(RAW_WINDOW_CHARS));
    let end = (start + RAW_WINDOW_CHARS).min(total);
    let byte_start = char_starts.get(start).copied().unwrap_or(body.len());
    let byte_end = char_starts.get(end).copied().unwrap_or(body.len());
    let locator = body[byte_start..byte_end].to_owned();
    DifferenceContext {
        kind: ContextKind::RawText,
        // An empty body still needs a non-empty locator.
        locator: if locator.is_empty() {
            "<empty>".to_owned()
        } else {
            locator
        },
    }
}

/// Compares two open tags by their sorted letters and digits, so attribute
/// order does not matter. Attribute names that are anagrams of each other
/// ("name" and "eman") also compare equal.
pub fn tags_equal_normalized(tag_main: &str, tag_shadow: &str) -> bool {
    fn normalized(tag: &str) -> Vec<char> {
        let mut chars: Vec<char> = tag.chars().filter(|c| c.is_alphanumeric()).collect();
        chars.sort_unstable();
        chars
    }
    normalized(tag_main) == normalized(tag_shadow)
}
