//! Learning-mode output: human-readable difference reports and candidate
//! rules mined from a difference log.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::comparator::html::{open_tag_end, tag_name};
use crate::comparator::{path_segments, ContextKind, ABSENT, STATUS_LOCATOR};
use crate::config::RuleSet;
use crate::logs::LogEntry;
use crate::message::RequestSummary;

pub const DEFAULT_MIN_SUPPORT: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifferenceRecord {
    pub main_token: String,
    pub shadow_token: String,
    pub context_kind: ContextKind,
    pub locator: String,
    pub pair_key: String,
    pub timestamp: String,
    pub request_summary: RequestSummary,
}

/// One record per unexpected difference in the log.
pub fn records_from_log(entries: &[LogEntry]) -> Vec<DifferenceRecord> {
    entries
        .iter()
        .flat_map(|e| {
            e.unexpected.iter().map(move |t| DifferenceRecord {
                main_token: t.main_token.clone(),
                shadow_token: t.shadow_token.clone(),
                context_kind: t.context_kind,
                locator: t.locator.clone(),
                pair_key: e.pair_key.clone(),
                timestamp: e.time.clone(),
                request_summary: e.request_summary.clone(),
            })
        })
        .collect()
}

/// ```text
/// token: <shadow token> found in tag:
/// <locator>
/// ```
///
/// JSON members read `found at path: <path>`, headers `found in header:
/// <name>`. A deleted token prints as `<absent>`.
pub fn format_special(record: &DifferenceRecord) -> String {
    let token = if record.shadow_token.is_empty() {
        ABSENT
    } else {
        record.shadow_token.as_str()
    };
    match record.context_kind {
        ContextKind::HtmlTag | ContextKind::RawText => {
            format!("token: {token} found in tag:\n{}", record.locator)
        }
        ContextKind::JsonPath => format!("token: {token} found at path: {}", record.locator),
        ContextKind::HeaderField => format!("token: {token} found in header: {}", record.locator),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCandidate {
    pub name: String,
    /// Distinct pairs exhibiting the candidate.
    pub support: usize,
    /// Also proposed as a characteristic value: the difference sat in a form
    /// field or meta value the client echoes back.
    pub characteristic: bool,
    pub sample: DifferenceRecord,
}

struct Attr<'a> {
    name: &'a str,
    value: &'a str,
    /// Byte range of the value inside the tag.
    start: usize,
    end: usize,
}

fn parse_attrs(tag: &str) -> Vec<Attr<'_>> {
    let bytes = tag.as_bytes();
    let mut i = 1;
    while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'>' && bytes[i] != b'/' {
        i += 1;
    }
    let mut out = Vec::new();
    loop {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'/') {
            i += 1;
        }
        if i >= bytes.len() || bytes[i] == b'>' {
            return out;
        }
        let name_start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && !matches!(bytes[i], b'=' | b'>' | b'/') {
            i += 1;
        }
        let name = &tag[name_start..i];
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if bytes.get(i) != Some(&b'=') {
            out.push(Attr { name, value: "", start: i, end: i });
            continue;
        }
        i += 1;
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let (start, end) = match bytes.get(i) {
            Some(&q @ (b'"' | b'\'')) => {
                let start = i + 1;
                let end = tag[start..].find(q as char).map_or(tag.len(), |p| start + p);
                i = (end + 1).min(tag.len());
                (start, end)
            }
            _ => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'>' {
                    i += 1;
                }
                (start, i)
            }
        };
        out.push(Attr {
            name,
            value: &tag[start..end],
            start,
            end,
        });
    }
}

/// Cuts an indexed name like `Items[0].Id` down to `Items[` so one rule
/// covers every index.
fn generalize(name: &str) -> &str {
    let bytes = name.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'[' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
            return &name[..=i];
        }
    }
    name
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '$' | '.' | '[' | ']')
}

/// The identifier a value is assigned to, as in `name: "` or `name=`.
fn assigned_identifier(before: &str) -> Option<&str> {
    let trimmed = before.trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | ':' | '='));
    let separator = &before[trimmed.len()..];
    if !separator.contains([':', '=']) {
        return None;
    }
    let trimmed = trimmed.trim_end_matches(['"', '\'']);
    let start = trimmed
        .char_indices()
        .rev()
        .take_while(|(_, c)| is_ident_char(*c))
        .last()
        .map(|(i, _)| i)?;
    let ident = trimmed[start..].trim_matches(|c: char| !c.is_alphanumeric() && c != '_' && c != '[');
    ident.chars().any(char::is_alphabetic).then_some(ident)
}

/// Last run of three or more letters (plus `_`) in `s`.
fn last_word(s: &str) -> Option<&str> {
    let mut best = None;
    let mut run_start = None;
    for (i, c) in s.char_indices().chain(std::iter::once((s.len(), ' '))) {
        let word = c.is_alphabetic() || c == '_';
        match (word, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(st)) => {
                if s[st..i].chars().count() >= 3 {
                    best = Some(&s[st..i]);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    best
}

const NAMING_ATTRS: [&str; 5] = ["name", "id", "property", "itemprop", "http-equiv"];
const URL_ATTRS: [&str; 5] = ["href", "src", "action", "srcset", "data-src"];

fn naming_attr<'a>(attrs: &[Attr<'a>], order: &[&str]) -> Option<&'a str> {
    order.iter().find_map(|want| {
        attrs
            .iter()
            .find(|a| a.name.eq_ignore_ascii_case(want) && !a.value.is_empty())
            .map(|a| a.value)
    })
}

/// Candidate for a difference inside a tag, `pos` being the token's offset
/// in the tag text.
fn attribute_candidate(tag: &str, pos: usize) -> Option<(String, bool)> {
    let attrs = parse_attrs(tag);
    let attr = attrs.iter().find(|a| a.start <= pos && pos <= a.end && a.end > a.start)?;
    let element = tag_name(&tag[1..]);
    let lname = attr.name.to_ascii_lowercase();
    let (name, characteristic) = if lname == "value" || lname == "content" {
        let owner = naming_attr(&attrs, &NAMING_ATTRS).unwrap_or(attr.name);
        (owner, matches!(element.as_str(), "input" | "meta") && owner != attr.name)
    } else if URL_ATTRS.contains(&lname.as_str()) {
        let before = &tag[attr.start..pos];
        (last_word(before).unwrap_or(attr.name), false)
    } else {
        (attr.name, false)
    };
    Some((generalize(name).to_owned(), characteristic))
}

fn html_candidate(record: &DifferenceRecord) -> Option<(String, bool)> {
    let locator = record.locator.as_str();
    let token = if record.main_token.is_empty() {
        &record.shadow_token
    } else {
        &record.main_token
    };
    let open_end = open_tag_end(locator).filter(|_| locator.starts_with('<'))?;
    let open_tag = &locator[..open_end];

    if open_end == locator.len() {
        let pos = locator.find(token.as_str()).unwrap_or(0);
        return attribute_candidate(open_tag, pos);
    }

    // Text node: search after the open tag, before any closing tag.
    let text_start = open_end;
    let text_end = locator.rfind("</").filter(|&e| e >= text_start).unwrap_or(locator.len());
    let text = &locator[text_start..text_end];
    let from_text = text
        .find(token.as_str())
        .filter(|_| !token.is_empty())
        .and_then(|p| assigned_identifier(&text[..p]));
    let name = match from_text {
        Some(ident) => ident,
        None => naming_attr(&parse_attrs(open_tag), &["class", "id", "name"])?,
    };
    Some((generalize(name).to_owned(), false))
}

fn json_candidate(record: &DifferenceRecord) -> Option<(String, Option<(String, String)>)> {
    let segments: Vec<&str> = path_segments(&record.locator).collect();
    let (&last, parents) = segments.split_last()?;
    let parent = parents.last().map(|p| (parents.join("."), (*p).to_owned()));
    Some((last.to_owned(), parent))
}

fn is_pair_level(record: &DifferenceRecord) -> bool {
    record.context_kind == ContextKind::HeaderField
        && (record.locator == STATUS_LOCATOR || record.locator.eq_ignore_ascii_case("content-type"))
}

/// Groups records into rule candidates. Pairs with a status or content-type
/// difference are skipped as a whole: their bodies differ for behavioural
/// reasons, not because of per-instance values. Candidates below
/// `min_support` distinct pairs are dropped; the rest are ranked by support.
pub fn suggest_rules(records: &[DifferenceRecord], min_support: usize) -> Vec<RuleCandidate> {
    let skipped: HashSet<&str> = records
        .iter()
        .filter(|r| is_pair_level(r))
        .map(|r| r.pair_key.as_str())
        .collect();
    let usable: Vec<&DifferenceRecord> = records
        .iter()
        .filter(|r| !skipped.contains(r.pair_key.as_str()))
        .collect();

    // JSON members whose parent has several differing children are grouped
    // under the parent.
    let mut children: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in usable.iter().filter(|r| r.context_kind == ContextKind::JsonPath) {
        if let Some((leaf, Some((parent_path, _)))) = json_candidate(r) {
            children.entry(parent_path).or_default().insert(leaf);
        }
    }

    struct Acc<'a> {
        pairs: BTreeSet<&'a str>,
        characteristic: bool,
        sample: &'a DifferenceRecord,
    }
    let mut groups: BTreeMap<String, Acc<'_>> = BTreeMap::new();
    for r in usable {
        let candidate = match r.context_kind {
            ContextKind::HtmlTag => html_candidate(r),
            ContextKind::JsonPath => json_candidate(r).map(|(leaf, parent)| match parent {
                Some((path, name)) if children.get(&path).is_some_and(|c| c.len() >= 2) => (name, false),
                _ => (leaf, false),
            }),
            ContextKind::HeaderField => Some((r.locator.to_ascii_lowercase(), false)),
            ContextKind::RawText => None,
        };
        let Some((name, characteristic)) = candidate else {
            continue;
        };
        if name.trim() != name || name.is_empty() || name.contains(['\n', '\r']) {
            continue;
        }
        let acc = groups.entry(name).or_insert_with(|| Acc {
            pairs: BTreeSet::new(),
            characteristic: false,
            sample: r,
        });
        acc.pairs.insert(&r.pair_key);
        acc.characteristic |= characteristic;
    }

    let mut out: Vec<RuleCandidate> = groups
        .into_iter()
        .filter(|(_, acc)| acc.pairs.len() >= min_support.max(1))
        .map(|(name, acc)| RuleCandidate {
            name,
            support: acc.pairs.len(),
            characteristic: acc.characteristic,
            sample: acc.sample.clone(),
        })
        .collect();
    out.sort_by(|a, b| b.support.cmp(&a.support).then_with(|| a.name.cmp(&b.name)));
    out
}

/// Rule-file text for a candidate list, each rule preceded by its support.
pub fn render_candidates(candidates: &[RuleCandidate]) -> String {
    let mut out = String::new();
    for c in candidates {
        let _ = writeln!(out, "# support {}", c.support);
        let _ = writeln!(out, ":{}", c.name);
    }
    for c in candidates.iter().filter(|c| c.characteristic) {
        let _ = writeln!(out, "# characteristic, support {}", c.support);
        let _ = writeln!(out, "+{}", c.name);
    }
    out
}

/// The candidates as a rule set.
pub fn candidates_to_rules(candidates: &[RuleCandidate]) -> RuleSet {
    let mut rules = RuleSet::new();
    for c in candidates {
        let _ = rules.push_expected(c.name.clone());
    }
    for c in candidates.iter().filter(|c| c.characteristic) {
        let _ = rules.push_characteristic(c.name.clone());
    }
    rules
}
