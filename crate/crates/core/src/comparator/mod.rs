//! Response comparison: find differences between the main and shadow
//! responses of a pair, attach context, and sort them into expected and
//! unexpected per the rule set.

pub(crate) mod html;
mod json;
mod text;

use serde::{Deserialize, Serialize};

pub use html::{enclosing_tag, extract_context, tags_equal_normalized, RAW_WINDOW_CHARS};
pub use json::{compare_json, compare_json_at, path_segments, ROOT_PATH};
pub use text::compare_text;

use crate::config::RuleSet;
use crate::message::{BodyClass, MediaType, Response};
use crate::pairing::{PairKey, ResponsePair};

/// Locator used for status-code differences and missing responses.
pub const STATUS_LOCATOR: &str = ":status";
/// Token text standing in for a response that never arrived.
pub const ABSENT: &str = "<absent>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    HtmlTag,
    JsonPath,
    HeaderField,
    RawText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifferenceContext {
    pub kind: ContextKind,
    pub locator: String,
}

/// One localized divergence. Offsets are byte offsets into the decoded
/// bodies; they are absent for JSON members and headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifferenceToken {
    pub main_token: String,
    pub shadow_token: String,
    pub context: DifferenceContext,
    pub byte_offset_main: Option<usize>,
    pub byte_offset_shadow: Option<usize>,
}

impl DifferenceToken {
    fn synthetic(main: String, shadow: String, locator: &str) -> Self {
        DifferenceToken {
            main_token: main,
            shadow_token: shadow,
            context: DifferenceContext {
                kind: ContextKind::HeaderField,
                locator: locator.to_owned(),
            },
            byte_offset_main: None,
            byte_offset_shadow: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Equal,
    ExpectedOnly,
    Alarm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Classification {
    Expected(String),
    Unexpected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonOutcome {
    pub pair_key: PairKey,
    pub verdict: Verdict,
    pub expected: Vec<(DifferenceToken, String)>,
    pub unexpected: Vec<DifferenceToken>,
    pub warnings: Vec<String>,
}

impl ComparisonOutcome {
    pub fn new(
        pair_key: PairKey,
        expected: Vec<(DifferenceToken, String)>,
        unexpected: Vec<DifferenceToken>,
        warnings: Vec<String>,
    ) -> Self {
        let verdict = if !unexpected.is_empty() {
            Verdict::Alarm
        } else if !expected.is_empty() {
            Verdict::ExpectedOnly
        } else {
            Verdict::Equal
        };
        ComparisonOutcome {
            pair_key,
            verdict,
            expected,
            unexpected,
            warnings,
        }
    }
}

/// Decides whether a difference is covered by an expected-difference rule.
/// The first matching rule in rule-set order wins.
pub fn classify(token: &DifferenceToken, rules: &RuleSet) -> Classification {
    let locator = token.context.locator.as_str();
    let hit = rules.expected_differences().iter().find(|rule| match token.context.kind {
        ContextKind::HtmlTag => locator.contains(rule.as_str()),
        ContextKind::JsonPath => path_segments(locator).any(|seg| seg == rule.as_str()),
        ContextKind::HeaderField => locator.eq_ignore_ascii_case(rule),
        ContextKind::RawText => false,
    });
    match hit {
        Some(rule) => Classification::Expected(rule.clone()),
        None => Classification::Unexpected,
    }
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    /// Headers compared besides the status code and content type. Lowercase.
    pub compared_headers: Vec<String>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            compared_headers: vec!["location".to_owned()],
        }
    }
}

/// Compares pairs against a fixed rule set.
#[derive(Debug, Clone)]
pub struct Comparator {
    rules: RuleSet,
    options: CompareOptions,
}

impl Comparator {
    pub fn new(rules: RuleSet, options: CompareOptions) -> Self {
        Comparator { rules, options }
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn compare_pair(&self, pair: &ResponsePair) -> ComparisonOutcome {
        let key = pair.key.clone();
        let (main, shadow) = match (&pair.main_response, &pair.shadow_response) {
            (Some(m), Some(s)) => (m, s),
            (m, s) => {
                let side = |r: &Option<Response>| {
                    r.as_ref()
                        .map_or_else(|| ABSENT.to_owned(), |r| r.status.to_string())
                };
                let token = DifferenceToken::synthetic(side(m), side(s), STATUS_LOCATOR);
                return ComparisonOutcome::new(
                    key,
                    Vec::new(),
                    vec![token],
                    vec!["pair incomplete at deadline".to_owned()],
                );
            }
        };

        let mut warnings = Vec::new();
        let mut always_unexpected = Vec::new();

        if main.status != shadow.status {
            always_unexpected.push(DifferenceToken::synthetic(
                main.status.to_string(),
                shadow.status.to_string(),
                STATUS_LOCATOR,
            ));
        }

        let main_type = main.media_type.as_ref().map(MediaType::essence);
        let shadow_type = shadow.media_type.as_ref().map(MediaType::essence);
        if main_type != shadow_type {
            always_unexpected.push(DifferenceToken::synthetic(
                main_type.unwrap_or_default().to_owned(),
                shadow_type.unwrap_or_default().to_owned(),
                "content-type",
            ));
            return ComparisonOutcome::new(key, Vec::new(), always_unexpected, warnings);
        }

        let mut tokens = self.header_tokens(main, shadow);
        tokens.extend(body_tokens(main, shadow, &mut warnings));

        let mut expected = Vec::new();
        let mut unexpected = always_unexpected;
        for token in tokens {
            match classify(&token, &self.rules) {
                Classification::Expected(rule) => expected.push((token, rule)),
                Classification::Unexpected => unexpected.push(token),
            }
        }
        ComparisonOutcome::new(key, expected, unexpected, warnings)
    }

    fn header_tokens(&self, main: &Response, shadow: &Response) -> Vec<DifferenceToken> {
        self.options
            .compared_headers
            .iter()
            .filter_map(|name| {
                let a = main.headers.get_all(name).collect::<Vec<_>>().join(", ");
                let b = shadow.headers.get_all(name).collect::<Vec<_>>().join(", ");
                (a != b).then(|| DifferenceToken::synthetic(a, b, name))
            })
            .collect()
    }
}

/// Compares a pair with default options.
pub fn compare_pair(pair: &ResponsePair, rules: &RuleSet) -> ComparisonOutcome {
    Comparator::new(rules.clone(), CompareOptions::default()).compare_pair(pair)
}

fn body_tokens(main: &Response, shadow: &Response, warnings: &mut Vec<String>) -> Vec<DifferenceToken> {
    if main.body == shadow.body {
        return Vec::new();
    }
    let class = match &main.media_type {
        Some(mt) => mt.class(),
        None if main.text().is_some() && shadow.text().is_some() => BodyClass::Text,
        None => BodyClass::Binary,
    };

    if class == BodyClass::Json {
        let parsed = (
            serde_json::from_slice::<serde_json::Value>(&main.body),
            serde_json::from_slice::<serde_json::Value>(&shadow.body),
        );
        match parsed {
            (Ok(a), Ok(b)) => return compare_json(&a, &b),
            _ => warnings.push("declared JSON body failed to parse; compared as text".to_owned()),
        }
    }

    if class != BodyClass::Binary {
        match (main.text(), shadow.text()) {
            (Some(a), Some(b)) => return suppress_reordered_tags(a, b, compare_text(a, b)),
            _ => warnings.push("text body is not valid UTF-8; compared as bytes".to_owned()),
        }
    }
    binary_tokens(&main.body, &shadow.body)
}

/// Drops differences that sit inside a tag whose counterpart carries the same
/// letters and digits, i.e. the same attributes in another order.
fn suppress_reordered_tags(main: &str, shadow: &str, tokens: Vec<DifferenceToken>) -> Vec<DifferenceToken> {
    if !tokens.iter().any(|t| t.context.kind == ContextKind::HtmlTag) {
        return tokens;
    }
    let (Some(main_tags), Some(shadow_tags)) = (html::scan_tags(main), html::scan_tags(shadow)) else {
        return tokens;
    };
    tokens
        .into_iter()
        .filter(|t| {
            if t.context.kind != ContextKind::HtmlTag {
                return true;
            }
            let (Some(om), Some(os)) = (t.byte_offset_main, t.byte_offset_shadow) else {
                return true;
            };
            match (
                html::tag_at(main, &main_tags, om),
                html::tag_at(shadow, &shadow_tags, os),
            ) {
                (Some(a), Some(b)) => !tags_equal_normalized(a, b),
                _ => true,
            }
        })
        .collect()
}

/// Longest differing middle of two byte strings after trimming the common
/// prefix and suffix.
fn binary_tokens(a: &[u8], b: &[u8]) -> Vec<DifferenceToken> {
    const MAX_TOKEN_BYTES: usize = 256;
    if a == b {
        return Vec::new();
    }
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let suffix = a[prefix..]
        .iter()
        .rev()
        .zip(b[prefix..].iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    let mid_a = &a[prefix..a.len() - suffix];
    let mid_b = &b[prefix..b.len() - suffix];
    let show = |m: &[u8]| {
        let shown = &m[..m.len().min(MAX_TOKEN_BYTES)];
        let mut s = hex::encode(shown);
        if m.len() > shown.len() {
            s.push_str(&format!("…(+{} bytes)", m.len() - shown.len()));
        }
        s
    };
    vec![DifferenceToken {
        main_token: show(mid_a),
        shadow_token: show(mid_b),
        context: DifferenceContext {
            kind: ContextKind::RawText,
            locator: format!("binary body at byte {prefix}"),
        },
        byte_offset_main: Some(prefix),
        byte_offset_shadow: Some(prefix),
    }]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::message::{Headers, RequestSummary};
    use std::time::{Duration, Instant};

    fn pair(main: Option<Response>, shadow: Option<Response>) -> ResponsePair {
        let now = Instant::now();
        ResponsePair {
            key: PairKey::from_raw("k1"),
            request_summary: RequestSummary {
                method: "GET".into(),
                uri: "/".into(),
                session: "s".into(),
            },
            main_response: main,
            shadow_response: shadow,
            created_at: now,
            deadline: now + Duration::from_secs(30),
            completed_at: None,
        }
    }

    fn html(status: u16, body: &str) -> Response {
        Response::with_type(status, "text/html; charset=utf-8", body.to_owned())
    }

    const PAGE: &str = "<html><head><script type=\"text/javascript\">\n  var odoo = {\n    csrf_token: \"b0008cae11221c91b9a8f65d17c33202c819c5fa\",\n        };\n</script></head><body><p>hi</p></body></html>";

    #[test]
    fn identical_bodies_are_equal() {
        let out = compare_pair(&pair(Some(html(200, PAGE)), Some(html(200, PAGE))), &RuleSet::new());
        assert_eq!(out.verdict, Verdict::Equal);
        assert!(out.expected.is_empty() && out.unexpected.is_empty());
    }

    #[test]
    fn csrf_difference_is_expected() {
        let shadow = PAGE.replace("b0008cae11221c91b9a8f65d17c33202c819c5fa", "77d1e0a94c3b2f18e6a5d4c3b2a1f0e9d8c7b6a5");
        let rules = parse_config(":csrf_token\n").unwrap();
        let out = compare_pair(&pair(Some(html(200, PAGE)), Some(html(200, &shadow))), &rules);
        assert_eq!(out.verdict, Verdict::ExpectedOnly, "{out:?}");
        assert_eq!(out.expected.len(), 1);
        assert_eq!(out.expected[0].1, "csrf_token");
    }

    #[test]
    fn status_mismatch_always_alarms() {
        let rules = parse_config(":status\n::status\n").unwrap();
        let out = compare_pair(&pair(Some(html(200, PAGE)), Some(html(500, PAGE))), &rules);
        assert_eq!(out.verdict, Verdict::Alarm);
        assert_eq!(out.unexpected[0].context.locator, STATUS_LOCATOR);
        assert_eq!(out.unexpected[0].main_token, "200");
        assert_eq!(out.unexpected[0].shadow_token, "500");
    }

    #[test]
    fn missing_side_alarms() {
        let out = compare_pair(&pair(Some(html(200, PAGE)), None), &RuleSet::new());
        assert_eq!(out.verdict, Verdict::Alarm);
        assert_eq!(out.unexpected[0].shadow_token, ABSENT);
    }

    #[test]
    fn content_type_mismatch_alarms() {
        let shadow = Response::with_type(200, "application/json", "{}");
        let out = compare_pair(&pair(Some(html(200, PAGE)), Some(shadow)), &RuleSet::new());
        assert_eq!(out.verdict, Verdict::Alarm);
        assert_eq!(out.unexpected[0].context.locator, "content-type");
    }

    #[test]
    fn json_members_compared_structurally() {
        let a = Response::with_type(200, "application/json", r#"{"result":{"session_info":{"uid":7}},"ok":true}"#);
        let b = Response::with_type(200, "application/json", r#"{"ok":true,"result":{"session_info":{"uid":9}}}"#);
        let rules = parse_config(": session_info\n").unwrap();
        let out = compare_pair(&pair(Some(a.clone()), Some(b.clone())), &rules);
        assert_eq!(out.verdict, Verdict::ExpectedOnly);
        let out = compare_pair(&pair(Some(a), Some(b)), &RuleSet::new());
        assert_eq!(out.verdict, Verdict::Alarm);
        assert_eq!(out.unexpected[0].context.locator, "result.session_info.uid");
    }

    #[test]
    fn broken_json_falls_back_to_text() {
        let a = Response::with_type(200, "application/json", "{oops 1");
        let b = Response::with_type(200, "application/json", "{oops 2");
        let out = compare_pair(&pair(Some(a), Some(b)), &RuleSet::new());
        assert_eq!(out.verdict, Verdict::Alarm);
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.unexpected[0].context.kind, ContextKind::RawText);
    }

    #[test]
    fn reordered_attributes_are_suppressed() {
        let a = html(200, "<div class=\"x\" id=\"y\">t</div>");
        let b = html(200, "<div id=\"y\" class=\"x\">t</div>");
        let out = compare_pair(&pair(Some(a), Some(b)), &RuleSet::new());
        assert_eq!(out.verdict, Verdict::Equal, "{out:?}");
    }

    #[test]
    fn binary_bodies_compare_bytes() {
        let a = Response::with_type(200, "image/png", vec![1u8, 2, 3, 4]);
        let b = Response::with_type(200, "image/png", vec![1u8, 9, 3, 4]);
        let out = compare_pair(&pair(Some(a.clone()), Some(b)), &RuleSet::new());
        assert_eq!(out.unexpected[0].main_token, "02");
        assert_eq!(out.unexpected[0].shadow_token, "09");
        let out = compare_pair(&pair(Some(a.clone()), Some(a)), &RuleSet::new());
        assert_eq!(out.verdict, Verdict::Equal);
    }

    #[test]
    fn location_header_is_compared() {
        let mut ha = Headers::new();
        ha.push("location", "/items/3");
        let mut hb = Headers::new();
        hb.push("location", "/items/7");
        let a = Response::new(302, ha, "");
        let b = Response::new(302, hb, "");
        let out = compare_pair(&pair(Some(a.clone()), Some(b.clone())), &RuleSet::new());
        assert_eq!(out.unexpected[0].context.kind, ContextKind::HeaderField);
        let out = compare_pair(&pair(Some(a), Some(b)), &parse_config(":Location").unwrap());
        assert_eq!(out.verdict, Verdict::ExpectedOnly);
    }

    fn token(kind: ContextKind, locator: &str) -> DifferenceToken {
        DifferenceToken {
            main_token: "a".into(),
            shadow_token: "b".into(),
            context: DifferenceContext {
                kind,
                locator: locator.into(),
            },
            byte_offset_main: None,
            byte_offset_shadow: None,
        }
    }

    #[test]
    fn classification_examples() {
        let odoo = parse_config(": csrf_token\n: session_info\n").unwrap();
        assert_eq!(
            classify(&token(ContextKind::JsonPath, "result.session_info.uid"), &odoo),
            Classification::Expected("session_info".into())
        );
        assert_eq!(
            classify(&token(ContextKind::RawText, "csrf_token session_info"), &odoo),
            Classification::Unexpected
        );
        assert_eq!(
            classify(
                &token(ContextKind::HtmlTag, "<meta name=\"csrf-token\" content=\"x\">"),
                &odoo
            ),
            Classification::Unexpected
        );
        // json segments match whole member names only
        let dates = parse_config(":date").unwrap();
        assert_eq!(
            classify(&token(ContextKind::JsonPath, "result.write_date"), &dates),
            Classification::Unexpected
        );
        // first rule in order wins
        let both = parse_config(":input\n:csrf_token").unwrap();
        assert_eq!(
            classify(&token(ContextKind::HtmlTag, "<input name=\"csrf_token\">"), &both),
            Classification::Expected("input".into())
        );
    }
}
