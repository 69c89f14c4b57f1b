//! Structural JSON comparison. Objects compare member-wise regardless of
//! member order; arrays compare by index.

use std::collections::BTreeSet;

use serde_json::Value;

use super::{ContextKind, DifferenceContext, DifferenceToken};

/// Locator used for a difference at the document root.
pub const ROOT_PATH: &str = "$";

/// Compares two documents from the root.
pub fn compare_json(main: &Value, shadow: &Value) -> Vec<DifferenceToken> {
    compare_json_at(main, shadow, "")
}

/// Compares two sub-documents located at `path` (empty for the root).
pub fn compare_json_at(main: &Value, shadow: &Value, path: &str) -> Vec<DifferenceToken> {
    let mut out = Vec::new();
    let mut path = path.to_owned();
    walk(Some(main), Some(shadow), &mut path, &mut out);
    out
}

fn walk(main: Option<&Value>, shadow: Option<&Value>, path: &mut String, out: &mut Vec<DifferenceToken>) {
    match (main, shadow) {
        (Some(Value::Object(a)), Some(Value::Object(b))) => {
            let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            for key in keys {
                let mark = path.len();
                if !path.is_empty() {
                    path.push('.');
                }
                path.push_str(key);
                walk(a.get(key), b.get(key), path, out);
                path.truncate(mark);
            }
        }
        (Some(Value::Array(a)), Some(Value::Array(b))) => {
            for i in 0..a.len().max(b.len()) {
                let mark = path.len();
                path.push_str(&format!("[{i}]"));
                walk(a.get(i), b.get(i), path, out);
                path.truncate(mark);
            }
        }
        (a, b) => {
            if !scalar_eq(a, b) {
                let (main_token, shadow_token) = render_pair(a, b);
                out.push(DifferenceToken {
                    main_token,
                    shadow_token,
                    context: DifferenceContext {
                        kind: ContextKind::JsonPath,
                        locator: if path.is_empty() {
                            ROOT_PATH.to_owned()
                        } else {
                            path.clone()
                        },
                    },
                    byte_offset_main: None,
                    byte_offset_shadow: None,
                });
            }
        }
    }
}

/// Type-and-value equality; numbers compare numerically so `1` and `1.0`
/// agree.
fn scalar_eq(a: Option<&Value>, b: Option<&Value>) -> bool {
    match (a, b) {
        (Some(Value::Number(x)), Some(Value::Number(y))) => {
            if let (Some(x), Some(y)) = (x.as_i64(), y.as_i64()) {
                x == y
            } else if let (Some(x), Some(y)) = (x.as_u64(), y.as_u64()) {
                x == y
            } else {
                x.as_f64() == y.as_f64()
            }
        }
        (a, b) => a == b,
    }
}

/// Two strings render as their raw contents; anything else (including a
/// string facing a number) renders as JSON text so the tokens stay distinct.
fn render_pair(a: Option<&Value>, b: Option<&Value>) -> (String, String) {
    match (a, b) {
        (Some(Value::String(x)), Some(Value::String(y))) => (x.clone(), y.clone()),
        (a, b) => (
            a.map(Value::to_string).unwrap_or_default(),
            b.map(Value::to_string).unwrap_or_default(),
        ),
    }
}

/// Splits a locator like `result.items[2].id` into member names
/// (`result`, `items`, `id`), dropping index suffixes.
pub fn path_segments(path: &str) -> impl Iterator<Item = &str> {
    path.split('.')
        .map(|seg| seg.split('[').next().unwrap_or(seg))
        .filter(|seg| !seg.is_empty() && *seg != ROOT_PATH)
}
