//! Character-level diff with run coalescing.

use std::ops::Range;
use std::time::{Duration, Instant};

use similar::{capture_diff_deadline, Algorithm, DiffOp};

use super::html::extract_context_at;
use super::DifferenceToken;

/// Upper bound on time spent in the O(ND) search before falling back to a
/// coarser (still correct) edit script.
const DIFF_DEADLINE: Duration = Duration::from_secs(2);

/// One coalesced run of deletions from `main` and insertions into `shadow`,
/// as byte ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct EditSpan {
    pub main: Range<usize>,
    pub shadow: Range<usize>,
}

/// Diffs two texts and turns every coalesced edit run into a token whose
/// context is taken from the main body.
pub fn compare_text(main: &str, shadow: &str) -> Vec<DifferenceToken> {
    edit_spans(main, shadow)
        .into_iter()
        .map(|span| {
            let context = extract_context_at(main, span.main.start, span.main.len());
            DifferenceToken {
                main_token: main[span.main.clone()].to_owned(),
                shadow_token: shadow[span.shadow.clone()].to_owned(),
                context,
                byte_offset_main: Some(span.main.start),
                byte_offset_shadow: Some(span.shadow.start),
            }
        })
        .collect()
}

/// Edit spans between `a` and `b`. The search always runs with the
/// lexicographically smaller text first, so swapping the arguments yields the
/// same spans with roles swapped.
pub(crate) fn edit_spans(a: &str, b: &str) -> Vec<EditSpan> {
    if a == b {
        return Vec::new();
    }
    if a <= b {
        raw_spans(a, b)
    } else {
        raw_spans(b, a)
            .into_iter()
            .map(|s| EditSpan {
                main: s.shadow,
                shadow: s.main,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Segment {
    Equal { a: Range<usize> },
    Edit { a: Range<usize>, b: Range<usize> },
}

fn raw_spans(a: &str, b: &str) -> Vec<EditSpan> {
    let (a_chars, a_offsets) = chars_with_offsets(a);
    let (b_chars, b_offsets) = chars_with_offsets(b);

    let deadline = Instant::now() + DIFF_DEADLINE;
    let ops = capture_diff_deadline(
        Algorithm::Myers,
        &a_chars,
        0..a_chars.len(),
        &b_chars,
        0..b_chars.len(),
        Some(deadline),
    );

    // Segments in char indices. Positions are rebuilt from op lengths rather
    // than taken from the ops, and equal runs are verified.
    let mut segments: Vec<Segment> = Vec::new();
    let (mut ai, mut bi) = (0usize, 0usize);
    for op in ops {
        let (old_len, new_len) = (op.old_range().len(), op.new_range().len());
        let a = ai..ai + old_len;
        let b = bi..bi + new_len;
        ai += old_len;
        bi += new_len;
        let is_equal = matches!(op, DiffOp::Equal { .. }) && a_chars[a.clone()] == b_chars[b.clone()];
        if is_equal {
            segments.push(Segment::Equal { a });
            continue;
        }
        match segments.last_mut() {
            Some(Segment::Edit { a: la, b: lb }) => {
                la.end = a.end;
                lb.end = b.end;
            }
            _ => segments.push(Segment::Edit { a, b }),
        }
    }
    debug_assert_eq!((ai, bi), (a_chars.len(), b_chars.len()));

    let segments = absorb_short_equalities(segments, &a_chars);

    segments
        .into_iter()
        .filter_map(|s| match s {
            Segment::Edit { a, b } => Some(EditSpan {
                main: a_offsets[a.start]..a_offsets[a.end],
                shadow: b_offsets[b.start]..b_offsets[b.end],
            }),
            Segment::Equal { .. } => None,
        })
        .collect()
}

/// Char vector plus byte offset of every char, with a trailing entry for the
/// end of the string.
fn chars_with_offsets(s: &str) -> (Vec<char>, Vec<usize>) {
    let mut chars = Vec::with_capacity(s.len());
    let mut offsets = Vec::with_capacity(s.len() + 1);
    for (i, c) in s.char_indices() {
        chars.push(c);
        offsets.push(i);
    }
    offsets.push(s.len());
    (chars, offsets)
}

/// Merges `edit, equal, edit` triples when the equality is no longer than the
/// larger side of both neighbouring edits. Coincidental matches inside two
/// random tokens collapse this way. An equality holding markup delimiters or a
/// line break is never absorbed, so differences in separate tags stay apart.
fn absorb_short_equalities(mut segments: Vec<Segment>, a_chars: &[char]) -> Vec<Segment> {
    loop {
        let mut changed = false;
        let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
        let mut i = 0;
        while i < segments.len() {
            if let (Some(Segment::Edit { a: la, b: lb }), Some(Segment::Equal { a: ea, .. }), Some(Segment::Edit { a: ra, b: rb })) =
                (out.last(), segments.get(i), segments.get(i + 1))
            {
                let eq_len = ea.len();
                let left = la.len().max(lb.len());
                let right = ra.len().max(rb.len());
                let structural = a_chars[ea.clone()]
                    .iter()
                    .any(|c| matches!(c, '<' | '>' | '\n'));
                if !structural && eq_len <= left && eq_len <= right {
                    let merged = Segment::Edit {
                        a: la.start..ra.end,
                        b: lb.start..rb.end,
                    };
                    *out.last_mut().unwrap() = merged;
                    i += 2;
                    changed = true;
                    continue;
                }
            }
            out.push(segments[i].clone());
            i += 1;
        }
        segments = out;
        if !changed {
            return segments;
        }
    }
}
