//! Distant supervision: derives a word-level edit matrix from an
//! `(context, incomplete, rewrite)` triple using an LCS alignment.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dialogue::{join_context, ConnectionWordList, DialogueExample, JoinedContext, Token, TokenKind};
use crate::edit::{EditMatrix, EditType};

/// Maximum-length monotone matching of equal tokens between `a` and `b`.
///
/// Ties are broken towards the earliest positions: the backtrace walks the
/// suffix table from the front, takes a diagonal whenever it is optimal and
/// otherwise advances in `b` before `a`.
pub fn lcs_align<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let width = m + 1;
    // suffix[i][j] = LCS length of a[i..] and b[j..]
    let mut suffix = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i * width + j] = if a[i] == b[j] {
                suffix[(i + 1) * width + j + 1] + 1
            } else {
                suffix[(i + 1) * width + j].max(suffix[i * width + j + 1])
            };
        }
    }
    let mut out = Vec::with_capacity(suffix[0] as usize);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        let here = suffix[i * width + j];
        if a[i] == b[j] && here == suffix[(i + 1) * width + j + 1] + 1 {
            out.push((i, j));
            i += 1;
            j += 1;
        } else if suffix[i * width + j + 1] >= suffix[(i + 1) * width + j] {
            j += 1;
        } else {
            i += 1;
        }
    }
    out
}

/// A maximal run of unmatched tokens together with the LCS anchors around it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedSpan {
    pub range: Range<usize>,
    /// Matched `(x, x*)` pair right before the span, if any.
    pub prev_anchor: Option<(usize, usize)>,
    /// Matched `(x, x*)` pair right after the span, if any.
    pub next_anchor: Option<(usize, usize)>,
}

type Anchor = (usize, usize);

impl MarkedSpan {
    fn anchors(&self) -> (Option<Anchor>, Option<Anchor>) {
        (self.prev_anchor, self.next_anchor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanMarks {
    /// Unmatched runs of the incomplete utterance.
    pub del: Vec<MarkedSpan>,
    /// Unmatched runs of the rewrite.
    pub add: Vec<MarkedSpan>,
}

/// Marks unmatched runs of `x` as Del and of `x_star` as Add.
pub fn mark_spans<T>(x: &[T], x_star: &[T], matches: &[(usize, usize)]) -> SpanMarks {
    let mut del = Vec::new();
    let mut add = Vec::new();
    for gap in 0..=matches.len() {
        let prev_anchor = gap.checked_sub(1).map(|g| matches[g]);
        let next_anchor = matches.get(gap).copied();
        let x_range = prev_anchor.map_or(0, |p| p.0 + 1)..next_anchor.map_or(x.len(), |n| n.0);
        let star_range = prev_anchor.map_or(0, |p| p.1 + 1)..next_anchor.map_or(x_star.len(), |n| n.1);
        if !x_range.is_empty() {
            del.push(MarkedSpan { range: x_range, prev_anchor, next_anchor });
        }
        if !star_range.is_empty() {
            add.push(MarkedSpan { range: star_range, prev_anchor, next_anchor });
        }
    }
    SpanMarks { del, add }
}

/// Where an edit lands in the incomplete utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SpanTarget {
    /// Replace these columns.
    Replace(Range<usize>),
    /// Insert before this column (`N` is the `[E]` column).
    InsertBefore(usize),
}

impl SpanTarget {
    pub fn kind(&self) -> EditType {
        match self {
            SpanTarget::Replace(_) => EditType::Substitute,
            SpanTarget::InsertBefore(_) => EditType::Insert,
        }
    }
}

/// An Add span of the rewrite paired with its target in `x`; context rows
/// are not known yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingSpan {
    pub rewrite_range: Range<usize>,
    pub target: SpanTarget,
}

/// Pairs Add spans with Del spans sharing the same anchors (Substitute);
/// unpaired Add spans become Inserts before their following anchor.
/// Unpaired Del spans have no representation and are dropped.
pub fn pair_spans(marks: &SpanMarks, x_len: usize) -> Vec<PendingSpan> {
    marks
        .add
        .iter()
        .map(|add| {
            let target = match marks.del.iter().find(|d| d.anchors() == add.anchors()) {
                Some(del) => SpanTarget::Replace(del.range.clone()),
                None => SpanTarget::InsertBefore(add.next_anchor.map_or(x_len, |a| a.0)),
            };
            PendingSpan { rewrite_range: add.range.clone(), target }
        })
        .collect()
}

/// First contiguous occurrence of `span` in `c`, never crossing a separator.
pub fn locate_in_context(span: &[Token], c: &JoinedContext) -> Option<Range<usize>> {
    if span.is_empty() {
        return None;
    }
    let tokens = c.tokens();
    (0..tokens.len().saturating_sub(span.len() - 1))
        .find(|&start| {
            tokens[start..start + span.len()]
                .iter()
                .zip(span)
                .all(|(ct, st)| ct.kind() != TokenKind::SepS && ct.text() == st.text())
        })
        .map(|start| start..start + span.len())
}

/// A fully placed edit: context rows copied into a target of `x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanOp {
    pub context_rows: Range<usize>,
    pub target: SpanTarget,
}

impl SpanOp {
    pub fn kind(&self) -> EditType {
        self.target.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Full,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SupervisionError {
    #[error("example has no gold rewrite")]
    MissingRewrite,
}

/// Splits `span` into maximal locatable runs, greedily from the left.
/// Returns the located row ranges and whether any token had to be dropped.
fn locate_pieces(span: &[Token], c: &JoinedContext) -> (Vec<Range<usize>>, bool) {
    let mut pieces = Vec::new();
    let mut dropped = false;
    let mut start = 0;
    while start < span.len() {
        let found = (start + 1..=span.len())
            .rev()
            .find_map(|end| locate_in_context(&span[start..end], c).map(|rows| (end, rows)));
        match found {
            Some((end, rows)) => {
                pieces.push(rows);
                start = end;
            }
            None => {
                dropped = true;
                start += 1;
            }
        }
    }
    (pieces, dropped)
}

/// Span operations derived for one example, plus its coverage flag.
pub fn gold_span_ops(
    example: &DialogueExample,
    c: &JoinedContext,
) -> Result<(Vec<SpanOp>, Coverage), SupervisionError> {
    let rewrite = example.gold_rewrite().ok_or(SupervisionError::MissingRewrite)?;
    let x = example.incomplete();
    let x_text: Vec<&str> = x.iter().map(Token::text).collect();
    let star_text: Vec<&str> = rewrite.iter().map(Token::text).collect();
    let matches = lcs_align(&x_text, &star_text);
    let marks = mark_spans(&x_text, &star_text, &matches);
    let mut ops = Vec::new();
    let mut coverage = Coverage::Full;
    for pending in pair_spans(&marks, x.len()) {
        let (pieces, dropped) = locate_pieces(&rewrite[pending.rewrite_range.clone()], c);
        if dropped {
            coverage = Coverage::Partial;
        }
        // Only the first located piece takes the span's own target; the rest
        // are inserted right after it so that reading order is preserved.
        let follow_col = match &pending.target {
            SpanTarget::Replace(cols) => cols.end,
            SpanTarget::InsertBefore(col) => *col,
        };
        for (i, rows) in pieces.into_iter().enumerate() {
            let target = if i == 0 { pending.target.clone() } else { SpanTarget::InsertBefore(follow_col) };
            ops.push(SpanOp { context_rows: rows, target });
        }
    }
    Ok((ops, coverage))
}

/// Builds the gold edit matrix of `example` against its joined context
/// (first `k` connection words appended).
pub fn build_gold_matrix(
    example: &DialogueExample,
    conn: &ConnectionWordList,
    k: usize,
) -> Result<(EditMatrix, Coverage), SupervisionError> {
    let c = join_context(example, conn, k);
    let (ops, coverage) = gold_span_ops(example, &c)?;
    Ok((matrix_from_ops(&ops, c.len(), example.incomplete().len() + 1), coverage))
}

/// Rasterizes span operations into an `rows × cols` matrix.
pub fn matrix_from_ops(ops: &[SpanOp], rows: usize, cols: usize) -> EditMatrix {
    let mut m = EditMatrix::new(rows, cols);
    for op in ops {
        match &op.target {
            SpanTarget::Replace(c) => m.fill(op.context_rows.clone(), c.clone(), EditType::Substitute),
            SpanTarget::InsertBefore(c) => m.fill(op.context_rows.clone(), *c..*c + 1, EditType::Insert),
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{tokenize, words, TokenizationMode};
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn chars(s: &str) -> Vec<Token> {
        tokenize(s, TokenizationMode::PerCharacter)
    }

    fn table1() -> DialogueExample {
        DialogueExample::new(
            vec![chars("北京今天天气如何"), chars("北京今天是阴天")],
            chars("为什么总是这样"),
            Some(chars("北京为什么总是阴天")),
        )
        .unwrap()
    }

    /// Independent recursive LCS length with memoization.
    fn lcs_len_oracle(a: &[u8], b: &[u8]) -> usize {
        fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if i == a.len() || j == b.len() {
                return 0;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let v = if a[i] == b[j] {
                1 + go(a, b, i + 1, j + 1, memo)
            } else {
                go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
            };
            memo.insert((i, j), v);
            v
        }
        go(a, b, 0, 0, &mut HashMap::new())
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_align(&["a", "b", "c"], &["a", "b", "c"]), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(lcs_align(&["a", "b"], &["c", "d"]), vec![]);
        let x: Vec<char> = "为什么总是这样".chars().collect();
        let xs: Vec<char> = "北京为什么总是阴天".chars().collect();
        assert_eq!(lcs_align(&x, &xs), vec![(0, 2), (1, 3), (2, 4), (3, 5), (4, 6)]);
    }

    #[test]
    fn lcs_tie_break_prefers_earliest() {
        assert_eq!(lcs_align(&['x', 'y'], &['y', 'x']), vec![(0, 1)]);
        assert_eq!(lcs_align(&['a', 'a'], &['a']), vec![(0, 0)]);
    }

    proptest! {
        #[test]
        fn lcs_matches_oracle(a in prop::collection::vec(0u8..4, 0..12), b in prop::collection::vec(0u8..4, 0..12)) {
            let m = lcs_align(&a, &b);
            prop_assert_eq!(m.len(), lcs_len_oracle(&a, &b));
            for w in m.windows(2) {
                prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
            }
            for &(i, j) in &m {
                prop_assert_eq!(a[i], b[j]);
            }
        }
    }

    #[test]
    fn mark_table1() {
        let x: Vec<char> = "为什么总是这样".chars().collect();
        let xs: Vec<char> = "北京为什么总是阴天".chars().collect();
        let marks = mark_spans(&x, &xs, &lcs_align(&x, &xs));
        let del: Vec<_> = marks.del.iter().map(|s| s.range.clone()).collect();
        let add: Vec<_> = marks.add.iter().map(|s| s.range.clone()).collect();
        assert_eq!(del, vec![5..7]);
        assert_eq!(add, vec![0..2, 7..9]);
        assert_eq!(marks.add[0].prev_anchor, None);
        assert_eq!(marks.add[0].next_anchor, Some((0, 2)));
    }

    #[test]
    fn mark_identity_and_pure_insertion() {
        let x = ["a", "b"];
        let marks = mark_spans(&x, &x, &lcs_align(&x, &x));
        assert!(marks.del.is_empty() && marks.add.is_empty());
        let marks = mark_spans(&["a"], &["a", "b"], &[(0, 0)]);
        assert!(marks.del.is_empty());
        assert_eq!(marks.add.len(), 1);
        assert_eq!(marks.add[0].range, 1..2);
    }

    #[test]
    fn pair_table1() {
        let x: Vec<char> = "为什么总是这样".chars().collect();
        let xs: Vec<char> = "北京为什么总是阴天".chars().collect();
        let ops = pair_spans(&mark_spans(&x, &xs, &lcs_align(&x, &xs)), x.len());
        assert_eq!(
            ops,
            vec![
                PendingSpan { rewrite_range: 0..2, target: SpanTarget::InsertBefore(0) },
                PendingSpan { rewrite_range: 7..9, target: SpanTarget::Replace(5..7) },
            ]
        );
    }

    #[test]
    fn pair_end_insert_and_pure_deletion() {
        let ops = pair_spans(&mark_spans(&["a"], &["a", "b"], &[(0, 0)]), 1);
        assert_eq!(ops, vec![PendingSpan { rewrite_range: 1..2, target: SpanTarget::InsertBefore(1) }]);
        let x = ["a", "d1", "b", "d2", "c"];
        let xs = ["a", "b", "c"];
        let marks = mark_spans(&x, &xs, &lcs_align(&x, &xs));
        assert_eq!(marks.del.len(), 2);
        assert!(pair_spans(&marks, x.len()).is_empty());
    }

    #[test]
    fn locate_examples() {
        let ex = table1();
        let c = join_context(&ex, &ConnectionWordList::empty(), 0);
        assert_eq!(locate_in_context(&chars("阴天"), &c), Some(14..16));
        assert_eq!(locate_in_context(&words(&["zz"]), &c), None);
        // 北京 occurs in both utterances; the first wins.
        assert_eq!(locate_in_context(&chars("北京"), &c), Some(0..2));
        // 如何北 would straddle the separator.
        assert_eq!(locate_in_context(&chars("如何北"), &c), None);
    }

    proptest! {
        #[test]
        fn locate_matches_exhaustive_scan(
            utts in prop::collection::vec(prop::collection::vec(0u8..3, 1..5), 1..4),
            span in prop::collection::vec(0u8..3, 1..3),
        ) {
            let to_tokens = |v: &[u8]| words(&v.iter().map(|b| format!("w{b}")).collect::<Vec<_>>());
            let ex = DialogueExample::new(utts.iter().map(|u| to_tokens(u)).collect(), to_tokens(&[0]), None).unwrap();
            let c = join_context(&ex, &ConnectionWordList::empty(), 0);
            let span_tokens = to_tokens(&span);
            // Oracle: scan every (utterance, offset) for an exact window.
            let mut best: Option<usize> = None;
            for (u, utt) in utts.iter().enumerate() {
                for off in 0..utt.len() {
                    if off + span.len() <= utt.len() && utt[off..off + span.len()] == span[..] {
                        let pos = c.utterance_boundaries()[u].start + off;
                        best = Some(best.map_or(pos, |b: usize| b.min(pos)));
                    }
                }
            }
            prop_assert_eq!(locate_in_context(&span_tokens, &c), best.map(|s| s..s + span.len()));
        }
    }

    #[test]
    fn gold_matrix_table1() {
        let ex = table1();
        let (m, cov) = build_gold_matrix(&ex, &ConnectionWordList::empty(), 0).unwrap();
        assert_eq!(cov, Coverage::Full);
        assert_eq!((m.rows(), m.cols()), (16, 8));
        let mut expected = EditMatrix::new(16, 8);
        expected.fill(14..16, 5..7, EditType::Substitute);
        expected.fill(0..2, 0..1, EditType::Insert);
        assert_eq!(m, expected);
    }

    #[test]
    fn gold_matrix_identity_and_partial() {
        let ex = DialogueExample::new(vec![words(&["a", "b"])], words(&["c"]), Some(words(&["c"]))).unwrap();
        let (m, cov) = build_gold_matrix(&ex, &ConnectionWordList::empty(), 0).unwrap();
        assert!(m.is_all_none());
        assert_eq!(cov, Coverage::Full);

        let ex = DialogueExample::new(vec![words(&["a", "b"])], words(&["c"]), Some(words(&["a", "zz", "c"]))).unwrap();
        let (m, cov) = build_gold_matrix(&ex, &ConnectionWordList::empty(), 0).unwrap();
        assert_eq!(cov, Coverage::Partial);
        assert_eq!(m.count(EditType::Insert), 1);

        let ex = DialogueExample::new(vec![words(&["a"])], words(&["c"]), None).unwrap();
        assert_eq!(
            build_gold_matrix(&ex, &ConnectionWordList::empty(), 0).unwrap_err(),
            SupervisionError::MissingRewrite
        );
    }

    #[test]
    fn gold_matrix_uses_connection_words() {
        let ex = DialogueExample::new(
            vec![words(&["the", "cat"])],
            words(&["its", "tail"]),
            Some(words(&["tail", "of", "the", "cat"])),
        )
        .unwrap();
        let conn = ConnectionWordList::from_words(&["of"]);
        let (_, cov) = build_gold_matrix(&ex, &conn, 0).unwrap();
        assert_eq!(cov, Coverage::Partial);
        let (m, cov) = build_gold_matrix(&ex, &conn, 1).unwrap();
        assert_eq!(cov, Coverage::Full);
        assert_eq!(m.rows(), 4);
    }

    #[test]
    fn split_span_pieces_follow_substitution() {
        // "b d" is not contiguous in c, so it is placed as two pieces.
        let ex = DialogueExample::new(
            vec![words(&["a", "b"]), words(&["d"])],
            words(&["x", "it", "y"]),
            Some(words(&["x", "b", "d", "y"])),
        )
        .unwrap();
        let c = join_context(&ex, &ConnectionWordList::empty(), 0);
        let (ops, cov) = gold_span_ops(&ex, &c).unwrap();
        assert_eq!(cov, Coverage::Full);
        assert_eq!(
            ops,
            vec![
                SpanOp { context_rows: 1..2, target: SpanTarget::Replace(1..2) },
                SpanOp { context_rows: 3..4, target: SpanTarget::InsertBefore(2) },
            ]
        );
    }
}
