//! Turns an edit matrix into a rewritten utterance.
//!
//! Connected regions are found with the classic two-pass labeling algorithm
//! (provisional labels plus a union-find of equivalences), each region is
//! replaced by its minimal covering rectangle, overlapping rectangles are
//! resolved into a conflict-free [`EditProgram`], and the program is applied
//! column by column to the prepared incomplete utterance.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dialogue::{JoinedContext, Token, TokenKind};
use crate::edit::{EditMatrix, EditType};

/// A 4-connected group of equally labeled non-None cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledRegion {
    pub edit_type: EditType,
    /// Cells in row-major order.
    pub cells: Vec<(usize, usize)>,
}

/// Disjoint-set forest over provisional labels. The root of every set is its
/// smallest member.
#[derive(Debug, Default)]
struct Equivalences {
    parent: Vec<usize>,
}

impl Equivalences {
    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Two-pass connected-component labeling with left/top neighbors.
///
/// Regions come out ordered by their first cell in row-major order.
pub fn two_pass_label(y: &EditMatrix) -> Vec<LabeledRegion> {
    let (rows, cols) = (y.rows(), y.cols());
    let mut labels: Vec<Option<usize>> = vec![None; rows * cols];
    let mut eq = Equivalences::default();

    // First pass: provisional labels, recording equivalences.
    for r in 0..rows {
        for c in 0..cols {
            let t = y.get(r, c);
            if t == EditType::None {
                continue;
            }
            let left = (c > 0 && y.get(r, c - 1) == t).then(|| labels[r * cols + c - 1]).flatten();
            let top = (r > 0 && y.get(r - 1, c) == t).then(|| labels[(r - 1) * cols + c]).flatten();
            labels[r * cols + c] = Some(match (left, top) {
                (None, None) => eq.make(),
                (Some(l), None) => l,
                (None, Some(t)) => t,
                (Some(l), Some(t)) => {
                    eq.union(l, t);
                    l.min(t)
                }
            });
        }
    }

    // Second pass: resolve to canonical labels.
    let mut regions: BTreeMap<usize, LabeledRegion> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if let Some(label) = labels[r * cols + c] {
                let root = eq.find(label);
                regions
                    .entry(root)
                    .or_insert_with(|| {
                        order.push(root);
                        LabeledRegion { edit_type: y.get(r, c), cells: Vec::new() }
                    })
                    .cells
                    .push((r, c));
            }
        }
    }
    order.into_iter().filter_map(|root| regions.remove(&root)).collect()
}

/// A standardized edit region: rows of the context, columns of `x`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rectangle {
    pub edit_type: EditType,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    /// Number of cells of the region the rectangle was built from.
    pub support: usize,
}

/// Bounding box of a region.
///
/// # Panics
/// Panics on an empty region.
pub fn min_cover_rect(region: &LabeledRegion) -> Rectangle {
    assert!(!region.cells.is_empty(), "empty region");
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for &(r, c) in &region.cells {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    Rectangle { edit_type: region.edit_type, rows: r0..r1 + 1, cols: c0..c1 + 1, support: region.cells.len() }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Insert { rows: Range<usize>, before: usize },
    Substitute { rows: Range<usize>, cols: Range<usize> },
}

impl EditOp {
    fn column(&self) -> usize {
        match self {
            EditOp::Insert { before, .. } => *before,
            EditOp::Substitute { cols, .. } => cols.start,
        }
    }

    pub fn rows(&self) -> &Range<usize> {
        match self {
            EditOp::Insert { rows, .. } | EditOp::Substitute { rows, .. } => rows,
        }
    }
}

/// Conflict-free edits sorted by column, Inserts first at equal columns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EditProgram {
    ops: Vec<EditOp>,
}

impl EditProgram {
    pub fn ops(&self) -> &[EditOp] {
        &self.ops
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Resolves overlapping rectangles into an [`EditProgram`].
///
/// Overlapping Substitutes: the one with more region cells survives, ties go
/// to the smaller `row_start` (then the smaller `col_start`). Inserts collapse
/// to their leftmost column and are dropped when that column lies strictly
/// inside a surviving Substitute.
pub fn resolve_conflicts(rects: &[Rectangle]) -> EditProgram {
    let mut subs: Vec<&Rectangle> = rects.iter().filter(|r| r.edit_type == EditType::Substitute).collect();
    subs.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then(a.rows.start.cmp(&b.rows.start))
            .then(a.cols.start.cmp(&b.cols.start))
            .then(a.rows.end.cmp(&b.rows.end))
            .then(a.cols.end.cmp(&b.cols.end))
    });
    let mut kept: Vec<&Rectangle> = Vec::new();
    for s in subs {
        if kept.iter().all(|k| !overlaps(&k.cols, &s.cols)) {
            kept.push(s);
        }
    }

    let mut ops: Vec<EditOp> =
        kept.iter().map(|s| EditOp::Substitute { rows: s.rows.clone(), cols: s.cols.clone() }).collect();
    for r in rects.iter().filter(|r| r.edit_type == EditType::Insert) {
        let before = r.cols.start;
        if kept.iter().any(|k| k.cols.start < before && before < k.cols.end) {
            continue;
        }
        ops.push(EditOp::Insert { rows: r.rows.clone(), before });
    }
    ops.sort_by(|a, b| {
        let rank = |op: &EditOp| matches!(op, EditOp::Substitute { .. }) as u8;
        a.column()
            .cmp(&b.column())
            .then(rank(a).cmp(&rank(b)))
            .then(a.rows().start.cmp(&b.rows().start))
            .then(a.rows().end.cmp(&b.rows().end))
    });
    ops.dedup();
    EditProgram { ops }
}

fn emit_rows(out: &mut Vec<Token>, c: &JoinedContext, rows: &Range<usize>) {
    let tokens = c.tokens();
    let rows = rows.start.min(tokens.len())..rows.end.min(tokens.len());
    out.extend(tokens[rows].iter().filter(|t| t.kind() != TokenKind::SepS).cloned());
}

/// Applies `program` to `x_prepared` (which ends with `[E]`).
pub fn apply_edits(x_prepared: &[Token], c: &JoinedContext, program: &EditProgram) -> Vec<Token> {
    let mut out = Vec::with_capacity(x_prepared.len());
    let mut ops = program.ops.iter().peekable();
    let mut col = 0;
    while col < x_prepared.len() {
        let mut skip_to = None;
        while let Some(op) = ops.next_if(|op| op.column() <= col) {
            match op {
                EditOp::Insert { rows, before } if *before == col => emit_rows(&mut out, c, rows),
                EditOp::Substitute { rows, cols } if cols.start == col => {
                    emit_rows(&mut out, c, rows);
                    skip_to = Some(cols.end.max(col + 1));
                    break;
                }
                // Ops behind the cursor were swallowed by an earlier Substitute.
                _ => {}
            }
        }
        match skip_to {
            Some(next) => col = next,
            None => {
                let tok = &x_prepared[col];
                if tok.kind() != TokenKind::EndE {
                    out.push(tok.clone());
                }
                col += 1;
            }
        }
    }
    out
}

/// Standardizes a (possibly ragged) matrix into an [`EditProgram`].
pub fn standardize(y: &EditMatrix) -> EditProgram {
    let rects: Vec<Rectangle> = two_pass_label(y).iter().map(min_cover_rect).collect();
    resolve_conflicts(&rects)
}

/// Full generation path from an edit matrix to the rewritten utterance.
pub fn generate(y: &EditMatrix, x_prepared: &[Token], c: &JoinedContext) -> (Vec<Token>, EditProgram) {
    let program = standardize(y);
    let out = apply_edits(x_prepared, c, &program);
    (out, program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{
        join_context, prepare_incomplete, tokenize, words, ConnectionWordList, DialogueExample, TokenizationMode,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeSet, VecDeque};

    fn matrix(rows: &[&[u8]]) -> EditMatrix {
        let cols = rows.first().map_or(0, |r| r.len());
        let idx: Vec<u8> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EditMatrix::from_indices(rows.len(), cols, &idx).unwrap()
    }

    /// BFS flood fill oracle: set of (type, cell set) regions.
    fn flood_fill(y: &EditMatrix) -> BTreeSet<(EditType, BTreeSet<(usize, usize)>)> {
        let mut seen = vec![false; y.rows() * y.cols()];
        let mut out = BTreeSet::new();
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                let t = y.get(r, c);
                if t == EditType::None || seen[r * y.cols() + c] {
                    continue;
                }
                let mut cells = BTreeSet::new();
                let mut queue = VecDeque::from([(r, c)]);
                seen[r * y.cols() + c] = true;
                while let Some((cr, cc)) = queue.pop_front() {
                    cells.insert((cr, cc));
                    let mut nbrs = vec![];
                    if cr > 0 {
                        nbrs.push((cr - 1, cc));
                    }
                    if cc > 0 {
                        nbrs.push((cr, cc - 1));
                    }
                    if cr + 1 < y.rows() {
                        nbrs.push((cr + 1, cc));
                    }
                    if cc + 1 < y.cols() {
                        nbrs.push((cr, cc + 1));
                    }
                    for (nr, nc) in nbrs {
                        if !seen[nr * y.cols() + nc] && y.get(nr, nc) == t {
                            seen[nr * y.cols() + nc] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
                out.insert((t, cells));
            }
        }
        out
    }

    fn as_set(regions: &[LabeledRegion]) -> BTreeSet<(EditType, BTreeSet<(usize, usize)>)> {
        regions.iter().map(|r| (r.edit_type, r.cells.iter().copied().collect())).collect()
    }

    #[test]
    fn label_basic() {
        assert!(two_pass_label(&EditMatrix::new(3, 4)).is_empty());
        let mut y = EditMatrix::new(4, 5);
        y.fill(1..3, 1..4, EditType::Substitute);
        let regions = two_pass_label(&y);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].cells.len(), 6);
    }

    #[test]
    fn label_merges_u_shape() {
        // The two arms only meet in the bottom row, forcing an equivalence merge.
        let y = matrix(&[&[1, 0, 1], &[1, 0, 1], &[1, 1, 1]]);
        let regions = two_pass_label(&y);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].cells.len(), 7);
    }

    #[test]
    fn label_excludes_diagonals_and_separates_types() {
        let y = matrix(&[&[1, 0], &[0, 1]]);
        assert_eq!(two_pass_label(&y).len(), 2);
        let y = matrix(&[&[1, 2]]);
        assert_eq!(two_pass_label(&y).len(), 2);
    }

    #[test]
    fn label_matches_flood_fill_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let idx: Vec<u8> = (0..120).map(|_| rng.random_range(0..3)).collect();
            let y = EditMatrix::from_indices(12, 10, &idx).unwrap();
            assert_eq!(as_set(&two_pass_label(&y)), flood_fill(&y));
        }
    }

    #[test]
    fn cover_rect_examples() {
        let region = LabeledRegion { edit_type: EditType::Insert, cells: vec![(0, 0), (1, 0), (1, 1)] };
        let r = min_cover_rect(&region);
        assert_eq!((r.rows, r.cols), (0..2, 0..2));
        let single = LabeledRegion { edit_type: EditType::Substitute, cells: vec![(3, 4)] };
        let r = min_cover_rect(&single);
        assert_eq!((r.rows, r.cols, r.support), (3..4, 4..5, 1));
    }

    proptest! {
        #[test]
        fn cover_rect_is_min_max(cells in prop::collection::btree_set((0usize..20, 0usize..20), 1..30)) {
            let region = LabeledRegion { edit_type: EditType::Substitute, cells: cells.iter().copied().collect() };
            let r = min_cover_rect(&region);
            let rmin = cells.iter().map(|c| c.0).min().unwrap();
            let rmax = cells.iter().map(|c| c.0).max().unwrap();
            let cmin = cells.iter().map(|c| c.1).min().unwrap();
            let cmax = cells.iter().map(|c| c.1).max().unwrap();
            prop_assert_eq!(r.rows, rmin..rmax + 1);
            prop_assert_eq!(r.cols, cmin..cmax + 1);
        }
    }

    fn rect(t: EditType, rows: Range<usize>, cols: Range<usize>) -> Rectangle {
        let support = rows.len() * cols.len();
        Rectangle { edit_type: t, rows, cols, support }
    }

    #[test]
    fn resolve_disjoint_sorted() {
        let p = resolve_conflicts(&[rect(EditType::Substitute, 0..1, 3..4), rect(EditType::Insert, 2..3, 1..2)]);
        assert_eq!(p.ops(), &[EditOp::Insert { rows: 2..3, before: 1 }, EditOp::Substitute { rows: 0..1, cols: 3..4 }]);
    }

    #[test]
    fn resolve_larger_substitute_wins() {
        let p = resolve_conflicts(&[rect(EditType::Substitute, 0..1, 2..4), rect(EditType::Substitute, 4..6, 3..6)]);
        assert_eq!(p.ops(), &[EditOp::Substitute { rows: 4..6, cols: 3..6 }]);
    }

    #[test]
    fn resolve_insert_order_and_drop() {
        let p = resolve_conflicts(&[rect(EditType::Insert, 5..6, 0..1), rect(EditType::Insert, 1..3, 0..1)]);
        assert_eq!(p.ops(), &[EditOp::Insert { rows: 1..3, before: 0 }, EditOp::Insert { rows: 5..6, before: 0 }]);
        let p = resolve_conflicts(&[rect(EditType::Substitute, 0..1, 1..4), rect(EditType::Insert, 2..3, 2..3)]);
        assert_eq!(p.ops(), &[EditOp::Substitute { rows: 0..1, cols: 1..4 }]);
        // An Insert at the Substitute's first column survives and goes first.
        let p = resolve_conflicts(&[rect(EditType::Substitute, 0..1, 1..4), rect(EditType::Insert, 2..3, 1..3)]);
        assert_eq!(p.ops(), &[EditOp::Insert { rows: 2..3, before: 1 }, EditOp::Substitute { rows: 0..1, cols: 1..4 }]);
    }

    proptest! {
        #[test]
        fn resolved_substitutes_disjoint(
            raw in prop::collection::vec((0usize..2, 0usize..8, 1usize..4, 0usize..8, 1usize..4), 0..12)
        ) {
            let rects: Vec<Rectangle> = raw
                .iter()
                .map(|&(t, r, rl, c, cl)| {
                    let t = if t == 0 { EditType::Substitute } else { EditType::Insert };
                    rect(t, r..r + rl, c..c + cl)
                })
                .collect();
            let p = resolve_conflicts(&rects);
            let subs: Vec<&Range<usize>> = p.ops().iter().filter_map(|op| match op {
                EditOp::Substitute { cols, .. } => Some(cols),
                _ => None,
            }).collect();
            for (i, a) in subs.iter().enumerate() {
                for b in &subs[i + 1..] {
                    prop_assert!(!overlaps(a, b));
                }
            }
            for op in p.ops() {
                if let EditOp::Insert { before, .. } = op {
                    for s in &subs {
                        prop_assert!(!(s.start < *before && *before < s.end));
                    }
                }
            }
        }
    }

    fn chars(s: &str) -> Vec<Token> {
        tokenize(s, TokenizationMode::PerCharacter)
    }

    fn texts(tokens: &[Token]) -> String {
        tokens.iter().map(Token::text).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn apply_identity_and_end_insert() {
        let ex = DialogueExample::new(vec![words(&["p", "q"])], words(&["a", "b"]), None).unwrap();
        let c = join_context(&ex, &ConnectionWordList::empty(), 0);
        let x = prepare_incomplete(ex.incomplete());
        assert_eq!(texts(&apply_edits(&x, &c, &EditProgram::default())), "a b");
        let p = EditProgram { ops: vec![EditOp::Insert { rows: 0..2, before: 2 }] };
        assert_eq!(texts(&apply_edits(&x, &c, &p)), "a b p q");
    }

    #[test]
    fn apply_table1_program() {
        let ex = DialogueExample::new(
            vec![chars("北京今天天气如何"), chars("北京今天是阴天")],
            chars("为什么总是这样"),
            None,
        )
        .unwrap();
        let c = join_context(&ex, &ConnectionWordList::empty(), 0);
        let x = prepare_incomplete(ex.incomplete());
        let p = EditProgram {
            ops: vec![EditOp::Insert { rows: 0..2, before: 0 }, EditOp::Substitute { rows: 14..16, cols: 5..7 }],
        };
        let out: String = apply_edits(&x, &c, &p).iter().map(Token::text).collect();
        assert_eq!(out, "北京为什么总是阴天");
    }

    #[test]
    fn apply_strips_separators() {
        let ex = DialogueExample::new(vec![words(&["p"]), words(&["q"])], words(&["a"]), None).unwrap();
        let c = join_context(&ex, &ConnectionWordList::empty(), 0);
        let x = prepare_incomplete(ex.incomplete());
        let p = EditProgram { ops: vec![EditOp::Substitute { rows: 0..3, cols: 0..1 }] };
        assert_eq!(texts(&apply_edits(&x, &c, &p)), "p q");
    }

    #[test]
    fn generate_coreference_case() {
        // "what about it" where "it" refers to "the new phone".
        let ex = DialogueExample::new(
            vec![words(&["i", "bought", "the", "new", "phone"]), words(&["nice"])],
            words(&["is", "it", "expensive"]),
            None,
        )
        .unwrap();
        let c = join_context(&ex, &ConnectionWordList::empty(), 0);
        let x = prepare_incomplete(ex.incomplete());
        let mut y = EditMatrix::new(c.len(), x.len());
        y.fill(2..5, 1..2, EditType::Substitute);
        // A ragged extra cell still standardizes to the same rectangle.
        y.set(4, 1, EditType::Substitute);
        let (out, _) = generate(&y, &x, &c);
        assert_eq!(texts(&out), "is the new phone expensive");
        let (out, program) = generate(&EditMatrix::new(c.len(), x.len()), &x, &c);
        assert!(program.is_empty());
        assert_eq!(texts(&out), "is it expensive");
    }

    proptest! {
        #[test]
        fn generated_tokens_come_from_dialogue(idx in prop::collection::vec(0u8..3, 7 * 4)) {
            let ex = DialogueExample::new(vec![words(&["p", "q", "r"]), words(&["s", "t"])], words(&["a", "b", "c"]), None).unwrap();
            let c = join_context(&ex, &ConnectionWordList::from_words(&["of"]), 0);
            let x = prepare_incomplete(ex.incomplete());
            let y = EditMatrix::from_indices(6, 4, &idx[..24]).unwrap();
            let (out, _) = generate(&y, &x, &c);
            for t in &out {
                prop_assert!(!t.is_special());
                prop_assert!(["p", "q", "r", "s", "t", "a", "b", "c"].contains(&t.text()));
            }
        }
    }
}
